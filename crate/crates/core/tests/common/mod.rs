//! Shared helpers for the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use structgan::models::{Binding, Generator, GeneratorKind, GeneratorSpec, ParamSet};
use structgan::structured::{self, PadKind, PadMode};
use structgan::tiling::{crop_tiled_var, PatternName, TilingPattern};
use structgan::{Tape, Tensor, Var};

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut Rng64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

const STEP: f64 = 1e-6;

/// Random linear functional of `out`, so every output entry carries a
/// distinct weight in the scalar being differentiated.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).expect("weights match the output");
    tape.sum(p)
}

fn forward_value<F>(inputs: &[Tensor<f64>], weights: &Tensor<f64>, f: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> structgan::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let l = weighted_sum(&mut tape, out, weights);
    tape.value(l).item()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over all inputs, per input `|a - n| / max(|(a, n)|, 1e-8)` in
/// the 2-norm.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> structgan::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let weights = Tensor::randn(tape.shape(out), 1.0, &mut rng(seed ^ 0x5eed));
    let l = weighted_sum(&mut tape, out, &weights);
    let grads = tape.backward(l).expect("backward");

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = match grads.get(*v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut work = inputs.to_vec();
        let (mut diff, mut scale) = (0.0, 0.0);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + STEP;
            let up = forward_value(&work, &weights, &f);
            work[i].data_mut()[j] = x0 - STEP;
            let down = forward_value(&work, &weights, &f);
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            diff += (analytic[j] - numeric).powi(2);
            scale += analytic[j].powi(2) + numeric.powi(2);
        }
        worst = worst.max(diff.sqrt() / scale.sqrt().max(1e-8));
    }
    worst
}

/// Gradient check of `loss(params)` against named parameters of a model,
/// the way training binds them.
pub fn param_gradcheck<F>(params: &ParamSet<f64>, names: &[&str], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &mut Binding<f64>, &ParamSet<f64>) -> Var,
{
    let mut tape = Tape::new();
    let mut bind = Binding::trainable();
    let loss = f(&mut tape, &mut bind, params);
    let grads = tape.backward(loss).expect("backward");
    let analytic = bind.gradients(&grads);
    let eval = |p: &ParamSet<f64>| {
        let mut tape = Tape::new();
        let mut bind = Binding::frozen();
        let l = f(&mut tape, &mut bind, p);
        tape.value(l).item()
    };
    let mut worst = 0.0f64;
    for name in names {
        let base = params.get(name).expect("named parameter").clone();
        let a = analytic.get(*name).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
        let (mut diff, mut scale) = (0.0, 0.0);
        let mut p = params.clone();
        for j in 0..base.numel() {
            let x0 = base.data()[j];
            p.params.get_mut(*name).unwrap().data_mut()[j] = x0 + STEP;
            let up = eval(&p);
            p.params.get_mut(*name).unwrap().data_mut()[j] = x0 - STEP;
            let down = eval(&p);
            p.params.get_mut(*name).unwrap().data_mut()[j] = x0;
            let n = (up - down) / (2.0 * STEP);
            diff += (a.data()[j] - n).powi(2);
            scale += a.data()[j].powi(2) + n.powi(2);
        }
        worst = worst.max(diff.sqrt() / scale.sqrt().max(1e-8));
    }
    worst
}

pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;

/// One family of structured-layer gradient checks; `run` draws a random
/// instance and returns its relative error.
pub struct Case {
    pub name: &'static str,
    pub run: fn(&mut Rng64) -> f64,
}

fn any_pad(rng: &mut Rng64) -> PadKind {
    [PadKind::Zero, PadKind::Circular, PadKind::Flipwrap, PadKind::Brickwrap][rng.gen_range(0..4)]
}

fn sym_conv_case(rng: &mut Rng64) -> f64 {
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let s = [4, 6][rng.gen_range(0..2)];
    let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
    let pad = PadMode::same(any_pad(rng), k);
    let x = randn(&[n, c, s, s], rng);
    let free = randn(&[o, c, k, k.div_ceil(2)], rng);
    gradcheck(&[x, free], rng.gen(), |t, v| structured::sym_conv(t, v[0], v[1], k, pad))
}

fn expand_sym_case(rng: &mut Rng64) -> f64 {
    let h = rng.gen_range(1..5);
    let x = randn(&[rng.gen_range(1..3), rng.gen_range(1..4), h], rng);
    gradcheck(&[x], rng.gen(), |t, v| structured::expand_symmetric(t, v[0], 2 * h - 1))
}

fn expand_anti_case(rng: &mut Rng64) -> f64 {
    let h = rng.gen_range(1..5);
    let x = randn(&[rng.gen_range(1..3), rng.gen_range(1..4), h], rng);
    gradcheck(&[x], rng.gen(), |t, v| structured::expand_antisymmetric(t, v[0], 2 * h + 1))
}

fn fold_case(rng: &mut Rng64) -> f64 {
    let w = 2 * rng.gen_range(0..4) + 1;
    let x = randn(&[rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4), w], rng);
    gradcheck(&[x], rng.gen(), |t, v| structured::fold_symmetric(t, v[0]))
}

/// The flip-encoding first map `fc(z) + mirror(fc(flip(z)))`, checked
/// against the latent and against the shared dense weights.
fn flip_branch_case(rng: &mut Rng64) -> f64 {
    let spec = GeneratorSpec {
        z_dim: rng.gen_range(2..6),
        zprime_dim: 0,
        channels: vec![2, 1],
        base: rng.gen_range(2..4),
        ..GeneratorSpec::desk(GeneratorKind::Flip)
    };
    let mut g = Generator::<f32>::new(spec, rng).unwrap().cast::<f64>();
    for (_, t) in g.params.iter_mut() {
        *t = randn(t.shape(), rng);
    }
    let z = randn(&[2, g.spec.z_dim], rng);
    let weights = randn(&[2, 2, g.spec.base, g.spec.base], rng);
    let gz = g.clone();
    let wz = weights.clone();
    let e_z = gradcheck(&[z.clone()], rng.gen(), move |t, v| {
        let mut bind = Binding::frozen();
        let h = gz.first_map(t, &mut bind, v[0])?;
        let w = t.constant(wz.clone());
        t.mul(h, w)
    });
    let e_w = param_gradcheck(&g.params, &["fc.w", "fc.b"], |t, bind, p| {
        let gp = Generator::from_params(g.spec.clone(), p.clone()).unwrap();
        let zv = t.constant(z.clone());
        let h = gp.first_map(t, bind, zv).unwrap();
        let w = t.constant(weights.clone());
        let m = t.mul(h, w).unwrap();
        t.sum(m)
    });
    e_z.max(e_w)
}

fn circular_conv_case(rng: &mut Rng64) -> f64 {
    let k = [3, 5][rng.gen_range(0..2)];
    let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
    let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
    let x = randn(&[n, c, h, w], rng);
    let kern = randn(&[o, c, k, k], rng);
    gradcheck(&[x, kern], rng.gen(), |t, v| structured::conv2d(t, v[0], v[1], PadMode::same(PadKind::Circular, k)))
}

fn tiled_crop_case(rng: &mut Rng64) -> f64 {
    let pattern = TilingPattern::get(PatternName::ALL[rng.gen_range(0..4)]);
    let s = [4, 6][rng.gen_range(0..2)];
    let n = rng.gen_range(1..4);
    let crop = rng.gen_range(2..2 * s);
    let offsets: Vec<(i64, i64)> =
        (0..n).map(|_| (rng.gen_range(-2 * s as i64..3 * s as i64), rng.gen_range(-2 * s as i64..3 * s as i64))).collect();
    let x = randn(&[n, 2, s, s], rng);
    gradcheck(&[x], rng.gen(), move |t, v| crop_tiled_var(t, v[0], &pattern, crop, &offsets))
}

pub fn structured_cases() -> Vec<Case> {
    vec![
        Case { name: "sym_conv", run: sym_conv_case },
        Case { name: "expand_symmetric", run: expand_sym_case },
        Case { name: "expand_antisymmetric", run: expand_anti_case },
        Case { name: "fold_symmetric", run: fold_case },
        Case { name: "flip_branch", run: flip_branch_case },
        Case { name: "circular_conv", run: circular_conv_case },
        Case { name: "tiled_crop", run: tiled_crop_case },
    ]
}

/// Worst error of `case` over `n` seeded instances.
pub fn worst_over(case: &Case, n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..n).map(|_| (case.run)(&mut r)).fold(0.0, f64::max)
}

/// Direct 7-loop cross-correlation with padding resolved per pixel.
pub fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, pad: PadMode) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ph = if kh == 1 { 0 } else { pad.width } as i64;
    let pw = if kw == 1 { 0 } else { pad.width } as i64;
    let oh = (h as i64 + 2 * ph - kh as i64 + 1) as usize;
    let ow = (w as i64 + 2 * pw - kw as i64 + 1) as usize;
    // Zero and circular padding are resolved here directly; the other wraps
    // defer to the pattern geometry, which is checked on its own elsewhere.
    let edges = pad.kind.pattern().map(|p| TilingPattern::get(p).edges);
    let (hi, wi) = (h as i64, w as i64);
    let fetch = |b: usize, ch: usize, y: i64, xx: i64| -> f64 {
        let (y, xx) = match pad.kind {
            PadKind::Zero => {
                if y < 0 || xx < 0 || y >= hi || xx >= wi {
                    return 0.0;
                }
                (y, xx)
            }
            PadKind::Circular => (y.rem_euclid(hi), xx.rem_euclid(wi)),
            _ => edges.as_ref().unwrap().resolve(y, xx, hi, wi).expect("pad resolves"),
        };
        x.at(&[b, ch, y as usize, xx as usize])
    };
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                acc += k.at(&[oc, ch, u, v]) * fetch(b, ch, i as i64 + u as i64 - ph, j as i64 + v as i64 - pw);
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// `(C+1) x (C+1)` inner products of `[1; features]` over positions,
/// divided by `C^1.5`.
pub fn gram_oracle(f: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let k = c + 1;
    let val = |m: usize, y: usize, x: usize| if m == 0 { 1.0 } else { f.at(&[m - 1, y, x]) };
    let mut out = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += val(a, y, x) * val(b, y, x);
                }
            }
            out[a * k + b] = s / (c as f64).powf(1.5);
        }
    }
    Tensor::new(&[k, k], out).unwrap()
}
