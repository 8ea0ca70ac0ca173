//! Reverse-mode gradients against central differences, in 64-bit.

mod common;

use common::*;
use rand::Rng;
use structgan::models::{
    Binding, Discriminator, DiscriminatorKind, DiscriminatorSpec, Generator, GeneratorKind, GeneratorSpec, Phase,
};
use structgan::structured::PadKind;
use structgan::tensor::{Activation, BnMode, PlaneMap};
use structgan::{Tape, Tensor, Var};

fn check_many(name: &str, mut one: impl FnMut(&mut Rng64) -> f64) {
    let mut r = rng(name.len() as u64 * 7919);
    for i in 0..INSTANCES {
        let e = one(&mut r);
        assert!(e <= GRAD_TOL, "{name} instance {i}: relative error {e:.3e}");
    }
}

fn dims(r: &mut Rng64, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

#[test]
fn plane_gather() {
    check_many("plane_gather", |r| {
        let (h, w, oh, ow) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..6));
        let mut r2 = rng(r.gen());
        let map = PlaneMap::from_fn(h, w, oh, ow, |_, _| {
            r2.gen_bool(0.8).then(|| (r2.gen_range(0..h), r2.gen_range(0..w)))
        });
        let x = randn(&[2, 2, h, w], r);
        gradcheck(&[x], r.gen(), move |t, v| t.plane_gather(v[0], &map))
    });
}

#[test]
fn conv_valid() {
    check_many("conv_valid", |r| {
        let (kh, kw) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = randn(&[r.gen_range(1..3), 2, kh + r.gen_range(0..3), kw + r.gen_range(0..3)], r);
        let k = randn(&[r.gen_range(1..4), 2, kh, kw], r);
        gradcheck(&[x, k], r.gen(), |t, v| t.conv_valid(v[0], v[1]))
    });
}

#[test]
fn upsample_and_pool() {
    check_many("upsample2", |r| {
        let x = randn(&dims(r, 4, 1, 4), r);
        gradcheck(&[x], r.gen(), |t, v| t.upsample2(v[0]))
    });
    check_many("avgpool2", |r| {
        let s = dims(r, 2, 1, 3);
        let x = randn(&[s[0], s[1], 2 * r.gen_range(1..3), 2 * r.gen_range(1..3)], r);
        gradcheck(&[x], r.gen(), |t, v| t.avgpool2(v[0]))
    });
}

#[test]
fn dense_and_bias() {
    check_many("dense", |r| {
        let (n, f, g) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
        let x = randn(&[n, f], r);
        let w = randn(&[f, g], r);
        let b = randn(&[g], r);
        if r.gen_bool(0.5) {
            gradcheck(&[x, w, b], r.gen(), |t, v| t.dense(v[0], v[1], Some(v[2])))
        } else {
            gradcheck(&[x, w], r.gen(), |t, v| t.dense(v[0], v[1], None))
        }
    });
    check_many("channel_bias", |r| {
        let s = dims(r, 4, 1, 4);
        let x = randn(&s, r);
        let b = randn(&[s[1]], r);
        gradcheck(&[x, b], r.gen(), |t, v| t.channel_bias(v[0], v[1]))
    });
}

#[test]
fn batchnorm_both_modes() {
    check_many("batchnorm_train", |r| {
        let s = [r.gen_range(2..4), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
        let x = randn(&s, r);
        let (g, b) = (randn(&[s[1]], r), randn(&[s[1]], r));
        gradcheck(&[x, g, b], r.gen(), |t, v| Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Train)?.0))
    });
    check_many("batchnorm_eval", |r| {
        let s = dims(r, 4, 1, 4);
        let x = randn(&s, r);
        let (g, b) = (randn(&[s[1]], r), randn(&[s[1]], r));
        let mean: Vec<f64> = (0..s[1]).map(|_| r.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..s[1]).map(|_| r.gen_range(0.1..2.0)).collect();
        gradcheck(&[x, g, b], r.gen(), move |t, v| {
            Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.0)
        })
    });
}

#[test]
fn activations() {
    let kinds = [
        Activation::Relu,
        Activation::LeakyRelu(0.2),
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Softplus,
        Activation::Abs,
        Activation::Square,
    ];
    for kind in kinds {
        check_many(&format!("{kind:?}"), |r| {
            // Keep samples away from the kinks of relu and abs.
            let x = randn(&dims(r, 2, 1, 5), r).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
            gradcheck(&[x], r.gen(), move |t, v| Ok(t.act(v[0], kind)))
        });
    }
}

#[test]
fn arithmetic() {
    type Bin = fn(&mut Tape<f64>, Var, Var) -> structgan::Result<Var>;
    let ops: [(&str, Bin); 3] = [("add", |t, a, b| t.add(a, b)), ("sub", |t, a, b| t.sub(a, b)), ("mul", |t, a, b| t.mul(a, b))];
    for (name, op) in ops {
        check_many(name, |r| {
            let s = dims(r, 3, 1, 4);
            gradcheck(&[randn(&s, r), randn(&s, r)], r.gen(), move |t, v| op(t, v[0], v[1]))
        });
    }
    check_many("mul_aliased", |r| {
        let x = randn(&dims(r, 2, 1, 4), r);
        gradcheck(&[x], r.gen(), |t, v| t.mul(v[0], v[0]))
    });
    check_many("scale", |r| {
        let c: f64 = r.gen_range(-3.0..3.0);
        gradcheck(&[randn(&dims(r, 2, 1, 4), r)], r.gen(), move |t, v| Ok(t.scale(v[0], c)))
    });
}

#[test]
fn layout_ops() {
    check_many("reshape", |r| {
        let s = dims(r, 3, 1, 4);
        gradcheck(&[randn(&s, r)], r.gen(), move |t, v| t.reshape(v[0], &[s[0] * s[1], s[2]]))
    });
    check_many("reverse_last", |r| gradcheck(&[randn(&dims(r, 3, 1, 5), r)], r.gen(), |t, v| Ok(t.reverse_last(v[0]))));
    check_many("expand_sym", |r| gradcheck(&[randn(&dims(r, 2, 1, 5), r)], r.gen(), |t, v| t.expand_sym(v[0])));
    check_many("expand_anti", |r| gradcheck(&[randn(&dims(r, 2, 1, 5), r)], r.gen(), |t, v| t.expand_anti(v[0])));
    check_many("fold_sym", |r| {
        let x = randn(&[r.gen_range(1..4), 2 * r.gen_range(0..3) + 1], r);
        gradcheck(&[x], r.gen(), |t, v| t.fold_sym(v[0]))
    });
    check_many("slice_last", |r| {
        let w = r.gen_range(2..7);
        let start = r.gen_range(0..w);
        let len = r.gen_range(1..=w - start);
        gradcheck(&[randn(&[r.gen_range(1..4), w], r)], r.gen(), move |t, v| t.slice_last(v[0], start, len))
    });
    check_many("concat_last", |r| {
        let n = r.gen_range(1..4);
        let a = randn(&[n, 2, r.gen_range(1..4)], r);
        let b = randn(&[n, 2, r.gen_range(1..4)], r);
        gradcheck(&[a, b], r.gen(), |t, v| t.concat_last(&[v[0], v[1], v[0]]))
    });
    check_many("narrow_first", |r| {
        let n = r.gen_range(2..5);
        let start = r.gen_range(0..n);
        let len = r.gen_range(1..=n - start);
        gradcheck(&[randn(&[n, 3], r)], r.gen(), move |t, v| t.narrow_first(v[0], start, len))
    });
    check_many("concat_first", |r| {
        let a = randn(&[r.gen_range(1..3), 2, 2], r);
        let b = randn(&[r.gen_range(1..3), 2, 2], r);
        gradcheck(&[a, b], r.gen(), |t, v| t.concat_first(&[v[1], v[0]]))
    });
}

#[test]
fn reductions() {
    check_many("gram", |r| {
        let x = randn(&[r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)], r);
        gradcheck(&[x], r.gen(), |t, v| t.gram(v[0]))
    });
    check_many("sum", |r| gradcheck(&[randn(&dims(r, 2, 1, 4), r)], r.gen(), |t, v| Ok(t.sum(v[0]))));
    check_many("mean", |r| gradcheck(&[randn(&dims(r, 2, 1, 4), r)], r.gen(), |t, v| Ok(t.mean(v[0]))));
    check_many("mse", |r| {
        let s = dims(r, 2, 1, 4);
        gradcheck(&[randn(&s, r), randn(&s, r)], r.gen(), |t, v| t.mse(v[0], v[1]))
    });
}

#[test]
fn structured_layers() {
    for (i, case) in structured_cases().iter().enumerate() {
        let e = worst_over(case, INSTANCES, 100 + i as u64);
        assert!(e <= GRAD_TOL, "{}: worst relative error {e:.3e}", case.name);
    }
}

fn small_generator(kind: GeneratorKind, pad: PadKind, r: &mut Rng64) -> Generator<f64> {
    let base = if kind == GeneratorKind::Zprime { 3 } else { 2 };
    let z_dim = if kind == GeneratorKind::Cyclic { 8 } else { 5 };
    let spec = GeneratorSpec { z_dim, zprime_dim: 2, channels: vec![3, 2, 2], base, kernel: 3, pad, kind };
    let mut g = Generator::<f32>::new(spec, r).unwrap().cast::<f64>();
    for (name, t) in g.params.iter_mut() {
        if name.ends_with(".w") {
            *t = Tensor::randn(t.shape(), 0.5, r);
        }
    }
    g
}

#[test]
fn whole_generators() {
    let cases = [
        (GeneratorKind::Zprime, PadKind::Zero),
        (GeneratorKind::Flip, PadKind::Zero),
        (GeneratorKind::Baseline, PadKind::Zero),
        (GeneratorKind::Cyclic, PadKind::Circular),
        (GeneratorKind::Cyclic, PadKind::Flipwrap),
    ];
    let mut r = rng(9);
    for (kind, pad) in cases {
        for _ in 0..4 {
            let g = small_generator(kind, pad, &mut r);
            let z = randn(&[3, g.spec.z_dim], &mut r);
            let gz = g.clone();
            let e = gradcheck(&[z.clone()], r.gen(), move |t, v| {
                let mut bind = Binding::frozen();
                gz.forward(t, &mut bind, v[0], Phase::Train)
            });
            assert!(e <= GRAD_TOL, "{kind:?}/{pad:?} latent gradient error {e:.3e}");
            let names: Vec<String> = g.params.params.keys().cloned().collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let w = randn(&[3, 2, g.spec.output_size(), g.spec.output_size()], &mut r);
            let e = param_gradcheck(&g.params, &names, |t, bind, p| {
                let gp = Generator::from_params(g.spec.clone(), p.clone()).unwrap();
                let zv = t.constant(z.clone());
                let out = gp.forward(t, bind, zv, Phase::Train).unwrap();
                let wv = t.constant(w.clone());
                let m = t.mul(out, wv).unwrap();
                t.sum(m)
            });
            assert!(e <= GRAD_TOL, "{kind:?}/{pad:?} parameter gradient error {e:.3e}");
        }
    }
}

#[test]
fn whole_discriminators() {
    let mut r = rng(11);
    for kind in [DiscriminatorKind::Symmetric, DiscriminatorKind::Standard, DiscriminatorKind::Texture] {
        for _ in 0..3 {
            let spec = DiscriminatorSpec { kind, channels: vec![2, 2, 3], input: 4, kernel: 3 };
            let mut d = Discriminator::<f32>::new(spec, &mut r).unwrap().cast::<f64>();
            for (name, t) in d.params.iter_mut() {
                if name.ends_with(".w") {
                    *t = Tensor::randn(t.shape(), 0.5, &mut r);
                }
            }
            let x = randn(&[3, 2, 4, 4], &mut r);
            let dx = d.clone();
            let e = gradcheck(&[x.clone()], r.gen(), move |t, v| {
                let mut bind = Binding::frozen();
                dx.logits(t, &mut bind, v[0], Phase::Train)
            });
            assert!(e <= GRAD_TOL, "{kind:?} input gradient error {e:.3e}");
            let names: Vec<String> = d.params.params.keys().cloned().collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let e = param_gradcheck(&d.params, &names, |t, bind, p| {
                let dp = Discriminator::from_params(d.spec.clone(), p.clone()).unwrap();
                let xv = t.constant(x.clone());
                let out = dp.logits(t, bind, xv, Phase::Train).unwrap();
                let s = t.square(out);
                t.sum(s)
            });
            assert!(e <= GRAD_TOL, "{kind:?} parameter gradient error {e:.3e}");
        }
    }
}
