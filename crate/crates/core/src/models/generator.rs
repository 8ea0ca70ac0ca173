use rand::Rng;

use super::params::{Binding, Phase, ParamSet};
use super::spec::{GeneratorKind, GeneratorSpec};
use crate::error::{Error, Result};
use crate::structured::{self, PadMode};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Scalar = f32> {
    pub spec: GeneratorSpec,
    pub params: ParamSet<T>,
}

fn stage_conv_name(spec: &GeneratorSpec, l: usize) -> String {
    if spec.kind.symmetric_kernels() {
        format!("conv{l}.free")
    } else {
        format!("conv{l}.w")
    }
}

impl<T: Scalar> Generator<T> {
    /// Fresh parameters: weights N(0, 0.02), BN gains N(1, 0.02), biases 0.
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamSet::new();
        let (c0, b) = (spec.channels[0], spec.base);
        match spec.kind {
            GeneratorKind::Zprime => {
                let half_anti = c0 * b * (b / 2);
                let half_sym = c0 * b * b.div_ceil(2);
                p.insert("fc_anti.w", Tensor::randn(&[spec.zprime_dim, half_anti], INIT_STD, rng));
                p.insert("fc_sym.w", Tensor::randn(&[spec.zdoubleprime_dim(), half_sym], INIT_STD, rng));
                p.insert("fc_sym.b", Tensor::zeros(&[half_sym]));
            }
            GeneratorKind::Cyclic => {
                let k = spec.kernel;
                p.insert("conv0.w", Tensor::randn(&[c0, spec.latent_channels(), k, k], INIT_STD, rng));
            }
            GeneratorKind::Flip | GeneratorKind::Baseline => {
                let g = c0 * b * b;
                p.insert("fc.w", Tensor::randn(&[spec.z_dim, g], INIT_STD, rng));
                p.insert("fc.b", Tensor::zeros(&[g]));
            }
        }
        insert_bn(&mut p, "bn0", c0, rng);
        let k = spec.kernel;
        for l in 1..=spec.stages() {
            let (ci, co) = (spec.channels[l - 1], spec.channels[l]);
            let shape = if spec.kind.symmetric_kernels() { [co, ci, k, k.div_ceil(2)] } else { [co, ci, k, k] };
            p.insert(stage_conv_name(&spec, l), Tensor::randn(&shape, INIT_STD, rng));
            if l == spec.stages() {
                p.insert(format!("conv{l}.b"), Tensor::zeros(&[co]));
            } else {
                insert_bn(&mut p, &format!("bn{l}"), co, rng);
            }
        }
        Ok(Generator { spec, params: p })
    }

    /// Parameters shaped for `spec`, all zero (BN gains one, running var one).
    pub fn zeros(spec: GeneratorSpec) -> Result<Self> {
        let mut g = Generator::new(spec, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for (name, t) in g.params.params.iter_mut() {
            let fill = if name.ends_with(".gamma") { T::one() } else { T::zero() };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        Ok(g)
    }

    pub fn from_params(spec: GeneratorSpec, params: ParamSet<T>) -> Result<Self> {
        let reference = Generator::<T>::zeros(spec.clone())?;
        reference.params.check_layout(&params)?;
        Ok(Generator { spec, params })
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator { spec: self.spec.clone(), params: self.params.cast() }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn pad(&self) -> PadMode {
        PadMode::same(self.spec.pad, self.spec.kernel)
    }

    /// First feature map `[N, C0, base, base]` before normalization.
    pub fn first_map(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, z: Var) -> Result<Var> {
        let s = &self.spec;
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != s.z_dim {
            return Err(Error::Shape(format!("latent batch {zs:?} does not match z_dim {}", s.z_dim)));
        }
        let (n, c0, b) = (zs[0], s.channels[0], s.base);
        match s.kind {
            GeneratorKind::Zprime => {
                let zp = tape.slice_last(z, 0, s.zprime_dim)?;
                let zpp = tape.slice_last(z, s.zprime_dim, s.zdoubleprime_dim())?;
                let wa = bind.var(tape, &self.params, "fc_anti.w")?;
                let a = tape.dense(zp, wa, None)?;
                let a = tape.reshape(a, &[n, c0, b, b / 2])?;
                let a = structured::expand_antisymmetric(tape, a, b)?;
                let ws = bind.var(tape, &self.params, "fc_sym.w")?;
                let bs = bind.var(tape, &self.params, "fc_sym.b")?;
                let m = tape.dense(zpp, ws, Some(bs))?;
                let m = tape.reshape(m, &[n, c0, b, b.div_ceil(2)])?;
                let m = structured::expand_symmetric(tape, m, b)?;
                tape.add(a, m)
            }
            GeneratorKind::Flip => {
                let w = bind.var(tape, &self.params, "fc.w")?;
                let bias = bind.var(tape, &self.params, "fc.b")?;
                let direct = tape.dense(z, w, Some(bias))?;
                let direct = tape.reshape(direct, &[n, c0, b, b])?;
                let zf = structured::flip_var(tape, z);
                let other = tape.dense(zf, w, Some(bias))?;
                let other = tape.reshape(other, &[n, c0, b, b])?;
                let other = structured::mirror_var(tape, other);
                tape.add(direct, other)
            }
            GeneratorKind::Baseline => {
                let w = bind.var(tape, &self.params, "fc.w")?;
                let bias = bind.var(tape, &self.params, "fc.b")?;
                let h = tape.dense(z, w, Some(bias))?;
                tape.reshape(h, &[n, c0, b, b])
            }
            // The latent lives on the base grid and is mapped by a wrapped
            // convolution, so every base cell is generated the same way. No
            // bias: bn0 removes per-channel offsets.
            GeneratorKind::Cyclic => {
                let grid = tape.reshape(z, &[n, s.latent_channels(), b, b])?;
                let w = bind.var(tape, &self.params, "conv0.w")?;
                structured::conv2d(tape, grid, w, self.pad())
            }
        }
    }

    /// Everything after the first map: BN/ReLU, then the upsample-conv stages.
    pub fn tail(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, h: Var, phase: Phase) -> Result<Var> {
        let s = &self.spec;
        let h = bind.batchnorm(tape, &self.params, "bn0", h, phase)?;
        let mut h = tape.relu(h);
        let pad = self.pad();
        for l in 1..=s.stages() {
            h = tape.upsample2(h)?;
            let k = bind.var(tape, &self.params, &stage_conv_name(s, l))?;
            h = if s.kind.symmetric_kernels() {
                structured::sym_conv(tape, h, k, s.kernel, pad)?
            } else {
                structured::conv2d(tape, h, k, pad)?
            };
            if l == s.stages() {
                let b = bind.var(tape, &self.params, &format!("conv{l}.b"))?;
                h = tape.channel_bias(h, b)?;
                h = tape.tanh(h);
            } else {
                h = bind.batchnorm(tape, &self.params, &format!("bn{l}"), h, phase)?;
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// `[N, z_dim] -> [N, C, S, S]` in [-1, 1].
    pub fn forward(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, z: Var, phase: Phase) -> Result<Var> {
        let h = self.first_map(tape, bind, z)?;
        self.tail(tape, bind, h, phase)
    }

    /// Inference with running statistics.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut bind = Binding::frozen();
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &mut bind, zv, Phase::Eval)?;
        let img = tape.value(out).clone();
        if !img.is_finite() {
            return Err(Error::Numeric("generator produced non-finite activations".into()));
        }
        Ok(img)
    }

    /// First map alone, for structural checks.
    pub fn first_map_value(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut bind = Binding::frozen();
        let zv = tape.constant(z.clone());
        let h = self.first_map(&mut tape, &mut bind, zv)?;
        Ok(tape.value(h).clone())
    }

    /// The latent whose image should be the mirror of `G(z)`: negated z′
    /// for the z′ encoding (and for baselines trained against it), reversed
    /// order for the flip encoding.
    pub fn partner(&self, z: &Tensor<T>) -> Tensor<T> {
        partner_latent(self.spec.kind, self.spec.zprime_dim, z)
    }

    /// Symmetric kernel banks actually used by each stage, expanded.
    pub fn conv_kernels(&self) -> Result<Vec<Tensor<T>>> {
        (1..=self.spec.stages())
            .map(|l| {
                let t = self.params.get(&stage_conv_name(&self.spec, l))?;
                if self.spec.kind.symmetric_kernels() {
                    Ok(structured::SymmetricKernelBank::new(t.clone(), self.spec.kernel)?.expanded())
                } else {
                    Ok(t.clone())
                }
            })
            .collect()
    }
}

fn insert_bn<T: Scalar, R: Rng + ?Sized>(p: &mut ParamSet<T>, prefix: &str, c: usize, rng: &mut R) {
    let gamma = Tensor::<T>::randn(&[c], INIT_STD, rng).map(|v| v + T::one());
    p.insert(format!("{prefix}.gamma"), gamma);
    p.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    p.insert_buffer(format!("{prefix}.mean"), Tensor::zeros(&[c]));
    p.insert_buffer(format!("{prefix}.var"), Tensor::ones(&[c]));
}

/// z_N for a generator kind. Rows of `z` are latents.
pub fn partner_latent<T: Scalar>(kind: GeneratorKind, zprime_dim: usize, z: &Tensor<T>) -> Tensor<T> {
    match kind {
        GeneratorKind::Flip => structured::flip(z),
        _ => negate_zprime(z, zprime_dim),
    }
}

pub fn negate_zprime<T: Scalar>(z: &Tensor<T>, zprime_dim: usize) -> Tensor<T> {
    let mut out = z.clone();
    let d = *z.shape().last().unwrap_or(&0);
    if d > 0 {
        for row in out.data_mut().chunks_mut(d) {
            row[..zprime_dim.min(d)].iter_mut().for_each(|v| *v = -*v);
        }
    }
    out
}

/// `n` latents, i.i.d. uniform on [-1, 1].
pub fn sample_latent<T: Scalar, R: Rng + ?Sized>(n: usize, z_dim: usize, rng: &mut R) -> Tensor<T> {
    Tensor::uniform(&[n, z_dim], -1.0, 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structured::mirror;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: GeneratorKind) -> GeneratorSpec {
        GeneratorSpec { channels: vec![8, 4, 3], ..GeneratorSpec::desk(kind) }
    }

    #[test]
    fn output_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::<f32>::new(small(GeneratorKind::Baseline), &mut rng).unwrap();
        let z = sample_latent(3, 20, &mut rng);
        let img = g.generate(&z).unwrap();
        assert_eq!(img.shape(), &[3, 3, 20, 20]);
        assert!(img.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zprime_negation_mirrors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Generator::<f32>::new(small(GeneratorKind::Zprime), &mut rng).unwrap();
        let z = sample_latent(4, 20, &mut rng);
        let a = g.generate(&z).unwrap();
        let b = g.generate(&g.partner(&z)).unwrap();
        assert!(mirror(&a).max_abs_diff(&b) <= 1e-5);
    }

    #[test]
    fn flip_mirrors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Generator::<f32>::new(small(GeneratorKind::Flip), &mut rng).unwrap();
        let z = sample_latent(4, 20, &mut rng);
        let a = g.generate(&z).unwrap();
        let b = g.generate(&structured::flip(&z)).unwrap();
        assert!(mirror(&a).max_abs_diff(&b) <= 1e-5);
    }

    #[test]
    fn zero_zprime_first_map_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Generator::<f64>::new(small(GeneratorKind::Zprime), &mut rng).unwrap();
        let mut z = sample_latent::<f64, _>(2, 20, &mut rng);
        for row in z.data_mut().chunks_mut(20) {
            row[..3].iter_mut().for_each(|v| *v = 0.0);
        }
        let m = g.first_map_value(&z).unwrap();
        assert_eq!(mirror(&m), m);
    }

    #[test]
    fn palindrome_flip_first_map_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Generator::<f64>::new(small(GeneratorKind::Flip), &mut rng).unwrap();
        let half: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let mut z = half.clone();
        z.extend(half.iter().rev());
        let z = Tensor::from_f64(&[1, 20], &z).unwrap();
        let m = g.first_map_value(&z).unwrap();
        assert!(mirror(&m).max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn wrong_latent_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Generator::<f32>::new(small(GeneratorKind::Baseline), &mut rng).unwrap();
        assert!(g.generate(&Tensor::zeros(&[1, 7])).is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Generator::<f32>::new(small(GeneratorKind::Flip), &mut rng).unwrap();
        assert!(Generator::from_params(g.spec.clone(), g.params.clone()).is_ok());
        let other = small(GeneratorKind::Zprime);
        assert!(Generator::from_params(other, g.params.clone()).is_err());
    }
}
