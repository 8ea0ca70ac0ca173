use rand::Rng;

use super::generator::INIT_STD;
use super::params::{Binding, Phase, ParamSet};
use super::spec::{DiscriminatorKind, DiscriminatorSpec};
use crate::error::{Error, Result};
use crate::structured::{self, PadKind, PadMode};
use crate::tensor::{sigmoid, Scalar, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Scalar = f32> {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet<T>,
}

fn conv_name(spec: &DiscriminatorSpec, l: usize) -> String {
    if spec.kind == DiscriminatorKind::Symmetric {
        format!("conv{l}.free")
    } else {
        format!("conv{l}.w")
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(spec: DiscriminatorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamSet::new();
        let k = spec.kernel;
        for l in 1..=spec.stages() {
            let (ci, co) = (spec.channels[l - 1], spec.channels[l]);
            let shape = if spec.kind == DiscriminatorKind::Symmetric {
                [co, ci, k, k.div_ceil(2)]
            } else {
                [co, ci, k, k]
            };
            p.insert(conv_name(&spec, l), Tensor::randn(&shape, INIT_STD, rng));
            if l == 1 {
                p.insert("conv1.b", Tensor::zeros(&[co]));
            } else {
                let gamma = Tensor::<T>::randn(&[co], INIT_STD, rng).map(|v| v + T::one());
                p.insert(format!("bn{l}.gamma"), gamma);
                p.insert(format!("bn{l}.beta"), Tensor::zeros(&[co]));
                p.insert_buffer(format!("bn{l}.mean"), Tensor::zeros(&[co]));
                p.insert_buffer(format!("bn{l}.var"), Tensor::ones(&[co]));
            }
        }
        p.insert("fc.w", Tensor::randn(&[spec.head_features(), 1], INIT_STD, rng));
        p.insert("fc.b", Tensor::zeros(&[1]));
        Ok(Discriminator { spec, params: p })
    }

    pub fn from_params(spec: DiscriminatorSpec, params: ParamSet<T>) -> Result<Self> {
        let reference =
            Discriminator::<T>::new(spec.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        reference.params.check_layout(&params)?;
        Ok(Discriminator { spec, params })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator { spec: self.spec.clone(), params: self.params.cast() }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Raw scores `[N, 1]`; `sigmoid` of these is the probability of "real".
    pub fn logits(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, x: Var, phase: Phase) -> Result<Var> {
        let s = &self.spec;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != s.channels[0] || xs[2] != s.input || xs[3] != s.input {
            return Err(Error::Shape(format!(
                "discriminator expects [N,{},{},{}], got {xs:?}",
                s.channels[0], s.input, s.input
            )));
        }
        let n = xs[0];
        let pad = PadMode::same(PadKind::Zero, s.kernel);
        let mut grams = Vec::new();
        if s.kind == DiscriminatorKind::Texture {
            grams.push(tape.gram(x)?);
        }
        let mut h = x;
        for l in 1..=s.stages() {
            let k = bind.var(tape, &self.params, &conv_name(s, l))?;
            h = match s.kind {
                DiscriminatorKind::Symmetric => structured::sym_conv(tape, h, k, s.kernel, pad)?,
                _ => structured::conv2d(tape, h, k, pad)?,
            };
            if s.kind == DiscriminatorKind::Texture {
                grams.push(tape.gram(h)?);
            }
            h = if l == 1 {
                let b = bind.var(tape, &self.params, "conv1.b")?;
                tape.channel_bias(h, b)?
            } else {
                bind.batchnorm(tape, &self.params, &format!("bn{l}"), h, phase)?
            };
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = tape.avgpool2(h)?;
        }
        let feats = match s.kind {
            DiscriminatorKind::Symmetric => {
                let f = structured::fold_symmetric(tape, h)?;
                tape.reshape(f, &[n, s.head_features()])?
            }
            DiscriminatorKind::Standard => tape.reshape(h, &[n, s.head_features()])?,
            DiscriminatorKind::Texture => tape.concat_last(&grams)?,
        };
        let w = bind.var(tape, &self.params, "fc.w")?;
        let b = bind.var(tape, &self.params, "fc.b")?;
        tape.dense(feats, w, Some(b))
    }

    /// Eval-mode probabilities, one per image.
    pub fn discriminate(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut bind = Binding::frozen();
        let xv = tape.constant(x.clone());
        let l = self.logits(&mut tape, &mut bind, xv, Phase::Eval)?;
        Ok(tape.value(l).data().iter().map(|&v| sigmoid(v)).collect())
    }

    /// Length of the vector that reaches the dense head.
    pub fn head_features(&self) -> usize {
        self.spec.head_features()
    }
}

/// GRAM descriptor of one feature stack `[C, H, W]`: `[(C+1), (C+1)]`.
pub fn gram_descriptor<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::Shape(format!("gram descriptor needs a non-empty [C,H,W] stack, got {s:?}")));
    }
    let k = s[0] + 1;
    let mut tape = Tape::new();
    let x = tape.constant(features.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let g = tape.gram(x)?;
    tape.value(g).clone().reshape(&[k, k])
}
