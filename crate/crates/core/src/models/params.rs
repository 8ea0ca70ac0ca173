use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnStats, Grads, Scalar, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;

/// Named trainable tensors plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T: Scalar = f32> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing buffer {name}")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Tensor::is_finite)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Exponential moving update of `<prefix>.mean` / `<prefix>.var`.
    pub fn update_running(&mut self, prefix: &str, stats: &BnStats<T>) -> Result<()> {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for (suffix, observed) in [("mean", &stats.mean), ("var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let buf = self
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::Shape(format!("missing buffer {name}")))?;
            for (r, &o) in buf.data_mut().iter_mut().zip(observed) {
                *r = (T::one() - m) * *r + m * o;
            }
        }
        Ok(())
    }

    /// Same names, same shapes.
    pub fn check_layout(&self, other: &ParamSet<T>) -> Result<()> {
        let describe = |m: &BTreeMap<String, Tensor<T>>| -> Vec<(String, Vec<usize>)> {
            m.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
        };
        if describe(&self.params) != describe(&other.params)
            || describe(&self.buffers) != describe(&other.buffers)
        {
            return Err(Error::Shape("parameter layout differs from the model spec".into()));
        }
        Ok(())
    }
}

/// Train or eval behaviour of batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Binds a [`ParamSet`] to one tape: registers each parameter on first use
/// and collects batch statistics to fold into running buffers afterwards.
pub struct Binding<T: Scalar> {
    trainable: bool,
    vars: BTreeMap<String, Var>,
    bn_stats: Vec<(String, BnStats<T>)>,
}

impl<T: Scalar> Binding<T> {
    pub fn trainable() -> Self {
        Binding { trainable: true, vars: BTreeMap::new(), bn_stats: Vec::new() }
    }

    /// Parameters enter the tape as constants.
    pub fn frozen() -> Self {
        Binding { trainable: false, vars: BTreeMap::new(), bn_stats: Vec::new() }
    }

    pub fn var(&mut self, tape: &mut Tape<T>, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?.clone();
        let v = if self.trainable { tape.param(t) } else { tape.constant(t) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Batch norm over `x` with `<prefix>.gamma/.beta`, in train or eval mode.
    pub fn batchnorm(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        prefix: &str,
        x: Var,
        phase: Phase,
    ) -> Result<Var> {
        let gamma = self.var(tape, params, &format!("{prefix}.gamma"))?;
        let beta = self.var(tape, params, &format!("{prefix}.beta"))?;
        match phase {
            Phase::Train => {
                let (y, stats) = tape.batchnorm(x, gamma, beta, BnMode::Train)?;
                if let Some(s) = stats {
                    self.bn_stats.push((prefix.to_string(), s));
                }
                Ok(y)
            }
            Phase::Eval => {
                let mean = params.buffer(&format!("{prefix}.mean"))?;
                let var = params.buffer(&format!("{prefix}.var"))?;
                let (y, _) =
                    tape.batchnorm(x, gamma, beta, BnMode::Eval { mean: mean.data(), var: var.data() })?;
                Ok(y)
            }
        }
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn gradients(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    /// Folds the observed batch statistics into `params`' running buffers.
    pub fn commit_running_stats(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for (prefix, stats) in self.bn_stats.drain(..) {
            params.update_running(&prefix, &stats)?;
        }
        Ok(())
    }
}
