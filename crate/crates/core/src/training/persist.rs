//! Packing a [`GanState`] (both networks, running statistics and optimizer
//! moments) into a [`Checkpoint`] and back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gan::GanState;
use crate::data::Checkpoint;
use crate::error::{Error, Result};
use crate::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ParamSet};
use crate::tensor::{AdamConfig, AdamState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    config: AdamConfig,
    step: u64,
    skipped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    generator: GeneratorSpec,
    discriminator: DiscriminatorSpec,
    adam_g: OptimizerMeta,
    adam_d: OptimizerMeta,
    step: u64,
    rejected: u64,
    /// Free-form run information (effective config, latent, ...).
    #[serde(default)]
    run: serde_json::Value,
}

fn push_params(ck: &mut Checkpoint, prefix: &str, p: &ParamSet) {
    for (k, v) in &p.params {
        ck.push(format!("{prefix}/param/{k}"), v.clone());
    }
    for (k, v) in &p.buffers {
        ck.push(format!("{prefix}/buffer/{k}"), v.clone());
    }
}

fn push_opt(ck: &mut Checkpoint, prefix: &str, o: &AdamState) {
    for (k, v) in &o.m {
        ck.push(format!("{prefix}/m/{k}"), v.clone());
    }
    for (k, v) in &o.v {
        ck.push(format!("{prefix}/v/{k}"), v.clone());
    }
}

fn collect(ck: &Checkpoint, prefix: &str) -> BTreeMap<String, Tensor> {
    ck.with_prefix(prefix).map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// `run` is stored verbatim in the header.
pub fn to_checkpoint(state: &GanState, run: serde_json::Value) -> Result<Checkpoint> {
    let meta = StateMeta {
        generator: state.gen.spec.clone(),
        discriminator: state.disc.spec.clone(),
        adam_g: OptimizerMeta { config: state.g_opt.config, step: state.g_opt.step, skipped: state.g_opt.skipped },
        adam_d: OptimizerMeta { config: state.d_opt.config, step: state.d_opt.step, skipped: state.d_opt.skipped },
        step: state.step,
        rejected: state.rejected,
        run,
    };
    let mut ck = Checkpoint::new(serde_json::to_value(&meta)?);
    push_params(&mut ck, "G", &state.gen.params);
    push_params(&mut ck, "D", &state.disc.params);
    push_opt(&mut ck, "optG", &state.g_opt);
    push_opt(&mut ck, "optD", &state.d_opt);
    Ok(ck)
}

/// Rebuilds the state, checking every tensor against the layout the specs
/// imply. Returns the stored run information alongside.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(GanState, serde_json::Value)> {
    let meta: StateMeta = serde_json::from_value(ck.spec.clone())
        .map_err(|e| Error::Data(format!("checkpoint spec blob is not a model description: {e}")))?;
    meta.generator.validate().map_err(|e| Error::Data(e.to_string()))?;
    meta.discriminator.validate().map_err(|e| Error::Data(e.to_string()))?;
    let params = |p: &str| ParamSet { params: collect(ck, &format!("{p}/param/")), buffers: collect(ck, &format!("{p}/buffer/")) };
    let layout = |e: Error| Error::Data(format!("checkpoint tensors do not match the model: {e}"));
    let gen = Generator::from_params(meta.generator, params("G")).map_err(layout)?;
    let disc = Discriminator::from_params(meta.discriminator, params("D")).map_err(layout)?;
    let opt = |p: &str, m: &OptimizerMeta, owner: &ParamSet| -> Result<AdamState> {
        let mut o = AdamState::new(m.config);
        o.step = m.step;
        o.skipped = m.skipped;
        o.m = collect(ck, &format!("{p}/m/"));
        o.v = collect(ck, &format!("{p}/v/"));
        for (k, t) in o.m.iter().chain(o.v.iter()) {
            match owner.params.get(k) {
                Some(w) if w.shape() == t.shape() => {}
                _ => return Err(Error::Data(format!("optimizer moment {p}/{k} has no matching parameter"))),
            }
        }
        Ok(o)
    };
    let g_opt = opt("optG", &meta.adam_g, &gen.params)?;
    let d_opt = opt("optD", &meta.adam_d, &disc.params)?;
    let known = ["G/param/", "G/buffer/", "D/param/", "D/buffer/", "optG/m/", "optG/v/", "optD/m/", "optD/v/"];
    if let Some((n, _)) = ck.tensors.iter().find(|(n, _)| !known.iter().any(|p| n.starts_with(p))) {
        return Err(Error::Data(format!("unexpected tensor {n} in checkpoint")));
    }
    let mut state = GanState::new(gen, disc, meta.adam_g.config, meta.adam_d.config)?;
    state.g_opt = g_opt;
    state.d_opt = d_opt;
    state.step = meta.step;
    state.rejected = meta.rejected;
    Ok((state, meta.run))
}

pub fn save_state(state: &GanState, run: serde_json::Value, path: &Path) -> Result<()> {
    to_checkpoint(state, run)?.save(path)
}

pub fn load_state(path: &Path) -> Result<(GanState, serde_json::Value)> {
    from_checkpoint(&Checkpoint::load(path)?)
}
