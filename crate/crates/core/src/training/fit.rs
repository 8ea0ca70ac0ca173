use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{FitTuneConfig, TrainConfig};
use super::gan::{gan_step_with, GanState, LatentBatch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Binding, Generator, ParamSet, Phase};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

/// Consecutive increases of the objective treated as divergence.
pub const DIVERGENCE_PATIENCE: usize = 50;

fn as_batch(target: &Tensor) -> Result<Tensor> {
    match target.ndim() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(target.shape());
            target.clone().reshape(&s)
        }
        4 if target.shape()[0] == 1 => Ok(target.clone()),
        _ => Err(Error::Shape(format!("target must be one [C,H,W] image, got {:?}", target.shape()))),
    }
}

/// `MSE(G(z), I) + alpha_wd * |z|^2 + beta * sum((|z_i| - 1)+)` on the tape.
/// Returns the objective and the reconstruction term.
fn objective(
    tape: &mut Tape,
    gen: &Generator,
    bind: &mut Binding<f32>,
    z: Var,
    target: Var,
    cfg: &FitTuneConfig,
) -> Result<(Var, Var)> {
    let img = gen.forward(tape, bind, z, Phase::Eval)?;
    let rec = tape.mse(img, target)?;
    let sq = tape.square(z);
    let sq = tape.sum(sq);
    let wd = tape.scale(sq, cfg.alpha_wd);
    let a = tape.abs(z);
    let minus_one = tape.constant(Tensor::full(tape.shape(z), -1.0));
    let over = tape.add(a, minus_one)?;
    let over = tape.relu(over);
    let over = tape.sum(over);
    let hinge = tape.scale(over, cfg.beta);
    let obj = tape.add(rec, wd)?;
    Ok((tape.add(obj, hinge)?, rec))
}

/// Objective value and reconstruction MSE of `z` under `gen`.
pub fn evaluate_fit(gen: &Generator, z: &Tensor, target: &Tensor, cfg: &FitTuneConfig) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let mut bind = Binding::frozen();
    let zv = tape.constant(z.clone());
    let t = tape.constant(as_batch(target)?);
    let (o, r) = objective(&mut tape, gen, &mut bind, zv, t, cfg)?;
    Ok((tape.value(o).item() as f64, tape.value(r).item() as f64))
}

pub fn reconstruction_mse(gen: &Generator, z: &Tensor, target: &Tensor) -> Result<f64> {
    let img = gen.generate(z)?;
    Ok(img.mse(&as_batch(target)?) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// `[1, z_dim]`.
    pub z: Tensor,
    pub initial_objective: f64,
    pub objective: f64,
    pub mse: f64,
    pub iterations: usize,
    pub diverged: bool,
    /// Best objective seen after each iteration.
    pub best_trace: Vec<f64>,
}

/// Phase I: recover a latent for `target` by Adam on the regularized
/// reconstruction objective, starting from z = 0. Returns the best iterate.
pub fn fit_z(gen: &Generator, target: &Tensor, cfg: &FitTuneConfig) -> Result<FitResult> {
    cfg.validate()?;
    let target = as_batch(target)?;
    let side = gen.spec.output_size();
    if target.shape() != [1, gen.spec.out_channels(), side, side] {
        return Err(Error::Shape(format!(
            "target {:?} does not match generator output [1,{},{side},{side}]",
            target.shape(),
            gen.spec.out_channels()
        )));
    }
    let mut z = Tensor::zeros(&[1, gen.spec.z_dim]);
    let (initial, initial_mse) = evaluate_fit(gen, &z, &target, cfg)?;
    let mut best = (z.clone(), initial, initial_mse);
    let mut opt = AdamState::new(AdamConfig { lr: cfg.z_lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let mut prev = initial;
    let mut rising = 0;
    let mut trace = Vec::with_capacity(cfg.fit_iters);
    let mut diverged = false;
    let mut iterations = 0;
    for _ in 0..cfg.fit_iters {
        let mut tape = Tape::new();
        let mut bind = Binding::frozen();
        let zv = tape.param(z.clone());
        let t = tape.constant(target.clone());
        let (o, r) = objective(&mut tape, gen, &mut bind, zv, t, cfg)?;
        let (obj, mse) = (tape.value(o).item() as f64, tape.value(r).item() as f64);
        if obj < best.1 {
            best = (z.clone(), obj, mse);
        }
        trace.push(best.1);
        rising = if obj > prev { rising + 1 } else { 0 };
        prev = obj;
        if rising >= DIVERGENCE_PATIENCE || !obj.is_finite() {
            log::warn!("latent fit diverging after {iterations} iterations; keeping the best iterate");
            diverged = true;
            break;
        }
        let grads = tape.backward(o)?;
        let g = grads.get(zv).cloned().ok_or_else(|| Error::Numeric("no gradient for z".into()))?;
        let named = [("z".to_string(), g)].into_iter().collect();
        opt.step([("z", &mut z)], &named)?;
        iterations += 1;
    }
    let (obj, mse) = evaluate_fit(gen, &z, &target, cfg)?;
    if obj < best.1 {
        best = (z, obj, mse);
    }
    Ok(FitResult {
        z: best.0,
        initial_objective: initial,
        objective: best.1,
        mse: best.2,
        iterations,
        diverged,
        best_trace: trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    /// Tuned generator (G_I) and the discriminator trained alongside it.
    pub state: GanState,
    pub z: Tensor,
    /// Reconstruction MSE before phase II.
    pub residual_fit: f64,
    pub residual: f64,
    /// Residual after each alternation (after any rollback).
    pub history: Vec<f64>,
    pub rollbacks: usize,
}

#[derive(Clone)]
struct JointOpt {
    z: AdamState,
    g: AdamState,
}

impl JointOpt {
    fn new(cfg: &FitTuneConfig) -> Self {
        JointOpt {
            z: AdamState::new(AdamConfig { lr: cfg.z_lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }),
            g: AdamState::new(AdamConfig { lr: cfg.tune_lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }),
        }
    }
}

/// Joint descent on `(z, generator parameters)` for `steps` iterations,
/// ending on the iterate with the lowest reconstruction error. The
/// generator learning rate warms up linearly, then follows a cosine decay
/// over `schedule` (`(steps already taken, total steps)`).
fn joint_descent(
    state: &mut GanState,
    z: &mut Tensor,
    target: &Tensor,
    cfg: &FitTuneConfig,
    opt: &mut JointOpt,
    steps: usize,
    schedule: (usize, usize),
) -> Result<()> {
    let JointOpt { z: z_opt, g: g_opt } = opt;
    let mut best: Option<(f64, ParamSet<f32>, Tensor)> = None;
    for i in 0..steps {
        let progress = (schedule.0 + i) as f64 / schedule.1.max(1) as f64;
        let warm = if cfg.warmup > 0 { ((schedule.0 + i) as f64 / cfg.warmup as f64).min(1.0) } else { 1.0 };
        g_opt.config.lr = warm * cfg.tune_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let mut tape = Tape::new();
        let mut bind = Binding::trainable();
        let zv = tape.param(z.clone());
        let t = tape.constant(target.clone());
        let (o, r) = objective(&mut tape, &state.gen, &mut bind, zv, t, cfg)?;
        if !tape.value(o).item().is_finite() {
            return Err(Error::Numeric("non-finite reconstruction objective while tuning".into()));
        }
        let rec = tape.value(r).item() as f64;
        if best.as_ref().map_or(true, |b| rec < b.0) {
            best = Some((rec, state.gen.params.clone(), z.clone()));
        }
        let grads = tape.backward(o)?;
        let named = bind.gradients(&grads);
        g_opt.step(state.gen.params.iter_mut(), &named)?;
        let gz = grads.get(zv).cloned().ok_or_else(|| Error::Numeric("no gradient for z".into()))?;
        z_opt.step([("z", &mut *z)], &[("z".to_string(), gz)].into_iter().collect())?;
    }
    if let Some((rec, params, best_z)) = best {
        if reconstruction_mse(&state.gen, z, target)? > rec {
            state.gen.params = params;
            *z = best_z;
        }
    }
    Ok(())
}

/// Phase II: alternate adversarial training on `data` with joint
/// reconstruction descent. A round that leaves the residual worse than it
/// found it is rolled back.
pub fn fine_tune<R: Rng + ?Sized>(
    state: &GanState,
    z: &Tensor,
    target: &Tensor,
    data: &Dataset,
    train: &TrainConfig,
    cfg: &FitTuneConfig,
    rng: &mut R,
) -> Result<TuneResult> {
    cfg.validate()?;
    let target = as_batch(target)?;
    let mut cur = state.clone();
    let g_lr = cur.g_opt.config.lr;
    cur.g_opt.config.lr = cfg.gan_lr;
    let mut z = z.clone();
    let residual_fit = reconstruction_mse(&cur.gen, &z, &target)?;
    let mut residual = residual_fit;
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut rollbacks = 0;
    let paired = train.alpha_sym > 0.0;
    let batch = if paired && cfg.gan_batch % 2 == 1 { cfg.gan_batch + 1 } else { cfg.gan_batch };
    let mut opt = JointOpt::new(cfg);
    for round in 0..cfg.rounds {
        let snapshot = (cur.clone(), z.clone(), opt.clone());
        for _ in 0..cfg.gan_steps {
            let real = data.sample_batch(batch, rng)?;
            let latents = LatentBatch::sample(&cur.gen, batch, paired, rng)?;
            gan_step_with(&mut cur, &real, &latents, train.alpha_sym, Phase::Eval, &mut |_, x| Ok(x))?;
        }
        joint_descent(&mut cur, &mut z, &target, cfg, &mut opt, cfg.joint_steps, (round * cfg.joint_steps, cfg.rounds * cfg.joint_steps))?;
        let r = reconstruction_mse(&cur.gen, &z, &target)?;
        if r > residual {
            log::info!("round {round}: residual {r:.3e} worse than {residual:.3e}, rolling back");
            (cur, z, opt) = snapshot;
            rollbacks += 1;
        } else {
            residual = r;
        }
        history.push(residual);
    }
    cur.g_opt.config.lr = g_lr;
    Ok(TuneResult { state: cur, z, residual_fit, residual, history, rollbacks })
}
