use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{partner_latent, sample_latent, Binding, Discriminator, Generator, Phase};
use crate::structured;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

/// Generator, discriminator and their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct GanState {
    pub gen: Generator,
    pub disc: Discriminator,
    pub g_opt: AdamState,
    pub d_opt: AdamState,
    pub step: u64,
    /// Steps whose loss was non-finite and therefore not applied.
    pub rejected: u64,
}

impl GanState {
    /// The discriminator may judge crops smaller or larger than the
    /// generator's output (texture training); channels must agree.
    pub fn new(gen: Generator, disc: Discriminator, adam_g: AdamConfig, adam_d: AdamConfig) -> Result<Self> {
        if disc.spec.channels[0] != gen.spec.out_channels() {
            return Err(Error::Config(format!(
                "discriminator takes {} channels, the generator makes {}",
                disc.spec.channels[0],
                gen.spec.out_channels()
            )));
        }
        Ok(GanState { gen, disc, g_opt: AdamState::new(adam_g), d_opt: AdamState::new(adam_d), step: 0, rejected: 0 })
    }
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub sym_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

/// A latent batch. When `paired`, rows `n/2..` are the z_N partners of rows
/// `..n/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub z: Tensor,
    pub paired: bool,
}

impl LatentBatch {
    pub fn sample<R: Rng + ?Sized>(gen: &Generator, n: usize, paired: bool, rng: &mut R) -> Result<Self> {
        let d = gen.spec.z_dim;
        if !paired {
            return Ok(LatentBatch { z: sample_latent(n, d, rng), paired });
        }
        if n % 2 != 0 {
            return Err(Error::Config(format!("paired latent batch needs an even size, got {n}")));
        }
        let half: Tensor = sample_latent(n / 2, d, rng);
        let partner = gen.partner(&half);
        Ok(LatentBatch { z: Tensor::cat_first(&[&half, &partner])?, paired })
    }

    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mean_sigmoid(t: &Tensor) -> f64 {
    let n = t.numel().max(1) as f64;
    t.data().iter().map(|&v| crate::tensor::sigmoid(v) as f64).sum::<f64>() / n
}

/// `mean(softplus(sign * logits))`.
fn softplus_mean(tape: &mut Tape, logits: Var, sign: f64) -> Var {
    let s = tape.scale(logits, sign);
    let sp = tape.softplus(s);
    tape.mean(sp)
}

/// `alpha * mean((G(z) - mirror(G(z_N)))^2)` over the two halves of a
/// paired image batch.
pub fn pair_loss(tape: &mut Tape, images: Var, alpha: f64) -> Result<Var> {
    let n = tape.shape(images)[0];
    let a = tape.narrow_first(images, 0, n / 2)?;
    let b = tape.narrow_first(images, n / 2, n / 2)?;
    let mb = structured::mirror_var(tape, b);
    let m = tape.mse(a, mb)?;
    Ok(tape.scale(m, alpha))
}

/// Mirror-pair loss of `gen` on latents `z` and their partners, with
/// running statistics.
pub fn symmetric_loss(gen: &Generator, z: &Tensor, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha_sym must be >= 0, got {alpha}")));
    }
    let a = gen.cast::<f64>().generate(&z.cast())?;
    let b = gen.cast::<f64>().generate(&gen.partner(z).cast())?;
    Ok(alpha * a.mse(&structured::mirror(&b)))
}

/// One discriminator update followed by one generator update with the
/// non-saturating loss. `fake_view` maps generated images to what the
/// discriminator sees (identity for plain GAN training). With `g_phase`
/// set to `Eval` the generator's normalization statistics stay fixed.
pub fn gan_step_with(
    state: &mut GanState,
    real: &Tensor,
    latents: &LatentBatch,
    alpha_sym: f64,
    g_phase: Phase,
    fake_view: &mut dyn FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<StepRecord> {
    if alpha_sym < 0.0 {
        return Err(Error::Config(format!("alpha_sym must be >= 0, got {alpha_sym}")));
    }
    if alpha_sym > 0.0 && !latents.paired {
        return Err(Error::Config("the mirror-pair loss needs a paired latent batch".into()));
    }
    state.step += 1;

    // generator forward once; reused for both updates
    let mut g_tape = Tape::new();
    let mut g_bind = Binding::trainable();
    let z = g_tape.constant(latents.z.clone());
    let images = state.gen.forward(&mut g_tape, &mut g_bind, z, g_phase)?;
    let fake = fake_view(&mut g_tape, images)?;

    // discriminator update on detached fakes
    let mut d_tape = Tape::new();
    let mut d_bind = Binding::trainable();
    let xr = d_tape.constant(real.clone());
    let xf = d_tape.constant(g_tape.value(fake).clone());
    let lr = state.disc.logits(&mut d_tape, &mut d_bind, xr, Phase::Train)?;
    let lf = state.disc.logits(&mut d_tape, &mut d_bind, xf, Phase::Train)?;
    let d_real = mean_sigmoid(d_tape.value(lr));
    let d_fake = mean_sigmoid(d_tape.value(lf));
    let lr_loss = softplus_mean(&mut d_tape, lr, -1.0);
    let lf_loss = softplus_mean(&mut d_tape, lf, 1.0);
    let d_loss_v = d_tape.add(lr_loss, lf_loss)?;
    let d_loss = d_tape.value(d_loss_v).item() as f64;
    if d_loss.is_finite() {
        let grads = d_tape.backward(d_loss_v)?;
        let named = d_bind.gradients(&grads);
        if state.d_opt.step(state.disc.params.iter_mut(), &named)? {
            d_bind.commit_running_stats(&mut state.disc.params)?;
        }
    } else {
        state.rejected += 1;
        log::warn!("step {}: non-finite discriminator loss, update rejected", state.step);
    }

    // generator update through the refreshed discriminator
    let mut frozen = Binding::frozen();
    let l = state.disc.logits(&mut g_tape, &mut frozen, fake, Phase::Train)?;
    let adv = softplus_mean(&mut g_tape, l, -1.0);
    let (g_loss_v, sym_loss) = if alpha_sym > 0.0 {
        let s = pair_loss(&mut g_tape, images, alpha_sym)?;
        let v = g_tape.value(s).item() as f64;
        (g_tape.add(adv, s)?, v)
    } else {
        (adv, 0.0)
    };
    let g_loss = g_tape.value(g_loss_v).item() as f64;
    if g_loss.is_finite() {
        let grads = g_tape.backward(g_loss_v)?;
        let named = g_bind.gradients(&grads);
        if state.g_opt.step(state.gen.params.iter_mut(), &named)? {
            g_bind.commit_running_stats(&mut state.gen.params)?;
        }
    } else {
        state.rejected += 1;
        log::warn!("step {}: non-finite generator loss, update rejected", state.step);
    }
    Ok(StepRecord { step: state.step, d_loss, g_loss, sym_loss, d_real, d_fake })
}

pub fn gan_step(state: &mut GanState, real: &Tensor, latents: &LatentBatch, alpha_sym: f64) -> Result<StepRecord> {
    gan_step_with(state, real, latents, alpha_sym, Phase::Train, &mut |_, x| Ok(x))
}

/// Spread of generator outputs across a latent batch: mean over pixels of
/// the per-pixel standard deviation. Near zero signals mode collapse.
pub fn output_spread(images: &Tensor) -> f64 {
    let s = images.shape();
    let n = s[0];
    if n < 2 {
        return 0.0;
    }
    let per: usize = s[1..].iter().product();
    let d = images.data();
    let mut total = 0.0;
    for p in 0..per {
        let vals = (0..n).map(|i| d[i * per + p] as f64);
        let mean = vals.clone().sum::<f64>() / n as f64;
        let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt();
    }
    total / per as f64
}

/// Periodic check during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub spread: f64,
    /// Largest `|G(z_N) - mirror(G(z))|` over the probe batch.
    pub mirror_gap: f64,
    pub mirror_mse: f64,
}

pub fn evaluate(gen: &Generator, probe: &Tensor, step: u64) -> Result<EvalRecord> {
    let a = gen.generate(probe)?;
    let b = gen.generate(&gen.partner(probe))?;
    let mb = structured::mirror(&a);
    Ok(EvalRecord {
        step,
        spread: output_spread(&a),
        mirror_gap: mb.max_abs_diff(&b) as f64,
        mirror_mse: mb.mse(&b) as f64,
    })
}

/// Drives `gan_step` over a dataset, writing one JSON line per step.
pub struct Trainer<'a> {
    pub state: GanState,
    pub config: TrainConfig,
    pub data: &'a Dataset,
    rng: rand_chacha::ChaCha8Rng,
    probe: Tensor,
}

impl<'a> Trainer<'a> {
    pub fn new(state: GanState, config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        if data.size != state.gen.spec.output_size() {
            return Err(Error::Config(format!(
                "dataset images are {}x{}, the generator makes {}x{}",
                data.size,
                data.size,
                state.gen.spec.output_size(),
                state.gen.spec.output_size()
            )));
        }
        if state.disc.spec.input != data.size {
            return Err(Error::Config(format!(
                "discriminator judges {}x{} images, the dataset has {}x{}",
                state.disc.spec.input, state.disc.spec.input, data.size, data.size
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let probe = sample_latent(16, state.gen.spec.z_dim, &mut rng);
        Ok(Trainer { state, config, data, rng, probe })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let real = self.data.sample_batch(self.config.batch, &mut self.rng)?;
        let latents = LatentBatch::sample(&self.state.gen, self.config.batch, self.config.paired(), &mut self.rng)?;
        gan_step(&mut self.state, &real, &latents, self.config.alpha_sym)
    }

    pub fn evaluate(&self) -> Result<EvalRecord> {
        evaluate(&self.state.gen, &self.probe, self.state.step)
    }

    /// Runs `steps` updates. `on_eval` sees every evaluation record.
    pub fn run(
        &mut self,
        steps: usize,
        log: &mut dyn Write,
        on_eval: &mut dyn FnMut(&GanState, &EvalRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            let r = self.step()?;
            serde_json::to_writer(&mut *log, &r)?;
            log.write_all(b"\n")?;
            records.push(r);
            let every = self.config.eval_every;
            if every > 0 && self.state.step % every as u64 == 0 {
                let e = self.evaluate()?;
                log::info!(
                    "step {}: d_loss {:.4} g_loss {:.4} D(x) {:.3} D(G(z)) {:.3} spread {:.4} mirror gap {:.2e}",
                    r.step,
                    r.d_loss,
                    r.g_loss,
                    r.d_real,
                    r.d_fake,
                    e.spread,
                    e.mirror_gap
                );
                if e.spread < 0.02 {
                    log::warn!("step {}: generator outputs barely vary across z (possible mode collapse)", r.step);
                }
                on_eval(&self.state, &e)?;
            }
        }
        log.flush()?;
        Ok(records)
    }
}

/// Partner latents for any generator kind; re-exported for evaluation code.
pub fn partners(gen: &Generator, z: &Tensor) -> Tensor {
    partner_latent(gen.spec.kind, gen.spec.zprime_dim, z)
}
