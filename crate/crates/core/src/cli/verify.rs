//! Invariant suite run against a loaded checkpoint.

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::models::{gram_descriptor, negate_zprime, sample_latent, DiscriminatorKind, GeneratorKind};
use crate::structured::{flip, mirror, PadKind};
use crate::tensor::Tensor;
use crate::tiling::pattern::TilingPattern;
use crate::training::GanState;

pub const EQUIVARIANCE_TOL: f64 = 1e-5;
pub const D_INVARIANCE_TOL: f64 = 1e-6;
const SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Pass(String),
    Skip(String),
    /// Non-finite values: reported as a numeric failure.
    Numeric(String),
    Violated(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub outcome: Outcome,
}

impl Check {
    pub fn line(&self) -> String {
        match &self.outcome {
            Outcome::Pass(d) => format!("ok    {}: {d}", self.name),
            Outcome::Skip(d) => format!("skip  {}: {d}", self.name),
            Outcome::Numeric(d) => format!("FAIL  {}: {d}", self.name),
            Outcome::Violated(d) => format!("FAIL  {}: {d}", self.name),
        }
    }
}

/// The first numeric failure, else the first violation, as an error.
pub fn verdict(checks: &[Check]) -> Result<()> {
    if let Some(c) = checks.iter().find(|c| matches!(c.outcome, Outcome::Numeric(_))) {
        return Err(Error::Numeric(c.line()));
    }
    if let Some(c) = checks.iter().find(|c| matches!(c.outcome, Outcome::Violated(_))) {
        return Err(Error::Invariant(c.line()));
    }
    Ok(())
}

fn bound(name: &'static str, value: f64, tol: f64) -> Check {
    let outcome = if !value.is_finite() {
        Outcome::Numeric(format!("non-finite deviation {value}"))
    } else if value <= tol {
        Outcome::Pass(format!("max deviation {value:.3e} <= {tol:.0e}"))
    } else {
        Outcome::Violated(format!("max deviation {value:.3e} > {tol:.0e}"))
    };
    Check { name, outcome }
}

fn attempt(name: &'static str, f: impl FnOnce() -> Result<Check>) -> Check {
    f().unwrap_or_else(|e| Check {
        name,
        outcome: match e {
            Error::Numeric(m) => Outcome::Numeric(m),
            other => Outcome::Violated(other.to_string()),
        },
    })
}

/// Circular shift of the last two axes.
pub fn roll<T: crate::tensor::Scalar>(x: &Tensor<T>, dy: usize, dx: usize) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.numel() / (h * w);
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                out.push(d[base + ((y + h - dy % h) % h) * w + (xx + w - dx % w) % w]);
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

fn finite_check(state: &GanState) -> Check {
    let mut bad = Vec::new();
    let sets = [("G", &state.gen.params), ("D", &state.disc.params)];
    for (who, p) in sets {
        for (k, v) in p.params.iter().chain(p.buffers.iter()) {
            if !v.is_finite() {
                bad.push(format!("{who}/{k}"));
            }
        }
    }
    for (who, o) in [("optG", &state.g_opt), ("optD", &state.d_opt)] {
        for (k, v) in o.m.iter().chain(o.v.iter()) {
            if !v.is_finite() {
                bad.push(format!("{who}/{k}"));
            }
        }
    }
    let outcome = if bad.is_empty() {
        Outcome::Pass("all parameters, statistics and optimizer moments finite".into())
    } else {
        Outcome::Numeric(format!("non-finite values in {}", bad.join(", ")))
    };
    Check { name: "finite values", outcome }
}

fn state_checks(state: &GanState) -> Vec<Check> {
    let mut neg_var = Vec::new();
    for (who, p) in [("G", &state.gen.params), ("D", &state.disc.params)] {
        for (k, v) in &p.buffers {
            if k.ends_with(".var") && v.data().iter().any(|&x| x < 0.0) {
                neg_var.push(format!("{who}/{k}"));
            }
        }
    }
    let mut neg_v = Vec::new();
    for (who, o) in [("optG", &state.g_opt), ("optD", &state.d_opt)] {
        if o.v.values().any(|t| t.data().iter().any(|&x| x < 0.0)) {
            neg_v.push(who);
        }
    }
    let opt_steps = state.g_opt.step + state.g_opt.skipped <= state.step && state.d_opt.step + state.d_opt.skipped <= state.step;
    vec![
        Check {
            name: "running variances",
            outcome: if neg_var.is_empty() {
                Outcome::Pass("all batch-norm running variances >= 0".into())
            } else {
                Outcome::Violated(format!("negative running variance in {}", neg_var.join(", ")))
            },
        },
        Check {
            name: "optimizer moments",
            outcome: if neg_v.is_empty() {
                Outcome::Pass("all second-moment estimates >= 0".into())
            } else {
                Outcome::Violated(format!("negative second moments in {}", neg_v.join(", ")))
            },
        },
        Check {
            name: "step counters",
            outcome: if opt_steps {
                Outcome::Pass(format!("{} training steps", state.step))
            } else {
                Outcome::Violated(format!(
                    "optimizer step counts ({} / {}) exceed the training step {}",
                    state.g_opt.step, state.d_opt.step, state.step
                ))
            },
        },
    ]
}

fn kernel_audit(state: &GanState) -> Check {
    attempt("symmetric kernel parameters", || {
        let g = &state.gen.spec;
        let mut counted = Vec::new();
        if g.kind.symmetric_kernels() {
            let k = g.kernel;
            for l in 1..=g.stages() {
                let t = state.gen.params.get(&format!("conv{l}.free"))?;
                let (o, c) = (g.channels[l], g.channels[l - 1]);
                if t.numel() != o * c * k * k.div_ceil(2) {
                    return Ok(Check {
                        name: "symmetric kernel parameters",
                        outcome: Outcome::Violated(format!("G stage {l} has {} free scalars", t.numel())),
                    });
                }
                counted.push(t.numel());
            }
        }
        let d = &state.disc.spec;
        if d.kind == DiscriminatorKind::Symmetric {
            let k = d.kernel;
            for l in 1..=d.stages() {
                let t = state.disc.params.get(&format!("conv{l}.free"))?;
                let (o, c) = (d.channels[l], d.channels[l - 1]);
                if t.numel() != o * c * k * k.div_ceil(2) {
                    return Ok(Check {
                        name: "symmetric kernel parameters",
                        outcome: Outcome::Violated(format!("D stage {l} has {} free scalars", t.numel())),
                    });
                }
                counted.push(t.numel());
            }
        }
        Ok(Check {
            name: "symmetric kernel parameters",
            outcome: if counted.is_empty() {
                Outcome::Skip("no symmetric kernel banks".into())
            } else {
                Outcome::Pass(format!("{} banks, {} free scalars", counted.len(), counted.iter().sum::<usize>()))
            },
        })
    })
}

fn generator_checks(state: &GanState, seed: u64) -> Vec<Check> {
    let gen = &state.gen;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let z: Tensor = sample_latent(SAMPLES, gen.spec.z_dim, &mut rng);
    let mut out = Vec::new();
    match gen.spec.kind {
        GeneratorKind::Zprime => {
            out.push(attempt("z' equivariance", || {
                let a = gen.generate(&z)?;
                let b = gen.generate(&negate_zprime(&z, gen.spec.zprime_dim))?;
                Ok(bound("z' equivariance", mirror(&a).max_abs_diff(&b) as f64, EQUIVARIANCE_TOL))
            }));
            out.push(attempt("z'=0 self-symmetry", || {
                let mut z0 = z.clone();
                let (d, zp) = (gen.spec.z_dim, gen.spec.zprime_dim);
                for row in z0.data_mut().chunks_mut(d) {
                    row[..zp].iter_mut().for_each(|v| *v = 0.0);
                }
                let a = gen.generate(&z0)?;
                Ok(bound("z'=0 self-symmetry", mirror(&a).max_abs_diff(&a) as f64, EQUIVARIANCE_TOL))
            }));
        }
        GeneratorKind::Flip => {
            out.push(attempt("flip equivariance", || {
                let a = gen.generate(&z)?;
                let b = gen.generate(&flip(&z))?;
                Ok(bound("flip equivariance", mirror(&a).max_abs_diff(&b) as f64, EQUIVARIANCE_TOL))
            }));
        }
        GeneratorKind::Baseline => out.push(Check {
            name: "generator equivariance",
            outcome: Outcome::Skip("baseline generator carries no symmetry guarantee".into()),
        }),
        GeneratorKind::Cyclic => out.push(cyclic_check(state, &z)),
    }
    out
}

fn cyclic_check(state: &GanState, z: &Tensor) -> Check {
    let gen = &state.gen;
    if gen.spec.pad != PadKind::Circular {
        return Check {
            name: "circular shift equivariance",
            outcome: Outcome::Skip(format!("{} padding has no plain shift symmetry", gen.spec.pad)),
        };
    }
    attempt("circular shift equivariance", || {
        let z = z.narrow_first(0, 8.min(z.shape()[0]))?;
        let (n, b) = (z.shape()[0], gen.spec.base);
        let scale = 1usize << gen.spec.stages();
        // Rolling the latent grid by one cell rolls the patch by one cell.
        let grid = z.clone().reshape(&[n, gen.spec.latent_channels(), b, b])?;
        let shifted = roll(&grid, 1, 1).reshape(&[n, gen.spec.z_dim])?;
        let a = gen.generate(&z)?;
        let b = gen.generate(&shifted)?;
        Ok(bound("circular shift equivariance", roll(&a, scale, scale).max_abs_diff(&b) as f64, 0.0))
    })
}

fn discriminator_checks(state: &GanState, seed: u64) -> Vec<Check> {
    let disc = &state.disc;
    let s = disc.spec.input;
    let c = disc.spec.channels[0];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
    let x: Tensor = Tensor::uniform(&[16, c, s, s], -1.0, 1.0, &mut rng);
    match disc.spec.kind {
        DiscriminatorKind::Symmetric => vec![attempt("discriminator mirror invariance", || {
            let a = disc.discriminate(&x)?;
            let b = disc.discriminate(&mirror(&x))?;
            let dev = a.iter().zip(&b).map(|(p, q)| (p - q).abs() as f64).fold(0.0, f64::max);
            Ok(bound("discriminator mirror invariance", dev, D_INVARIANCE_TOL))
        })],
        DiscriminatorKind::Standard => vec![Check {
            name: "discriminator mirror invariance",
            outcome: Outcome::Skip("standard discriminator carries no invariance guarantee".into()),
        }],
        DiscriminatorKind::Texture => vec![attempt("gram descriptor", || {
            let g = gram_descriptor(&x.narrow_first(0, 1)?.reshape(&[c, s, s])?.cast::<f64>())?;
            let k = c + 1;
            let mut asym: f64 = 0.0;
            for i in 0..k {
                for j in 0..k {
                    asym = asym.max((g.at(&[i, j]) - g.at(&[j, i])).abs());
                }
            }
            let diag_ok = (0..k).all(|i| g.at(&[i, i]) >= 0.0);
            Ok(Check {
                name: "gram descriptor",
                outcome: if asym == 0.0 && diag_ok {
                    Outcome::Pass(format!("{k}x{k}, symmetric with non-negative diagonal"))
                } else {
                    Outcome::Violated(format!("asymmetry {asym:.3e}"))
                },
            })
        })],
    }
}

fn pattern_checks() -> Check {
    attempt("tiling edge identifications", || {
        let mut total = 0;
        for p in TilingPattern::all() {
            total += p.check_consistency(8, 4, 8).map_err(|e| Error::Invariant(format!("{}: {e}", p.name)))?;
        }
        Ok(Check {
            name: "tiling edge identifications",
            outcome: Outcome::Pass(format!("{total} seam comparisons over 4 patterns at S=8")),
        })
    })
}

/// Every check, in order. Stops after the finiteness check if it fails,
/// since the architectural checks would only repeat it.
pub fn run_checks(state: &GanState, seed: u64) -> Vec<Check> {
    let mut out = vec![finite_check(state)];
    if !matches!(out[0].outcome, Outcome::Pass(_)) {
        return out;
    }
    out.extend(state_checks(state));
    out.push(kernel_audit(state));
    out.extend(generator_checks(state, seed));
    out.extend(discriminator_checks(state, seed));
    out.push(pattern_checks());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
    use crate::tensor::AdamConfig;

    fn state(kind: GeneratorKind) -> GanState {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = Generator::new(GeneratorSpec { channels: vec![8, 4, 3], ..GeneratorSpec::desk(kind) }, &mut rng).unwrap();
        let d = Discriminator::new(
            DiscriminatorSpec { channels: vec![3, 4, 8], ..DiscriminatorSpec::desk(DiscriminatorKind::Symmetric) },
            &mut rng,
        )
        .unwrap();
        GanState::new(g, d, AdamConfig::default(), AdamConfig::default()).unwrap()
    }

    #[test]
    fn fresh_models_pass() {
        for kind in [GeneratorKind::Zprime, GeneratorKind::Flip, GeneratorKind::Baseline] {
            let checks = run_checks(&state(kind), 0);
            assert!(verdict(&checks).is_ok(), "{kind:?}: {checks:?}");
        }
    }

    #[test]
    fn negative_variance_is_a_violation() {
        let mut st = state(GeneratorKind::Zprime);
        st.gen.params.buffers.get_mut("bn1.var").unwrap().data_mut()[0] = -1.0;
        let e = verdict(&run_checks(&st, 0)).unwrap_err();
        assert_eq!(e.exit_code(), 5);
    }

    #[test]
    fn nan_is_numeric() {
        let mut st = state(GeneratorKind::Zprime);
        st.gen.params.params.get_mut("fc_sym.w").unwrap().data_mut()[0] = f32::NAN;
        let e = verdict(&run_checks(&st, 0)).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn roll_wraps() {
        let t = Tensor::new(&[1, 2, 3], vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(roll(&t, 0, 1).data(), &[2.0, 0.0, 1.0, 5.0, 3.0, 4.0]);
        assert_eq!(roll(&t, 1, 0).data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
    }
}
