//! Command-line front end: one binary, one subcommand per workflow.
//!
//! Every artifact-producing command writes into a fresh run directory under
//! `io.out_dir` holding the effective configuration (`config.json`).
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric
//! failure, 5 invariant violation.

pub mod config;
pub mod verify;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use serde_json::{json, Value};

pub use config::RunConfig;

use crate::data::{dataset, render, Dataset};
use crate::error::{Error, Result};
use crate::models::{sample_latent, Discriminator, Generator, GeneratorKind};
use crate::structured::mirror;
use crate::tensor::Tensor;
use crate::tiling::pattern::{PatternName, TilingPattern};
use crate::tiling::{seam_stats, tile_plane, TileTrainer};
use crate::training::eval::{self, Pairing, SweepMode};
use crate::training::fit::{fine_tune, fit_z};
use crate::training::gan::output_spread;
use crate::training::{load_state, save_state, GanState, Trainer};

#[derive(Parser, Debug)]
#[command(name = "structgan", version, about = "Left-right symmetric GANs, generator fine-tuning and seamless tiling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration (sections model, train, fit, tile, io).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    /// Nine images from z to its mirror partner.
    Nine,
    /// Every z′ entry swept together.
    Scalar,
    /// One z′ entry swept, the others zero.
    Coord,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PairingArg {
    Partner,
    #[value(name = "self")]
    SelfMirror,
}

impl From<PairingArg> for Pairing {
    fn from(p: PairingArg) -> Self {
        match p {
            PairingArg::Partner => Pairing::Partner,
            PairingArg::SelfMirror => Pairing::SelfMirror,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a GAN; writes checkpoints and a metric log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Latent sweeps rendered as a montage with per-pair mirror MSE.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "nine")]
        mode: SweepKind,
        /// Images in a `nine` sweep.
        #[arg(short = 'n', long, default_value_t = 9)]
        n: usize,
        /// z′ entry for `coord` sweeps.
        #[arg(long, default_value_t = 0)]
        coord: usize,
        #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long, default_value_t = 0.25)]
        step: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Rows of G(z), mirror(G(z_N)) and their average.
    Overlay {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Mirror MSE along the sweep from z to its partner, as CSV and PNG.
    Msecurve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(short = 'n', long, default_value_t = 9)]
        n: usize,
        #[arg(long, value_enum, default_value = "partner")]
        pairing: PairingArg,
        #[command(flatten)]
        common: Common,
    },
    /// Recover a latent for an image.
    Fit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a latent, then fine-tune the generator on the image.
    Tune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Mirror-rotation strip of an image through its tuned generator.
    Rotate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Not needed when `--ckpt` comes from `tune`.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(short = 'n', long, default_value_t = 9)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a texture generator for seamless tiling.
    TileTrain {
        /// Source texture image, or `noise` for a synthetic noise texture.
        #[arg(long)]
        texture: String,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        pattern: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Tile a generated patch over the plane and score its seams.
    TileRender {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pattern: Option<String>,
        #[arg(long, default_value_t = 3)]
        rows: usize,
        #[arg(long, default_value_t = 3)]
        cols: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run the invariant suite against a checkpoint.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Creates `parent/name`, or `name-1`, `name-2`, ... when taken.
pub fn fresh_dir(parent: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(parent)?;
    for i in 0.. {
        let candidate = if i == 0 { parent.join(name) } else { parent.join(format!("{name}-{i}")) };
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

struct Run {
    dir: PathBuf,
    cfg: RunConfig,
}

impl Run {
    fn start(command: &str, cfg: RunConfig) -> Result<Run> {
        let name = cfg.io.name.clone().unwrap_or_else(|| command.to_string());
        let dir = fresh_dir(&cfg.io.out_dir, &name)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
        println!("run directory: {}", dir.display());
        Ok(Run { dir, cfg })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn run_info(&self) -> Result<Value> {
        Ok(json!({ "config": serde_json::to_value(&self.cfg)? }))
    }
}

fn resolve(common: &Common, base: Option<Value>) -> Result<RunConfig> {
    RunConfig::resolve(base, common.config.as_deref(), &common.sets)
}

/// Loads a checkpoint and resolves the config on top of the one stored in
/// it (minus the stored run name).
fn load_with_config(ckpt: &Path, common: &Common) -> Result<(GanState, Value, RunConfig)> {
    let (state, run) = load_state(ckpt)?;
    let mut base = run.get("config").cloned();
    if let Some(io) = base.as_mut().and_then(|b| b.get_mut("io")).and_then(Value::as_object_mut) {
        io.remove("name");
    }
    let cfg = resolve(common, base)?;
    Ok((state, run, cfg))
}

fn latent(gen: &Generator, seed: u64, n: usize) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    sample_latent(n, gen.spec.z_dim, &mut rng)
}

fn write_mse_csv(path: &Path, header: &str, rows: &[(String, f64)]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{header}")?;
    for (k, v) in rows {
        writeln!(f, "{k},{v:.16e}")?;
    }
    f.flush()?;
    Ok(())
}

fn mse_pairs(imgs: &Tensor) -> Result<Vec<(usize, usize, f64)>> {
    let n = imgs.shape()[0];
    let partner = eval::mse_curve_of(imgs, Pairing::Partner)?;
    Ok((0..n.div_ceil(2)).map(|i| (i, n - 1 - i, partner[i])).collect())
}

fn train(common: &Common) -> Result<()> {
    let cfg = resolve(common, None)?;
    let (gspec, dspec) = cfg.model.specs()?;
    let run = Run::start("train", cfg)?;
    let cfg = &run.cfg;
    let mut init = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.train.seed);
    init.set_stream(1);
    let gen = Generator::new(gspec, &mut init)?;
    let disc = Discriminator::new(dspec, &mut init)?;
    let data = cfg.train.data.load(gen.spec.output_size())?;
    let state = GanState::new(gen, disc, cfg.train.adam_g, cfg.train.adam_d)?;
    let mut trainer = Trainer::new(state, cfg.train.clone(), &data)?;
    let mut log = BufWriter::new(File::create(run.path("metrics.jsonl"))?);
    let mut evals = BufWriter::new(File::create(run.path("eval.jsonl"))?);
    let info = run.run_info()?;
    let every = cfg.train.checkpoint_every;
    let mut done = 0;
    while done < cfg.train.steps {
        let chunk = if every > 0 { every.min(cfg.train.steps - done) } else { cfg.train.steps - done };
        trainer.run(chunk, &mut log, &mut |_, e| {
            serde_json::to_writer(&mut evals, e)?;
            evals.write_all(b"\n")?;
            Ok(())
        })?;
        done += chunk;
        if every > 0 && done < cfg.train.steps {
            save_state(&trainer.state, info.clone(), &run.path(&format!("step-{done:06}.ckpt")))?;
        }
    }
    evals.flush()?;
    save_state(&trainer.state, info, &run.path("model.ckpt"))?;
    let probe = latent(&trainer.state.gen, cfg.io.seed, 16);
    let samples = trainer.state.gen.generate(&probe)?;
    render::save_montage(&render::unbatch(&samples)?, 2, 8, &run.path("samples.png"))?;
    println!("trained {} steps; checkpoint {}", trainer.state.step, run.path("model.ckpt").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(ckpt: &Path, mode: SweepKind, n: usize, coord: usize, lo: f64, hi: f64, step: f64, common: &Common) -> Result<()> {
    let (state, _, cfg) = load_with_config(ckpt, common)?;
    let gen = &state.gen;
    let z = latent(gen, cfg.io.seed, 1);
    let (imgs, labels): (Tensor, Vec<String>) = match mode {
        SweepKind::Nine => {
            let t = eval::linspace_down(n);
            (eval::yaw_sweep(gen, &z, n)?, t.iter().map(|v| format!("{v}")).collect())
        }
        SweepKind::Scalar | SweepKind::Coord => {
            let values = eval::sweep_values(lo, hi, step)?;
            let m = if mode == SweepKind::Scalar { SweepMode::All } else { SweepMode::Coordinate(coord) };
            (eval::scalar_sweep(gen, &z, &values, m)?, values.iter().map(|v| format!("{v}")).collect())
        }
    };
    let run = Run::start("sweep", cfg)?;
    let count = imgs.shape()[0];
    render::save_montage(&render::unbatch(&imgs)?, 1, count, &run.path("sweep.png"))?;
    let rows: Vec<(String, f64)> =
        mse_pairs(&imgs)?.into_iter().map(|(i, j, v)| (format!("{i},{j},{},{}", labels[i], labels[j]), v)).collect();
    write_mse_csv(&run.path("pair_mse.csv"), "i,j,value_i,value_j,mse", &rows)?;
    for (k, v) in &rows {
        println!("pair {k}: mse {v:.3e}");
    }
    Ok(())
}

fn overlay(ckpt: &Path, count: usize, common: &Common) -> Result<()> {
    let (state, _, cfg) = load_with_config(ckpt, common)?;
    let gen = &state.gen;
    if gen.spec.kind == GeneratorKind::Cyclic {
        return Err(Error::Config("overlay needs a generator with a mirror partner latent".into()));
    }
    let z = latent(gen, cfg.io.seed, count);
    let a = gen.generate(&z)?;
    let b = mirror(&gen.generate(&gen.partner(&z))?);
    let avg = a.zip_map(&b, |p, q| (p + q) / 2.0)?;
    let mut tiles = Vec::with_capacity(3 * count);
    for set in [&a, &b, &avg] {
        tiles.extend(render::unbatch(set)?);
    }
    let run = Run::start("overlay", cfg)?;
    render::save_montage(&tiles, 3, count, &run.path("overlay.png"))?;
    println!("overlay mean |G(z) - mirror(G(z_N))|^2 = {:.3e}", a.mse(&b));
    Ok(())
}

fn msecurve(ckpt: &Path, n: usize, pairing: PairingArg, common: &Common) -> Result<()> {
    let (state, _, cfg) = load_with_config(ckpt, common)?;
    let z = latent(&state.gen, cfg.io.seed, 1);
    let curve = eval::mse_curve(&state.gen, &z, n, pairing.into())?;
    let run = Run::start("msecurve", cfg)?;
    render::save_curve(&curve, &run.path("curve.csv"))?;
    for (i, v) in curve.iter().enumerate() {
        println!("{i} {v:.6e}");
    }
    Ok(())
}

fn load_target(path: &Path, gen: &Generator) -> Result<Tensor> {
    let size = gen.spec.output_size();
    dataset::load_image(path, size)
}

fn save_single(img: &Tensor, path: &Path) -> Result<()> {
    let imgs = render::unbatch(img)?;
    dataset::save_image(&imgs[0], path)
}

fn fit(ckpt: &Path, image: &Path, common: &Common) -> Result<()> {
    let (state, _, cfg) = load_with_config(ckpt, common)?;
    let target = load_target(image, &state.gen)?;
    let res = fit_z(&state.gen, &target, &cfg.fit)?;
    let run = Run::start("fit", cfg)?;
    std::fs::write(run.path("z.json"), serde_json::to_string_pretty(&json!({
        "z": res.z.data(),
        "mse": res.mse,
        "objective": res.objective,
        "initial_objective": res.initial_objective,
        "iterations": res.iterations,
        "diverged": res.diverged,
    }))? + "\n")?;
    save_single(&state.gen.generate(&res.z)?, &run.path("reconstruction.png"))?;
    dataset::save_image(&target, &run.path("target.png"))?;
    println!("fit: mse {:.4e}, objective {:.4e} after {} iterations", res.mse, res.objective, res.iterations);
    Ok(())
}

fn tune_state(state: &GanState, target: &Tensor, cfg: &RunConfig) -> Result<(GanState, Tensor, f64, f64)> {
    let res = fit_z(&state.gen, target, &cfg.fit)?;
    let data: Dataset = cfg.train.data.load(state.gen.spec.output_size())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.io.seed);
    let tuned = fine_tune(state, &res.z, target, &data, &cfg.train, &cfg.fit, &mut rng)?;
    Ok((tuned.state, tuned.z, tuned.residual_fit, tuned.residual))
}

fn tune(ckpt: &Path, image: &Path, common: &Common) -> Result<()> {
    let (state, _, cfg) = load_with_config(ckpt, common)?;
    let target = load_target(image, &state.gen)?;
    let (tuned, z, before, after) = tune_state(&state, &target, &cfg)?;
    let run = Run::start("tune", cfg)?;
    let mut info = run.run_info()?;
    info["latent"] = json!(z.data());
    info["residual_fit"] = json!(before);
    info["residual"] = json!(after);
    save_state(&tuned, info, &run.path("tuned.ckpt"))?;
    dataset::save_image(&target, &run.path("target.png"))?;
    save_single(&state.gen.generate(&z)?, &run.path("before.png"))?;
    save_single(&tuned.gen.generate(&z)?, &run.path("after.png"))?;
    println!("tune: residual {before:.4e} -> {after:.4e} (ratio {:.3})", after / before);
    Ok(())
}

fn rotate(ckpt: &Path, image: Option<&Path>, n: usize, common: &Common) -> Result<()> {
    let (state, info, cfg) = load_with_config(ckpt, common)?;
    let stored: Option<Vec<f32>> = info.get("latent").and_then(|v| serde_json::from_value(v.clone()).ok());
    let (gen_i, z) = match (image, stored) {
        (Some(path), _) => {
            let target = load_target(path, &state.gen)?;
            let (tuned, z, before, after) = tune_state(&state, &target, &cfg)?;
            println!("tune: residual {before:.4e} -> {after:.4e}");
            (tuned.gen, z)
        }
        (None, Some(z)) => {
            let d = state.gen.spec.z_dim;
            (state.gen.clone(), Tensor::new(&[1, d], z)?)
        }
        (None, None) => {
            return Err(Error::Config("rotate needs --image unless the checkpoint comes from tune".into()));
        }
    };
    let strip = eval::yaw_sweep(&gen_i, &z, n)?;
    let run = Run::start("rotate", cfg)?;
    render::save_montage(&render::unbatch(&strip)?, 1, n, &run.path("rotation.png"))?;
    let ends = strip.narrow_first(0, 1)?.mse(&mirror(&strip.narrow_first(n - 1, 1)?));
    println!("rotation strip of {n} images; mse(first, mirror(last)) = {ends:.3e}");
    Ok(())
}

fn tile_train(texture: &str, mode: Option<&str>, pattern: Option<&str>, common: &Common) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    if let Some(m) = mode {
        cfg.tile.mode = m.parse()?;
    }
    if let Some(p) = pattern {
        cfg.tile.pattern = p.parse()?;
    }
    let (gspec, dspec) = cfg.tile.specs()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.tile.seed);
    let source = if texture == "noise" {
        dataset::noise_texture(cfg.tile.texture_size, cfg.tile.texture_size, &mut rng)
    } else {
        dataset::load_image_raw(Path::new(texture))?
    };
    rng.set_stream(1);
    let gen = Generator::new(gspec, &mut rng)?;
    let disc = Discriminator::new(dspec, &mut rng)?;
    let run = Run::start("tile-train", cfg)?;
    let cfg = &run.cfg;
    let state = GanState::new(gen, disc, cfg.tile.adam_g, cfg.tile.adam_d)?;
    let mut trainer = TileTrainer::new(state, source.clone(), cfg.tile.mode, cfg.tile.pattern, cfg.tile.batch, cfg.tile.seed)?;
    let mut log = BufWriter::new(File::create(run.path("metrics.jsonl"))?);
    let pattern = TilingPattern::get(cfg.tile.pattern);
    let period = 1usize << trainer.state.gen.spec.stages();
    for _ in 0..cfg.tile.steps {
        let r = trainer.step()?;
        serde_json::to_writer(&mut log, &r)?;
        log.write_all(b"\n")?;
        let every = cfg.tile.eval_every as u64;
        if every > 0 && r.step % every == 0 {
            let patches = trainer.state.gen.generate(&latent(&trainer.state.gen, cfg.io.seed, 8))?;
            let seam = seam_stats(&tile_plane(&patches, &pattern, 2, 2)?, patches.shape()[3], pattern.row_shift, period)?;
            log::info!(
                "step {}: D(x) {:.3} D(G(z)) {:.3} seam {:.3} spread {:.4}",
                r.step,
                r.d_real,
                r.d_fake,
                seam.ratio().unwrap_or(f64::NAN),
                output_spread(&patches)
            );
        }
    }
    log.flush()?;
    let mut info = run.run_info()?;
    info["tile"] = json!({ "mode": cfg.tile.mode, "pattern": cfg.tile.pattern });
    save_state(&trainer.state, info, &run.path("tile.ckpt"))?;
    dataset::save_image(&source, &run.path("texture.png"))?;
    let patch = trainer.state.gen.generate(&latent(&trainer.state.gen, cfg.io.seed, 1))?;
    save_single(&patch, &run.path("patch.png"))?;
    println!("tile-train: {} steps; checkpoint {}", trainer.state.step, run.path("tile.ckpt").display());
    Ok(())
}

fn tile_render(ckpt: &Path, pattern: Option<&str>, rows: usize, cols: usize, common: &Common) -> Result<()> {
    let (state, info, mut cfg) = load_with_config(ckpt, common)?;
    if let Some(p) = pattern {
        cfg.tile.pattern = p.parse()?;
    } else if let Some(p) = info.pointer("/tile/pattern").and_then(|v| serde_json::from_value::<PatternName>(v.clone()).ok()) {
        cfg.tile.pattern = p;
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Config("rows and cols must be positive".into()));
    }
    let pat = TilingPattern::get(cfg.tile.pattern);
    let patch = state.gen.generate(&latent(&state.gen, cfg.io.seed, 1))?;
    let canvas = tile_plane(&patch, &pat, rows, cols)?;
    let s = patch.shape()[3];
    let period = 1usize << state.gen.spec.stages();
    let stats = seam_stats(&canvas, s, pat.row_shift, period)?;
    let run = Run::start("tile-render", cfg)?;
    save_single(&canvas, &run.path("canvas.png"))?;
    save_single(&patch, &run.path("patch.png"))?;
    let report = json!({
        "pattern": pat.name,
        "rows": rows,
        "cols": cols,
        "patch": s,
        "period": period,
        "seam_score": stats.ratio(),
        "boundary": stats.boundary,
        "interior": stats.interior,
        "boundary_pairs": stats.boundary_pairs,
        "interior_pairs": stats.interior_pairs,
    });
    std::fs::write(run.path("seam.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    match stats.ratio() {
        Some(r) => println!("seam_score {r:.4} (boundary {:.4}, interior {:.4})", stats.boundary, stats.interior),
        None => println!("seam_score undefined (no interior variation)"),
    }
    Ok(())
}

fn verify_cmd(ckpt: &Path, common: &Common) -> Result<()> {
    let (state, _, cfg) = load_with_config(ckpt, common)?;
    let checks = verify::run_checks(&state, cfg.io.seed);
    for c in &checks {
        println!("{}", c.line());
    }
    verify::verdict(&checks)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => train(&common),
        Command::Sweep { ckpt, mode, n, coord, lo, hi, step, common } => sweep(&ckpt, mode, n, coord, lo, hi, step, &common),
        Command::Overlay { ckpt, count, common } => overlay(&ckpt, count, &common),
        Command::Msecurve { ckpt, n, pairing, common } => msecurve(&ckpt, n, pairing, &common),
        Command::Fit { ckpt, image, common } => fit(&ckpt, &image, &common),
        Command::Tune { ckpt, image, common } => tune(&ckpt, &image, &common),
        Command::Rotate { ckpt, image, n, common } => rotate(&ckpt, image.as_deref(), n, &common),
        Command::TileTrain { texture, mode, pattern, common } => {
            tile_train(&texture, mode.as_deref(), pattern.as_deref(), &common)
        }
        Command::TileRender { ckpt, pattern, rows, cols, common } => {
            tile_render(&ckpt, pattern.as_deref(), rows, cols, &common)
        }
        Command::Verify { ckpt, common } => verify_cmd(&ckpt, &common),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as i32
        }
    }
}
