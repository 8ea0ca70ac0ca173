//! Seamless textures: tiling geometry, tile-and-crop views of a generated
//! patch, cyclic generation, seam scoring and texture GAN training.

pub mod pattern;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use pattern::{EdgeMap, EdgeTable, IndexExpr, PatternName, TilingPattern, Transform};

use crate::error::{Error, Result};
use crate::models::{Generator, GeneratorKind, Phase};
use crate::structured::PadKind;
use crate::tensor::{PlaneMap, Scalar, Tape, Tensor, Var};
use crate::training::gan::{gan_step_with, GanState, LatentBatch, StepRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileSpec {
    pub patch: usize,
    pub pattern: PatternName,
    pub crop: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec { patch: 64, pattern: PatternName::Grid, crop: 64 }
    }
}

/// Index map from an `s x s` patch to a `rows*s x cols*s` tiled canvas.
pub fn tile_map(pattern: &TilingPattern, s: usize, rows: usize, cols: usize) -> PlaneMap {
    PlaneMap::from_fn(s, s, rows * s, cols * s, |y, x| Some(pattern.patch_index(y as i64, x as i64, s)))
}

/// Index map for the `crop x crop` window at plane offset `(oy, ox)`.
pub fn crop_map(pattern: &TilingPattern, s: usize, crop: usize, oy: i64, ox: i64) -> PlaneMap {
    PlaneMap::from_fn(s, s, crop, crop, |y, x| Some(pattern.patch_index(oy + y as i64, ox + x as i64, s)))
}

fn as_batch<T: Scalar>(patch: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match patch.ndim() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(patch.shape());
            Ok((patch.clone().reshape(&s)?, true))
        }
        4 => Ok((patch.clone(), false)),
        _ => Err(Error::Shape(format!("expected [C,S,S] or [N,C,S,S], got {:?}", patch.shape()))),
    }
}

fn square_side(shape: &[usize]) -> Result<usize> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h != w || h == 0 {
        return Err(Error::Shape(format!("tiling needs a square patch, got {h}x{w}")));
    }
    Ok(h)
}

/// Lays copies of `patch` (`[C,S,S]` or `[N,C,S,S]`) on a `rows x cols`
/// grid of tiles per `pattern`.
pub fn tile_plane<T: Scalar>(patch: &Tensor<T>, pattern: &TilingPattern, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let (x, single) = as_batch(patch)?;
    let s = square_side(x.shape())?;
    let map = tile_map(pattern, s, rows, cols);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = tape.plane_gather(v, &map)?;
    let out = tape.value(out).clone();
    if single {
        let sh = out.shape()[1..].to_vec();
        out.reshape(&sh)
    } else {
        Ok(out)
    }
}

/// Offset drawn uniformly over one period of the tiled plane.
pub fn random_offset<R: Rng + ?Sized>(pattern: &TilingPattern, s: usize, rng: &mut R) -> (i64, i64) {
    let (py, px) = pattern.period(s);
    (rng.gen_range(0..py as i64), rng.gen_range(0..px as i64))
}

/// Crops of the tiled plane of each patch in `x: [N,C,S,S]`, one offset per
/// patch. Linear in `x`, so gradients flow back to the patch.
pub fn crop_tiled_var<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    pattern: &TilingPattern,
    crop: usize,
    offsets: &[(i64, i64)],
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || offsets.len() != shape[0] {
        return Err(Error::Shape(format!("{} offsets for a patch batch {shape:?}", offsets.len())));
    }
    let s = square_side(&shape)?;
    if offsets.windows(2).all(|w| w[0] == w[1]) {
        let (oy, ox) = offsets[0];
        return tape.plane_gather(x, &crop_map(pattern, s, crop, oy, ox));
    }
    let mut parts = Vec::with_capacity(offsets.len());
    for (i, &(oy, ox)) in offsets.iter().enumerate() {
        let xi = tape.narrow_first(x, i, 1)?;
        parts.push(tape.plane_gather(xi, &crop_map(pattern, s, crop, oy, ox))?);
    }
    tape.concat_first(&parts)
}

/// Random-offset crops of the tiled plane, one per patch.
pub fn random_crop_tiled<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    pattern: &TilingPattern,
    crop: usize,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected a [N,C,S,S] patch batch, got {shape:?}")));
    }
    let s = square_side(&shape)?;
    let offsets: Vec<_> = (0..shape[0]).map(|_| random_offset(pattern, s, rng)).collect();
    crop_tiled_var(tape, x, pattern, crop, &offsets)
}

/// Value-level crop of a single patch `[C,S,S]`.
pub fn crop_tiled<T: Scalar>(patch: &Tensor<T>, pattern: &TilingPattern, crop: usize, offset: (i64, i64)) -> Result<Tensor<T>> {
    let (x, _) = as_batch(patch)?;
    let n = x.shape()[0];
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = crop_tiled_var(&mut tape, v, pattern, crop, &vec![offset; n])?;
    let out = tape.value(out).clone();
    if patch.ndim() == 3 {
        let sh = out.shape()[1..].to_vec();
        out.reshape(&sh)
    } else {
        Ok(out)
    }
}

/// Checks that `gen` wraps its convolutions the way `pattern` needs.
pub fn check_cyclic(gen: &Generator, pattern: PatternName) -> Result<()> {
    let want = PadKind::for_pattern(pattern)?;
    if gen.spec.kind != GeneratorKind::Cyclic || gen.spec.pad != want {
        return Err(Error::Config(format!(
            "the {pattern} pattern needs a cyclic generator with {want} padding, got {:?} with {} padding",
            gen.spec.kind, gen.spec.pad
        )));
    }
    Ok(())
}

/// Patches from a cyclic generator; consistent with `pattern` by
/// construction.
pub fn cyclic_generate(gen: &Generator, z: &Tensor, pattern: PatternName) -> Result<Tensor> {
    check_cyclic(gen, pattern)?;
    gen.generate(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamStats {
    /// Mean absolute difference of neighbour pairs straddling a tile seam.
    pub boundary: f64,
    /// The same over interior pairs straddling translated seam lines.
    pub interior: f64,
    pub boundary_pairs: usize,
    pub interior_pairs: usize,
}

impl SeamStats {
    /// `boundary / interior`; `None` when the interior shows no variation.
    pub fn ratio(&self) -> Option<f64> {
        (self.interior_pairs > 0 && self.boundary_pairs > 0 && self.interior > 0.0)
            .then(|| self.boundary / self.interior)
    }
}

/// Seam statistics of tiled canvases (`[C,H,W]` or `[N,C,H,W]`) with tile
/// size `s`. Interior pairs are those straddling lines at multiples of
/// `period` inside tiles (period 1: every interior pair). Odd tile rows are
/// offset per `row_shift`, in half tiles.
pub fn seam_stats<T: Scalar>(canvas: &Tensor<T>, s: usize, row_shift: [u8; 2], period: usize) -> Result<SeamStats> {
    let (x, _) = as_batch(canvas)?;
    let sh = x.shape();
    let (planes, h, w) = (sh[0] * sh[1], sh[2], sh[3]);
    if s == 0 || period == 0 {
        return Err(Error::Config("tile size and period must be positive".into()));
    }
    let d = x.data();
    let (mut bsum, mut bn, mut isum, mut inn) = (0.0, 0usize, 0.0, 0usize);
    let mut add = |boundary: bool, v: f64| {
        if boundary {
            bsum += v;
            bn += 1;
        } else {
            isum += v;
            inn += 1;
        }
    };
    for p in 0..planes {
        let plane = &d[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let shift = row_shift[(y / s) % 2] as usize * (s / 2);
            for xx in 0..w.saturating_sub(1) {
                let line = (xx + 1 + s - shift % s) % s;
                let diff = (plane[y * w + xx + 1] - plane[y * w + xx]).to_f64_lossy().abs();
                if line == 0 {
                    add(true, diff);
                } else if line % period == 0 {
                    add(false, diff);
                }
            }
        }
        for y in 0..h.saturating_sub(1) {
            let line = (y + 1) % s;
            if line != 0 && line % period != 0 {
                continue;
            }
            for xx in 0..w {
                let diff = (plane[(y + 1) * w + xx] - plane[y * w + xx]).to_f64_lossy().abs();
                add(line == 0, diff);
            }
        }
    }
    Ok(SeamStats {
        boundary: if bn > 0 { bsum / bn as f64 } else { 0.0 },
        interior: if inn > 0 { isum / inn as f64 } else { 0.0 },
        boundary_pairs: bn,
        interior_pairs: inn,
    })
}

/// Boundary-to-interior discontinuity ratio; ~1 means statistically
/// seamless. `None` when the interior has no variation.
pub fn seam_score<T: Scalar>(canvas: &Tensor<T>, s: usize, pattern: &TilingPattern, period: usize) -> Result<Option<f64>> {
    Ok(seam_stats(canvas, s, pattern.row_shift, period)?.ratio())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileMode {
    /// The discriminator judges the generated patch itself; seamlessness
    /// comes from wrapped convolutions.
    Cyclic,
    /// The discriminator judges random crops of the tiled patch.
    Crop,
}

impl std::str::FromStr for TileMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(TileMode::Cyclic),
            "crop" => Ok(TileMode::Crop),
            _ => Err(Error::Config(format!("unknown tile mode {s:?} (expected cyclic or crop)"))),
        }
    }
}

/// Texture GAN on crops of a single source image.
pub struct TileTrainer {
    pub state: GanState,
    pub source: Tensor,
    pub mode: TileMode,
    pub pattern: TilingPattern,
    pub batch: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl TileTrainer {
    pub fn new(state: GanState, source: Tensor, mode: TileMode, pattern: PatternName, batch: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let s = state.gen.spec.output_size();
        let sh = source.shape();
        if sh.len() != 3 || sh[0] != state.gen.spec.out_channels() {
            return Err(Error::Data(format!("source texture must be [C,H,W], got {sh:?}")));
        }
        let crop = state.disc.spec.input;
        if sh[1] < crop || sh[2] < crop {
            return Err(Error::Data(format!("source texture {}x{} is smaller than the {crop}x{crop} crop", sh[1], sh[2])));
        }
        if mode == TileMode::Cyclic {
            check_cyclic(&state.gen, pattern)?;
            if crop != s {
                return Err(Error::Config(format!("cyclic mode judges whole patches: discriminator input {crop} must equal the patch {s}")));
            }
        }
        if batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(TileTrainer {
            state,
            source,
            mode,
            pattern: TilingPattern::get(pattern),
            batch,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `n` random crops of the source (no wrapping), sized for the
    /// discriminator.
    pub fn real_batch(&mut self, n: usize) -> Result<Tensor> {
        let s = self.state.disc.spec.input;
        let sh = self.source.shape().to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let src = self.source.data();
        let mut data = Vec::with_capacity(n * c * s * s);
        for _ in 0..n {
            let oy = self.rng.gen_range(0..=h - s);
            let ox = self.rng.gen_range(0..=w - s);
            for ch in 0..c {
                for y in 0..s {
                    let row = ch * h * w + (oy + y) * w + ox;
                    data.extend_from_slice(&src[row..row + s]);
                }
            }
        }
        Tensor::new(&[n, c, s, s], data)
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let real = self.real_batch(self.batch)?;
        let latents = LatentBatch::sample(&self.state.gen, self.batch, false, &mut self.rng)?;
        let s = self.state.gen.spec.output_size();
        let crop = self.state.disc.spec.input;
        match self.mode {
            TileMode::Cyclic => gan_step_with(&mut self.state, &real, &latents, 0.0, Phase::Train, &mut |_, x| Ok(x)),
            TileMode::Crop => {
                let offsets: Vec<_> = (0..self.batch).map(|_| random_offset(&self.pattern, s, &mut self.rng)).collect();
                let pattern = self.pattern.clone();
                gan_step_with(&mut self.state, &real, &latents, 0.0, Phase::Train, &mut |tape, x| {
                    crop_tiled_var(tape, x, &pattern, crop, &offsets)
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(s: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..s * s).map(|i| (i % s) as f64 / (s - 1) as f64).collect();
        Tensor::new(&[1, s, s], data).unwrap()
    }

    #[test]
    fn grid_tiles_repeat_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::<f64>::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let c = tile_plane(&p, &TilingPattern::get(PatternName::Grid), 2, 2).unwrap();
        assert_eq!(c.shape(), &[2, 8, 8]);
        for ch in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(c.at(&[ch, y, x]), p.at(&[ch, y % 4, x % 4]));
                }
            }
        }
    }

    #[test]
    fn projective_neighbours_are_flipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::<f64>::uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
        let c = tile_plane(&p, &TilingPattern::get(PatternName::Projective), 2, 2).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(c.at(&[0, y, 4 + x]), p.at(&[0, 3 - y, x]));
                assert_eq!(c.at(&[0, 4 + y, x]), p.at(&[0, y, 3 - x]));
            }
        }
    }

    #[test]
    fn crop_at_origin_is_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::<f64>::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        for pat in TilingPattern::all() {
            assert_eq!(crop_tiled(&p, &pat, 8, (0, 0)).unwrap(), p);
        }
        let k = Tensor::<f64>::full(&[3, 8, 8], 0.25);
        for pat in TilingPattern::all() {
            for _ in 0..5 {
                let off = random_offset(&pat, 8, &mut rng);
                assert!(crop_tiled(&k, &pat, 8, off).unwrap().data().iter().all(|&v| v == 0.25));
            }
        }
    }

    #[test]
    fn seam_ratio_detects_discontinuity() {
        let grid = TilingPattern::get(PatternName::Grid);
        let c = tile_plane(&ramp(16), &grid, 2, 2).unwrap();
        let r = seam_score(&c, 16, &grid, 1).unwrap().unwrap();
        assert!(r > 10.0, "{r}");
        let flat = Tensor::<f64>::zeros(&[1, 32, 32]);
        assert_eq!(seam_score(&flat, 16, &grid, 1).unwrap(), None);
    }

    #[test]
    fn mirror_pattern_fixes_ramp_seam_horizontally() {
        // a left-right symmetric patch tiles seamlessly across vertical
        // seams under the projective pattern's vertical flips only when it
        // is also top-bottom symmetric; a constant-row patch is both
        let mut p = Tensor::<f64>::zeros(&[1, 8, 8]);
        for y in 0..8 {
            for x in 0..8 {
                p.data_mut()[y * 8 + x] = (x as f64 - 3.5).abs();
            }
        }
        let grid = TilingPattern::get(PatternName::Grid);
        let proj = TilingPattern::get(PatternName::Projective);
        let a = tile_plane(&p, &grid, 1, 2).unwrap();
        let b = tile_plane(&p, &proj, 1, 2).unwrap();
        for y in 0..8 {
            assert_eq!(a.at(&[0, y, 7]), b.at(&[0, y, 7]));
            assert_eq!(a.at(&[0, y, 8]), b.at(&[0, y, 8]));
        }
    }

    #[test]
    fn hexagonal_rows_are_shifted() {
        let p = ramp(8);
        let c = tile_plane(&p, &TilingPattern::get(PatternName::Hexagonal), 2, 2).unwrap();
        for x in 0..16 {
            assert_eq!(c.at(&[0, 8, x]), p.at(&[0, 0, (x + 8 - 4) % 8]));
        }
        let st = seam_stats(&c, 8, [0, 1], 1).unwrap();
        assert!(st.boundary > st.interior);
    }

    #[test]
    fn tile_mode_parse() {
        assert_eq!("crop".parse::<TileMode>().unwrap(), TileMode::Crop);
        assert!("x".parse::<TileMode>().is_err());
    }
}
