//! Symmetry-carrying operators: latent flip, image mirror, symmetric and
//! antisymmetric half-kernel expansion, symmetric folding, wrap paddings and
//! the symmetric-kernel convolution built from them.
//!
//! Under column reversal `mirror`:
//! * a convolution with left-right symmetric kernels is equivariant for
//!   zero, circular and flip-wrap padding,
//! * `expand_antisymmetric(h)` satisfies `mirror(out) == -out`,
//! * `fold_symmetric(mirror(x)) == fold_symmetric(x)`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{PlaneMap, Scalar, Tape, Tensor, Var};
use crate::tiling::pattern::{PatternName, TilingPattern};

/// Reverses the element order of each latent vector (last axis).
pub fn flip<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.reverse_last()
}

/// Reverses the column order (last axis) of an image or feature map.
pub fn mirror<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.reverse_last()
}

pub fn flip_var<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Var {
    tape.reverse_last(z)
}

pub fn mirror_var<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.reverse_last(x)
}

/// `[K.., kh, h] -> [K.., kh, width]` with `width == 2h - 1`: columns
/// `(c1, c2, c3) -> (c1, c2, c3, c2, c1)` for a 5-wide kernel.
pub fn expand_symmetric<T: Scalar>(tape: &mut Tape<T>, half: Var, width: usize) -> Result<Var> {
    let h = *tape.shape(half).last().unwrap_or(&0);
    if width % 2 == 0 || h != width.div_ceil(2) {
        return Err(Error::Shape(format!(
            "symmetric expansion to width {width} needs {} free columns, got {h}",
            width.div_ceil(2)
        )));
    }
    tape.expand_sym(half)
}

/// `[K.., kh, h] -> [K.., kh, width]` with `width == 2h + 1`: columns
/// `(c1, c2) -> (c1, c2, 0, -c2, -c1)` for a 5-wide kernel.
pub fn expand_antisymmetric<T: Scalar>(tape: &mut Tape<T>, half: Var, width: usize) -> Result<Var> {
    let h = *tape.shape(half).last().unwrap_or(&0);
    if width % 2 == 0 || h != width / 2 {
        return Err(Error::Shape(format!(
            "antisymmetric expansion to width {width} needs {} free columns, got {h}",
            width / 2
        )));
    }
    tape.expand_anti(half)
}

/// `[.., W] -> [.., (W+1)/2]`: `c_j + c_(W-1-j)` and a doubled centre.
pub fn fold_symmetric<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.fold_sym(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadKind {
    Zero,
    /// Torus wrap.
    Circular,
    /// Projective-plane wrap: crossing a vertical edge flips rows, crossing
    /// a horizontal edge flips columns.
    Flipwrap,
    /// Torus wrap with a half-width shift across horizontal edges (brick
    /// lattice).
    Brickwrap,
}

impl PadKind {
    pub fn pattern(self) -> Option<PatternName> {
        match self {
            PadKind::Zero => None,
            PadKind::Circular => Some(PatternName::Grid),
            PadKind::Flipwrap => Some(PatternName::Projective),
            PadKind::Brickwrap => Some(PatternName::Hexagonal),
        }
    }

    /// The wrap that makes a generator consistent with `pattern`, if any.
    pub fn for_pattern(pattern: PatternName) -> Result<PadKind> {
        match pattern {
            PatternName::Grid => Ok(PadKind::Circular),
            PatternName::Projective => Ok(PadKind::Flipwrap),
            PatternName::Hexagonal => Ok(PadKind::Brickwrap),
            PatternName::Spherical => Err(Error::Config(
                "cyclic convolution cannot realize the spherical pattern: it would have to turn rows into columns"
                    .into(),
            )),
        }
    }
}

impl fmt::Display for PadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PadKind::Zero => "zero",
            PadKind::Circular => "circular",
            PadKind::Flipwrap => "flipwrap",
            PadKind::Brickwrap => "brickwrap",
        })
    }
}

impl FromStr for PadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PadKind::Zero),
            "circular" => Ok(PadKind::Circular),
            "flipwrap" => Ok(PadKind::Flipwrap),
            "brickwrap" => Ok(PadKind::Brickwrap),
            _ => Err(Error::Config(format!("unknown pad mode {s:?}"))),
        }
    }
}

/// Padding applied before a valid convolution. `width` pixels on every side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PadMode {
    pub kind: PadKind,
    pub width: usize,
}

impl PadMode {
    pub fn zero(width: usize) -> Self {
        PadMode { kind: PadKind::Zero, width }
    }

    pub fn circular(width: usize) -> Self {
        PadMode { kind: PadKind::Circular, width }
    }

    pub fn flipwrap(width: usize) -> Self {
        PadMode { kind: PadKind::Flipwrap, width }
    }

    /// Shape-preserving padding for an odd kernel extent.
    pub fn same(kind: PadKind, kernel: usize) -> Self {
        PadMode { kind, width: kernel.saturating_sub(1) / 2 }
    }

    /// Plane map from `h x w` to `(h + 2p) x (w + 2p)`.
    pub fn plane_map(&self, h: usize, w: usize) -> Result<PlaneMap> {
        self.plane_map_hw(h, w, self.width, self.width)
    }

    /// Separate vertical and horizontal widths; kernels with one spatial
    /// extent of 1 need no vertical padding.
    pub fn plane_map_hw(&self, h: usize, w: usize, ph: usize, pw: usize) -> Result<PlaneMap> {
        static CACHE: OnceLock<Mutex<HashMap<(PadKind, usize, usize, usize, usize), PlaneMap>>> =
            OnceLock::new();
        let key = (self.kind, h, w, ph, pw);
        let cache = CACHE.get_or_init(Default::default);
        if let Some(m) = cache.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let map = match self.kind.pattern() {
            None => PlaneMap::from_fn(h, w, h + 2 * ph, w + 2 * pw, |r, c| {
                let (y, x) = (r as i64 - ph as i64, c as i64 - pw as i64);
                (y >= 0 && x >= 0 && y < h as i64 && x < w as i64).then(|| (y as usize, x as usize))
            }),
            Some(name) => {
                if (ph > 0 && ph > h) || (pw > 0 && pw > w) {
                    return Err(Error::Shape(format!(
                        "{} padding of {ph}x{pw} exceeds the {h}x{w} map",
                        self.kind
                    )));
                }
                let edges = TilingPattern::get(name).edges;
                if edges.transposes() && h != w {
                    return Err(Error::Shape(format!("{} padding needs a square map", self.kind)));
                }
                if self.kind == PadKind::Brickwrap && w % 2 != 0 && ph > 0 {
                    return Err(Error::Shape("brick wrap needs an even width".into()));
                }
                let (hi, wi) = (h as i64, w as i64);
                let mut failed = false;
                let map = PlaneMap::from_fn(h, w, h + 2 * ph, w + 2 * pw, |r, c| {
                    let (y, x) = (r as i64 - ph as i64, c as i64 - pw as i64);
                    match edges.resolve(y, x, hi, wi) {
                        Some((y, x)) => Some((y as usize, x as usize)),
                        None => {
                            failed = true;
                            None
                        }
                    }
                });
                if failed {
                    return Err(Error::Shape(format!("{} padding did not resolve", self.kind)));
                }
                map
            }
        };
        cache.lock().unwrap().insert(key, map.clone());
        Ok(map)
    }
}

/// Padded cross-correlation, stride 1. Kernels of odd extent with
/// `pad.width == (k-1)/2` preserve the spatial shape.
pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, k: Var, pad: PadMode) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(k).to_vec();
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::Shape(format!("conv2d wants [N,C,H,W] and [O,C,kh,kw], got {xs:?}, {ks:?}")));
    }
    if xs[1] != ks[1] {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {xs:?} has {} channels but kernel {ks:?} expects {}",
            xs[1], ks[1]
        )));
    }
    let ph = if ks[2] == 1 { 0 } else { pad.width };
    let pw = if ks[3] == 1 { 0 } else { pad.width };
    let padded = if ph == 0 && pw == 0 {
        x
    } else {
        let map = pad.plane_map_hw(xs[2], xs[3], ph, pw)?;
        tape.plane_gather(x, &map)?
    };
    tape.conv_valid(padded, k)
}

/// Free half-kernels `[O, C, kh, (kw+1)/2]` of a bank of left-right
/// symmetric `[O, C, kh, kw]` kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricKernelBank<T: Scalar = f32> {
    pub free: Tensor<T>,
    pub width: usize,
}

impl<T: Scalar> SymmetricKernelBank<T> {
    pub fn new(free: Tensor<T>, width: usize) -> Result<Self> {
        let s = free.shape();
        if s.len() != 4 || width % 2 == 0 || s[3] != width.div_ceil(2) {
            return Err(Error::Shape(format!(
                "symmetric bank of width {width} needs free shape [O,C,kh,{}], got {s:?}",
                width.div_ceil(2)
            )));
        }
        Ok(SymmetricKernelBank { free, width })
    }

    pub fn random<R: Rng + ?Sized>(o: usize, c: usize, k: usize, std: f64, rng: &mut R) -> Self {
        let free = Tensor::randn(&[o, c, k, k.div_ceil(2)], std, rng);
        SymmetricKernelBank { free, width: k }
    }

    pub fn free_parameter_count(&self) -> usize {
        self.free.numel()
    }

    /// Full kernels, materialized outside any tape.
    pub fn expanded(&self) -> Tensor<T> {
        let mut tape = Tape::new();
        let v = tape.constant(self.free.clone());
        let e = tape.expand_sym(v).expect("valid bank");
        tape.value(e).clone()
    }
}

/// Convolution with kernels expanded from `free` on every call, so the free
/// half-kernel stays the only stored parameter.
pub fn sym_conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    free: Var,
    width: usize,
    pad: PadMode,
) -> Result<Var> {
    let k = expand_symmetric(tape, free, width)?;
    conv2d(tape, x, k, pad)
}
