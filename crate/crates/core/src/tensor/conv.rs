//! Spatial kernels: plane index maps (padding, tiling, crops), valid
//! convolution through im2col + GEMM, nearest-neighbour upsampling and
//! 2x2 average pooling. All operate on `[N, C, H, W]` buffers.

use std::sync::Arc;

use super::scalar::{matmul, Scalar};
use crate::par;

/// Sentinel source index meaning "this output pixel is zero".
pub(crate) const ZERO_SRC: u32 = u32::MAX;

/// A linear map from an `in_h x in_w` plane to an `out_h x out_w` plane
/// where every output pixel copies one input pixel (or is zero).
///
/// Padding modes, tilings and crops are all expressed this way, so their
/// adjoint (scatter-add) is shared.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaneMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    src: Arc<[u32]>,
}

impl PlaneMap {
    /// Builds the map from `f(out_row, out_col) -> Some((in_row, in_col))`.
    pub fn from_fn(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut f: impl FnMut(usize, usize) -> Option<(usize, usize)>,
    ) -> Self {
        let mut src = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            for c in 0..out_w {
                src.push(match f(r, c) {
                    Some((y, x)) => {
                        assert!(y < in_h && x < in_w, "plane map source ({y},{x}) out of range");
                        (y * in_w + x) as u32
                    }
                    None => ZERO_SRC,
                });
            }
        }
        PlaneMap { in_h, in_w, out_h, out_w, src: src.into() }
    }

    pub fn source(&self, r: usize, c: usize) -> Option<(usize, usize)> {
        let s = self.src[r * self.out_w + c];
        (s != ZERO_SRC).then(|| (s as usize / self.in_w, s as usize % self.in_w))
    }

    pub(crate) fn apply<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        let ip = self.in_h * self.in_w;
        let op = self.out_h * self.out_w;
        let src = &self.src;
        par::for_each_chunk_mut(out, op, |plane, o| {
            let xin = &x[plane * ip..(plane + 1) * ip];
            for (v, &s) in o.iter_mut().zip(src.iter()) {
                *v = if s == ZERO_SRC { T::zero() } else { xin[s as usize] };
            }
        });
    }

    pub(crate) fn adjoint<T: Scalar>(&self, dout: &[T], dx: &mut [T]) {
        let ip = self.in_h * self.in_w;
        let op = self.out_h * self.out_w;
        let src = &self.src;
        par::for_each_chunk_mut(dx, ip, |plane, d| {
            let g = &dout[plane * op..(plane + 1) * op];
            for (&gv, &s) in g.iter().zip(src.iter()) {
                if s != ZERO_SRC {
                    d[s as usize] += gv;
                }
            }
        });
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 1 - self.kw
    }
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let (ho, wo) = (d.out_h(), d.out_w());
    let p = ho * wo;
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = ((c * d.kh + i) * d.kw + j) * p;
                for y in 0..ho {
                    let src = &plane[(y + i) * d.w + j..(y + i) * d.w + j + wo];
                    cols[row + y * wo..row + (y + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let (ho, wo) = (d.out_h(), d.out_w());
    let p = ho * wo;
    for c in 0..d.c {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = ((c * d.kh + i) * d.kw + j) * p;
                for y in 0..ho {
                    let dst = &mut plane[(y + i) * d.w + j..(y + i) * d.w + j + wo];
                    for (a, &b) in dst.iter_mut().zip(&cols[row + y * wo..row + (y + 1) * wo]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Cross-correlation without padding: `out[n,o,y,x] = sum k[o,c,i,j] x[n,c,y+i,x+j]`.
pub(crate) fn conv_valid_forward<T: Scalar>(x: &[T], k: &[T], d: &ConvDims) -> Vec<T> {
    let p = d.positions();
    let ckk = d.ckk();
    let mut out = vec![T::zero(); d.n * d.o * p];
    let in_stride = d.c * d.h * d.w;
    par::for_each_chunk_mut(&mut out, d.o * p, |n, o| {
        let mut cols = vec![T::zero(); ckk * p];
        im2col(&x[n * in_stride..(n + 1) * in_stride], d, &mut cols);
        matmul(k, false, &cols, false, o, d.o, ckk, p, false);
    });
    out
}

/// Returns `(dx, dk)`; either may be skipped.
pub(crate) fn conv_valid_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    dout: &[T],
    d: &ConvDims,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = d.positions();
    let ckk = d.ckk();
    let in_stride = d.c * d.h * d.w;
    let out_stride = d.o * p;

    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); d.n * in_stride];
        par::for_each_chunk_mut(&mut dx, in_stride, |n, dxn| {
            let mut dcols = vec![T::zero(); ckk * p];
            let g = &dout[n * out_stride..(n + 1) * out_stride];
            matmul(k, true, g, false, &mut dcols, ckk, d.o, p, false);
            col2im(&dcols, d, dxn);
        });
        dx
    });

    let dk = want_dk.then(|| {
        // Per-sample partials reduced in sample order keep the result
        // independent of scheduling.
        let partials = par::map_range(d.n, |n| {
            let mut cols = vec![T::zero(); ckk * p];
            im2col(&x[n * in_stride..(n + 1) * in_stride], d, &mut cols);
            let mut dk = vec![T::zero(); d.o * ckk];
            let g = &dout[n * out_stride..(n + 1) * out_stride];
            matmul(g, false, &cols, true, &mut dk, d.o, p, ckk, false);
            dk
        });
        let mut dk = vec![T::zero(); d.o * ckk];
        for part in partials {
            for (a, b) in dk.iter_mut().zip(part) {
                *a += b;
            }
        }
        dk
    });
    (dx, dk)
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * 4 * h * w];
    par::for_each_chunk_mut(&mut out, 4 * h * w, |pl, o| {
        let xin = &x[pl * h * w..(pl + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                o[y * 2 * w + xx] = xin[(y / 2) * w + xx / 2];
            }
        }
    });
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    par::for_each_chunk_mut(&mut dx, h * w, |pl, d| {
        let gp = &g[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let r0 = 2 * y * 2 * w + 2 * x;
                let r1 = r0 + 2 * w;
                d[y * w + x] = gp[r0] + gp[r0 + 1] + gp[r1] + gp[r1 + 1];
            }
        }
    });
    dx
}

/// Input plane is `2h x 2w`, output `h x w`.
pub(crate) fn avgpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); planes * h * w];
    par::for_each_chunk_mut(&mut out, h * w, |pl, o| {
        let xp = &x[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let r0 = 2 * y * 2 * w + 2 * xx;
                let r1 = r0 + 2 * w;
                o[y * w + xx] = (xp[r0] + xp[r0 + 1] + xp[r1] + xp[r1 + 1]) * quarter;
            }
        }
    });
    out
}

pub(crate) fn avgpool2_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = vec![T::zero(); planes * 4 * h * w];
    par::for_each_chunk_mut(&mut dx, 4 * h * w, |pl, d| {
        let gp = &g[pl * h * w..(pl + 1) * h * w];
        for y in 0..2 * h {
            for x in 0..2 * w {
                d[y * 2 * w + x] = gp[(y / 2) * w + x / 2] * quarter;
            }
        }
    });
    dx
}
