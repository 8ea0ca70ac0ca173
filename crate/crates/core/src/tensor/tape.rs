use super::conv::{self, ConvDims, PlaneMap};
use super::scalar::{matmul, Scalar};
use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    Abs,
    Square,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        let zero = T::zero();
        match self {
            Activation::Relu => v.max(zero),
            Activation::LeakyRelu(a) => {
                if v > zero {
                    v
                } else {
                    v * T::from_f64_lossy(a)
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
            Activation::Softplus => v.max(zero) + (-v.abs()).exp().ln_1p(),
            Activation::Abs => v.abs(),
            Activation::Square => v * v,
        }
    }

    /// Derivative from the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match self {
            Activation::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Activation::LeakyRelu(a) => {
                if x > zero {
                    one
                } else {
                    T::from_f64_lossy(a)
                }
            }
            Activation::Tanh => one - y * y,
            Activation::Sigmoid => y * (one - y),
            Activation::Softplus => sigmoid(x),
            Activation::Abs => x.signum() * T::from_f64_lossy(if x == zero { 0.0 } else { 1.0 }),
            Activation::Square => x + x,
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

/// Batch-norm statistic source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the batch's own per-channel statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics observed in train mode (variance unbiased).
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    PlaneGather { x: Var, map: PlaneMap },
    ConvValid { x: Var, k: Var, dims: ConvDims },
    Upsample2 { x: Var },
    AvgPool2 { x: Var },
    Dense { x: Var, w: Var, b: Option<Var> },
    ChannelBias { x: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Act { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Reshape { x: Var },
    ReverseLast { x: Var },
    ExpandSym { x: Var },
    ExpandAnti { x: Var },
    FoldSym { x: Var },
    SliceLast { x: Var, start: usize },
    ConcatLast { parts: Vec<Var> },
    NarrowFirst { x: Var, start: usize },
    ConcatFirst { parts: Vec<Var> },
    Gram { x: Var },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications so [`Tape::backward`] can replay them in
/// reverse.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node that required them.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(Error::Shape(msg))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- spatial ------------------------------------------------------

    /// Applies a plane map to the last two axes.
    pub fn plane_gather(&mut self, x: Var, map: &PlaneMap) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 2] != map.in_h || s[s.len() - 1] != map.in_w {
            return shape_err(format!(
                "plane map expects trailing {}x{}, got {s:?}",
                map.in_h, map.in_w
            ));
        }
        let planes: usize = s[..s.len() - 2].iter().product();
        let mut out = vec![T::zero(); planes * map.out_h * map.out_w];
        map.apply(self.value(x).data(), &mut out);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([map.out_h, map.out_w]);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::PlaneGather { x, map: map.clone() }, rg))
    }

    /// Unpadded cross-correlation of `x: [N,C,H,W]` with `k: [O,C,kh,kw]`.
    pub fn conv_valid(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err(format!("conv2d wants 4-d input and kernel, got {xs:?} and {ks:?}"));
        }
        if xs[1] != ks[1] {
            return shape_err(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                xs[1], ks[1]
            ));
        }
        if ks[2] > xs[2] || ks[3] > xs[3] {
            return shape_err(format!("kernel {ks:?} larger than padded input {xs:?}"));
        }
        let dims = ConvDims { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ks[0], kh: ks[2], kw: ks[3] };
        let out = conv::conv_valid_forward(self.value(x).data(), self.value(k).data(), &dims);
        let value = Tensor::new(&[dims.n, dims.o, dims.out_h(), dims.out_w()], out)?;
        let rg = self.rg(&[x, k]);
        Ok(self.push(value, Op::ConvValid { x, k, dims }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("upsample expects [N,C,H,W], got {s:?}"));
        }
        let out = conv::upsample2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2 { x }, rg))
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("avgpool expects [N,C,H,W], got {s:?}"));
        }
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return shape_err(format!("avgpool needs even spatial extents, got {}x{}", s[2], s[3]));
        }
        let (h, w) = (s[2] / 2, s[3] / 2);
        let out = conv::avgpool2_forward(self.value(x).data(), s[0] * s[1], h, w);
        let value = Tensor::new(&[s[0], s[1], h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool2 { x }, rg))
    }

    // ---- affine ------------------------------------------------------

    /// `x: [N,F] @ w: [F,G] + b: [G]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return shape_err(format!("dense: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [g] {
                return shape_err(format!("dense: bias {:?} should be [{g}]", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * g];
        matmul(self.value(x).data(), false, self.value(w).data(), false, &mut out, n, f, g, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(g) {
                add_into(row, bd);
            }
        }
        let value = Tensor::new(&[n, g], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Adds `b: [C]` to every position of channel `c` in `x: [N,C,...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(b) != [s[1]] {
            return shape_err(format!("channel bias {:?} does not fit {s:?}", self.shape(b)));
        }
        let inner: usize = s[2..].iter().product();
        let c = s[1];
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = bd[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(&s, out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::ChannelBias { x, b }, rg))
    }

    /// Per-channel normalization over batch and spatial positions of
    /// `x: [N,C,...]`. Returns the observed statistics in train mode.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return shape_err(format!("batchnorm expects [N,C,...], got {s:?}"));
        }
        let (n, c) = (s[0], s[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batchnorm parameters must be [{c}]"));
        }
        let inner: usize = s[2..].iter().product();
        let m = n * inner;
        let xd = self.value(x).data();
        let eps = T::from_f64_lossy(BN_EPS);
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                if m == 0 {
                    return shape_err("batchnorm over an empty batch".into());
                }
                let mf = T::from_usize(m).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        for &v in &xd[base..base + inner] {
                            acc += v;
                        }
                    }
                    let mu = acc / mf;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        for &v in &xd[base..base + inner] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / mf;
                }
                let unbiased = if m > 1 {
                    let k = mf / T::from_usize(m - 1).unwrap();
                    var.iter().map(|&v| v * k).collect()
                } else {
                    var.clone()
                };
                (mean.clone(), var, Some(BnStats { mean, var: unbiased }))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err(format!("running statistics must have {c} channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, (xh, o)) in xhat.chunks_mut(inner).zip(out.chunks_mut(inner)).enumerate() {
            let ch = i % c;
            let src = &xd[i * inner..(i + 1) * inner];
            for ((h, y), &v) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
                *h = (v - mean[ch]) * inv_std[ch];
                *y = g[ch] * *h + bt[ch];
            }
        }
        let value = Tensor::new(&s, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let train = matches!(mode, BnMode::Train);
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg);
        Ok((v, stats))
    }

    // ---- pointwise ---------------------------------------------------

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.act(x, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.act(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.act(x, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.act(x, Activation::Softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.act(x, Activation::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.act(x, Activation::Square)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    // ---- structural --------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reverses the last axis.
    pub fn reverse_last(&mut self, x: Var) -> Var {
        let value = self.value(x).reverse_last();
        let rg = self.rg(&[x]);
        self.push(value, Op::ReverseLast { x }, rg)
    }

    /// `[..., h] -> [..., 2h-1]`, columns `c0..c(h-1)` followed by their
    /// reflection without repeating the centre.
    pub fn expand_sym(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let h = *s.last().unwrap_or(&0);
        if h == 0 {
            return shape_err(format!("symmetric expansion of empty last axis {s:?}"));
        }
        let w = 2 * h - 1;
        let mut out = Vec::with_capacity(self.value(x).numel() / h * w);
        for row in self.value(x).data().chunks(h) {
            out.extend_from_slice(row);
            out.extend(row[..h - 1].iter().rev());
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = w;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ExpandSym { x }, rg))
    }

    /// `[..., h] -> [..., 2h+1]`, columns `c0..c(h-1), 0, -c(h-1)..-c0`.
    pub fn expand_anti(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let h = *s.last().unwrap_or(&0);
        if s.is_empty() {
            return shape_err("antisymmetric expansion of a scalar".into());
        }
        let w = 2 * h + 1;
        let rows = if h == 0 { s[..s.len() - 1].iter().product() } else { self.value(x).numel() / h };
        let mut out = Vec::with_capacity(rows * w);
        let data = self.value(x).data();
        for r in 0..rows {
            let row = &data[r * h..(r + 1) * h];
            out.extend_from_slice(row);
            out.push(T::zero());
            out.extend(row.iter().rev().map(|&v| -v));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = w;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ExpandAnti { x }, rg))
    }

    /// `[..., W] -> [..., (W+1)/2]` with `c_j + c_(W-1-j)` and a doubled
    /// centre column. `W` must be odd.
    pub fn fold_sym(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().unwrap_or(&0);
        if w % 2 == 0 {
            return shape_err(format!("symmetric folding needs an odd width, got {w}"));
        }
        let h = w.div_ceil(2);
        let mut out = Vec::with_capacity(self.value(x).numel() / w * h);
        for row in self.value(x).data().chunks(w) {
            for j in 0..h {
                out.push(row[j] + row[w - 1 - j]);
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = h;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::FoldSym { x }, rg))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().unwrap_or(&0);
        if start + len > w {
            return shape_err(format!("slice {start}..{} beyond last extent {w}", start + len));
        }
        let mut out = Vec::new();
        if w > 0 {
            for row in self.value(x).data().chunks(w) {
                out.extend_from_slice(&row[start..start + len]);
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceLast { x, start }, rg))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?).to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return shape_err(format!("concat_last: {s:?} does not match {first:?}"));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let w = *self.shape(p).last().unwrap();
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatLast { parts: parts.to_vec() }, rg))
    }

    pub fn narrow_first(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow_first(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NarrowFirst { x, start }, rg))
    }

    pub fn concat_first(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::cat_first(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatFirst { parts: parts.to_vec() }, rg))
    }

    /// Normalized GRAM matrices of `x: [N,C,H,W]`, flattened to
    /// `[N, (C+1)^2]`. A constant ones map is prepended before taking inner
    /// products over spatial positions; entries are divided by `C^1.5`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] == 0 {
            return shape_err(format!("gram descriptor needs a non-empty [N,C,H,W] stack, got {s:?}"));
        }
        let (n, c, p) = (s[0], s[1], s[2] * s[3]);
        let k = c + 1;
        let norm = T::one() / T::from_usize(c).unwrap().powf(T::from_f64_lossy(1.5));
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * k * k];
        par::for_each_chunk_mut(&mut out, k * k, |b, o| {
            let mut a = vec![T::one(); k * p];
            a[p..].copy_from_slice(&xd[b * c * p..(b + 1) * c * p]);
            matmul(&a, false, &a, true, o, k, p, k, false);
            o.iter_mut().for_each(|v| *v *= norm);
        });
        let value = Tensor::new(&[n, k * k], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gram { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let emit = |v: Var, d: Vec<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc.data_mut(), &d),
                    slot @ None => {
                        *slot = Some(Tensor::new(self.shape(v), d).expect("gradient shape"));
                    }
                }
            };
            let gd = g.data();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::PlaneGather { x, map } => {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    map.adjoint(gd, &mut dx);
                    emit(*x, dx, &mut grads);
                }
                Op::ConvValid { x, k, dims } => {
                    let (dx, dk) = conv::conv_valid_backward(
                        self.value(*x).data(),
                        self.value(*k).data(),
                        gd,
                        dims,
                        self.requires_grad(*x),
                        self.requires_grad(*k),
                    );
                    if let Some(dx) = dx {
                        emit(*x, dx, &mut grads);
                    }
                    if let Some(dk) = dk {
                        emit(*k, dk, &mut grads);
                    }
                }
                Op::Upsample2 { x } => {
                    let s = self.shape(*x);
                    emit(*x, conv::upsample2_backward(gd, s[0] * s[1], s[2], s[3]), &mut grads);
                }
                Op::AvgPool2 { x } => {
                    let s = node.value.shape();
                    emit(*x, conv::avgpool2_backward(gd, s[0] * s[1], s[2], s[3]), &mut grads);
                }
                Op::Dense { x, w, b } => {
                    let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let gdim = self.shape(*w)[1];
                    if self.requires_grad(*x) {
                        let mut dx = vec![T::zero(); n * f];
                        matmul(gd, false, self.value(*w).data(), true, &mut dx, n, gdim, f, false);
                        emit(*x, dx, &mut grads);
                    }
                    if self.requires_grad(*w) {
                        let mut dw = vec![T::zero(); f * gdim];
                        matmul(self.value(*x).data(), true, gd, false, &mut dw, f, n, gdim, false);
                        emit(*w, dw, &mut grads);
                    }
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); gdim];
                        for row in gd.chunks(gdim) {
                            add_into(&mut db, row);
                        }
                        emit(*b, db, &mut grads);
                    }
                }
                Op::ChannelBias { x, b } => {
                    let s = self.shape(*x);
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in gd.chunks(inner).enumerate() {
                        let mut acc = T::zero();
                        for &v in chunk {
                            acc += v;
                        }
                        db[i % c] += acc;
                    }
                    emit(*x, gd.to_vec(), &mut grads);
                    emit(*b, db, &mut grads);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let s = self.shape(*x);
                    let (n, c) = (s[0], s[1]);
                    let inner: usize = s[2..].iter().product();
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (i, (gc, hc)) in gd.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                        let ch = i % c;
                        for (&gv, &hv) in gc.iter().zip(hc) {
                            dgamma[ch] += gv * hv;
                            dbeta[ch] += gv;
                        }
                    }
                    if self.requires_grad(*x) {
                        let mut dx = vec![T::zero(); gd.len()];
                        if *train {
                            let m = T::from_usize(n * inner).unwrap();
                            for (i, (dc, (gc, hc))) in
                                dx.chunks_mut(inner).zip(gd.chunks(inner).zip(xhat.chunks(inner))).enumerate()
                            {
                                let ch = i % c;
                                let k = gam[ch] * inv_std[ch] / m;
                                for ((d, &gv), &hv) in dc.iter_mut().zip(gc).zip(hc) {
                                    *d = k * (m * gv - dbeta[ch] - hv * dgamma[ch]);
                                }
                            }
                        } else {
                            for (i, (dc, gc)) in dx.chunks_mut(inner).zip(gd.chunks(inner)).enumerate() {
                                let ch = i % c;
                                let k = gam[ch] * inv_std[ch];
                                for (d, &gv) in dc.iter_mut().zip(gc) {
                                    *d = k * gv;
                                }
                            }
                        }
                        emit(*x, dx, &mut grads);
                    }
                    emit(*gamma, dgamma, &mut grads);
                    emit(*beta, dbeta, &mut grads);
                }
                Op::Act { x, kind } => {
                    let xd = self.value(*x).data();
                    let yd = node.value.data();
                    let dx = gd
                        .iter()
                        .zip(xd.iter().zip(yd))
                        .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                        .collect();
                    emit(*x, dx, &mut grads);
                }
                Op::Add { a, b } => {
                    emit(*a, gd.to_vec(), &mut grads);
                    emit(*b, gd.to_vec(), &mut grads);
                }
                Op::Sub { a, b } => {
                    emit(*a, gd.to_vec(), &mut grads);
                    emit(*b, gd.iter().map(|&v| -v).collect(), &mut grads);
                }
                Op::Mul { a, b } => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    emit(*a, gd.iter().zip(bd).map(|(&g, &y)| g * y).collect(), &mut grads);
                    emit(*b, gd.iter().zip(ad).map(|(&g, &y)| g * y).collect(), &mut grads);
                }
                Op::Scale { x, c } => {
                    emit(*x, gd.iter().map(|&v| v * *c).collect(), &mut grads);
                }
                Op::Reshape { x } => emit(*x, gd.to_vec(), &mut grads),
                Op::ReverseLast { x } => emit(*x, g.reverse_last().into_data(), &mut grads),
                Op::ExpandSym { x } => {
                    let h = *self.shape(*x).last().unwrap();
                    let w = 2 * h - 1;
                    let mut dx = Vec::with_capacity(self.value(*x).numel());
                    for row in gd.chunks(w) {
                        for j in 0..h {
                            let mirror = w - 1 - j;
                            dx.push(if mirror == j { row[j] } else { row[j] + row[mirror] });
                        }
                    }
                    emit(*x, dx, &mut grads);
                }
                Op::ExpandAnti { x } => {
                    let h = *self.shape(*x).last().unwrap();
                    let w = 2 * h + 1;
                    let mut dx = Vec::with_capacity(self.value(*x).numel());
                    for row in gd.chunks(w) {
                        for j in 0..h {
                            dx.push(row[j] - row[w - 1 - j]);
                        }
                    }
                    emit(*x, dx, &mut grads);
                }
                Op::FoldSym { x } => {
                    let w = *self.shape(*x).last().unwrap();
                    let h = w.div_ceil(2);
                    let mut dx = Vec::with_capacity(self.value(*x).numel());
                    for row in gd.chunks(h) {
                        for j in 0..w {
                            dx.push(row[j.min(w - 1 - j)]);
                        }
                    }
                    // centre column receives the derivative of 2*c
                    for r in dx.chunks_mut(w) {
                        r[h - 1] = r[h - 1] + r[h - 1];
                    }
                    emit(*x, dx, &mut grads);
                }
                Op::SliceLast { x, start } => {
                    let w = *self.shape(*x).last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    if len > 0 {
                        for (drow, grow) in dx.chunks_mut(w).zip(gd.chunks(len)) {
                            drow[*start..start + len].copy_from_slice(grow);
                        }
                    }
                    emit(*x, dx, &mut grads);
                }
                Op::ConcatLast { parts } => {
                    let total = *node.value.shape().last().unwrap();
                    let mut offset = 0;
                    for &p in parts {
                        let w = *self.shape(p).last().unwrap();
                        let mut dp = Vec::with_capacity(self.value(p).numel());
                        for row in gd.chunks(total) {
                            dp.extend_from_slice(&row[offset..offset + w]);
                        }
                        offset += w;
                        emit(p, dp, &mut grads);
                    }
                }
                Op::NarrowFirst { x, start } => {
                    let inner: usize = self.shape(*x)[1..].iter().product();
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    dx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                    emit(*x, dx, &mut grads);
                }
                Op::ConcatFirst { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        emit(p, gd[offset..offset + len].to_vec(), &mut grads);
                        offset += len;
                    }
                }
                Op::Gram { x } => {
                    let s = self.shape(*x);
                    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
                    let k = c + 1;
                    let norm = T::one() / T::from_usize(c).unwrap().powf(T::from_f64_lossy(1.5));
                    let xd = self.value(*x).data();
                    let mut dx = vec![T::zero(); n * c * p];
                    par::for_each_chunk_mut(&mut dx, c * p, |b, dxb| {
                        let gb = &gd[b * k * k..(b + 1) * k * k];
                        let mut sym = vec![T::zero(); k * k];
                        for i in 0..k {
                            for j in 0..k {
                                sym[i * k + j] = (gb[i * k + j] + gb[j * k + i]) * norm;
                            }
                        }
                        let mut a = vec![T::one(); k * p];
                        a[p..].copy_from_slice(&xd[b * c * p..(b + 1) * c * p]);
                        let mut da = vec![T::zero(); k * p];
                        matmul(&sym, false, &a, false, &mut da, k, k, p, false);
                        dxb.copy_from_slice(&da[p..]);
                    });
                    emit(*x, dx, &mut grads);
                }
                Op::Sum { x } => {
                    let n = self.value(*x).numel();
                    emit(*x, vec![gd[0]; n], &mut grads);
                }
            }
        }
        Ok(Grads { grads })
    }
}
