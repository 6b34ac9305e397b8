use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels::{self, Geometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T> {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    ScalarMul(T),
    AddScalar(T),
}

enum Op<T> {
    Leaf,
    /// Computed from inputs none of which require a gradient.
    Detached,
    Binary(Elementwise<T>, usize, usize),
    Unary(Elementwise<T>, usize),
    Sum(usize),
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: Geometry,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: Geometry,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        input: usize,
        mask: Vec<T>,
    },
    Jaccard {
        truth: usize,
        pred: usize,
        /// Per group: (intersection + eps, union + eps).
        stats: Vec<(T, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over `N * H * W`.
    pub var: Vec<T>,
    pub count: usize,
}

/// Record of executed operations for one forward pass.
///
/// Nodes are appended in execution order, which is a topological order;
/// [`Tape::backward`] walks it in reverse. Intermediate gradients are dropped
/// once consumed; leaf gradients stay available through [`Tape::grad`].
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
    backward_done: bool,
    retain_grads: bool,
    frozen_params: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_eq_err(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // keep strictly inside (0, 1)
    let lo = T::epsilon() / T::from_f64_lossy(2.0);
    if s.is_nan() {
        return s;
    }
    s.max(lo).min(one - lo)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            backward_done: false,
            retain_grads: false,
            frozen_params: false,
        }
    }

    /// A tape whose parameters are registered without gradient tracking,
    /// so no backward caches are kept.
    pub fn inference() -> Self {
        Self {
            frozen_params: true,
            ..Self::new()
        }
    }

    /// Keeps gradients of intermediate nodes after backward (debugging aid).
    pub fn retain_grads(mut self, retain: bool) -> Self {
        self.retain_grads = retain;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Detached
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named trainable parameter. Binding the same name twice
    /// returns the existing variable.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), !self.frozen_params);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.index(v)?].requires_grad)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let idx = self.index(v).ok()?;
        self.grads.get(idx).and_then(Option::as_ref)
    }

    pub fn param_grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    /// Forgets computed gradients so that backward may run again.
    pub fn clear_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---------------------------------------------------------------- elementwise

    pub fn elementwise(&mut self, kind: Elementwise<T>, a: Var, b: Option<Var>) -> Result<Var> {
        let ia = self.index(a)?;
        match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => {
                let ib = self.index(b.ok_or_else(|| {
                    Error::InvalidArgument(format!("{kind:?} needs two operands"))
                })?)?;
                let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
                shape_eq_err(va.shape(), vb.shape(), &format!("{kind:?}"))?;
                let f: fn(T, T) -> T = match kind {
                    Elementwise::Add => |x, y| x + y,
                    Elementwise::Sub => |x, y| x - y,
                    Elementwise::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
                let value = Tensor::new(va.shape().to_vec(), data)?;
                let rg = self.rg(ia) || self.rg(ib);
                Ok(self.push(value, Op::Binary(kind, ia, ib), rg))
            }
            _ => {
                if b.is_some() {
                    return Err(Error::InvalidArgument(format!("{kind:?} takes one operand")));
                }
                let va = &self.nodes[ia].value;
                let value = match kind {
                    // NaN propagates
                    Elementwise::Relu => va.map(|x| if x < T::zero() { T::zero() } else { x }),
                    Elementwise::Sigmoid => va.map(sigmoid),
                    Elementwise::ScalarMul(s) => va.map(|x| x * s),
                    Elementwise::AddScalar(s) => va.map(|x| x + s),
                    _ => unreachable!(),
                };
                let rg = self.rg(ia);
                Ok(self.push(value, Op::Unary(kind, ia), rg))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Div, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Relu, a, None)
    }

    /// Logistic sigmoid, saturating half an ulp of epsilon inside (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, a, None)
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Result<Var> {
        self.elementwise(Elementwise::ScalarMul(s), a, None)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.elementwise(Elementwise::AddScalar(s), a, None)
    }

    /// Sum of all entries as a scalar (rank 0) tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let total = self.nodes[ia].value.sum();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(total), Op::Sum(ia), rg))
    }

    // ---------------------------------------------------------------- structural

    /// Depth-wise concatenation of `(N, C_i, H, W)` tensors in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.index(p))
            .collect::<Result<Vec<_>>>()?;
        let first = idx
            .first()
            .ok_or_else(|| Error::shape("concat_channels needs at least one part"))?;
        let (n, _, h, w) = self.nodes[*first].value.dims4()?;
        let mut total_c = 0;
        for &i in &idx {
            let (pn, pc, ph, pw) = self.nodes[i].value.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: part (N={pn}, H={ph}, W={pw}) does not match (N={n}, H={h}, W={w})"
                )));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let value = Tensor::new(vec![n, total_c, h, w], data)?;
        Ok(self.push(value, Op::Concat(idx), rg))
    }

    /// Channels `start..start + len` of an `(N, C, H, W)` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let (n, c, h, w) = self.nodes[ia].value.dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::shape(format!(
                "slice_channels: range {start}..{} outside {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let src = self.nodes[ia].value.data();
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let off = (b * c + start) * plane;
            data.extend_from_slice(&src[off..off + len * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], data)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Slice { input: ia, start }, rg))
    }

    // ---------------------------------------------------------------- convolution

    /// Cross-correlation with a `(C_out, C_in, k, k)` weight.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ix = self.index(x)?;
        let iw = self.index(weight)?;
        let ib = bias.map(|b| self.index(b)).transpose()?;
        let (n, c, h, w) = self.nodes[ix].value.dims4()?;
        let (c_out, c_in, kh, kw) = self.nodes[iw].value.dims4()?;
        if c != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, weight expects {c_in}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv2d: non-square kernel {kh}x{kw}")));
        }
        if let Some(ib) = ib {
            shape_eq_err(self.nodes[ib].value.shape(), &[c_out], "conv2d bias")?;
        }
        let (ho, wo) = match (
            kernels::conv2d_output_size(h, kh, stride, padding),
            kernels::conv2d_output_size(w, kw, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: input {h}x{w} smaller than kernel {kh}x{kw} after padding {padding}"
                )))
            }
        };
        let geom = Geometry {
            img_c: c,
            img_h: h,
            img_w: w,
            col_h: ho,
            col_w: wo,
            other_c: c_out,
            kernel: kh,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            self.nodes[ix].value.data(),
            n,
            &geom,
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
        );
        let value = Tensor::new(vec![n, c_out, ho, wo], out)?;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        Ok(self.push(
            value,
            Op::Conv2d {
                input: ix,
                weight: iw,
                bias: ib,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution with a `(C_in, C_out, k, k)` weight.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ix = self.index(x)?;
        let iw = self.index(weight)?;
        let ib = bias.map(|b| self.index(b)).transpose()?;
        let (n, c, h, w) = self.nodes[ix].value.dims4()?;
        let (c_in, c_out, kh, kw) = self.nodes[iw].value.dims4()?;
        if c != c_in {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {c} channels, weight expects {c_in}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!(
                "conv_transpose2d: non-square kernel {kh}x{kw}"
            )));
        }
        if let Some(ib) = ib {
            shape_eq_err(self.nodes[ib].value.shape(), &[c_out], "conv_transpose2d bias")?;
        }
        let (ho, wo) = match (
            kernels::conv_transpose2d_output_size(h, kh, stride, padding),
            kernels::conv_transpose2d_output_size(w, kw, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "conv_transpose2d: empty output for input {h}x{w}"
                )))
            }
        };
        let geom = Geometry {
            img_c: c_out,
            img_h: ho,
            img_w: wo,
            col_h: h,
            col_w: w,
            other_c: c_in,
            kernel: kh,
            stride,
            padding,
        };
        let out = kernels::conv_transpose2d_forward(
            self.nodes[ix].value.data(),
            n,
            &geom,
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
        );
        let value = Tensor::new(vec![n, c_out, ho, wo], out)?;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input: ix,
                weight: iw,
                bias: ib,
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping 2x2 max pooling; ties resolve to the first position
    /// in row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let (n, c, h, w) = self.nodes[ix].value.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2: spatial dims {h}x{w} must be even"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.nodes[ix].value.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in src.chunks(h * w) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(ix);
        Ok(self.push(value, Op::MaxPool2 { input: ix, argmax }, rg))
    }

    /// Per-channel batch normalization.
    ///
    /// With `running = Some((mean, var))` the given statistics are used
    /// (inference); otherwise batch statistics over `N, H, W` are computed and
    /// returned so the caller can update its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let ix = self.index(x)?;
        let ig = self.index(gamma)?;
        let ibt = self.index(beta)?;
        let (n, c, h, w) = self.nodes[ix].value.dims4()?;
        shape_eq_err(self.nodes[ig].value.shape(), &[c], "batch_norm gamma")?;
        shape_eq_err(self.nodes[ibt].value.shape(), &[c], "batch_norm beta")?;
        let plane = h * w;
        let count = n * plane;
        if count == 0 {
            return Err(Error::shape("batch_norm: zero-size batch"));
        }
        let src = self.nodes[ix].value.data();
        let (mean, var, train) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape(format!(
                        "batch_norm: running stats sized {} / {}, expected {c}",
                        m.len(),
                        v.len()
                    )));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if count < 2 {
                    return Err(Error::shape(
                        "batch_norm: training mode needs N*H*W >= 2",
                    ));
                }
                let cnt = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s = s + src[off..off + plane].iter().copied().sum::<T>();
                    }
                    let m = s / cnt;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        sq = sq
                            + src[off..off + plane]
                                .iter()
                                .map(|&v| (v - m) * (v - m))
                                .sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / cnt;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[ig].value.data();
        let bt = self.nodes[ibt].value.data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ibt);
        let stats = train.then_some(BatchStats { mean, var, count });
        let v = self.push(
            value,
            Op::BatchNorm {
                input: ix,
                gamma: ig,
                beta: ibt,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        let ix = self.index(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let src = self.nodes[ix].value.data();
        let mask: Vec<T> = (0..src.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = src.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.nodes[ix].value.shape().to_vec(), data)?;
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Dropout { input: ix, mask }, rg))
    }

    /// Mean over `groups` equal slices of the soft Jaccard loss
    /// `-(sum(t*y) + eps) / (sum(t) + sum(y) - sum(t*y) + eps)`.
    pub fn jaccard(&mut self, truth: Var, pred: Var, eps: T, groups: usize) -> Result<Var> {
        let it = self.index(truth)?;
        let ip = self.index(pred)?;
        let (t, y) = (&self.nodes[it].value, &self.nodes[ip].value);
        shape_eq_err(t.shape(), y.shape(), "jaccard")?;
        if groups == 0 || t.numel() % groups != 0 {
            return Err(Error::shape(format!(
                "jaccard: {} elements cannot form {groups} groups",
                t.numel()
            )));
        }
        let per = t.numel() / groups;
        let mut stats = Vec::with_capacity(groups);
        let mut total = T::zero();
        for g in 0..groups {
            let ts = &t.data()[g * per..(g + 1) * per];
            let ys = &y.data()[g * per..(g + 1) * per];
            let (mut inter, mut st, mut sy) = (T::zero(), T::zero(), T::zero());
            for (&a, &b) in ts.iter().zip(ys) {
                inter = inter + a * b;
                st = st + a;
                sy = sy + b;
            }
            let num = inter + eps;
            let den = st + sy - inter + eps;
            total = total - num / den;
            stats.push((num, den));
        }
        let value = Tensor::scalar(total / T::from_usize(groups).unwrap());
        let rg = self.rg(it) || self.rg(ip);
        Ok(self.push(
            value,
            Op::Jaccard {
                truth: it,
                pred: ip,
                stats,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`, populating gradients of every
    /// `requires_grad` leaf it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.index(loss)?;
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this tape; call clear_grads first".into(),
            ));
        }
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        if !self.nodes[il].requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            let keep = matches!(self.nodes[i].op, Op::Leaf) || self.retain_grads;
            if keep {
                grads[i] = Some(g);
            }
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).unwrap()))
            .collect();
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |idx: usize, contrib: Vec<T>| {
            if !nodes[idx].requires_grad {
                return;
            }
            match &mut grads[idx] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e = *e + *c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |idx: usize| nodes[idx].value.data();
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                match kind {
                    Elementwise::Add => {
                        acc(a, g.to_vec());
                        acc(b, g.to_vec());
                    }
                    Elementwise::Sub => {
                        acc(a, g.to_vec());
                        acc(b, g.iter().map(|&v| -v).collect());
                    }
                    Elementwise::Mul => {
                        if self.rg(a) {
                            acc(a, g.iter().zip(val(b)).map(|(&d, &y)| d * y).collect());
                        }
                        if self.rg(b) {
                            acc(b, g.iter().zip(val(a)).map(|(&d, &x)| d * x).collect());
                        }
                    }
                    Elementwise::Div => {
                        if self.rg(a) {
                            acc(a, g.iter().zip(val(b)).map(|(&d, &y)| d / y).collect());
                        }
                        if self.rg(b) {
                            let out = node.value.data();
                            acc(
                                b,
                                g.iter()
                                    .zip(val(b))
                                    .zip(out)
                                    .map(|((&d, &y), &o)| -d * o / y)
                                    .collect(),
                            );
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::Unary(kind, a) => {
                let a = *a;
                let contrib = match kind {
                    Elementwise::Relu => g
                        .iter()
                        .zip(val(a))
                        .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                        .collect(),
                    Elementwise::Sigmoid => g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&d, &s)| d * s * (T::one() - s))
                        .collect(),
                    Elementwise::ScalarMul(s) => g.iter().map(|&d| d * *s).collect(),
                    Elementwise::AddScalar(_) => g.to_vec(),
                    _ => unreachable!(),
                };
                acc(a, contrib);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; nodes[*a].value.numel()]),
            Op::Concat(parts) => {
                let (n, total_c, h, w) = node.value.dims4().unwrap();
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p].value.shape()[1];
                    if self.rg(p) {
                        let mut part = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let off = (b * total_c + offset) * plane;
                            part.extend_from_slice(&g[off..off + c * plane]);
                        }
                        acc(p, part);
                    }
                    offset += c;
                }
            }
            Op::Slice { input, start } => {
                let (n, c, h, w) = nodes[*input].value.dims4().unwrap();
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut full = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    full[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                acc(*input, full);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b))];
                let n = nodes[*input].value.shape()[0];
                let grads_out =
                    kernels::conv2d_backward(val(*input), g, n, geom, val(*weight), need);
                if let Some(dx) = grads_out.input {
                    acc(*input, dx);
                }
                if let Some(dw) = grads_out.weight {
                    acc(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, grads_out.bias) {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b))];
                let n = nodes[*input].value.shape()[0];
                let grads_out =
                    kernels::conv_transpose2d_backward(val(*input), g, n, geom, val(*weight), need);
                if let Some(dx) = grads_out.input {
                    acc(*input, dx);
                }
                if let Some(dw) = grads_out.weight {
                    acc(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, grads_out.bias) {
                    acc(*b, db);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let (_, _, h, w) = nodes[*input].value.dims4().unwrap();
                let in_plane = h * w;
                let out_plane = in_plane / 4;
                let mut dx = vec![T::zero(); nodes[*input].value.numel()];
                for (o, (&d, &am)) in g.iter().zip(argmax).enumerate() {
                    let p = o / out_plane;
                    dx[p * in_plane + am as usize] = d;
                }
                acc(*input, dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = node.value.dims4().unwrap();
                let plane = h * w;
                let gam = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for k in off..off + plane {
                            dbeta[ch] = dbeta[ch] + g[k];
                            dgamma[ch] = dgamma[ch] + g[k] * xhat[k];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_usize(n * plane).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for k in off..off + plane {
                                dx[k] = if *train {
                                    scale * (g[k] - (dbeta[ch] + xhat[k] * dgamma[ch]) / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    acc(*input, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Dropout { input, mask } => {
                acc(*input, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::Jaccard { truth, pred, stats } => {
                let groups = stats.len();
                let per = nodes[*pred].value.numel() / groups;
                let scale = g[0] / T::from_usize(groups).unwrap();
                let (t, y) = (val(*truth), val(*pred));
                let mut grad_for = |target: usize, other: &[T]| {
                    let mut d = Vec::with_capacity(other.len());
                    for (gi, &(num, den)) in stats.iter().enumerate() {
                        let den2 = den * den;
                        for &o in &other[gi * per..(gi + 1) * per] {
                            // d(-num/den) with d num = o, d den = 1 - o
                            d.push(-scale * (o * den - num * (T::one() - o)) / den2);
                        }
                    }
                    acc(target, d);
                };
                if self.rg(*pred) {
                    grad_for(*pred, t);
                }
                if self.rg(*truth) {
                    grad_for(*truth, y);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[0.5]);
    }

    #[test]
    fn add_backward_passes_upstream_to_both() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[4.0, 6.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn sum_values_and_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(a).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[6.0]);
        let e = tape.constant(t(&[0], &[]));
        let s = tape.sum(e).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[0.0]);

        let m = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(m).unwrap().data(), &[1.0; 4]);
        assert_eq!(tape.grad(m).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn linear_and_relu_gradients() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]), true);
        let x = tape.constant(t(&[3], &[4.0, 5.0, -6.0]));
        let p = tape.mul(w, x).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[4.0, 5.0, -6.0]);
        assert!(tape.grad(x).is_none());

        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[-1.0, 2.0]), true);
        let r = tape.relu(w).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(w), Err(Error::Graph(_))));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Graph(_))));
        tape.clear_grads();
        tape.backward(s).unwrap();

        let c = tape.constant(t(&[1], &[1.0]));
        let s2 = tape.sum(c).unwrap();
        tape.clear_grads();
        assert!(matches!(tape.backward(s2), Err(Error::Graph(_))));

        let mut other = Tape::<f64>::new();
        assert!(matches!(other.backward(s), Err(Error::Graph(_))));
        assert!(other.relu(w).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn gradients_accumulate_over_consumers() {
        // y = sum(x*x + 3x)  => dy/dx = 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scalar_mul(x, 3.0).unwrap();
        let y = tape.add(sq, lin).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(vec![1, 3, 4, 4], |i| i as f64), true);
        let b = tape.leaf(Tensor::from_fn(vec![1, 3, 4, 4], |i| -(i as f64)), true);
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).unwrap().shape(), &[1, 6, 4, 4]);

        let dup = tape.concat_channels(&[a, a]).unwrap();
        let dv = tape.value(dup).unwrap().data().to_vec();
        assert_eq!(&dv[..48], &dv[48..]);

        let head = tape.slice_channels(c, 0, 3).unwrap();
        assert_eq!(tape.value(head).unwrap(), tape.value(a).unwrap());
        let s = tape.sum(head).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 48]);
        // reachable through the concat, but only through sliced-away channels
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0; 48]);

        let odd = tape.constant(Tensor::zeros(vec![1, 1, 5, 4]));
        assert!(tape.concat_channels(&[a, odd]).is_err());
        assert!(tape.concat_channels(&[]).is_err());
    }

    #[test]
    fn maxpool_forward_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let p = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[4.0]);
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 7.0), true);
        let p = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[7.0; 4]);
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        // ties go to the first element of each window
        let g = tape.grad(x).unwrap().data();
        assert_eq!(g[0], 1.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 1.0);
        assert_eq!(g[4], 0.0);

        let odd = tape.constant(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(matches!(tape.maxpool2(odd), Err(Error::Shape(_))));
    }

    #[test]
    fn jaccard_values() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones(vec![4]));
        let l = tape.jaccard(ones, ones, 1e-7, 1).unwrap();
        assert_eq!(tape.value(l).unwrap().data(), &[-1.0]);

        let zeros = tape.constant(Tensor::zeros(vec![4]));
        let l = tape.jaccard(zeros, zeros, 1e-7, 1).unwrap();
        assert_eq!(tape.value(l).unwrap().data(), &[-1.0]);

        let yt = tape.constant(t(&[2], &[1.0, 0.0]));
        let y = tape.constant(t(&[2], &[0.5, 0.5]));
        let l = tape.jaccard(yt, y, 0.0, 1).unwrap();
        assert!((tape.value(l).unwrap().data()[0] + 1.0 / 3.0).abs() < 1e-12);
    }
}
