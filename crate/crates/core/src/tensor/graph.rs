//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`], records every operation applied to
//! its [`Var`]s, and on [`Graph::backward`] accumulates gradients into the
//! store's trainable tensors. The recorded tape is freed by `backward`; a
//! graph cannot be differentiated twice.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::conv::{self, ConvDims, ConvGeom, DeconvDims};
use super::kernels::{norm, pool, resize::Resample1d, resize, shuffle};
use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Handles of a batch-norm layer's tensors.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    Deconv2d { x: Var, w: Var, b: Option<Var>, dims: DeconvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    MaxPool { x: Var, arg: Vec<u32> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    TransposeLast2 { x: Var },
    Softmax { x: Var },
    PixelShuffle { x: Var, r: usize },
    Resize { x: Var, rh: Arc<Resample1d>, rw: Arc<Resample1d> },
    L1 { a: Var, b: Var },
    Kl { tl: Var, th: Var, eps: T },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s, T: Element> {
    store: &'s mut ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    leaf_grads: HashMap<Var, Vec<T>>,
    finished: bool,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(invalid(format!("{op} expects a 4-D tensor, got shape {s:?}"))),
    }
}

impl<'s, T: Element> Graph<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            leaf_grads: HashMap::new(),
            finished: false,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        assert!(!self.finished, "graph already differentiated; build a new one");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a constant.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Records a leaf whose gradient is kept if `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    /// Records a stored tensor; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.store.tensor(id);
        let rg = t.requires_grad();
        let value = t.detached();
        let v = self.push(value, Op::Param(id), rg);
        self.param_vars.insert(id, v);
        v
    }

    /// Same value, cut from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.detached();
        self.push(t, Op::Leaf, false)
    }

    /// Gradient of a leaf recorded with `requires_grad`, after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v).map(Vec::as_slice)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let (batch, cin, h, wd) = dims4("conv2d", self.shape(x))?;
        let (cout, wcin, kh, kw) = dims4("conv2d weight", self.shape(w))?;
        if cin != wcin {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid(format!("conv2d kernel must be odd, got {kh}x{kw}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom::new((h, wd), (kh, kw), stride, padding)
            .ok_or_else(|| invalid(format!("conv2d geometry invalid for input {h}x{wd}, kernel {kh}x{kw}")))?;
        let dims = ConvDims { batch, cin, cout, geom };
        let mut out = vec![T::zero(); batch * cout * geom.out_h * geom.out_w];
        conv::conv_forward(
            &dims,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[batch, cout, geom.out_h, geom.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, dims }, rg))
    }

    /// Transposed convolution; `w` is `[cin, cout, kh, kw]`.
    ///
    /// Output size per axis is `(in - 1) * stride - 2 * pad + k + out_pad`.
    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
        out_pad: (usize, usize),
    ) -> Result<Var> {
        let (batch, cin, h, wd) = dims4("deconv2d", self.shape(x))?;
        let (wcin, cout, kh, kw) = dims4("deconv2d weight", self.shape(w))?;
        if cin != wcin {
            return Err(shape_err("deconv2d", self.shape(x), self.shape(w)));
        }
        if out_pad.0 >= stride.0 || out_pad.1 >= stride.1 {
            return Err(invalid(format!(
                "deconv2d output padding {out_pad:?} must be smaller than stride {stride:?}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("deconv2d bias", self.shape(b), &[cout]));
            }
        }
        let oh = ((h - 1) * stride.0 + kh + out_pad.0)
            .checked_sub(2 * padding.0)
            .ok_or_else(|| invalid("deconv2d padding too large"))?;
        let ow = ((wd - 1) * stride.1 + kw + out_pad.1)
            .checked_sub(2 * padding.1)
            .ok_or_else(|| invalid("deconv2d padding too large"))?;
        let geom = ConvGeom::new((oh, ow), (kh, kw), stride, padding)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| invalid("deconv2d geometry is not invertible"))?;
        let dims = DeconvDims { batch, cin, cout, geom };
        let mut out = vec![T::zero(); batch * cout * oh * ow];
        conv::deconv_forward(
            &dims,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[batch, cout, oh, ow], out)?;
        Ok(self.push(t, Op::Deconv2d { x, w, b, dims }, rg))
    }

    /// Batch normalization over NCHW. Training mode normalizes by batch
    /// statistics and updates the running buffers in the store.
    pub fn batch_norm(&mut self, x: Var, p: BnParams, train: bool) -> Result<Var> {
        let (batch, c, h, w) = dims4("batch_norm", self.shape(x))?;
        let plane = h * w;
        if self.store.tensor(p.gamma).numel() != c || self.store.tensor(p.beta).numel() != c {
            return Err(shape_err("batch_norm", self.shape(x), self.store.tensor(p.gamma).shape()));
        }
        if train && batch * plane == 1 {
            return Err(invalid("batch_norm in training mode needs more than one value per channel"));
        }
        let gamma = self.param(p.gamma);
        let beta = self.param(p.beta);
        let (mean, inv_std) = if train {
            let stats = norm::channel_stats(self.value(x).data(), batch, c, plane, BN_EPS);
            let n = (batch * plane) as f64;
            let unbias = n / (n - 1.0);
            let m = T::of(BN_MOMENTUM);
            let keep = T::one() - m;
            let rm = self.store.tensor_mut(p.running_mean).data_mut();
            rm.iter_mut().zip(&stats.mean).for_each(|(r, &v)| *r = keep * *r + m * v);
            let rv = self.store.tensor_mut(p.running_var).data_mut();
            rv.iter_mut()
                .zip(&stats.var)
                .for_each(|(r, &v)| *r = keep * *r + m * v * T::of(unbias));
            (stats.mean, stats.inv_std)
        } else {
            let mean = self.store.tensor(p.running_mean).data().to_vec();
            let inv_std = self
                .store
                .tensor(p.running_var)
                .data()
                .iter()
                .map(|&v| T::of(1.0 / (v.as_f64() + BN_EPS).sqrt()))
                .collect();
            (mean, inv_std)
        };
        let n = batch * c * plane;
        let mut xhat = vec![T::zero(); n];
        let mut y = vec![T::zero(); n];
        norm::normalize(
            self.value(x).data(),
            batch,
            c,
            plane,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mut xhat,
            &mut y,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        if !rg {
            xhat = Vec::new();
        }
        let t = Tensor::new(&[batch, c, h, w], y)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg))
    }

    /// Non-overlapping max pooling with window == stride.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize)) -> Result<Var> {
        let (b, c, h, w) = dims4("max_pool2d", self.shape(x))?;
        let (kh, kw) = kernel;
        if kh == 0 || kw == 0 || h < kh || w < kw {
            return Err(invalid(format!("max_pool2d window {kernel:?} does not fit {h}x{w}")));
        }
        let (oh, ow) = (h / kh, w / kw);
        let mut out = vec![T::zero(); b * c * oh * ow];
        let arg = pool::max_pool(self.value(x).data(), b * c, h, w, kh, kw, &mut out);
        let rg = self.rg(x);
        let t = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool { x, arg: if rg { arg } else { Vec::new() } }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v * s, Op::Scale { x, s })
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op_name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let (b, _, h, w) = dims4("concat_channels", self.shape(first))?;
        let mut total_c = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = dims4("concat_channels", self.shape(p))?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(shape_err("concat_channels", self.shape(first), self.shape(p)));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total_c * plane);
        for bi in 0..b {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(&[b, total_c, h, w], out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).detached().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Swaps the two innermost axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid("transpose_last2 needs at least 2 axes"));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (blk_in, blk_out) in src.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    blk_out[j * r + i] = blk_in[i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::TransposeLast2 { x }, rg))
    }

    /// Softmax over the innermost axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| invalid("softmax of a scalar"))?;
        let mut out = self.value(x).data().to_vec();
        out.chunks_exact_mut(k).for_each(softmax_row);
        let rg = self.rg(x);
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    /// Depth-to-space by factor `r`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = dims4("pixel_shuffle", self.shape(x))?;
        if r == 0 || c % (r * r) != 0 {
            return Err(invalid(format!("pixel_shuffle: {c} channels not divisible by {}", r * r)));
        }
        let oc = c / (r * r);
        let mut out = vec![T::zero(); b * c * h * w];
        shuffle::pixel_shuffle(self.value(x).data(), b, oc, h, w, r, &mut out);
        let rg = self.rg(x);
        let t = Tensor::new(&[b, oc, h * r, w * r], out)?;
        Ok(self.push(t, Op::PixelShuffle { x, r }, rg))
    }

    /// Bicubic resampling of the two spatial axes. Same-size resizes return `x`.
    pub fn bicubic_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = dims4("bicubic_resize", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(invalid("bicubic_resize target must be at least 1x1"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let rh = Arc::new(Resample1d::new(h, out_h));
        let rw = Arc::new(Resample1d::new(w, out_w));
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        resize::resize_forward(self.value(x).data(), b * c, &rh, &rw, &mut out);
        let rg = self.rg(x);
        let t = Tensor::new(&[b, c, out_h, out_w], out)?;
        Ok(self.push(t, Op::Resize { x, rh, rw }, rg))
    }

    /// `mean(|a - b|)`.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("l1_loss", va.shape(), vb.shape()));
        }
        let n = va.numel().max(1) as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs().as_f64()).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(T::of(s / n)), Op::L1 { a, b }, rg))
    }

    /// `sum_ij th_ij * ln((th_ij + eps) / (tl_ij + eps))`, unnormalized over cells.
    pub fn kl_prior(&mut self, tl: Var, th: Var, eps: f64) -> Result<Var> {
        let (vl, vh) = (self.value(tl), self.value(th));
        if vl.shape() != vh.shape() {
            return Err(shape_err("kl_prior", vl.shape(), vh.shape()));
        }
        let s: f64 = vl
            .data()
            .iter()
            .zip(vh.data())
            .map(|(&l, &h)| {
                let (l, h) = (l.as_f64(), h.as_f64());
                h * ((h + eps) / (l + eps)).ln()
            })
            .sum();
        let rg = self.rg(tl) || self.rg(th);
        Ok(self.push(Tensor::scalar(T::of(s)), Op::Kl { tl, th, eps: T::of(eps) }, rg))
    }

    /// Mean cross-entropy of `logits [n, k]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [n, k] = s[..] else {
            return Err(invalid(format!("cross_entropy expects [n, k] logits, got {s:?}")));
        };
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(invalid("cross_entropy targets do not match logits"));
        }
        let mut probs = self.value(logits).data().to_vec();
        probs.chunks_exact_mut(k).for_each(softmax_row);
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[i * k + t].as_f64().max(1e-300).ln())
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Back-propagates from a scalar `loss`, accumulating into every trainable
    /// store tensor and every gradient-tracking leaf. Frees the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.finished = true;
        let nodes = std::mem::take(&mut self.nodes);
        self.param_vars.clear();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        self.leaf_grads.insert(Var(i), g);
                    }
                }
                Op::Param(id) => self.store.tensor_mut(*id).accumulate_grad(&g),
                op => backprop(op, &node.value, &g, &nodes, &mut grads),
            }
        }
        Ok(())
    }
}

fn softmax_row<T: Element>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Moves the gradient slots of distinct vars out of `grads`, zero-filled
/// where absent; `None` for vars that need no gradient.
fn take_slots<T: Element, const N: usize>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], vars: [Option<Var>; N]) -> [Option<Vec<T>>; N] {
    debug_assert!(vars.iter().enumerate().all(|(i, a)| a.is_none() || vars[..i].iter().all(|b| b != a)));
    vars.map(|v| {
        let v = v?;
        slot(grads, nodes, v)?;
        grads[v.0].take()
    })
}

fn put_slots<T: Element, const N: usize>(grads: &mut [Option<Vec<T>>], vars: [Option<Var>; N], vals: [Option<Vec<T>>; N]) {
    for (v, g) in vars.into_iter().zip(vals) {
        if let (Some(v), Some(g)) = (v, g) {
            grads[v.0] = Some(g);
        }
    }
}

/// Zero-initialized gradient slot for `v`, or `None` if `v` needs no gradient.
fn slot<'a, T: Element>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Element>(op: &Op<T>, out: &Tensor<T>, g: &[T], nodes: &[Node<T>], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match op {
        Op::Leaf | Op::Param(_) => unreachable!("handled by caller"),
        Op::Conv2d { x, w, b, dims } => {
            let [mut dx, mut dw, mut db] = take_slots(grads, nodes, [Some(*x), Some(*w), *b]);
            conv::conv_backward(dims, val(*x), val(*w), g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            put_slots(grads, [Some(*x), Some(*w), *b], [dx, dw, db]);
        }
        Op::Deconv2d { x, w, b, dims } => {
            let [mut dx, mut dw, mut db] = take_slots(grads, nodes, [Some(*x), Some(*w), *b]);
            conv::deconv_backward(dims, val(*x), val(*w), g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            put_slots(grads, [Some(*x), Some(*w), *b], [dx, dw, db]);
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let s = out.shape();
            let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
            let gam = val(*gamma);
            let vars = [Some(*x), Some(*gamma), Some(*beta)];
            let [mut dx, mut dg, mut dbt] = take_slots(grads, nodes, vars);
            let dx_train = if *train { dx.as_deref_mut() } else { None };
            norm::backward_train(g, xhat, batch, c, plane, inv_std, gam, dx_train, dg.as_deref_mut(), dbt.as_deref_mut());
            put_slots(grads, vars, [None, dg, dbt]);
            if let Some(dx) = dx.as_deref_mut() {
                if !*train {
                    for b in 0..batch {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                dx[i] += k * g[i];
                            }
                        }
                    }
                }
            }
            put_slots(grads, vars, [dx, None, None]);
        }
        Op::MaxPool { x, arg } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (&a, &gv) in arg.iter().zip(g) {
                    dx[a as usize] += gv;
                }
            }
        }
        Op::Relu { x } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &o), &gv) in dx.iter_mut().zip(out.data()).zip(g) {
                    if o > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(d) = slot(grads, nodes, v) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
            }
        }
        Op::Mul { a, b } => {
            if let Some(d) = slot(grads, nodes, *a) {
                let vb = val(*b);
                d.iter_mut().zip(g).zip(vb).for_each(|((d, &gv), &y)| *d += gv * y);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                let va = val(*a);
                d.iter_mut().zip(g).zip(va).for_each(|((d, &gv), &y)| *d += gv * y);
            }
        }
        Op::Scale { x, s } => {
            if let Some(d) = slot(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
            }
        }
        Op::Concat { parts } => {
            let s = out.shape();
            let (batch, total_c, plane) = (s[0], s[1], s[2] * s[3]);
            let mut c0 = 0;
            for &p in parts {
                let c = nodes[p.0].value.shape()[1];
                if let Some(d) = slot(grads, nodes, p) {
                    for b in 0..batch {
                        let src = &g[(b * total_c + c0) * plane..(b * total_c + c0 + c) * plane];
                        d[b * c * plane..(b + 1) * c * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &gv)| *d += gv);
                    }
                }
                c0 += c;
            }
        }
        Op::Reshape { x } => {
            if let Some(d) = slot(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
        }
        Op::TransposeLast2 { x } => {
            if let Some(d) = slot(grads, nodes, *x) {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                for (din, gout) in d.chunks_exact_mut(r * c).zip(g.chunks_exact(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            din[i * c + j] += gout[j * r + i];
                        }
                    }
                }
            }
        }
        Op::Softmax { x } => {
            if let Some(d) = slot(grads, nodes, *x) {
                let k = *out.shape().last().expect("non-scalar");
                for ((drow, yrow), grow) in d.chunks_exact_mut(k).zip(out.data().chunks_exact(k)).zip(g.chunks_exact(k)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                    for ((dv, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv += y * (gv - dot);
                    }
                }
            }
        }
        Op::PixelShuffle { x, r } => {
            if let Some(d) = slot(grads, nodes, *x) {
                let s = out.shape();
                let (b, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
                shuffle::pixel_shuffle_backward(g, b, c, h, w, *r, d);
            }
        }
        Op::Resize { x, rh, rw } => {
            if let Some(d) = slot(grads, nodes, *x) {
                let s = out.shape();
                resize::resize_backward(g, s[0] * s[1], rh, rw, d);
            }
        }
        Op::L1 { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let k = g[0] / T::of(va.len().max(1) as f64);
            let sign = |x: T, y: T| {
                if x > y {
                    k
                } else if x < y {
                    -k
                } else {
                    T::zero()
                }
            };
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(va).zip(vb).for_each(|((d, &x), &y)| *d += sign(x, y));
            }
            if let Some(d) = slot(grads, nodes, *b) {
                d.iter_mut().zip(va).zip(vb).for_each(|((d, &x), &y)| *d -= sign(x, y));
            }
        }
        Op::Kl { tl, th, eps } => {
            let (vl, vh) = (val(*tl), val(*th));
            let e = *eps;
            if let Some(d) = slot(grads, nodes, *tl) {
                for ((d, &l), &h) in d.iter_mut().zip(vl).zip(vh) {
                    *d -= g[0] * h / (l + e);
                }
            }
            if let Some(d) = slot(grads, nodes, *th) {
                for ((d, &l), &h) in d.iter_mut().zip(vl).zip(vh) {
                    *d += g[0] * (((h + e) / (l + e)).ln() + h / (h + e));
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if let Some(d) = slot(grads, nodes, *logits) {
                let n = targets.len();
                let k = probs.len() / n.max(1);
                let scale = g[0] / T::of(n as f64);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let ind = if j == t { T::one() } else { T::zero() };
                        d[i * k + j] += scale * (probs[i * k + j] - ind);
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(d) = slot(grads, nodes, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(d) = slot(grads, nodes, *x) {
                let k = g[0] / T::of(d.len().max(1) as f64);
                d.iter_mut().for_each(|d| *d += k);
            }
        }
    }
}
