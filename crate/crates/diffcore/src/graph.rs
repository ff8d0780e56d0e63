//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation order;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that depends on a differentiable leaf. Complex quantities are
//! carried as real tensors whose last axis has length 2 (real, imaginary).

use crate::conv::{conv_adjoint, conv_forward, conv_kernel_grad, ConvGeom};
use crate::error::{DiffError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

enum Op<T> {
    Constant,
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    // `geom` is the forward convolution whose adjoint this node computes.
    ConvTranspose2d { x: Var, k: Var, geom: ConvGeom },
    BiasAdd { x: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    LeakyRelu { x: Var, slope: T },
    Selu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Reshape { x: Var },
    ConcatLast { a: Var, b: Var },
    Add { a: Var, b: Var },
    ScalarMul { x: Var, c: T },
    ScaleToNorm { x: Var, group: usize, target: T, norms: Vec<T> },
    SelectRows { x: Var, rows: Vec<usize> },
    PilotReceive { g: Var, q: Var },
    ComplexChannel { s: Var, h: Vec<T> },
    Mrc { y: Var, h: Vec<T>, norms: Vec<T> },
    StraightThrough { x: Var },
    FrobeniusMse { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node of the graph.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(DiffError::invalid(op, format!("expected rank {rank}, got shape {shape:?}")));
    }
    Ok(())
}

fn expect_complex(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.last() != Some(&2) {
        return Err(DiffError::invalid(op, format!("last axis must hold (re, im), got shape {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Leaf => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradients (data, noise, targets).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// A differentiable input (parameters, or inputs under gradient check).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `x [B, in] * w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        expect_rank("dense", xs, 2)?;
        expect_rank("dense", ws, 2)?;
        if xs[1] != ws[0] || bs != [ws[1]] {
            return Err(DiffError::shape("dense", (xs[1], ws[1]), (ws[0], bs.to_vec())));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[1]);
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(self.value(b).data());
        }
        gemm(batch, inp, out, self.value(x).data(), false, self.value(w).data(), false, &mut y, true);
        let value = Tensor::new(&[batch, out], y)?;
        Ok(self.push(value, Op::Dense { x, w, b }, &[x, w, b]))
    }

    /// "Same"-padded strided 2-D cross-correlation, `x [B,H,W,Cin]`, `k [kh,kw,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: (usize, usize)) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        expect_rank("conv2d", &xs, 4)?;
        expect_rank("conv2d", &ks, 4)?;
        if ks[2] != xs[3] {
            return Err(DiffError::shape("conv2d", xs[3], ks[2]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(DiffError::invalid("conv2d", "stride must be positive"));
        }
        let geom = ConvGeom::same(xs[1], xs[2], xs[3], ks[3], (ks[0], ks[1]), stride);
        let y = conv_forward(&geom, xs[0], self.value(x).data(), self.value(k).data());
        let value = Tensor::new(&[xs[0], geom.h_out, geom.w_out, geom.c_out], y)?;
        Ok(self.push(value, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    /// Transposed convolution `x [B,H,W,Cin]`, `k [kh,kw,Cout,Cin]` to `[B, H*sh, W*sw, Cout]`.
    ///
    /// This is exactly the adjoint of [`Graph::conv2d`] applied with the same
    /// kernel and stride to a `[B, H*sh, W*sw, Cout]` input.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: (usize, usize)) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        expect_rank("conv_transpose2d", &xs, 4)?;
        expect_rank("conv_transpose2d", &ks, 4)?;
        if ks[3] != xs[3] {
            return Err(DiffError::shape("conv_transpose2d", xs[3], ks[3]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(DiffError::invalid("conv_transpose2d", "stride must be positive"));
        }
        let (ho, wo) = (xs[1] * stride.0, xs[2] * stride.1);
        let geom = ConvGeom::same(ho, wo, ks[2], ks[3], (ks[0], ks[1]), stride);
        debug_assert_eq!((geom.h_out, geom.w_out), (xs[1], xs[2]));
        let y = conv_adjoint(&geom, xs[0], self.value(x).data(), self.value(k).data());
        let value = Tensor::new(&[xs[0], ho, wo, ks[2]], y)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, k, geom }, &[x, k]))
    }

    /// Adds `b [C]` along the last axis.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(b) != [c] {
            return Err(DiffError::shape("bias_add", [c], self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        Ok(self.push(t, Op::BiasAdd { x, b }, &[x, b]))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(DiffError::shape("batchnorm", [c], self.shape(gamma)));
        }
        Ok(c)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T, batch_stats: bool) -> Var {
        let c = mean.len();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = self.value(x).data().to_vec();
        let mut y = xhat.clone();
        for (xrow, yrow) in xhat.chunks_mut(c).zip(y.chunks_mut(c)) {
            for ch in 0..c {
                let h = (xrow[ch] - mean[ch]) * inv_std[ch];
                xrow[ch] = h;
                yrow[ch] = g[ch] * h + bt[ch];
            }
        }
        let value = Tensor::new(self.shape(x), y).expect("same shape");
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, &[x, gamma, beta])
    }

    /// Batch normalization with batch statistics over every axis but the last.
    ///
    /// Returns the output together with the (biased) batch mean and variance so
    /// the caller can update running statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let c = self.check_bn(x, gamma, beta)?;
        let batch = self.shape(x)[0];
        if batch < 2 {
            return Err(DiffError::BatchTooSmall(batch));
        }
        let data = self.value(x).data();
        let n = T::from_usize(data.len() / c).unwrap();
        let mut mean = vec![T::zero(); c];
        for row in data.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); c];
        for row in data.chunks(c) {
            for ch in 0..c {
                let d = row[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps, true);
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed statistics: a per-channel affine map.
    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(DiffError::shape("batchnorm", c, mean.len()));
        }
        Ok(self.bn_apply(x, gamma, beta, mean, var, eps, false))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(t, op, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        self.unary(x, Op::LeakyRelu { x, slope: s }, |v| if v > T::zero() { v } else { v * s })
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let (l, a) = (T::from_f64_lossy(SELU_LAMBDA), T::from_f64_lossy(SELU_ALPHA));
        self.unary(x, Op::Selu { x }, |v| if v > T::zero() { l * v } else { l * a * (v.exp() - T::one()) })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh { x }, |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x }, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.unary(x, Op::ScalarMul { x, c }, |v| v * c)
    }

    /// Applies `f` in the forward pass and passes gradients through unchanged.
    pub fn straight_through(&mut self, x: Var, f: impl Fn(T) -> T) -> Var {
        self.unary(x, Op::StraightThrough { x }, f)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Concatenation along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(DiffError::shape("concat", &sa, &sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut data = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for (ra, rb) in self.value(a).data().chunks(ca).zip(self.value(b).data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::ConcatLast { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::shape("add", self.shape(a), self.shape(b)));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// Rescales every contiguous group of `group` reals to Euclidean norm `target`.
    pub fn scale_to_norm(&mut self, x: Var, group: usize, target: f64) -> Result<Var> {
        let len = self.value(x).len();
        if group == 0 || !len.is_multiple_of(group) {
            return Err(DiffError::invalid("scale_to_norm", format!("group {group} does not divide {len}")));
        }
        let target = T::from_f64_lossy(target);
        let mut t = self.value(x).clone();
        let mut norms = Vec::with_capacity(len / group);
        for chunk in t.data_mut().chunks_mut(group) {
            let n = chunk.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n <= T::zero() || !n.is_finite() {
                return Err(DiffError::ZeroNorm { op: "scale_to_norm" });
            }
            let s = target / n;
            chunk.iter_mut().for_each(|v| *v *= s);
            norms.push(n);
        }
        Ok(self.push(t, Op::ScaleToNorm { x, group, target, norms }, &[x]))
    }

    /// Gathers `rows` along axis 1 of `x [B, M, ...]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || rows.iter().any(|&r| r >= s[1]) || rows.is_empty() {
            return Err(DiffError::invalid("select_rows", format!("rows {rows:?} out of range for {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * rows.len() * inner);
        for b in 0..s[0] {
            for &r in rows {
                data.extend_from_slice(&src[(b * s[1] + r) * inner..][..inner]);
            }
        }
        let mut shape = s.clone();
        shape[1] = rows.len();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Per pilot subcarrier complex product `r[b,p,:] = g[b,p,:] * q[p,:,:]^T`.
    ///
    /// `g [B, P, N, 2]`, `q [P, L, N, 2]`, output `[B, P, L, 2]`.
    pub fn pilot_receive(&mut self, g: Var, q: Var) -> Result<Var> {
        let (gs, qs) = (self.shape(g).to_vec(), self.shape(q).to_vec());
        expect_rank("pilot_receive", &gs, 4)?;
        expect_rank("pilot_receive", &qs, 4)?;
        expect_complex("pilot_receive", &gs)?;
        if qs[0] != gs[1] || qs[2] != gs[2] || qs[3] != 2 {
            return Err(DiffError::shape("pilot_receive", [gs[1], 0, gs[2], 2], &qs));
        }
        let (bsz, p, n, l) = (gs[0], gs[1], gs[2], qs[1]);
        let (gd, qd) = (self.value(g).data(), self.value(q).data());
        let mut out = vec![T::zero(); bsz * p * l * 2];
        for b in 0..bsz {
            for pp in 0..p {
                let grow = &gd[(b * p + pp) * n * 2..][..n * 2];
                for ll in 0..l {
                    let qrow = &qd[(pp * l + ll) * n * 2..][..n * 2];
                    let (mut re, mut im) = (T::zero(), T::zero());
                    for k in 0..n {
                        let (gr, gi, qr, qi) = (grow[2 * k], grow[2 * k + 1], qrow[2 * k], qrow[2 * k + 1]);
                        re += gr * qr - gi * qi;
                        im += gr * qi + gi * qr;
                    }
                    let o = ((b * p + pp) * l + ll) * 2;
                    out[o] = re;
                    out[o + 1] = im;
                }
            }
        }
        let value = Tensor::new(&[bsz, p, l, 2], out)?;
        Ok(self.push(value, Op::PilotReceive { g, q }, &[g, q]))
    }

    /// Flat-fading multi-antenna channel `y[b,k,:] = h[b,k,:] * s[b,k]` with constant `h`.
    ///
    /// `s [B, K, 2]`, `h [B, K, N, 2]`, output `[B, K, N, 2]`.
    pub fn complex_channel(&mut self, s: Var, h: &Tensor<T>) -> Result<Var> {
        let (ss, hs) = (self.shape(s).to_vec(), h.shape().to_vec());
        expect_rank("complex_channel", &ss, 3)?;
        expect_rank("complex_channel", &hs, 4)?;
        if ss[0] != hs[0] || ss[1] != hs[1] || ss[2] != 2 || hs[3] != 2 {
            return Err(DiffError::shape("complex_channel", [ss[0], ss[1], 0, 2], &hs));
        }
        let n = hs[2];
        let sd = self.value(s).data();
        let hd = h.data();
        let mut out = vec![T::zero(); hd.len()];
        for (idx, sym) in sd.chunks(2).enumerate() {
            let (sr, si) = (sym[0], sym[1]);
            for a in 0..n {
                let o = (idx * n + a) * 2;
                let (hr, hi) = (hd[o], hd[o + 1]);
                out[o] = hr * sr - hi * si;
                out[o + 1] = hr * si + hi * sr;
            }
        }
        let value = Tensor::new(&hs, out)?;
        Ok(self.push(value, Op::ComplexChannel { s, h: hd.to_vec() }, &[s]))
    }

    /// Maximum ratio combining `s_hat[b,k] = h_est[b,k,:]^H y[b,k,:] / |h_est[b,k,:]|`.
    pub fn mrc(&mut self, y: Var, h_est: &Tensor<T>) -> Result<Var> {
        let (ys, hs) = (self.shape(y).to_vec(), h_est.shape().to_vec());
        expect_rank("mrc", &ys, 4)?;
        if ys != hs || ys[3] != 2 {
            return Err(DiffError::shape("mrc", &hs, &ys));
        }
        let n = ys[2];
        let (yd, hd) = (self.value(y).data(), h_est.data());
        let groups = ys[0] * ys[1];
        let mut out = vec![T::zero(); groups * 2];
        let mut norms = Vec::with_capacity(groups);
        for gidx in 0..groups {
            let hrow = &hd[gidx * n * 2..][..n * 2];
            let yrow = &yd[gidx * n * 2..][..n * 2];
            let nrm = hrow.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nrm <= T::zero() {
                return Err(DiffError::ZeroNorm { op: "mrc" });
            }
            let (mut re, mut im) = (T::zero(), T::zero());
            for a in 0..n {
                let (hr, hi, yr, yi) = (hrow[2 * a], hrow[2 * a + 1], yrow[2 * a], yrow[2 * a + 1]);
                re += hr * yr + hi * yi;
                im += hr * yi - hi * yr;
            }
            out[2 * gidx] = re / nrm;
            out[2 * gidx + 1] = im / nrm;
            norms.push(nrm);
        }
        let value = Tensor::new(&[ys[0], ys[1], 2], out)?;
        Ok(self.push(value, Op::Mrc { y, h: hd.to_vec(), norms }, &[y]))
    }

    /// Mean over the batch axis of the squared Frobenius norm of `pred - target`.
    pub fn frobenius_mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(DiffError::shape("frobenius_mse", self.shape(target), self.shape(pred)));
        }
        let batch = T::from_usize(self.shape(pred)[0]).unwrap();
        let s: T =
            self.value(pred).data().iter().zip(self.value(target).data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
        Ok(self.push(Tensor::scalar(s / batch), Op::FrobeniusMse { pred, target }, &[pred, target]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let g = f();
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let d = dy.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v), data).expect("gradient shape");
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[1];
                self.accumulate(grads, *x, || {
                    let mut g = vec![T::zero(); batch * inp];
                    gemm(batch, out, inp, d, false, self.value(*w).data(), true, &mut g, false);
                    like(*x, g)
                });
                self.accumulate(grads, *w, || {
                    let mut g = vec![T::zero(); inp * out];
                    gemm(inp, batch, out, self.value(*x).data(), true, d, false, &mut g, false);
                    like(*w, g)
                });
                self.accumulate(grads, *b, || {
                    let mut g = vec![T::zero(); out];
                    for row in d.chunks(out) {
                        g.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    like(*b, g)
                });
            }
            Op::Conv2d { x, k, geom } => {
                let batch = self.shape(*x)[0];
                self.accumulate(grads, *x, || like(*x, conv_adjoint(geom, batch, d, self.value(*k).data())));
                self.accumulate(grads, *k, || like(*k, conv_kernel_grad(geom, batch, self.value(*x).data(), d)));
            }
            Op::ConvTranspose2d { x, k, geom } => {
                let batch = self.shape(*x)[0];
                self.accumulate(grads, *x, || like(*x, conv_forward(geom, batch, d, self.value(*k).data())));
                self.accumulate(grads, *k, || like(*k, conv_kernel_grad(geom, batch, d, self.value(*x).data())));
            }
            Op::BiasAdd { x, b } => {
                self.accumulate(grads, *x, || dy.clone());
                self.accumulate(grads, *b, || {
                    let c = self.shape(*b)[0];
                    let mut g = vec![T::zero(); c];
                    for row in d.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    like(*b, g)
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (drow, hrow) in d.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += drow[ch];
                        sum_dy_xhat[ch] += drow[ch] * hrow[ch];
                    }
                }
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *x, || {
                    let n = T::from_usize(d.len() / c).unwrap();
                    let mut g = vec![T::zero(); d.len()];
                    for ((grow, drow), hrow) in g.chunks_mut(c).zip(d.chunks(c)).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            grow[ch] = if *batch_stats {
                                scale * (drow[ch] - sum_dy[ch] / n - hrow[ch] * sum_dy_xhat[ch] / n)
                            } else {
                                scale * drow[ch]
                            };
                        }
                    }
                    like(*x, g)
                });
                self.accumulate(grads, *gamma, || like(*gamma, sum_dy_xhat.clone()));
                self.accumulate(grads, *beta, || like(*beta, sum_dy.clone()));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, || {
                    like(*x, xv.iter().zip(d).map(|(&v, &g)| if v > T::zero() { g } else { g * *slope }).collect())
                });
            }
            Op::Selu { x } => {
                let (l, a) = (T::from_f64_lossy(SELU_LAMBDA), T::from_f64_lossy(SELU_ALPHA));
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, || {
                    like(
                        *x,
                        xv.iter()
                            .zip(d)
                            .map(|(&v, &g)| if v > T::zero() { g * l } else { g * l * a * v.exp() })
                            .collect(),
                    )
                });
            }
            Op::Tanh { x } => {
                let yv = node.value.data();
                self.accumulate(grads, *x, || {
                    like(*x, yv.iter().zip(d).map(|(&y, &g)| g * (T::one() - y * y)).collect())
                });
            }
            Op::Sigmoid { x } => {
                let yv = node.value.data();
                self.accumulate(grads, *x, || {
                    like(*x, yv.iter().zip(d).map(|(&y, &g)| g * y * (T::one() - y)).collect())
                });
            }
            Op::Reshape { x } | Op::StraightThrough { x } => {
                self.accumulate(grads, *x, || like(*x, d.to_vec()));
            }
            Op::ScalarMul { x, c } => {
                self.accumulate(grads, *x, || like(*x, d.iter().map(|&g| g * *c).collect()));
            }
            Op::ConcatLast { a, b } => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                self.accumulate(grads, *a, || {
                    like(*a, d.chunks(ca + cb).flat_map(|r| r[..ca].iter().copied()).collect())
                });
                self.accumulate(grads, *b, || {
                    like(*b, d.chunks(ca + cb).flat_map(|r| r[ca..].iter().copied()).collect())
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, || dy.clone());
                self.accumulate(grads, *b, || dy.clone());
            }
            Op::ScaleToNorm { x, group, target, norms } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, || {
                    let mut g = vec![T::zero(); xv.len()];
                    for (((gc, xc), dc), &n) in
                        g.chunks_mut(*group).zip(xv.chunks(*group)).zip(d.chunks(*group)).zip(norms)
                    {
                        let dot: T = xc.iter().zip(dc).map(|(&a, &b)| a * b).sum::<T>() / (n * n);
                        for ((gv, &xv), &dv) in gc.iter_mut().zip(xc).zip(dc) {
                            *gv = *target / n * (dv - xv * dot);
                        }
                    }
                    like(*x, g)
                });
            }
            Op::SelectRows { x, rows } => {
                self.accumulate(grads, *x, || {
                    let s = self.shape(*x);
                    let inner: usize = s[2..].iter().product();
                    let mut g = vec![T::zero(); self.value(*x).len()];
                    for b in 0..s[0] {
                        for (j, &r) in rows.iter().enumerate() {
                            let src = &d[(b * rows.len() + j) * inner..][..inner];
                            let dst = &mut g[(b * s[1] + r) * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                        }
                    }
                    like(*x, g)
                });
            }
            Op::PilotReceive { g, q } => {
                let gs = self.shape(*g);
                let (bsz, p, n) = (gs[0], gs[1], gs[2]);
                let l = self.shape(*q)[1];
                let (gd, qd) = (self.value(*g).data(), self.value(*q).data());
                self.accumulate(grads, *g, || {
                    let mut out = vec![T::zero(); gd.len()];
                    for b in 0..bsz {
                        for pp in 0..p {
                            for ll in 0..l {
                                let o = ((b * p + pp) * l + ll) * 2;
                                let (dr, di) = (d[o], d[o + 1]);
                                let qrow = &qd[(pp * l + ll) * n * 2..][..n * 2];
                                let grow = &mut out[(b * p + pp) * n * 2..][..n * 2];
                                for k in 0..n {
                                    let (qr, qi) = (qrow[2 * k], qrow[2 * k + 1]);
                                    grow[2 * k] += dr * qr + di * qi;
                                    grow[2 * k + 1] += di * qr - dr * qi;
                                }
                            }
                        }
                    }
                    like(*g, out)
                });
                self.accumulate(grads, *q, || {
                    let mut out = vec![T::zero(); qd.len()];
                    for b in 0..bsz {
                        for pp in 0..p {
                            let grow = &gd[(b * p + pp) * n * 2..][..n * 2];
                            for ll in 0..l {
                                let o = ((b * p + pp) * l + ll) * 2;
                                let (dr, di) = (d[o], d[o + 1]);
                                let qrow = &mut out[(pp * l + ll) * n * 2..][..n * 2];
                                for k in 0..n {
                                    let (gr, gi) = (grow[2 * k], grow[2 * k + 1]);
                                    qrow[2 * k] += dr * gr + di * gi;
                                    qrow[2 * k + 1] += di * gr - dr * gi;
                                }
                            }
                        }
                    }
                    like(*q, out)
                });
            }
            Op::ComplexChannel { s, h } => {
                let n = node.value.shape()[2];
                self.accumulate(grads, *s, || {
                    let groups = self.value(*s).len() / 2;
                    let mut out = vec![T::zero(); groups * 2];
                    for gidx in 0..groups {
                        let (mut gr, mut gi) = (T::zero(), T::zero());
                        for a in 0..n {
                            let o = (gidx * n + a) * 2;
                            let (hr, hi, dr, di) = (h[o], h[o + 1], d[o], d[o + 1]);
                            gr += dr * hr + di * hi;
                            gi += di * hr - dr * hi;
                        }
                        out[2 * gidx] = gr;
                        out[2 * gidx + 1] = gi;
                    }
                    like(*s, out)
                });
            }
            Op::Mrc { y, h, norms } => {
                let n = self.shape(*y)[2];
                self.accumulate(grads, *y, || {
                    let mut out = vec![T::zero(); h.len()];
                    for (gidx, &nrm) in norms.iter().enumerate() {
                        let (dr, di) = (d[2 * gidx] / nrm, d[2 * gidx + 1] / nrm);
                        for a in 0..n {
                            let o = (gidx * n + a) * 2;
                            let (hr, hi) = (h[o], h[o + 1]);
                            out[o] = dr * hr - di * hi;
                            out[o + 1] = dr * hi + di * hr;
                        }
                    }
                    like(*y, out)
                });
            }
            Op::FrobeniusMse { pred, target } => {
                let batch = T::from_usize(self.shape(*pred)[0]).unwrap();
                let scale = d[0] * T::from_f64_lossy(2.0) / batch;
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                self.accumulate(grads, *pred, || {
                    like(*pred, p.iter().zip(t).map(|(&a, &b)| (a - b) * scale).collect())
                });
                self.accumulate(grads, *target, || {
                    like(*target, p.iter().zip(t).map(|(&a, &b)| (b - a) * scale).collect())
                });
            }
        }
    }
}
