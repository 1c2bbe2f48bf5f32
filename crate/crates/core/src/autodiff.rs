//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; each op evaluates eagerly,
//! stores what its gradient rule needs, and returns a [`Var`] handle.
//! [`Graph::backward`] walks the tape once in reverse insertion order.
//!
//! A node requires a gradient iff one of its inputs does. Ops whose output
//! does not require a gradient save nothing, so forward passes over
//! constant-bound parameters cost no extra memory. [`Graph::stop_gradient`]
//! produces a node that never requires a gradient, which blocks every path
//! through it.

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{dot_f64, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type ElemFn<T> = Box<dyn Fn(T) -> T + Send + Sync>;

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        channels: usize,
        spatial: usize,
    },
    Relu(Var),
    AvgPool2d(Var, usize),
    Upsample2x(Var),
    Linear(Var, Var, Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Dot(Var, Var),
    Norm2(Var),
    Sum(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeRows(Var, Vec<f64>, f64),
    StopGradient,
    Elementwise(Var, ElemFn<T>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Debug)]
pub enum BnStats<'a> {
    /// Statistics of the current batch (train mode).
    Batch { eps: f64 },
    /// Stored running statistics (eval mode).
    Running {
        mean: &'a [f32],
        var: &'a [f32],
        eps: f64,
    },
}

/// Per-channel batch statistics observed by a train-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values per channel.
    pub count: usize,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node that requires one. Leaves that require a gradient
    /// but were unreached (or blocked) hold zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf node. Trainable parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).div(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).add_scalar(s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(invalid(
                "conv2d",
                "kernel larger than padded input or zero stride",
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &[ws[0]]));
            }
        }
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let batch = xs[0];
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            batch,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[batch, geom.cout, geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cols,
            },
            rg,
        ))
    }

    /// Batch normalization over channel axis 1 of a `[N,C]` or `[N,C,H,W]`
    /// input. In batch-statistics mode the observed moments are returned so
    /// the caller can update its running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(invalid(
                "batchnorm",
                format!("expected rank 2 or 4, got {xs:?}"),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batchnorm", &xs, self.shape(gamma)));
        }
        let (mean, var, eps, batch_stats) = match stats {
            BnStats::Batch { eps } => {
                if n < 2 {
                    return Err(invalid(
                        "batchnorm",
                        "batch statistics need batch size >= 2",
                    ));
                }
                let (m, v) = kernels::channel_stats(self.value(x).data(), n, c, spatial);
                (m, v, eps, true)
            }
            BnStats::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(invalid("batchnorm", "running statistics length mismatch"));
                }
                (
                    mean.iter().map(|&v| v as f64).collect(),
                    var.iter().map(|&v| v as f64).collect(),
                    eps,
                    false,
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                let (mu, is) = (mean[ch], inv_std[ch]);
                let (g, be) = (gd[ch].as_f64(), bd[ch].as_f64());
                for i in off..off + spatial {
                    let h = (xd[i].as_f64() - mu) * is;
                    xhat[i] = T::from_f64(h);
                    out[i] = T::from_f64(g * h + be);
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(&xs, out)?;
        let moments = batch_stats.then(|| BatchMoments {
            mean: mean.clone(),
            var: var.clone(),
            count: n * spatial,
        });
        let (xhat, inv_std) = if rg {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels: c,
                spatial,
            },
            rg,
        );
        Ok((v, moments))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Average pooling with a `k x k` window and stride `k` on `[N,C,H,W]`.
    pub fn avgpool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(invalid(
                "avgpool2d",
                format!("window {k} does not tile {s:?}"),
            ));
        }
        let out = kernels::avgpool_forward(self.value(a).data(), s[0] * s[1], s[2], s[3], k);
        let v = Tensor::new(&[s[0], s[1], s[2] / k, s[3] / k], out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::AvgPool2d(a, k), rg))
    }

    /// Global average pool `[N,C,H,W] -> [N,C]`.
    pub fn global_avgpool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] != s[3] {
            return Err(invalid(
                "global_avgpool",
                format!("square [N,C,H,W] required, got {s:?}"),
            ));
        }
        let p = self.avgpool2d(a, s[2])?;
        self.reshape(p, &[s[0], s[1]])
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(invalid("upsample2x", format!("rank 4 required, got {s:?}")));
        }
        let out = kernels::upsample2x_forward(self.value(a).data(), s[0] * s[1], s[2], s[3]);
        let v = Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Upsample2x(a), rg))
    }

    /// `x[n,in] * w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(b) != [ws[1]] {
            return Err(mismatch("linear", &xs, &ws));
        }
        let mut out = self.value(x).matmul(self.value(w))?;
        let bd = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(ws[1]) {
            for (o, &bv) in row.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear(x, w, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(a, &[n, rest.max(1)])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Inner product of two equally sized tensors, as a `[1]` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Dot(a, b), rg))
    }

    pub fn norm2(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).norm2());
        let rg = self.rg(a);
        self.push(v, Op::Norm2(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(v, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// `max(a, lo)`; gradient passes only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo));
        let rg = self.rg(a);
        self.push(v, Op::ClampMin(a, lo), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().expect("rank >= 1");
        let v = Tensor::new(t.shape(), kernels::softmax_rows(t.data(), cols)).expect("same shape");
        let rg = self.rg(a);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().expect("rank >= 1");
        let v =
            Tensor::new(t.shape(), kernels::log_softmax_rows(t.data(), cols)).expect("same shape");
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmax(a), rg)
    }

    /// Each row over the last axis divided by `max(||row||, floor)`.
    pub fn normalize_rows(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().expect("rank >= 1");
        let norms: Vec<f64> = t
            .data()
            .chunks_exact(cols)
            .map(|r| dot_f64(r, r).sqrt().max(floor))
            .collect();
        let mut out = t.data().to_vec();
        for (r, &n) in out.chunks_exact_mut(cols).zip(&norms) {
            for v in r {
                *v = T::from_f64(v.as_f64() / n);
            }
        }
        let v = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(v, Op::NormalizeRows(a, norms, floor), rg)
    }

    /// Identity in the forward pass; blocks every gradient path through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Elementwise `f` with a caller-supplied derivative `df`. Used for
    /// one-off functions and for fault injection in gradient checks.
    pub fn elementwise(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + Send + Sync + 'static,
    ) -> Var {
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(v, Op::Elementwise(a, Box::new(df)), rg)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(ls, T::one())?);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(node.value.zeros_like());
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor<T>| {
            if self.rg(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.mul(val(*b))?);
                }
                if self.rg(*b) {
                    send(*b, g.mul(val(*a))?);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.rg(*a) {
                    send(*a, g.div(bv)?);
                }
                if self.rg(*b) {
                    let av = val(*a);
                    let d = g.mul(av)?.zip_map(bv, "div", |n, d| -n / (d * d))?;
                    send(*b, d);
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_abt(m, n, k, g.data(), bv.data(), &mut da);
                    send(*a, Tensor::new(&[m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_atb(m, k, n, av.data(), g.data(), &mut db);
                    send(*b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cols,
            } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg =
                    kernels::conv2d_backward(geom, *batch, cols, val(*w).data(), g.data(), need);
                if let Some(dx) = cg.dx {
                    send(*x, Tensor::new(val(*x).shape(), dx)?);
                }
                if let Some(dw) = cg.dw {
                    send(*w, Tensor::new(val(*w).shape(), dw)?);
                }
                if let (Some(db), Some(b)) = (cg.db, b) {
                    send(*b, Tensor::new(&[geom.cout], db)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels,
                spatial,
            } => {
                let (c, sp) = (*channels, *spatial);
                let n = g.len() / (c * sp);
                let gd = g.data();
                let mut sum_dy = vec![0f64; c];
                let mut sum_dy_xhat = vec![0f64; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * sp;
                        for i in off..off + sp {
                            let dy = gd[i].as_f64();
                            sum_dy[ch] += dy;
                            sum_dy_xhat[ch] += dy * xhat[i].as_f64();
                        }
                    }
                }
                if self.rg(*gamma) {
                    send(
                        *gamma,
                        Tensor::new(&[c], sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect())?,
                    );
                }
                if self.rg(*beta) {
                    send(
                        *beta,
                        Tensor::new(&[c], sum_dy.iter().map(|&v| T::from_f64(v)).collect())?,
                    );
                }
                if self.rg(*x) {
                    let gam = val(*gamma).data();
                    let m = (n * sp) as f64;
                    let mut dx = vec![T::zero(); gd.len()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * sp;
                            let scale = gam[ch].as_f64() * inv_std[ch];
                            for i in off..off + sp {
                                let dy = gd[i].as_f64();
                                dx[i] = T::from_f64(if *batch_stats {
                                    scale
                                        * (dy
                                            - sum_dy[ch] / m
                                            - xhat[i].as_f64() * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * dy
                                });
                            }
                        }
                    }
                    send(*x, Tensor::new(val(*x).shape(), dx)?);
                }
            }
            Op::Relu(a) => {
                let d = g.zip_map(
                    val(*a),
                    "relu",
                    |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                )?;
                send(*a, d);
            }
            Op::AvgPool2d(a, k) => {
                let s = val(*a).shape();
                let dx = kernels::avgpool_backward(g.data(), s[0] * s[1], s[2], s[3], *k);
                send(*a, Tensor::new(s, dx)?);
            }
            Op::Upsample2x(a) => {
                let s = val(*a).shape();
                let dx = kernels::upsample2x_backward(g.data(), s[0] * s[1], s[2], s[3]);
                send(*a, Tensor::new(s, dx)?);
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    kernels::gemm_abt(n, o, i, g.data(), wv.data(), &mut dx);
                    send(*x, Tensor::new(&[n, i], dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); i * o];
                    kernels::gemm_atb(n, i, o, xv.data(), g.data(), &mut dw);
                    send(*w, Tensor::new(&[i, o], dw)?);
                }
                if self.rg(*b) {
                    send(*b, g.sum_axis(0)?);
                }
            }
            Op::Reshape(a) => send(*a, g.clone().reshape(val(*a).shape())?),
            Op::Concat(parts, axis) => {
                let s = g.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let blk = ps[*axis] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * blk);
                        for o in 0..outer {
                            d.extend_from_slice(
                                &g.data()[o * total + offset..o * total + offset + blk],
                            );
                        }
                        send(p, Tensor::new(ps, d)?);
                    }
                    offset += blk;
                }
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                if self.rg(*a) {
                    send(*a, val(*b).scale(gv));
                }
                if self.rg(*b) {
                    send(*b, val(*a).scale(gv));
                }
            }
            Op::Norm2(a) => {
                let nv = node.value.item();
                let d = if nv > T::zero() {
                    val(*a).scale(g.item() / nv)
                } else {
                    val(*a).zeros_like()
                };
                send(*a, d);
            }
            Op::Sum(a) => {
                send(*a, Tensor::full(val(*a).shape(), g.item())?);
            }
            Op::Log(a) => send(*a, g.div(val(*a))?),
            Op::Exp(a) => send(*a, g.mul(&node.value)?),
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                let d = g.zip_map(
                    val(*a),
                    "clamp_min",
                    |gv, xv| if xv > lo { gv } else { T::zero() },
                )?;
                send(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = *y.shape().last().expect("rank >= 1");
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(cols)
                    .zip(g.data().chunks_exact(cols))
                    .zip(dx.chunks_exact_mut(cols))
                {
                    let s = dot_f64(yr, gr);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = T::from_f64(yv.as_f64() * (gv.as_f64() - s));
                    }
                }
                send(*a, Tensor::new(y.shape(), dx)?);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let cols = *y.shape().last().expect("rank >= 1");
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(cols)
                    .zip(g.data().chunks_exact(cols))
                    .zip(dx.chunks_exact_mut(cols))
                {
                    let s: f64 = gr.iter().map(|v| v.as_f64()).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = T::from_f64(gv.as_f64() - yv.as_f64().exp() * s);
                    }
                }
                send(*a, Tensor::new(y.shape(), dx)?);
            }
            Op::NormalizeRows(a, norms, floor) => {
                let y = &node.value;
                let cols = *y.shape().last().expect("rank >= 1");
                let mut dx = vec![T::zero(); y.len()];
                for (((yr, gr), dr), &n) in y
                    .data()
                    .chunks_exact(cols)
                    .zip(g.data().chunks_exact(cols))
                    .zip(dx.chunks_exact_mut(cols))
                    .zip(norms)
                {
                    // Inside the floor the op is a plain scale.
                    let s = if n > *floor { dot_f64(yr, gr) } else { 0.0 };
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = T::from_f64((gv.as_f64() - yv.as_f64() * s) / n);
                    }
                }
                send(*a, Tensor::new(y.shape(), dx)?);
            }
            Op::Elementwise(a, df) => {
                let d = g.zip_map(val(*a), "elementwise", |gv, xv| gv * df(xv))?;
                send(*a, d);
            }
        }
        Ok(())
    }
}

/// Plain or momentum SGD over named parameters.
///
/// `p <- p - lr * v`, with `v <- momentum * v + g + weight_decay * p`
/// (`v = g + weight_decay * p` when momentum is zero).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: std::collections::BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Default::default(),
        }
    }

    /// Plain SGD.
    pub fn plain(lr: f32) -> Self {
        Self::new(lr, 0.0, 0.0)
    }

    /// Applies one update to a single parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(mismatch("sgd_step", param.shape(), grad.shape()));
        }
        let mut step = grad.clone();
        if self.weight_decay != 0.0 {
            step.axpy(self.weight_decay, param)?;
        }
        if self.momentum != 0.0 {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| param.zeros_like());
            for (vv, &s) in v.data_mut().iter_mut().zip(step.data()) {
                *vv = self.momentum * *vv + s;
            }
            step = v.clone();
        }
        param.axpy(-self.lr, &step)
    }
}

/// `p <- p - lr * g` for every `(param, grad, frozen)` triple; frozen
/// parameters are left untouched.
pub fn sgd_step(params: &mut [(&mut Tensor, &Tensor, bool)], lr: f32) -> Result<()> {
    for (p, g, frozen) in params.iter_mut() {
        if p.shape() != g.shape() {
            return Err(mismatch("sgd_step", p.shape(), g.shape()));
        }
        if !*frozen {
            p.axpy(-lr, g)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(g: &mut Graph<f64>, d: &[f64], rg: bool) -> Var {
        g.leaf(Tensor::from_vec(d.to_vec()).unwrap(), rg)
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::<f64>::new();
        let a = v(&mut g, &[-1.0, 2.0], false);
        let r = g.relu(a);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let one = v(&mut g, &[1.0], false);
        let l = g.log(one);
        assert_eq!(g.value(l).data(), &[0.0]);
        let z = v(&mut g, &[0.0, 0.0], false);
        let s = g.softmax(z);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn stop_gradient_product_rule() {
        let mut g = Graph::<f64>::new();
        let x = v(&mut g, &[2.0], true);
        let sx = g.stop_gradient(x);
        assert!(g.value(sx).bitwise_eq(g.value(x)));
        let y = g.mul(sx, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[2.0]);

        let mut g = Graph::<f64>::new();
        let x = v(&mut g, &[2.0], true);
        let sx = g.stop_gradient(x);
        let l = g.sum(sx);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let w = v(&mut g, &[1.0, 2.0], true);
        let x = v(&mut g, &[3.0, 4.0], false);
        let l = g.dot(w, x).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(w).unwrap().data(), &[3.0, 4.0]);
        assert!(gr.get(x).is_none());

        let mut g = Graph::<f64>::new();
        let w = v(&mut g, &[1.0, -2.0], true);
        let l = g.dot(w, w).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(w).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let w = v(&mut g, &[1.0, 2.0], true);
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::from_vec(vec![1.0f32]).unwrap();
        let gr = Tensor::from_vec(vec![0.5f32]).unwrap();
        sgd_step(&mut [(&mut p, &gr, false)], 0.1).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-7);
        let before = p.clone();
        sgd_step(&mut [(&mut p, &gr, false)], 0.0).unwrap();
        assert!(p.bitwise_eq(&before));
        sgd_step(&mut [(&mut p, &gr, true)], 0.1).unwrap();
        assert!(p.bitwise_eq(&before));
        let bad = Tensor::from_vec(vec![0.5f32, 1.0]).unwrap();
        assert!(sgd_step(&mut [(&mut p, &bad, false)], 0.1).is_err());
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(1.0, 0.5, 0.0);
        let mut p = Tensor::from_vec(vec![0.0f32]).unwrap();
        let g = Tensor::from_vec(vec![1.0f32]).unwrap();
        opt.update("p", &mut p, &g).unwrap();
        opt.update("p", &mut p, &g).unwrap();
        assert_eq!(p.data(), &[-2.5]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = v(&mut g, &[3.0], true);
        let a = g.scale(x, 2.0);
        let b = g.add(a, x).unwrap();
        let l = g.sum(b);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn unreached_leaf_gets_zeros() {
        let mut g = Graph::<f64>::new();
        let x = v(&mut g, &[3.0, 1.0], true);
        let y = v(&mut g, &[1.0], true);
        let l = g.sum(y);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[0.0, 0.0]);
    }
}
