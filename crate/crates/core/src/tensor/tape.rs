use super::{ensure_finite, gemm, Layout, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, tb: Layout },
    BatchMatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `b`'s shape is a suffix of `a`'s; `b` repeats over the leading axes.
    AddBroadcast { a: usize, b: usize },
    Scale { a: usize, c: f32 },
    MulConst { a: usize, factor: Vec<f32> },
    Relu { a: usize },
    Gelu { a: usize },
    Softmax { a: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    StopGradient,
    StraightThrough { a: usize },
    Conv2d { x: usize, w: usize },
    MaxPool2d { a: usize, argmax: Vec<usize> },
    LayerNorm { a: usize, scale: usize, shift: usize, xhat: Vec<f32>, rstd: Vec<f32> },
    Sum { a: usize },
    Mean { a: usize },
    CrossEntropy { pred: usize, target: Vec<f32>, eps: f32 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Every op evaluates eagerly, appends one node, and fails with
/// [`Error::NonFinite`] if its output holds a NaN or infinity. Nodes are only
/// ever appended, so inputs always precede their consumers. A tape supports a
/// single [`Tape::backward`] call; gradients are kept for leaves.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_finite("leaf", value.data())?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        ensure_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(op_name, a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul", a, b, Layout::N)
    }

    /// `a[m×k] · b[n×k]ᵀ`, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul_nt", a, b, Layout::T)
    }

    fn matmul_impl(&mut self, name: &'static str, a: Var, b: Var, tb: Layout) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = match tb {
            Layout::N => (sb[0], sb[1]),
            Layout::T => (sb[1], sb[0]),
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::N, self.value(b).data(), tb, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        self.record(name, value, Op::MatMul { a: a.0, b: b.0, tb }, &[a.0, b.0])
    }

    /// Matrix product over the last two axes, with identical leading axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (x, y) = (self.value(a).data(), self.value(b).data());
        for p in 0..batch {
            gemm(
                m,
                k,
                n,
                &x[p * m * k..(p + 1) * m * k],
                Layout::N,
                &y[p * k * n..(p + 1) * k * n],
                Layout::N,
                &mut out[p * m * n..(p + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.record("batch_matmul", value, Op::BatchMatMul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |p, q| p + q)?;
        self.record("add", v, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |p, q| p - q)?;
        self.record("sub", v, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |p, q| p * q)?;
        self.record("mul", v, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias rows, position tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let x = self.value(a);
        let y = self.value(b).data();
        let inner = y.len().max(1);
        let mut data = x.data().to_vec();
        if !y.is_empty() {
            for chunk in data.chunks_mut(inner) {
                for (d, &bv) in chunk.iter_mut().zip(y) {
                    *d += bv;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.record("add_broadcast", value, Op::AddBroadcast { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        self.record("scale", value, Op::Scale { a: a.0, c }, &[a.0])
    }

    /// Elementwise product with a fixed factor tensor that takes no gradient (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f32>) -> Result<Var> {
        let x = self.value(a);
        if factor.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                lhs: x.shape().to_vec(),
                rhs: vec![factor.len()],
            });
        }
        let data = x.data().iter().zip(&factor).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.record("mul_const", value, Op::MulConst { a: a.0, factor }, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.record("relu", value, Op::Relu { a: a.0 }, &[a.0])
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| 0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2)));
        self.record("gelu", value, Op::Gelu { a: a.0 }, &[a.0])
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = *x.shape().last().ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let mut data = x.data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.record("softmax", value, Op::Softmax { a: a.0 }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.record("reshape", value, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Collapse every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let batch = *shape.first().ok_or_else(|| Error::invalid("flatten of a scalar"))?;
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(a, [batch, rest])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let value = permute_tensor(x, perm)?;
        self.record("permute", value, Op::Permute { a: a.0, perm: perm.to_vec() }, &[a.0])
    }

    /// Identity in value, opaque to gradients.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        ensure_finite("stop_gradient", value.data())?;
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// Takes its value from `value` but routes the incoming gradient to `a` unchanged.
    ///
    /// This is `a + stop_gradient(value - a)` with the forward result snapped to
    /// `value` exactly, rather than to the rounded sum.
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.shape(a) {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(a).to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.record("straight_through", value, Op::StraightThrough { a: a.0 }, &[a.0])
    }

    /// Stride-1 "same" convolution (cross-correlation, no kernel flip).
    ///
    /// `x` is `[batch, height, width, in_ch]`, `w` is `[out_ch, in_ch, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[1] || sw[2] != sw[3] {
            return Err(mismatch());
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv2d: same padding needs an odd kernel, got {k}")));
        }
        let geo = ConvGeometry {
            batch: sx[0],
            h: sx[1],
            w: sx[2],
            cin: sx[3],
            cout: sw[0],
            k,
        };
        let wmat = kernel_to_matrix(self.value(w).data(), &geo);
        let xs = self.value(x).data();
        let hw = geo.h * geo.w;
        let mut out = vec![0.0; geo.batch * hw * geo.cout];
        let mut cols = vec![0.0; hw * geo.patch()];
        for b in 0..geo.batch {
            geo.im2col(&xs[b * geo.sample()..(b + 1) * geo.sample()], &mut cols);
            gemm(
                hw,
                geo.patch(),
                geo.cout,
                &cols,
                Layout::N,
                &wmat,
                Layout::N,
                &mut out[b * hw * geo.cout..(b + 1) * hw * geo.cout],
                false,
            );
        }
        let value = Tensor::new([geo.batch, geo.h, geo.w, geo.cout], out)?;
        self.record("conv2d", value, Op::Conv2d { x: x.0, w: w.0 }, &[x.0, w.0])
    }

    /// Max pooling over `[batch, h, w, ch]`; the gradient goes to the first maximal element.
    pub fn max_pool2d(&mut self, a: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || window == 0 || stride == 0 {
            return Err(Error::invalid(format!("max_pool2d: bad input {s:?} window {window} stride {stride}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % stride != 0 || w % stride != 0 || window > h || window > w {
            return Err(Error::invalid(format!(
                "max_pool2d: spatial dims {h}x{w} not divisible by stride {stride}"
            )));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = ((b * h + oy * stride + dy) * w + ox * stride + dx) * c + ch;
                                if best == usize::MAX || x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new([n, oh, ow, c], out)?;
        self.record("max_pool2d", value, Op::MaxPool2d { a: a.0, argmax }, &[a.0])
    }

    /// Normalize over the last axis, then apply per-feature `scale` and `shift`.
    pub fn layer_norm(&mut self, a: Var, scale: Var, shift: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(a).last().ok_or_else(|| Error::invalid("layer_norm of a scalar"))?;
        if d == 0 {
            return Err(Error::invalid("layer_norm over an empty feature axis"));
        }
        for p in [scale, shift] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(a).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let x = self.value(a);
        let (g, bt) = (self.value(scale).data(), self.value(shift).data());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.record(
            "layer_norm",
            value,
            Op::LayerNorm {
                a: a.0,
                scale: scale.0,
                shift: shift.0,
                xhat,
                rstd,
            },
            &[a.0, scale.0, shift.0],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = x.data().iter().sum::<f32>() / x.len() as f32;
        self.record("mean", Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    /// Mean over rows of `-Σ target · ln(pred + eps)`; `pred` holds probabilities.
    pub fn cross_entropy(&mut self, pred: Var, target: &Tensor, eps: f32) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.rank() != 2 || p.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let rows = p.shape()[0];
        let total: f32 = p
            .data()
            .iter()
            .zip(target.data())
            .filter(|(_, &y)| y != 0.0)
            .map(|(&q, &y)| -y * (q + eps).ln())
            .sum();
        let value = Tensor::scalar(total / rows as f32);
        self.record(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                pred: pred.0,
                target: target.data().to_vec(),
                eps,
            },
            &[pred.0],
        )
    }

    /// Reverse sweep from a scalar `loss`. Leaves that require a gradient receive one
    /// (zeros when the loss does not reach them).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardReentry);
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        self.leaf_grads = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && self.leaf_grads[i].is_none() {
                self.leaf_grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let wants = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, contrib: Vec<f32>| accumulate(grads, nodes, j, contrib);

        match &nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b, tb } => {
                let sa = nodes[*a].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[i].value.shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    // dA = dC · op(B)ᵀ
                    let back = if *tb == Layout::N { Layout::T } else { Layout::N };
                    gemm(m, n, k, g, Layout::N, val(*b), back, &mut da, false);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    match tb {
                        Layout::N => gemm(k, m, n, val(*a), Layout::T, g, Layout::N, &mut db, false),
                        Layout::T => gemm(n, m, k, g, Layout::T, val(*a), Layout::N, &mut db, false),
                    }
                    acc(*b, db);
                }
            }
            Op::BatchMatMul { a, b } => {
                let sa = nodes[*a].value.shape();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = nodes[*b].value.shape()[r - 1];
                let batch: usize = sa[..r - 2].iter().product();
                if wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for p in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[p * m * n..(p + 1) * m * n],
                            Layout::N,
                            &val(*b)[p * k * n..(p + 1) * k * n],
                            Layout::T,
                            &mut da[p * m * k..(p + 1) * m * k],
                            false,
                        );
                    }
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for p in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &val(*a)[p * m * k..(p + 1) * m * k],
                            Layout::T,
                            &g[p * m * n..(p + 1) * m * n],
                            Layout::N,
                            &mut db[p * k * n..(p + 1) * k * n],
                            false,
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(d, y)| d * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(d, x)| d * x).collect());
                }
            }
            Op::AddBroadcast { a, b } => {
                acc(*a, g.to_vec());
                if wants(*b) {
                    let inner = nodes[*b].value.len();
                    let mut db = vec![0.0; inner];
                    if inner > 0 {
                        for chunk in g.chunks(inner) {
                            for (d, v) in db.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Scale { a, c } => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::MulConst { a, factor } => acc(*a, g.iter().zip(factor).map(|(d, f)| d * f).collect()),
            Op::Relu { a } => acc(
                *a,
                g.iter().zip(val(*a)).map(|(&d, &x)| if x > 0.0 { d } else { 0.0 }).collect(),
            ),
            Op::Gelu { a } => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| {
                        let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
                        let pdf = (-0.5 * x * x).exp() * 0.398_942_3;
                        d * (cdf + x * pdf)
                    })
                    .collect(),
            ),
            Op::Softmax { a } => {
                let y = nodes[i].value.data();
                let cols = *nodes[i].value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                if cols > 0 {
                    for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Reshape { a } => acc(*a, g.to_vec()),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(nodes[i].value.shape().to_vec(), g.to_vec())?;
                acc(*a, permute_tensor(&gt, &inverse)?.into_data());
            }
            Op::StraightThrough { a } => acc(*a, g.to_vec()),
            Op::Conv2d { x, w } => {
                let (sx, sw) = (nodes[*x].value.shape(), nodes[*w].value.shape());
                let geo = ConvGeometry {
                    batch: sx[0],
                    h: sx[1],
                    w: sx[2],
                    cin: sx[3],
                    cout: sw[0],
                    k: sw[2],
                };
                let hw = geo.h * geo.w;
                let xs = val(*x);
                let wmat = kernel_to_matrix(val(*w), &geo);
                let mut cols = vec![0.0; hw * geo.patch()];
                let mut dwmat = vec![0.0; geo.patch() * geo.cout];
                let mut dx = if wants(*x) { vec![0.0; xs.len()] } else { Vec::new() };
                for b in 0..geo.batch {
                    let gb = &g[b * hw * geo.cout..(b + 1) * hw * geo.cout];
                    if wants(*w) {
                        geo.im2col(&xs[b * geo.sample()..(b + 1) * geo.sample()], &mut cols);
                        gemm(geo.patch(), hw, geo.cout, &cols, Layout::T, gb, Layout::N, &mut dwmat, true);
                    }
                    if wants(*x) {
                        gemm(hw, geo.cout, geo.patch(), gb, Layout::N, &wmat, Layout::T, &mut cols, false);
                        geo.col2im(&cols, &mut dx[b * geo.sample()..(b + 1) * geo.sample()]);
                    }
                }
                if wants(*w) {
                    acc(*w, matrix_to_kernel(&dwmat, &geo));
                }
                if wants(*x) {
                    acc(*x, dx);
                }
            }
            Op::MaxPool2d { a, argmax } => {
                let mut dx = vec![0.0; nodes[*a].value.len()];
                for (&src, d) in argmax.iter().zip(g) {
                    dx[src] += d;
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                a,
                scale,
                shift,
                xhat,
                rstd,
            } => {
                let gamma = val(*scale);
                let d = gamma.len();
                if wants(*scale) {
                    let mut ds = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            ds[j] += gr[j] * xr[j];
                        }
                    }
                    acc(*scale, ds);
                }
                if wants(*shift) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    acc(*shift, db);
                }
                if wants(*a) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dr, gr), xr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gamma[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= d as f32;
                        mean_dxh_xh /= d as f32;
                        for j in 0..d {
                            let dxh = gr[j] * gamma[j];
                            dr[j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    acc(*a, dx);
                }
            }
            Op::Sum { a } => acc(*a, vec![g[0]; nodes[*a].value.len()]),
            Op::Mean { a } => {
                let n = nodes[*a].value.len();
                acc(*a, vec![g[0] / n as f32; n]);
            }
            Op::CrossEntropy { pred, target, eps } => {
                let p = val(*pred);
                let rows = nodes[*pred].value.shape()[0] as f32;
                acc(
                    *pred,
                    p.iter()
                        .zip(target)
                        .map(|(&q, &y)| if y == 0.0 { 0.0 } else { -g[0] * y / ((q + eps) * rows) })
                        .collect(),
                );
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], nodes: &[Node], j: usize, contrib: Vec<f32>) {
    if !nodes[j].requires_grad {
        return;
    }
    match &mut grads[j] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    let r = shape.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("permute: {perm:?} is not a permutation of {r} axes")));
    }
    let mut in_strides = vec![1usize; r];
    for ax in (0..r.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; r];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

impl ConvGeometry {
    fn sample(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Rows are output pixels, columns are `(dy, dx, c)` taps; out-of-image taps read zero.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let pad = (self.k / 2) as isize;
        let patch = self.patch();
        for y in 0..self.h {
            for xx in 0..self.w {
                let row = &mut cols[(y * self.w + xx) * patch..(y * self.w + xx + 1) * patch];
                for dy in 0..self.k {
                    let sy = y as isize + dy as isize - pad;
                    for dx in 0..self.k {
                        let sx = xx as isize + dx as isize - pad;
                        let dst = &mut row[(dy * self.k + dx) * self.cin..(dy * self.k + dx + 1) * self.cin];
                        if sy < 0 || sx < 0 || sy >= self.h as isize || sx >= self.w as isize {
                            dst.fill(0.0);
                        } else {
                            let s = (sy as usize * self.w + sx as usize) * self.cin;
                            dst.copy_from_slice(&x[s..s + self.cin]);
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let pad = (self.k / 2) as isize;
        let patch = self.patch();
        for y in 0..self.h {
            for xx in 0..self.w {
                let row = &cols[(y * self.w + xx) * patch..(y * self.w + xx + 1) * patch];
                for dy in 0..self.k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= self.h as isize {
                        continue;
                    }
                    for dxk in 0..self.k {
                        let sx = xx as isize + dxk as isize - pad;
                        if sx < 0 || sx >= self.w as isize {
                            continue;
                        }
                        let s = (sy as usize * self.w + sx as usize) * self.cin;
                        let src = &row[(dy * self.k + dxk) * self.cin..(dy * self.k + dxk + 1) * self.cin];
                        for (d, v) in dx[s..s + self.cin].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `[out, in, k, k]` kernel to the `[(dy, dx, in), out]` matrix used with `im2col`.
fn kernel_to_matrix(w: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let mut m = vec![0.0; w.len()];
    for o in 0..g.cout {
        for c in 0..g.cin {
            for dy in 0..g.k {
                for dx in 0..g.k {
                    let src = ((o * g.cin + c) * g.k + dy) * g.k + dx;
                    let row = (dy * g.k + dx) * g.cin + c;
                    m[row * g.cout + o] = w[src];
                }
            }
        }
    }
    m
}

fn matrix_to_kernel(m: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let mut w = vec![0.0; m.len()];
    for o in 0..g.cout {
        for c in 0..g.cin {
            for dy in 0..g.k {
                for dx in 0..g.k {
                    let dst = ((o * g.cin + c) * g.k + dy) * g.k + dx;
                    let row = (dy * g.k + dx) * g.cin + c;
                    w[dst] = m[row * g.cout + o];
                }
            }
        }
    }
    w
}
