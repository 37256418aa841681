//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in evaluation order, so parents always precede children and a
//! single reverse sweep over the tape is a valid topological order.

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, conv, norm, pool, sample, shape};
use crate::ops::norm::{BatchNormSaved, NormMode, RunningStats};
use crate::tensor::{lit, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Conv {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    ConvT {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    AffineGrid(Var),
    GridSample {
        input: Var,
        grid: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Tile0 {
        x: Var,
        times: usize,
    },
    CyclicShift {
        x: Var,
        axis: usize,
        offset: isize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Rot90 {
        x: Var,
        quarter_turns: usize,
    },
    Matmul(Var, Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
        mode: NormMode,
    },
    Sum(Var),
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Silu(x)
            | Op::AffineGrid(x)
            | Op::GlobalAvgPool(x)
            | Op::Reshape(x)
            | Op::Sum(x) => vec![*x],
            Op::ChannelBias { x, bias } => vec![*x, *bias],
            Op::Conv { x, w, .. } | Op::ConvT { x, w, .. } => vec![*x, *w],
            Op::GridSample { input, grid } => vec![*input, *grid],
            Op::MaxPool { x, .. }
            | Op::Narrow { x, .. }
            | Op::Tile0 { x, .. }
            | Op::CyclicShift { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Rot90 { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
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

    /// Leaf node; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::silu);
        self.push(v, Op::Silu(x))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = *xs.shape().get(1).ok_or_else(|| shape_err("channel_bias", "rank < 2"))?;
        if self.shape(bias) != [c] {
            return Err(shape_err(
                "channel_bias",
                format!("bias {:?} for {c} channels", self.shape(bias)),
            ));
        }
        let inner: usize = xs.shape()[2..].iter().product();
        let bd = self.value(bias).data();
        let mut out = xs.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[(i / inner) % c];
        }
        Ok(self.push(out, Op::ChannelBias { x, bias }))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let v = conv::conv2d(self.value(x), self.value(w), stride, padding, groups)?;
        Ok(self.push(
            v,
            Op::Conv {
                x,
                w,
                stride,
                padding,
                groups,
            },
        ))
    }

    pub fn conv2d_transposed(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let v = conv::conv2d_transposed(self.value(x), self.value(w), stride, padding, groups)?;
        Ok(self.push(
            v,
            Op::ConvT {
                x,
                w,
                stride,
                padding,
                groups,
            },
        ))
    }

    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        let v = sample::affine_grid(self.value(theta), h, w)?;
        Ok(self.push(v, Op::AffineGrid(theta)))
    }

    pub fn grid_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let v = sample::grid_sample(self.value(input), self.value(grid))?;
        Ok(self.push(v, Op::GridSample { input, grid }))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (v, argmax) = pool::max_pool2d(self.value(x), kernel, stride, padding)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = pool::global_avg_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let v = shape::concat(&vals, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = shape::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }))
    }

    /// Tile along the leading axis: `(a, ...) -> (times·a, ...)`.
    pub fn tile0(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(crate::error::invalid("tile0", "times must be positive"));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(src.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(src.data());
        }
        let mut s = src.shape().to_vec();
        s[0] *= times;
        let v = Tensor::new(&s, data)?;
        Ok(self.push(v, Op::Tile0 { x, times }))
    }

    pub fn cyclic_shift(&mut self, x: Var, axis: usize, offset: isize) -> Result<Var> {
        let v = shape::cyclic_shift(self.value(x), axis, offset)?;
        Ok(self.push(v, Op::CyclicShift { x, axis, offset }))
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (v, argmax) = shape::max_axis(self.value(x), axis)?;
        Ok(self.push(v, Op::MaxAxis { x, argmax }))
    }

    pub fn rot90(&mut self, x: Var, quarter_turns: usize) -> Result<Var> {
        let v = shape::rot90(self.value(x), quarter_turns)?;
        Ok(self.push(v, Op::Rot90 { x, quarter_turns }))
    }

    /// `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} · {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), k, 1, bv.data(), n, 1, T::zero(), &mut out, n, 1);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Per-channel batch norm; in train mode also returns the batch mean and
    /// unbiased variance for the caller's running-stat update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&RunningStats<T>>,
        mode: NormMode,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let (v, saved) = norm::batch_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running,
            mode,
        )?;
        let stats = match (&saved.batch_mean, &saved.batch_var_unbiased) {
            (Some(m), Some(s)) => Some((m.clone(), s.clone())),
            _ => None,
        };
        let out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                mode,
            },
        );
        Ok((out, stats))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                if node.requires_grad {
                    match node.grad.as_mut() {
                        Some(acc) => acc.add_assign(&g)?,
                        None => node.grad = Some(g),
                    }
                }
                continue;
            }
            for (parent, pg) in self.node_backward(idx, &g)? {
                assert!(parent.0 < idx, "tape order violated: {} -> {idx}", parent.0);
                match grads[parent.0].as_mut() {
                    Some(acc) => acc.add_assign(&pg)?,
                    None => grads[parent.0] = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.scale(-T::one())));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                }
                if self.wants(*b) {
                    out.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.scale(*s))),
            Op::Silu(x) => {
                out.push((*x, g.zip_map(self.value(*x), |gv, xv| gv * ops::silu_grad(xv))?));
            }
            Op::ChannelBias { x, bias } => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*bias) {
                    let c = self.shape(*bias)[0];
                    let inner: usize = g.shape()[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, &v) in g.data().iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                    out.push((*bias, Tensor::new(&[c], db)?));
                }
            }
            Op::Conv {
                x,
                w,
                stride,
                padding,
                groups,
            } => {
                let (dx, dw) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *padding,
                    *groups,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::ConvT {
                x,
                w,
                stride,
                padding,
                groups,
            } => {
                let (dx, dw) = conv::conv2d_transposed_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *padding,
                    *groups,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::AffineGrid(theta) => out.push((*theta, sample::affine_grid_backward(g)?)),
            Op::GridSample { input, grid } => {
                let (di, dg) = sample::grid_sample_backward(
                    self.value(*input),
                    self.value(*grid),
                    g,
                    self.wants(*input),
                    self.wants(*grid),
                )?;
                out.extend(di.map(|d| (*input, d)));
                out.extend(dg.map(|d| (*grid, d)));
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, pool::max_pool2d_backward(self.shape(*x), argmax, g)?));
            }
            Op::GlobalAvgPool(x) => {
                out.push((*x, pool::global_avg_pool_backward(self.shape(*x), g)?));
            }
            Op::Concat { inputs, axis } => {
                let sizes: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[*axis]).collect();
                let parts = shape::concat_backward(g, &sizes, *axis)?;
                for (&v, p) in inputs.iter().zip(parts) {
                    if self.wants(v) {
                        out.push((v, p));
                    }
                }
            }
            Op::Reshape(x) => out.push((*x, g.reshape(self.shape(*x))?)),
            Op::Narrow { x, axis, start } => {
                out.push((*x, shape::narrow_backward(g, self.shape(*x), *axis, *start)?));
            }
            Op::Tile0 { x, times } => {
                let n = self.value(*x).numel();
                let mut acc = vec![T::zero(); n];
                for t in 0..*times {
                    for (a, &v) in acc.iter_mut().zip(&g.data()[t * n..(t + 1) * n]) {
                        *a += v;
                    }
                }
                out.push((*x, Tensor::new(self.shape(*x), acc)?));
            }
            Op::CyclicShift { x, axis, offset } => {
                out.push((*x, shape::cyclic_shift(g, *axis, -*offset)?));
            }
            Op::MaxAxis { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&i, &v) in argmax.iter().zip(g.data()) {
                    d[i] += v;
                }
                out.push((*x, dx));
            }
            Op::Rot90 { x, quarter_turns } => {
                out.push((*x, shape::rot90(g, (4 - quarter_turns % 4) % 4)?));
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), n, 1, bv.data(), 1, n, T::zero(), &mut da, k, 1);
                    out.push((*a, Tensor::new(&[m, k], da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av.data(), 1, k, g.data(), n, 1, T::zero(), &mut db, n, 1);
                    out.push((*b, Tensor::new(&[k, n], db)?));
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g.item() / lit::<T>(labels.len() as f64);
                let mut d = probs.clone();
                for (n, &label) in labels.iter().enumerate() {
                    d[n * k + label] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, Tensor::new(self.shape(*logits), d)?));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                mode,
            } => {
                let (dx, dg, db) = norm::batch_norm_backward(g, self.value(*gamma), saved, *mode)?;
                if self.wants(*x) {
                    out.push((*x, dx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, dg));
                }
                if self.wants(*beta) {
                    out.push((*beta, db));
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), g.item()))),
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let x = g.param(Tensor::full(&[2], 2.0));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn uniform_logits_cost_ln_classes() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::zeros(&[3, 10]));
        let l = g.softmax_cross_entropy(z, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
        assert!(g.softmax_cross_entropy(z, &[0, 4, 10]).is_err());
    }
}
