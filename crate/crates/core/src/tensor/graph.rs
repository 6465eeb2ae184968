//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs are
//! earlier nodes, so insertion order is a topological order and the backward
//! pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::label::ClassId;

use super::kernels::{self, BilinearTaps, ConvGeom};
use super::Tensor;

/// Handle to a node of a [`Graph`].
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
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, cols: Vec<f64> },
    AddBias { input: Var, bias: Var },
    Relu { input: Var },
    Bilinear { input: Var, rows: BilinearTaps, cols: BilinearTaps },
    CrossEntropy { logits: Var, labels: Vec<ClassId>, ignore: ClassId, probs: Vec<f64>, counted: usize },
    SquaredError { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Mul { a: Var, b: Var },
    Sum { input: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input tensor. Its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a trainable input (sets `requires_grad`).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.requiring_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input), self.value(kernel), stride, padding)?;
        let keep = self.nodes[kernel.0].needs_grad;
        let (out, cols) = kernels::conv2d_forward(self.value(input), self.value(kernel), &geom, keep);
        self.push(Op::Conv2d { input, kernel, geom, cols }, out, &[input, kernel])
    }

    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = kernels::add_channel_bias(self.value(input), self.value(bias))?;
        self.push(Op::AddBias { input, bias }, out, &[input, bias])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = kernels::relu(self.value(input));
        self.push(Op::Relu { input }, out, &[input])
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize target must be at least 1x1"));
        }
        let rows = BilinearTaps::new(h, out_h);
        let cols = BilinearTaps::new(w, out_w);
        let out = kernels::bilinear_planes(self.value(input), &rows, &cols)?;
        self.push(Op::Bilinear { input, rows, cols }, out, &[input])
    }

    /// Mean pixel-wise softmax cross-entropy; `labels` is `[N, H, W]` flat.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[ClassId], ignore: ClassId) -> Result<Var> {
        let ce = kernels::cross_entropy_forward(self.value(logits), labels, ignore)?;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), ignore, probs: ce.probs, counted: ce.counted };
        self.push(op, Tensor::scalar(ce.loss), &[logits])
    }

    /// Mean over positions of the squared channel-vector distance.
    pub fn sum_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = kernels::sum_squared_error(self.value(a), self.value(b))?;
        self.push(Op::SquaredError { a, b }, Tensor::scalar(loss), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!("add of {:?} and {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(Op::Add { a, b }, out, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        self.push(Op::Scale { input, factor }, out, &[input])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!("mul of {:?} and {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(Op::Mul { a, b }, out, &[a, b])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().sum();
        self.push(Op::Sum { input }, Tensor::scalar(total), &[input])
    }

    /// Accumulates `d loss / d t` into every `requires_grad` tensor that
    /// `loss` depends on. Gradients add up across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!("backward from non-scalar {:?}", self.value(loss).shape())));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if node.value.requires_grad() {
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom, cols } => {
                let (k, l) = (geom.patch(), geom.positions());
                let x = self.value(*input).data();
                let w = self.value(*kernel).data();
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; geom.cout * k];
                    for n in 0..geom.n {
                        let dout = &g[n * geom.cout * l..(n + 1) * geom.cout * l];
                        let patches = if geom.is_pointwise() {
                            &x[n * geom.in_plane()..(n + 1) * geom.in_plane()]
                        } else {
                            &cols[n * k * l..(n + 1) * k * l]
                        };
                        kernels::gemm(geom.cout, l, k, dout, false, patches, true, &mut dk, n > 0);
                    }
                    accumulate(adj, *kernel, dk);
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; x.len()];
                    let mut dcols = vec![0.0; k * l];
                    for n in 0..geom.n {
                        let dout = &g[n * geom.cout * l..(n + 1) * geom.cout * l];
                        let dimg = &mut dx[n * geom.in_plane()..(n + 1) * geom.in_plane()];
                        if geom.is_pointwise() {
                            kernels::gemm(k, geom.cout, l, w, true, dout, false, dimg, false);
                        } else {
                            kernels::gemm(k, geom.cout, l, w, true, dout, false, &mut dcols, false);
                            kernels::col2im(geom, &dcols, dimg);
                        }
                    }
                    accumulate(adj, *input, dx);
                }
            }
            Op::AddBias { input, bias } => {
                if self.wants(*bias) {
                    let (_, c, h, w) = node.value.dims4().expect("rank 4");
                    let mut db = vec![0.0; c];
                    for (j, chunk) in g.chunks(h * w).enumerate() {
                        db[j % c] += chunk.iter().sum::<f64>();
                    }
                    accumulate(adj, *bias, db);
                }
                if self.wants(*input) {
                    accumulate(adj, *input, g.to_vec());
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = g.iter().zip(x).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect();
                accumulate(adj, *input, dx);
            }
            Op::Bilinear { input, rows, cols } => {
                let (_, _, h, w) = self.value(*input).dims4().expect("rank 4");
                let (oh, ow) = (rows.lo.len(), cols.lo.len());
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (plane, gout) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for y in 0..oh {
                        let (r0, r1, wy) = (rows.lo[y] * w, rows.hi[y] * w, rows.w_hi[y]);
                        for x in 0..ow {
                            let (c0, c1, wx) = (cols.lo[x], cols.hi[x], cols.w_hi[x]);
                            let v = gout[y * ow + x];
                            plane[r0 + c0] += v * (1.0 - wy) * (1.0 - wx);
                            plane[r0 + c1] += v * (1.0 - wy) * wx;
                            plane[r1 + c0] += v * wy * (1.0 - wx);
                            plane[r1 + c1] += v * wy * wx;
                        }
                    }
                }
                accumulate(adj, *input, dx);
            }
            Op::CrossEntropy { logits, labels, ignore, probs, counted } => {
                let (n, c, h, w) = self.value(*logits).dims4().expect("rank 4");
                let plane = h * w;
                let scale = g[0] / *counted as f64;
                let mut dx = vec![0.0; probs.len()];
                for i in 0..n {
                    for p in 0..plane {
                        let label = labels[i * plane + p];
                        if label == *ignore {
                            continue;
                        }
                        let base = i * c * plane + p;
                        for k in 0..c {
                            let target = if k == label as usize { 1.0 } else { 0.0 };
                            dx[base + k * plane] = (probs[base + k * plane] - target) * scale;
                        }
                    }
                }
                accumulate(adj, *logits, dx);
            }
            Op::SquaredError { a, b } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g[0] / kernels::sse_positions(x.shape()) as f64;
                let da: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * scale).collect();
                if self.wants(*b) {
                    accumulate(adj, *b, da.iter().map(|v| -v).collect());
                }
                if self.wants(*a) {
                    accumulate(adj, *a, da);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Scale { input, factor } => {
                accumulate(adj, *input, g.iter().map(|v| v * factor).collect());
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(adj, *a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.iter().zip(x).map(|(gi, xi)| gi * xi).collect());
                }
            }
            Op::Sum { input } => {
                accumulate(adj, *input, vec![g[0]; self.value(*input).numel()]);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::AddBias { .. } => "add_bias",
        Op::Relu { .. } => "relu",
        Op::Bilinear { .. } => "bilinear_resize",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::SquaredError { .. } => "sum_squared_error",
        Op::Add { .. } => "add",
        Op::Scale { .. } => "scale",
        Op::Mul { .. } => "mul",
        Op::Sum { .. } => "sum",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_weighted_sum_is_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.param(Tensor::new(vec![3], vec![0.3, 0.1, 4.0]).unwrap());
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, -2.0, 0.5]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn relu_gradient_masks_nonpositive() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let s = g.scale(x, 2.0).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_values_are_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![f64::MAX]).unwrap());
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }
}
