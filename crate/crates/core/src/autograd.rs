//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op takes the ids of
//! nodes already on the tape, so the insertion order is a topological order
//! and [`Graph::backward`] is a single reverse sweep.

use rand::Rng;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Index of a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Linear => x,
        }
    }
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeometry },
    Dense { input: NodeId, weights: NodeId, bias: NodeId },
    Activation { input: NodeId, kind: Activation },
    /// `mask` holds the per-element scale (0 or 1/(1-p)); `None` is the identity.
    Dropout { input: NodeId, mask: Option<Vec<T>> },
    Reshape { input: NodeId },
    Mse { pred: NodeId, target: NodeId },
    Bce { pred: NodeId, target: NodeId },
    Sum { input: NodeId },
    Dot { input: NodeId, weights: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::Dense { input, weights, bias } => vec![*input, *weights, *bias],
            Op::Activation { input, .. }
            | Op::Dropout { input, .. }
            | Op::Reshape { input }
            | Op::Sum { input }
            | Op::Dot { input, .. } => vec![*input],
            Op::Mse { pred, target } | Op::Bce { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// The recorded computation.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
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

    /// Puts an input or parameter tensor on the tape.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let needs_grad = tensor.requires_grad();
        self.push(Op::Leaf, tensor, needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.nodes[id.0].value.take_grad()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Replaces the data of a leaf, keeping its shape and recorded grads.
    pub fn set_leaf_data(&mut self, id: NodeId, data: &[T]) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return arg_err("only leaf data can be replaced");
        }
        if node.value.numel() != data.len() {
            return dim_err("replacement data has the wrong length");
        }
        node.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// "Same"-padded convolution. `input` is `[N,H,W,Cin]`, `kernel` is
    /// `[kh,kw,Cin,Cout]`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        if stride < 1 {
            return arg_err("convolution stride must be at least 1");
        }
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        if x.rank() != 4 || k.rank() != 4 {
            return dim_err(format!(
                "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            ));
        }
        let (xs, ks) = (x.shape(), k.shape());
        if xs[3] != ks[2] {
            return dim_err(format!("input has {} channels but kernel expects {}", xs[3], ks[2]));
        }
        if b.shape() != [ks[3]] {
            return dim_err(format!("bias shape {:?} does not match {} output channels", b.shape(), ks[3]));
        }
        let geom = ConvGeometry::new(xs[0], (xs[1], xs[2], xs[3]), (ks[0], ks[1], ks[3]), stride);
        let out = kernels::conv2d_forward(&geom, x.data(), k.data(), b.data());
        let value = Tensor::new(&[geom.batch, geom.out_h, geom.out_w, geom.out_c], out)?;
        let needs = self.needs(&[input, kernel, bias]);
        Ok(self.push(Op::Conv2d { input, kernel, bias, geom }, value, needs))
    }

    /// Fully connected layer: `[N,F] x [F,U] + [U]`.
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weights), self.value(bias));
        if x.rank() != 2 || w.rank() != 2 {
            return dim_err(format!(
                "dense expects rank-2 input and weights, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ));
        }
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let (wf, u) = (w.shape()[0], w.shape()[1]);
        if f != wf {
            return dim_err(format!("input has {f} features but weights expect {wf}"));
        }
        if b.shape() != [u] {
            return dim_err(format!("bias shape {:?} does not match {u} units", b.shape()));
        }
        let out = kernels::dense_forward(n, f, u, x.data(), w.data(), b.data());
        let value = Tensor::new(&[n, u], out)?;
        let needs = self.needs(&[input, weights, bias]);
        Ok(self.push(Op::Dense { input, weights, bias }, value, needs))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> Result<NodeId> {
        let x = self.value(input);
        let data = x.data().iter().map(|v| kind.apply(*v)).collect();
        let value = Tensor::new(x.shape(), data)?;
        let needs = self.needs(&[input]);
        Ok(self.push(Op::Activation { input, kind }, value, needs))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; inference is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, p: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return arg_err(format!("dropout probability {p} outside [0, 1)"));
        }
        let x = self.value(input);
        let (value, mask) = match mode {
            Mode::Inference => (Tensor::new(x.shape(), x.data().to_vec())?, None),
            Mode::Train => {
                let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
                let mask: Vec<T> = (0..x.numel())
                    .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep_scale })
                    .collect();
                let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
                (Tensor::new(x.shape(), data)?, Some(mask))
            }
        };
        let needs = self.needs(&[input]);
        Ok(self.push(Op::Dropout { input, mask }, value, needs))
    }

    /// `[N,H,W,C] -> [N, H*W*C]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 4 {
            return dim_err(format!("flatten expects a rank-4 tensor, got {:?}", x.shape()));
        }
        let s = x.shape();
        let value = Tensor::new(&[s[0], s[1] * s[2] * s[3]], x.data().to_vec())?;
        let needs = self.needs(&[input]);
        Ok(self.push(Op::Reshape { input }, value, needs))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return dim_err(format!("mse_loss shapes differ: {:?} vs {:?}", p.shape(), t.shape()));
        }
        let n = T::from_usize(p.numel()).expect("element count fits in a float");
        let total: T = p.data().iter().zip(t.data()).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
        let needs = self.needs(&[pred, target]);
        Ok(self.push(Op::Mse { pred, target }, Tensor::scalar(total / n), needs))
    }

    /// Mean binary cross-entropy, with predictions clamped to `[eps, 1-eps]`.
    pub fn bce_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return dim_err(format!("bce_loss shapes differ: {:?} vs {:?}", p.shape(), t.shape()));
        }
        if let Some(bad) = t.data().iter().find(|y| **y != T::zero() && **y != T::one()) {
            return arg_err(format!("binary target {bad} is not 0 or 1"));
        }
        let eps = T::from_f64_lossy(BCE_EPSILON);
        let n = T::from_usize(p.numel()).expect("element count fits in a float");
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(p, y)| {
                let p = p.max(eps).min(T::one() - eps);
                -(*y * p.ln() + (T::one() - *y) * (T::one() - p).ln())
            })
            .sum();
        let needs = self.needs(&[pred, target]);
        Ok(self.push(Op::Bce { pred, target }, Tensor::scalar(total / n), needs))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let total = self.value(input).data().iter().copied().sum();
        let needs = self.needs(&[input]);
        Ok(self.push(Op::Sum { input }, Tensor::scalar(total), needs))
    }

    /// Inner product with a constant tensor of the same size.
    pub fn dot(&mut self, input: NodeId, weights: &[T]) -> Result<NodeId> {
        let x = self.value(input);
        if x.numel() != weights.len() {
            return dim_err(format!("dot: {} elements against {} weights", x.numel(), weights.len()));
        }
        let total = x.data().iter().zip(weights).map(|(a, b)| *a * *b).sum();
        let needs = self.needs(&[input]);
        Ok(self.push(Op::Dot { input, weights: weights.to_vec() }, Tensor::scalar(total), needs))
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return arg_err("loss node is not on this graph");
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if self.nodes[idx].value.requires_grad() {
                    self.nodes[idx].value.accumulate_grad(&upstream)?;
                }
                continue;
            }
            let node = &self.nodes[idx];
            if node.op.inputs().iter().any(|i| i.0 >= idx) {
                return Err(Error::Internal(format!("node {idx} consumes a later node")));
            }
            let wants = |id: NodeId| self.nodes[id.0].needs_grad;
            let mut send = |id: NodeId, g: Vec<T>| add_into(&mut grads[id.0], g);

            match &node.op {
                Op::Leaf => unreachable!("leaves are handled above"),
                Op::Conv2d { input, kernel, bias, geom } => {
                    let (dx, dk, db) = kernels::conv2d_backward(
                        geom,
                        self.nodes[input.0].value.data(),
                        self.nodes[kernel.0].value.data(),
                        &upstream,
                        wants(*input),
                    );
                    if let Some(dx) = dx {
                        send(*input, dx);
                    }
                    if wants(*kernel) {
                        send(*kernel, dk);
                    }
                    if wants(*bias) {
                        send(*bias, db);
                    }
                }
                Op::Dense { input, weights, bias } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weights.0].value;
                    let (n, f, u) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                    let (dx, dw, db) =
                        kernels::dense_backward(n, f, u, x.data(), w.data(), &upstream, wants(*input));
                    if let Some(dx) = dx {
                        send(*input, dx);
                    }
                    if wants(*weights) {
                        send(*weights, dw);
                    }
                    if wants(*bias) {
                        send(*bias, db);
                    }
                }
                Op::Activation { input, kind } => {
                    let g = match kind {
                        Activation::Relu => {
                            let x = self.nodes[input.0].value.data();
                            upstream
                                .iter()
                                .zip(x)
                                .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                                .collect()
                        }
                        Activation::Sigmoid => upstream
                            .iter()
                            .zip(node.value.data())
                            .map(|(g, y)| *g * *y * (T::one() - *y))
                            .collect(),
                        Activation::Linear => upstream,
                    };
                    send(*input, g);
                }
                Op::Dropout { input, mask } => {
                    let g = match mask {
                        Some(mask) => upstream.iter().zip(mask).map(|(g, m)| *g * *m).collect(),
                        None => upstream,
                    };
                    send(*input, g);
                }
                Op::Reshape { input } => send(*input, upstream),
                Op::Mse { pred, target } => {
                    let p = self.nodes[pred.0].value.data();
                    let t = self.nodes[target.0].value.data();
                    let scale = upstream[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).unwrap();
                    if wants(*pred) {
                        send(*pred, p.iter().zip(t).map(|(a, b)| (*a - *b) * scale).collect());
                    }
                    if wants(*target) {
                        send(*target, p.iter().zip(t).map(|(a, b)| (*b - *a) * scale).collect());
                    }
                }
                Op::Bce { pred, target } => {
                    let p = self.nodes[pred.0].value.data();
                    let t = self.nodes[target.0].value.data();
                    let eps = T::from_f64_lossy(BCE_EPSILON);
                    let scale = upstream[0] / T::from_usize(p.len()).unwrap();
                    if wants(*pred) {
                        let g = p
                            .iter()
                            .zip(t)
                            .map(|(p, y)| {
                                if *p < eps || *p > T::one() - eps {
                                    T::zero()
                                } else {
                                    (-*y / *p + (T::one() - *y) / (T::one() - *p)) * scale
                                }
                            })
                            .collect();
                        send(*pred, g);
                    }
                    if wants(*target) {
                        return arg_err("binary targets are labels and cannot require gradients");
                    }
                }
                Op::Sum { input } => {
                    let n = self.nodes[input.0].value.numel();
                    send(*input, vec![upstream[0]; n]);
                }
                Op::Dot { input, weights } => {
                    send(*input, weights.iter().map(|w| *w * upstream[0]).collect());
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_output_shape_uses_ceil_division() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 768, 975, 1]).unwrap());
        let k = g.leaf(Tensor::zeros(&[3, 3, 1, 32]).unwrap());
        let b = g.leaf(Tensor::zeros(&[32]).unwrap());
        let y = g.conv2d(x, k, b, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 384, 488, 32]);
    }

    #[test]
    fn conv_identity_kernel_returns_input() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 - 3.5).collect();
        let x = g.leaf(t(&[1, 4, 4, 1], &data));
        let k = g.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_all_ones_kernel_over_padded_2x2() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.leaf(Tensor::full(&[3, 3, 1, 1], 1.0).unwrap());
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_rejects_bad_arguments() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 4, 4, 2]).unwrap());
        let k = g.leaf(Tensor::zeros(&[3, 3, 1, 1]).unwrap());
        let b = g.leaf(Tensor::zeros(&[1]).unwrap());
        assert!(matches!(g.conv2d(x, k, b, 1), Err(Error::Dimension(_))));
        let k2 = g.leaf(Tensor::zeros(&[3, 3, 2, 1]).unwrap());
        assert!(matches!(g.conv2d(x, k2, b, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = g.leaf(t(&[2], &[0.0, 0.0]));
        let y = g.dense(x, w, zero).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let ones = g.leaf(t(&[1, 2], &[1.0, 1.0]));
        let b = g.leaf(t(&[2], &[3.0, 4.0]));
        let y = g.dense(ones, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0]);

        let bad = g.leaf(t(&[3, 2], &[0.0; 6]));
        assert!(matches!(g.dense(x, bad, zero), Err(Error::Dimension(_))));
    }

    #[test]
    fn dense_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let (xi, wi, bi) = (g.leaf(t(&[2, 5], &x)), g.leaf(t(&[5, 3], &w)), g.leaf(t(&[3], &b)));
        let y = g.dense(xi, wi, bi).unwrap();

        let mut expected = vec![0.0; 6];
        for n in 0..2 {
            for u in 0..3 {
                let mut acc = 0.0;
                for f in 0..5 {
                    acc += x[n * 5 + f] * w[f * 3 + u];
                }
                expected[n * 3 + u] = acc + b[u];
            }
        }
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-15 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn activations() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.activation(x, Activation::Relu).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.leaf(t(&[1], &[0.0]));
        let s = g.activation(z, Activation::Sigmoid).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let l = g.activation(x, Activation::Linear).unwrap();
        assert_eq!(g.value(l).data(), g.value(x).data());
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]).with_requires_grad(true));
        let r = g.activation(x, Activation::Relu).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[0.0]).with_requires_grad(true));
        let s = g.activation(x, Activation::Sigmoid).unwrap();
        g.backward(s).unwrap();
        let analytic = g.grad(x).unwrap()[0];
        assert_eq!(analytic, 0.25);
        let h = 1e-5;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let numeric = (sig(h) - sig(-h)) / (2.0 * h);
        assert!((analytic - numeric).abs() / analytic < 1e-6);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let x = g.leaf(t(&[5, 10], &data));
        let inf = g.dropout(x, 0.3, Mode::Inference, &mut rng).unwrap();
        assert_eq!(g.value(inf).data(), &data[..]);
        let p0 = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(p0).data(), &data[..]);
        assert!(matches!(g.dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::Argument(_))));
        assert!(matches!(g.dropout(x, -0.1, Mode::Train, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1_000_000], 1.0).unwrap());
        let y = g.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
        let mean = g.value(y).data().iter().map(|v| *v as f64).sum::<f64>() / 1e6;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::full(&[1000], 2.0).unwrap());
            let y = g.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[200], 1.0).unwrap().with_requires_grad(true));
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), g.value(y).data());
    }

    #[test]
    fn flatten_shapes_and_roundtrip() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 24, 31, 128]).unwrap());
        let y = g.flatten(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 95232]);
        let one = g.leaf(Tensor::zeros(&[1, 1, 1, 1]).unwrap());
        let y1 = g.flatten(one).unwrap();
        assert_eq!(g.value(y1).shape(), &[1, 1]);

        let data: Vec<f32> = (0..60).map(|i| (i as f32).sin()).collect();
        let z = g.leaf(Tensor::new(&[2, 3, 5, 2], data.clone()).unwrap());
        let flat = g.flatten(z).unwrap();
        let back = g.value(flat).clone().reshape(&[2, 3, 5, 2]).unwrap();
        assert_eq!(back.data(), &data[..]);
        let r3 = g.leaf(Tensor::zeros(&[2, 3, 4]).unwrap());
        assert!(matches!(g.flatten(r3), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]).with_requires_grad(true));
        let z = g.leaf(t(&[1, 4], &[0.0; 4]));
        let l = g.mse_loss(p, z).unwrap();
        assert_eq!(g.value(l).data(), &[0.25]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.5, 0.0, 0.0, 0.0]);
        let same = g.mse_loss(z, z).unwrap();
        assert_eq!(g.value(same).data(), &[0.0]);
        let other = g.leaf(t(&[4], &[0.0; 4]));
        assert!(matches!(g.mse_loss(p, other), Err(Error::Dimension(_))));
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(t(&[1, 1], &[0.5]));
        let y = g.leaf(t(&[1, 1], &[1.0]));
        let l = g.bce_loss(p, y).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let sure = g.leaf(t(&[1, 1], &[1.0 - 1e-12]));
        let l = g.bce_loss(sure, y).unwrap();
        assert!(g.value(l).data()[0] < 1e-6);
        let bad = g.leaf(t(&[1, 1], &[0.5]));
        assert!(matches!(g.bce_loss(p, bad), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_of_sum_is_ones_and_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2, 3], 4.0).unwrap().with_requires_grad(true));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 6]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_hand_chain_rule() {
        // loss = (w x - t)^2 with a single element: d/dw = 2 x (w x - t)
        let (w0, x0, t0) = (1.5, 2.0, 1.0);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1], &[x0]));
        let w = g.leaf(t(&[1, 1], &[w0]).with_requires_grad(true));
        let b = g.leaf(t(&[1], &[0.0]));
        let target = g.leaf(t(&[1, 1], &[t0]));
        let y = g.dense(x, w, b).unwrap();
        let l = g.mse_loss(y, target).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0 * x0 * (w0 * x0 - t0)]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]).unwrap().with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Argument(_))));
    }
}
