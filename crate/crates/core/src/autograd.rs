//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction; [`Graph::backward`] walks it once in reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Element> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Mul(Var, Var),
    Abs(Var),
    Sigmoid(Var),
    /// Value supplied externally; the incoming gradient is routed unchanged to `through`.
    StraightThrough {
        through: Var,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    BatchNorm {
        x: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { x, w } | Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Relu(x) | Op::Reshape(x) | Op::Abs(x) | Op::Sigmoid(x) | Op::Sum(x) => vec![*x],
            Op::MaxPool2 { x, .. } | Op::BatchNorm { x, .. } => vec![*x],
            Op::StraightThrough { through } => vec![*through],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    trainable: bool,
    needs_grad: bool,
}

/// Computation record for one forward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    retained: Vec<Var>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`]: gradients of trainable leaves and retained nodes.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            retained: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} does not exist on this graph ({} nodes)",
                v.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let mut needs_grad = false;
        for input in op.inputs() {
            self.check(input)?;
            needs_grad |= self.nodes[input.0].needs_grad;
        }
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable: true,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Frozen leaf; never receives a gradient entry.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable: false,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    /// Ask `backward` to also report the gradient reaching an interior node.
    pub fn retain(&mut self, v: Var) {
        if !self.retained.contains(&v) {
            self.retained.push(v);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `x · wᵀ`, the bias-free fully connected layer.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let out = ops::linear(self.value(x), self.value(w))?;
        self.push(out, Op::Linear { x, w })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let out = ops::conv2d(self.value(x), self.value(w), stride, padding)?;
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (out, argmax) = ops::maxpool2(self.value(x))?;
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Keeps the leading axis and flattens the rest.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let shape = self.value(x).shape().to_vec();
        let n = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Forward value `value`, backward identity into `through` (straight-through estimator).
    pub fn straight_through(&mut self, value: Tensor<T>, through: Var) -> Result<Var> {
        self.check(through)?;
        self.value(through).same_shape(&value)?;
        self.push(value, Op::StraightThrough { through })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Per-channel normalization (channel axis 1) with identity affine transform.
    ///
    /// With `stats = None` the batch statistics are used and returned; otherwise
    /// the supplied `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        self.check(x)?;
        let input = self.value(x);
        let shape = input.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("batch_norm needs rank >= 2, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = T::cast((n * inner) as f64);
        let at = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim(format!(
                        "batch_norm: {c} channels but stats of length {}",
                        m.len()
                    )));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        for i in 0..inner {
                            s += input.data()[at(b, ch, i)];
                        }
                    }
                    let m = s / count;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for i in 0..inner {
                            let d = input.data()[at(b, ch, i)] - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = input.clone();
        for b in 0..n {
            for ch in 0..c {
                for i in 0..inner {
                    let j = at(b, ch, i);
                    out.data_mut()[j] = (input.data()[j] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let var_out = self.push(
            out.clone(),
            Op::BatchNorm {
                x,
                xhat: out,
                inv_std,
                batch_stats: stats.is_none(),
            },
        )?;
        Ok((var_out, mean, var))
    }

    /// Reverse pass from a scalar node.
    ///
    /// Returns gradients for every trainable leaf that the loss depends on and
    /// for every retained node. Frozen leaves never get an entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().any(|v| v.0 >= i) {
                return Err(Error::Graph(format!("cycle: node {i} reads a later node")));
            }
        }
        let mut acc: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        acc[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(grad) = acc[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.trainable || self.retained.contains(&Var(i)) {
                out.insert(Var(i), grad.clone());
            }
            self.propagate(node, &grad, &mut acc)?;
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        grad: &Tensor<T>,
        acc: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut send = |v: Var, g: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut acc[v.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
            Ok(())
        };
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), grad);
                send(*a, ga)?;
                send(*b, gb)?;
            }
            Op::Linear { x, w } => {
                if needs(*x) {
                    send(*x, ops::linear_backward_input(self.value(*w), grad))?;
                }
                if needs(*w) {
                    send(*w, ops::linear_backward_weight(self.value(*x), grad))?;
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                if needs(*x) {
                    let gx = ops::conv2d_backward_input(
                        self.value(*x).shape(),
                        self.value(*w),
                        grad,
                        *stride,
                        *padding,
                    )?;
                    send(*x, gx)?;
                }
                if needs(*w) {
                    let gw = ops::conv2d_backward_weight(
                        self.value(*x),
                        self.value(*w).shape(),
                        grad,
                        *stride,
                        *padding,
                    )?;
                    send(*w, gw)?;
                }
            }
            Op::Relu(x) => send(*x, ops::relu_backward(self.value(*x), grad))?,
            Op::MaxPool2 { x, argmax } => {
                send(
                    *x,
                    ops::maxpool2_backward(self.value(*x).shape(), argmax, grad),
                )?;
            }
            Op::Reshape(x) => send(*x, grad.reshape(self.value(*x).shape())?)?,
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, grad.zip_map(self.value(*b), |g, v| g * v)?)?;
                }
                if needs(*b) {
                    send(*b, grad.zip_map(self.value(*a), |g, v| g * v)?)?;
                }
            }
            Op::Abs(x) => {
                // d|x|/dx = sign(x), with 0 at the origin
                let g = grad.zip_map(self.value(*x), |g, v| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?;
                send(*x, g)?;
            }
            Op::Sigmoid(x) => {
                let g = grad.zip_map(&node.value, |g, p| g * p * (T::one() - p))?;
                send(*x, g)?;
            }
            Op::StraightThrough { through } => send(*through, grad.clone())?,
            Op::Sum(x) => {
                let g = grad.item();
                send(*x, Tensor::full(self.value(*x).shape(), g))?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => send(
                *logits,
                ops::cross_entropy_backward(probs, labels, grad.item()),
            )?,
            Op::BatchNorm {
                x,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = xhat.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let at = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
                let mut gx = Tensor::zeros(shape);
                let m = T::cast((n * inner) as f64);
                for ch in 0..c {
                    let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                    if *batch_stats {
                        for b in 0..n {
                            for i in 0..inner {
                                let j = at(b, ch, i);
                                sum_g += grad.data()[j];
                                sum_gx += grad.data()[j] * xhat.data()[j];
                            }
                        }
                    }
                    for b in 0..n {
                        for i in 0..inner {
                            let j = at(b, ch, i);
                            gx.data_mut()[j] = if *batch_stats {
                                inv_std[ch] / m
                                    * (m * grad.data()[j] - sum_g - xhat.data()[j] * sum_gx)
                            } else {
                                grad.data()[j] * inv_std[ch]
                            };
                        }
                    }
                }
                send(*x, gx)?;
            }
        }
        Ok(())
    }
}
