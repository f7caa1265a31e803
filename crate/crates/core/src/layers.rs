//! Masked linear / conv layers and frozen batch norm.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::popup::{get_subnet, AbsMode, BinaryMask, PopupScores};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};
use crate::zhou::{StochasticMask, ZhouEval};

/// What decides which frozen weights take part in the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Selector<T: Element> {
    /// Edge-popup: top-k% of `|scores|`.
    Popup {
        scores: PopupScores<T>,
        abs_mode: AbsMode,
    },
    /// Stochastic supermask baseline.
    Stochastic {
        mask: StochasticMask<T>,
        eval: ZhouEval,
    },
    /// No mask; the weights themselves are trained.
    Dense,
}

impl<T: Element> Selector<T> {
    pub fn weights_frozen(&self) -> bool {
        !matches!(self, Selector::Dense)
    }

    /// Deterministic mask for inspection: top-k for popup, `p ≥ 0.5` for the
    /// stochastic baseline, all ones when dense.
    pub fn current_mask(&self, shape: &[usize]) -> Result<BinaryMask> {
        match self {
            Selector::Popup { scores, .. } => scores.mask(),
            Selector::Stochastic { mask, .. } => Ok(mask.threshold()),
            Selector::Dense => Ok(BinaryMask::ones(shape)),
        }
    }
}

/// Graph handles recorded for one masked layer during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    /// Layer input `Z`.
    pub input: Var,
    /// Pre-activation output `I`.
    pub output: Var,
    /// Trainable tensor of the layer (scores, logits, or dense weights).
    pub param: Option<Var>,
    /// Mask used in this pass, if any.
    pub mask: Option<BinaryMask>,
}

/// Inserts `weights ⊙ mask` (with the straight-through hook) into the graph.
fn effective_weight<T: Element>(
    g: &mut Graph<T>,
    weights: &Tensor<T>,
    selector: &Selector<T>,
    train: bool,
    rng: Option<&mut RngStream>,
) -> Result<(Var, Option<Var>, Option<BinaryMask>)> {
    match selector {
        Selector::Dense => {
            let w = if train {
                g.param(weights.clone())
            } else {
                g.constant(weights.clone())
            };
            Ok((w, train.then_some(w), None))
        }
        Selector::Popup { scores, .. } => {
            let w = g.constant(weights.clone());
            let s = if train {
                g.param(scores.scores.clone())
            } else {
                g.constant(scores.scores.clone())
            };
            let key = g.abs(s)?;
            let mask = get_subnet(&scores.scores, scores.k)?;
            let m = g.straight_through(mask.to_tensor(), key)?;
            let eff = g.mul(w, m)?;
            Ok((eff, train.then_some(s), Some(mask)))
        }
        Selector::Stochastic { mask, eval } => {
            let w = g.constant(weights.clone());
            let l = if train {
                g.param(mask.logits.clone())
            } else {
                g.constant(mask.logits.clone())
            };
            let p = g.sigmoid(l)?;
            let drawn = mask.draw(train, *eval, rng)?;
            let m = g.straight_through(drawn.to_tensor(), p)?;
            let eff = g.mul(w, m)?;
            Ok((eff, train.then_some(l), Some(drawn)))
        }
    }
}

fn masked_weights<T: Element>(weights: &Tensor<T>, selector: &Selector<T>) -> Result<Tensor<T>> {
    match selector {
        Selector::Dense => Ok(weights.clone()),
        s => {
            let mask = s.current_mask(weights.shape())?;
            weights.zip_map(&mask.to_tensor(), |w, m| w * m)
        }
    }
}

/// Bias-free fully connected layer over frozen weights `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLinear<T: Element> {
    pub weights: Tensor<T>,
    pub selector: Selector<T>,
}

impl<T: Element> MaskedLinear<T> {
    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        train: bool,
        rng: Option<&mut RngStream>,
    ) -> Result<(Var, LayerTape)> {
        let (eff, param, mask) = effective_weight(g, &self.weights, &self.selector, train, rng)?;
        let out = g.linear(x, eff)?;
        Ok((
            out,
            LayerTape {
                input: x,
                output: out,
                param,
                mask,
            },
        ))
    }
}

/// `x · (weights ⊙ mask)ᵀ` with the layer's deterministic mask.
pub fn masked_linear_forward<T: Element>(x: &Tensor<T>, layer: &MaskedLinear<T>) -> Result<Tensor<T>> {
    ops::linear(x, &masked_weights(&layer.weights, &layer.selector)?)
}

/// Convolution over frozen weights `[O, C, κ, κ]`; every kernel tap is an edge.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedConv<T: Element> {
    pub weights: Tensor<T>,
    pub selector: Selector<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> MaskedConv<T> {
    pub fn new(weights: Tensor<T>, selector: Selector<T>, stride: usize, padding: usize) -> Result<Self> {
        match weights.shape() {
            [_, _, a, b] if a == b && a % 2 == 1 => {}
            s => {
                return Err(Error::dim(format!(
                    "conv weight must be [O, C, κ, κ] with odd κ, got {s:?}"
                )))
            }
        }
        Ok(MaskedConv {
            weights,
            selector,
            stride,
            padding,
        })
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        train: bool,
        rng: Option<&mut RngStream>,
    ) -> Result<(Var, LayerTape)> {
        let (eff, param, mask) = effective_weight(g, &self.weights, &self.selector, train, rng)?;
        let out = g.conv2d(x, eff, self.stride, self.padding)?;
        Ok((
            out,
            LayerTape {
                input: x,
                output: out,
                param,
                mask,
            },
        ))
    }
}

pub fn masked_conv_forward<T: Element>(x: &Tensor<T>, layer: &MaskedConv<T>) -> Result<Tensor<T>> {
    let w = masked_weights(&layer.weights, &layer.selector)?;
    ops::conv2d(x, &w, layer.stride, layer.padding)
}

/// Batch norm whose affine transform stays at scale 1, bias 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBatchNorm<T: Element> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub scale: Vec<T>,
    pub bias: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> FrozenBatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        FrozenBatchNorm {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            scale: vec![T::one(); channels],
            bias: vec![T::zero(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn check(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::dim(format!(
                "batch norm over {} channels got input {shape:?}",
                self.channels()
            )));
        }
        Ok(shape[0] * shape[2..].iter().product::<usize>())
    }

    /// Graph forward. In training mode the batch statistics are used and
    /// returned as `(mean, var, count)` so the caller can fold them into the
    /// running buffers.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>, usize)>)> {
        let count = self.check(g.value(x).shape())?;
        let eps = T::cast(self.eps);
        if training {
            let (out, mean, var) = g.batch_norm(x, None, eps)?;
            Ok((out, Some((mean, var, count))))
        } else {
            let (out, _, _) = g.batch_norm(x, Some((&self.running_mean, &self.running_var)), eps)?;
            Ok((out, None))
        }
    }

    pub fn update_running(&mut self, mean: &[T], var: &[T], count: usize) {
        let mom = T::cast(self.momentum);
        let unbias = if count > 1 {
            T::cast(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        for c in 0..self.channels() {
            self.running_mean[c] = (T::one() - mom) * self.running_mean[c] + mom * mean[c];
            self.running_var[c] = (T::one() - mom) * self.running_var[c] + mom * var[c] * unbias;
        }
    }
}

pub fn frozen_batchnorm_forward<T: Element>(
    x: &Tensor<T>,
    bn: &mut FrozenBatchNorm<T>,
    training: bool,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let (out, stats) = bn.forward_graph(&mut g, v, training)?;
    if let Some((mean, var, count)) = stats {
        bn.update_running(&mean, &var, count);
    }
    Ok(g.value(out).clone())
}
