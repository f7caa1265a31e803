//! Stochastic supermask baseline: each edge is kept with a learned
//! probability `p = sigmoid(m)`, sampled afresh on every training forward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, sigmoid};
use crate::popup::{linear_score_grad, BinaryMask};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// How the mask is formed outside training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZhouEval {
    /// Keep an edge iff `p ≥ 0.5`.
    #[default]
    Threshold,
    /// Sample as in training.
    Sampled,
}

/// `sigmoid(m)` kept inside `[ε, 1 − ε]`: past |m| ≈ 37 (f64) the sigmoid
/// rounds to exactly 0 or 1, which would pin the edge and kill its gradient.
pub fn keep_probability<T: Element>(m: T) -> T {
    let eps = T::epsilon();
    sigmoid(m).max(eps).min(T::one() - eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMask<T: Element> {
    pub logits: Tensor<T>,
}

impl<T: Element> StochasticMask<T> {
    pub fn new(logits: Tensor<T>) -> Self {
        StochasticMask { logits }
    }

    pub fn probabilities(&self) -> Tensor<T> {
        self.logits.map(keep_probability)
    }

    /// One Bernoulli(p) draw per edge.
    pub fn sample(&self, rng: &mut RngStream) -> BinaryMask {
        let bits = self
            .logits
            .data()
            .iter()
            .map(|&m| rng.bernoulli(keep_probability(m).as_f64()))
            .collect();
        BinaryMask::new(self.logits.shape().to_vec(), bits).expect("shape")
    }

    pub fn threshold(&self) -> BinaryMask {
        let half = T::cast(0.5);
        let bits = self.logits.data().iter().map(|&m| sigmoid(m) >= half).collect();
        BinaryMask::new(self.logits.shape().to_vec(), bits).expect("shape")
    }

    /// Mask used for a forward pass.
    pub fn draw(&self, training: bool, eval: ZhouEval, rng: Option<&mut RngStream>) -> Result<BinaryMask> {
        if training || eval == ZhouEval::Sampled {
            let rng = rng.ok_or_else(|| Error::param("stochastic mask needs an rng stream"))?;
            Ok(self.sample(rng))
        } else {
            Ok(self.threshold())
        }
    }
}

/// Linear forward with a sampled (training) or thresholded (eval) mask.
pub fn zhou_forward<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    mask: &StochasticMask<T>,
    rng: &mut RngStream,
    training: bool,
) -> Result<(Tensor<T>, BinaryMask)> {
    weights.same_shape(&mask.logits)?;
    let m = mask.draw(training, ZhouEval::Threshold, Some(rng))?;
    let eff = weights.zip_map(&m.to_tensor(), |w, b| w * b)?;
    Ok((ops::linear(x, &eff)?, m))
}

/// Logit gradient with the sample treated as identity:
/// `∂L/∂m = ∂L/∂I · w · Z · p(1−p)` summed over the batch.
pub fn zhou_backward<T: Element>(
    upstream: &Tensor<T>,
    weights: &Tensor<T>,
    activations: &Tensor<T>,
    p: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = linear_score_grad(upstream, activations, weights)?;
    g.zip_map(p, |g, p| g * p * (T::one() - p))
}
