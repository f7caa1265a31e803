//! Top-k% selection over popup scores, straight-through score gradients,
//! the score update, and swap detection.
//!
//! Scores are stored signed; the ranking key is `|score|`. Gradients w.r.t.
//! the stored score therefore carry a `sign(score)` factor from the absolute
//! value, exactly like autodiff through `scores.abs()` would produce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::check_keep_fraction;
use crate::optim::{sgd_update, SgdConfig};
use crate::tensor::{Element, Tensor};

/// Where the absolute value of a score is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsMode {
    /// Scores stay signed; `|s|` is only the ranking key.
    #[default]
    Ranking,
    /// Scores are replaced by `|s|` after every update.
    Clamp,
}

/// Number of edges zeroed in a layer of `n` weights: `floor((1-k)·n)` in `f64`.
pub fn drop_count(n: usize, k: f64) -> usize {
    ((1.0 - k) * n as f64).floor() as usize
}

/// Exact number of edges kept: `n - floor((1-k)·n)`.
pub fn keep_count(n: usize, k: f64) -> usize {
    n - drop_count(n, k)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::dim(format!(
                "mask shape {shape:?} vs {} bits",
                bits.len()
            )));
        }
        Ok(BinaryMask { shape, bits })
    }

    pub fn ones(shape: &[usize]) -> Self {
        BinaryMask {
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("shape")
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let mut bits = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v == T::one() {
                bits.push(true);
            } else if v == T::zero() {
                bits.push(false);
            } else {
                return Err(Error::Format(format!("mask value {v} is not 0 or 1")));
            }
        }
        BinaryMask::new(t.shape().to_vec(), bits)
    }
}

/// Keeps the top-k fraction of `|scores|`.
///
/// The `floor((1-k)·n)` smallest keys are zeroed, ordering by `(|score|, flat
/// index)`; among tied magnitudes the lowest indices are dropped first.
pub fn get_subnet<T: Element>(scores: &Tensor<T>, k: f64) -> Result<BinaryMask> {
    check_keep_fraction(k)?;
    if scores.is_empty() {
        return Err(Error::param("get_subnet on an empty score tensor"));
    }
    scores.ensure_finite("popup scores")?;
    let n = scores.len();
    let j = drop_count(n, k);
    let mut bits = vec![true; n];
    if j > 0 {
        let data = scores.data();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let cmp = |a: &u32, b: &u32| {
            data[*a as usize]
                .abs()
                .partial_cmp(&data[*b as usize].abs())
                .expect("finite scores")
                .then(a.cmp(b))
        };
        // the key (|s|, index) is a strict total order, so the first j after
        // partitioning are exactly the first j of a stable sort
        if j < n {
            order.select_nth_unstable_by(j - 1, cmp);
        }
        for &i in &order[..j] {
            bits[i as usize] = false;
        }
    }
    BinaryMask::new(scores.shape().to_vec(), bits)
}

/// Trainable score tensor paired with a keep fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct PopupScores<T: Element> {
    pub scores: Tensor<T>,
    pub k: f64,
}

impl<T: Element> PopupScores<T> {
    pub fn new(scores: Tensor<T>, k: f64) -> Result<Self> {
        check_keep_fraction(k)?;
        Ok(PopupScores { scores, k })
    }

    pub fn mask(&self) -> Result<BinaryMask> {
        get_subnet(&self.scores, self.k)
    }

    /// Ranking keys `|s|`.
    pub fn keys(&self) -> Tensor<T> {
        self.scores.map(|v| v.abs())
    }
}

/// Straight-through score gradient of one edge: `∂L/∂I_v · w_uv · Z_u`.
///
/// Independent of whether the edge is currently selected.
pub fn ste_score_grad<T: Element>(upstream: T, weight: T, activation: T) -> T {
    upstream * weight * activation
}

/// Batched edge gradient for a bias-free linear layer.
///
/// `upstream` is `∂L/∂I` of shape `[N, out]`, `inputs` is `Z` of shape
/// `[N, in]`, `weights` is `[out, in]`. Returns `Σ_n ∂L/∂I[n,v] · w[v,u] · Z[n,u]`.
pub fn linear_score_grad<T: Element>(
    upstream: &Tensor<T>,
    inputs: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, out) = match upstream.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::dim(format!("upstream must be rank 2, got {s:?}"))),
    };
    let fin = match inputs.shape() {
        [a, b] if *a == n => *b,
        s => return Err(Error::dim(format!("inputs shape {s:?} vs batch {n}"))),
    };
    if weights.shape() != [out, fin] {
        return Err(Error::dim(format!(
            "weights {:?} vs expected [{out}, {fin}]",
            weights.shape()
        )));
    }
    let (g, z, w) = (upstream.data(), inputs.data(), weights.data());
    let mut grad = vec![T::zero(); out * fin];
    for v in 0..out {
        for u in 0..fin {
            let mut acc = T::zero();
            for b in 0..n {
                acc += ste_score_grad(g[b * out + v], w[v * fin + u], z[b * fin + u]);
            }
            grad[v * fin + u] = acc;
        }
    }
    Tensor::new(vec![out, fin], grad)
}

/// Batched edge gradient for a convolution: the per-edge rule summed over
/// every output spatial location.
pub fn conv_score_grad<T: Element>(
    upstream: &Tensor<T>,
    inputs: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = crate::ops::ConvGeometry::new(inputs.shape(), weights.shape(), stride, padding)?;
    let expect = [geo.batch, geo.out_channels, geo.out_height, geo.out_width];
    if upstream.shape() != expect {
        return Err(Error::dim(format!(
            "upstream {:?} vs conv output {expect:?}",
            upstream.shape()
        )));
    }
    let (c_in, k) = (geo.in_channels, geo.kernel);
    let (h, w_) = (geo.height, geo.width);
    let (oh, ow) = (geo.out_height, geo.out_width);
    let (g, z, w) = (upstream.data(), inputs.data(), weights.data());
    let mut grad = vec![T::zero(); weights.len()];
    for o in 0..geo.out_channels {
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * c_in + c) * k + ky) * k + kx;
                    let mut acc = T::zero();
                    for b in 0..geo.batch {
                        for oy in 0..oh {
                            let y = (oy * stride + ky) as isize - padding as isize;
                            if y < 0 || y as usize >= h {
                                continue;
                            }
                            for ox in 0..ow {
                                let x = (ox * stride + kx) as isize - padding as isize;
                                if x < 0 || x as usize >= w_ {
                                    continue;
                                }
                                let up = g[((b * geo.out_channels + o) * oh + oy) * ow + ox];
                                let act = z[((b * c_in + c) * h + y as usize) * w_ + x as usize];
                                acc += ste_score_grad(up, w[widx], act);
                            }
                        }
                    }
                    grad[widx] = acc;
                }
            }
        }
    }
    Tensor::new(weights.shape().to_vec(), grad)
}

/// Chain rule through `|s|`: gradient w.r.t. the stored signed scores.
pub fn raw_score_grad<T: Element>(scores: &Tensor<T>, key_grad: &Tensor<T>) -> Result<Tensor<T>> {
    scores.zip_map(key_grad, |s, g| {
        if s > T::zero() {
            g
        } else if s < T::zero() {
            -g
        } else {
            T::zero()
        }
    })
}

/// One SGD step on the signed scores (momentum and weight decay included).
///
/// `velocity` is the momentum buffer, same shape as the scores.
pub fn score_step<T: Element>(
    scores: &mut PopupScores<T>,
    grads: &Tensor<T>,
    velocity: &mut Tensor<T>,
    config: &SgdConfig,
    abs_mode: AbsMode,
) -> Result<()> {
    scores.scores.same_shape(grads)?;
    scores.scores.same_shape(velocity)?;
    sgd_update(
        scores.scores.data_mut(),
        velocity.data_mut(),
        grads.data(),
        config,
    );
    if abs_mode == AbsMode::Clamp {
        scores.scores.data_mut().iter_mut().for_each(|v| *v = v.abs());
    }
    Ok(())
}

/// Edges that entered or left one layer's subnetwork between two steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub layer_id: usize,
    pub entered: Vec<usize>,
    pub exited: Vec<usize>,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
}

impl SwapEvent {
    pub fn with_losses(mut self, before: f64, after: f64) -> Self {
        self.loss_before = Some(before);
        self.loss_after = Some(after);
        self
    }
}

pub fn detect_swaps(
    before: &BinaryMask,
    after: &BinaryMask,
    layer_id: usize,
) -> Result<Option<SwapEvent>> {
    if before.shape() != after.shape() {
        return Err(Error::dim(format!(
            "mask shapes differ: {:?} vs {:?}",
            before.shape(),
            after.shape()
        )));
    }
    let mut entered = Vec::new();
    let mut exited = Vec::new();
    for (i, (&b, &a)) in before.bits().iter().zip(after.bits()).enumerate() {
        match (b, a) {
            (false, true) => entered.push(i),
            (true, false) => exited.push(i),
            _ => {}
        }
    }
    if entered.is_empty() && exited.is_empty() {
        return Ok(None);
    }
    Ok(Some(SwapEvent {
        layer_id,
        entered,
        exited,
        loss_before: None,
        loss_after: None,
    }))
}

/// Receiving unit (output neuron or output channel) of a flat edge index.
pub fn receiving_node(weight_shape: &[usize], edge: usize) -> usize {
    let per_node: usize = weight_shape[1..].iter().product();
    edge / per_node
}
