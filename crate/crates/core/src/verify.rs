//! Executable checks on the method: loss decrease under swaps, exhaustive
//! subnetwork search, subnetwork counting, gradient oracles, the scaled-init
//! variance property and the top-k selection oracle.

use itertools::Itertools;
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::init::{apply_scale, fan_in, kaiming_normal, score_init, InitKind, InitSpec};
use crate::layers::{masked_linear_forward, MaskedConv, MaskedLinear, Selector};
use crate::model::{build_model, ArchName, ArchSpec, Layer, Model, Rational, Selection};
use crate::ops;
use crate::optim::SgdConfig;
use crate::popup::{
    conv_score_grad, detect_swaps, drop_count, get_subnet, keep_count, linear_score_grad,
    raw_score_grad, receiving_node, score_step, AbsMode, PopupScores, SwapEvent,
};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};
use crate::train::compute_gradients;

/// `C(n, r)` exactly.
pub fn binomial(n: usize, r: usize) -> BigUint {
    if r > n {
        return BigUint::ZERO;
    }
    let r = r.min(n - r);
    let mut acc = BigUint::one();
    for i in 0..r {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Number of distinct masks of a layer with `n` weights at keep fraction `k`.
pub fn subnetwork_count(n: usize, k: f64) -> BigUint {
    binomial(n, keep_count(n, k))
}

// ---------------------------------------------------------------- swap checks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapKind {
    /// One edge in, one edge out, both into the same node.
    Single,
    /// Any nonzero balanced swap set inside one layer.
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapCheckReport {
    pub kind: SwapKind,
    pub events: Vec<SwapEvent>,
    pub decreased: usize,
    pub violated: usize,
    pub lr: f64,
    pub tolerance: f64,
    pub steps: usize,
    /// Steps whose mask changes spanned more than one layer.
    pub excluded: usize,
}

impl SwapCheckReport {
    fn from_events(
        kind: SwapKind,
        events: Vec<SwapEvent>,
        lr: f64,
        tolerance: f64,
        steps: usize,
        excluded: usize,
    ) -> Self {
        let decreased = events
            .iter()
            .filter(|e| match (e.loss_before, e.loss_after) {
                (Some(b), Some(a)) => a <= b + tolerance,
                _ => false,
            })
            .count();
        SwapCheckReport {
            kind,
            violated: events.len() - decreased,
            decreased,
            events,
            lr,
            tolerance,
            steps,
            excluded,
        }
    }

    /// No qualifying events were found; not a failure.
    pub fn is_inconclusive(&self) -> bool {
        self.events.is_empty()
    }

    /// Share of events with non-increasing loss.
    pub fn fraction_ok(&self) -> Option<f64> {
        (!self.events.is_empty()).then(|| self.decreased as f64 / self.events.len() as f64)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.fraction_ok().is_none_or(|f| f >= threshold)
    }
}

/// Whether a single-layer event matches the hypothesis of `kind`.
pub fn qualifies(kind: SwapKind, event: &SwapEvent, weight_shape: &[usize]) -> bool {
    match kind {
        SwapKind::Single => {
            event.entered.len() == 1
                && event.exited.len() == 1
                && receiving_node(weight_shape, event.entered[0])
                    == receiving_node(weight_shape, event.exited[0])
        }
        SwapKind::General => !event.entered.is_empty() && event.entered.len() == event.exited.len(),
    }
}

fn popup_scores_mut<T: Element>(model: &mut Model<T>) -> Result<Vec<&mut PopupScores<T>>> {
    model
        .masked_layers_mut()
        .map(|(_, s)| match s {
            Selector::Popup { scores, .. } => Ok(scores),
            _ => Err(Error::param("swap checks need an edge-popup model")),
        })
        .collect()
}

/// Plain score SGD (no momentum, no weight decay) over a cycle of batches.
///
/// Every step whose mask changes are confined to one layer is recorded with
/// the loss of the *same* batch before and after the step; weights and all
/// other masks are unchanged by construction. Returns the events, their
/// layer weight shapes, and the number of steps that changed several layers.
pub fn harvest_swap_events<T: Element>(
    model: &mut Model<T>,
    batches: &[(Tensor<T>, Vec<usize>)],
    lr: f64,
    steps: usize,
) -> Result<(Vec<(SwapEvent, Vec<usize>)>, usize)> {
    if batches.is_empty() {
        return Err(Error::param("swap harvest needs at least one batch"));
    }
    let cfg = SgdConfig {
        lr,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let shapes: Vec<Vec<usize>> = model.masked_layers().map(|(w, _)| w.shape().to_vec()).collect();
    let mut events = Vec::new();
    let mut excluded = 0;
    // without batch norm the training forward is the evaluation forward, so
    // its loss can stand in for a separate evaluation
    let has_bn = model.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)));
    for step in 0..steps {
        let (x, labels) = &batches[step % batches.len()];
        let before_eval = if has_bn { Some(model.evaluate(x, labels)?.0) } else { None };
        let r = compute_gradients(model, x, labels, None)?;
        let before_loss = before_eval.unwrap_or(r.loss);
        for (scores, grad) in popup_scores_mut(model)?.into_iter().zip(&r.grads) {
            let grad = grad.as_ref().ok_or_else(|| Error::Graph("missing score gradient".into()))?;
            let mut velocity = Tensor::zeros(grad.shape());
            score_step(scores, grad, &mut velocity, &cfg, AbsMode::Ranking)?;
        }
        let after = model.masks()?;
        let mut changed = Vec::new();
        for (i, (b, a)) in r.masks.iter().zip(&after).enumerate() {
            if let Some(e) = detect_swaps(b, a, i)? {
                changed.push(e);
            }
        }
        match changed.len() {
            0 => {}
            1 => {
                let after_loss = model.evaluate(x, labels)?.0;
                let e = changed.pop().expect("one event");
                let shape = shapes[e.layer_id].clone();
                events.push((e.with_losses(before_loss, after_loss), shape));
            }
            _ => excluded += 1,
        }
    }
    Ok((events, excluded))
}

/// Splits harvested events into the single-swap and general reports.
pub fn swap_reports(
    harvested: &[(SwapEvent, Vec<usize>)],
    excluded: usize,
    lr: f64,
    steps: usize,
    tolerance: f64,
) -> (SwapCheckReport, SwapCheckReport) {
    let pick = |kind| {
        harvested
            .iter()
            .filter(|(e, s)| qualifies(kind, e, s))
            .map(|(e, _)| e.clone())
            .collect::<Vec<_>>()
    };
    (
        SwapCheckReport::from_events(SwapKind::Single, pick(SwapKind::Single), lr, tolerance, steps, excluded),
        SwapCheckReport::from_events(SwapKind::General, pick(SwapKind::General), lr, tolerance, steps, excluded),
    )
}

pub fn single_swap_check<T: Element>(
    model: &mut Model<T>,
    batches: &[(Tensor<T>, Vec<usize>)],
    lr: f64,
    steps: usize,
) -> Result<SwapCheckReport> {
    let (h, ex) = harvest_swap_events(model, batches, lr, steps)?;
    Ok(swap_reports(&h, ex, lr, steps, 0.0).0)
}

pub fn multi_swap_check<T: Element>(
    model: &mut Model<T>,
    batches: &[(Tensor<T>, Vec<usize>)],
    lr: f64,
    steps: usize,
) -> Result<SwapCheckReport> {
    let (h, ex) = harvest_swap_events(model, batches, lr, steps)?;
    Ok(swap_reports(&h, ex, lr, steps, 0.0).1)
}

/// Default harvest setting: 4-class blobs in 64 dimensions, full-width MLP,
/// signed constant weights, k = 0.5, batches of 8. Wide layers keep each
/// swapped edge's contribution small, which is what keeps a swap first order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapHarvest {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub k: f64,
}

impl Default for SwapHarvest {
    fn default() -> Self {
        SwapHarvest {
            classes: 4,
            dim: 64,
            per_class: 100,
            batch_size: 8,
            steps: 3000,
            k: 0.5,
        }
    }
}

impl SwapHarvest {
    /// Builds the task and model from `seed`, harvests at `lr`, and returns the
    /// single-swap and general reports.
    pub fn run(&self, seed: u64, lr: f64) -> Result<(SwapCheckReport, SwapCheckReport)> {
        let root = RngStream::new(seed);
        let (train, _) = crate::data::synth_blobs(self.classes, self.dim, self.per_class, 1.0, &root.fork("data"))?;
        let arch = ArchSpec::new(ArchName::Mlp, Rational::new(1, 1)?, self.classes);
        let mut model = build_model::<f64>(
            &arch,
            &[self.dim],
            self.k,
            &InitSpec::new(InitKind::SignedKaimingConstant),
            Selection::EdgePopup {
                abs_mode: AbsMode::Ranking,
            },
            &root.fork("model"),
        )?;
        let plan = crate::data::BatchPlan::new(self.batch_size, root.fork("batches"), true);
        let batches = crate::data::batches(train.len(), &plan, 0)?
            .iter()
            .map(|idx| train.batch::<f64>(idx, None))
            .collect::<Result<Vec<_>>>()?;
        let (h, ex) = harvest_swap_events(&mut model, &batches, lr, self.steps)?;
        Ok(swap_reports(&h, ex, lr, self.steps, 0.0))
    }
}

/// Outcome of one engineered swap instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstructedSwap {
    pub layer: usize,
    pub pairs: usize,
    pub lr: f64,
    pub halvings: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Engineered swap happened alone and the loss strictly decreased.
    pub decreased: bool,
}

pub const MAX_HALVINGS: usize = 20;

fn popup_layer(weights: Tensor<f64>, scores: Tensor<f64>, k: f64) -> Result<Layer<f64>> {
    Ok(Layer::Linear(MaskedLinear {
        weights,
        selector: Selector::Popup {
            scores: PopupScores::new(scores, k)?,
            abs_mode: AbsMode::Ranking,
        },
    }))
}

fn relu_pattern(model: &Model<f64>, x: &Tensor<f64>) -> Result<Vec<bool>> {
    let Some(Layer::Linear(first)) = model.layers.first() else {
        return Err(Error::param("expected a leading linear layer"));
    };
    Ok(masked_linear_forward(x, first)?.data().iter().map(|&v| v > 0.0).collect())
}

fn score_grads(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<Vec<Tensor<f64>>> {
    compute_gradients(model, x, labels, None)?
        .grads
        .into_iter()
        .map(|g| g.ok_or_else(|| Error::Graph("missing score gradient".into())))
        .collect()
}

/// Builds a two-layer network in which `pairs` dropped edges of one layer
/// are about to replace `pairs` kept edges, then takes one score step.
///
/// The swapped edges get small weights so the change in each pre-activation
/// stays in the first-order regime. Their scores sit just on either side of
/// the selection threshold while every other score is far from it, and the
/// gradient ordering `max g(in) < min g(out)` is arranged by picking the
/// candidates. The step size starts at 1 and is halved until only the
/// engineered edges swap and the loss strictly drops, or
/// [`MAX_HALVINGS`] halvings are used up. Instances where the swap flips a
/// hidden ReLU are discarded and redrawn.
pub fn constructed_swap(seed: u64, pairs: usize, same_node: bool) -> Result<ConstructedSwap> {
    if pairs == 0 || (same_node && pairs != 1) {
        return Err(Error::param("same-node instances swap exactly one pair"));
    }
    const SHRINK: f64 = 0.02;
    let rng = RngStream::new(seed).fork("constructed-swap");
    let (d, h, c, n, k) = (6, 6, 3, 16, 0.5);
    let layer = (seed % 2) as usize;
    let mut data_rng = rng.fork("data");
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| data_rng.normal()).collect())?;
    let labels: Vec<usize> = (0..n).map(|_| data_rng.below(c)).collect();
    'attempts: for attempt in 0..200 {
        let ar = rng.fork(&format!("attempt{attempt}"));
        let shapes = [vec![h, d], vec![c, h]];
        let mut layers = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            let w = kaiming_normal(s, fan_in(s)?, &mut ar.fork(&format!("w{i}")))?;
            let scores: Tensor<f64> = score_init(s, fan_in(s)?, &mut ar.fork(&format!("s{i}")))?;
            layers.push(popup_layer(w, scores.map(f64::abs), k)?);
            if i == 0 {
                layers.push(Layer::Relu);
            }
        }
        let mut model = Model::from_layers(vec![d], k, layers);
        let mask = model.masks()?[layer].clone();
        let shape = &shapes[layer];
        let mut pick_rng = ar.fork("pick");
        let node = pick_rng.below(shape[0]);
        let (mut kept, mut dropped): (Vec<usize>, Vec<usize>) =
            (0..mask.len()).partition(|&e| mask.bits()[e]);
        if same_node {
            kept.retain(|&e| receiving_node(shape, e) == node);
            dropped.retain(|&e| receiving_node(shape, e) == node);
        }
        pick_rng.shuffle(&mut kept);
        pick_rng.shuffle(&mut dropped);
        if !same_node {
            kept.truncate(2 * pairs);
            dropped.truncate(2 * pairs);
        }
        if kept.len() < pairs || dropped.len() < pairs {
            continue;
        }
        {
            let (w, _) = model.masked_layers_mut().nth(layer).expect("layer exists");
            for &e in kept.iter().chain(&dropped) {
                w.data_mut()[e] *= SHRINK;
            }
        }
        let grads = score_grads(&mut model, &x, &labels)?;
        let g = grads[layer].data();
        let mut ins = dropped.clone();
        ins.sort_by(|&a, &b| g[a].total_cmp(&g[b]).then(a.cmp(&b)));
        ins.truncate(pairs);
        let mut outs = kept.clone();
        outs.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
        outs.truncate(pairs);
        let gap = outs.iter().map(|&e| g[e]).fold(f64::INFINITY, f64::min)
            - ins.iter().map(|&e| g[e]).fold(f64::NEG_INFINITY, f64::max);
        if !(gap > 0.0) {
            continue;
        }
        // far-apart scores for everything else; engineered edges straddle 2.0
        let eps = 1e-9 * gap;
        let mut place = ar.fork("place");
        let masks = model.masks()?;
        for (i, scores) in popup_scores_mut(&mut model)?.into_iter().enumerate() {
            for (e, s) in scores.scores.data_mut().iter_mut().enumerate() {
                *s = if masks[i].bits()[e] { 3.0 } else { 1.0 } + 0.1 * place.uniform();
            }
            if i == layer {
                for &e in &outs {
                    scores.scores.data_mut()[e] = 2.0 + eps;
                }
                for &e in &ins {
                    scores.scores.data_mut()[e] = 2.0 - eps;
                }
            }
        }
        let start = model.clone();
        let loss_before = start.evaluate(&x, &labels)?.0;
        let pattern = relu_pattern(&start, &x)?;
        let mut lr = 1.0;
        let mut outcome = None;
        for halvings in 0..=MAX_HALVINGS {
            let mut m = start.clone();
            let grads = score_grads(&mut m, &x, &labels)?;
            for (scores, g) in popup_scores_mut(&mut m)?.into_iter().zip(&grads) {
                for (s, &gv) in scores.scores.data_mut().iter_mut().zip(g.data()) {
                    *s -= lr * gv;
                }
            }
            let after = m.masks()?;
            let only_engineered = after.iter().enumerate().all(|(i, a)| {
                let b = &masks[i];
                let changed: Vec<usize> = (0..a.len()).filter(|&e| a.bits()[e] != b.bits()[e]).collect();
                if i != layer {
                    return changed.is_empty();
                }
                let mut want: Vec<usize> = ins.iter().chain(&outs).copied().collect();
                want.sort_unstable();
                changed == want
            });
            if only_engineered && relu_pattern(&m, &x)? != pattern {
                // the loss is only piecewise smooth; a flipped unit leaves
                // the regime the first-order argument covers
                continue 'attempts;
            }
            let loss_after = m.evaluate(&x, &labels)?.0;
            let res = ConstructedSwap {
                layer,
                pairs,
                lr,
                halvings,
                loss_before,
                loss_after,
                decreased: only_engineered && loss_after < loss_before,
            };
            if res.decreased {
                return Ok(res);
            }
            outcome = Some(res);
            lr *= 0.5;
        }
        return Ok(outcome.expect("at least one trial"));
    }
    Err(Error::Verification(format!(
        "could not arrange a swap instance for seed {seed}"
    )))
}

// --------------------------------------------------------------- brute force

pub const BRUTE_FORCE_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceResult {
    pub best_masks: Vec<Vec<bool>>,
    pub best_loss: f64,
    pub best_accuracy: f64,
    pub enumerated: u64,
    pub min_loss: f64,
    pub median_loss: f64,
    pub max_loss: f64,
}

fn set_mask<T: Element>(scores: &mut PopupScores<T>, bits: &[bool]) {
    for (s, &b) in scores.scores.data_mut().iter_mut().zip(bits) {
        *s = if b { T::one() } else { T::zero() };
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Evaluates every layerwise mask combination of an edge-popup model.
pub fn brute_force_subnets<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    k: f64,
) -> Result<BruteForceResult> {
    let sizes: Vec<usize> = model.masked_layers().map(|(w, _)| w.len()).collect();
    let total: BigUint = sizes.iter().map(|&n| subnetwork_count(n, k)).product();
    let enumerated = total
        .to_u64()
        .filter(|&t| t <= BRUTE_FORCE_BUDGET)
        .ok_or_else(|| {
            Error::param(format!(
                "{total} mask combinations exceed the budget of {BRUTE_FORCE_BUDGET}"
            ))
        })?;
    let mut base = model.clone();
    base.set_k(k)?;
    popup_scores_mut(&mut base)?;
    let per_layer: Vec<Vec<Vec<bool>>> = sizes
        .iter()
        .map(|&n| {
            (0..n)
                .combinations(keep_count(n, k))
                .map(|keep| {
                    let mut bits = vec![false; n];
                    keep.into_iter().for_each(|e| bits[e] = true);
                    bits
                })
                .collect()
        })
        .collect();
    let decode = |mut idx: u64| -> Vec<usize> {
        let mut out = vec![0; per_layer.len()];
        for (i, l) in per_layer.iter().enumerate().rev() {
            out[i] = (idx % l.len() as u64) as usize;
            idx /= l.len() as u64;
        }
        out
    };
    const CHUNK: u64 = 256;
    let chunks = enumerated.div_ceil(CHUNK);
    let results: Vec<Vec<(f64, usize)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut m = base.clone();
            let mut out = Vec::new();
            for idx in c * CHUNK..((c + 1) * CHUNK).min(enumerated) {
                let choice = decode(idx);
                for (l, scores) in popup_scores_mut(&mut m)?.into_iter().enumerate() {
                    set_mask(scores, &per_layer[l][choice[l]]);
                }
                out.push(m.evaluate(x, labels)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let results: Vec<(f64, usize)> = results.into_iter().flatten().collect();
    let losses: Vec<f64> = results.iter().map(|r| r.0).collect();
    let (best_idx, &(best_loss, best_correct)) = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
        .ok_or_else(|| Error::param("nothing to enumerate"))?;
    let choice = decode(best_idx as u64);
    Ok(BruteForceResult {
        best_masks: choice
            .iter()
            .enumerate()
            .map(|(l, &c)| per_layer[l][c].clone())
            .collect(),
        best_loss,
        best_accuracy: best_correct as f64 / labels.len().max(1) as f64,
        enumerated,
        min_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
        median_loss: median(&losses),
        max_loss: losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Trained subnetwork of a tiny model against its exhaustive optimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MicroReport {
    pub enumerated: u64,
    pub trained_loss: f64,
    pub trained_accuracy: f64,
    pub optimum_loss: f64,
    pub optimum_accuracy: f64,
    pub median_loss: f64,
    /// `(trained - optimum) / optimum`.
    pub rel_gap: f64,
}

/// Config of the micro instance: 2-class blobs in 4 dimensions and an MLP at
/// 1/128 width, so layers hold 8, 4 and 4 weights and k = 0.5 leaves
/// 70 * 6 * 6 = 2520 subnetworks.
pub fn micro_config(seed: u64, epochs: usize) -> Result<crate::config::TrainConfig> {
    crate::config::TrainConfig::from_toml(&format!(
        r#"
algorithm = "edge_popup"
k = 0.5
epochs = {epochs}
seed = {seed}
precision = "f64"
[arch]
name = "mlp"
width_multiplier = "1/128"
[init]
kind = "signed_constant"
[optimizer]
lr = 0.1
momentum = 0.9
weight_decay = 0.0
[dataset]
name = "blobs"
batch_size = 16
classes = 2
dim = 4
per_class = 50
data_seed = {seed}
"#
    ))
}

/// Trains edge-popup on the micro instance and enumerates every subnetwork of
/// the same frozen weights; losses are over the whole training split.
pub fn micro_instance(seed: u64, epochs: usize) -> Result<MicroReport> {
    let cfg = micro_config(seed, epochs)?;
    let (train, test) = crate::train::load_datasets(&cfg)?;
    let state = crate::train::train::<f64>(&cfg, &train, &test, |_| Ok(()))?;
    let (x, labels) = train.all::<f64>()?;
    let (trained_loss, correct) = state.model.evaluate(&x, &labels)?;
    let bf = brute_force_subnets(&state.model, &x, &labels, cfg.k)?;
    Ok(MicroReport {
        enumerated: bf.enumerated,
        trained_loss,
        trained_accuracy: correct as f64 / labels.len() as f64,
        optimum_loss: bf.best_loss,
        optimum_accuracy: bf.best_accuracy,
        median_loss: bf.median_loss,
        rel_gap: (trained_loss - bf.best_loss) / bf.best_loss,
    })
}

/// Losses of `count` uniformly random masks (fresh random scores) of a model.
pub fn random_mask_losses<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    count: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    (0..count)
        .map(|t| {
            let mut m = model.clone();
            let mut r = rng.fork(&format!("mask{t}"));
            for scores in popup_scores_mut(&mut m)? {
                let n = scores.scores.len();
                let fresh: Vec<T> = (0..n).map(|_| T::cast(r.uniform())).collect();
                scores.scores = Tensor::new(scores.scores.shape().to_vec(), fresh)?;
            }
            Ok(m.evaluate(x, labels)?.0)
        })
        .collect()
}

// ----------------------------------------------------------- gradient oracle

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// `max |a − b| / max(max |a|, max |b|)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn normal_tensor(shape: &[usize], rng: &mut RngStream) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

fn signed_scores(shape: &[usize], rng: &mut RngStream) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
}

fn popup_selector(scores: Tensor<f64>, k: f64) -> Result<Selector<f64>> {
    Ok(Selector::Popup {
        scores: PopupScores::new(scores, k)?,
        abs_mode: AbsMode::Ranking,
    })
}

/// Loss `Σ out ⊙ R` so that `∂L/∂I = R` exactly.
fn probe_loss(g: &mut Graph<f64>, out: crate::autograd::Var, rng: &mut RngStream) -> Result<(crate::autograd::Var, Tensor<f64>)> {
    let r = normal_tensor(g.value(out).shape(), rng)?;
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv)?;
    Ok((g.sum(prod)?, r))
}

/// Analytic linear score gradient vs autodiff through the masked layer.
pub fn linear_gradient_check(seed: u64) -> Result<GradientCheck> {
    let mut rng = RngStream::new(seed).fork("grad-linear");
    let (n, fin, fout) = (8, 12, 7);
    let w = kaiming_normal(&[fout, fin], fin, &mut rng)?;
    let scores = signed_scores(&[fout, fin], &mut rng)?;
    let layer = MaskedLinear {
        weights: w.clone(),
        selector: popup_selector(scores.clone(), 0.5)?,
    };
    let x = normal_tensor(&[n, fin], &mut rng)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (out, tape) = layer.forward_graph(&mut g, xv, true, None)?;
    let (loss, r) = probe_loss(&mut g, out, &mut rng)?;
    let grads = g.backward(loss)?;
    let auto = grads.get(tape.param.expect("trainable scores")).expect("score grad");
    let analytic = raw_score_grad(&scores, &linear_score_grad(&r, &x, &w)?)?;
    Ok(GradientCheck {
        name: "masked linear scores".into(),
        max_rel_err: max_rel_err(auto.data(), analytic.data()),
        threshold: 1e-6,
    })
}

/// Analytic conv score gradient (spatial sum) vs autodiff.
pub fn conv_gradient_check(seed: u64, stride: usize, padding: usize) -> Result<GradientCheck> {
    let mut rng = RngStream::new(seed).fork("grad-conv");
    let (n, c, hw, o, kk) = (2, 3, 7, 4, 3);
    let shape = [o, c, kk, kk];
    let w = kaiming_normal(&shape, c * kk * kk, &mut rng)?;
    let scores = signed_scores(&shape, &mut rng)?;
    let layer = MaskedConv::new(w.clone(), popup_selector(scores.clone(), 0.5)?, stride, padding)?;
    let x = normal_tensor(&[n, c, hw, hw], &mut rng)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (out, tape) = layer.forward_graph(&mut g, xv, true, None)?;
    let (loss, r) = probe_loss(&mut g, out, &mut rng)?;
    let grads = g.backward(loss)?;
    let auto = grads.get(tape.param.expect("trainable scores")).expect("score grad");
    let analytic = raw_score_grad(&scores, &conv_score_grad(&r, &x, &w, stride, padding)?)?;
    Ok(GradientCheck {
        name: format!("masked conv scores (stride {stride}, padding {padding})"),
        max_rel_err: max_rel_err(auto.data(), analytic.data()),
        threshold: 1e-6,
    })
}

/// Whole-network check: for every masked layer of a small conv net, the
/// analytic rule fed with the recorded `∂L/∂I` and `Z` vs autodiff.
pub fn network_gradient_check(seed: u64) -> Result<GradientCheck> {
    let rng = RngStream::new(seed).fork("grad-net");
    let arch = ArchSpec::new(ArchName::Conv2, Rational::new(1, 16)?, 3);
    let mut model = build_model::<f64>(
        &arch,
        &[2, 6, 6],
        0.5,
        &InitSpec::new(InitKind::KaimingNormal),
        Selection::EdgePopup {
            abs_mode: AbsMode::Ranking,
        },
        &rng.fork("model"),
    )?;
    let mut dr = rng.fork("data");
    let x = normal_tensor(&[3, 2, 6, 6], &mut dr)?;
    let labels: Vec<usize> = (0..3).map(|_| dr.below(3)).collect();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let f = model.forward(&mut g, xv, true, None)?;
    for t in &f.tapes {
        g.retain(t.output);
    }
    let loss = g.cross_entropy(f.logits, &labels)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (tape, layer) in f.tapes.iter().zip(model.layers.iter().filter(|l| l.masked().is_some())) {
        let up = grads.get(tape.output).expect("retained");
        let z = g.value(tape.input);
        let auto = grads.get(tape.param.expect("trainable")).expect("score grad");
        let key_grad = match layer {
            Layer::Linear(l) => linear_score_grad(up, z, &l.weights)?,
            Layer::Conv(c) => conv_score_grad(up, z, &c.weights, c.stride, c.padding)?,
            _ => unreachable!("filtered to masked layers"),
        };
        let (_, sel) = layer.masked().expect("masked");
        let Selector::Popup { scores, .. } = sel else {
            unreachable!("built as edge-popup")
        };
        let analytic = raw_score_grad(&scores.scores, &key_grad)?;
        worst = worst.max(max_rel_err(auto.data(), analytic.data()));
    }
    Ok(GradientCheck {
        name: "conv network scores (all layers)".into(),
        max_rel_err: worst,
        threshold: 1e-6,
    })
}

/// Dense (k = 1) weight gradients vs central finite differences.
pub fn dense_fd_check(seed: u64, arch: ArchName) -> Result<GradientCheck> {
    let rng = RngStream::new(seed).fork("grad-fd");
    let (spec, input) = match arch {
        ArchName::Mlp => (ArchSpec::new(ArchName::Mlp, Rational::new(1, 64)?, 3), vec![5]),
        a => (ArchSpec::new(a, Rational::new(1, 64)?, 3), vec![2, 4, 4]),
    };
    let mut model = build_model::<f64>(
        &spec,
        &input,
        1.0,
        &InitSpec::new(InitKind::KaimingNormal),
        Selection::Dense,
        &rng.fork("model"),
    )?;
    let mut dr = rng.fork("data");
    let mut xshape = vec![4];
    xshape.extend(&input);
    let x = normal_tensor(&xshape, &mut dr)?;
    let labels: Vec<usize> = (0..4).map(|_| dr.below(3)).collect();
    let auto = compute_gradients(&mut model, &x, &labels, None)?.grads;
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for (l, grad) in auto.iter().enumerate() {
        let grad = grad.as_ref().ok_or_else(|| Error::Graph("dense weights got no gradient".into()))?;
        let n = grad.len();
        let mut fd = vec![0.0; n];
        for (e, slot) in fd.iter_mut().enumerate() {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                let (w, _) = m.masked_layers_mut().nth(l).expect("layer");
                w.data_mut()[e] += delta;
                Ok(m.evaluate(&x, &labels)?.0)
            };
            *slot = (eval_at(H)? - eval_at(-H)?) / (2.0 * H);
        }
        worst = worst.max(max_rel_err(grad.data(), &fd));
    }
    Ok(GradientCheck {
        name: format!("dense {} weights vs finite differences", arch.name()),
        max_rel_err: worst,
        threshold: 1e-5,
    })
}

/// Every gradient check with pinned seeds.
pub fn gradient_oracle(seed: u64) -> Result<Vec<GradientCheck>> {
    Ok(vec![
        linear_gradient_check(seed)?,
        conv_gradient_check(seed, 1, 1)?,
        conv_gradient_check(seed, 2, 0)?,
        network_gradient_check(seed)?,
        dense_fd_check(seed, ArchName::Mlp)?,
        dense_fd_check(seed, ArchName::Conv2)?,
    ])
}

// ----------------------------------------------------------------- variance

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub k: f64,
    pub fan_in: usize,
    pub trials: usize,
    /// Masked output variance with the `√(1/k)` scaled init, over dense.
    pub scaled_ratio: f64,
    /// Masked output variance with the plain init, over dense.
    pub unscaled_ratio: f64,
}

/// Output variance of a masked linear layer (random top-k mask) relative to
/// the dense layer, for Kaiming Normal weights with and without scaling.
pub fn variance_property(fan_in: usize, k: f64, trials: usize, seed: u64) -> Result<VarianceReport> {
    const OUT: usize = 16;
    const BATCH: usize = 16;
    let rng = RngStream::new(seed).fork("variance");
    let spec = InitSpec::scaled(InitKind::KaimingNormal, k)?;
    let mut sums = [0.0f64; 3];
    for t in 0..trials {
        let mut r = rng.fork(&format!("trial{t}"));
        let w: Tensor<f64> = kaiming_normal(&[OUT, fan_in], fan_in, &mut r)?;
        let ws = apply_scale(&spec, &w)?;
        let scores = Tensor::new(vec![OUT, fan_in], (0..OUT * fan_in).map(|_| r.uniform()).collect())?;
        let mask = get_subnet(&scores, k)?.to_tensor::<f64>();
        let x = normal_tensor(&[BATCH, fan_in], &mut r)?;
        let mean_sq = |wt: &Tensor<f64>| -> Result<f64> {
            let y = ops::linear(&x, wt)?;
            Ok(y.data().iter().map(|v| v * v).sum::<f64>() / y.len() as f64)
        };
        sums[0] += mean_sq(&w)?;
        sums[1] += mean_sq(&w.zip_map(&mask, |a, b| a * b)?)?;
        sums[2] += mean_sq(&ws.zip_map(&mask, |a, b| a * b)?)?;
    }
    Ok(VarianceReport {
        k,
        fan_in,
        trials,
        scaled_ratio: sums[2] / sums[0],
        unscaled_ratio: sums[1] / sums[0],
    })
}

// -------------------------------------------------------------- top-k oracle

/// Reference selection: stable sort by `|s|`, zero the first `floor((1−k)·n)`.
pub fn topk_oracle(scores: &[f64], k: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].abs().total_cmp(&scores[b].abs()));
    let mut bits = vec![true; scores.len()];
    for &i in &order[..drop_count(scores.len(), k)] {
        bits[i] = false;
    }
    bits
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopkReport {
    pub trials: usize,
    pub matches: usize,
    pub ties: usize,
}

/// Random vectors (n ≤ 64, k ∈ {0.1, …, 0.9}); about half drawn from a tiny
/// value set so ties are common.
pub fn topk_suite(trials: usize, seed: u64) -> Result<TopkReport> {
    let mut rng = RngStream::new(seed).fork("topk");
    let mut matches = 0;
    let mut ties = 0;
    for _ in 0..trials {
        let n = 1 + rng.below(64);
        let k = (1 + rng.below(9)) as f64 / 10.0;
        let tied = rng.bernoulli(0.5);
        let v: Vec<f64> = (0..n)
            .map(|_| {
                if tied {
                    (rng.below(7) as f64 - 3.0) * 0.5
                } else {
                    rng.normal()
                }
            })
            .collect();
        ties += tied as usize;
        let got = get_subnet(&Tensor::new(vec![n], v.clone())?, k)?;
        let want = topk_oracle(&v, k);
        if got.bits() == want.as_slice() && got.count_ones() == keep_count(n, k) {
            matches += 1;
        }
    }
    Ok(TopkReport {
        trials,
        matches,
        ties,
    })
}

// ---------------------------------------------------------------- suites

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Topk,
    Gradients,
    Bruteforce,
    Variance,
    /// Single-edge swaps into one node.
    Swap,
    /// Balanced swap sets confined to one layer.
    SwapGeneral,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Topk,
        Suite::Gradients,
        Suite::Bruteforce,
        Suite::Variance,
        Suite::Swap,
        Suite::SwapGeneral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Topk => "topk",
            Suite::Gradients => "gradients",
            Suite::Bruteforce => "bruteforce",
            Suite::Variance => "variance",
            Suite::Swap => "swap",
            Suite::SwapGeneral => "swap_general",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown verify suite {s:?}")))
    }
}

/// One named check of a suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Constructed swap instances per suite run.
pub const CONSTRUCTED_INSTANCES: u64 = 40;
/// Epochs of edge-popup training on the micro instance.
pub const MICRO_EPOCHS: usize = 50;

fn line(name: impl Into<String>, passed: bool, detail: String) -> CheckLine {
    CheckLine {
        name: name.into(),
        passed,
        detail,
    }
}

fn swap_lines(kind: SwapKind, seed: u64) -> Result<Vec<CheckLine>> {
    let (pairs, same_node, label) = match kind {
        SwapKind::Single => (1, true, "single"),
        SwapKind::General => (3, false, "general"),
    };
    let mut ok = 0;
    let mut worst = 0;
    for i in 0..CONSTRUCTED_INSTANCES {
        let c = constructed_swap(seed.wrapping_add(i), pairs, same_node)?;
        ok += usize::from(c.decreased && c.halvings <= MAX_HALVINGS);
        worst = worst.max(c.halvings);
    }
    let mut out = vec![line(
        format!("{label} constructed"),
        ok as u64 == CONSTRUCTED_INSTANCES,
        format!("{ok}/{CONSTRUCTED_INSTANCES} strict decreases, at most {worst} halvings"),
    )];
    for (lr, threshold) in [(1e-5, 0.99), (1e-4, 0.95)] {
        let (single, general) = SwapHarvest::default().run(seed, lr)?;
        let r = if kind == SwapKind::Single { single } else { general };
        let detail = match r.fraction_ok() {
            Some(f) => format!(
                "{}/{} non-increasing ({:.2}%, need {:.0}%), {} multi-layer steps skipped",
                r.decreased,
                r.events.len(),
                100.0 * f,
                100.0 * threshold,
                r.excluded
            ),
            None => format!("no qualifying events in {} steps", r.steps),
        };
        out.push(line(format!("{label} harvested lr={lr:e}"), r.passes(threshold), detail));
    }
    Ok(out)
}

/// Runs a suite with pinned seeds derived from `seed`.
pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Topk => {
            let r = topk_suite(1000, seed)?;
            vec![line(
                "get_subnet vs stable sort",
                r.matches == r.trials,
                format!("{}/{} match ({} with ties)", r.matches, r.trials, r.ties),
            )]
        }
        Suite::Gradients => gradient_oracle(seed)?
            .into_iter()
            .map(|g| {
                let detail = format!("max rel err {:.3e} (< {:.0e})", g.max_rel_err, g.threshold);
                line(g.name.clone(), g.passed(), detail)
            })
            .collect(),
        Suite::Bruteforce => {
            let r = micro_instance(seed, MICRO_EPOCHS)?;
            vec![line(
                "micro instance vs exhaustive optimum",
                r.rel_gap <= 0.05,
                format!(
                    "trained loss {:.5}, optimum {:.5} over {} masks, gap {:.2}% (<= 5%)",
                    r.trained_loss,
                    r.optimum_loss,
                    r.enumerated,
                    100.0 * r.rel_gap
                ),
            )]
        }
        Suite::Variance => {
            let mut out = Vec::new();
            for k in [0.3, 0.5] {
                let r = variance_property(1024, k, 100, seed)?;
                out.push(line(
                    format!("scaled k={k}"),
                    (r.scaled_ratio - 1.0).abs() <= 0.10,
                    format!("masked/dense variance {:.4} (1 +- 10%)", r.scaled_ratio),
                ));
                out.push(line(
                    format!("unscaled k={k}"),
                    (r.unscaled_ratio / k - 1.0).abs() <= 0.15,
                    format!("masked/dense variance {:.4} ({k} +- 15%)", r.unscaled_ratio),
                ));
            }
            out
        }
        Suite::Swap => swap_lines(SwapKind::Single, seed)?,
        Suite::SwapGeneral => swap_lines(SwapKind::General, seed)?,
    };
    Ok(SuiteReport { suite, checks })
}
