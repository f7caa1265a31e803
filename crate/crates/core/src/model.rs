//! VGG-like ConvN networks and the MLP, built from masked layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::{fan_in, score_init, InitSpec};
use crate::layers::{FrozenBatchNorm, LayerTape, MaskedConv, MaskedLinear, Selector};
use crate::popup::{keep_count, AbsMode, BinaryMask, PopupScores};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};
use crate::zhou::{StochasticMask, ZhouEval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ArchName {
    Conv2,
    Conv4,
    Conv6,
    Conv8,
    Mlp,
}

impl ArchName {
    pub fn name(self) -> &'static str {
        match self {
            ArchName::Conv2 => "conv2",
            ArchName::Conv4 => "conv4",
            ArchName::Conv6 => "conv6",
            ArchName::Conv8 => "conv8",
            ArchName::Mlp => "mlp",
        }
    }

    /// Number of two-conv blocks.
    pub fn conv_blocks(self) -> usize {
        match self {
            ArchName::Conv2 => 1,
            ArchName::Conv4 => 2,
            ArchName::Conv6 => 3,
            ArchName::Conv8 => 4,
            ArchName::Mlp => 0,
        }
    }
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv2" => ArchName::Conv2,
            "conv4" => ArchName::Conv4,
            "conv6" => ArchName::Conv6,
            "conv8" => ArchName::Conv8,
            "mlp" => ArchName::Mlp,
            _ => {
                return Err(Error::Config(format!(
                    "unknown arch `{s}` (expected conv2, conv4, conv6, conv8 or mlp)"
                )))
            }
        })
    }
}

impl TryFrom<String> for ArchName {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ArchName> for String {
    fn from(a: ArchName) -> String {
        a.name().to_string()
    }
}

/// Positive rational width multiplier, e.g. `2`, `0.5`, `3/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Rational {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::param(format!("width multiplier {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Rational {
            num: num / g,
            den: den / g,
        })
    }

    pub fn one() -> Self {
        Rational { num: 1, den: 1 }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `base · self`, which must be a whole number.
    pub fn scale(self, base: usize) -> Result<usize> {
        let prod = base as u64 * self.num;
        if !prod.is_multiple_of(self.den) {
            return Err(Error::param(format!(
                "width {base} x {self} = {} is not integral",
                prod as f64 / self.den as f64
            )));
        }
        Ok((prod / self.den) as usize)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Rational {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("width multiplier `{s}` is not a positive rational"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Rational::new(n, d).map_err(|_| bad());
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 12 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Rational::new(int * den + frac_v, den).map_err(|_| bad())
    }
}

impl TryFrom<String> for Rational {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Rational> for String {
    fn from(r: Rational) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: ArchName,
    pub width_multiplier: Rational,
    pub classes: usize,
}

pub const CONV_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const FC_WIDTH: usize = 256;

impl ArchSpec {
    pub fn new(name: ArchName, width_multiplier: Rational, classes: usize) -> Self {
        ArchSpec {
            name,
            width_multiplier,
            classes,
        }
    }

    /// Conv output channels, two per block.
    pub fn conv_widths(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &w in &CONV_WIDTHS[..self.name.conv_blocks()] {
            let w = self.width_multiplier.scale(w)?;
            out.extend([w, w]);
        }
        Ok(out)
    }

    /// Fully connected output widths; the classifier is never scaled.
    pub fn fc_widths(&self) -> Result<Vec<usize>> {
        let h = self.width_multiplier.scale(FC_WIDTH)?;
        Ok(vec![h, h, self.classes])
    }

    /// Weight tensor shapes of every masked layer for a given input shape.
    pub fn weight_shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::new();
        let fc_in = if self.name == ArchName::Mlp {
            input_shape.iter().product()
        } else {
            let [c, h, w] = match input_shape {
                [c, h, w] => [*c, *h, *w],
                s => {
                    return Err(Error::dim(format!(
                        "conv models need a [C, H, W] input, got {s:?}"
                    )))
                }
            };
            let (mut c, mut h, mut w) = (c, h, w);
            for (i, out) in self.conv_widths()?.into_iter().enumerate() {
                shapes.push(vec![out, c, 3, 3]);
                c = out;
                if i % 2 == 1 {
                    if h < 2 || w < 2 {
                        return Err(Error::dim("input too small for the pooling stages"));
                    }
                    h /= 2;
                    w /= 2;
                }
            }
            c * h * w
        };
        let mut prev = fc_in;
        for out in self.fc_widths()? {
            shapes.push(vec![out, prev]);
            prev = out;
        }
        Ok(shapes)
    }
}

/// Which training algorithm the masked layers are set up for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    EdgePopup { abs_mode: AbsMode },
    Zhou { eval: ZhouEval },
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Element> {
    Linear(MaskedLinear<T>),
    Conv(MaskedConv<T>),
    Relu,
    MaxPool2,
    Flatten,
    BatchNorm(FrozenBatchNorm<T>),
}

impl<T: Element> Layer<T> {
    pub fn masked(&self) -> Option<(&Tensor<T>, &Selector<T>)> {
        match self {
            Layer::Linear(l) => Some((&l.weights, &l.selector)),
            Layer::Conv(c) => Some((&c.weights, &c.selector)),
            _ => None,
        }
    }

    pub fn masked_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Selector<T>)> {
        match self {
            Layer::Linear(l) => Some((&mut l.weights, &mut l.selector)),
            Layer::Conv(c) => Some((&mut c.weights, &mut c.selector)),
            _ => None,
        }
    }
}

/// Result of one forward pass on a graph.
pub struct Forward {
    pub logits: Var,
    pub tapes: Vec<LayerTape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element> {
    pub arch: Option<ArchSpec>,
    pub input_shape: Vec<usize>,
    pub k: f64,
    pub layers: Vec<Layer<T>>,
}

fn make_selector<T: Element>(
    selection: Selection,
    shape: &[usize],
    k: f64,
    rng: &mut RngStream,
) -> Result<Selector<T>> {
    let fan = fan_in(shape)?;
    Ok(match selection {
        Selection::EdgePopup { abs_mode } => {
            let mut scores: Tensor<T> = score_init(shape, fan, rng)?;
            if abs_mode == AbsMode::Clamp {
                scores = scores.map(|v| v.abs());
            }
            Selector::Popup {
                scores: PopupScores::new(scores, k)?,
                abs_mode,
            }
        }
        Selection::Zhou { eval } => Selector::Stochastic {
            mask: StochasticMask::new(score_init(shape, fan, rng)?),
            eval,
        },
        Selection::Dense => Selector::Dense,
    })
}

/// Builds a masked network: frozen weights drawn from `init`, fresh scores.
///
/// Each masked layer `i` draws its weights from `rng/layer{i}/weights` and its
/// scores from `rng/layer{i}/scores`.
pub fn build_model<T: Element>(
    arch: &ArchSpec,
    input_shape: &[usize],
    k: f64,
    init: &InitSpec,
    selection: Selection,
    rng: &RngStream,
) -> Result<Model<T>> {
    crate::init::check_keep_fraction(k)?;
    let shapes = arch.weight_shapes(input_shape)?;
    let n_conv = arch.conv_widths()?.len();
    let mut layers = Vec::new();
    for (i, shape) in shapes.iter().enumerate() {
        let layer_rng = rng.fork(&format!("layer{i}"));
        let weights: Tensor<T> = init.sample(shape, &mut layer_rng.fork("weights"))?;
        let selector = make_selector(selection, shape, k, &mut layer_rng.fork("scores"))?;
        if i < n_conv {
            layers.push(Layer::Conv(MaskedConv::new(weights, selector, 1, 1)?));
            layers.push(Layer::Relu);
            if i % 2 == 1 {
                layers.push(Layer::MaxPool2);
            }
        } else {
            if i == n_conv {
                layers.push(Layer::Flatten);
            }
            layers.push(Layer::Linear(MaskedLinear { weights, selector }));
            if i + 1 < shapes.len() {
                layers.push(Layer::Relu);
            }
        }
    }
    Ok(Model {
        arch: Some(*arch),
        input_shape: input_shape.to_vec(),
        k,
        layers,
    })
}

impl<T: Element> Model<T> {
    /// Model from explicit layers (used for hand-built verification networks).
    pub fn from_layers(input_shape: Vec<usize>, k: f64, layers: Vec<Layer<T>>) -> Self {
        Model {
            arch: None,
            input_shape,
            k,
            layers,
        }
    }

    pub fn masked_layers(&self) -> impl Iterator<Item = (&Tensor<T>, &Selector<T>)> {
        self.layers.iter().filter_map(|l| l.masked())
    }

    pub fn masked_layers_mut(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, &mut Selector<T>)> {
        self.layers.iter_mut().filter_map(|l| l.masked_mut())
    }

    pub fn num_masked(&self) -> usize {
        self.masked_layers().count()
    }

    pub fn total_weights(&self) -> usize {
        self.masked_layers().map(|(w, _)| w.len()).sum()
    }

    /// Deterministic mask of each masked layer.
    pub fn masks(&self) -> Result<Vec<BinaryMask>> {
        self.masked_layers()
            .map(|(w, s)| s.current_mask(w.shape()))
            .collect()
    }

    pub fn weight_hashes(&self) -> Vec<[u8; 32]> {
        self.masked_layers().map(|(w, _)| w.content_hash()).collect()
    }

    /// Edge count `|E|` of the selected subnetwork.
    pub fn subnet_size(&self) -> Result<usize> {
        let mut total = 0;
        for (w, s) in self.masked_layers() {
            total += match s {
                Selector::Popup { scores, .. } => keep_count(w.len(), scores.k),
                Selector::Dense => w.len(),
                Selector::Stochastic { mask, .. } => mask.threshold().count_ones(),
            };
        }
        Ok(total)
    }

    /// Sets the keep fraction of every popup layer.
    pub fn set_k(&mut self, k: f64) -> Result<()> {
        crate::init::check_keep_fraction(k)?;
        self.k = k;
        for (_, s) in self.masked_layers_mut() {
            if let Selector::Popup { scores, .. } = s {
                scores.k = k;
            }
        }
        Ok(())
    }

    /// Records the forward pass on `g`.
    ///
    /// `train` makes the selector tensors (or dense weights) trainable leaves,
    /// draws stochastic masks from `step_rng/layer{i}`, and updates batch norm
    /// running statistics.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        train: bool,
        step_rng: Option<&RngStream>,
    ) -> Result<Forward> {
        let mut bn_stats = Vec::new();
        let f = self.record(g, x, train, step_rng, &mut bn_stats)?;
        for (i, (mean, var, count)) in bn_stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[i] {
                bn.update_running(&mean, &var, count);
            }
        }
        Ok(f)
    }

    /// Eval-mode forward; never mutates the model.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var, step_rng: Option<&RngStream>) -> Result<Forward> {
        self.record(g, x, false, step_rng, &mut Vec::new())
    }

    #[allow(clippy::type_complexity)]
    fn record(
        &self,
        g: &mut Graph<T>,
        x: Var,
        train: bool,
        step_rng: Option<&RngStream>,
        bn_stats: &mut Vec<(usize, (Vec<T>, Vec<T>, usize))>,
    ) -> Result<Forward> {
        let mut h = x;
        let mut tapes = Vec::new();
        let mut masked_idx = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut rng = step_rng.map(|r| r.fork(&format!("layer{masked_idx}")));
            h = match layer {
                Layer::Linear(l) => {
                    let (out, tape) = l.forward_graph(g, h, train, rng.as_mut())?;
                    tapes.push(tape);
                    masked_idx += 1;
                    out
                }
                Layer::Conv(c) => {
                    let (out, tape) = c.forward_graph(g, h, train, rng.as_mut())?;
                    tapes.push(tape);
                    masked_idx += 1;
                    out
                }
                Layer::Relu => g.relu(h)?,
                Layer::MaxPool2 => g.maxpool2(h)?,
                Layer::Flatten => g.flatten(h)?,
                Layer::BatchNorm(bn) => {
                    let (out, stats) = bn.forward_graph(g, h, train)?;
                    if let Some(s) = stats {
                        bn_stats.push((i, s));
                    }
                    out
                }
            };
        }
        let h = if g.value(h).ndim() == 2 { h } else { g.flatten(h)? };
        Ok(Forward { logits: h, tapes })
    }

    /// Deterministic logits without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.forward_eval(&mut g, xv, None)?;
        Ok(g.value(f.logits).clone())
    }

    /// Mean cross-entropy and number of correct predictions on a batch.
    pub fn evaluate(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, usize)> {
        let logits = self.predict(x)?;
        let (loss, _) = crate::ops::cross_entropy(&logits, labels)?;
        let correct = crate::ops::argmax_rows(&logits)
            .iter()
            .zip(labels)
            .filter(|(a, b)| a == b)
            .count();
        Ok((loss.as_f64(), correct))
    }
}
