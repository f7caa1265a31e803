//! Training steps and the epoch loop shared by every algorithm.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::{Algorithm, DatasetName, Precision, Schedule, TrainConfig};
use crate::data::{batches, load_cifar10, synth_blobs, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::layers::Selector;
use crate::model::{build_model, Model};
use crate::ops;
use crate::optim::{cosine_lr, OptimState, ParamRef};
use crate::popup::{detect_swaps, AbsMode, BinaryMask};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Optimizer-state name of the tensor masked layer `i` trains.
pub fn param_name<T: Element>(i: usize, selector: &Selector<T>) -> String {
    match selector {
        Selector::Popup { .. } => format!("layer{i}/scores"),
        Selector::Stochastic { .. } => format!("layer{i}/logits"),
        Selector::Dense => format!("layer{i}/weights"),
    }
}

/// Loss, accuracy and per-layer gradients of one training forward/backward.
#[derive(Debug, Clone)]
pub struct GradResult<T: Element> {
    pub loss: f64,
    pub correct: usize,
    /// Gradient of each masked layer's trainable tensor.
    pub grads: Vec<Option<Tensor<T>>>,
    /// Deterministic mask of each layer before the update.
    pub masks: Vec<BinaryMask>,
}

pub fn compute_gradients<T: Element>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    step_rng: Option<&RngStream>,
) -> Result<GradResult<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let f = model.forward(&mut g, xv, true, step_rng)?;
    let correct = ops::argmax_rows(g.value(f.logits))
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    let loss_var = g.cross_entropy(f.logits, labels)?;
    let loss = g.value(loss_var).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    let mut grads = g.backward(loss_var)?;
    let mut out = Vec::with_capacity(f.tapes.len());
    let mut masks = Vec::with_capacity(f.tapes.len());
    for ((i, tape), (w, sel)) in f.tapes.iter().enumerate().zip(model.masked_layers()) {
        let grad = tape.param.and_then(|p| grads.take(p));
        if let Some(gr) = &grad {
            if !gr.is_finite() {
                return Err(Error::NonFinite(format!("gradient of masked layer {i}")));
            }
        }
        out.push(grad);
        masks.push(match (sel, &tape.mask) {
            (Selector::Popup { .. }, Some(m)) => m.clone(),
            _ => sel.current_mask(w.shape())?,
        });
    }
    Ok(GradResult {
        loss,
        correct,
        grads: out,
        masks,
    })
}

/// Hands each layer's gradient to the optimizer; frozen weights are offered
/// without a gradient so they can never be touched.
pub fn apply_gradients<T: Element>(
    model: &mut Model<T>,
    state: &mut OptimState<T>,
    grads: &[Option<Tensor<T>>],
) -> Result<()> {
    let names: Vec<(String, String)> = model
        .masked_layers()
        .enumerate()
        .map(|(i, (_, s))| (format!("layer{i}/weights"), param_name(i, s)))
        .collect();
    let mut refs = Vec::new();
    for ((i, (weights, selector)), (wname, pname)) in
        model.masked_layers_mut().enumerate().zip(&names)
    {
        let grad = grads.get(i).and_then(|g| g.as_ref());
        match selector {
            Selector::Dense => refs.push(ParamRef {
                name: wname,
                value: weights,
                grad,
                frozen: false,
            }),
            Selector::Popup { scores, .. } => {
                refs.push(ParamRef {
                    name: wname,
                    value: weights,
                    grad: None,
                    frozen: true,
                });
                refs.push(ParamRef {
                    name: pname,
                    value: &mut scores.scores,
                    grad,
                    frozen: false,
                });
            }
            Selector::Stochastic { mask, .. } => {
                refs.push(ParamRef {
                    name: wname,
                    value: weights,
                    grad: None,
                    frozen: true,
                });
                refs.push(ParamRef {
                    name: pname,
                    value: &mut mask.logits,
                    grad,
                    frozen: false,
                });
            }
        }
    }
    state.step(refs)?;
    for (_, s) in model.masked_layers_mut() {
        if let Selector::Popup {
            scores,
            abs_mode: AbsMode::Clamp,
        } = s
        {
            scores.scores.data_mut().iter_mut().for_each(|v| *v = v.abs());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    /// Edges that entered each layer's subnetwork in this step.
    pub swaps: Vec<usize>,
}

/// One optimizer step on a batch.
pub fn train_step<T: Element>(
    model: &mut Model<T>,
    state: &mut OptimState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    step_rng: Option<&RngStream>,
) -> Result<StepStats> {
    let r = compute_gradients(model, x, labels, step_rng)?;
    apply_gradients(model, state, &r.grads)?;
    let after = model.masks()?;
    let mut swaps = Vec::with_capacity(after.len());
    for (i, (b, a)) in r.masks.iter().zip(&after).enumerate() {
        swaps.push(detect_swaps(b, a, i)?.map_or(0, |e| e.entered.len()));
    }
    Ok(StepStats {
        loss: r.loss,
        correct: r.correct,
        swaps,
    })
}

/// Mean loss and accuracy over a dataset, evaluated in chunks.
pub fn evaluate_dataset<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    eval_rng: Option<&RngStream>,
) -> Result<(f64, f64)> {
    const CHUNK: usize = 500;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for (c, chunk) in idx.chunks(CHUNK).enumerate() {
        let (x, labels) = data.batch::<T>(chunk, None)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let rng = eval_rng.map(|r| r.fork(&format!("chunk{c}")));
        let f = model.forward_eval(&mut g, xv, rng.as_ref())?;
        let logits = g.value(f.logits);
        let (loss, _) = ops::cross_entropy(logits, &labels)?;
        loss_sum += loss.as_f64() * chunk.len() as f64;
        correct += ops::argmax_rows(logits)
            .iter()
            .zip(&labels)
            .filter(|(a, b)| a == b)
            .count();
    }
    let n = data.len().max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub swaps: Vec<usize>,
}

impl MetricsRow {
    pub fn csv_header(layers: usize) -> String {
        let mut h = String::from("epoch,train_loss,train_acc,test_loss,test_acc,lr");
        for i in 0..layers {
            h.push_str(&format!(",swaps_{i}"));
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.test_loss, self.test_acc, self.lr
        );
        for v in &self.swaps {
            s.push_str(&format!(",{v}"));
        }
        s
    }
}

/// Per-epoch rows, append-only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn to_csv(&self, layers: usize) -> String {
        let mut out = MetricsRow::csv_header(layers);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

pub fn scheduled_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule() {
        Schedule::Cosine => cosine_lr(epoch, cfg.epochs, cfg.optimizer.lr),
        Schedule::Constant => cfg.optimizer.lr,
    }
}

/// Model plus optimizer state of a run in progress.
#[derive(Debug, Clone)]
pub struct TrainState<T: Element> {
    pub model: Model<T>,
    pub optim: OptimState<T>,
    pub epoch: usize,
    pub metrics: RunMetrics,
    pub initial_weight_hashes: Vec<[u8; 32]>,
}

impl<T: Element> TrainState<T> {
    pub fn init(cfg: &TrainConfig, sample_shape: &[usize]) -> Result<Self> {
        let root = RngStream::new(cfg.seed);
        let model = build_model(
            &cfg.arch_spec(),
            sample_shape,
            cfg.k,
            &cfg.init_spec()?,
            cfg.selection(),
            &root.fork("model"),
        )?;
        let initial_weight_hashes = model.weight_hashes();
        Ok(TrainState {
            model,
            optim: OptimState::new(cfg.optimizer()),
            epoch: 0,
            metrics: RunMetrics::default(),
            initial_weight_hashes,
        })
    }

    /// Frozen weights must hash exactly as they did at initialization.
    pub fn check_frozen_weights(&self) -> Result<()> {
        let now = self.model.weight_hashes();
        for (i, ((_, s), (a, b))) in self
            .model
            .masked_layers()
            .zip(now.iter().zip(&self.initial_weight_hashes))
            .enumerate()
        {
            if s.weights_frozen() && a != b {
                return Err(Error::Verification(format!(
                    "frozen weights of masked layer {i} changed during training"
                )));
            }
        }
        Ok(())
    }

    /// Runs one epoch and appends its metrics row.
    pub fn run_epoch(&mut self, cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<&MetricsRow> {
        let root = RngStream::new(cfg.seed);
        let epoch = self.epoch;
        let lr = scheduled_lr(cfg, epoch);
        self.optim.set_lr(lr);
        let plan = BatchPlan::new(cfg.dataset.batch_size, root.fork("batches"), cfg.dataset.drop_last);
        let stochastic = cfg.algorithm == Algorithm::Zhou;
        let layers = self.model.num_masked();
        let mut swaps = vec![0usize; layers];
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, idx) in batches(train.len(), &plan, epoch)?.iter().enumerate() {
            let mut aug = cfg
                .dataset
                .augment
                .then(|| root.fork("augment").fork(&format!("epoch{epoch}/batch{b}")));
            let (x, labels) = train.batch::<T>(idx, aug.as_mut())?;
            let step = self.optim.steps();
            let step_rng = stochastic.then(|| root.fork("step").fork(&step.to_string()));
            let stats = train_step(&mut self.model, &mut self.optim, &x, &labels, step_rng.as_ref())
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} (epoch {epoch}, step {step}, lr {lr})"
                    )),
                    e => e,
                })?;
            loss_sum += stats.loss * idx.len() as f64;
            correct += stats.correct;
            seen += idx.len();
            for (s, v) in swaps.iter_mut().zip(stats.swaps) {
                *s += v;
            }
        }
        self.check_frozen_weights()?;
        let eval_rng = root.fork("eval");
        let (test_loss, test_acc) = evaluate_dataset(&self.model, test, Some(&eval_rng))?;
        self.metrics.rows.push(MetricsRow {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_loss,
            test_acc,
            lr,
            swaps,
        });
        self.epoch += 1;
        Ok(self.metrics.rows.last().expect("row just pushed"))
    }
}

/// Trains for `cfg.epochs`, calling `on_epoch` after every completed epoch.
pub fn train<T: Element>(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<TrainState<T>> {
    let mut state = TrainState::init(cfg, train.sample_shape())?;
    while state.epoch < cfg.epochs {
        state.run_epoch(cfg, train, test)?;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Train and test splits named by the dataset block.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    match d.name {
        DatasetName::Blobs => synth_blobs(d.classes, d.dim, d.per_class, d.spread, &RngStream::new(d.data_seed)),
        DatasetName::Cifar10 => {
            let dir = cfg.data_dir().ok_or_else(|| {
                Error::Config(format!(
                    "cifar10 needs dataset.data_dir or ${}",
                    crate::config::DATA_DIR_ENV
                ))
            })?;
            load_cifar10(&dir)
        }
    }
}

/// Final numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub test_acc: f64,
    pub test_loss: f64,
    pub train_loss: f64,
    pub edges: usize,
    pub epochs: usize,
}

fn summarize<T: Element>(state: &TrainState<T>) -> Result<RunSummary> {
    let last = state
        .metrics
        .last()
        .ok_or_else(|| Error::Config("run needs at least one epoch".into()))?;
    Ok(RunSummary {
        test_acc: last.test_acc,
        test_loss: last.test_loss,
        train_loss: last.train_loss,
        edges: state.model.subnet_size()?,
        epochs: state.epoch,
    })
}

/// Trains `cfg` at its configured precision and reports the last epoch.
pub fn run_to_summary(cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => summarize(&train::<f32>(cfg, train_set, test_set, |_| Ok(()))?),
        Precision::F64 => summarize(&train::<f64>(cfg, train_set, test_set, |_| Ok(()))?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn cfg(algorithm: &str, epochs: usize) -> TrainConfig {
        TrainConfig::from_toml(&format!(
            r#"
algorithm = "{algorithm}"
k = 0.5
epochs = {epochs}
seed = 3
[arch]
name = "mlp"
width_multiplier = "1/8"
[init]
kind = "signed_constant"
[optimizer]
lr = 0.1
momentum = 0.9
weight_decay = 1e-4
[dataset]
name = "blobs"
batch_size = 16
classes = 4
dim = 8
per_class = 20
"#
        ))
        .unwrap()
    }

    fn blobs(c: &TrainConfig) -> (Dataset, Dataset) {
        synth_blobs(4, 8, 20, 1.0, &RngStream::new(c.dataset.data_seed)).unwrap()
    }

    #[test]
    fn popup_training_leaves_weights_and_moves_scores() {
        let c = cfg("edge_popup", 2);
        let (tr, te) = blobs(&c);
        let init = TrainState::<f32>::init(&c, tr.sample_shape()).unwrap();
        let done = train::<f32>(&c, &tr, &te, |_| Ok(())).unwrap();
        assert_eq!(done.model.weight_hashes(), init.model.weight_hashes());
        assert_ne!(done.model, init.model);
        assert_eq!(done.metrics.rows.len(), 2);
        assert_eq!(done.metrics.rows[0].swaps.len(), 3);
    }

    #[test]
    fn runs_are_deterministic() {
        for alg in ["edge_popup", "zhou", "dense_sgd"] {
            let c = cfg(alg, 2);
            let (tr, te) = blobs(&c);
            let a = train::<f64>(&c, &tr, &te, |_| Ok(())).unwrap();
            let b = train::<f64>(&c, &tr, &te, |_| Ok(())).unwrap();
            assert_eq!(a.metrics, b.metrics, "{alg}");
        }
    }

    #[test]
    fn tampering_with_frozen_weights_is_caught() {
        let c = cfg("edge_popup", 1);
        let (tr, _) = blobs(&c);
        let mut st = TrainState::<f32>::init(&c, tr.sample_shape()).unwrap();
        st.check_frozen_weights().unwrap();
        let (w, _) = st.model.masked_layers_mut().next().unwrap();
        w.data_mut()[0] += 1.0;
        assert!(matches!(st.check_frozen_weights(), Err(Error::Verification(_))));
    }

    #[test]
    fn exploding_lr_reports_non_finite() {
        let mut c = cfg("dense_sgd", 3);
        c.optimizer.lr = 1e30;
        let (tr, te) = blobs(&c);
        let e = train::<f32>(&c, &tr, &te, |_| Ok(())).unwrap_err();
        match e {
            Error::NonFinite(msg) => assert!(msg.contains("lr"), "{msg}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_layout() {
        let row = MetricsRow {
            epoch: 0,
            train_loss: 1.5,
            train_acc: 0.5,
            test_loss: 2.0,
            test_acc: 0.25,
            lr: 0.1,
            swaps: vec![3, 0],
        };
        assert_eq!(
            MetricsRow::csv_header(2),
            "epoch,train_loss,train_acc,test_loss,test_acc,lr,swaps_0,swaps_1"
        );
        assert_eq!(row.to_csv(), "0,1.5,0.5,2,0.25,0.1,3,0");
    }
}
