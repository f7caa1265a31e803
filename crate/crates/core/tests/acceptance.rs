//! Acceptance run: one pass/fail line per criterion, with its tolerance and
//! time budget. Runs without the libtest harness so the lines always show.

use std::time::Instant;

use edgepop_core::config::TrainConfig;
use edgepop_core::data::{Dataset, Split};
use edgepop_core::init::{InitKind, InitSpec};
use edgepop_core::layers::{masked_conv_forward, masked_linear_forward, MaskedConv, MaskedLinear, Selector};
use edgepop_core::model::{build_model, ArchName, ArchSpec, Layer, Model, Rational, Selection};
use edgepop_core::popup::{get_subnet, AbsMode, PopupScores};
use edgepop_core::rng::RngStream;
use edgepop_core::sweep::{mean_std, run_sweep, spearman, Axis, SweepSpec};
use edgepop_core::train::{compute_gradients, load_datasets, train, TrainState};
use edgepop_core::verify::{
    constructed_swap, gradient_oracle, micro_instance, random_mask_losses, SwapHarvest, SwapKind, MAX_HALVINGS,
    MICRO_EPOCHS,
};
use edgepop_core::{Result, Tensor};

type Check = fn() -> Result<(bool, String)>;

fn main() {
    let criteria: [(u8, &str, f64, Check); 9] = [
        (1, "top-k selection matches stable-sort oracle", 1.0, topk),
        (2, "score and dense gradients match oracles", 30.0, gradients),
        (3, "swaps decrease the mini-batch loss", 120.0, swaps),
        (4, "1x1 masked conv equals masked linear", 1.0, conv_linear),
        (5, "frozen weights never change", 60.0, immutability),
        (6, "scaled init restores forward variance", 30.0, variance),
        (7, "desk training on blobs", 600.0, desk_training),
        (8, "k and width trends", 3600.0, trends),
        (9, "CIFAR-10 Conv2 headline", f64::INFINITY, cifar),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok((_, d)) if d.starts_with("SKIPPED") => ("SKIP", d),
            Ok((true, d)) if secs < budget => ("PASS", d),
            Ok((true, d)) => ("FAIL", format!("{d}; over the {budget}s budget")),
            Ok((false, d)) => ("FAIL", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        failed += usize::from(status == "FAIL");
        println!("criterion {id} [{status}] {name} ({secs:.1}s): {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn normal_tensor(shape: &[usize], r: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.normal()).collect()).unwrap()
}

// ------------------------------------------------------------------ 1

fn topk() -> Result<(bool, String)> {
    let mut r = RngStream::new(1);
    let (mut matches, mut ties) = (0, 0);
    let trials = 1000;
    for t in 0..trials {
        let n = 1 + r.below(64);
        let k = (1 + r.below(9)) as f64 / 10.0;
        let scores: Vec<f64> = if t % 2 == 0 {
            (0..n).map(|_| r.normal()).collect()
        } else {
            (0..n).map(|_| (r.below(7) as f64 - 3.0) * 0.5).collect()
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].abs().total_cmp(&scores[b].abs()));
        let drop = ((1.0 - k) * n as f64).floor() as usize;
        let mut expect = vec![true; n];
        order[..drop].iter().for_each(|&i| expect[i] = false);
        let mut abs: Vec<f64> = scores.iter().map(|v| v.abs()).collect();
        abs.sort_by(f64::total_cmp);
        ties += usize::from(abs.windows(2).any(|w| w[0] == w[1]));
        let got = get_subnet(&Tensor::new(vec![n], scores)?, k)?;
        matches += usize::from(got.bits() == &expect[..] && got.count_ones() == n - drop);
    }
    Ok((matches == trials, format!("{matches}/{trials} exact ({ties} with tied magnitudes)")))
}

// ------------------------------------------------------------------ 2

fn linear_layers(model: &Model<f64>) -> Vec<&MaskedLinear<f64>> {
    model
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Linear(m) => Some(m),
            _ => None,
        })
        .collect()
}

/// `x · Wᵀ` with plain loops.
fn mat_wt(x: &[f64], n: usize, fin: usize, w: &[f64], fout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    for b in 0..n {
        for v in 0..fout {
            out[b * fout + v] = (0..fin).map(|u| x[b * fin + u] * w[v * fin + u]).sum();
        }
    }
    out
}

/// Straight-through score gradients of a 3-layer ReLU MLP, by hand.
fn ste_oracle(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> Vec<Vec<f64>> {
    let layers = linear_layers(model);
    let n = labels.len();
    let eff: Vec<(Vec<f64>, usize, usize, Vec<f64>)> = layers
        .iter()
        .map(|l| {
            let Selector::Popup { scores, .. } = &l.selector else { panic!("popup model") };
            let m = scores.mask().unwrap();
            let w: Vec<f64> = l.weights.data().iter().zip(m.bits()).map(|(w, &b)| if b { *w } else { 0.0 }).collect();
            let sign = scores.scores.data().iter().map(|s| if *s > 0.0 { 1.0 } else if *s < 0.0 { -1.0 } else { 0.0 }).collect();
            (w, l.out_features(), l.in_features(), sign)
        })
        .collect();
    // forward, keeping each layer's input and pre-activation
    let mut inputs = vec![x.data().to_vec()];
    let mut pre = Vec::new();
    for (i, (w, fout, fin, _)) in eff.iter().enumerate() {
        let z = mat_wt(inputs.last().unwrap(), n, *fin, w, *fout);
        pre.push(z.clone());
        if i + 1 < eff.len() {
            inputs.push(z.iter().map(|v| v.max(0.0)).collect());
        }
    }
    let classes = eff.last().unwrap().1;
    let logits = pre.last().unwrap();
    let mut delta = vec![0.0; n * classes];
    for b in 0..n {
        let row = &logits[b * classes..(b + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for c in 0..classes {
            let p = (row[c] - mx).exp() / z;
            delta[b * classes + c] = (p - f64::from(u8::from(c == labels[b]))) / n as f64;
        }
    }
    let mut grads = vec![Vec::new(); eff.len()];
    for i in (0..eff.len()).rev() {
        let (w, fout, fin, sign) = &eff[i];
        let a = &inputs[i];
        let orig = layers[i].weights.data();
        let mut g = vec![0.0; fout * fin];
        for v in 0..*fout {
            for u in 0..*fin {
                let key: f64 = (0..n).map(|b| delta[b * fout + v] * orig[v * fin + u] * a[b * fin + u]).sum();
                g[v * fin + u] = key * sign[v * fin + u];
            }
        }
        grads[i] = g;
        if i > 0 {
            let mut next = vec![0.0; n * fin];
            for b in 0..n {
                for u in 0..*fin {
                    let s: f64 = (0..*fout).map(|v| delta[b * fout + v] * w[v * fin + u]).sum();
                    next[b * fin + u] = if pre[i - 1][b * fin + u] > 0.0 { s } else { 0.0 };
                }
            }
            delta = next;
        }
    }
    grads
}

fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn small_mlp(selection: Selection, seed: u64) -> Result<(Model<f64>, Tensor<f64>, Vec<usize>)> {
    let arch = ArchSpec::new(ArchName::Mlp, Rational::new(1, 32)?, 3);
    let model = build_model::<f64>(&arch, &[6], 0.5, &InitSpec::new(InitKind::KaimingNormal), selection, &RngStream::new(seed))?;
    let mut r = RngStream::new(seed + 100);
    let x = normal_tensor(&[5, 6], &mut r);
    let labels = (0..5).map(|_| r.below(3)).collect();
    Ok((model, x, labels))
}

fn gradients() -> Result<(bool, String)> {
    let mut lines = Vec::new();
    let mut ok = true;
    for c in gradient_oracle(0)? {
        ok &= c.passed();
        lines.push(format!("{} {:.1e}", c.name, c.max_rel_err));
    }
    // hand-written straight-through backprop vs the autodiff engine
    let mut worst_ste: f64 = 0.0;
    for seed in 0..5 {
        let (mut model, x, labels) = small_mlp(Selection::EdgePopup { abs_mode: AbsMode::Ranking }, seed)?;
        let oracle = ste_oracle(&model, &x, &labels);
        let r = compute_gradients(&mut model, &x, &labels, None)?;
        for (g, o) in r.grads.iter().zip(&oracle) {
            worst_ste = worst_ste.max(vec_rel_err(g.as_ref().unwrap().data(), o));
        }
    }
    ok &= worst_ste < 1e-6;
    lines.push(format!("hand STE backprop {worst_ste:.1e} (< 1e-6)"));
    // dense weights vs central differences of the full model loss
    let mut worst_fd: f64 = 0.0;
    for seed in 0..3 {
        let (mut model, x, labels) = small_mlp(Selection::Dense, seed)?;
        let r = compute_gradients(&mut model, &x, &labels, None)?;
        let h = 1e-6;
        for (li, g) in r.grads.iter().enumerate() {
            let g = g.as_ref().unwrap();
            let mut fd = vec![0.0; g.len()];
            for (e, slot) in fd.iter_mut().enumerate() {
                let loss_at = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    let (w, _) = m.masked_layers_mut().nth(li).unwrap();
                    w.data_mut()[e] += delta;
                    Ok(m.evaluate(&x, &labels)?.0)
                };
                *slot = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
            }
            worst_fd = worst_fd.max(vec_rel_err(g.data(), &fd));
        }
    }
    ok &= worst_fd < 1e-5;
    lines.push(format!("dense model finite differences {worst_fd:.1e} (< 1e-5)"));
    Ok((ok, lines.join("; ")))
}

// ------------------------------------------------------------------ 3

fn swaps() -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, pairs, same_node) in [(SwapKind::Single, 1, true), (SwapKind::General, 3, false)] {
        let (mut good, mut worst) = (0, 0);
        for seed in 0..40 {
            let c = constructed_swap(seed, pairs, same_node)?;
            good += usize::from(c.decreased && c.halvings <= MAX_HALVINGS);
            worst = worst.max(c.halvings);
        }
        ok &= good == 40;
        parts.push(format!("constructed {kind:?}: {good}/40 strict decreases (max {worst} halvings)"));
    }
    for (lr, seeds, need) in [(1e-5, 0..3u64, 0.99), (1e-4, 0..1u64, 0.95)] {
        let (mut s_ok, mut s_n, mut g_ok, mut g_n) = (0, 0, 0, 0);
        for seed in seeds {
            let (single, general) = SwapHarvest::default().run(seed, lr)?;
            s_ok += single.decreased;
            s_n += single.events.len();
            g_ok += general.decreased;
            g_n += general.events.len();
        }
        let frac = |a: usize, n: usize| a as f64 / n as f64;
        // every single-node swap is also a one-layer swap set; an empty single
        // pool is reported, not counted as evidence
        ok &= g_n > 0 && frac(g_ok, g_n) >= need;
        ok &= s_n == 0 || frac(s_ok, s_n) >= need;
        let single = if s_n == 0 {
            "no single-node swaps observed".to_string()
        } else {
            format!("single-node {s_ok}/{s_n}")
        };
        parts.push(format!(
            "harvested lr={lr:e}: one-layer sets {g_ok}/{g_n} non-increasing (need {:.0}%), {single}",
            100.0 * need
        ));
    }
    Ok((ok, parts.join("; ")))
}

// ------------------------------------------------------------------ 4

fn conv_linear() -> Result<(bool, String)> {
    let mut r = RngStream::new(4);
    let trials = 200;
    let mut exact = 0;
    for _ in 0..trials {
        let (n, c, o) = (1 + r.below(6), 1 + r.below(16), 1 + r.below(16));
        let k = (1 + r.below(9)) as f64 / 10.0;
        let w = normal_tensor(&[o, c], &mut r);
        let s = normal_tensor(&[o, c], &mut r);
        let x = normal_tensor(&[n, c], &mut r);
        let sel = |shape: &[usize]| -> Result<Selector<f64>> {
            Ok(Selector::Popup { scores: PopupScores::new(s.reshape(shape)?, k)?, abs_mode: AbsMode::Ranking })
        };
        let lin = MaskedLinear { weights: w.clone(), selector: sel(&[o, c])? };
        let conv = MaskedConv::new(w.reshape(&[o, c, 1, 1])?, sel(&[o, c, 1, 1])?, 1, 0)?;
        let a = masked_linear_forward(&x, &lin)?;
        let b = masked_conv_forward(&x.reshape(&[n, c, 1, 1])?, &conv)?;
        exact += usize::from(a.data() == b.data());
    }
    Ok((exact == trials, format!("{exact}/{trials} bitwise equal")))
}

// ------------------------------------------------------------------ 5

fn blobs_config(algorithm: &str) -> TrainConfig {
    TrainConfig::from_toml(&format!(
        r#"
algorithm = "{algorithm}"
k = 0.5
epochs = 3
seed = 5
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
batch_size = 32
classes = 4
dim = 16
per_class = 50
"#
    ))
    .unwrap()
}

fn trainable_snapshot(model: &Model<f32>) -> Vec<Vec<f32>> {
    model
        .masked_layers()
        .map(|(_, s)| match s {
            Selector::Popup { scores, .. } => scores.scores.data().to_vec(),
            Selector::Stochastic { mask, .. } => mask.logits.data().to_vec(),
            Selector::Dense => Vec::new(),
        })
        .collect()
}

fn frozen_run(cfg: &TrainConfig, tr: &Dataset, te: &Dataset) -> Result<(bool, String)> {
    let init = TrainState::<f32>::init(cfg, tr.sample_shape())?;
    let state = train::<f32>(cfg, tr, te, |s| s.check_frozen_weights())?;
    let same_w = state.model.weight_hashes() == init.model.weight_hashes();
    let moved = trainable_snapshot(&state.model)
        .iter()
        .zip(trainable_snapshot(&init.model))
        .all(|(a, b)| *a != b);
    Ok((same_w && moved, format!("{}: weights identical {same_w}, every score tensor moved {moved}", cfg.algorithm.name())))
}

fn immutability() -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for alg in ["edge_popup", "zhou"] {
        let cfg = blobs_config(alg);
        let (tr, te) = load_datasets(&cfg)?;
        let (good, d) = frozen_run(&cfg, &tr, &te)?;
        ok &= good;
        parts.push(d);
    }
    // conv model with batch norm on small synthetic images
    let mut cfg = blobs_config("edge_popup");
    cfg.arch.name = ArchName::Conv2;
    cfg.arch.width_multiplier = Rational::new(1, 16)?;
    cfg.epochs = 2;
    let mut r = RngStream::new(9);
    let make = |n: usize, split, r: &mut RngStream| {
        let images = Tensor::new(vec![n, 3, 8, 8], (0..n * 192).map(|_| r.normal() as f32).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| i % 4).collect(), 4, split).unwrap()
    };
    let (tr, te) = (make(64, Split::Train, &mut r), make(16, Split::Test, &mut r));
    let (good, d) = frozen_run(&cfg, &tr, &te)?;
    ok &= good;
    parts.push(format!("conv2 {d}"));
    Ok((ok, parts.join("; ")))
}

// ------------------------------------------------------------------ 6

fn variance() -> Result<(bool, String)> {
    let fan = 1024;
    let trials = 100;
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [0.3, 0.5] {
        let mut r = RngStream::new(6);
        let (mut scaled, mut unscaled) = (0.0, 0.0);
        let var = |y: &[f64]| {
            let (m, _) = mean_std(y);
            y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64
        };
        for t in 0..trials {
            let x = normal_tensor(&[64, fan], &mut r);
            let mut wr = RngStream::new(1000 + t);
            let w: Tensor<f64> = InitSpec::new(InitKind::KaimingNormal).sample(&[16, fan], &mut wr)?;
            let mut wr = RngStream::new(1000 + t);
            let ws: Tensor<f64> = InitSpec::scaled(InitKind::KaimingNormal, k)?.sample(&[16, fan], &mut wr)?;
            // scores independent of the weights
            let mask = get_subnet(&normal_tensor(&[16, fan], &mut r), k)?;
            let apply = |w: &Tensor<f64>| {
                let d: Vec<f64> = w.data().iter().zip(mask.bits()).map(|(v, &b)| if b { *v } else { 0.0 }).collect();
                d
            };
            let dense = var(&mat_wt(x.data(), 64, fan, w.data(), 16));
            scaled += var(&mat_wt(x.data(), 64, fan, &apply(&ws), 16)) / dense;
            unscaled += var(&mat_wt(x.data(), 64, fan, &apply(&w), 16)) / dense;
        }
        let (s, u) = (scaled / trials as f64, unscaled / trials as f64);
        let good = (s - 1.0).abs() <= 0.10 && (u / k - 1.0).abs() <= 0.15;
        ok &= good;
        parts.push(format!("k={k}: scaled/dense {s:.4} (1 +- 10%), unscaled/dense {u:.4} ({k} +- 15%)"));
    }
    Ok((ok, parts.join("; ")))
}

// ------------------------------------------------------------------ 7

/// Ridge regression onto one-hot targets, solved by Gaussian elimination.
fn linear_probe(train: &Dataset, test: &Dataset) -> f64 {
    let (x, y) = train.all::<f64>().unwrap();
    let (n, d) = (y.len(), train.sample_len());
    let c = train.classes;
    let d1 = d + 1;
    let row = |x: &[f64], i: usize| -> Vec<f64> {
        let mut v = x[i * d..(i + 1) * d].to_vec();
        v.push(1.0);
        v
    };
    let mut a = vec![0.0; d1 * d1];
    let mut b = vec![0.0; d1 * c];
    for i in 0..n {
        let v = row(x.data(), i);
        for p in 0..d1 {
            for q in 0..d1 {
                a[p * d1 + q] += v[p] * v[q];
            }
            b[p * c + y[i]] += v[p];
        }
    }
    for p in 0..d {
        a[p * d1 + p] += 1e-3 * n as f64;
    }
    // solve a · W = b
    for col in 0..d1 {
        let piv = (col..d1).max_by(|&i, &j| a[i * d1 + col].abs().total_cmp(&a[j * d1 + col].abs())).unwrap();
        for q in 0..d1 {
            a.swap(col * d1 + q, piv * d1 + q);
        }
        for q in 0..c {
            b.swap(col * c + q, piv * c + q);
        }
        let diag = a[col * d1 + col];
        for i in 0..d1 {
            if i != col {
                let f = a[i * d1 + col] / diag;
                for q in 0..d1 {
                    a[i * d1 + q] -= f * a[col * d1 + q];
                }
                for q in 0..c {
                    b[i * c + q] -= f * b[col * c + q];
                }
            }
        }
    }
    let w: Vec<f64> = (0..d1 * c).map(|i| b[i] / a[(i / c) * d1 + i / c]).collect();
    let (xt, yt) = test.all::<f64>().unwrap();
    let correct = (0..yt.len())
        .filter(|&i| {
            let v = row(xt.data(), i);
            let score = |k: usize| (0..d1).map(|p| v[p] * w[p * c + k]).sum::<f64>();
            (0..c).max_by(|&p, &q| score(p).total_cmp(&score(q))).unwrap() == yt[i]
        })
        .count();
    correct as f64 / yt.len() as f64
}

fn desk_training() -> Result<(bool, String)> {
    let cfg = TrainConfig::from_toml(
        r#"
algorithm = "edge_popup"
k = 0.5
epochs = 50
seed = 0
[arch]
name = "mlp"
width_multiplier = "1"
[init]
kind = "signed_constant"
[optimizer]
lr = 0.1
momentum = 0.9
weight_decay = 5e-4
[dataset]
name = "blobs"
batch_size = 64
classes = 10
dim = 64
per_class = 100
spread = 1.0
"#,
    )?;
    let (tr, te) = load_datasets(&cfg)?;
    let probe = linear_probe(&tr, &te);
    let init = TrainState::<f32>::init(&cfg, tr.sample_shape())?;
    let state = train::<f32>(&cfg, &tr, &te, |s| s.check_frozen_weights())?;
    let rows = &state.metrics.rows;
    let last = rows.last().unwrap();
    let first_95 = rows.iter().find(|r| r.test_acc >= 0.95).map(|r| r.epoch + 1);
    let frozen = state.model.weight_hashes() == init.model.weight_hashes();
    let (xt, yt) = te.all::<f32>()?;
    let final_loss = state.model.evaluate(&xt, &yt)?.0;
    let mut random = random_mask_losses(&state.model, &xt, &yt, 200, &RngStream::new(77))?;
    random.sort_by(f64::total_cmp);
    let median = 0.5 * (random[99] + random[100]);
    let micro = micro_instance(0, MICRO_EPOCHS)?;
    // how often the same protocol lands within 5% across other instances
    let mut within = 0;
    for seed in 0..20 {
        within += usize::from(micro_instance(seed, MICRO_EPOCHS)?.rel_gap <= 0.05);
    }
    let ok = last.test_acc >= 0.95 && frozen && final_loss <= median && micro.rel_gap <= 0.05;
    Ok((
        ok,
        format!(
            "final test acc {:.4} (first >= 95% at epoch {}), linear-probe reference {probe:.4}, weights frozen {frozen}; \
             loss {final_loss:.4} vs random-mask median {median:.4}; micro instance: loss {:.5} vs optimum {:.5} over {} masks \
             (gap {:.2}%, need <= 5%; {within}/20 seeds within 5%)",
            last.test_acc,
            first_95.map_or("never".into(), |e| e.to_string()),
            micro.trained_loss,
            micro.optimum_loss,
            micro.enumerated,
            100.0 * micro.rel_gap
        ),
    ))
}

// ------------------------------------------------------------------ 8

fn trend_config() -> TrainConfig {
    TrainConfig::from_toml(
        r#"
algorithm = "edge_popup"
k = 0.5
epochs = 20
seed = 0
[arch]
name = "mlp"
width_multiplier = "1/4"
[init]
kind = "signed_constant"
[optimizer]
lr = 0.02
momentum = 0.9
weight_decay = 5e-4
[dataset]
name = "blobs"
batch_size = 64
classes = 10
dim = 64
per_class = 500
spread = 4.0
"#,
    )
    .unwrap()
}

fn trends() -> Result<(bool, String)> {
    let base = trend_config();
    let (tr, te) = load_datasets(&base)?;
    let ks = SweepSpec {
        axis: Axis::K,
        values: ["0.1", "0.3", "0.5", "0.7", "0.9"].map(String::from).to_vec(),
        seeds: 5,
        baseline: None,
        workers: 1,
    };
    let k_res = run_sweep(&base, &ks, &tr, &te)?;
    let acc: Vec<f64> = k_res.points.iter().map(|p| p.acc_mean_std().0).collect();
    let k_ok = acc[2] >= acc[0] && acc[2] >= acc[4];
    let widths = SweepSpec {
        axis: Axis::Width,
        values: ["1/16", "1/8", "1/4", "1/2", "1"].map(String::from).to_vec(),
        seeds: 5,
        baseline: Some(edgepop_core::config::Algorithm::DenseSgd),
        workers: 1,
    };
    let w_res = run_sweep(&base, &widths, &tr, &te)?;
    let mult: Vec<f64> = w_res.points.iter().map(|p| p.width.as_f64()).collect();
    let gap: Vec<f64> = w_res.points.iter().map(|p| p.gap_mean_std().unwrap().0).collect();
    let rho = spearman(&mult, &gap);
    let w_ok = rho.is_some_and(|r| r < 0.0);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    Ok((
        k_ok && w_ok,
        format!(
            "acc over k 0.1..0.9: {}; dense-minus-subnetwork gap over widths 1/16..1: {}; Spearman {}",
            fmt(&acc),
            fmt(&gap),
            rho.map_or("undefined".into(), |r| format!("{r:.3}"))
        ),
    ))
}

// ------------------------------------------------------------------ 9

fn cifar() -> Result<(bool, String)> {
    let Some(dir) = std::env::var_os(edgepop_core::config::DATA_DIR_ENV) else {
        return Ok((true, "SKIPPED: set EDGEPOP_DATA_DIR to a CIFAR-10 binary directory and EDGEPOP_RUN_CIFAR=1".into()));
    };
    if std::env::var_os("EDGEPOP_RUN_CIFAR").is_none() {
        return Ok((true, "SKIPPED: several CPU-hours; set EDGEPOP_RUN_CIFAR=1 to run".into()));
    }
    let run = |algorithm: &str, lr: f64, wd: f64| -> Result<f64> {
        let cfg = TrainConfig::from_toml(&format!(
            r#"
algorithm = "{algorithm}"
k = 0.5
epochs = 100
seed = 0
[arch]
name = "conv2"
width_multiplier = "1"
[init]
kind = "signed_constant"
[optimizer]
lr = {lr}
momentum = 0.9
weight_decay = {wd}
[dataset]
name = "cifar10"
data_dir = {dir:?}
batch_size = 128
"#
        ))?;
        let (tr, te) = load_datasets(&cfg)?;
        let state = train::<f32>(&cfg, &tr, &te, |s| {
            let r = s.metrics.last().unwrap();
            eprintln!("{algorithm} epoch {} test acc {:.4}", r.epoch, r.test_acc);
            Ok(())
        })?;
        Ok(state.metrics.last().unwrap().test_acc)
    };
    let t = Instant::now();
    let popup = run("edge_popup", 0.1, 1e-4)?;
    let zhou = run("zhou", 200.0, 1e-4)?;
    Ok((
        popup >= 0.64 && popup >= zhou + 0.02,
        format!(
            "edge-popup {popup:.4} (need >= 0.64), zhou {zhou:.4} (need 2 points below), {:.0}s on {} threads",
            t.elapsed().as_secs_f64(),
            rayon::current_num_threads()
        ),
    ))
}
