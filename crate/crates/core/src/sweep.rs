//! Grid runs over one configuration axis, aggregated per grid point.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Algorithm, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::init::InitKind;
use crate::model::Rational;
use crate::popup::keep_count;
use crate::train::{run_to_summary, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    K,
    Width,
    /// Width multipliers, each paired with the k that keeps `|E|` at the base
    /// config's value.
    FixedParams,
    Init,
    Algorithm,
    Seed,
}

impl Axis {
    pub const ALL: [Axis; 6] = [Axis::K, Axis::Width, Axis::FixedParams, Axis::Init, Axis::Algorithm, Axis::Seed];

    pub fn name(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::Width => "width",
            Axis::FixedParams => "fixed_params",
            Axis::Init => "init",
            Axis::Algorithm => "algorithm",
            Axis::Seed => "seed",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: Axis,
    /// Raw axis values as given on the command line.
    pub values: Vec<String>,
    /// Seeds per grid point: `base.seed, base.seed + 1, ...`.
    pub seeds: usize,
    /// Also train this algorithm at each point and report the accuracy gap.
    pub baseline: Option<Algorithm>,
    pub workers: usize,
}

/// One configured grid point before any training.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub value: String,
    pub config: TrainConfig,
}

/// `|E|` implied by a config: kept weights summed over masked layers.
pub fn planned_edges(cfg: &TrainConfig, sample_shape: &[usize]) -> Result<usize> {
    Ok(cfg
        .arch_spec()
        .weight_shapes(sample_shape)?
        .iter()
        .map(|s| keep_count(s.iter().product(), cfg.k))
        .sum())
}

/// Smallest k with exactly `target` kept edges at `width`, if one exists.
pub fn solve_k(base: &TrainConfig, width: Rational, target: usize, sample_shape: &[usize]) -> Result<Option<f64>> {
    let mut cfg = base.clone();
    cfg.arch.width_multiplier = width;
    let edges_at = |k: f64| {
        let mut c = cfg.clone();
        c.k = k;
        planned_edges(&c, sample_shape)
    };
    if edges_at(1.0)? < target {
        return Ok(None);
    }
    // edges_at is a nondecreasing step function of k.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if edges_at(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((edges_at(hi)? == target).then_some(hi))
}

/// Expands the axis into validated grid points. Infeasible fixed-`|E|` widths
/// come back in the second list with a reason.
pub fn grid(base: &TrainConfig, spec: &SweepSpec, sample_shape: &[usize]) -> Result<(Vec<GridPoint>, Vec<(String, String)>)> {
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    let target = planned_edges(base, sample_shape)?;
    for raw in &spec.values {
        let mut cfg = base.clone();
        match spec.axis {
            Axis::K => {
                cfg.k = raw
                    .parse()
                    .map_err(|_| Error::Config(format!("bad k value {raw:?}")))?
            }
            Axis::Width => cfg.arch.width_multiplier = raw.parse()?,
            Axis::FixedParams => {
                let width: Rational = raw.parse()?;
                match solve_k(base, width, target, sample_shape)? {
                    Some(k) => {
                        cfg.arch.width_multiplier = width;
                        cfg.k = k;
                    }
                    None => {
                        skipped.push((raw.clone(), format!("no k gives |E| = {target}")));
                        continue;
                    }
                }
            }
            Axis::Init => cfg.init.kind = InitKind::from_str(raw).map_err(|e| Error::Config(e.to_string()))?,
            Axis::Algorithm => cfg.algorithm = raw.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            Axis::Seed => {
                cfg.seed = raw
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed {raw:?}")))?
            }
        }
        points.push(GridPoint {
            value: raw.clone(),
            config: cfg.validated()?,
        });
    }
    Ok((points, skipped))
}

/// Aggregated results of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointResult {
    pub value: String,
    pub k: f64,
    pub width: Rational,
    pub edges: usize,
    pub runs: Vec<RunSummary>,
    pub baseline: Vec<RunSummary>,
}

impl PointResult {
    pub fn acc_mean_std(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.test_acc).collect::<Vec<_>>())
    }

    pub fn loss_mean_std(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.test_loss).collect::<Vec<_>>())
    }

    /// Baseline accuracy minus run accuracy, seed by seed.
    pub fn gap_mean_std(&self) -> Option<(f64, f64)> {
        (!self.baseline.is_empty()).then(|| {
            let gaps: Vec<f64> = self
                .runs
                .iter()
                .zip(&self.baseline)
                .map(|(r, b)| b.test_acc - r.test_acc)
                .collect();
            mean_std(&gaps)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub points: Vec<PointResult>,
    pub skipped: Vec<(String, String)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let with_gap = self.points.iter().any(|p| !p.baseline.is_empty());
        let mut out = String::from("axis,value,k,width,edges,runs,test_acc_mean,test_acc_std,test_loss_mean,test_loss_std");
        if with_gap {
            out.push_str(",baseline_acc_mean,gap_mean,gap_std");
        }
        out.push('\n');
        for p in &self.points {
            let (am, asd) = p.acc_mean_std();
            let (lm, lsd) = p.loss_mean_std();
            let _ = write!(
                out,
                "{},{},{},{},{},{},{am},{asd},{lm},{lsd}",
                self.axis.name(),
                p.value,
                p.k,
                p.width,
                p.edges,
                p.runs.len()
            );
            if with_gap {
                let (bm, _) = mean_std(&p.baseline.iter().map(|r| r.test_acc).collect::<Vec<_>>());
                let (gm, gsd) = p.gap_mean_std().unwrap_or((f64::NAN, f64::NAN));
                let _ = write!(out, ",{bm},{gm},{gsd}");
            }
            out.push('\n');
        }
        out
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            out[t] = avg;
        }
        i = j + 1;
    }
    out
}

/// Runs every (point, seed) pair on up to `spec.workers` threads. Results are
/// ordered by grid index, so the output does not depend on the worker count.
pub fn run_sweep(base: &TrainConfig, spec: &SweepSpec, train: &Dataset, test: &Dataset) -> Result<SweepResult> {
    if spec.seeds == 0 || spec.workers == 0 {
        return Err(Error::Config("sweep needs at least one seed and one worker".into()));
    }
    let (points, skipped) = grid(base, spec, train.sample_shape())?;
    let mut jobs: Vec<(usize, bool, TrainConfig)> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        for s in 0..spec.seeds {
            let mut cfg = p.config.clone();
            cfg.seed = cfg.seed.wrapping_add(s as u64);
            if let Some(alg) = spec.baseline {
                let mut b = cfg.clone();
                b.algorithm = alg;
                b.optimizer.kind = None;
                jobs.push((i, true, b.validated()?));
            }
            jobs.push((i, false, cfg));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let summaries: Vec<Result<RunSummary>> =
        pool.install(|| jobs.par_iter().map(|(_, _, cfg)| run_to_summary(cfg, train, test)).collect());
    let mut results: Vec<PointResult> = points
        .iter()
        .map(|p| {
            Ok(PointResult {
                value: p.value.clone(),
                k: p.config.k,
                width: p.config.arch.width_multiplier,
                edges: planned_edges(&p.config, train.sample_shape())?,
                runs: Vec::new(),
                baseline: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    for ((i, is_base, _), r) in jobs.iter().zip(summaries) {
        let r = r?;
        if *is_base {
            results[*i].baseline.push(r);
        } else {
            results[*i].runs.push(r);
        }
    }
    Ok(SweepResult {
        axis: spec.axis,
        points: results,
        skipped,
    })
}
