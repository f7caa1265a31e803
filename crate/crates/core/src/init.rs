//! Weight and score initialization, parameterized by fan-in.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitKind {
    KaimingNormal,
    SignedKaimingConstant,
    KaimingUniform,
    XavierNormal,
}

impl InitKind {
    pub const ALL: [InitKind; 4] = [
        InitKind::KaimingNormal,
        InitKind::SignedKaimingConstant,
        InitKind::KaimingUniform,
        InitKind::XavierNormal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitKind::KaimingNormal => "kaiming_normal",
            InitKind::SignedKaimingConstant => "signed_constant",
            InitKind::KaimingUniform => "kaiming_uniform",
            InitKind::XavierNormal => "xavier_normal",
        }
    }

    /// Variance of one draw at the given fan-in (before any `√(1/k)` scaling).
    pub fn variance(self, fan_in: usize) -> f64 {
        let n = fan_in as f64;
        match self {
            InitKind::XavierNormal => 1.0 / n,
            _ => 2.0 / n,
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown init `{s}` (expected kaiming_normal, signed_constant, \
                     kaiming_uniform or xavier_normal)"
                ))
            })
    }
}

impl TryFrom<String> for InitKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InitKind> for String {
    fn from(k: InitKind) -> String {
        k.name().to_string()
    }
}

/// Weight distribution, optionally scaled by `√(1/k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub kind: InitKind,
    pub scaled: bool,
    pub k: f64,
}

impl InitSpec {
    pub fn new(kind: InitKind) -> Self {
        InitSpec {
            kind,
            scaled: false,
            k: 1.0,
        }
    }

    pub fn scaled(kind: InitKind, k: f64) -> Result<Self> {
        check_keep_fraction(k)?;
        Ok(InitSpec {
            kind,
            scaled: true,
            k,
        })
    }

    /// Draws a tensor of `shape`, deriving fan-in from the shape.
    pub fn sample<T: Element>(&self, shape: &[usize], rng: &mut RngStream) -> Result<Tensor<T>> {
        let fan = fan_in(shape)?;
        let t = match self.kind {
            InitKind::KaimingNormal => kaiming_normal(shape, fan, rng)?,
            InitKind::SignedKaimingConstant => signed_kaiming_constant(shape, fan, rng)?,
            InitKind::KaimingUniform => kaiming_uniform(shape, fan, rng)?,
            InitKind::XavierNormal => xavier_normal(shape, fan, rng)?,
        };
        if self.scaled {
            apply_scale(self, &t)
        } else {
            Ok(t)
        }
    }
}

pub(crate) fn check_keep_fraction(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::param(format!("keep fraction k={k} outside (0, 1]")));
    }
    Ok(())
}

/// Inputs feeding one output unit: `in` for `[out, in]`, `C·κ²` for `[O, C, κ, κ]`.
pub fn fan_in(shape: &[usize]) -> Result<usize> {
    match shape {
        [_, rest @ ..] if !rest.is_empty() => Ok(rest.iter().product()),
        _ => Err(Error::param(format!(
            "cannot derive fan-in from shape {shape:?}"
        ))),
    }
}

fn check_fan_in(fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::param("fan_in must be positive"));
    }
    Ok(fan_in as f64)
}

fn draw<T: Element>(shape: &[usize], mut f: impl FnMut() -> f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::cast(f())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Kaiming standard deviation `√(2/fan_in)`.
pub fn kaiming_std(fan_in: usize) -> Result<f64> {
    Ok((2.0 / check_fan_in(fan_in)?).sqrt())
}

pub fn kaiming_normal<T: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let std = kaiming_std(fan_in)?;
    Ok(draw(shape, || std * rng.normal()))
}

/// Each element is `±√(2/fan_in)` with equal probability.
pub fn signed_kaiming_constant<T: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let c = kaiming_std(fan_in)?;
    Ok(draw(shape, || if rng.bernoulli(0.5) { c } else { -c }))
}

pub fn xavier_normal<T: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let std = (1.0 / check_fan_in(fan_in)?).sqrt();
    Ok(draw(shape, || std * rng.normal()))
}

/// Bound `√(6/fan_in)` of the Kaiming uniform distribution.
pub fn kaiming_uniform_bound(fan_in: usize) -> Result<f64> {
    Ok((6.0 / check_fan_in(fan_in)?).sqrt())
}

pub fn kaiming_uniform<T: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let b = kaiming_uniform_bound(fan_in)?;
    Ok(draw(shape, || rng.uniform_range(-b, b)))
}

/// Multiplies every element by `√(1/k)`.
pub fn apply_scale<T: Element>(spec: &InitSpec, tensor: &Tensor<T>) -> Result<Tensor<T>> {
    if !spec.scaled {
        return Err(Error::param("apply_scale called on an unscaled init spec"));
    }
    check_keep_fraction(spec.k)?;
    let m = T::cast((1.0 / spec.k).sqrt());
    Ok(tensor.scale(m))
}

/// Popup score initialization: symmetric uniform draws with the Kaiming-uniform bound.
pub fn score_init<T: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    kaiming_uniform(shape, fan_in, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(t: &Tensor<f64>) -> (f64, f64) {
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn std_parameters() {
        assert!((kaiming_std(50).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(kaiming_std(2).unwrap(), 1.0);
        assert!((kaiming_uniform_bound(3).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(kaiming_std(0), Err(Error::Parameter(_))));
    }

    #[test]
    fn signed_constant_support() {
        let mut rng = RngStream::new(0).fork("w");
        let t: Tensor<f64> = signed_kaiming_constant(&[100], 8, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.5 || v == -0.5));
        let t: Tensor<f64> = signed_kaiming_constant(&[100], 2, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn xavier_std() {
        let mut rng = RngStream::new(2).fork("x");
        let t: Tensor<f64> = xavier_normal(&[100_000], 4, &mut rng).unwrap();
        let (_, var) = stats(&t);
        assert!((var.sqrt() - 0.5).abs() < 0.01);
    }

    #[test]
    fn empirical_variance_matches_each_kind() {
        for kind in InitKind::ALL {
            let mut rng = RngStream::new(11).fork(kind.name());
            let t: Tensor<f64> = InitSpec::new(kind)
                .sample(&[100_000, 8], &mut rng)
                .unwrap()
                .reshape(&[800_000])
                .unwrap();
            let (_, var) = stats(&t);
            let want = kind.variance(8);
            assert!((var / want - 1.0).abs() < 0.02, "{kind}: {var} vs {want}");
        }
    }

    #[test]
    fn kaiming_normal_fan_in_8_variance() {
        let mut rng = RngStream::new(5).fork("kn");
        let t: Tensor<f64> = kaiming_normal(&[100_000], 8, &mut rng).unwrap();
        let (_, var) = stats(&t);
        assert!((var / 0.25 - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn signed_constant_moments() {
        let mut rng = RngStream::new(6).fork("sc");
        let t: Tensor<f64> = signed_kaiming_constant(&[100_000], 8, &mut rng).unwrap();
        let (mean, var) = stats(&t);
        assert!(mean.abs() < 0.01);
        assert!((var / 0.25 - 1.0).abs() < 0.02);
    }

    #[test]
    fn kaiming_uniform_variance() {
        let mut rng = RngStream::new(7).fork("ku");
        let t: Tensor<f64> = kaiming_uniform(&[100_000], 3, &mut rng).unwrap();
        let (_, var) = stats(&t);
        assert!((var / (2.0 / 3.0) - 1.0).abs() < 0.02);
        let b = 2f64.sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
    }

    #[test]
    #[allow(clippy::approx_constant)] // written out on purpose, independent of std consts
    fn scale_multipliers() {
        let t = Tensor::<f64>::from_f64(vec![2], &[1.0, -3.0]).unwrap();
        let s = apply_scale(&InitSpec::scaled(InitKind::KaimingNormal, 0.25).unwrap(), &t).unwrap();
        assert_eq!(s.data(), &[2.0, -6.0]);
        let s = apply_scale(&InitSpec::scaled(InitKind::KaimingNormal, 1.0).unwrap(), &t).unwrap();
        assert_eq!(s, t);
        let s = apply_scale(&InitSpec::scaled(InitKind::KaimingNormal, 0.5).unwrap(), &t).unwrap();
        assert!((s.data()[0] - 1.414214).abs() < 1e-6);
        let bad = InitSpec {
            kind: InitKind::KaimingNormal,
            scaled: true,
            k: 1.5,
        };
        assert!(matches!(apply_scale(&bad, &t), Err(Error::Parameter(_))));
        assert!(InitSpec::scaled(InitKind::KaimingNormal, 0.0).is_err());
    }

    #[test]
    fn scaling_changes_variance_by_one_over_k() {
        let k = 0.3;
        let m = (1.0f64 / k).sqrt();
        assert!((m * m - 1.0 / k).abs() < 1e-12);
    }

    #[test]
    fn score_init_support_determinism_and_balance() {
        let root = RngStream::new(3);
        let a: Tensor<f64> = score_init(&[100_000], 16, &mut root.fork("s")).unwrap();
        let b: Tensor<f64> = score_init(&[100_000], 16, &mut root.fork("s")).unwrap();
        let c: Tensor<f64> = score_init(&[100_000], 16, &mut root.fork("t")).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        assert_ne!(a, c);
        let bound = kaiming_uniform_bound(16).unwrap();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        let pos = a.data().iter().filter(|&&v| v > 0.0).count() as f64 / 1e5;
        assert!((pos - 0.5).abs() < 0.01, "{pos}");
    }

    #[test]
    fn fan_in_of_conv_weight() {
        assert_eq!(fan_in(&[64, 3, 3, 3]).unwrap(), 27);
        assert_eq!(fan_in(&[10, 256]).unwrap(), 256);
        assert!(fan_in(&[5]).is_err());
    }

    #[test]
    fn names_parse() {
        for kind in InitKind::ALL {
            assert_eq!(kind.name().parse::<InitKind>().unwrap(), kind);
        }
        assert!("he_normal".parse::<InitKind>().is_err());
    }
}
