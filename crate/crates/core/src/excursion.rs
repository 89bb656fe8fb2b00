//! Excursion-set volumes.
//!
//! The volume `|A_u(f)| = P{f(X) >= u}` under the input law `mu` is
//! estimated by the indicator average over `l` independent draws of `X`. The
//! same machinery applied to the Kriging mean gives the plug-in volume
//! `|A_u(xi_n)|_l`.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use libm::erfc;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::kriging::{KrigingModel, Prediction};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
enum Law {
    GaussianDiag {
        mean: Vec<f64>,
        sd: Vec<f64>,
    },
    GaussianFull {
        mean: Vec<f64>,
        cov: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
    UniformBox {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

/// The input law `mu` of `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDistribution {
    law: Law,
}

/// Distribution families, as named in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    GaussianDiag,
    GaussianFull,
    UniformBox,
}

impl InputDistribution {
    pub fn gaussian_diag(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != sd.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: sd.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) || sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParameter(
                "Gaussian mean must be finite and standard deviations > 0".into(),
            ));
        }
        Ok(Self {
            law: Law::GaussianDiag { mean, sd },
        })
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian_diag(vec![0.0; dim], vec![1.0; dim]).expect("valid standard normal")
    }

    pub fn gaussian_full(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("Gaussian mean must be finite".into()));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax() {
            return Err(Error::InvalidParameter("covariance must be symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("covariance must be positive definite".into()))?
            .unpack();
        Ok(Self {
            law: Law::GaussianFull { mean, cov, chol },
        })
    }

    pub fn uniform_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b))
        {
            return Err(Error::InvalidParameter("box bounds need lower < upper".into()));
        }
        Ok(Self {
            law: Law::UniformBox { lower, upper },
        })
    }

    pub fn kind(&self) -> DistributionKind {
        match self.law {
            Law::GaussianDiag { .. } => DistributionKind::GaussianDiag,
            Law::GaussianFull { .. } => DistributionKind::GaussianFull,
            Law::UniformBox { .. } => DistributionKind::UniformBox,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.law {
            Law::GaussianDiag { mean, .. } | Law::GaussianFull { mean, .. } => mean.len(),
            Law::UniformBox { lower, .. } => lower.len(),
        }
    }

    /// Mean for Gaussian laws, lower bound for boxes.
    pub fn location(&self) -> &[f64] {
        match &self.law {
            Law::GaussianDiag { mean, .. } | Law::GaussianFull { mean, .. } => mean,
            Law::UniformBox { lower, .. } => lower,
        }
    }

    /// Second parameter block in config form: standard deviations, the
    /// row-major covariance, or the upper box bounds.
    pub fn spread(&self) -> Vec<f64> {
        match &self.law {
            Law::GaussianDiag { sd, .. } => sd.clone(),
            Law::GaussianFull { cov, .. } => cov.transpose().as_slice().to_vec(),
            Law::UniformBox { upper, .. } => upper.clone(),
        }
    }

    /// Axis-aligned box holding nearly all of the mass: the box itself, or
    /// `mean +- width * sd` per coordinate.
    pub fn bounding_box(&self, width: f64) -> (Vec<f64>, Vec<f64>) {
        match &self.law {
            Law::UniformBox { lower, upper } => (lower.clone(), upper.clone()),
            Law::GaussianDiag { mean, sd } => (
                mean.iter().zip(sd).map(|(m, s)| m - width * s).collect(),
                mean.iter().zip(sd).map(|(m, s)| m + width * s).collect(),
            ),
            Law::GaussianFull { mean, cov, .. } => {
                let sd: Vec<f64> = (0..mean.len()).map(|i| cov[(i, i)].sqrt()).collect();
                (
                    mean.iter().zip(&sd).map(|(m, s)| m - width * s).collect(),
                    mean.iter().zip(&sd).map(|(m, s)| m + width * s).collect(),
                )
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.law {
            Law::GaussianDiag { mean, sd } => mean
                .iter()
                .zip(sd)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Law::GaussianFull { mean, chol, .. } => {
                let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = chol * z;
                mean.iter().zip(x.iter()).map(|(m, v)| m + v).collect()
            }
            Law::UniformBox { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                .collect(),
        }
    }

    /// `n` draws from the stream seeded by `seed`; a prefix of any longer draw.
    pub fn sample_n(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim());
        match &self.law {
            Law::GaussianDiag { mean, sd } => x
                .iter()
                .zip(mean)
                .zip(sd)
                .map(|((xi, m), s)| {
                    let z = (xi - m) / s;
                    (-0.5 * z * z).exp() / (s * (2.0 * PI).sqrt())
                })
                .product(),
            Law::GaussianFull { mean, chol, .. } => {
                let d = mean.len();
                let diff = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
                let z = chol
                    .solve_lower_triangular(&diff)
                    .expect("non-singular Cholesky factor");
                let det: f64 = chol.diagonal().iter().product();
                (-0.5 * z.norm_squared()).exp() / ((2.0 * PI).powf(d as f64 / 2.0) * det)
            }
            Law::UniformBox { lower, upper } => {
                let inside = x
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .all(|(v, (a, b))| v >= a && v <= b);
                if inside {
                    1.0 / lower.iter().zip(upper).map(|(a, b)| b - a).product::<f64>()
                } else {
                    0.0
                }
            }
        }
    }

    /// Map a point of the open unit cube through the quantile transform.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        match &self.law {
            Law::GaussianDiag { mean, sd } => mean
                .iter()
                .zip(sd)
                .zip(u)
                .map(|((m, s), p)| m + s * gaussian_quantile(*p))
                .collect(),
            Law::GaussianFull { mean, chol, .. } => {
                let z = DVector::from_iterator(mean.len(), u.iter().map(|p| gaussian_quantile(*p)));
                let x = chol * z;
                mean.iter().zip(x.iter()).map(|(m, v)| m + v).collect()
            }
            Law::UniformBox { lower, upper } => lower
                .iter()
                .zip(upper)
                .zip(u)
                .map(|((a, b), p)| a + (b - a) * p)
                .collect(),
        }
    }

    /// First `n` Halton points (indices `1..=n`) mapped through [`from_unit`](Self::from_unit).
    pub fn quasi_random(&self, n: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        (1..=n as u64)
            .map(|i| {
                let u: Vec<f64> = (0..d).map(|k| radical_inverse(i, PRIMES[k % PRIMES.len()])).collect();
                self.from_unit(&u)
            })
            .collect()
    }
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Upper tail `P{N(0,1) >= t}`.
pub fn gaussian_tail(t: f64) -> f64 {
    if t == f64::INFINITY {
        0.0
    } else if t == f64::NEG_INFINITY {
        1.0
    } else {
        0.5 * erfc(t / SQRT_2)
    }
}

/// Standard normal quantile `Phi^{-1}(p)` for `p` in `[0, 1]`.
pub fn gaussian_quantile(p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "probability {p} outside [0, 1]");
    let mut t = -SQRT_2 * erfc_inv(2.0 * p);
    if !t.is_finite() {
        return t;
    }
    // Newton polish against the lower tail; the starting point is good to ~1e-10
    for _ in 0..2 {
        let density = (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
        if density == 0.0 {
            break;
        }
        let lower = if t < 0.0 {
            gaussian_tail(-t)
        } else {
            1.0 - gaussian_tail(t)
        };
        t -= (lower - p) / density;
    }
    t
}

/// `P{xi(x) >= u}` under the predictive law `N(mean, variance)`.
///
/// A zero variance gives the indicator `mean >= u`.
pub fn excursion_probability(pred: &Prediction, u: f64) -> f64 {
    let sigma = pred.std_dev();
    if sigma > 0.0 {
        gaussian_tail((u - pred.mean) / sigma)
    } else if pred.mean >= u {
        1.0
    } else {
        0.0
    }
}

/// `Psi(|u - mean| / sigma)`: probability that the predictor is on the wrong
/// side of `u`. Zero when the variance is zero.
pub fn misclassification_proxy(pred: &Prediction, u: f64) -> f64 {
    misclassification(pred.mean, pred.variance, u)
}

pub(crate) fn misclassification(mean: f64, variance: f64, u: f64) -> f64 {
    if variance > 0.0 {
        gaussian_tail((u - mean).abs() / variance.sqrt())
    } else {
        0.0
    }
}

/// Monte Carlo estimate of an excursion volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcursionEstimate {
    pub threshold: f64,
    pub volume: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl ExcursionEstimate {
    fn from_count(threshold: f64, hits: usize, n: usize, seed: u64) -> Self {
        let volume = hits as f64 / n as f64;
        Self {
            threshold,
            volume,
            std_error: (volume * (1.0 - volume) / n as f64).sqrt(),
            n_samples: n,
            seed,
        }
    }
}

/// Write estimates as `u,volume,std_error,l,seed` rows.
pub fn write_estimates_csv<W: Write>(writer: W, estimates: &[ExcursionEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["u", "volume", "std_error", "l", "seed"])?;
    for e in estimates {
        w.write_record([
            e.threshold.to_string(),
            e.volume.to_string(),
            e.std_error.to_string(),
            e.n_samples.to_string(),
            e.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(1/l) sum_i 1{f(X_i) >= u}` with `X_i` drawn from `mu` under `seed`.
///
/// Samples are generated sequentially and evaluated in parallel, so the
/// result does not depend on the thread count.
pub fn mc_volume<F>(evaluator: F, u: f64, mu: &InputDistribution, l: usize, seed: u64) -> Result<ExcursionEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if l == 0 {
        return Err(Error::InvalidParameter("Monte Carlo sample size must be >= 1".into()));
    }
    let samples = mu.sample_n(l, seed);
    let values: Vec<f64> = samples.par_iter().map(|x| evaluator(x)).collect();
    count_exceedances(&values, u, seed)
}

pub(crate) fn count_exceedances(values: &[f64], u: f64, seed: u64) -> Result<ExcursionEstimate> {
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let hits = values.iter().filter(|&&v| v >= u).count();
    Ok(ExcursionEstimate::from_count(u, hits, values.len(), seed))
}

/// Excursion volume of the Kriging predictor, `|A_u(xi_n)|_l`.
pub fn plugin_volume(
    model: &KrigingModel,
    u: f64,
    mu: &InputDistribution,
    l: usize,
    seed: u64,
) -> Result<ExcursionEstimate> {
    mc_volume(|x| model.predict_mean(x), u, mu, l, seed)
}
