//! Stationary generalized covariances and monomial bases for the mean space.
//!
//! A generalized covariance `k(h)` of order `l` only has to be positive on
//! finite-support measures that annihilate every polynomial of degree `<= l`.
//! Ordinary covariances (Matérn) are order 0 and positive definite outright;
//! the power families `-|h|` and `|h|^3` are only conditionally positive
//! definite and need the matching polynomial trend in the Kriging system.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance families shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `scale * m_nu(|h| / range)` with half-integer smoothness 1/2, 3/2 or 5/2.
    Matern,
    /// `-scale * |h|`.
    PowerLinear,
    /// `scale * |h|^3`.
    Cubic,
    /// `sum_s (-1)^(s+1) b_s |h|^(2s+1)`, order = number of coefficients - 1.
    PolynomialGc,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Matern => "matern",
            Family::PowerLinear => "power_linear",
            Family::Cubic => "cubic",
            Family::PolynomialGc => "polynomial_gc",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "matern" => Ok(Family::Matern),
            "power_linear" | "powerlinear" => Ok(Family::PowerLinear),
            "cubic" => Ok(Family::Cubic),
            "polynomial_gc" | "polynomialgc" => Ok(Family::PolynomialGc),
            other => Err(Error::InvalidParameter(format!("unknown covariance family `{other}`"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Matern { scale: f64, range: f64, smoothness: f64 },
    PowerLinear { scale: f64 },
    Cubic { scale: f64 },
    Polynomial,
}

/// A stationary generalized covariance `k(h)` with a declared CPD order.
///
/// Construct through [`GeneralizedCovariance::matern`],
/// [`GeneralizedCovariance::power_linear`], [`GeneralizedCovariance::cubic`],
/// [`GeneralizedCovariance::polynomial`] or [`GeneralizedCovariance::from_parts`];
/// parameters are validated once, at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedCovariance {
    family: Family,
    params: Vec<f64>,
    kind: Kind,
    cpd_order: usize,
}

impl GeneralizedCovariance {
    /// Matérn covariance; `smoothness` must be 0.5, 1.5 or 2.5.
    pub fn matern(scale: f64, range: f64, smoothness: f64) -> Result<Self> {
        positive("scale", scale)?;
        positive("range", range)?;
        if ![0.5, 1.5, 2.5].contains(&smoothness) {
            return Err(Error::InvalidParameter(format!(
                "Matérn smoothness must be 0.5, 1.5 or 2.5, got {smoothness}"
            )));
        }
        Ok(Self {
            family: Family::Matern,
            params: vec![scale, range, smoothness],
            kind: Kind::Matern {
                scale,
                range,
                smoothness,
            },
            cpd_order: 0,
        })
    }

    /// `k(h) = -scale * |h|`, a generalized covariance of order 0.
    pub fn power_linear(scale: f64) -> Result<Self> {
        positive("scale", scale)?;
        Ok(Self {
            family: Family::PowerLinear,
            params: vec![scale],
            kind: Kind::PowerLinear { scale },
            cpd_order: 0,
        })
    }

    /// `k(h) = scale * |h|^3`, a generalized covariance of order 1.
    pub fn cubic(scale: f64) -> Result<Self> {
        positive("scale", scale)?;
        Ok(Self {
            family: Family::Cubic,
            params: vec![scale],
            kind: Kind::Cubic { scale },
            cpd_order: 1,
        })
    }

    /// Polynomial generalized covariance `sum_s (-1)^(s+1) b_s |h|^(2s+1)`.
    ///
    /// All coefficients must be non-negative and the last one positive; the
    /// order is `coeffs.len() - 1`.
    pub fn polynomial(coeffs: &[f64]) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidParameter(
                "polynomial generalized covariance needs at least one coefficient".into(),
            ));
        }
        for (s, &b) in coeffs.iter().enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "polynomial coefficient b_{s} must be finite and >= 0, got {b}"
                )));
            }
        }
        positive("leading coefficient", *coeffs.last().unwrap())?;
        Ok(Self {
            family: Family::PolynomialGc,
            params: coeffs.to_vec(),
            kind: Kind::Polynomial,
            cpd_order: coeffs.len() - 1,
        })
    }

    /// Build from a family name and its parameter list, the config-file form.
    pub fn from_parts(family: Family, params: &[f64]) -> Result<Self> {
        let want = |n: usize| -> Result<()> {
            if params.len() != n {
                return Err(Error::InvalidParameter(format!(
                    "{family} expects {n} parameters, got {}",
                    params.len()
                )));
            }
            Ok(())
        };
        match family {
            Family::Matern => {
                want(3)?;
                Self::matern(params[0], params[1], params[2])
            }
            Family::PowerLinear => {
                want(1)?;
                Self::power_linear(params[0])
            }
            Family::Cubic => {
                want(1)?;
                Self::cubic(params[0])
            }
            Family::PolynomialGc => Self::polynomial(params),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Minimal polynomial degree `l` for which `k` is conditionally positive definite.
    pub fn cpd_order(&self) -> usize {
        self.cpd_order
    }

    /// Whether `k` is an ordinary (positive definite) covariance.
    pub fn is_positive_definite(&self) -> bool {
        matches!(self.kind, Kind::Matern { .. })
    }

    /// Magnitude used to scale numerical tolerances.
    pub fn scale(&self) -> f64 {
        match self.kind {
            Kind::Matern { scale, .. } | Kind::PowerLinear { scale } | Kind::Cubic { scale } => scale,
            Kind::Polynomial => self.params.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// Algebraic decay exponent `nu` of the spectral density in dimension `dim`,
    /// i.e. `k~(w) ~ (1 + |w|^2)^(-nu)` at high frequency.
    pub fn spectral_nu(&self, dim: usize) -> f64 {
        let half_d = dim as f64 / 2.0;
        match self.kind {
            Kind::Matern { smoothness, .. } => smoothness + half_d,
            // |h|^a has spectral density proportional to |w|^-(d + a)
            Kind::PowerLinear { .. } => half_d + 0.5,
            Kind::Cubic { .. } => half_d + 1.5,
            Kind::Polynomial => {
                let s_min = self.params.iter().position(|&b| b > 0.0).unwrap_or(0);
                half_d + s_min as f64 + 0.5
            }
        }
    }

    /// `k(0)`.
    pub fn at_origin(&self) -> f64 {
        self.eval_radial(0.0)
    }

    /// Evaluate `k(h)`.
    pub fn eval(&self, h: &[f64]) -> f64 {
        self.eval_radial(norm(h))
    }

    /// Evaluate `k(x - y)` without allocating the difference.
    pub fn eval_between(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.eval_radial(r2.sqrt())
    }

    /// Evaluate `k` as a function of the Euclidean norm `r = |h|`.
    pub fn eval_radial(&self, r: f64) -> f64 {
        match self.kind {
            Kind::Matern {
                scale,
                range,
                smoothness,
            } => {
                let t = r / range;
                if smoothness == 0.5 {
                    scale * (-t).exp()
                } else if smoothness == 1.5 {
                    let a = 3f64.sqrt() * t;
                    scale * (1.0 + a) * (-a).exp()
                } else {
                    let a = 5f64.sqrt() * t;
                    scale * (1.0 + a + a * a / 3.0) * (-a).exp()
                }
            }
            Kind::PowerLinear { scale } => -scale * r,
            Kind::Cubic { scale } => scale * r * r * r,
            Kind::Polynomial => {
                let r2 = r * r;
                let mut power = r;
                let mut sign = -1.0;
                let mut acc = 0.0;
                for &b in &self.params {
                    acc += sign * b * power;
                    power *= r2;
                    sign = -sign;
                }
                acc
            }
        }
    }

    /// Gram matrix `K_ij = k(x_i - x_j)`.
    pub fn gram(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        let n = points.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval_between(&points[i], &points[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

pub(crate) fn norm(h: &[f64]) -> f64 {
    h.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// All monomials `x^i` with `|i| <= degree` in `dim` variables.
///
/// Ordering is graded lexicographic: by total degree, then by descending
/// exponent of the first variable, then the second, and so on. For `d = 2`,
/// `l = 2` that is `1, x1, x2, x1^2, x1 x2, x2^2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    dim: usize,
    degree: usize,
    exponents: Vec<Vec<usize>>,
}

impl MonomialBasis {
    pub fn new(dim: usize, degree: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("basis dimension must be >= 1".into()));
        }
        let mut exponents = Vec::new();
        for total in 0..=degree {
            let mut current = vec![0; dim];
            push_compositions(total, 0, &mut current, &mut exponents);
        }
        Ok(Self { dim, degree, exponents })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of monomials, `binomial(degree + dim, dim)`.
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<usize>] {
        &self.exponents
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        self.eval_into(x, out.as_mut_slice());
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            *slot = exps.iter().zip(x).map(|(&e, &xi)| xi.powi(e as i32)).product();
        }
    }

    /// `q x n` matrix with column `j` equal to `p(x_j)`.
    pub fn matrix(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.len(), points.len());
        for (j, x) in points.iter().enumerate() {
            let mut col = p.column_mut(j);
            self.eval_into(x, col.as_mut_slice());
        }
        p
    }
}

fn push_compositions(remaining: usize, pos: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let dim = current.len();
    if pos == dim - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_compositions(remaining - e, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// Outcome of [`check_cpd`].
#[derive(Debug, Clone, PartialEq)]
pub struct CpdReport {
    pub passed: bool,
    /// Smallest `lambda^T K lambda / |lambda|^2` seen across trials.
    pub min_quadratic_form: f64,
    pub tolerance: f64,
    pub trials: usize,
}

/// Randomized check that `k(lambda, lambda) >= 0` for measures annihilating the basis.
///
/// Each trial draws `n_points` uniform points in `[0,1]^d` and a Gaussian
/// coefficient vector, projects it onto the null space of the basis matrix
/// `P` (so `P lambda = 0`) and evaluates the normalized quadratic form.
pub fn check_cpd(
    model: &GeneralizedCovariance,
    basis: &MonomialBasis,
    n_trials: usize,
    n_points: usize,
    seed: u64,
) -> Result<CpdReport> {
    if basis.degree() < model.cpd_order() {
        return Err(Error::OrderMismatch {
            degree: basis.degree(),
            order: model.cpd_order(),
        });
    }
    if n_points <= basis.len() {
        return Err(Error::InvalidParameter(format!(
            "check_cpd needs more than {} points for a non-trivial null space",
            basis.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_form = f64::INFINITY;
    let mut tolerance: f64 = 0.0;
    for _ in 0..n_trials {
        let points: Vec<Vec<f64>> = (0..n_points)
            .map(|_| (0..basis.dim()).map(|_| rng.random::<f64>()).collect())
            .collect();
        let k = model.gram(&points);
        let p = basis.matrix(&points);
        let raw = DVector::from_fn(n_points, |_, _| rng.sample::<f64, _>(StandardNormal));
        let Some(lambda) = project_out(&p, &raw) else {
            continue;
        };
        let norm2 = lambda.norm_squared();
        if norm2 < 1e-20 {
            continue;
        }
        let form = lambda.dot(&(&k * &lambda)) / norm2;
        let kmax = k.amax().max(model.scale());
        tolerance = tolerance.max(1e-9 * kmax);
        min_form = min_form.min(form);
    }
    Ok(CpdReport {
        passed: min_form >= -tolerance,
        min_quadratic_form: min_form,
        tolerance,
        trials: n_trials,
    })
}

/// `r - P^T (P P^T)^{-1} P r`.
fn project_out(p: &DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    let gram = p * p.transpose();
    let rhs = p * r;
    let coef = gram.cholesky()?.solve(&rhs);
    Some(r - p.transpose() * coef)
}
