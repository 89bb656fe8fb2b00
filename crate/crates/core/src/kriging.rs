//! Intrinsic Kriging.
//!
//! The predictor weights `lambda_x` and Lagrange multipliers `mu` solve the
//! saddle-point system
//!
//! ```text
//! [ K + K_N   P^T ] [ lambda_x ]   [ k_x ]
//! [ P         0   ] [ mu       ] = [ p_x ]
//! ```
//!
//! with `K_ij = k(x_i - x_j)`, `P` the `q x n` matrix of monomials at the
//! design points, `k_x_i = k(x - x_i)` and `p_x` the monomials at `x`. The
//! prediction is `lambda_x^T y` and the error variance
//! `k(0) - lambda_x^T k_x - mu^T p_x`.
//!
//! The matrix is factored once per design by dense LU with partial pivoting.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::covariance::{distance, GeneralizedCovariance, MonomialBasis};
use crate::error::{Error, Result};
use crate::excursion::InputDistribution;

/// Points closer than this are treated as the same location.
pub const DUPLICATE_TOL: f64 = 1e-12;

/// Observed design: points, values and the observation-noise covariance `K_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSet {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    noise: Option<DMatrix<f64>>,
}

impl DesignSet {
    /// Exact (noise-free) observations.
    pub fn new(points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        Self::validate_shape(&points, &values)?;
        if let Some(index) = first_duplicate(&points, |_| true) {
            return Err(Error::DuplicatePoint { index });
        }
        Ok(Self {
            points,
            values,
            noise: None,
        })
    }

    /// Observations with a full noise covariance matrix.
    pub fn with_noise(points: Vec<Vec<f64>>, values: Vec<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        Self::validate_shape(&points, &values)?;
        let n = points.len();
        if noise_cov.nrows() != n || noise_cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: noise_cov.nrows(),
            });
        }
        if (&noise_cov - noise_cov.transpose()).amax() > 1e-12 * noise_cov.amax().max(1.0) {
            return Err(Error::InvalidParameter("noise covariance must be symmetric".into()));
        }
        if noise_cov.diagonal().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParameter("noise variances must be >= 0".into()));
        }
        if let Some(index) = first_duplicate(&points, |i| noise_cov[(i, i)] == 0.0) {
            return Err(Error::DuplicatePoint { index });
        }
        let noise = if noise_cov.iter().all(|&v| v == 0.0) {
            None
        } else {
            Some(noise_cov)
        };
        Ok(Self { points, values, noise })
    }

    /// Observations with independent noise of the given variances.
    pub fn with_noise_variances(points: Vec<Vec<f64>>, values: Vec<f64>, variances: &[f64]) -> Result<Self> {
        if variances.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: variances.len(),
            });
        }
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
        Self::with_noise(points, values, cov)
    }

    fn validate_shape(points: &[Vec<f64>], values: &[f64]) -> Result<()> {
        if points.is_empty() {
            return Err(Error::Empty("design points"));
        }
        if points.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: values.len(),
            });
        }
        let d = points[0].len();
        if d == 0 {
            return Err(Error::InvalidParameter(
                "points must have at least one coordinate".into(),
            ));
        }
        for p in points {
            if p.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("design points must be finite".into()));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("observations must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `K_N`, or `None` for exact observations.
    pub fn noise_cov(&self) -> Option<&DMatrix<f64>> {
        self.noise.as_ref()
    }

    pub fn noise_variance(&self, i: usize) -> f64 {
        self.noise.as_ref().map_or(0.0, |n| n[(i, i)])
    }

    pub fn is_noise_free(&self) -> bool {
        self.noise.is_none()
    }

    /// Index of an exactly-observed design point within [`DUPLICATE_TOL`] of `x`.
    pub fn find_exact(&self, x: &[f64]) -> Option<usize> {
        self.points
            .iter()
            .enumerate()
            .position(|(i, p)| self.noise_variance(i) == 0.0 && distance(p, x) <= DUPLICATE_TOL)
    }

    /// Append an exact observation.
    pub fn push(&self, x: &[f64], y: f64) -> Result<Self> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("new observation must be finite".into()));
        }
        if self.find_exact(x).is_some() {
            return Err(Error::DuplicatePoint { index: self.len() });
        }
        let mut points = self.points.clone();
        points.push(x.to_vec());
        let mut values = self.values.clone();
        values.push(y);
        let noise = self.noise.as_ref().map(|k| {
            let n = k.nrows();
            let mut grown = DMatrix::zeros(n + 1, n + 1);
            grown.view_mut((0, 0), (n, n)).copy_from(k);
            grown
        });
        Ok(Self { points, values, noise })
    }

    /// Read `x_1..x_d,f[,noise]` rows with a header line.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let dim = headers.iter().take_while(|h| h.starts_with("x_")).count();
        let f_col = headers.iter().position(|h| h == "f").ok_or_else(|| Error::Config {
            field: "csv header".into(),
            message: "missing `f` column".into(),
        })?;
        if dim == 0 || f_col != dim {
            return Err(Error::Config {
                field: "csv header".into(),
                message: "expected columns x_1..x_d, f[, noise]".into(),
            });
        }
        let noise_col = headers.iter().position(|h| h == "noise");
        let mut points = Vec::new();
        let mut values = Vec::new();
        let mut noise = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let parse = |col: usize| -> Result<f64> {
                record.get(col).unwrap_or("").parse::<f64>().map_err(|e| Error::Config {
                    field: format!("csv row {} column {}", row + 2, col + 1),
                    message: e.to_string(),
                })
            };
            points.push((0..dim).map(parse).collect::<Result<Vec<_>>>()?);
            values.push(parse(f_col)?);
            if let Some(c) = noise_col {
                noise.push(parse(c)?);
            }
        }
        if noise_col.is_some() {
            Self::with_noise_variances(points, values, &noise)
        } else {
            Self::new(points, values)
        }
    }

    /// Write `x_1..x_d,f` (plus `noise` when observations are noisy).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim()).map(|i| format!("x_{i}")).collect();
        header.push("f".into());
        if self.noise.is_some() {
            header.push("noise".into());
        }
        w.write_record(&header)?;
        for (i, (p, &y)) in self.points.iter().zip(&self.values).enumerate() {
            let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            row.push(y.to_string());
            if self.noise.is_some() {
                row.push(self.noise_variance(i).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn first_duplicate(points: &[Vec<f64>], exact: impl Fn(usize) -> bool) -> Option<usize> {
    for j in 1..points.len() {
        for i in 0..j {
            if exact(i) && exact(j) && distance(&points[i], &points[j]) <= DUPLICATE_TOL {
                return Some(j);
            }
        }
    }
    None
}

/// Options for [`KrigingModel::build_with`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KrigingOptions {
    /// Added to the diagonal of `K`.
    pub jitter: f64,
}

/// Predicted value and error variance at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// Kriging weights `lambda_x`, when requested.
    pub weights: Option<DVector<f64>>,
}

impl Prediction {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self {
            mean,
            variance,
            weights: None,
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

/// A factorized intrinsic-Kriging system. Immutable; safe to share across threads.
#[derive(Debug)]
pub struct KrigingModel {
    design: DesignSet,
    cov: GeneralizedCovariance,
    basis: MonomialBasis,
    options: KrigingOptions,
    system: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    // A^{-1} [y; 0], so the mean is k_x . dual_k + p_x . dual_p
    dual: DVector<f64>,
    k0: f64,
    clamps: AtomicUsize,
}

impl Clone for KrigingModel {
    fn clone(&self) -> Self {
        Self {
            design: self.design.clone(),
            cov: self.cov.clone(),
            basis: self.basis.clone(),
            options: self.options,
            system: self.system.clone(),
            lu: self.lu.clone(),
            dual: self.dual.clone(),
            k0: self.k0,
            clamps: AtomicUsize::new(self.clamps.load(Ordering::Relaxed)),
        }
    }
}

/// Relative pivot size below which the saddle matrix is declared singular.
const PIVOT_TOL: f64 = 1e-14;

impl KrigingModel {
    pub fn build(design: DesignSet, cov: GeneralizedCovariance, basis: MonomialBasis) -> Result<Self> {
        Self::build_with(design, cov, basis, KrigingOptions::default())
    }

    pub fn build_with(
        design: DesignSet,
        cov: GeneralizedCovariance,
        basis: MonomialBasis,
        options: KrigingOptions,
    ) -> Result<Self> {
        if basis.degree() < cov.cpd_order() {
            return Err(Error::OrderMismatch {
                degree: basis.degree(),
                order: cov.cpd_order(),
            });
        }
        if basis.dim() != design.dim() {
            return Err(Error::DimensionMismatch {
                expected: basis.dim(),
                got: design.dim(),
            });
        }
        if !(options.jitter >= 0.0) {
            return Err(Error::InvalidParameter("jitter must be >= 0".into()));
        }
        let n = design.len();
        let q = basis.len();
        if n < q {
            return Err(Error::SingularSystem(format!(
                "{n} points cannot determine {q} trend coefficients"
            )));
        }
        let p = basis.matrix(design.points());
        check_unisolvent(&p)?;

        let mut k = cov.gram(design.points());
        if let Some(noise) = design.noise_cov() {
            k += noise;
        }
        if options.jitter > 0.0 {
            for i in 0..n {
                k[(i, i)] += options.jitter;
            }
        }
        let mut system = DMatrix::zeros(n + q, n + q);
        system.view_mut((0, 0), (n, n)).copy_from(&k);
        system.view_mut((n, 0), (q, n)).copy_from(&p);
        system.view_mut((0, n), (n, q)).copy_from(&p.transpose());

        let lu = system.clone().lu();
        let u = lu.u();
        let diag = u.diagonal();
        let max_pivot = diag.amax();
        let min_pivot = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if !(max_pivot > 0.0) || min_pivot <= PIVOT_TOL * max_pivot {
            return Err(Error::SingularSystem(format!(
                "pivot ratio {:.3e} below tolerance",
                if max_pivot > 0.0 { min_pivot / max_pivot } else { 0.0 }
            )));
        }
        let mut rhs = DVector::zeros(n + q);
        rhs.rows_mut(0, n).copy_from_slice(design.values());
        let dual = lu
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSystem("LU solve failed".into()))?;
        let k0 = cov.at_origin();
        Ok(Self {
            design,
            cov,
            basis,
            options,
            system,
            lu,
            dual,
            k0,
            clamps: AtomicUsize::new(0),
        })
    }

    pub fn design(&self) -> &DesignSet {
        &self.design
    }

    pub fn covariance(&self) -> &GeneralizedCovariance {
        &self.cov
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn options(&self) -> KrigingOptions {
        self.options
    }

    pub fn dim(&self) -> usize {
        self.design.dim()
    }

    /// Assembled saddle matrix.
    pub fn system_matrix(&self) -> &DMatrix<f64> {
        &self.system
    }

    /// `|P^-1 L U - A|_max / |A|_max`.
    pub fn factorization_residual(&self) -> f64 {
        let mut rebuilt = self.lu.l() * self.lu.u();
        self.lu.p().inv_permute_rows(&mut rebuilt);
        (rebuilt - &self.system).amax() / self.system.amax()
    }

    /// Number of predictions whose variance came out negative and was clamped to 0.
    pub fn clamp_count(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }

    /// Right-hand side `[k_x; p_x]`.
    fn rhs(&self, x: &[f64]) -> DVector<f64> {
        let n = self.design.len();
        let mut rhs = DVector::zeros(n + self.basis.len());
        for (slot, xi) in rhs.iter_mut().zip(self.design.points()) {
            *slot = self.cov.eval_between(x, xi);
        }
        self.basis.eval_into(x, &mut rhs.as_mut_slice()[n..]);
        rhs
    }

    /// Solution `[lambda_x; mu]` of the saddle system at `x`.
    pub fn solve_weights(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let rhs = self.rhs(x);
        let sol = self.lu.solve(&rhs).expect("factorization checked at build");
        (sol, rhs)
    }

    fn check_dim(&self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "query dimension does not match the design");
    }

    fn clamp(&self, variance: f64) -> f64 {
        if variance < 0.0 {
            self.clamps.fetch_add(1, Ordering::Relaxed);
            0.0
        } else {
            variance
        }
    }

    pub fn predict(&self, x: &[f64]) -> Prediction {
        let mut p = self.predict_with_weights(x);
        p.weights = None;
        p
    }

    /// As [`predict`](Self::predict), keeping `lambda_x` for diagnostics.
    pub fn predict_with_weights(&self, x: &[f64]) -> Prediction {
        self.check_dim(x);
        let n = self.design.len();
        let (sol, rhs) = self.solve_weights(x);
        let weights = sol.rows(0, n).into_owned();
        let mean = weights.iter().zip(self.design.values()).map(|(l, y)| l * y).sum();
        let variance = self.clamp(self.k0 - sol.dot(&rhs));
        Prediction {
            mean,
            variance,
            weights: Some(weights),
        }
    }

    /// Predictor mean only; `O(n)` per call.
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        self.check_dim(x);
        let n = self.design.len();
        let mut acc = 0.0;
        for (xi, a) in self.design.points().iter().zip(self.dual.iter()) {
            acc += self.cov.eval_between(x, xi) * a;
        }
        let mut p = vec![0.0; self.basis.len()];
        self.basis.eval_into(x, &mut p);
        acc + p.iter().zip(self.dual.iter().skip(n)).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Model over the design augmented with the exact observation `(x_new, y_new)`.
    pub fn add_point(&self, x_new: &[f64], y_new: f64) -> Result<Self> {
        let design = self.design.push(x_new, y_new)?;
        Self::build_with(design, self.cov.clone(), self.basis.clone(), self.options)
    }

    /// Effect of a future exact observation at `x_new`, before its value is known.
    pub fn hypothetical_update(&self, x_new: &[f64]) -> Result<HypotheticalUpdate<'_>> {
        self.check_dim(x_new);
        if self.design.find_exact(x_new).is_some() {
            return Err(Error::DuplicatePoint {
                index: self.design.len(),
            });
        }
        let n = self.design.len();
        let (sol, rhs) = self.solve_weights(x_new);
        let mean = sol
            .rows(0, n)
            .iter()
            .zip(self.design.values())
            .map(|(l, y)| l * y)
            .sum();
        let variance = self.k0 - sol.dot(&rhs);
        if !(variance > 1e-14 * self.cov.scale()) {
            return Err(Error::DegenerateVariance);
        }
        Ok(HypotheticalUpdate {
            model: self,
            point: x_new.to_vec(),
            solution: sol,
            mean,
            variance,
        })
    }

    /// Error covariance `c_n(x, y) = Cov[xi(x) - xi_n(x), xi(y) - xi_n(y)]`
    /// given the saddle solution `[lambda_y; mu_y]` at `y`.
    pub fn residual_covariance_with(&self, x: &[f64], y: &[f64], solution_y: &DVector<f64>) -> f64 {
        let n = self.design.len();
        let mut acc = self.cov.eval_between(x, y);
        for (xi, l) in self.design.points().iter().zip(solution_y.iter()) {
            acc -= l * self.cov.eval_between(x, xi);
        }
        let mut p = vec![0.0; self.basis.len()];
        self.basis.eval_into(x, &mut p);
        for (a, m) in p.iter().zip(solution_y.iter().skip(n)) {
            acc -= a * m;
        }
        acc
    }
}

fn check_unisolvent(p: &DMatrix<f64>) -> Result<()> {
    let q = p.nrows();
    let sv = p.clone().svd(false, false).singular_values;
    let max = sv.amax();
    let rank = sv.iter().filter(|&&s| s > 1e-10 * max).count();
    if max == 0.0 || rank < q {
        return Err(Error::SingularSystem(format!(
            "design is not unisolvent for the trend basis (rank {rank} < {q})"
        )));
    }
    Ok(())
}

/// Rank-one structure of adding an exact observation at a fixed point.
///
/// With `c_n` the current error covariance and `s^2 = sigma_n^2(x_new)`:
///
/// ```text
/// sigma_{n+1}^2(x) = sigma_n^2(x) - c_n(x, x_new)^2 / s^2
/// mean_{n+1}(x; z) = mean_n(x) + c_n(x, x_new) / s^2 * (z - mean_n(x_new))
/// ```
///
/// The variance does not depend on the observed value `z`; the mean is affine in it.
#[derive(Debug, Clone)]
pub struct HypotheticalUpdate<'a> {
    model: &'a KrigingModel,
    point: Vec<f64>,
    solution: DVector<f64>,
    mean: f64,
    variance: f64,
}

/// Updated prediction at one query point, parametrized by the future value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdatedPrediction {
    pub base_mean: f64,
    /// `c_n(x, x_new) / sigma_n^2(x_new)`
    pub gain: f64,
    pub anchor: f64,
    pub variance: f64,
}

impl UpdatedPrediction {
    pub fn mean(&self, z: f64) -> f64 {
        self.base_mean + self.gain * (z - self.anchor)
    }
}

impl HypotheticalUpdate<'_> {
    pub fn point(&self) -> &[f64] {
        &self.point
    }

    /// Saddle solution `[lambda; mu]` at the new point.
    pub(crate) fn solution(&self) -> &DVector<f64> {
        &self.solution
    }

    /// Current prediction at the new point.
    pub fn prediction(&self) -> Prediction {
        Prediction::new(self.mean, self.variance)
    }

    pub fn residual_covariance(&self, x: &[f64]) -> f64 {
        self.model.residual_covariance_with(x, &self.point, &self.solution)
    }

    /// Combine with a precomputed current prediction at `x`.
    pub fn updated_from(&self, current: &Prediction, x: &[f64]) -> UpdatedPrediction {
        let c = self.residual_covariance(x);
        let variance = (current.variance - c * c / self.variance).max(0.0);
        UpdatedPrediction {
            base_mean: current.mean,
            gain: c / self.variance,
            anchor: self.mean,
            variance,
        }
    }

    pub fn at(&self, x: &[f64]) -> UpdatedPrediction {
        self.updated_from(&self.model.predict(x), x)
    }

    /// `sigma_{n+1}^2(x)`.
    pub fn variance(&self, x: &[f64]) -> f64 {
        self.at(x).variance
    }

    /// `mean_{n+1}(x)` given `xi(x_new) = z`.
    pub fn mean(&self, x: &[f64], z: f64) -> f64 {
        self.at(x).mean(z)
    }
}

/// Where to look for the point farthest from the design.
#[derive(Debug, Clone, Copy)]
pub enum Probe<'a> {
    /// Regular grid with `per_axis` nodes per coordinate, bounds included.
    Box {
        lower: &'a [f64],
        upper: &'a [f64],
        per_axis: usize,
    },
    /// Halton points pushed through the distribution's quantile transform.
    Distribution { mu: &'a InputDistribution, n_probe: usize },
}

/// `h_n = max_y min_i |y - x_i|` over the probe set.
pub fn fill_distance(points: &[Vec<f64>], probe: Probe<'_>) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("fill_distance points"));
    }
    let probes = match probe {
        Probe::Box { lower, upper, per_axis } => lattice(lower, upper, per_axis)?,
        Probe::Distribution { mu, n_probe } => mu.quasi_random(n_probe),
    };
    let d = points[0].len();
    let mut worst: f64 = 0.0;
    for y in &probes {
        if y.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: y.len(),
            });
        }
        let nearest = points.iter().map(|x| distance(x, y)).fold(f64::INFINITY, f64::min);
        worst = worst.max(nearest);
    }
    Ok(worst)
}

/// Tensor grid with `per_axis` equally spaced nodes per coordinate, bounds included.
///
/// The last coordinate varies fastest.
pub fn lattice(lower: &[f64], upper: &[f64], per_axis: usize) -> Result<Vec<Vec<f64>>> {
    if lower.len() != upper.len() {
        return Err(Error::DimensionMismatch {
            expected: lower.len(),
            got: upper.len(),
        });
    }
    if lower.is_empty() || per_axis == 0 {
        return Err(Error::Empty("lattice"));
    }
    if lower.iter().zip(upper).any(|(a, b)| !(a < b) && per_axis > 1) {
        return Err(Error::InvalidParameter(
            "lattice bounds must satisfy lower < upper".into(),
        ));
    }
    let d = lower.len();
    let axis = |k: usize, i: usize| -> f64 {
        if per_axis == 1 {
            0.5 * (lower[k] + upper[k])
        } else {
            lower[k] + (upper[k] - lower[k]) * i as f64 / (per_axis - 1) as f64
        }
    };
    let total = per_axis.pow(d as u32);
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut p = vec![0.0; d];
        for k in (0..d).rev() {
            p[k] = axis(k, idx % per_axis);
            idx /= per_axis;
        }
        out.push(p);
    }
    Ok(out)
}
