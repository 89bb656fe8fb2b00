//! Stepwise uncertainty reduction: choose the next evaluation among a fixed
//! candidate sample `S` by minimizing
//!
//! ```text
//! U(x) = (1/l) sum_i ( sum_j P{D_Q xi(x) = z_j} * v_{n}(y_i | xi(x) = z_j) )^(1/2)
//! ```
//!
//! where `v_n(y) = Psi(|u - mean(y)| / sigma(y))` is evaluated with the
//! updated mean (affine in `z_j`) and the updated variance (free of `z_j`).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::{distance, GeneralizedCovariance, MonomialBasis};
use crate::error::{Error, Result};
use crate::excursion::{
    count_exceedances, gaussian_quantile, gaussian_tail, misclassification, ExcursionEstimate, InputDistribution,
};
use crate::kriging::{DesignSet, KrigingModel, Prediction, DUPLICATE_TOL};
use crate::seed;
use crate::simulate::ConditionalSampler;

/// Candidate sets larger than this are not given a cached Gram matrix.
const GRAM_CACHE_LIMIT: usize = 4096;

/// `Psi(t)` is zero to double precision beyond this.
const UNDERFLOW_T: f64 = 38.0;

/// Finite set of levels with the bins that map onto them.
///
/// Level `z_j` owns the half-open bin `[e_{j-1}, e_j)`, with `e_0 = -inf`
/// and `e_Q = +inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    levels: Vec<f64>,
    edges: Vec<f64>,
}

impl Quantizer {
    pub fn new(levels: Vec<f64>, edges: Vec<f64>) -> Result<Self> {
        let q = levels.len();
        if q < 2 {
            return Err(Error::InvalidParameter(format!(
                "quantizer needs Q >= 2 levels, got {q}"
            )));
        }
        if edges.len() != q - 1 {
            return Err(Error::InvalidParameter(format!(
                "quantizer needs {} edges, got {}",
                q - 1,
                edges.len()
            )));
        }
        if levels.iter().chain(&edges).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "quantizer levels and edges must be finite".into(),
            ));
        }
        for j in 0..q {
            if j + 1 < q && !(levels[j] < levels[j + 1]) {
                return Err(Error::InvalidParameter(
                    "quantizer levels must be strictly increasing".into(),
                ));
            }
            if j > 0 && !(edges[j - 1] <= levels[j]) || j + 1 < q && !(levels[j] < edges[j]) {
                return Err(Error::InvalidParameter(
                    "quantizer edges must interleave the levels".into(),
                ));
            }
        }
        Ok(Self { levels, edges })
    }

    /// `z_1 + sum_{i >= 2} (z_i - z_{i-1}) 1{h >= z_i}`: each level starts its own bin.
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        let edges = levels.iter().skip(1).copied().collect();
        Self::new(levels, edges)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn quantize(&self, h: f64) -> f64 {
        let j = self.edges.partition_point(|&e| e <= h);
        self.levels[j]
    }
}

/// Equiprobable bins of the predictive law, each represented by its median.
pub fn make_quantizer(pred: &Prediction, q: usize) -> Result<Quantizer> {
    if q < 2 {
        return Err(Error::InvalidParameter(format!(
            "quantizer needs Q >= 2 levels, got {q}"
        )));
    }
    if !(pred.variance > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let sigma = pred.variance.sqrt();
    let qf = q as f64;
    let levels = (1..=q)
        .map(|j| pred.mean + sigma * gaussian_quantile((j as f64 - 0.5) / qf))
        .collect();
    let edges = (1..q)
        .map(|j| pred.mean + sigma * gaussian_quantile(j as f64 / qf))
        .collect();
    Quantizer::new(levels, edges)
}

pub fn quantize(quantizer: &Quantizer, h: f64) -> f64 {
    quantizer.quantize(h)
}

/// Gaussian mass of each bin under `pred`.
pub fn bin_probabilities(pred: &Prediction, quantizer: &Quantizer) -> Result<Vec<f64>> {
    if !(pred.variance > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let sigma = pred.variance.sqrt();
    // upper tail at each edge, with 1 below the first bin and 0 above the last
    let mut tails = Vec::with_capacity(quantizer.len() + 1);
    tails.push(1.0);
    tails.extend(quantizer.edges.iter().map(|e| gaussian_tail((e - pred.mean) / sigma)));
    tails.push(0.0);
    Ok(tails.windows(2).map(|w| (w[0] - w[1]).max(0.0)).collect())
}

/// One evaluation made by the loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub point: Vec<f64>,
    pub value: f64,
    pub criterion: f64,
}

/// Result of [`SurState::select_next`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub point: Vec<f64>,
    pub criterion: f64,
    /// Criterion at every candidate, `+inf` for excluded or degenerate ones.
    pub profile: Vec<f64>,
}

/// Model, fixed candidate sample and per-iteration caches.
#[derive(Debug, Clone)]
pub struct SurState {
    model: KrigingModel,
    candidates: Vec<Vec<f64>>,
    threshold: f64,
    quantizer_size: usize,
    history: Vec<HistoryEntry>,
    excluded: Vec<bool>,
    predictions: Vec<Prediction>,
    // row i: [k(y_i - x_1..n), p(y_i)]
    cross: DMatrix<f64>,
    gram: Option<DMatrix<f64>>,
}

impl SurState {
    pub fn new(model: KrigingModel, candidates: Vec<Vec<f64>>, threshold: f64, quantizer_size: usize) -> Result<Self> {
        if quantizer_size < 2 {
            return Err(Error::InvalidParameter(format!(
                "quantizer needs Q >= 2 levels, got {quantizer_size}"
            )));
        }
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        if !threshold.is_finite() {
            return Err(Error::InvalidParameter("threshold must be finite".into()));
        }
        for c in &candidates {
            if c.len() != model.dim() {
                return Err(Error::DimensionMismatch {
                    expected: model.dim(),
                    got: c.len(),
                });
            }
        }
        let gram = (candidates.len() <= GRAM_CACHE_LIMIT).then(|| model.covariance().gram(&candidates));
        let mut state = Self {
            excluded: vec![false; candidates.len()],
            predictions: Vec::new(),
            cross: DMatrix::zeros(0, 0),
            gram,
            model,
            candidates,
            threshold,
            quantizer_size,
            history: Vec::new(),
        };
        state.exclude_design();
        state.refresh();
        Ok(state)
    }

    pub fn model(&self) -> &KrigingModel {
        &self.model
    }

    pub fn candidates(&self) -> &[Vec<f64>] {
        &self.candidates
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn quantizer_size(&self) -> usize {
        self.quantizer_size
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn is_excluded(&self, index: usize) -> bool {
        self.excluded[index]
    }

    /// Current predictions at the candidates.
    pub fn predictions(&self) -> &[Prediction] {
        &self.predictions
    }

    fn exclude_design(&mut self) {
        for (flag, c) in self.excluded.iter_mut().zip(&self.candidates) {
            if !*flag
                && self
                    .model
                    .design()
                    .points()
                    .iter()
                    .any(|x| distance(x, c) <= DUPLICATE_TOL)
            {
                *flag = true;
            }
        }
    }

    fn refresh(&mut self) {
        let model = &self.model;
        self.predictions = self.candidates.par_iter().map(|y| model.predict(y)).collect();
        let n = model.design().len();
        let q = model.basis().len();
        let mut cross = DMatrix::zeros(self.candidates.len(), n + q);
        let mut p = vec![0.0; q];
        for (i, y) in self.candidates.iter().enumerate() {
            for (k, x) in model.design().points().iter().enumerate() {
                cross[(i, k)] = model.covariance().eval_between(y, x);
            }
            model.basis().eval_into(y, &mut p);
            for (k, v) in p.iter().enumerate() {
                cross[(i, n + k)] = *v;
            }
        }
        self.cross = cross;
    }

    /// Criterion at an arbitrary point; `+inf` where the predictive variance vanishes.
    pub fn criterion(&self, candidate: &[f64]) -> Result<f64> {
        if candidate.len() != self.model.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.dim(),
                got: candidate.len(),
            });
        }
        let cov = self.model.covariance();
        self.criterion_with(candidate, |i| cov.eval_between(&self.candidates[i], candidate))
    }

    /// Criterion at candidate `index`, reusing the cached candidate Gram matrix.
    pub fn criterion_at(&self, index: usize) -> Result<f64> {
        let candidate = &self.candidates[index];
        match &self.gram {
            Some(gram) => self.criterion_with(candidate, |i| gram[(i, index)]),
            None => self.criterion(candidate),
        }
    }

    fn criterion_with(&self, candidate: &[f64], k_to_candidate: impl Fn(usize) -> f64) -> Result<f64> {
        let update = match self.model.hypothetical_update(candidate) {
            Ok(update) => update,
            Err(Error::DuplicatePoint { .. } | Error::DegenerateVariance) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let pred = update.prediction();
        let quantizer = make_quantizer(&pred, self.quantizer_size)?;
        let probs = bin_probabilities(&pred, &quantizer)?;
        let offsets: Vec<f64> = quantizer.levels().iter().map(|z| z - pred.mean).collect();
        let max_offset = offsets.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        let solution: &DVector<f64> = update.solution();
        let s2 = pred.variance;
        let u = self.threshold;
        let mut total = 0.0;
        for (i, current) in self.predictions.iter().enumerate() {
            let c = k_to_candidate(i) - self.cross.row(i).transpose().dot(solution);
            let variance = current.variance - c * c / s2;
            if !(variance > 0.0) {
                continue;
            }
            let gain = c / s2;
            // every term below Psi(38) ~ 1e-316
            if (u - current.mean).abs() - gain.abs() * max_offset > UNDERFLOW_T * variance.sqrt() {
                continue;
            }
            let inner: f64 = probs
                .iter()
                .zip(&offsets)
                .map(|(p, dz)| p * misclassification(current.mean + gain * dz, variance, u))
                .sum();
            total += inner.sqrt();
        }
        Ok(total / self.candidates.len() as f64)
    }

    /// Criterion at every candidate, `+inf` for excluded ones.
    pub fn profile(&self) -> Result<Vec<f64>> {
        (0..self.candidates.len())
            .into_par_iter()
            .map(|i| {
                if self.excluded[i] {
                    Ok(f64::INFINITY)
                } else {
                    self.criterion_at(i)
                }
            })
            .collect()
    }

    pub fn select_next(&self) -> Result<Selection> {
        if self.excluded.iter().all(|&e| e) {
            return Err(Error::ExhaustedCandidates);
        }
        let profile = self.profile()?;
        let index = argmin(&profile).ok_or(Error::ExhaustedCandidates)?;
        Ok(Selection {
            index,
            point: self.candidates[index].clone(),
            criterion: profile[index],
            profile,
        })
    }

    /// Add the observation `value` at candidate `index`.
    pub fn record(&mut self, index: usize, value: f64, criterion: f64) -> Result<()> {
        if self.excluded[index] {
            return Err(Error::DuplicatePoint { index });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { index, value });
        }
        let point = self.candidates[index].clone();
        self.model = self.model.add_point(&point, value)?;
        self.excluded[index] = true;
        self.exclude_design();
        self.history.push(HistoryEntry {
            point,
            value,
            criterion,
        });
        self.refresh();
        Ok(())
    }

    /// Fraction of candidates where the current predictor is `>= u`.
    pub fn plugin_volume(&self, seed: u64) -> Result<ExcursionEstimate> {
        let means: Vec<f64> = self.predictions.iter().map(|p| p.mean).collect();
        count_exceedances(&means, self.threshold, seed)
    }
}

/// Index of the smallest finite value, lowest index first; NaN counts as `+inf`.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Settings of [`run_sur`].
#[derive(Debug, Clone)]
pub struct SurConfig {
    pub threshold: f64,
    pub quantizer_size: usize,
    /// Size `l` of the candidate sample, also used for the volume estimates.
    pub candidates: usize,
    /// Total design size at which the loop stops.
    pub n_max: usize,
    pub seed: u64,
    pub covariance: GeneralizedCovariance,
    pub basis: MonomialBasis,
    pub distribution: InputDistribution,
    /// Stop once the smallest criterion falls below this value.
    pub criterion_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    CriterionTolerance,
    ExhaustedCandidates,
}

/// One iteration of the loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryStep {
    pub iteration: usize,
    pub design_size: usize,
    pub candidate_index: usize,
    pub point: Vec<f64>,
    pub value: f64,
    pub criterion_min: f64,
    pub estimate: ExcursionEstimate,
}

#[derive(Debug, Clone)]
pub struct SurRun {
    pub initial: ExcursionEstimate,
    pub steps: Vec<TrajectoryStep>,
    pub stop: StopReason,
    pub state: SurState,
}

impl SurRun {
    pub fn final_estimate(&self) -> &ExcursionEstimate {
        self.steps.last().map_or(&self.initial, |s| &s.estimate)
    }

    /// `iteration,x_1..x_d,f,criterion_min,volume,std_error`; row 0 is the
    /// initial estimate with empty point fields.
    pub fn write_trajectory_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.state.model().dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        header.extend(["f", "criterion_min", "volume", "std_error"].map(String::from));
        w.write_record(&header)?;
        let mut row = vec!["0".to_string()];
        row.extend(std::iter::repeat_n(String::new(), d + 2));
        row.push(self.initial.volume.to_string());
        row.push(self.initial.std_error.to_string());
        w.write_record(&row)?;
        for s in &self.steps {
            let mut row = vec![s.iteration.to_string()];
            row.extend(s.point.iter().map(|v| v.to_string()));
            row.push(s.value.to_string());
            row.push(s.criterion_min.to_string());
            row.push(s.estimate.volume.to_string());
            row.push(s.estimate.std_error.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Candidate points followed by a `criterion` column.
pub fn write_profile_csv<W: Write>(writer: W, candidates: &[Vec<f64>], profile: &[f64]) -> Result<()> {
    let d = candidates.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
    header.push("criterion".into());
    w.write_record(&header)?;
    for (c, v) in candidates.iter().zip(profile) {
        let mut row: Vec<String> = c.iter().map(|x| x.to_string()).collect();
        row.push(v.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Candidate sample used by [`run_sur`] for a given config.
pub fn candidate_sample(config: &SurConfig) -> Vec<Vec<f64>> {
    config
        .distribution
        .sample_n(config.candidates, seed::derive(config.seed, "candidates"))
}

/// Sequential design: select, evaluate, update, re-estimate.
pub fn run_sur<F>(evaluator: F, initial_design: DesignSet, config: &SurConfig) -> Result<SurRun>
where
    F: Fn(&[f64]) -> f64,
{
    if config.candidates == 0 {
        return Err(Error::InvalidParameter("candidate sample size must be >= 1".into()));
    }
    if config.distribution.dim() != initial_design.dim() {
        return Err(Error::DimensionMismatch {
            expected: initial_design.dim(),
            got: config.distribution.dim(),
        });
    }
    let model = KrigingModel::build(initial_design, config.covariance.clone(), config.basis.clone())?;
    let volume_seed = seed::derive(config.seed, "candidates");
    let mut state = SurState::new(model, candidate_sample(config), config.threshold, config.quantizer_size)?;
    let initial = state.plugin_volume(volume_seed)?;
    let mut steps = Vec::new();
    let mut iteration = 0;
    let stop = loop {
        if state.model().design().len() >= config.n_max {
            break StopReason::Budget;
        }
        let selection = match state.select_next() {
            Ok(s) => s,
            Err(Error::ExhaustedCandidates) => break StopReason::ExhaustedCandidates,
            Err(e) => return Err(e),
        };
        if config.criterion_tol.is_some_and(|tol| selection.criterion < tol) {
            break StopReason::CriterionTolerance;
        }
        let value = evaluator(&selection.point);
        state.record(selection.index, value, selection.criterion)?;
        iteration += 1;
        steps.push(TrajectoryStep {
            iteration,
            design_size: state.model().design().len(),
            candidate_index: selection.index,
            point: selection.point,
            value,
            criterion_min: selection.criterion,
            estimate: state.plugin_volume(volume_seed)?,
        });
    };
    Ok(SurRun {
        initial,
        steps,
        stop,
        state,
    })
}

/// Largest instance accepted by the conditional-simulation oracle.
pub const ORACLE_MAX_DESIGN: usize = 20;
pub const ORACLE_MAX_CANDIDATES: usize = 200;
pub const ORACLE_MAX_COPIES: usize = 200;

/// Monte Carlo version of the exact criterion, from conditional sample paths:
///
/// ```text
/// (1/m) sum_k ( |A_u(eta_k)|_S - |A_u(eta_k predicted from design + (x, eta_k(x)))|_S )^2
/// ```
///
/// where the `eta_k` are paths conditioned on the current observations.
/// Meant for validating the criterion on small instances.
pub fn criterion_oracle_mc(state: &SurState, candidate: &[f64], m: usize, seed: u64) -> Result<f64> {
    let oracle = McOracle::new(state, &[candidate.to_vec()], m, seed)?;
    oracle.value(candidate)
}

/// [`criterion_oracle_mc`] at every candidate with shared paths; `+inf` for excluded ones.
pub fn criterion_oracle_profile(state: &SurState, m: usize, seed: u64) -> Result<Vec<f64>> {
    let oracle = McOracle::new(state, &[], m, seed)?;
    (0..state.candidates().len())
        .map(|i| {
            if state.is_excluded(i) {
                Ok(f64::INFINITY)
            } else {
                oracle.value(&state.candidates()[i])
            }
        })
        .collect()
}

struct McOracle<'a> {
    state: &'a SurState,
    grid: Vec<Vec<f64>>,
    // paths[k][g], grid = candidates followed by extra points
    paths: Vec<Vec<f64>>,
    volumes: Vec<f64>,
}

impl<'a> McOracle<'a> {
    fn new(state: &'a SurState, extra: &[Vec<f64>], m: usize, seed: u64) -> Result<Self> {
        let n = state.model().design().len();
        let l = state.candidates().len();
        if n > ORACLE_MAX_DESIGN || l > ORACLE_MAX_CANDIDATES || m > ORACLE_MAX_COPIES {
            return Err(Error::InvalidParameter(format!(
                "oracle instance too large (n = {n}, |S| = {l}, m = {m}; limits \
                 {ORACLE_MAX_DESIGN}, {ORACLE_MAX_CANDIDATES}, {ORACLE_MAX_COPIES})"
            )));
        }
        if m == 0 {
            return Err(Error::InvalidParameter("oracle needs m >= 1 copies".into()));
        }
        let mut grid = state.candidates().to_vec();
        grid.extend(extra.iter().cloned());
        let sampler = ConditionalSampler::new(state.model(), &grid)?;
        let paths: Vec<Vec<f64>> = (0..m)
            .map(|k| sampler.draw(seed::derive_indexed(seed, "oracle", k as u64)))
            .collect();
        let u = state.threshold();
        let volumes = paths.iter().map(|p| fraction_above(&p[..l], u)).collect();
        Ok(Self {
            state,
            grid,
            paths,
            volumes,
        })
    }

    fn value(&self, candidate: &[f64]) -> Result<f64> {
        let l = self.state.candidates().len();
        let u = self.state.threshold();
        let slot = self
            .grid
            .iter()
            .position(|g| distance(g, candidate) <= DUPLICATE_TOL)
            .ok_or_else(|| Error::InvalidParameter("oracle candidate is not on the simulation grid".into()))?;
        let model = self.state.model();
        let update = match model.hypothetical_update(candidate) {
            Ok(update) => Some(update),
            Err(Error::DuplicatePoint { .. } | Error::DegenerateVariance) => None,
            Err(e) => return Err(e),
        };
        let total: f64 = match update {
            // observing a known value changes nothing
            None => {
                let plug = fraction_above(&self.state.predictions().iter().map(|p| p.mean).collect::<Vec<_>>(), u);
                self.volumes.iter().map(|v| (v - plug).powi(2)).sum()
            }
            Some(update) => {
                let updates: Vec<_> = self
                    .state
                    .candidates()
                    .iter()
                    .zip(self.state.predictions())
                    .map(|(y, p)| update.updated_from(p, y))
                    .collect();
                self.paths
                    .iter()
                    .zip(&self.volumes)
                    .map(|(path, v)| {
                        let z = path[slot];
                        let hits = updates.iter().filter(|up| up.mean(z) >= u).count();
                        (v - hits as f64 / l as f64).powi(2)
                    })
                    .sum()
            }
        };
        Ok(total / self.paths.len() as f64)
    }
}

fn fraction_above(values: &[f64], u: f64) -> f64 {
    values.iter().filter(|&&v| v >= u).count() as f64 / values.len() as f64
}
