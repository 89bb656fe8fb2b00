//! Config-driven experiments: seeded true paths, SUR and competing designs,
//! convergence studies, and their CSV/JSON artifacts.
//!
//! Every random stream is derived from a config seed and a role tag through
//! [`seed::derive`]: `candidates` (the sample `S`, also the volume sample),
//! `truth` (the simulated true path), `random_mc`, `convergence`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{Family, GeneralizedCovariance, MonomialBasis};
use crate::error::{Error, Result};
use crate::excursion::{
    excursion_probability, mc_volume, write_estimates_csv, DistributionKind, ExcursionEstimate, InputDistribution,
};
use crate::kriging::{fill_distance, lattice, DesignSet, KrigingModel, Probe};
use crate::seed;
use crate::simulate::{write_paths_csv, PathSampler, Tabulated};
use crate::sur::{candidate_sample, run_sur, write_profile_csv, SurConfig, SurRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// SUR from a quasi-random initial design.
    SurRun,
    /// Plug-in estimate from lattice designs of increasing size.
    GridRun,
    /// Misclassification rate against the predictive standard deviation on nested lattices.
    Convergence,
    /// Decay of the largest predictive standard deviation with the fill distance.
    VarianceRate,
    /// One-dimensional snapshot: predictor, excursion probability, density and criterion profile.
    Snapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sur,
    Lattice,
    RandomMc,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sur => "sur",
            Strategy::Lattice => "lattice",
            Strategy::RandomMc => "random_mc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub covariance: CovarianceSection,
    #[serde(default)]
    pub basis: BasisSection,
    pub distribution: DistributionSection,
    #[serde(default)]
    pub threshold: ThresholdSection,
    #[serde(default)]
    pub sur: SurSection,
    pub compare: Option<CompareSection>,
    pub convergence: Option<ConvergenceSection>,
    #[serde(default)]
    pub simulation: SimulationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSection {
    pub family: Family,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSection {
    pub kind: DistributionKind,
    pub mean: Option<Vec<f64>>,
    pub sd: Option<Vec<f64>>,
    pub cov: Option<Vec<Vec<f64>>>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

/// Exactly one of `value` and `quantile`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    pub value: Option<f64>,
    /// Level of the `mu`-quantile of the true path, resolved per seed.
    pub quantile: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurSection {
    pub q: usize,
    pub l: usize,
    pub n_init: usize,
    pub n_max: usize,
    pub criterion_tol: Option<f64>,
}

impl Default for SurSection {
    fn default() -> Self {
        Self {
            q: 20,
            l: 800,
            n_init: 3,
            n_max: 15,
            criterion_tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub strategies: Vec<Strategy>,
    /// Total evaluations per strategy; defaults to `sur.n_max`.
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSection {
    pub sizes: Vec<usize>,
    pub paths: usize,
    /// Number of intervals of the probe grid over the box.
    pub fine: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Diagonal jitter relative to the largest grid variance.
    pub jitter: f64,
    /// Half-width, in standard deviations, of the box used by lattices and plots.
    pub box_width: f64,
    /// Nodes per axis of plotting and path-export grids.
    pub plot_points: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            jitter: 1e-10,
            box_width: 3.0,
            plot_points: 400,
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            config_err(&format!("line {line}"), e.message().replace('\n', " "))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Check every parameter and build the model objects; no expensive work.
    pub fn resolve(&self) -> Result<Resolved> {
        if self.experiment.seeds.is_empty() {
            return Err(config_err("experiment.seeds", "seed list is empty"));
        }
        let covariance = GeneralizedCovariance::from_parts(self.covariance.family, &self.covariance.params)
            .map_err(|e| config_err("covariance.params", e.to_string()))?;
        let distribution = self.build_distribution()?;
        let basis = MonomialBasis::new(distribution.dim(), self.basis.degree)
            .map_err(|e| config_err("basis.degree", e.to_string()))?;
        if basis.degree() < covariance.cpd_order() {
            return Err(config_err(
                "basis.degree",
                format!(
                    "degree {} is below the covariance order {}",
                    basis.degree(),
                    covariance.cpd_order()
                ),
            ));
        }
        match (self.threshold.value, self.threshold.quantile) {
            (Some(v), None) if v.is_finite() => {}
            (None, Some(a)) if a > 0.0 && a < 1.0 => {}
            (Some(_), Some(_)) => return Err(config_err("threshold", "give either `value` or `quantile`, not both")),
            (None, None) => return Err(config_err("threshold", "missing `value` or `quantile`")),
            _ => return Err(config_err("threshold", "value must be finite and quantile in (0, 1)")),
        }
        let s = &self.sur;
        if s.q < 2 {
            return Err(config_err("sur.q", "quantizer needs q >= 2"));
        }
        if s.l == 0 {
            return Err(config_err("sur.l", "candidate sample size must be >= 1"));
        }
        if s.n_init < basis.len() {
            return Err(config_err(
                "sur.n_init",
                format!(
                    "initial design needs at least {} points for the trend basis",
                    basis.len()
                ),
            ));
        }
        if s.n_max < s.n_init {
            return Err(config_err("sur.n_max", "n_max is below n_init"));
        }
        let sim = &self.simulation;
        if !(sim.jitter >= 0.0) {
            return Err(config_err("simulation.jitter", "jitter must be >= 0"));
        }
        if !(sim.box_width > 0.0) {
            return Err(config_err("simulation.box_width", "box width must be > 0"));
        }
        if sim.plot_points < 2 {
            return Err(config_err("simulation.plot_points", "need at least 2 points per axis"));
        }
        if let Some(c) = &self.compare {
            let mut distinct = c.strategies.clone();
            distinct.sort();
            distinct.dedup();
            if distinct.len() != c.strategies.len() {
                return Err(config_err("compare.strategies", "strategies are listed twice"));
            }
            if c.budget.is_some_and(|b| b < s.n_init) {
                return Err(config_err("compare.budget", "budget is below sur.n_init"));
            }
        }
        match self.experiment.scenario {
            Scenario::Convergence | Scenario::VarianceRate => {
                let Some(c) = &self.convergence else {
                    return Err(config_err("convergence", "section required by this scenario"));
                };
                if distribution.kind() != DistributionKind::UniformBox || distribution.dim() != 1 {
                    return Err(config_err("distribution.kind", "this scenario needs a 1-D uniform_box"));
                }
                if c.sizes.is_empty() {
                    return Err(config_err("convergence.sizes", "no design sizes"));
                }
                if let Some(n) = c
                    .sizes
                    .iter()
                    .find(|&&n| n < basis.len() || n == 0 || !c.fine.is_multiple_of(n))
                {
                    return Err(config_err(
                        "convergence.sizes",
                        format!("size {n} must divide `fine` = {} and hold the trend basis", c.fine),
                    ));
                }
                if c.paths == 0 {
                    return Err(config_err("convergence.paths", "need at least one path"));
                }
                if self.experiment.scenario == Scenario::Convergence && self.threshold.value.is_none() {
                    return Err(config_err(
                        "threshold.value",
                        "this scenario needs a fixed threshold value",
                    ));
                }
            }
            Scenario::Snapshot if distribution.dim() != 1 => {
                return Err(config_err("distribution", "the snapshot scenario is one-dimensional"));
            }
            _ => {}
        }
        Ok(Resolved {
            config: self.clone(),
            covariance,
            basis,
            distribution,
        })
    }

    fn build_distribution(&self) -> Result<InputDistribution> {
        let d = &self.distribution;
        let need = |v: &Option<Vec<f64>>, field: &str| {
            v.clone()
                .ok_or_else(|| config_err(&format!("distribution.{field}"), "missing for this kind"))
        };
        let built = match d.kind {
            DistributionKind::GaussianDiag => {
                InputDistribution::gaussian_diag(need(&d.mean, "mean")?, need(&d.sd, "sd")?)
            }
            DistributionKind::GaussianFull => {
                let mean = need(&d.mean, "mean")?;
                let rows = d
                    .cov
                    .clone()
                    .ok_or_else(|| config_err("distribution.cov", "missing for this kind"))?;
                if rows.len() != mean.len() || rows.iter().any(|r| r.len() != mean.len()) {
                    return Err(config_err(
                        "distribution.cov",
                        "covariance must be a square matrix matching the mean",
                    ));
                }
                let cov = DMatrix::from_fn(mean.len(), mean.len(), |i, j| rows[i][j]);
                InputDistribution::gaussian_full(mean, cov)
            }
            DistributionKind::UniformBox => {
                InputDistribution::uniform_box(need(&d.lower, "lower")?, need(&d.upper, "upper")?)
            }
        };
        built.map_err(|e| config_err("distribution", e.to_string()))
    }
}

/// A validated config with its model objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub covariance: GeneralizedCovariance,
    pub basis: MonomialBasis,
    pub distribution: InputDistribution,
}

/// Seeded true path, tabulated on every point an experiment will query.
#[derive(Debug, Clone)]
pub struct World {
    pub seed: u64,
    pub candidates: Vec<Vec<f64>>,
    pub initial: Vec<Vec<f64>>,
    pub truth: Tabulated,
    pub threshold: f64,
    /// `|A_u(f)|` over the candidate sample.
    pub reference: f64,
}

impl World {
    pub fn f(&self, x: &[f64]) -> f64 {
        self.truth.eval(x)
    }

    pub fn initial_design(&self) -> Result<DesignSet> {
        let values = self.initial.iter().map(|x| self.f(x)).collect();
        DesignSet::new(self.initial.clone(), values)
    }
}

/// Type-7 empirical quantile.
pub fn empirical_quantile(values: &[f64], level: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `n`-point lattice over the distribution's box (`floor(n^(1/d))` nodes per axis).
pub fn lattice_design(mu: &InputDistribution, n: usize, box_width: f64) -> Result<Vec<Vec<f64>>> {
    let d = mu.dim();
    let mut per_axis = 1;
    while (per_axis + 1usize).pow(d as u32) <= n {
        per_axis += 1;
    }
    let (lower, upper) = mu.bounding_box(box_width);
    lattice(&lower, &upper, per_axis)
}

impl Resolved {
    fn sur_config(&self, seed: u64, threshold: f64, n_max: usize) -> SurConfig {
        let s = &self.config.sur;
        SurConfig {
            threshold,
            quantizer_size: s.q,
            candidates: s.l,
            n_max,
            seed,
            covariance: self.covariance.clone(),
            basis: self.basis.clone(),
            distribution: self.distribution.clone(),
            criterion_tol: s.criterion_tol,
        }
    }

    pub fn budget(&self) -> usize {
        self.config
            .compare
            .as_ref()
            .and_then(|c| c.budget)
            .unwrap_or(self.config.sur.n_max)
    }

    fn random_mc_seed(seed: u64) -> u64 {
        seed::derive(seed, "random_mc")
    }

    /// Simulate the true path on candidates, initial design and `extra`,
    /// then resolve the threshold.
    pub fn world(&self, seed: u64, extra: &[Vec<f64>]) -> Result<World> {
        let candidates = candidate_sample(&self.sur_config(seed, 0.0, 0));
        let initial = self.distribution.quasi_random(self.config.sur.n_init);
        let mut joint: Vec<Vec<f64>> = Vec::new();
        let mut seen = Tabulated::default();
        for p in candidates.iter().chain(&initial).chain(extra) {
            if seen.get(p).is_none() {
                seen.insert(p, 0.0);
                joint.push(p.clone());
            }
        }
        let sampler = PathSampler::with_jitter(&self.covariance, &self.basis, &joint, self.config.simulation.jitter)?;
        let path = sampler.sample(&vec![0.0; self.basis.len()], seed::derive(seed, "truth"))?;
        let truth = path.table();
        let on_candidates: Vec<f64> = candidates.iter().map(|x| truth.eval(x)).collect();
        let threshold = match (self.config.threshold.value, self.config.threshold.quantile) {
            (Some(v), _) => v,
            (None, Some(a)) => empirical_quantile(&on_candidates, a),
            (None, None) => unreachable!("validated in resolve"),
        };
        let reference = on_candidates.iter().filter(|&&v| v >= threshold).count() as f64 / candidates.len() as f64;
        Ok(World {
            seed,
            candidates,
            initial,
            truth,
            threshold,
            reference,
        })
    }

    /// Points every strategy of a comparison may evaluate.
    fn strategy_points(&self, strategies: &[Strategy], budget: usize) -> Result<Vec<Vec<f64>>> {
        let mut extra = Vec::new();
        if strategies.contains(&Strategy::Lattice) {
            for n in self.config.sur.n_init..=budget {
                extra.extend(lattice_design(&self.distribution, n, self.config.simulation.box_width)?);
            }
        }
        Ok(extra)
    }

    fn mc_points(&self, seed: u64, budget: usize) -> Vec<Vec<f64>> {
        self.distribution.sample_n(budget, Self::random_mc_seed(seed))
    }

    /// Plug-in volume over the candidate sample for a model built on `points`.
    fn design_volume(&self, world: &World, points: Vec<Vec<f64>>) -> Result<f64> {
        let values = points.iter().map(|x| world.f(x)).collect();
        let model = KrigingModel::build(
            DesignSet::new(points, values)?,
            self.covariance.clone(),
            self.basis.clone(),
        )?;
        let hits = world
            .candidates
            .par_iter()
            .filter(|y| model.predict_mean(y) >= world.threshold)
            .count();
        Ok(hits as f64 / world.candidates.len() as f64)
    }

    pub fn run_sur_in(&self, world: &World, n_max: usize) -> Result<SurRun> {
        let config = self.sur_config(world.seed, world.threshold, n_max);
        run_sur(|x| world.f(x), world.initial_design()?, &config)
    }

    /// Error-versus-evaluations curve of one strategy.
    pub fn strategy_curve(&self, strategy: Strategy, world: &World, budget: usize) -> Result<Vec<CurvePoint>> {
        let n_init = self.config.sur.n_init;
        let point = |n_evals: usize, volume: f64| CurvePoint {
            n_evals,
            volume,
            reference: world.reference,
            abs_error: (volume - world.reference).abs(),
        };
        match strategy {
            Strategy::Sur => {
                let run = self.run_sur_in(world, budget)?;
                let mut curve = vec![point(n_init, run.initial.volume)];
                curve.extend(run.steps.iter().map(|s| point(s.design_size, s.estimate.volume)));
                Ok(curve)
            }
            Strategy::Lattice => (n_init..=budget)
                .map(|n| {
                    let pts = lattice_design(&self.distribution, n, self.config.simulation.box_width)?;
                    Ok(point(n, self.design_volume(world, pts)?))
                })
                .collect(),
            Strategy::RandomMc => (n_init.max(1)..=budget)
                .map(|n| {
                    let est = mc_volume(
                        |x| world.f(x),
                        world.threshold,
                        &self.distribution,
                        n,
                        Self::random_mc_seed(world.seed),
                    )?;
                    Ok(point(n, est.volume))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n_evals: usize,
    pub volume: f64,
    pub reference: f64,
    pub abs_error: f64,
}

/// One design size of a convergence study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub fill_distance: f64,
    pub sup_sd: f64,
    /// `E[(1{xi >= u} - 1{xi_n >= u})^2]`, averaged over the box and the paths.
    pub mismatch: f64,
    /// `mismatch / (sup_sd * |ln sup_sd|^(1/2))`
    pub ratio: f64,
}

/// Nested lattices `lower + (upper - lower) * i / n`, `0 <= i <= n`, on a 1-D
/// box probed by `fine + 1` equally spaced nodes; `paths == 0` skips simulation.
///
/// The mismatch of a path is the fraction of the box where `xi` and `xi_n`
/// fall on different sides of `u`, both linearly interpolated between nodes.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    cov: &GeneralizedCovariance,
    basis: &MonomialBasis,
    lower: f64,
    upper: f64,
    sizes: &[usize],
    fine: usize,
    paths: usize,
    threshold: f64,
    seed: u64,
    jitter: f64,
) -> Result<Vec<ConvergenceRow>> {
    let grid: Vec<Vec<f64>> = (0..=fine)
        .map(|i| vec![lower + (upper - lower) * i as f64 / fine as f64])
        .collect();
    let sampler = if paths > 0 {
        Some(PathSampler::with_jitter(cov, basis, &grid, jitter)?)
    } else {
        None
    };
    let simulated: Vec<Vec<f64>> = match &sampler {
        Some(s) => (0..paths)
            .into_par_iter()
            .map(|k| s.sample_values(seed::derive_indexed(seed, "convergence", k as u64)))
            .collect(),
        None => Vec::new(),
    };
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n == 0 || !fine.is_multiple_of(n) {
            return Err(Error::InvalidParameter(format!("design size {n} must divide {fine}")));
        }
        let slots: Vec<usize> = (0..=n).map(|i| i * (fine / n)).collect();
        let points: Vec<Vec<f64>> = slots.iter().map(|&s| grid[s].clone()).collect();
        let model = KrigingModel::build(
            DesignSet::new(points.clone(), vec![0.0; n + 1])?,
            cov.clone(),
            basis.clone(),
        )?;
        let solved: Vec<(Vec<f64>, f64)> = grid
            .par_iter()
            .map(|x| {
                let p = model.predict_with_weights(x);
                let sd = p.std_dev();
                (p.weights.expect("weights requested").iter().copied().collect(), sd)
            })
            .collect();
        let sup_sd = solved.iter().map(|s| s.1).fold(0.0, f64::max);
        let mut mismatch_sum = 0.0;
        let mut predicted = vec![0.0; grid.len()];
        for path in &simulated {
            for (g, (w, _)) in solved.iter().enumerate() {
                predicted[g] = w.iter().zip(&slots).map(|(a, &s)| a * path[s]).sum();
            }
            let mut length = 0.0;
            for g in 0..fine {
                length += disagreement(
                    path[g] - threshold,
                    path[g + 1] - threshold,
                    predicted[g] - threshold,
                    predicted[g + 1] - threshold,
                );
            }
            mismatch_sum += length / fine as f64;
        }
        let mismatch = if paths > 0 {
            mismatch_sum / paths as f64
        } else {
            f64::NAN
        };
        let h = fill_distance(
            &points,
            Probe::Box {
                lower: &[lower],
                upper: &[upper],
                per_axis: fine + 1,
            },
        )?;
        rows.push(ConvergenceRow {
            n,
            fill_distance: h,
            sup_sd,
            mismatch,
            ratio: mismatch / (sup_sd * sup_sd.ln().abs().sqrt()),
        });
    }
    Ok(rows)
}

/// Part of `[0, 1]` where the linear interpolants of `a` and `b` have
/// different signs (`>= 0` versus `< 0`).
pub fn disagreement(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let (alo, ahi) = nonneg_part(a0, a1);
    let (blo, bhi) = nonneg_part(b0, b1);
    let common = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    (ahi - alo) + (bhi - blo) - 2.0 * common
}

/// `{t in [0, 1] : v0 + (v1 - v0) t >= 0}` as an interval.
fn nonneg_part(v0: f64, v1: f64) -> (f64, f64) {
    match (v0 >= 0.0, v1 >= 0.0) {
        (true, true) => (0.0, 1.0),
        (false, false) => (0.0, 0.0),
        (true, false) => (0.0, v0 / (v0 - v1)),
        (false, true) => (v0 / (v0 - v1), 1.0),
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Artifact directory writer: atomic files, schema sidecars, manifest.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_atomic(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, self.dir.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Write a CSV produced by `fill` plus `name.schema` describing its columns.
    pub fn csv<F>(&mut self, name: &str, schema: &[(&str, &str)], fill: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write_atomic(name, &buf)?;
        let mut text = String::new();
        for (column, meaning) in schema {
            text.push_str(&format!("{column}: {meaning}\n"));
        }
        self.write_atomic(&format!("{name}.schema"), text.as_bytes())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        text.push('\n');
        self.write_atomic(name, text.as_bytes())
    }

    /// Resolved config and per-seed values; the first line is a timestamp.
    pub fn manifest(&mut self, config: &ExperimentConfig, resolved: &BTreeMap<String, String>) -> Result<()> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut text = format!("# timestamp = {stamp}\n");
        text.push_str(&format!("# crate_version = {}\n", env!("CARGO_PKG_VERSION")));
        text.push_str(&config.to_toml());
        text.push_str("\n[resolved]\n");
        for (k, v) in resolved {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text.push_str("\n[files]\nlist = [");
        let names: Vec<String> = self.files.iter().map(|f| format!("\"{f}\"")).collect();
        text.push_str(&names.join(", "));
        text.push_str("]\n");
        self.write_atomic("manifest.toml", text.as_bytes())
    }
}

const TRAJECTORY_SCHEMA: &[(&str, &str)] = &[
    ("iteration", "loop iteration; 0 is the initial design"),
    ("x_k", "coordinates of the evaluated point, empty on row 0"),
    ("f", "observed value, empty on row 0"),
    (
        "criterion_min",
        "smallest criterion over the candidates when the point was chosen",
    ),
    ("volume", "plug-in excursion volume over the candidate sample"),
    ("std_error", "binomial standard error of the volume"),
];

const CURVE_SCHEMA: &[(&str, &str)] = &[
    ("strategy", "design strategy"),
    ("seed", "experiment seed"),
    ("n_evals", "evaluations of f used"),
    ("volume", "estimated excursion volume"),
    (
        "reference",
        "excursion volume of the true path over the candidate sample",
    ),
    ("abs_error", "|volume - reference|"),
];

#[derive(Debug, Clone, Serialize)]
struct SeedSummary {
    seed: u64,
    threshold: f64,
    reference: f64,
    final_volume: Option<f64>,
    abs_error: Option<f64>,
    evaluations: usize,
}

/// Execute the configured scenario into `out`.
pub fn cmd_run(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let resolved = config.resolve()?;
    let mut art = Artifacts::create(out)?;
    let mut manifest = BTreeMap::new();
    match config.experiment.scenario {
        Scenario::SurRun => run_sur_scenario(&resolved, &mut art, &mut manifest)?,
        Scenario::GridRun => run_grid_scenario(&resolved, &mut art, &mut manifest)?,
        Scenario::Convergence | Scenario::VarianceRate => run_convergence_scenario(&resolved, &mut art, &mut manifest)?,
        Scenario::Snapshot => run_snapshot_scenario(&resolved, &mut art, &mut manifest)?,
    }
    art.manifest(config, &manifest)
}

/// Seed as a quoted TOML string.
fn stream(seed: u64) -> String {
    format!("\"{seed}\"")
}

fn record_world(manifest: &mut BTreeMap<String, String>, world: &World) {
    manifest.insert(format!("seed_{}.threshold", world.seed), world.threshold.to_string());
    manifest.insert(format!("seed_{}.reference", world.seed), world.reference.to_string());
    manifest.insert(
        format!("seed_{}.candidates_seed", world.seed),
        stream(seed::derive(world.seed, "candidates")),
    );
    manifest.insert(
        format!("seed_{}.truth_seed", world.seed),
        stream(seed::derive(world.seed, "truth")),
    );
}

fn run_sur_scenario(r: &Resolved, art: &mut Artifacts, manifest: &mut BTreeMap<String, String>) -> Result<()> {
    let mut summaries = Vec::new();
    for &seed in &r.config.experiment.seeds {
        let world = r.world(seed, &[])?;
        let run = r.run_sur_in(&world, r.config.sur.n_max)?;
        record_world(manifest, &world);
        art.csv(&format!("trajectory_seed{seed}.csv"), TRAJECTORY_SCHEMA, |buf| {
            run.write_trajectory_csv(buf)
        })?;
        let v = run.final_estimate().volume;
        summaries.push(SeedSummary {
            seed,
            threshold: world.threshold,
            reference: world.reference,
            final_volume: Some(v),
            abs_error: Some((v - world.reference).abs()),
            evaluations: run.state.model().design().len(),
        });
    }
    art.json("summary.json", &summaries)
}

fn run_grid_scenario(r: &Resolved, art: &mut Artifacts, manifest: &mut BTreeMap<String, String>) -> Result<()> {
    let budget = r.config.sur.n_max;
    let extra = r.strategy_points(&[Strategy::Lattice], budget)?;
    let mut summaries = Vec::new();
    for &seed in &r.config.experiment.seeds {
        let world = r.world(seed, &extra)?;
        record_world(manifest, &world);
        let curve = r.strategy_curve(Strategy::Lattice, &world, budget)?;
        art.csv(&format!("grid_seed{seed}.csv"), &CURVE_SCHEMA[2..], |buf| {
            write_curve(buf, &curve)
        })?;
        let last = curve.last().expect("non-empty curve");
        summaries.push(SeedSummary {
            seed,
            threshold: world.threshold,
            reference: world.reference,
            final_volume: Some(last.volume),
            abs_error: Some(last.abs_error),
            evaluations: last.n_evals,
        });
    }
    art.json("summary.json", &summaries)
}

fn write_curve(buf: &mut Vec<u8>, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["n_evals", "volume", "reference", "abs_error"])?;
    for c in curve {
        w.write_record([
            c.n_evals.to_string(),
            c.volume.to_string(),
            c.reference.to_string(),
            c.abs_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run_convergence_scenario(r: &Resolved, art: &mut Artifacts, manifest: &mut BTreeMap<String, String>) -> Result<()> {
    let c = r.config.convergence.as_ref().expect("validated");
    let (lower, upper) = r.distribution.bounding_box(1.0);
    let with_paths = r.config.experiment.scenario == Scenario::Convergence;
    let threshold = r.config.threshold.value.unwrap_or(0.0);
    let mut tables = Vec::new();
    for &seed in &r.config.experiment.seeds {
        let rows = convergence_study(
            &r.covariance,
            &r.basis,
            lower[0],
            upper[0],
            &c.sizes,
            c.fine,
            if with_paths { c.paths } else { 0 },
            threshold,
            seed,
            r.config.simulation.jitter,
        )?;
        manifest.insert(
            format!("seed_{seed}.paths_seed"),
            stream(seed::derive_indexed(seed, "convergence", 0)),
        );
        tables.push((seed, rows));
        if !with_paths {
            // the variance does not depend on the seed
            break;
        }
    }
    let name = if with_paths {
        "convergence.csv"
    } else {
        "variance_rate.csv"
    };
    let schema: &[(&str, &str)] = &[
        ("seed", "experiment seed"),
        ("n", "design size"),
        ("fill_distance", "largest distance from a probe node to the design"),
        ("sup_sd", "largest predictive standard deviation on the probe grid"),
        (
            "mismatch",
            "mean of (1{xi >= u} - 1{xi_n >= u})^2 over the box and the paths",
        ),
        ("ratio", "mismatch / (sup_sd * sqrt(|ln sup_sd|))"),
    ];
    art.csv(name, schema, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["seed", "n", "fill_distance", "sup_sd", "mismatch", "ratio"])?;
        for (seed, rows) in &tables {
            for row in rows {
                w.write_record([
                    seed.to_string(),
                    row.n.to_string(),
                    row.fill_distance.to_string(),
                    row.sup_sd.to_string(),
                    row.mismatch.to_string(),
                    row.ratio.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    #[derive(Serialize)]
    struct Summary {
        seed: u64,
        slope: f64,
        ratio_spread: f64,
    }
    let summaries: Vec<Summary> = tables
        .iter()
        .map(|(seed, rows)| {
            let h: Vec<f64> = rows.iter().map(|r| r.fill_distance).collect();
            let s: Vec<f64> = rows.iter().map(|r| r.sup_sd).collect();
            let ratios = rows.iter().map(|r| r.ratio);
            let max = ratios.clone().fold(f64::NEG_INFINITY, f64::max);
            let min = ratios.fold(f64::INFINITY, f64::min);
            Summary {
                seed: *seed,
                slope: log_log_slope(&h, &s),
                ratio_spread: max / min,
            }
        })
        .collect();
    art.json("summary.json", &summaries)
}

fn run_snapshot_scenario(r: &Resolved, art: &mut Artifacts, manifest: &mut BTreeMap<String, String>) -> Result<()> {
    let (lower, upper) = r.distribution.bounding_box(r.config.simulation.box_width);
    let plot = lattice(&lower, &upper, r.config.simulation.plot_points)?;
    let mut summaries = Vec::new();
    for &seed in &r.config.experiment.seeds {
        let world = r.world(seed, &plot)?;
        record_world(manifest, &world);
        let run = r.run_sur_in(&world, r.config.sur.n_max)?;
        let model = run.state.model();
        art.csv(
            &format!("snapshot_curves_seed{seed}.csv"),
            &[
                ("x_1", "plot abscissa"),
                ("f", "true path"),
                ("mean", "Kriging predictor"),
                ("sd", "predictive standard deviation"),
                ("excursion_probability", "P{xi(x) >= u | observations}"),
                ("density", "density of mu"),
            ],
            |buf| {
                let mut w = csv::Writer::from_writer(buf);
                w.write_record(["x_1", "f", "mean", "sd", "excursion_probability", "density"])?;
                for x in &plot {
                    let p = model.predict(x);
                    w.write_record([
                        x[0].to_string(),
                        world.f(x).to_string(),
                        p.mean.to_string(),
                        p.std_dev().to_string(),
                        excursion_probability(&p, world.threshold).to_string(),
                        r.distribution.density(x).to_string(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            },
        )?;
        let selection = run.state.select_next();
        let profile = match &selection {
            Ok(s) => s.profile.clone(),
            Err(_) => vec![f64::INFINITY; run.state.candidates().len()],
        };
        art.csv(
            &format!("snapshot_profile_seed{seed}.csv"),
            &[
                ("x_k", "candidate coordinates"),
                ("criterion", "criterion for the next evaluation; inf if excluded"),
            ],
            |buf| write_profile_csv(buf, run.state.candidates(), &profile),
        )?;
        art.csv(
            &format!("snapshot_design_seed{seed}.csv"),
            &[("x_k", "evaluated point"), ("f", "observed value")],
            |buf| model.design().write_csv(buf),
        )?;
        art.csv(&format!("trajectory_seed{seed}.csv"), TRAJECTORY_SCHEMA, |buf| {
            run.write_trajectory_csv(buf)
        })?;
        if let Ok(s) = &selection {
            manifest.insert(format!("seed_{seed}.next_index"), s.index.to_string());
        }
        let v = run.final_estimate().volume;
        summaries.push(SeedSummary {
            seed,
            threshold: world.threshold,
            reference: world.reference,
            final_volume: Some(v),
            abs_error: Some((v - world.reference).abs()),
            evaluations: model.design().len(),
        });
    }
    art.json("summary.json", &summaries)
}

/// Paired strategies per seed: error curves and win rates of final errors.
pub fn cmd_compare(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let resolved = config.resolve()?;
    let Some(section) = &config.compare else {
        return Err(config_err("compare", "section required by `compare`"));
    };
    if section.strategies.len() < 2 {
        return Err(config_err("compare.strategies", "name at least two strategies"));
    }
    let budget = resolved.budget();
    let report = compare(&resolved, &section.strategies, budget)?;
    let mut art = Artifacts::create(out)?;
    art.csv("comparison.csv", CURVE_SCHEMA, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["strategy", "seed", "n_evals", "volume", "reference", "abs_error"])?;
        for (strategy, seed, curve) in &report.curves {
            for c in curve {
                w.write_record([
                    strategy.name().to_string(),
                    seed.to_string(),
                    c.n_evals.to_string(),
                    c.volume.to_string(),
                    c.reference.to_string(),
                    c.abs_error.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    art.csv(
        "win_rates.csv",
        &[
            ("strategy", "first strategy"),
            ("versus", "second strategy"),
            (
                "wins",
                "seeds where the first strategy's final error is <= the second's",
            ),
            ("seeds", "number of paired seeds"),
        ],
        |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["strategy", "versus", "wins", "seeds"])?;
            for wr in &report.win_rates {
                w.write_record([
                    wr.strategy.name(),
                    wr.versus.name(),
                    &wr.wins.to_string(),
                    &wr.seeds.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        },
    )?;
    art.json("summary.json", &report.win_rates)?;
    let mut manifest = BTreeMap::new();
    manifest.insert("budget".to_string(), budget.to_string());
    for (seed, threshold, reference) in &report.worlds {
        manifest.insert(format!("seed_{seed}.threshold"), threshold.to_string());
        manifest.insert(format!("seed_{seed}.reference"), reference.to_string());
        manifest.insert(
            format!("seed_{seed}.random_mc_seed"),
            stream(Resolved::random_mc_seed(*seed)),
        );
    }
    art.manifest(config, &manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WinRate {
    pub strategy: Strategy,
    pub versus: Strategy,
    pub wins: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub curves: Vec<(Strategy, u64, Vec<CurvePoint>)>,
    pub win_rates: Vec<WinRate>,
    /// `(seed, threshold, reference)`
    pub worlds: Vec<(u64, f64, f64)>,
}

/// `(seed, threshold, reference, one curve per strategy)`
type SeedCurves = (u64, f64, f64, Vec<Vec<CurvePoint>>);

/// Run every strategy on the same true path for each seed.
pub fn compare(r: &Resolved, strategies: &[Strategy], budget: usize) -> Result<CompareReport> {
    let extra = r.strategy_points(strategies, budget)?;
    let per_seed: Vec<Result<SeedCurves>> = r
        .config
        .experiment
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut points = extra.clone();
            if strategies.contains(&Strategy::RandomMc) {
                points.extend(r.mc_points(seed, budget));
            }
            let world = r.world(seed, &points)?;
            let curves = strategies
                .iter()
                .map(|&s| r.strategy_curve(s, &world, budget))
                .collect::<Result<Vec<_>>>()?;
            Ok((seed, world.threshold, world.reference, curves))
        })
        .collect();
    let mut curves = Vec::new();
    let mut worlds = Vec::new();
    let mut finals: Vec<Vec<f64>> = vec![Vec::new(); strategies.len()];
    for entry in per_seed {
        let (seed, threshold, reference, seed_curves) = entry?;
        worlds.push((seed, threshold, reference));
        for (k, (s, curve)) in strategies.iter().zip(seed_curves).enumerate() {
            finals[k].push(curve.last().map_or(f64::NAN, |c| c.abs_error));
            curves.push((*s, seed, curve));
        }
    }
    let mut win_rates = Vec::new();
    for a in 0..strategies.len() {
        for b in 0..strategies.len() {
            if a != b {
                let wins = finals[a].iter().zip(&finals[b]).filter(|(x, y)| x <= y).count();
                win_rates.push(WinRate {
                    strategy: strategies[a],
                    versus: strategies[b],
                    wins,
                    seeds: finals[a].len(),
                });
            }
        }
    }
    Ok(CompareReport {
        curves,
        win_rates,
        worlds,
    })
}

/// Unconditional paths on the plotting lattice, one file per seed.
pub fn cmd_simulate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let r = config.resolve()?;
    let (lower, upper) = r.distribution.bounding_box(config.simulation.box_width);
    let d = r.distribution.dim();
    let mut per_axis = config.simulation.plot_points;
    if d > 1 {
        per_axis = (config.simulation.plot_points as f64)
            .powf(1.0 / d as f64)
            .floor()
            .max(2.0) as usize;
    }
    let grid = lattice(&lower, &upper, per_axis)?;
    let sampler = PathSampler::with_jitter(&r.covariance, &r.basis, &grid, config.simulation.jitter)?;
    let mut art = Artifacts::create(out)?;
    let mut manifest = BTreeMap::new();
    for &seed in &config.experiment.seeds {
        let path_seed = seed::derive(seed, "truth");
        let path = sampler.sample(&vec![0.0; r.basis.len()], path_seed)?;
        manifest.insert(format!("seed_{seed}.truth_seed"), stream(path_seed));
        art.csv(
            &format!("path_seed{seed}.csv"),
            &[("x_k", "grid coordinates"), ("value", "simulated path")],
            |buf| write_paths_csv(buf, std::slice::from_ref(&path)),
        )?;
    }
    art.manifest(config, &manifest)
}

/// Plug-in volume of the model fitted to a design file.
pub fn cmd_estimate(config: &ExperimentConfig, design_path: &Path, out: &Path) -> Result<()> {
    let r = config.resolve()?;
    let design = DesignSet::read_csv(fs::File::open(design_path)?)?;
    if design.dim() != r.distribution.dim() {
        return Err(config_err(
            "distribution",
            "design dimension does not match the distribution",
        ));
    }
    let model = KrigingModel::build(design, r.covariance.clone(), r.basis.clone())?;
    let mut estimates: Vec<ExcursionEstimate> = Vec::new();
    for &seed in &config.experiment.seeds {
        let volume_seed = seed::derive(seed, "candidates");
        let threshold = match (config.threshold.value, config.threshold.quantile) {
            (Some(v), _) => v,
            (None, Some(a)) => {
                let sample = r.distribution.sample_n(config.sur.l, volume_seed);
                let means: Vec<f64> = sample.iter().map(|x| model.predict_mean(x)).collect();
                empirical_quantile(&means, a)
            }
            (None, None) => unreachable!("validated in resolve"),
        };
        estimates.push(crate::excursion::plugin_volume(
            &model,
            threshold,
            &r.distribution,
            config.sur.l,
            volume_seed,
        )?);
    }
    let mut art = Artifacts::create(out)?;
    art.csv(
        "estimate.csv",
        &[
            ("u", "threshold"),
            ("volume", "plug-in excursion volume"),
            ("std_error", "binomial standard error"),
            ("l", "Monte Carlo sample size"),
            ("seed", "stream seed of the sample"),
        ],
        |buf| write_estimates_csv(buf, &estimates),
    )?;
    let mut manifest = BTreeMap::new();
    manifest.insert(
        "design".to_string(),
        toml::Value::String(design_path.display().to_string()).to_string(),
    );
    art.manifest(config, &manifest)
}
