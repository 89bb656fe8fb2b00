//! Gaussian sample paths on finite grids.
//!
//! Positive definite covariances are simulated directly from a Cholesky
//! factor of the grid Gram matrix. Intrinsic families (`-|h|`, `|h|^3`, the
//! polynomial family) have no covariance of their own, so a representation is
//! simulated instead: the process `xi(x) - sum_i L_i(x) xi(a_i)`, where the
//! `a_i` are `q` anchor points unisolvent for the trend basis and the `L_i`
//! their Lagrange polynomials. Its covariance
//!
//! ```text
//! C(x, y) = k(x - y) - L(x)^T k_a(y) - L(y)^T k_a(x) + L(x)^T K_aa L(y)
//! ```
//!
//! is positive semi-definite, and it differs from any other representation by
//! a polynomial of degree `<= l`, which intrinsic Kriging filters out.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::{distance, Family, GeneralizedCovariance, MonomialBasis};
use crate::error::{Error, Result};
use crate::kriging::{KrigingModel, DUPLICATE_TOL};
use crate::seed;

/// Default diagonal jitter, relative to the largest grid variance.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// Everything that determined a simulated path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub family: Family,
    pub params: Vec<f64>,
    pub basis_degree: usize,
    pub trend_coeffs: Vec<f64>,
    pub seed: u64,
    /// Absolute diagonal jitter added before factorization.
    pub jitter: f64,
    /// Anchor points of the simulated representation; empty when `k` is used directly.
    pub anchors: Vec<Vec<f64>>,
}

/// One realization on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub grid: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl PathSample {
    /// Exact-match lookup table over the grid.
    pub fn table(&self) -> Tabulated {
        Tabulated::new(&self.grid, &self.values)
    }
}

/// A function known only on a finite point set.
#[derive(Debug, Clone, Default)]
pub struct Tabulated {
    values: HashMap<Vec<u64>, f64>,
}

impl Tabulated {
    pub fn new(points: &[Vec<f64>], values: &[f64]) -> Self {
        let values = points.iter().zip(values).map(|(p, v)| (key(p), *v)).collect();
        Self { values }
    }

    pub fn insert(&mut self, x: &[f64], value: f64) {
        self.values.insert(key(x), value);
    }

    pub fn get(&self, x: &[f64]) -> Option<f64> {
        self.values.get(&key(x)).copied()
    }

    /// NaN off the table.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.get(x).unwrap_or(f64::NAN)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Factor of the grid covariance, reused across seeds.
#[derive(Debug, Clone)]
pub struct PathSampler {
    cov: GeneralizedCovariance,
    basis: MonomialBasis,
    grid: Vec<Vec<f64>>,
    factor: DMatrix<f64>,
    jitter: f64,
    anchors: Vec<Vec<f64>>,
}

impl PathSampler {
    pub fn new(cov: &GeneralizedCovariance, basis: &MonomialBasis, grid: &[Vec<f64>]) -> Result<Self> {
        Self::with_jitter(cov, basis, grid, DEFAULT_JITTER)
    }

    /// `relative_jitter` times the largest diagonal entry is added to the diagonal.
    pub fn with_jitter(
        cov: &GeneralizedCovariance,
        basis: &MonomialBasis,
        grid: &[Vec<f64>],
        relative_jitter: f64,
    ) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Empty("simulation grid"));
        }
        if basis.degree() < cov.cpd_order() {
            return Err(Error::OrderMismatch {
                degree: basis.degree(),
                order: cov.cpd_order(),
            });
        }
        for p in grid {
            if p.len() != basis.dim() {
                return Err(Error::DimensionMismatch {
                    expected: basis.dim(),
                    got: p.len(),
                });
            }
        }
        if !(relative_jitter >= 0.0) {
            return Err(Error::InvalidParameter("jitter must be >= 0".into()));
        }
        let (mut c, anchors) = if cov.is_positive_definite() {
            (cov.gram(grid), Vec::new())
        } else {
            let anchors = anchor_points(grid, basis);
            (representation_gram(cov, basis, grid, &anchors)?, anchors)
        };
        let scale = c.diagonal().amax().max(cov.scale() * f64::EPSILON);
        let jitter = relative_jitter * scale;
        for i in 0..grid.len() {
            c[(i, i)] += jitter;
        }
        let factor = c
            .cholesky()
            .ok_or_else(|| {
                Error::Factorization(format!(
                    "grid covariance is not positive definite with jitter {jitter:.3e} \
                     (near-duplicate grid points?)"
                ))
            })?
            .unpack();
        Ok(Self {
            cov: cov.clone(),
            basis: basis.clone(),
            grid: grid.to_vec(),
            factor,
            jitter,
            anchors,
        })
    }

    pub fn grid(&self) -> &[Vec<f64>] {
        &self.grid
    }

    /// Zero-trend values for one seed.
    pub fn sample_values(&self, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        let n = self.grid.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.factor * z).iter().copied().collect()
    }

    pub fn sample(&self, trend_coeffs: &[f64], seed: u64) -> Result<PathSample> {
        if trend_coeffs.len() != self.basis.len() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.len(),
                got: trend_coeffs.len(),
            });
        }
        let mut values = self.sample_values(seed);
        if trend_coeffs.iter().any(|&b| b != 0.0) {
            let mut p = vec![0.0; self.basis.len()];
            for (v, x) in values.iter_mut().zip(&self.grid) {
                self.basis.eval_into(x, &mut p);
                *v += p.iter().zip(trend_coeffs).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(PathSample {
            grid: self.grid.clone(),
            values,
            provenance: Provenance {
                family: self.cov.family(),
                params: self.cov.params().to_vec(),
                basis_degree: self.basis.degree(),
                trend_coeffs: trend_coeffs.to_vec(),
                seed,
                jitter: self.jitter,
                anchors: self.anchors.clone(),
            },
        })
    }
}

/// Principal lattice of the bounding box's simplex: `lo + (hi - lo) * i / l`
/// for every multi-index `|i| <= l`. Unisolvent for polynomials of degree `<= l`.
/// For `l = 0` the single anchor is the box centre.
fn anchor_points(grid: &[Vec<f64>], basis: &MonomialBasis) -> Vec<Vec<f64>> {
    let d = basis.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in grid {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..d {
        if hi[k] <= lo[k] {
            hi[k] = lo[k] + 1.0;
        }
    }
    let l = basis.degree();
    if l == 0 {
        return vec![lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect()];
    }
    basis
        .exponents()
        .iter()
        .map(|e| {
            (0..d)
                .map(|k| lo[k] + (hi[k] - lo[k]) * e[k] as f64 / l as f64)
                .collect()
        })
        .collect()
}

fn representation_gram(
    cov: &GeneralizedCovariance,
    basis: &MonomialBasis,
    grid: &[Vec<f64>],
    anchors: &[Vec<f64>],
) -> Result<DMatrix<f64>> {
    let n = grid.len();
    let q = anchors.len();
    // Lagrange polynomials: L(x) = P_a^{-1} p(x)
    let pa = basis.matrix(anchors);
    let pa_lu = pa.lu();
    let pg = basis.matrix(grid);
    let lag = pa_lu
        .solve(&pg)
        .ok_or_else(|| Error::Factorization("anchor points are not unisolvent".into()))?;
    let k_ga = DMatrix::from_fn(n, q, |i, j| cov.eval_between(&grid[i], &anchors[j]));
    let k_aa = cov.gram(anchors);
    let k = cov.gram(grid);
    let cross = &k_ga * &lag; // (i, j) = L(x_j)^T k_a(x_i)
    let mut c = k - &cross - cross.transpose() + lag.transpose() * k_aa * &lag;
    c = (&c + c.transpose()) * 0.5;
    Ok(c)
}

/// One unconditional path: trend plus factorized-covariance transform of
/// standard normal draws.
pub fn sample_path(
    cov: &GeneralizedCovariance,
    basis: &MonomialBasis,
    trend_coeffs: &[f64],
    grid: &[Vec<f64>],
    seed: u64,
) -> Result<PathSample> {
    PathSampler::new(cov, basis, grid)?.sample(trend_coeffs, seed)
}

/// Conditional simulator for a fixed model and grid.
///
/// Each copy is `xi_n(x) + [s(x) - s_n(x)]`, where `s` is an unconditional
/// path on grid and design and `s_n` its Kriging prediction from the design.
#[derive(Debug, Clone)]
pub struct ConditionalSampler<'a> {
    model: &'a KrigingModel,
    grid: Vec<Vec<f64>>,
    sampler: PathSampler,
    // grid index -> index in the joint simulation grid
    grid_slots: Vec<usize>,
    design_slots: Vec<usize>,
    // Kriging weights at each grid point (rows)
    weights: DMatrix<f64>,
    means: Vec<f64>,
}

impl<'a> ConditionalSampler<'a> {
    pub fn new(model: &'a KrigingModel, grid: &[Vec<f64>]) -> Result<Self> {
        if !model.design().is_noise_free() {
            return Err(Error::InvalidParameter(
                "conditional simulation needs exact observations".into(),
            ));
        }
        let design = model.design().points();
        let mut joint: Vec<Vec<f64>> = design.to_vec();
        let design_slots: Vec<usize> = (0..design.len()).collect();
        let mut grid_slots = Vec::with_capacity(grid.len());
        for x in grid {
            match joint.iter().position(|p| distance(p, x) <= DUPLICATE_TOL) {
                Some(slot) => grid_slots.push(slot),
                None => {
                    joint.push(x.clone());
                    grid_slots.push(joint.len() - 1);
                }
            }
        }
        let sampler = PathSampler::new(model.covariance(), model.basis(), &joint)?;
        let n = design.len();
        let mut weights = DMatrix::zeros(grid.len(), n);
        let mut means = Vec::with_capacity(grid.len());
        for (r, x) in grid.iter().enumerate() {
            if let Some(i) = model.design().find_exact(x) {
                weights[(r, i)] = 1.0;
            } else {
                let (sol, _) = model.solve_weights(x);
                for i in 0..n {
                    weights[(r, i)] = sol[i];
                }
            }
            means.push((0..n).map(|i| weights[(r, i)] * model.design().values()[i]).sum());
        }
        Ok(Self {
            model,
            grid: grid.to_vec(),
            sampler,
            grid_slots,
            design_slots,
            weights,
            means,
        })
    }

    pub fn grid(&self) -> &[Vec<f64>] {
        &self.grid
    }

    /// Values of one conditional copy on the grid.
    pub fn draw(&self, seed: u64) -> Vec<f64> {
        let sim = self.sampler.sample_values(seed);
        let at_design: Vec<f64> = self.design_slots.iter().map(|&s| sim[s]).collect();
        self.grid_slots
            .iter()
            .enumerate()
            .map(|(r, &slot)| {
                let predicted: f64 = self.weights.row(r).iter().zip(&at_design).map(|(w, v)| w * v).sum();
                self.means[r] + sim[slot] - predicted
            })
            .collect()
    }

    /// `m` copies with per-copy seeds derived from `seed`.
    pub fn draw_many(&self, m: usize, seed: u64) -> Vec<PathSample> {
        (0..m)
            .into_par_iter()
            .map(|k| {
                let copy_seed = seed::derive_indexed(seed, "conditional", k as u64);
                PathSample {
                    grid: self.grid.clone(),
                    values: self.draw(copy_seed),
                    provenance: Provenance {
                        family: self.model.covariance().family(),
                        params: self.model.covariance().params().to_vec(),
                        basis_degree: self.model.basis().degree(),
                        trend_coeffs: vec![0.0; self.model.basis().len()],
                        seed: copy_seed,
                        jitter: self.sampler.jitter,
                        anchors: self.sampler.anchors.clone(),
                    },
                }
            })
            .collect()
    }
}

/// `m` paths of the process conditioned on the model's observations.
pub fn sample_conditional_paths(
    model: &KrigingModel,
    grid: &[Vec<f64>],
    m: usize,
    seed: u64,
) -> Result<Vec<PathSample>> {
    Ok(ConditionalSampler::new(model, grid)?.draw_many(m, seed))
}

/// Grid coordinates followed by one `value_k` column per path.
pub fn write_paths_csv<W: Write>(writer: W, paths: &[PathSample]) -> Result<()> {
    let Some(first) = paths.first() else {
        return Err(Error::Empty("paths"));
    };
    let d = first.grid.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
    if paths.len() == 1 {
        header.push("value".into());
    } else {
        header.extend((1..=paths.len()).map(|k| format!("value_{k}")));
    }
    w.write_record(&header)?;
    for (i, x) in first.grid.iter().enumerate() {
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.extend(paths.iter().map(|p| p.values[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
