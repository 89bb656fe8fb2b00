//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use exsur::{gaussian_tail, KrigingModel};
use rand::Rng;

/// Gaussian elimination with partial pivoting on a dense copy.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                let (top, bottom) = a.split_at_mut(row);
                for (x, y) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                    *x -= f * y;
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// All exponent tuples with total degree `<= degree`, any order.
pub fn exponents(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::new();
        for e in &out {
            let used: usize = e.iter().sum();
            for k in 0..=degree - used {
                let mut f = e.clone();
                f.push(k);
                next.push(f);
            }
        }
        out = next;
    }
    out
}

pub fn monomials(x: &[f64], exps: &[Vec<usize>]) -> Vec<f64> {
    exps.iter()
        .map(|e| e.iter().zip(x).map(|(&k, v)| v.powi(k as i32)).product())
        .collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean and variance from the bordered system solved by [`gauss_solve`].
pub fn saddle_predict(
    points: &[Vec<f64>],
    values: &[f64],
    kernel: &dyn Fn(f64) -> f64,
    degree: usize,
    x: &[f64],
) -> (f64, f64) {
    let n = points.len();
    let exps = exponents(x.len(), degree);
    let q = exps.len();
    let mut a = vec![vec![0.0; n + q]; n + q];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = kernel(dist(&points[i], &points[j]));
        }
        let p = monomials(&points[i], &exps);
        for k in 0..q {
            a[i][n + k] = p[k];
            a[n + k][i] = p[k];
        }
    }
    let mut rhs: Vec<f64> = points.iter().map(|p| kernel(dist(p, x))).collect();
    rhs.extend(monomials(x, &exps));
    let sol = gauss_solve(a, rhs.clone());
    let mean = (0..n).map(|i| sol[i] * values[i]).sum();
    let var = kernel(0.0) - sol.iter().zip(&rhs).map(|(s, r)| s * r).sum::<f64>();
    (mean, var)
}

pub fn matern32(r: f64, scale: f64, range: f64) -> f64 {
    let a = 3f64.sqrt() * r / range;
    scale * (1.0 + a) * (-a).exp()
}

pub fn matern52(r: f64, scale: f64, range: f64) -> f64 {
    let a = 5f64.sqrt() * r / range;
    scale * (1.0 + a + a * a / 3.0) * (-a).exp()
}

/// `t` with `P{N(0,1) <= t} = p`, by bisection on the upper tail.
pub fn quantile_by_bisection(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 1.0 - gaussian_tail(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Criterion computed by rebuilding a model for every `(candidate, z_j)` pair.
pub fn rebuild_criterion(model: &KrigingModel, candidates: &[Vec<f64>], u: f64, q: usize, candidate: &[f64]) -> f64 {
    let pred = model.predict(candidate);
    let sd = pred.variance.sqrt();
    let mut total = 0.0;
    let rebuilt: Vec<KrigingModel> = (1..=q)
        .map(|j| {
            let z = pred.mean + sd * quantile_by_bisection((j as f64 - 0.5) / q as f64);
            model.add_point(candidate, z).unwrap()
        })
        .collect();
    for y in candidates {
        let mut inner = 0.0;
        for m in &rebuilt {
            let p = m.predict(y);
            if p.variance > 0.0 {
                inner += gaussian_tail((u - p.mean).abs() / p.variance.sqrt()) / q as f64;
            }
        }
        total += inner.sqrt();
    }
    total / candidates.len() as f64
}

pub fn uniform_points<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect()
}
