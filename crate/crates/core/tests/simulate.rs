mod common;

use common::*;
use exsur::seed;
use exsur::simulate::PathSampler;
use exsur::{
    sample_conditional_paths, sample_path, ConditionalSampler, DesignSet, GeneralizedCovariance, KrigingModel,
    MonomialBasis,
};

fn line(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect()
}

#[test]
fn matern_paths_have_the_right_variance_and_correlation() {
    let grid = line(500);
    let cov = GeneralizedCovariance::matern(2.0, 0.2, 1.5).unwrap();
    let sampler = PathSampler::new(&cov, &MonomialBasis::new(1, 0).unwrap(), &grid).unwrap();
    let paths: Vec<Vec<f64>> = (0..200)
        .map(|k| sampler.sample_values(seed::derive_indexed(1, "t", k)))
        .collect();
    let var: f64 = paths.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / (200.0 * 500.0);
    assert!((var / 2.0 - 1.0).abs() < 0.15, "pooled variance {var}");
    let lag = 50;
    let c: f64 = paths
        .iter()
        .map(|p| (0..500 - lag).map(|i| p[i] * p[i + lag]).sum::<f64>())
        .sum::<f64>()
        / (200.0 * (500 - lag) as f64);
    let expected = matern32(lag as f64 / 499.0, 2.0, 0.2);
    assert!((c - expected).abs() < 0.15 * 2.0, "lag covariance {c} vs {expected}");
}

#[test]
fn power_linear_increments_follow_the_variogram() {
    let grid = line(201);
    let cov = GeneralizedCovariance::power_linear(1.5).unwrap();
    let sampler = PathSampler::new(&cov, &MonomialBasis::new(1, 0).unwrap(), &grid).unwrap();
    let m = 400;
    let (i, j) = (20, 120); // |h| = 0.5
    let mut acc = 0.0;
    for k in 0..m {
        let p = sampler.sample_values(seed::derive_indexed(2, "t", k));
        acc += (p[i] - p[j]).powi(2);
    }
    // Var(Z(x) - Z(y)) = -2 k(h) = 2 * 1.5 * 0.5
    let est = acc / m as f64;
    assert!((est / 1.5 - 1.0).abs() < 0.2, "increment variance {est}");
}

#[test]
fn trend_is_filtered_by_intrinsic_kriging() {
    let grid = line(41);
    let cov = GeneralizedCovariance::cubic(1.0).unwrap();
    let basis = MonomialBasis::new(1, 1).unwrap();
    let plain = sample_path(&cov, &basis, &[0.0, 0.0], &grid, 3).unwrap();
    let shifted = sample_path(&cov, &basis, &[4.0, -7.0], &grid, 3).unwrap();
    let idx = [0, 8, 19, 27, 40];
    let build = |v: &[f64]| {
        let pts = idx.iter().map(|&i| grid[i].clone()).collect();
        let ys = idx.iter().map(|&i| v[i]).collect();
        KrigingModel::build(DesignSet::new(pts, ys).unwrap(), cov.clone(), basis.clone()).unwrap()
    };
    let a = build(&plain.values);
    let b = build(&shifted.values);
    for x in [0.13, 0.5, 0.81] {
        let trend = 4.0 - 7.0 * x;
        assert!((b.predict_mean(&[x]) - a.predict_mean(&[x]) - trend).abs() < 1e-8);
        assert!((b.predict(&[x]).variance - a.predict(&[x]).variance).abs() < 1e-12);
    }
}

#[test]
fn conditional_paths_match_kriging_moments() {
    let xs = [0.0, 0.3, 0.7, 1.0];
    let cov = GeneralizedCovariance::matern(1.0, 0.3, 2.5).unwrap();
    let design = DesignSet::new(xs.iter().map(|x| vec![*x]).collect(), vec![0.5, -1.0, 0.2, 1.0]).unwrap();
    let model = KrigingModel::build(design, cov, MonomialBasis::new(1, 0).unwrap()).unwrap();
    let probes = vec![vec![0.15], vec![0.5], vec![0.3], vec![0.85]];
    let m = 500;
    let paths = sample_conditional_paths(&model, &probes, m, 17).unwrap();
    for (g, x) in probes.iter().enumerate() {
        let p = model.predict(x);
        let vals: Vec<f64> = paths.iter().map(|s| s.values[g]).collect();
        let mean = vals.iter().sum::<f64>() / m as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        if p.variance < 1e-12 {
            assert!(
                vals.iter().all(|v| (v - p.mean).abs() < 1e-4),
                "path leaves the data at {x:?}"
            );
            continue;
        }
        assert!(
            (mean - p.mean).abs() < 4.0 * p.std_dev() / (m as f64).sqrt(),
            "mean at {x:?}"
        );
        assert!(
            (var / p.variance - 1.0).abs() < 0.25,
            "variance at {x:?}: {var} vs {}",
            p.variance
        );
    }
}

#[test]
fn conditional_draws_depend_only_on_the_seed() {
    let xs = [0.2, 0.6];
    let cov = GeneralizedCovariance::power_linear(1.0).unwrap();
    let design = DesignSet::new(xs.iter().map(|x| vec![*x]).collect(), vec![1.0, 2.0]).unwrap();
    let model = KrigingModel::build(design, cov, MonomialBasis::new(1, 0).unwrap()).unwrap();
    let sampler = ConditionalSampler::new(&model, &line(11)).unwrap();
    assert_eq!(sampler.draw(5), sampler.draw(5));
    assert_ne!(sampler.draw(5), sampler.draw(6));
    let many = sampler.draw_many(3, 9);
    assert_eq!(many, sampler.draw_many(3, 9));
}
