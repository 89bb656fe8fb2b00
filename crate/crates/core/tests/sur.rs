mod common;

use common::*;
use exsur::seed;
use exsur::sur::{argmin, criterion_oracle_mc, StopReason};
use exsur::{
    bin_probabilities, gaussian_tail, make_quantizer, quantize, run_sur, DesignSet, Error, GeneralizedCovariance,
    InputDistribution, KrigingModel, MonomialBasis, Prediction, Quantizer, SurConfig, SurState,
};
use proptest::prelude::*;

fn matern(range: f64) -> GeneralizedCovariance {
    GeneralizedCovariance::matern(1.0, range, 2.5).unwrap()
}

fn model_1d(xs: &[f64], f: impl Fn(f64) -> f64, cov: GeneralizedCovariance) -> KrigingModel {
    let pts = xs.iter().map(|x| vec![*x]).collect();
    let ys = xs.iter().map(|x| f(*x)).collect();
    KrigingModel::build(DesignSet::new(pts, ys).unwrap(), cov, MonomialBasis::new(1, 0).unwrap()).unwrap()
}

fn grid(l: usize) -> Vec<Vec<f64>> {
    (0..l).map(|i| vec![(i as f64 + 0.5) / l as f64]).collect()
}

#[test]
fn four_level_quantizer_of_a_standard_normal() {
    let q = make_quantizer(&Prediction::new(0.0, 1.0), 4).unwrap();
    for (j, level) in q.levels().iter().enumerate() {
        let expected = quantile_by_bisection((j as f64 + 0.5) / 4.0);
        assert!((level - expected).abs() < 1e-9, "level {j}: {level} vs {expected}");
    }
    let edges = [quantile_by_bisection(0.25), 0.0, quantile_by_bisection(0.75)];
    for (e, x) in q.edges().iter().zip(edges) {
        assert!((e - x).abs() < 1e-9);
    }
    // levels are the bin medians: +-0.31863936, +-1.15034938
    assert!((q.levels()[2] - 0.318_639_363_964_375).abs() < 1e-9);
    assert!((q.levels()[3] - 1.150_349_380_376_008).abs() < 1e-9);
}

#[test]
fn bin_masses_for_explicit_edges() {
    let q = Quantizer::new(vec![-2.0, 0.0, 2.0], vec![-1.0, 1.0]).unwrap();
    let p = bin_probabilities(&Prediction::new(0.0, 1.0), &q).unwrap();
    let t = gaussian_tail(1.0);
    assert!((p[0] - t).abs() < 1e-15);
    assert!((p[1] - (1.0 - 2.0 * t)).abs() < 1e-15);
    assert!((p[2] - t).abs() < 1e-15);
    assert!((t - 0.158_655_253_931_457).abs() < 1e-12);
}

#[test]
fn quantizer_rejects_one_level_and_zero_variance() {
    assert!(matches!(
        make_quantizer(&Prediction::new(0.0, 1.0), 1),
        Err(Error::InvalidParameter(_))
    ));
    assert!(matches!(
        make_quantizer(&Prediction::new(0.0, 0.0), 4),
        Err(Error::DegenerateVariance)
    ));
    assert!(Quantizer::new(vec![0.0, 1.0], vec![2.0]).is_err());
    assert!(Quantizer::new(vec![1.0, 0.0], vec![0.5]).is_err());
}

#[test]
fn criterion_matches_full_rebuild() {
    let mut rng = seed::rng(5);
    for (n, l, q) in [(3, 20, 4), (6, 50, 8), (9, 100, 5)] {
        let pts = uniform_points(&mut rng, n, 1);
        let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        let m = model_1d(&xs, |x| (6.0 * x).sin(), matern(0.3));
        let cands = uniform_points(&mut rng, l, 1);
        let state = SurState::new(m.clone(), cands.clone(), 0.3, q).unwrap();
        for k in [0, l / 2, l - 1] {
            let fast = state.criterion_at(k).unwrap();
            let slow = rebuild_criterion(&m, &cands, 0.3, q, &cands[k]);
            assert!(
                (fast - slow).abs() <= 1e-6 * slow.abs().max(1e-12),
                "n={n} k={k}: {fast} vs {slow}"
            );
        }
    }
}

#[test]
fn criterion_matches_full_rebuild_in_two_dimensions() {
    let mut rng = seed::rng(9);
    let pts = uniform_points(&mut rng, 6, 2);
    let ys: Vec<f64> = pts.iter().map(|p| p[0] - p[1]).collect();
    let m = KrigingModel::build(
        DesignSet::new(pts, ys).unwrap(),
        GeneralizedCovariance::cubic(1.0).unwrap(),
        MonomialBasis::new(2, 1).unwrap(),
    )
    .unwrap();
    let cands = uniform_points(&mut rng, 40, 2);
    let state = SurState::new(m.clone(), cands.clone(), 0.0, 6).unwrap();
    for k in [3, 17] {
        let fast = state.criterion_at(k).unwrap();
        let slow = rebuild_criterion(&m, &cands, 0.0, 6, &cands[k]);
        assert!((fast - slow).abs() <= 1e-6 * slow, "{fast} vs {slow}");
    }
}

#[test]
fn criterion_vanishes_far_above_threshold() {
    let m = model_1d(&[0.1, 0.5, 0.9], |_| 100.0, matern(0.3));
    let state = SurState::new(m, grid(50), 0.0, 8).unwrap();
    assert!(state.criterion(&[0.3]).unwrap() < 1e-300);
}

#[test]
fn observed_points_score_infinity() {
    let m = model_1d(&[0.1, 0.5, 0.9], |x| x, matern(0.3));
    let state = SurState::new(m, grid(10), 0.5, 4).unwrap();
    assert_eq!(state.criterion(&[0.5]).unwrap(), f64::INFINITY);
}

#[test]
fn design_points_among_candidates_are_never_selected() {
    let m = model_1d(&[0.05, 0.45, 0.95], |x| x - 0.5, matern(0.3));
    let state = SurState::new(m, grid(10), 0.0, 4).unwrap();
    assert!(state.is_excluded(0) && state.is_excluded(4) && state.is_excluded(9));
    let sel = state.select_next().unwrap();
    assert!(![0, 4, 9].contains(&sel.index));
    assert_eq!(sel.criterion, sel.profile[sel.index]);
    assert_eq!(argmin(&sel.profile), Some(sel.index));
}

#[test]
fn exhausted_candidates() {
    let m = model_1d(&[0.25, 0.75], |x| x, matern(0.3));
    let state = SurState::new(m, vec![vec![0.25], vec![0.75]], 0.5, 4).unwrap();
    assert!(matches!(state.select_next(), Err(Error::ExhaustedCandidates)));
}

#[test]
fn selection_is_translation_invariant() {
    let xs = [0.1, 0.35, 0.8];
    let f = |x: f64| (5.0 * x).cos();
    let base = SurState::new(model_1d(&xs, f, matern(0.4)), grid(40), 0.2, 6).unwrap();
    let shifted_xs: Vec<f64> = xs.iter().map(|x| x + 3.0).collect();
    let shifted_grid: Vec<Vec<f64>> = grid(40).iter().map(|p| vec![p[0] + 3.0]).collect();
    let moved = SurState::new(model_1d(&shifted_xs, |x| f(x - 3.0), matern(0.4)), shifted_grid, 0.2, 6).unwrap();
    let a = base.select_next().unwrap();
    let b = moved.select_next().unwrap();
    assert_eq!(a.index, b.index);
    assert!((a.criterion - b.criterion).abs() < 1e-8 * a.criterion);
}

fn config(seed: u64, n_max: usize) -> SurConfig {
    SurConfig {
        threshold: 0.5,
        quantizer_size: 10,
        candidates: 200,
        n_max,
        seed,
        covariance: matern(0.5),
        basis: MonomialBasis::new(1, 0).unwrap(),
        distribution: InputDistribution::standard_normal(1),
        criterion_tol: None,
    }
}

fn start(f: &dyn Fn(f64) -> f64) -> DesignSet {
    let xs = [-1.0, 0.0, 1.0];
    DesignSet::new(
        xs.iter().map(|x| vec![*x]).collect(),
        xs.iter().map(|x| f(*x)).collect(),
    )
    .unwrap()
}

#[test]
fn budget_equal_to_initial_size_makes_no_evaluations() {
    let f = |x: f64| x;
    let run = run_sur(|x| f(x[0]), start(&f), &config(1, 3)).unwrap();
    assert!(run.steps.is_empty());
    assert_eq!(run.stop, StopReason::Budget);
}

#[test]
fn constant_above_threshold_gives_full_volume() {
    let f = |_: f64| 2.0;
    let run = run_sur(|x| f(x[0]), start(&f), &config(2, 6)).unwrap();
    assert_eq!(run.steps.len(), 3);
    assert_eq!(run.final_estimate().volume, 1.0);
}

#[test]
fn tolerance_stops_before_spending_the_budget() {
    let f = |_: f64| 50.0;
    let mut cfg = config(3, 10);
    cfg.criterion_tol = Some(1e-6);
    let run = run_sur(|x| f(x[0]), start(&f), &cfg).unwrap();
    assert_eq!(run.stop, StopReason::CriterionTolerance);
    assert!(run.steps.is_empty());
}

#[test]
fn error_shrinks_along_a_seeded_run() {
    let f = |x: f64| (2.0 * x).sin() + 0.5 * x;
    let cfg = config(4, 15);
    let truth = exsur::mc_volume(
        |x| f(x[0]),
        0.5,
        &cfg.distribution,
        cfg.candidates,
        seed::derive(4, "candidates"),
    )
    .unwrap()
    .volume;
    let run = run_sur(|x| f(x[0]), start(&f), &cfg).unwrap();
    assert_eq!(run.steps.len(), 12);
    let errs: Vec<f64> = [5, 7, 9, 11, 13, 15]
        .iter()
        .map(|&n| {
            let s = run.steps.iter().find(|s| s.design_size == n).unwrap();
            (s.estimate.volume - truth).abs()
        })
        .collect();
    let drops = errs.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(drops >= 4, "{errs:?}");
    assert!(errs[5] <= errs[0]);
}

#[test]
fn seeded_runs_are_reproducible() {
    let f = |x: f64| x * x;
    let a = run_sur(|x| f(x[0]), start(&f), &config(7, 8)).unwrap();
    let b = run_sur(|x| f(x[0]), start(&f), &config(7, 8)).unwrap();
    let pa: Vec<_> = a.steps.iter().map(|s| s.point.clone()).collect();
    let pb: Vec<_> = b.steps.iter().map(|s| s.point.clone()).collect();
    assert_eq!(pa, pb);
    let mut ta = Vec::new();
    let mut tb = Vec::new();
    a.write_trajectory_csv(&mut ta).unwrap();
    b.write_trajectory_csv(&mut tb).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn oracle_with_one_copy_is_finite() {
    let m = model_1d(&[0.1, 0.5, 0.9], |x| (4.0 * x).sin(), matern(0.3));
    let state = SurState::new(m, grid(30), 0.5, 4).unwrap();
    let v = criterion_oracle_mc(&state, &[0.3], 1, 1).unwrap();
    assert!(v.is_finite() && v >= 0.0);
    let at_data = criterion_oracle_mc(&state, &[0.5], 50, 1).unwrap();
    let best = state.select_next().unwrap();
    let at_best = criterion_oracle_mc(&state, &best.point, 50, 1).unwrap();
    assert!(at_data >= at_best);
}

proptest! {
    #[test]
    fn quantize_is_idempotent_and_monotone(
        mean in -5.0f64..5.0,
        var in 0.01f64..10.0,
        q in 2usize..30,
        a in -20.0f64..20.0,
        b in -20.0f64..20.0,
    ) {
        let quant = make_quantizer(&Prediction::new(mean, var), q).unwrap();
        let qa = quantize(&quant, a);
        prop_assert_eq!(quantize(&quant, qa), qa);
        prop_assert!(quant.levels().contains(&qa));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(&quant, lo) <= quantize(&quant, hi));
    }

    #[test]
    fn bin_masses_sum_to_one(mean in -5.0f64..5.0, var in 0.01f64..10.0, q in 2usize..40) {
        let pred = Prediction::new(mean, var);
        let quant = make_quantizer(&pred, q).unwrap();
        let p = bin_probabilities(&pred, &quant).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for v in &p {
            prop_assert!((v - 1.0 / q as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn criterion_is_finite_and_bounded(
        raw in prop::collection::vec(0.0f64..1.0, 4),
        u in -1.0f64..1.0,
        c in 0.0f64..1.0,
    ) {
        let mut xs = raw;
        xs.sort_by(f64::total_cmp);
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-2);
        prop_assume!(xs.len() >= 2 && xs.iter().all(|x| (x - c).abs() > 1e-3));
        let state = SurState::new(model_1d(&xs, |x| x - 0.5, matern(0.3)), grid(20), u, 6).unwrap();
        let v = state.criterion(&[c]).unwrap();
        // each sqrt(Psi) term is at most sqrt(1/2)
        prop_assert!(v.is_finite() && v >= 0.0 && v <= 0.5f64.sqrt() + 1e-12);
    }
}
