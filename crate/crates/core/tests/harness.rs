use std::fs;
use std::path::Path;
use std::process::Command;

use exsur::harness::{
    cmd_compare, cmd_run, compare, disagreement, empirical_quantile, lattice_design, log_log_slope, ExperimentConfig,
    Strategy,
};
use exsur::{mc_volume, seed, Error};

const BASE: &str = r#"
[experiment]
scenario = "sur_run"
seeds = [1, 2]

[covariance]
family = "matern"
params = [1.0, 1.0, 2.5]

[distribution]
kind = "gaussian_diag"
mean = [0.0]
sd = [1.0]

[threshold]
quantile = 0.9

[sur]
q = 8
l = 120
n_init = 3
n_max = 6
"#;

fn config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!("{BASE}\n{extra}")).unwrap()
}

fn exsur(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_exsur")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn empty_seed_list_is_a_config_error() {
    let text = BASE.replace("seeds = [1, 2]", "seeds = []");
    let err = ExperimentConfig::from_toml(&text).unwrap().resolve().unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "experiment.seeds"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let o = exsur(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(
        stderr.starts_with("error[config]: ") && stderr.contains("experiment.seeds"),
        "{stderr}"
    );
    assert!(!out.exists());
}

#[test]
fn syntax_errors_report_the_line() {
    let err = ExperimentConfig::from_toml("[experiment]\nscenario = \"sur_run\"\nseeds = [1,\n").unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field.starts_with("line ")));
    let err = ExperimentConfig::from_toml(&BASE.replace("q = 8", "q = 8\nbogus = 1")).unwrap_err();
    assert!(err.to_string().contains("bogus"));
}

#[test]
fn invalid_parameters_fail_before_any_work() {
    let cases = [
        ("q = 8", "q = 1", "sur.q"),
        ("n_max = 6", "n_max = 2", "sur.n_max"),
        ("quantile = 0.9", "quantile = 1.5", "threshold"),
        ("quantile = 0.9", "", "threshold"),
        (
            "params = [1.0, 1.0, 2.5]",
            "params = [1.0, -1.0, 2.5]",
            "covariance.params",
        ),
        ("sd = [1.0]", "sd = [0.0]", "distribution"),
    ];
    for (from, to, field) in cases {
        let err = ExperimentConfig::from_toml(&BASE.replace(from, to))
            .unwrap()
            .resolve()
            .unwrap_err();
        match err {
            Error::Config { field: f, .. } => assert_eq!(f, field, "{to}"),
            other => panic!("{to}: {other}"),
        }
    }
    let cubic = BASE
        .replace("family = \"matern\"", "family = \"cubic\"")
        .replace("[1.0, 1.0, 2.5]", "[1.0]");
    let err = ExperimentConfig::from_toml(&cubic).unwrap().resolve().unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "basis.degree"));
}

#[test]
fn compare_needs_two_distinct_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let one = config("[compare]\nstrategies = [\"sur\"]");
    let err = cmd_compare(&one, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "compare.strategies"));
    let twice = config("[compare]\nstrategies = [\"sur\", \"sur\"]");
    assert!(twice.resolve().is_err());
}

#[test]
fn random_mc_curve_is_the_monte_carlo_estimator() {
    let cfg = config("[compare]\nstrategies = [\"random_mc\", \"lattice\"]\nbudget = 7");
    let r = cfg.resolve().unwrap();
    let report = compare(&r, &[Strategy::RandomMc, Strategy::Lattice], 7).unwrap();
    for &s in &[1u64, 2] {
        let mut extra = Vec::new();
        for n in 3..=7 {
            extra.extend(lattice_design(&r.distribution, n, 3.0).unwrap());
        }
        let mc_seed = seed::derive(s, "random_mc");
        extra.extend(r.distribution.sample_n(7, mc_seed));
        let world = r.world(s, &extra).unwrap();
        let (_, _, curve) = report
            .curves
            .iter()
            .find(|(st, sd, _)| *st == Strategy::RandomMc && *sd == s)
            .unwrap();
        for point in curve {
            let direct = mc_volume(|x| world.f(x), world.threshold, &r.distribution, point.n_evals, mc_seed).unwrap();
            assert_eq!(point.volume, direct.volume);
        }
    }
}

#[test]
fn comparison_over_twenty_seeds() {
    let cfg = ExperimentConfig::from_toml(
        &BASE
            .replace(
                "seeds = [1, 2]",
                &format!("seeds = {:?}", (1..=20).collect::<Vec<u64>>()),
            )
            .replace("l = 120", "l = 60"),
    )
    .unwrap();
    let cfg = ExperimentConfig {
        compare: config("[compare]\nstrategies = [\"sur\", \"lattice\"]").compare,
        ..cfg
    };
    let dir = tempfile::tempdir().unwrap();
    cmd_compare(&cfg, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let mut curves = std::collections::BTreeSet::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        curves.insert((cols[0].to_string(), cols[1].to_string()));
    }
    assert_eq!(curves.len(), 40);
    let wins = fs::read_to_string(dir.path().join("win_rates.csv")).unwrap();
    assert_eq!(wins.lines().next(), Some("strategy,versus,wins,seeds"));
    assert!(wins
        .lines()
        .any(|l| l.starts_with("sur,lattice,") && l.ends_with(",20")));
    for f in [
        "comparison.csv.schema",
        "win_rates.csv.schema",
        "summary.json",
        "manifest.toml",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn sur_run_writes_trajectories_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&config(""), dir.path()).unwrap();
    for s in [1, 2] {
        let t = fs::read_to_string(dir.path().join(format!("trajectory_seed{s}.csv"))).unwrap();
        let mut lines = t.lines();
        assert_eq!(lines.next(), Some("iteration,x_1,f,criterion_min,volume,std_error"));
        assert_eq!(lines.count(), 4);
    }
    let manifest = fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(manifest.starts_with("# timestamp = "));
    for key in [
        "seed_1.threshold",
        "seed_2.reference",
        "seed_1.truth_seed",
        "q = 8",
        "l = 120",
        "jitter",
    ] {
        assert!(manifest.contains(key), "{key}");
    }
    let body: String = manifest.lines().skip(1).map(|l| format!("{l}\n")).collect();
    assert!(body.parse::<toml::Table>().is_ok());
}

#[test]
fn snapshot_panels() {
    let cfg = ExperimentConfig::from_toml(
        &(BASE
            .replace("scenario = \"sur_run\"", "scenario = \"snapshot\"")
            .replace("seeds = [1, 2]", "seeds = [3]")
            .replace("q = 8", "q = 20")
            .replace("l = 120", "l = 800")
            .replace("n_max = 6", "n_max = 10")
            + "\n[simulation]\nplot_points = 200\n"),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&cfg, dir.path()).unwrap();
    let curves = fs::read_to_string(dir.path().join("snapshot_curves_seed3.csv")).unwrap();
    assert_eq!(
        curves.lines().next(),
        Some("x_1,f,mean,sd,excursion_probability,density")
    );
    assert_eq!(curves.lines().count(), 201);
    let profile = fs::read_to_string(dir.path().join("snapshot_profile_seed3.csv")).unwrap();
    assert_eq!(profile.lines().count(), 801);
    let design = fs::read_to_string(dir.path().join("snapshot_design_seed3.csv")).unwrap();
    assert_eq!(design.lines().count(), 11);
}

#[test]
fn convergence_table() {
    let text = r#"
[experiment]
scenario = "convergence"
seeds = [1]

[covariance]
family = "matern"
params = [1.0, 0.5, 2.5]

[distribution]
kind = "uniform_box"
lower = [0.0]
upper = [1.0]

[threshold]
value = 0.0

[convergence]
sizes = [5, 10, 20]
paths = 10
fine = 80
"#;
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&ExperimentConfig::from_toml(text).unwrap(), dir.path()).unwrap();
    let table = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("seed,n,fill_distance,sup_sd,mismatch,ratio"));
    let h: Vec<f64> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    // n intervals on [0, 1], probes on the fine grid
    for (got, want) in h.iter().zip([0.1, 0.05, 0.025]) {
        assert!((got - want).abs() < 1e-12, "{got}");
    }
    let bad = text.replace("sizes = [5, 10, 20]", "sizes = [3]");
    assert!(ExperimentConfig::from_toml(&bad).unwrap().resolve().is_err());
}

#[test]
fn sign_disagreement_on_a_segment() {
    assert_eq!(disagreement(1.0, 1.0, 2.0, 3.0), 0.0);
    assert_eq!(disagreement(1.0, 1.0, -1.0, -2.0), 1.0);
    // a crosses zero at 1/2, b stays positive
    assert!((disagreement(-1.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
    // crossings at 1/4 and 3/4
    assert!((disagreement(-1.0, 3.0, -3.0, 1.0) - 0.5).abs() < 1e-15);
}

#[test]
fn helpers() {
    assert_eq!(empirical_quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
    assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0], 1.0), 3.0);
    let x = [1.0, 2.0, 4.0, 8.0];
    let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(2.5)).collect();
    assert!((log_log_slope(&x, &y) - 2.5).abs() < 1e-12);
}

#[test]
fn simulate_and_estimate_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{BASE}\n[simulation]\nplot_points = 50\n"));
    let out = dir.path().join("sim");
    let o = exsur(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = fs::read_to_string(out.join("path_seed4.csv")).unwrap();
    assert_eq!(path.lines().count(), 51);

    let design = dir.path().join("design.csv");
    fs::write(&design, "x_1,f\n-1.0,0.2\n0.0,1.5\n1.0,-0.3\n").unwrap();
    let est = dir.path().join("est");
    let cfg = write_config(dir.path(), &BASE.replace("quantile = 0.9", "value = 0.5"));
    let o = exsur(&[
        "estimate",
        "--config",
        &cfg,
        "--design",
        design.to_str().unwrap(),
        "--out",
        est.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(est.join("estimate.csv").exists());
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap();
            cfg.resolve().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
