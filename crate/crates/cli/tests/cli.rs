use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vstree::bandit::ExplorationEnv;
use vstree::data::{load_table, synth};
use vstree::model_file::load_model;
use vstree::ood::far_ood_fixture;
use vstree::predictive::{regression_metrics, Model, Units};
use vstree::soft_tree::predict_mean;
use vstree::{FlatParams, SynthKind};

fn vstree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vstree")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vstree(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn key(report: &str, name: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name}=")))
        .unwrap_or_else(|| panic!("{name} missing from {report}"))
        .parse()
        .unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, kind: &str, n: usize, seed: u64) -> PathBuf {
        let path = self.path(&format!("{kind}-{n}-{seed}.csv"));
        ok(&["synth", "--kind", kind, "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&path)]);
        path
    }

    fn train(&self, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let log = self.path(&format!("{name}.log"));
        let mut args = vec!["train", "--data", p(data), "--out", p(&out), "--log", p(&log), "--steps", "200", "--lr", "1e-2"];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn train_selects_model_kind_and_writes_log() {
    let f = Fixture::new();
    let data = f.synth("linear", 60, 0);
    let one = f.train(&data, "one.json", &["--depth", "2", "--log-every", "50"]);
    let two = f.train(&data, "two.json", &["--depth", "2", "--trees", "2"]);
    assert!(fs::read_to_string(&one).unwrap().contains("\"model_kind\": \"vst\""));
    assert!(fs::read_to_string(&two).unwrap().contains("\"model_kind\": \"vsgbm\""));
    let log = fs::read_to_string(f.path("one.json.log")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("tree,step,elbo,data_fit,kl"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn usage_data_and_numeric_exit_codes() {
    let f = Fixture::new();
    let data = f.synth("linear", 40, 0);
    let out = f.path("m.json");
    let code = |args: &[&str]| vstree(args).status.code();
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&out), "--depth", "0"]), Some(2));
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&out), "--rank", "500", "--depth", "1"]), Some(2));
    assert_eq!(code(&["train", "--data", p(&f.path("missing.csv")), "--out", p(&out)]), Some(3));
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&out), "--target", "nope"]), Some(3));
    assert_eq!(
        code(&["train", "--data", p(&data), "--out", p(&out), "--lr", "1e300", "--steps", "20", "--log", p(&f.path("l"))]),
        Some(4)
    );
    assert_eq!(code(&["bandit", "--env", "casino"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let f = Fixture::new();
    let data = f.synth("friedman", 80, 3);
    for extra in [&["--depth", "2"][..], &["--depth", "2", "--trees", "3"][..]] {
        let a = fs::read(f.train(&data, "a.json", extra)).unwrap();
        let b = fs::read(f.train(&data, "b.json", extra)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn eval_matches_library_metrics() {
    let f = Fixture::new();
    let data = f.synth("tail_line", 80, 1);
    let model_path = f.train(&data, "m.json", &["--depth", "2"]);
    let std_report = ok(&["eval", "--model", p(&model_path), "--data", p(&data), "--samples", "32", "--seed", "4"]);
    let orig_report =
        ok(&["eval", "--model", p(&model_path), "--data", p(&data), "--samples", "32", "--seed", "4", "--original-units"]);
    for name in ["mean_loglik", "rmse", "mean_epistemic_std"] {
        assert!(key(&std_report, name).is_finite());
    }
    let Model::Vst(model) = load_model(&model_path).unwrap().to_model().unwrap() else { panic!("expected vst") };
    let table = load_table(&data, "y", &[]).unwrap();
    let lib = regression_metrics(&model, &table, 32, 4, Units::Standardized).unwrap();
    assert_eq!(key(&std_report, "rmse"), lib.rmse);
    assert_eq!(key(&std_report, "mean_loglik"), lib.mean_loglik);
    let ratio = key(&orig_report, "rmse") / key(&std_report, "rmse");
    assert!((ratio - model.standardization.target_std).abs() <= 1e-12 * ratio);

    let rows = f.path("rows.csv");
    ok(&["eval", "--model", p(&model_path), "--data", p(&data), "--samples", "8", "--rows", p(&rows)]);
    assert_eq!(fs::read_to_string(&rows).unwrap().lines().count(), 81);
}

#[test]
fn eval_names_dimension_mismatch() {
    let f = Fixture::new();
    let model_path = f.train(&f.synth("linear", 40, 0), "m.json", &["--depth", "1"]);
    let out = vstree(&["eval", "--model", p(&model_path), "--data", p(&f.synth("friedman", 20, 0))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("5 features") && err.contains("expects 1"), "{err}");
}

#[test]
fn unknown_format_version_is_rejected() {
    let f = Fixture::new();
    let data = f.synth("linear", 40, 0);
    let model_path = f.train(&data, "m.json", &["--depth", "1"]);
    let text = fs::read_to_string(&model_path).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
    fs::write(&model_path, text).unwrap();
    let out = vstree(&["eval", "--model", p(&model_path), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));
}

#[test]
fn ood_same_data_is_chance_and_dump_has_all_rows() {
    let f = Fixture::new();
    let data = f.synth("tail_line", 150, 2);
    let model_path = f.train(&data, "m.json", &["--depth", "2"]);
    let scores = f.path("scores.csv");
    let report = ok(&[
        "ood", "--model", p(&model_path), "--id", p(&data), "--ood", p(&data), "--samples", "16", "--scores", p(&scores),
    ]);
    assert_eq!(key(&report, "auroc"), 0.5);
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), 1 + 150 + 150);
}

#[test]
fn ood_far_fixture_separates() {
    let f = Fixture::new();
    let (train, _) = far_ood_fixture(500, 4, 5.0, 0).unwrap();
    let (id, ood) = far_ood_fixture(200, 4, 5.0, 1000).unwrap();
    let paths: Vec<PathBuf> = [("train", &train), ("id", &id), ("ood", &ood)]
        .iter()
        .map(|(name, d)| {
            let path = f.path(&format!("{name}.csv"));
            d.save_csv(&path).unwrap();
            path
        })
        .collect();
    let model_path = f.path("m.json");
    ok(&[
        "train", "--data", p(&paths[0]), "--out", p(&model_path), "--log", p(&f.path("log")), "--lr", "1e-2", "--steps", "2000",
    ]);
    let report = ok(&["ood", "--model", p(&model_path), "--id", p(&paths[1]), "--ood", p(&paths[2])]);
    assert!(key(&report, "auroc") >= 0.95, "{report}");
}

#[test]
fn random_bandit_matches_quadrature() {
    let env = ExplorationEnv::default();
    let n = 20_000;
    let h = 2.0 / n as f64;
    let gap = |x: f64| {
        let r: Vec<f64> = (0..env.num_arms()).map(|a| env.mean_reward(x, a)).collect();
        r.iter().copied().fold(f64::NEG_INFINITY, f64::max) - r.iter().sum::<f64>() / r.len() as f64
    };
    // midpoint rule over U[-1, 1]
    let per_step: f64 = (0..n).map(|i| gap(-1.0 + (i as f64 + 0.5) * h)).sum::<f64>() / n as f64;
    let horizon = 20_000;
    let out = ok(&["bandit", "--agent", "random", "--horizon", &horizon.to_string(), "--seed", "3", "--trace", "/dev/null"]);
    let regret = key(&out, "final_cumulative_regret");
    let expected = per_step * horizon as f64;
    assert!((regret - expected).abs() <= 0.1 * expected, "{regret} vs {expected}");
}

#[test]
fn bandit_traces_are_deterministic_and_sized() {
    let f = Fixture::new();
    let (a, b, one) = (f.path("a.csv"), f.path("b.csv"), f.path("one.csv"));
    let args = |path: &Path| {
        vec!["bandit", "--horizon", "150", "--seed", "9", "--steps", "50", "--warm-steps", "10", "--trace"]
            .into_iter()
            .map(String::from)
            .chain([p(path).to_string()])
            .collect::<Vec<_>>()
    };
    let run = |path: &Path| {
        let a = args(path);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    };
    run(&a);
    run(&b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    ok(&["bandit", "--horizon", "1", "--trace", p(&one)]);
    let text = fs::read_to_string(&one).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("step,arm,reward,regret,cumulative_regret"));

    let replay = f.path("replay.csv");
    fs::write(&replay, "c0,reward_a,reward_b\n0.1,1,0\n0.9,0,1\n0.5,0.5,0.2\n").unwrap();
    let out = ok(&["bandit", "--env", "replay", "--replay", p(&replay), "--agent", "oracle", "--horizon", "6", "--trace", "/dev/null"]);
    assert_eq!(key(&out, "final_cumulative_regret"), 0.0);
    ok(&["bandit", "--env", "portfolio", "--agent", "random", "--horizon", "20", "--trace", "/dev/null"]);
}

#[test]
fn sample_shape_and_feature_requirement() {
    let f = Fixture::new();
    let model_path = f.train(&f.synth("linear", 40, 0), "m.json", &["--depth", "2"]);
    let table = ok(&["sample", "--model", p(&model_path), "--samples", "4", "--grid-points", "7", "--grid-min", "-2"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0], "x,f0,f1,f2,f3");
    assert!(lines.iter().all(|l| l.split(',').count() == 5));

    let multi = f.train(&f.synth("friedman", 40, 0), "multi.json", &["--depth", "1"]);
    assert_eq!(vstree(&["sample", "--model", p(&multi)]).status.code(), Some(2));
    let table = ok(&["sample", "--model", p(&multi), "--feature", "3", "--samples", "2", "--grid-points", "5"]);
    assert_eq!(table.lines().count(), 6);
}

#[test]
fn point_mass_sample_equals_prediction() {
    let f = Fixture::new();
    let model_path = f.train(&f.synth("linear", 40, 0), "m.json", &["--depth", "2", "--rank", "0"]);
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&model_path).unwrap()).unwrap();
    for v in doc["trees"][0]["posterior"]["diag_raw"].as_array_mut().unwrap() {
        *v = serde_json::json!(-800.0);
    }
    fs::write(&model_path, serde_json::to_string(&doc).unwrap()).unwrap();
    let Model::Vst(model) = load_model(&model_path).unwrap().to_model().unwrap() else { panic!() };
    let table = ok(&["sample", "--model", p(&model_path), "--samples", "1", "--grid-points", "9"]);
    let params = FlatParams(model.posterior.mean().to_vec());
    for line in table.lines().skip(1) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let z = model.standardization.features(&[cells[0]]);
        let expected = model.standardization.inverse_target(predict_mean(&model.spec, &params, &z).unwrap());
        assert_eq!(cells[1], expected);
    }
}

#[test]
fn sampled_functions_spread_in_the_tails() {
    let f = Fixture::new();
    let data = synth(SynthKind::TailLine, 200, 0.1, 0).unwrap();
    let path = f.path("tail.csv");
    data.save_csv(&path).unwrap();
    let model_path = f.path("m.json");
    ok(&["train", "--data", p(&path), "--out", p(&model_path), "--log", p(&f.path("log")), "--lr", "1e-2", "--steps", "3000"]);
    let table = ok(&[
        "sample", "--model", p(&model_path), "--samples", "256", "--grid-min", "-2", "--grid-max", "2", "--grid-points", "41",
    ]);
    let mut inside = Vec::new();
    let mut tails = Vec::new();
    for line in table.lines().skip(1) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let vals = &cells[1..];
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
        if cells[0].abs() <= 1.0 + 1e-12 {
            inside.push(var);
        } else if (cells[0].abs() - 2.0).abs() < 1e-12 {
            tails.push(var);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(tails.len(), 2);
    assert!(mean(&tails) >= 3.0 * mean(&inside), "{} vs {}", mean(&tails), mean(&inside));
}
