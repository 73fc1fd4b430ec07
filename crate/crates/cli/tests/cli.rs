use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use uvtok_cli::compare::{compare_uncertainty, CompareEntry};
use uvtok_cli::config::{apply_overrides, RawConfig, RunConfig, OUT_DIR_ENV};
use uvtok_cli::pipeline::{run_loaded, ImageEntry, Model, PipelineReport};
use uvtok_cli::validate::{run_validation, InjectedFault};
use uvtok_core::netpbm::encode_image;
use uvtok_core::synth::synthetic_image;
use uvtok_core::{Result, Tensor};

fn config(overrides: &[&str]) -> RunConfig {
    let mut raw = RawConfig::new();
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    apply_overrides(&mut raw, &o).unwrap();
    RunConfig::resolve(&raw).unwrap()
}

fn synthetic(model: &Model, n: usize) -> (Vec<PathBuf>, Vec<Result<Tensor>>) {
    let paths = (0..n).map(|i| PathBuf::from(format!("synthetic-{i}"))).collect();
    let images = (0..n).map(|i| synthetic_image(&model.config, i as u64)).collect();
    (paths, images)
}

fn run(rc: &RunConfig, n: usize, out: &Path) -> PipelineReport {
    let model = Model::load(rc).unwrap();
    let (paths, images) = synthetic(&model, n);
    run_loaded(rc, &model, &paths, images, out, None).unwrap()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uvtok"));
    c.env_remove(OUT_DIR_ENV);
    c
}

#[test]
fn pipeline_reports_are_byte_identical() {
    let rc = config(&["attack.iterations=8", "attack.consistency_seeds=1,2"]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(&rc, 3, a.path()).to_json();
    let second = run(&rc, 3, b.path()).to_json();
    assert_eq!(first, second);
    let mask = |d: &Path| std::fs::read(d.join("images/001_synthetic-1/mask.json")).unwrap();
    assert_eq!(mask(a.path()), mask(b.path()));
}

#[test]
fn parallel_degree_does_not_change_results() {
    let serial = config(&["attack.iterations=8", "run.parallelism=1"]);
    let parallel = config(&["attack.iterations=8", "run.parallelism=4"]);
    let dir = tempfile::tempdir().unwrap();
    let a = run(&serial, 6, &dir.path().join("a"));
    let b = run(&parallel, 6, &dir.path().join("b"));
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn unreadable_image_becomes_an_error_entry() {
    let rc = config(&["attack.iterations=4"]);
    let model = Model::load(&rc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for i in 0..2 {
        let p = dir.path().join(format!("img{i}.ppm"));
        std::fs::write(&p, encode_image(&synthetic_image(&model.config, i).unwrap()).unwrap()).unwrap();
        paths.push(p);
    }
    let bad = dir.path().join("broken.ppm");
    std::fs::write(&bad, b"P6\n32 32\n255\nshort").unwrap();
    paths.insert(1, bad);

    let out = bin()
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .arg("--set")
        .arg("attack.iterations=4")
        .arg("pipeline")
        .args(&paths)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/report.json")).unwrap()).unwrap();
    let status: Vec<&str> =
        report["images"].as_array().unwrap().iter().map(|e| e["status"].as_str().unwrap()).collect();
    assert_eq!(status, ["ok", "error", "ok"]);
    assert_eq!(report["aggregate"]["images_failed"], 1);
}

#[test]
fn all_images_failing_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        bin().arg("--out-dir").arg(dir.path()).arg("pipeline").arg(dir.path().join("missing.ppm")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_budget_or_zero_iterations_leave_the_encoding_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    for o in [["attack.k=0", "attack.iterations=5"], ["attack.k=3", "attack.iterations=0"]] {
        let report = run(&config(&o), 2, dir.path());
        for e in &report.images {
            let ImageEntry::Ok(r) = e else { panic!("{e:?}") };
            assert_eq!(r.objective.final_value, 0.0);
            assert_eq!(r.objective.linf, 0.0);
            assert!(r.uncertainty.degenerate);
        }
    }
}

#[test]
fn config_echo_reruns_to_the_same_report() {
    let rc = config(&["attack.iterations=6", "mask.sigma_th=0.9", "run.seed=11"]);
    let dir = tempfile::tempdir().unwrap();
    let first = run(&rc, 2, &dir.path().join("a"));
    let echoed = RunConfig::from_text(&first.config).unwrap();
    let second = run(&echoed, 2, &dir.path().join("b"));
    assert_eq!(first.to_json(), second.to_json());
    let golden = "\
encoder.image_size = 32
encoder.patch_size = 8
encoder.channels = 3
encoder.num_layers = 4
encoder.hidden_dim = 32
encoder.num_heads = 4
encoder.mlp_ratio = 4
encoder.include_cls = true
model.checkpoint =
model.seed = 0
attack.k = 3
attack.alpha = 1
attack.iterations = 6
attack.init_noise_seed = none
attack.consistency_seeds = none
mask.source_layers = 1-2
mask.sigma_th = 0.9
mask.layers = 3-3
mask.attenuation = 0
mc.p = 0.5
mc.samples = 500
mc.seed = 0
run.seed = 11
";
    assert_eq!(first.config, golden);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin().arg("--out-dir").arg(dir.path()).args(args).output().unwrap().status.code();
    assert_eq!(code(&["--set", "attack.kk=1", "pipeline", "--synthetic", "1"]), Some(2));
    assert_eq!(code(&["--set", "mc.p=1.5", "validate"]), Some(2));
    assert_eq!(code(&["stats", "spearman", "--input", "/nonexistent.json"]), Some(2));
    assert_eq!(code(&["pipeline"]), Some(2));
    assert_eq!(code(&["--set", "attack.iterations=2", "pipeline", "--synthetic", "1"]), Some(0));
}

#[test]
fn out_dir_env_var_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.json");
    std::fs::write(&input, r#"{"statistic":[1,2,3,4],"metrics":[[1],[2],[3],[4]],"n_bins":2}"#).unwrap();
    let out = bin()
        .env(OUT_DIR_ENV, dir.path().join("env-out"))
        .args(["--set", "attack.iterations=2", "pipeline", "--synthetic", "1", "--no-timestamp"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("env-out/report.json").exists());
    let csv = dir.path().join("bins.csv");
    let out = bin().args(["stats", "binned", "--input"]).arg(&input).arg("--csv").arg(&csv).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(std::fs::read_to_string(csv).unwrap().starts_with("bin,"));
}

#[test]
fn injected_softmax_fault_fails_validation() {
    let model = Model::load(&RunConfig::default()).unwrap();
    let clean = run_validation(&model, None);
    assert!(clean.passed, "{:?}", clean.properties);
    let broken = run_validation(&model, Some(InjectedFault::SoftmaxSignFlip));
    assert!(!broken.passed);
    let grad = broken.properties.iter().find(|p| p.name == "gradient_check").unwrap();
    assert!(!grad.passed);
    assert!(broken.properties.iter().filter(|p| p.name != "gradient_check").all(|p| p.passed));
}

#[test]
fn zero_dropout_makes_correlation_undefined() {
    let rc = config(&["attack.iterations=4", "mc.p=0", "mc.samples=4"]);
    let model = Model::load(&rc).unwrap();
    let (paths, images) = synthetic(&model, 2);
    let report = compare_uncertainty(&rc, &model, &paths, images, false).unwrap();
    assert!(report.entries.iter().all(|e| matches!(e, CompareEntry::CorrelationUndefined { .. })));
    assert_eq!(report.median_rho, None);
}

#[test]
fn self_comparison_has_unit_correlation() {
    let rc = config(&["attack.iterations=10", "mc.samples=2"]);
    let model = Model::load(&rc).unwrap();
    let (paths, images) = synthetic(&model, 2);
    let report = compare_uncertainty(&rc, &model, &paths, images, true).unwrap();
    assert_eq!(report.median_rho, Some(1.0));
}

#[test]
fn init_model_is_byte_identical_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.uvet"), dir.path().join("b.uvet"));
    for p in [&a, &b] {
        let out = bin().args(["init-model", "--model-seed", "4", "--out"]).arg(p).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        assert!(String::from_utf8_lossy(&out.stdout).contains("parameters"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let rc = config(&["attack.iterations=3", &format!("model.checkpoint={}", a.display())]);
    let from_ckpt = run(&rc, 1, &dir.path().join("x")).to_json();
    let from_seed = run(&config(&["attack.iterations=3", "model.seed=4"]), 1, &dir.path().join("y")).to_json();
    let strip = |s: &str| s.lines().filter(|l| !l.contains("model.")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&from_ckpt), strip(&from_seed));
}

#[test]
fn spectrum_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("--out-dir")
        .arg(dir.path())
        .args(["spectrum", "--budgets", "2", "--layers", "4", "--samples", "40"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&std::fs::read(dir.path().join("spectrum.json")).unwrap()).unwrap();
    assert_eq!(summary["sites"].as_array().unwrap().len(), 17);
    assert!(summary["min_entropy_gap"].as_f64().unwrap() >= -1e-9);
    let csv = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 17 * 32);
}
