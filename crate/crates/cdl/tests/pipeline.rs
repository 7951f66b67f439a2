use std::fs;
use std::path::Path;
use std::process::Command;

use cdl::config::RunConfig;
use cdl::formats::{read_manifest, read_trace, read_transform, write_trace, write_transform};
use cdl::pipeline::*;
use cdl::volume_io::{save_mask, save_volume};
use cdl_core::registration::{RegistrationTrace, TraceRow};
use cdl_core::synthetic::{make_pair, DriftSpec, PairSeeds, PhantomSpec};
use cdl_core::transform::{AffineParams, TransformMode};
use cdl_core::volume::Dims;

fn config(out: &Path, kv: &[(&str, &str)]) -> RunConfig {
    let mut pairs = vec![
        ("out".to_string(), out.display().to_string()),
        ("grid_size".into(), "20".into()),
        ("spacing_mm".into(), "6".into()),
        ("n_train_pairs".into(), "2".into()),
        ("n_test_pairs".into(), "2".into()),
        ("train_samples".into(), "1000".into()),
        ("train_iters".into(), "40".into()),
        ("beta".into(), "0.01".into()),
        ("samples".into(), "1500".into()),
        ("max_iters".into(), "15".into()),
    ];
    pairs.extend(kv.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::from_pairs(pairs).unwrap()
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cdl")).args(args).output().unwrap()
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn zero_pairs_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("n_train_pairs", "0"), ("n_test_pairs", "0")]);
    let out = cmd_synth(&cfg).unwrap();
    assert!(out.entries.is_empty());
    assert!(read_manifest(&out.manifest).unwrap().is_empty());
    assert!(dir.path().join("synth.config").exists());
    let e = cmd_train(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn synth_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_synth(&config(a.path(), &[])).unwrap();
    cmd_synth(&config(b.path(), &[])).unwrap();
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.len(), fb.len());
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na != "synth.config" {
            assert_eq!(da, db, "{na}");
        }
    }
}

#[test]
fn mr_ct_preset_writes_five_quadruples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("drift", "mr-ct"), ("n_train_pairs", "0"), ("n_test_pairs", "5")]);
    let out = cmd_synth(&cfg).unwrap();
    assert_eq!(out.entries.len(), 5);
    for e in &out.entries {
        assert_eq!(e.drift, "mr-ct");
        for f in [&e.target, &e.source, &e.target_mask, &e.truth] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
    }
    let pairs = fs::read_dir(dir.path().join("pairs")).unwrap().count();
    assert_eq!(pairs, 5 * 5);
}

#[test]
fn one_training_iteration_gives_one_history_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let common = ["--out", out, "--set", "grid_size=20", "--set", "spacing_mm=6", "--set", "train_samples=500"];
    let s = cli(&[&["synth", "--n-train", "1", "--n-test", "0"][..], &common].concat());
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    let t = cli(&[&["train", "--iters", "1"][..], &common].concat());
    assert_eq!(t.status.code(), Some(EXIT_ITERATION_CAPPED), "{}", String::from_utf8_lossy(&t.stderr));
    let hist = fs::read_to_string(dir.path().join("train_history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 2);
    assert!(hist.starts_with("k,cost\n1,"));
    assert!(dir.path().join("train.config").exists());
}

#[test]
fn training_is_deterministic_and_improves_the_cost() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut results = Vec::new();
    for d in [&a, &b] {
        let cfg = config(d.path(), &[("beta", "10"), ("train_iters", "100")]);
        cmd_synth(&cfg).unwrap();
        results.push(cmd_train(&cfg).unwrap());
    }
    let last = *results[0].history.last().unwrap();
    assert!(last > results[0].initial_cost, "{} -> {last}", results[0].initial_cost);
    assert_eq!(fs::read(a.path().join("model.json")).unwrap(), fs::read(b.path().join("model.json")).unwrap());
    assert_eq!(fs::read(&results[0].history_path).unwrap(), fs::read(&results[1].history_path).unwrap());
}

#[test]
fn zero_iterations_emit_the_identity_and_traces_share_a_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("n_test_pairs", "1"), ("max_iters", "0"), ("methods", "cdl,mi")]);
    cmd_synth(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    let out = cmd_register(&cfg).unwrap();
    assert_eq!(out.results.len(), 2);
    let center = out.results[0].registration.params.center;
    for r in &out.results {
        let (mu, mode) = read_transform(&r.xform).unwrap();
        assert_eq!(mu, AffineParams::identity(center));
        assert_eq!(mode, TransformMode::Affine);
    }
    let header = |p: &Path| fs::read_to_string(p).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header(&out.results[0].trace), header(&out.results[1].trace));
    assert_eq!(read_trace(&out.results[0].trace).unwrap().rows.len(), 1);
}

#[test]
fn translated_pair_is_recovered_in_single_pair_mode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = PhantomSpec::head(Dims::cube(32).unwrap(), [4.0; 3], 3);
    let center = spec.grid().center_mm();
    let mut truth = AffineParams::identity(center);
    truth.mu[3..6].copy_from_slice(&[6.0, -4.0, 3.0]);
    let pair = make_pair(&spec, &DriftSpec::t1_to_t2(), &truth, PairSeeds { phantom: 3, drift: 4 }).unwrap();
    save_volume(&d.join("t.cdlv"), &pair.target).unwrap();
    save_volume(&d.join("s.cdlv"), &pair.source).unwrap();
    save_mask(&d.join("t.cdlm"), &pair.target_mask, [4.0; 3]).unwrap();
    write_transform(&d.join("truth.xform"), &truth, TransformMode::Rigid).unwrap();
    let p = |f: &str| d.join(f).display().to_string();
    let o = cli(&[
        "register", "--out", &p("reg"), "--target", &p("t.cdlv"), "--source", &p("s.cdlv"), "--methods", "mi",
        "--truth", &p("truth.xform"), "--target-mask", &p("t.cdlm"), "--mode", "rigid", "--max-iters", "200",
        "--set", "step_unit_mm=10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta = fs::read_to_string(d.join("reg/mi.meta.txt")).unwrap();
    let value = |key: &str| -> f64 {
        meta.lines().find_map(|l| l.strip_prefix(&format!("{key} = "))).unwrap().parse().unwrap()
    };
    assert!(value("translation_error_mm") < 1.0, "{meta}");
    assert!(value("final_dice") > 0.95, "{meta}");
    let trace = read_trace(&d.join("reg/mi.trace.csv")).unwrap();
    assert!(trace.rows.iter().all(|r| r.dice.is_some()));
}

/// Writes results that put the source exactly on the truth.
fn perfect_results(cfg: &RunConfig, method: &str) {
    let manifest = read_manifest(&cfg.manifest_path()).unwrap();
    let dir = cfg.results_dir().join(method);
    fs::create_dir_all(&dir).unwrap();
    for e in manifest.iter().filter(|e| e.role == "test") {
        let (truth, _) = read_transform(&cfg.out_dir().join(&e.truth)).unwrap();
        write_transform(&dir.join(format!("{}.xform", e.id)), &truth, TransformMode::Rigid).unwrap();
        let id = AffineParams::identity(truth.center);
        let rows = vec![
            TraceRow { k: 0, cost: 0.0, step: 0.0, mu: id.mu, dice: Some(0.5) },
            TraceRow { k: 1, cost: 1.0, step: 0.2, mu: truth.mu, dice: Some(1.0) },
        ];
        write_trace(&dir.join(format!("{}.trace.csv", e.id)), &RegistrationTrace { rows }).unwrap();
    }
}

#[test]
fn evaluate_reports_perfect_and_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("n_train_pairs", "0"), ("n_test_pairs", "3"), ("methods", "cdl,mi")]);
    cmd_synth(&cfg).unwrap();
    perfect_results(&cfg, "cdl");
    perfect_results(&cfg, "mi");
    let out = cmd_evaluate(&cfg).unwrap();
    assert_eq!(out.report.cases.len(), 6);
    for c in &out.report.cases {
        assert_eq!(c.final_dice, 1.0);
        assert_eq!(c.final_hd_mm, 0.0);
        assert!(c.initial_dice <= 1.0);
    }
    assert_eq!(out.report.tests.len(), 1);
    assert_eq!(out.report.tests[0].dice_p, 1.0);
    assert_eq!(out.report.tests[0].hd_p, 1.0);
    for f in ["report.csv", "summary.txt", "gain_curve.csv", "scatter.csv", "evaluate.config"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let gain = fs::read_to_string(dir.path().join("gain_curve.csv")).unwrap();
    assert_eq!(gain.lines().next().unwrap(), "k,cdl,mi");
    assert_eq!(gain.lines().count(), 3);
}

#[test]
fn summary_aggregates_match_the_per_case_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("n_test_pairs", "4"), ("methods", "cdl,mi")]);
    cmd_synth(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    cmd_register(&cfg).unwrap();
    let out = cmd_evaluate(&cfg).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("report.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 8);
    for m in &out.report.methods {
        let vals: Vec<f64> = rows.iter().filter(|r| r[1] == m.method).map(|r| r[3].parse().unwrap()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - m.final_dice.mean).abs() < 1e-12);
        assert!((sd - m.final_dice.sd).abs() < 1e-12);
        assert!(out.summary.contains(&format!("{:.4} ± {:.4}", m.final_dice.mean, m.final_dice.sd)));
    }
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cli(&["synth", "--out", out, "--set", "bogus=1"]).status.code(), Some(2));
    assert_eq!(cli(&["train", "--out", out, "--manifest", "/nonexistent/manifest.csv"]).status.code(), Some(4));
    let cfg = dir.path().join("run.config");
    fs::write(&cfg, "grid_size = 4\n").unwrap();
    assert_eq!(cli(&["synth", "--config", cfg.to_str().unwrap(), "--out", out]).status.code(), Some(2));
}

#[test]
fn densitycheck_writes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("density_samples", "20000")]);
    let rows = cmd_densitycheck(&cfg).unwrap();
    assert_eq!(rows.len(), 2 * density_grid().len());
    assert!(rows.iter().all(|r| (r.mass - 1.0).abs() < 1e-6));
    let csv = fs::read_to_string(dir.path().join("density.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "mu,sigma,act,skew,kurtosis,ks_closed_form,ks_gaussian,mass");
    assert_eq!(csv.lines().count(), rows.len() + 1);
}
