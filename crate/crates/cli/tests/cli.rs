//! End-to-end tests of the `mdat` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mdat_core::dataio::{load_manifest, synth_generate, write_corpus, SynthConfig};
use mdat_core::model::MdatModel;
use mdat_core::train::ArchConfig;
use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn mdat(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_mdat")).args(args).output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn ok(args: &[&str]) -> String {
    let r = mdat(args);
    assert_eq!(r.code, 0, "mdat {args:?} failed:\n{}", r.stderr);
    r.stdout
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus flags: 3 domains, vocab 60, 60/30/60 samples per domain.
fn small_synth(dir: &Path, seed: u64) -> PathBuf {
    let seed = seed.to_string();
    ok(&[
        "synth", "--out-dir", s(dir), "--vocab", "60", "--labeled", "60", "--unlabeled", "30", "--test", "60",
        "--doc-len-min", "8", "--doc-len-max", "16", "--min-margin", "2", "--seed", &seed,
    ]);
    dir.join("manifest.txt")
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn help_succeeds_and_unknown_flags_are_usage_errors() {
    assert_eq!(mdat(&["--help"]).code, 0);
    assert_eq!(mdat(&["train", "--help"]).code, 0);
    assert_eq!(mdat(&["train", "--no-such-flag"]).code, 2);
    assert_eq!(mdat(&["frobnicate"]).code, 2);
}

#[test]
fn synth_defaults_round_trip_and_repeat_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let out = json(&ok(&["synth", "--out-dir", s(&tmp.path().join("a")), "--seed", "7"]));
    assert_eq!(out["domains"].as_array().unwrap().len(), 3);
    let loaded = load_manifest(&tmp.path().join("a/manifest.txt")).unwrap();
    let direct = synth_generate(&SynthConfig {
        seed: 7,
        ..SynthConfig::default()
    })
    .unwrap();
    assert_eq!(loaded.corpus, direct.corpus);
    assert_eq!(loaded.test.unwrap(), direct.test);

    ok(&["synth", "--out-dir", s(&tmp.path().join("b")), "--seed", "7"]);
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
}

#[test]
fn noiseless_synth_reports_bayes_accuracy_one() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--out-dir", s(tmp.path()), "--noise", "0", "--flip-fraction", "0", "--labeled", "20"]);
    let loaded = load_manifest(&tmp.path().join("manifest.txt")).unwrap();
    assert_eq!(loaded.manifest.meta["bayes_accuracy"], "1");
}

#[test]
fn untrained_model_is_near_chance_and_training_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_synth(&tmp.path().join("data"), 1);
    let out0 = tmp.path().join("e0");
    ok(&["train", "--manifest", s(&manifest), "--out-dir", s(&out0), "--epochs", "0", "--arch", "compact"]);
    let summary = json(&std::fs::read_to_string(out0.join("summary.json")).unwrap());
    let avg = summary["test"]["average"].as_f64().unwrap();
    assert!((0.35..=0.65).contains(&avg), "untrained accuracy {avg}");
    assert_eq!(summary["selected_epoch"], 0);
    let csv = std::fs::read_to_string(out0.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "train", "--manifest", s(&manifest), "--out-dir", s(&out), "--epochs", "3", "--arch", "compact",
            "--variant", "mdat-l1", "--dev-fraction", "0.2", "--diagnostic", "true",
        ]);
        dir_bytes(&out)
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(
        a.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
        ["metrics.csv", "model.ckpt", "summary.json"]
    );
    let csv = String::from_utf8(a[0].1.clone()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 4);
    assert!(MdatModel::load(&tmp.path().join("a/model.ckpt")).is_ok());
}

#[test]
fn msuda_holds_out_a_named_domain() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_synth(&tmp.path().join("data"), 2);
    let out = tmp.path().join("run");
    ok(&[
        "train", "--manifest", s(&manifest), "--out-dir", s(&out), "--epochs", "1", "--arch", "compact", "--msuda",
        "domain1",
    ]);
    let summary = json(&std::fs::read_to_string(out.join("summary.json")).unwrap());
    assert_eq!(summary["msuda_target"], "domain1");
    assert_eq!(summary["config"]["msuda_target"], 1);
    let r = mdat(&["train", "--manifest", s(&manifest), "--out-dir", s(&out), "--msuda", "nowhere"]);
    assert_eq!(r.code, 2);
    assert_eq!(json(&r.stderr)["error"]["kind"], "config");
}

#[test]
fn errors_are_reported_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let r = mdat(&["train", "--manifest", s(&tmp.path().join("missing.txt")), "--out-dir", s(tmp.path())]);
    assert_eq!(r.code, 1);
    let err = json(&r.stderr);
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"].as_str().unwrap().contains("missing.txt"));

    let r = mdat(&["train", "--manifest", "x"]);
    assert_eq!((r.code, json(&r.stderr)["error"]["kind"].as_str()), (2, Some("usage")));

    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "epochs = 1\nwarmup = 3\n").unwrap();
    let r = mdat(&["train", "--config", s(&conf)]);
    assert_eq!(r.code, 2);
    assert!(json(&r.stderr)["error"]["message"].as_str().unwrap().contains("warmup"));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(&tmp.path().join("data"), 3);
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "manifest = data/manifest.txt\nout_dir = out\narch = compact\nepochs = 5\nalpha = 1\n").unwrap();
    ok(&["train", "--config", s(&conf), "--epochs", "1"]);
    let summary = json(&std::fs::read_to_string(tmp.path().join("out/summary.json")).unwrap());
    assert_eq!(summary["epochs"], 1);
    assert_eq!(summary["config"]["alpha"], 1.0);
}

#[test]
fn crossval_two_folds_is_consistent_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_synth(&tmp.path().join("data"), 4);
    let run = |name: &str, workers: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "crossval", "--manifest", s(&manifest), "--out-dir", s(&out), "--folds", "2", "--epochs", "2", "--arch",
            "compact", "--workers", workers,
        ]);
        std::fs::read_to_string(out.join("crossval.json")).unwrap()
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "2"));
    let r = &json(&a)["report"];
    let folds = r["fold_accuracy"].as_array().unwrap();
    assert_eq!(folds.len(), 2);
    for d in 0..3 {
        let vals: Vec<f64> = folds.iter().map(|f| f[d].as_f64().unwrap()).collect();
        let mean = (vals[0] + vals[1]) / 2.0;
        assert!((r["mean"][d].as_f64().unwrap() - mean).abs() < 1e-12);
        let std = ((vals[0] - mean).powi(2) + (vals[1] - mean).powi(2)).sqrt();
        assert!((r["std"][d].as_f64().unwrap() - std).abs() < 1e-12);
    }
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_backward() {
    let r = mdat(&["gradcheck"]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    let report = json(&r.stdout);
    assert_eq!(report["passed"], true);
    assert!(report["excluded_kinks"].is_u64());
    let losses = report["losses"].as_array().unwrap();
    assert_eq!(losses.len(), 4);
    for l in losses {
        assert!(l["max_rel_error"].as_f64().unwrap() <= 1e-4);
        assert!(l["excluded_kinks"].is_u64());
        for c in l["components"].as_array().unwrap() {
            assert!(c["checked"].as_u64().unwrap() >= 50);
        }
    }
    let bad = mdat(&["gradcheck", "--corrupt-backward"]);
    assert_eq!(bad.code, 1);
    assert_eq!(json(&bad.stdout)["passed"], false);
}

#[test]
fn oracle_matches_the_committed_golden_file() {
    let root = repo_root();
    let out = json(&ok(&["oracle", "--instance", s(&root.join("data/oracle/instance8.txt")), "--rho", "0.5,1,2"]));
    let golden = json(&std::fs::read_to_string(root.join("data/oracle/instance8.golden.json")).unwrap());
    let close = |a: &Value, b: &Value| (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() <= 1e-12;
    assert!(close(&out["hdeltah_divergence"], &golden["hdeltah_divergence"]));
    assert!(close(&out["discrepancy_divergence"]["value"], &golden["discrepancy_divergence_squared"]));
    assert!(close(&out["zero_one_discrepancy"], &golden["zero_one_discrepancy"]));
    let got = out["margin_discrepancy"].as_array().unwrap();
    let want = golden["margin_discrepancy"].as_array().unwrap();
    assert_eq!(got.len(), 3);
    for (g, w) in got.iter().zip(want) {
        assert!(close(&g["rho"], &w["rho"]) && close(&g["value"], &w["value"]));
        assert_eq!(g["argmax"], w["argmax"]);
    }
    let values: Vec<f64> = got.iter().map(|g| g["value"].as_f64().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0]), "{values:?}");

    let zo = json(&ok(&["oracle", "--instance", s(&root.join("data/oracle/instance8.txt")), "--loss", "zero-one"]));
    assert!(close(&zo["discrepancy_divergence"]["value"], &golden["discrepancy_divergence_zero_one"]));
}

#[test]
fn oracle_on_identical_sets_is_zero_and_size_limits_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("same.txt");
    std::fs::write(
        &path,
        "n = 3\nk = 2\ns1 = 0 1 2\ns2 = 0 1 2\nhypothesis = 1 0 | 0 1 | 1 0\nhypothesis = 0 1 | 0 1 | 0.5 0\n",
    )
    .unwrap();
    let out = json(&ok(&["oracle", "--instance", s(&path), "--rho", "0.5,1"]));
    assert_eq!(out["hdeltah_divergence"], 0.0);
    assert_eq!(out["discrepancy_divergence"]["value"], 0.0);
    assert_eq!(out["zero_one_discrepancy"], 0.0);
    assert!(out["margin_discrepancy"].as_array().unwrap().iter().all(|m| m["value"] == 0.0));

    let n = 2000;
    let row = vec!["0 1"; n].join(" | ");
    let all: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    let mut text = format!("n = {n}\nk = 2\ns1 = {0}\ns2 = {0}\n", all.join(" "));
    for _ in 0..400 {
        text.push_str(&format!("hypothesis = {row}\n"));
    }
    let big = tmp.path().join("big.txt");
    std::fs::write(&big, text).unwrap();
    let r = mdat(&["oracle", "--instance", s(&big)]);
    assert_eq!(r.code, 1);
    assert_eq!(json(&r.stderr)["error"]["kind"], "size");
}

/// Corpus and checkpoint for the bound tests; `copies` repeats every
/// labeled sample.
fn bound_fixture(dir: &Path, copies: usize) -> PathBuf {
    let synth = synth_generate(&SynthConfig {
        vocab_dim: 60,
        labeled_per_domain: 40,
        unlabeled_per_domain: 20,
        test_per_domain: 0,
        doc_len_min: 8,
        doc_len_max: 16,
        min_margin: 2.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut domains = synth.corpus.domains().to_vec();
    for d in &mut domains {
        d.labeled = (0..copies).flat_map(|_| d.labeled.iter().cloned()).collect();
    }
    let corpus = mdat_core::dataio::MultiDomainCorpus::new(domains, 60, 2).unwrap();
    let path = write_corpus(dir, &corpus, None, BTreeMap::new()).unwrap();
    let model = MdatModel::init(ArchConfig::compact().for_corpus(&corpus), 0).unwrap();
    model.save(&dir.join("model.ckpt")).unwrap();
    path
}

#[test]
fn bound_report_is_consistent_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let one = bound_fixture(&tmp.path().join("one"), 1);
    let two = bound_fixture(&tmp.path().join("two"), 2);
    let ckpt = tmp.path().join("one/model.ckpt");
    let args = |m: &Path| {
        vec![
            "bound".to_string(),
            "--manifest".into(),
            m.display().to_string(),
            "--checkpoint".into(),
            ckpt.display().to_string(),
            "--draws".into(),
            "30".into(),
            "--max-samples".into(),
            "40".into(),
        ]
    };
    let run = |m: &Path| {
        let a = args(m);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let text = run(&one);
    assert_eq!(text, run(&one));
    let r1 = json(&text);
    let parts: f64 = ["margin_error_term", "discrepancy_term", "complexity_term", "centroid_complexity_term"]
        .iter()
        .map(|k| r1[k].as_f64().unwrap())
        .sum::<f64>()
        + r1["centroid_confidence"].as_f64().unwrap();
    assert!((r1["total"].as_f64().unwrap() - parts).abs() <= 1e-12);
    assert!(r1["lambda"].as_str().unwrap().contains("lambda"));

    let r2 = json(&run(&two));
    for (a, b) in r1["domains"].as_array().unwrap().iter().zip(r2["domains"].as_array().unwrap()) {
        let ratio = a["confidence"].as_f64().unwrap() / b["confidence"].as_f64().unwrap();
        assert!((ratio - 2f64.sqrt()).abs() <= 1e-9);
    }

    let mut bad = args(&one);
    bad.extend(["--delta".into(), "0.5".into()]);
    let r = mdat(&bad.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(r.code, 2);
    assert_eq!(json(&r.stderr)["error"]["kind"], "config");
}

#[test]
fn bundled_benchmark_config_trains_to_target_accuracy() {
    let root = repo_root();
    let tmp = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let stdout = ok(&[
        "train",
        "--config",
        s(&root.join("configs/synth-benchmark.conf")),
        "--out-dir",
        s(tmp.path()),
    ]);
    let elapsed = started.elapsed().as_secs_f64();
    let summary = json(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap());
    let avg = summary["test"]["average"].as_f64().unwrap();
    println!("{stdout}bundled benchmark: average test accuracy {avg:.4} in {elapsed:.1}s");
    assert!(avg >= 0.90, "average accuracy {avg}");
    assert!(elapsed < 120.0, "took {elapsed:.1}s");
}
