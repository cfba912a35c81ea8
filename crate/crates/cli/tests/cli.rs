use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moes_core::dataset::io::write_pfm;
use moes_core::dataset::load_dataset;
use moes_core::model::{checkpoint, ParamGroup};

const SMALL: &str = r#"{
  "train": { "max_epochs": 1 },
  "data": { "spec": { "samples_per_category": 5 }, "val_per_category": 1, "test_per_category": 1 },
  "output_dir": "run"
}"#;

fn moes(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moes"))
        .args(args)
        .current_dir(cwd)
        .env("MOES_THREADS", "1")
        .output()
        .expect("spawn moes")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = moes(cwd, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(cwd: &Path, args: &[&str]) -> (i32, String) {
    let out = moes(cwd, args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// A working directory holding the small config and a generated dataset.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), SMALL).unwrap();
    ok(dir.path(), &["--config", "c.json", "gen-data"]);
    dir
}

fn with_config<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    ["--config", "c.json"].into_iter().chain(extra.iter().copied()).collect()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_data_writes_a_loadable_reproducible_dataset() {
    let w = workspace();
    let d = w.path();
    let data = load_dataset(&d.join("run/data")).unwrap();
    assert_eq!(data.len(), 20);
    assert_eq!(data.num_categories(), 4);
    assert!(d.join("run/data/config.json").is_file());
    assert!(d.join("run/data/run.meta").is_file());
    ok(d, &with_config(&["gen-data", "--out", "again"]));
    assert_eq!(
        fs::read(d.join("run/data/manifest.json")).unwrap(),
        fs::read(d.join("again/manifest.json")).unwrap()
    );
    ok(d, &with_config(&["--seed", "9", "gen-data", "--out", "other"]));
    assert_ne!(
        fs::read(d.join("run/data/manifest.json")).unwrap(),
        fs::read(d.join("other/manifest.json")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    fs::write(d.join("k1.json"), r#"{"data": {"spec": {"num_categories": 1}}}"#).unwrap();
    let (c, err) = code(d, &["--config", "k1.json", "gen-data"]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("num_categories"));

    fs::write(d.join("typo.json"), r#"{"trian": {}}"#).unwrap();
    let (c, err) = code(d, &["--config", "typo.json", "gen-data"]);
    assert_eq!(c, 2);
    assert!(err.contains("unknown field"));

    let (c, _) = code(d, &["--config", "missing.json", "gen-data"]);
    assert_eq!(c, 2);
    let (c, err) = code(d, &["train", "--data", "nowhere"]);
    assert_eq!(c, 2);
    assert!(err.contains("no dataset"));
    let (c, _) = code(d, &["frobnicate"]);
    assert_eq!(c, 2);
}

#[test]
fn resolved_config_expands_defaults() {
    let w = workspace();
    let text = fs::read_to_string(w.path().join("run/data/config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["model"]["lambda_s"], 10.0);
    assert_eq!(v["model"]["lambda_c"], 1.0);
    assert_eq!(v["model"]["tau"], 10.0);
    assert_eq!(v["model"]["alpha"], 1.1);
    assert_eq!(v["train"]["batch_size"], 8);
    assert_eq!(v["train"]["patience"], 10);
    assert_eq!(v["train"]["adadelta"]["rho"], 0.95);
    assert_eq!(v["data"]["spec"]["samples_per_category"], 5);
    // the resolved file is itself a valid config
    let w2 = tempfile::tempdir().unwrap();
    fs::write(w2.path().join("c.json"), text).unwrap();
    ok(w2.path(), &["--config", "c.json", "gen-data", "--out", "d"]);
}

#[test]
fn train_writes_log_and_checkpoints() {
    let w = workspace();
    let d = w.path();
    ok(d, &with_config(&["train"]));
    for f in ["log.csv", "model.best", "model.init", "model.last", "split.json", "summary.json", "config.json", "run.meta"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(d.join("run/log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,val_class_acc,val_nss\n"));
    assert_eq!(log.lines().count(), 2);
    let m = checkpoint::load(&d.join("run/model.best")).unwrap();
    assert_eq!(m.num_experts(), 4);
}

#[test]
fn single_expert_forces_one_expert_and_no_class_loss() {
    let w = workspace();
    let d = w.path();
    ok(d, &with_config(&["train", "--single-expert", "--out", "single"]));
    let m = checkpoint::load(&d.join("single/model.best")).unwrap();
    assert_eq!(m.num_experts(), 1);
    assert_eq!(m.config().lambda_c, 0.0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("single/config.json")).unwrap()).unwrap();
    assert_eq!(v["model"]["num_experts"], 1);
    assert_eq!(v["model"]["lambda_c"], 0.0);
}

#[test]
fn frozen_gating_is_unchanged_between_first_and_last_checkpoint() {
    let w = workspace();
    let d = w.path();
    ok(d, &with_config(&["train", "--freeze-gating", "--out", "frozen"]));
    let init = checkpoint::load(&d.join("frozen/model.init")).unwrap();
    let last = checkpoint::load(&d.join("frozen/model.last")).unwrap();
    for id in init.params_in_group(ParamGroup::Gating) {
        assert_eq!(init.graph().param_value(id).data(), last.graph().param_value(id).data());
    }
    let trunk = init.params_in_group(ParamGroup::Trunk)[0];
    assert_ne!(init.graph().param_value(trunk).data(), last.graph().param_value(trunk).data());
}

#[test]
fn ensemble_training_writes_every_member() {
    let w = workspace();
    let d = w.path();
    ok(d, &with_config(&["train", "--ensemble", "2", "--out", "ens"]));
    for m in 0..2 {
        let ck = checkpoint::load(&d.join(format!("ens/member{m}/model.best"))).unwrap();
        assert_eq!(ck.num_experts(), 1);
    }
    let log = fs::read_to_string(d.join("ens/log.csv")).unwrap();
    assert!(log.starts_with("member,epoch,"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let w = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_moes"))
        .args(with_config(&["train", "--ensemble", "2"]))
        .current_dir(w.path())
        .env("MOES_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn image(d: &Path, id: &str) -> PathBuf {
    let cat = id.split('-').next().unwrap();
    d.join("run/data").join(cat).join(format!("{id}.img.pgm"))
}

#[test]
fn predict_is_repeatable_and_gates_sum_to_one() {
    let w = workspace();
    let d = w.path();
    ok(d, &with_config(&["train"]));
    let img = image(d, "bright-0000");
    let img = img.to_str().unwrap();
    ok(d, &with_config(&["predict", "--checkpoint", "run/model.best", img, "--out", "p1"]));
    ok(d, &with_config(&["predict", "--checkpoint", "run/model.best", img, "--out", "p2"]));
    for f in ["bright-0000.img.pfm", "bright-0000.img.pgm", "gates.csv"] {
        assert_eq!(fs::read(d.join("p1").join(f)).unwrap(), fs::read(d.join("p2").join(f)).unwrap(), "{f}");
    }
    let rows = csv_rows(&d.join("p1/gates.csv"));
    assert_eq!(rows[0].len(), 5);
    for r in rows {
        let s: f64 = r[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() <= 1e-9);
    }
    let map = moes_core::dataset::io::read_pfm(&d.join("p1/bright-0000.img.pfm")).unwrap();
    assert_eq!(map.shape(), &[1, 8, 8]);
}

#[test]
fn single_expert_gates_are_ones() {
    let w = workspace();
    let d = w.path();
    ok(d, &with_config(&["train", "--single-expert", "--out", "single"]));
    let (a, b) = (image(d, "dark-0001"), image(d, "bar-0002"));
    ok(
        d,
        &with_config(&["predict", "--checkpoint", "single/model.best", a.to_str().unwrap(), b.to_str().unwrap(), "--out", "p"]),
    );
    let rows = csv_rows(&d.join("p/gates.csv"));
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn predict_rejects_wrong_resolution() {
    let w = workspace();
    let d = w.path();
    ok(d, &with_config(&["train"]));
    let small = moes_core::Tensor::full(&[1, 16, 16], 0.5);
    moes_core::dataset::io::write_image(&d.join("small.pgm"), &small).unwrap();
    let (c, err) = code(d, &with_config(&["predict", "--checkpoint", "run/model.best", "small.pgm"]));
    assert_eq!(c, 2);
    assert!(err.contains("expects"));
}

#[test]
fn ground_truth_scored_against_itself_has_unit_cc() {
    let w = workspace();
    let d = w.path();
    let data = load_dataset(&d.join("run/data")).unwrap();
    fs::create_dir_all(d.join("gt")).unwrap();
    for s in &data.samples {
        write_pfm(&d.join("gt").join(format!("{}.pfm", s.id)), &s.density).unwrap();
    }
    ok(d, &with_config(&["eval", "--maps", "gt", "--subset", "all", "--metrics", "cc,sim,kld", "--out", "e"]));
    let rows = csv_rows(&d.join("e/per_sample.csv"));
    assert_eq!(rows.len(), 3 * data.len());
    for r in rows {
        let v: f64 = r[3].parse().unwrap();
        match r[2].as_str() {
            "cc" | "sim" => assert!((v - 1.0).abs() < 1e-9, "{r:?}"),
            _ => assert!(v.abs() < 1e-9, "{r:?}"),
        }
    }
}

#[test]
fn eval_reports_are_comparable_across_models() {
    let w = workspace();
    let d = w.path();
    ok(d, &with_config(&["train", "--out", "mix"]));
    ok(d, &with_config(&["train", "--single-expert", "--out", "single"]));
    let table = ok(d, &with_config(&["eval", "--checkpoint", "mix/model.best", "--out", "em"]));
    assert!(table.contains("all") && table.contains("bright") && table.contains("gating accuracy"));
    ok(d, &with_config(&["eval", "--checkpoint", "single/model.best", "--out", "es"]));
    let key = |p: &str| csv_rows(&d.join(p)).into_iter().map(|r| (r[0].clone(), r[2].clone())).collect::<Vec<_>>();
    assert_eq!(key("em/per_sample.csv"), key("es/per_sample.csv"));
    assert!(d.join("em/confusion.csv").is_file());
    assert!(!d.join("es/confusion.csv").exists());
    let confusion = fs::read_to_string(d.join("em/confusion.csv")).unwrap();
    assert!(confusion.starts_with("true\\predicted,bright,dark,textured,bar\n"));
    let total: usize = csv_rows(&d.join("em/confusion.csv"))
        .iter()
        .flat_map(|r| r[1..].iter().map(|v| v.parse::<usize>().unwrap()))
        .sum();
    assert_eq!(total, 4);
}

#[test]
fn eval_rejects_unknown_metrics_and_disjoint_maps() {
    let w = workspace();
    let d = w.path();
    ok(d, &with_config(&["train"]));
    let (c, err) = code(d, &with_config(&["eval", "--checkpoint", "run/model.best", "--metrics", "nss,sauc"]));
    assert_eq!(c, 2);
    for name in ["nss", "cc", "kld", "sim", "auc_borji", "auc_judd"] {
        assert!(err.contains(name), "{err}");
    }
    fs::create_dir_all(d.join("empty")).unwrap();
    let (c, err) = code(d, &with_config(&["eval", "--maps", "empty"]));
    assert_eq!(c, 2);
    assert!(err.contains("none of"));
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_gradient() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    let stdout = ok(d, &["gradcheck", "--out", "gc"]);
    for eps in ["1e-3", "1e-4", "1e-5"] {
        assert!(stdout.lines().any(|l| l.starts_with(eps)), "{stdout}");
    }
    for group in ["trunk", "expert0", "expert1", "gating", "center_bias"] {
        assert!(stdout.contains(group));
    }
    assert!(d.join("gc/gradcheck.csv").is_file());
    let (c, err) = code(d, &["gradcheck", "--out", "gc2", "--inject-fault", "expert1.Conv-E-1.kernel"]);
    assert_eq!(c, 1);
    assert!(err.contains("expert1.Conv-E-1.kernel"));
    let (c, _) = code(d, &["gradcheck", "--out", "gc3", "--inject-fault", "no.such.param"]);
    assert_eq!(c, 2);
}
