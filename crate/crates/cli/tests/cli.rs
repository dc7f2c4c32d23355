use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hybridscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridscan"))
        .args(args)
        .env_remove("HYBRIDSCAN_THREADS")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(
        &path,
        r#"{
  "seed": 3,
  "data": {"size": [8, 8, 8], "radius": [1.5, 2.5], "num_cases": 10},
  "train": {"epochs": 1, "crop": [8, 8, 8], "val_every": 1}
}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn orders_emits_within_slice_permutation() {
    let out = hybridscan(&["orders", "--dims", "1,4,4", "--k", "2", "--variant", "within_slice"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let fwd: Vec<u64> = serde_json::from_value(v["forward"].clone()).unwrap();
    assert_eq!(fwd, [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
    assert!(v["locality"]["max_span_local"].as_u64().unwrap() <= 3);
}

#[test]
fn orders_rejects_bad_window_with_config_code() {
    let out = hybridscan(&["orders", "--dims", "1,4,4", "--k", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_is_an_io_error_naming_the_path() {
    let out = hybridscan(&["train", "--config", "/definitely/missing/run.json"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/missing/run.json"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"train": {"learning_rate": 1.0}}"#).unwrap();
    let out = hybridscan(&["gen", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn gen_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = hybridscan(&["gen", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());
    assert_eq!(fs::read_dir(&data).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "vseg")
    }).count(), 10);

    let out = hybridscan(&[
        "train", "--config", &cfg, "--out", run.to_str().unwrap(), "--data", data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "model.hsck", "curves.csv", "history.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    // The echoed config reproduces the run's configuration.
    let echoed = run.join("config.json");
    let eval_dir = dir.path().join("eval");
    let out = hybridscan(&[
        "eval",
        "--config", echoed.to_str().unwrap(),
        "--out", eval_dir.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--checkpoint", run.join("model.hsck").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["mean"]["Dice"].is_number());
    assert!(report["mean"]["HD95"].is_number());
    assert_eq!(report["cases"].as_array().unwrap().len(), 2);
}

#[test]
fn training_is_reproducible_from_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for o in [&a, &b] {
        let out = hybridscan(&["train", "--config", &cfg, "--out", o.to_str().unwrap()]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(a.join("model.hsck")).unwrap(), fs::read(b.join("model.hsck")).unwrap());
}

#[test]
fn gradcheck_passes_on_toy_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = hybridscan(&["gradcheck", "--preset", "desk", "--seeds", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("model_2stage_8cube"));
    assert!(stdout.contains("0 failed"));
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn bench_reports_throughput() {
    let out = hybridscan(&["bench", "--lengths", "16,64", "--lanes", "2", "--reps", "1", "--threads", "2"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["results"].as_array().unwrap().len(), 2);
    assert_eq!(v["threads"], 2);
}

#[test]
fn ablate_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = hybridscan(&["ablate", "--config", &cfg, "--out", dir.path().join("abl").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("abl/ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let names: Vec<&str> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["baseline", "+S-LMamba", "+FGM", "S-LMamba+FGM"]);
    let full = rows[3]["parameters"].as_u64().unwrap();
    assert!(rows[..3].iter().all(|r| r["parameters"].as_u64().unwrap() < full));
    assert!(rows.iter().all(|r| r["Dice"].is_number() && r["HD95"].is_number()));
    let csv = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
