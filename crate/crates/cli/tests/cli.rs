use std::path::Path;
use std::process::{Command, Output};

fn swinq(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swinq"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("SWINQ_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = swinq(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn prepare(out: &Path) {
    ok(out, &["synth-data", "--classes", "3", "--per-class", "30", "--size", "8", "--seed", "3"]);
    ok(out, &["split", "--seed", "3"]);
    ok(out, &["train", "--model", "micro", "--epochs", "2", "--batch-size", "16", "--seed", "3"]);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = swinq(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = swinq(dir.path(), &["build-engine", "--precision", "int4"]);
    assert_eq!(o.status.code(), Some(2));

    let o = swinq(dir.path(), &["build-engine", "--precision", "int8"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let o = swinq(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_is_available_per_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["synth-data", "split", "train", "calibrate", "build-engine", "evaluate", "bench", "report", "ablate"] {
        let o = swinq(dir.path(), &[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("--out"), "{sub}");
    }
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = swinq(dir.path(), &["evaluate", "--precision", "fp32"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn step_by_step_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    assert!(out.join("manifest.json").is_file());
    assert!(out.join("params.swta").is_file());

    let text = ok(out, &["calibrate", "--method", "omse"]);
    assert!(text.contains("sites"));
    assert!(out.join("calibration/omse.json").is_file());

    for (p, m) in [("fp32", None), ("fp16", None), ("int8", Some("minmax")), ("int8", Some("fqvit"))] {
        let mut args = vec!["build-engine", "--precision", p];
        if let Some(m) = m {
            args.extend(["--method", m]);
        }
        ok(out, &args);
        let mut eval = args.clone();
        eval[0] = "evaluate";
        ok(out, &eval);
        let mut bench = args.clone();
        bench[0] = "bench";
        bench.extend(["--warmup", "1", "--iters", "10"]);
        ok(out, &bench);
    }
    assert!(out.join("engines/int8-fqvit.swqe").is_file());
    let preds = std::fs::read_to_string(out.join("predictions/fp32.jsonl")).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let tests = manifest["samples"].as_array().unwrap().iter().filter(|s| s["split"] == "test").count();
    assert_eq!(preds.lines().count(), tests);
    let first: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    for key in ["path", "label", "pred", "logits"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let table = ok(out, &["report"]);
    assert!(table.contains("original (32/32/32)"), "{table}");
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(methods, ["original", "fqvit", "int8", "fp16"]);
}

#[test]
fn ablate_reproduces_from_run_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    prepare(&out);
    let table = ok(&out, &["ablate", "--warmup", "1", "--iters", "10", "--dataset", "toy"]);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(
        methods,
        ["original", "minmax", "ema", "omse", "percentile", "fqvit", "int8", "fp16", "default_range"]
    );
    assert!(table.contains("default_range (8/8/8)") && table.contains("fqvit (8/8/4)"));

    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "ablate");
    assert_eq!(run["args"]["dataset"], "toy");
    assert_eq!(run["args"]["iters"], 10);

    let engines = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(d.join("engines"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let before = engines(&out);
    let run_copy = dir.path().join("saved-run.json");
    std::fs::copy(out.join("run.json"), &run_copy).unwrap();

    // no subcommand named: it comes from the file, as do --iters and --dataset
    let o = Command::new(env!("CARGO_BIN_EXE_swinq"))
        .arg("--config")
        .arg(&run_copy)
        .env("RUST_LOG", "warn")
        .env_remove("SWINQ_OUT")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(engines(&out), before);
    let rerun = std::fs::read_to_string(out.join("run.json")).unwrap();
    assert_eq!(rerun, std::fs::read_to_string(&run_copy).unwrap());

    // explicit flags win over the file
    ok(&out, &["ablate", "--config", run_copy.to_str().unwrap(), "--dataset", "other", "--iters", "11"]);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["args"]["dataset"], "other");
    assert_eq!(run["args"]["iters"], 11);
    assert_eq!(run["args"]["warmup"], 1);

    let o = swinq(&out, &["train", "--config", run_copy.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_swinq"))
        .args(["synth-data", "--classes", "2", "--per-class", "30", "--size", "4"])
        .env("SWINQ_OUT", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("data/class_01/img_0029.ppm").is_file());
    assert!(dir.path().join("run.json").is_file());
}
