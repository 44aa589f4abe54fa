use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use herbs::cli::{default_values, parse_values};

const TINY: &[&str] = &["--set", "synthetic.samples_per_class=6", "--set", "epochs=2"];

fn herbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_herbs")).args(args).output().expect("binary runs")
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).to_string();
    assert_eq!(s.trim_end().lines().count(), 1, "single-line error expected, got {s:?}");
    s.trim_end().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", path(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    herbs(&args)
}

fn log_without_timings(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("seconds");
            v
        })
        .collect()
}

#[test]
fn eval_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = herbs(&["eval", "--out", path(&dir.path().join("e"))]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("E_NO_CKPT: "));
    let o = herbs(&["eval", "--out", path(&dir.path().join("e")), "--checkpoint", "/nonexistent/ck.bin"]);
    assert!(stderr_line(&o).starts_with("E_NO_CKPT: "));
}

#[test]
fn bad_configuration_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&dir.path().join("a"), &["--set", "lamda_d=3"]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("E_UNKNOWN_KEY: "));
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "variant = q\n").unwrap();
    let o = herbs(&["train", "--out", path(&dir.path().join("b")), "--config", path(&cfg)]);
    assert!(stderr_line(&o).starts_with("E_CONFIG: "));
    let o = herbs(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("E_USAGE: "));
}

#[test]
fn train_is_reproducible_and_guards_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&a, &["--seed", "4"]).status.success());
    assert!(train(&b, &["--seed", "4"]).status.success());
    assert_eq!(log_without_timings(&a), log_without_timings(&b));
    assert_eq!(log_without_timings(&a).len(), 2);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    let resolved = fs::read_to_string(a.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("seed = 4") && resolved.contains("epochs = 2"));

    let o = train(&a, &[]);
    assert!(stderr_line(&o).starts_with("E_OUTPUT_EXISTS: "));
    assert!(train(&a, &["--seed", "4", "--overwrite"]).status.success());
    assert_eq!(log_without_timings(&a), log_without_timings(&b));

    let foreign = dir.path().join("foreign");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("notes.txt"), "keep me").unwrap();
    let o = train(&foreign, &["--overwrite"]);
    assert!(stderr_line(&o).starts_with("E_OUTPUT_EXISTS: "));
    assert!(foreign.join("notes.txt").exists());
}

#[test]
fn resume_extends_a_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &[]).status.success());
    let before = log_without_timings(&run);
    let o = herbs(&[
        "train",
        "--out",
        path(&run),
        "--resume",
        "--set",
        "synthetic.samples_per_class=6",
        "--set",
        "epochs=4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let after = log_without_timings(&run);
    assert_eq!(after.len(), 4);
    assert_eq!(after[..2], before[..]);
    let epochs: Vec<u64> = after.iter().map(|v| v["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, [0, 1, 2, 3]);
    let o = herbs(&["train", "--out", path(&dir.path().join("none")), "--resume"]);
    assert!(stderr_line(&o).starts_with("E_NO_CKPT: "));
}

#[test]
fn eval_and_visualize_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &[]).status.success());
    let ck = run.join("checkpoint.bin");
    let ev = dir.path().join("eval");
    let o = herbs(&["eval", "--checkpoint", path(&ck), "--out", path(&ev), "--set", "generic_threshold=1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["predictions.jsonl", "report.txt", "report.json", "resolved_config.txt"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["generic"]["rows"].as_array().unwrap().len(), 5);
    assert_eq!(fs::read_to_string(ev.join("predictions.jsonl")).unwrap().lines().count(), 20);

    let vis = dir.path().join("vis");
    let o = herbs(&["visualize", "--checkpoint", path(&ck), "--out", path(&vis), "--set", "heatmaps=3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pngs = fs::read_dir(&vis)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 12);
}

#[test]
fn gradcheck_passes_on_the_tiny_net() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = herbs(&["gradcheck", "--out", path(&out), "--set", "synthetic.fine_per_generic=1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["passed"].as_bool().unwrap());
    assert!(report["weights"].as_array().unwrap().len() >= 20);
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn sweep_over_lambda_d_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = herbs(&[
        "sweep",
        "--param",
        "λ_d",
        "--values",
        "0..9",
        "--out",
        path(&out),
        "--set",
        "synthetic.samples_per_class=3",
        "--set",
        "epochs=1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert_eq!(rows.lines().count(), 11);
    assert!(rows.starts_with("lambda_d\t"));
    assert!(out.join("sweep.png").exists());
}

#[test]
fn sweep_values() {
    assert_eq!(parse_values("0..9").unwrap(), (0..=9).map(f64::from).collect::<Vec<_>>());
    assert_eq!(parse_values("0.5, 1,2").unwrap(), vec![0.5, 1.0, 2.0]);
    assert!(parse_values("3..1").is_err());
    assert!(parse_values("a,b").is_err());
    let t = default_values("temperature").unwrap();
    assert_eq!((t[0], t[9], t.len()), (0.5, 256.0, 10));
    assert_eq!(default_values("λ_d").unwrap().len(), 10);
}
