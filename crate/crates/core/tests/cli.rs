use std::path::Path;
use std::process::Command;

fn kubeadaptor(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_kubeadaptor"))
        .args(args)
        .env_remove("KUBEADAPTOR_ENDPOINT")
        .output()
        .unwrap()
}

fn run_to(dir: &Path, args: &[&str]) -> String {
    let mut all = args.to_vec();
    let out = dir.to_str().unwrap();
    all.extend(["--out-dir", out]);
    let o = kubeadaptor(&all);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn hundred_montage_lifecycles_in_summary() {
    let dir = tempfile::tempdir().unwrap();
    run_to(dir.path(), &["--engine", "adaptor", "--workflow", "montage", "--repeat", "100", "--seed", "7"]);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("run,engine,workflow,namespace,created_at,deleted_at,lifecycle,mean_task_time,retries")
    );
    assert_eq!(lines.count(), 100);
}

#[test]
fn same_flags_same_bytes() {
    let args = ["--engine", "batchjob", "--workflow", "cybershake", "--repeat", "3", "--seed", "5", "--failure-prob", "0.2"];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out_a = run_to(a.path(), &args);
    let out_b = run_to(b.path(), &args);
    assert_eq!(out_a.lines().next(), out_b.lines().next());
    for f in ["samples.csv", "tasks.csv", "summary.csv", "events.csv", "trace.jsonl"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn argo_ligo_lifecycle_near_measured() {
    let o = kubeadaptor(&["--engine", "argo", "--workflow", "ligo", "--repeat", "100"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mean: f64 = text
        .split_whitespace()
        .find_map(|w| w.strip_prefix("lifecycle_mean="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((mean - 181.22).abs() <= 0.15 * 181.22, "{mean}");
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "[injector]\nrepeat = 2\ntransport = \"tcp\"\n[metrics]\nsample_period = 1.0\n").unwrap();
    let out = dir.path().join("out");
    run_to(&out, &["--config", cfg.to_str().unwrap(), "--workflow", "pipeline:4"]);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let samples = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    let second = samples.lines().nth(2).unwrap();
    assert!(second.starts_with("1.000,"), "{second}");
}

#[test]
fn bad_input_exits_nonzero() {
    for args in [
        vec!["--engine", "kubectl"],
        vec!["--workflow", "/nonexistent.json"],
        vec!["--failure-prob", "1.5"],
        vec!["--sample-period", "0"],
        vec!["--repeat", "0"],
    ] {
        let o = kubeadaptor(&args);
        assert!(!o.status.success(), "{args:?} succeeded");
        assert!(!o.stderr.is_empty());
    }
}
