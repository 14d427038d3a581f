use std::path::Path;
use std::process::Command;

fn tsdiff(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tsdiff")).args(args).output().expect("binary runs")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        let out = dir.path().join(out).display().to_string();
        tsdiff(&["sample", "--method", "ts-ddim", "--steps", "10", "--window", "40", "--cutoff", "300", "--seed", "7", "--n", "200", "--out", &out])
    };
    assert!(args("a").status.success());
    assert!(args("b").status.success());
    for f in ["samples.csv", "trajectory.jsonl", "metrics.csv", "config.toml"] {
        assert_eq!(read(&dir.path().join("a").join(f)), read(&dir.path().join("b").join(f)), "{f}");
    }
    let samples = read(&dir.path().join("a/samples.csv"));
    assert_eq!(samples.lines().count(), 201);
}

#[test]
fn outputs_are_never_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let run = || tsdiff(&["sample", "--seed", "1", "--n", "10", "--out", &out]);
    assert!(run().status.success());
    let again = run();
    assert_eq!(again.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&again.stderr).contains("exists"));
}

#[test]
fn exit_codes() {
    assert_eq!(tsdiff(&["no-such-command"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(tsdiff(&["sample", "--out", &out]).status.code(), Some(3), "missing seed");
    assert_eq!(tsdiff(&["sample", "--seed", "1", "--method", "euler", "--out", &out]).status.code(), Some(3));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[sampler]\nwindow = 3\n").unwrap();
    assert_eq!(tsdiff(&["sample", "--config", cfg.to_str().unwrap(), "--out", &out]).status.code(), Some(3));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[dataset]\nkind = \"gaussian\"\nmean = [1.0, 1.0, 1.0]\nvariance = 0.5\nsize = 100\n[sampler]\nmethod = \"ddpm\"\nn = 50\n").unwrap();
    let out = dir.path().join("o");
    let st = tsdiff(&["sample", "--config", cfg.to_str().unwrap(), "--steps", "5", "--out", out.to_str().unwrap()]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let echo = read(&out.join("config.toml"));
    assert!(echo.contains("method = \"ddpm\""));
    assert!(echo.contains("steps = 5"));
    let samples = read(&out.join("samples.csv"));
    assert_eq!(samples.lines().next().unwrap().split(',').count(), 3);
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let st = tsdiff(&["sweep", "--seed", "3", "--n", "100", "--out", &out]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let csv = read(&dir.path().join("sweep.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "window,cutoff,sliced_wasserstein,mean_error,cov_error");
    assert_eq!(lines.count(), 36);
    assert_eq!(std::fs::read_dir(dir.path().join("cells")).unwrap().count(), 36);
}

#[test]
fn verify_theorem_reports_rates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let st = tsdiff(&["verify", "theorem", "--trials", "20", "--out", &out]);
    assert!(matches!(st.status.code(), Some(0 | 1)));
    let v: serde_json::Value = serde_json::from_str(&read(&dir.path().join("report.json"))).unwrap();
    let rate = v["report"]["agreement_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert_eq!(v["pass"].as_bool().unwrap(), st.status.code() == Some(0));
}

#[test]
fn verify_window_passes() {
    let st = tsdiff(&["verify", "window"]);
    assert_eq!(st.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(v["pass"], true);
}

#[test]
fn schedule_dump_to_stdout() {
    let st = tsdiff(&["schedule", "dump", "--timesteps", "10"]);
    assert!(st.status.success());
    let text = String::from_utf8(st.stdout).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("t,beta,alpha,alpha_bar,variance"));
}

#[test]
fn train_then_sample_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    let st = tsdiff(&["train", "--seed", "1", "--epochs", "1", "--out", train.to_str().unwrap()]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let ck = train.join("checkpoint.json");
    let out = dir.path().join("s");
    let st = tsdiff(&["sample", "--seed", "1", "--n", "20", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert_eq!(read(&out.join("samples.csv")).lines().count(), 21);
}

#[test]
fn diagnose_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, file, header) in [
        ("variance", "variance.csv", "t,quantile,value"),
        ("mse", "mse.csv", "stage,t,mse"),
        ("coupling", "coupling.csv", "t,offset,mean_C,mean_dist"),
    ] {
        let out = dir.path().join(kind);
        let st = tsdiff(&["diagnose", kind, "--seed", "2", "--phi", "0.05", "--out", out.to_str().unwrap()]);
        assert!(st.status.success(), "{kind}: {}", String::from_utf8_lossy(&st.stderr));
        assert!(read(&out.join(file)).starts_with(header), "{kind}");
    }
}
