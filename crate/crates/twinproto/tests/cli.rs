use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn twinproto(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinproto"))
        .env("TWINPROTO_OUT", out)
        .env("RUST_LOG", "warn")
        .args(["--profile", "ci"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&twinproto(out, &["generate"]));
    let data = out.join("data/2700rpm");
    assert!(data.join("manifest.json").is_file() && data.join("samples.bin").is_file());
    assert!(out.join("config.toml").is_file());

    let data_arg = data.to_str().unwrap();
    ok(&twinproto(out, &["train", "--condition", "2700", "--variant", "proposed", "--data", data_arg]));
    let ckpt = out.join("checkpoints/2700rpm_periodic_k2_r0.ckpt");
    assert!(ckpt.is_file());
    assert!(out.join("loss/2700rpm_periodic_k2_r0.csv").is_file());

    let ckpt_arg = ckpt.to_str().unwrap();
    let eval = ["evaluate", "--checkpoint", ckpt_arg, "--condition", "2700", "--shot", "5", "--data", data_arg];
    ok(&twinproto(out, &eval));
    let eval_dir = out.join("evaluate/proposed_2700rpm_5s_r0");
    for f in ["results.json", "accuracy.csv", "tasks.csv", "adaptation_reports.jsonl", "summary.md"] {
        assert!(eval_dir.join(f).is_file(), "{f}");
    }

    // the checkpoint holds a periodic network, a plain one does not fit it
    let mut wrong = eval.to_vec();
    wrong.extend(["--variant", "baseline"]);
    assert!(!twinproto(out, &wrong).status.success());

    let report_dir = dir.path().join("report");
    let results = eval_dir.join("results.json");
    ok(&twinproto(&report_dir, &["report", "--results", results.to_str().unwrap()]));
    assert_eq!(fs::read(report_dir.join("accuracy.csv")).unwrap(), fs::read(eval_dir.join("accuracy.csv")).unwrap());
}

#[test]
fn out_flag_overrides_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let flag = dir.path().join("flag");
    ok(&twinproto(&dir.path().join("env"), &["--out", flag.to_str().unwrap(), "generate"]));
    assert!(flag.join("data/2700rpm/manifest.json").is_file());
    assert!(!dir.path().join("env").exists());
}

#[test]
fn bad_arguments_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["--set", "adapt.nope=1", "generate"][..],
        &["--set", "shots=[2]", "generate"],
        &["--profile", "fast", "generate"],
        &["generate", "--condition", "1500"],
        &["report", "--results", "/nonexistent/results.json"],
        &["evaluate", "--checkpoint", "/nonexistent.ckpt", "--condition", "2700", "--shot", "5"],
    ] {
        let o = twinproto(dir.path(), args);
        assert!(!o.status.success(), "{args:?}");
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
}
