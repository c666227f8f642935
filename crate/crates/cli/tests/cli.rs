use std::path::Path;
use std::process::{Command, Output};

fn bun(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bun"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.ini");
    let text = format!(
        "env = ssc\nalgo = bun\nseed = 1\ntotal_steps = 2000\noutput_dir = {}\n\n[dqn]\nbatch = 32\nbuffer = 4000\n\n[growth]\nbudget = 6\nstart = 500\nend = 1600\nperiod = 500\n\n[eval]\nevery = 0\nepisodes = 3\n{extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_then_inspect_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = bun(&["train", "--config", &cfg, "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed=3"));
    let ck = tmp.path().join("out/checkpoint.bin");
    let ck = ck.to_str().unwrap();
    for f in [
        "training_log.csv",
        "learning_curve.csv",
        "growth_events.csv",
        "final_eval.csv",
        "config.ini",
    ] {
        assert!(tmp.path().join("out").join(f).exists(), "{f} missing");
    }

    let o = bun(&[
        "eval",
        "--checkpoint",
        ck,
        "--episodes",
        "3",
        "--sigma",
        "0.1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("out/eval_sigma_0.1.csv").exists());

    let o = bun(&[
        "robustness",
        "--checkpoint",
        ck,
        "--sigmas",
        "0,0.3",
        "--episodes",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o).lines().filter(|l| l.contains("sigma=")).count(),
        2
    );
    let csv = std::fs::read_to_string(tmp.path().join("out/robustness.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = bun(&["inspect-mask", "--checkpoint", ck]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("agent 0 <- ["));
    assert!(out.contains("cross-agent weights: "));
    assert!(tmp.path().join("out/layer_sparsity.csv").exists());
}

#[test]
fn sweep_writes_one_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = bun(&["sweep", "--config", &cfg, "--seeds", "1..2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("out/seed-1/checkpoint.bin").exists());
    assert!(tmp.path().join("out/seed-2/checkpoint.bin").exists());
    let csv = std::fs::read_to_string(tmp.path().join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bogus = 1\n");
    let o = bun(&["train", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));

    let o = bun(&[
        "eval",
        "--checkpoint",
        "/nonexistent/ck.bin",
        "--episodes",
        "2",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/ck.bin"));

    let junk = tmp.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = bun(&["inspect-mask", "--checkpoint", junk.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));

    let o = bun(&["sweep", "--config", &cfg, "--seeds", "5..2"]);
    assert!(!o.status.success());
}
