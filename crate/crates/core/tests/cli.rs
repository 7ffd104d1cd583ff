use std::process::Command;

fn noprop() -> Command {
    Command::new(env!("CARGO_BIN_EXE_noprop"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let o = noprop().args(args).output().unwrap();
    (
        o.status.code().unwrap(),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

#[test]
fn train_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let (code, _, err) = run(&["train", "--method", "dt", "--dataset", "blobs", "--seed", "1", "--metrics", p.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let (ta, tb) = (std::fs::read_to_string(&a).unwrap(), std::fs::read_to_string(&b).unwrap());
    assert_eq!(ta, tb);
    assert!(ta.starts_with("method,block,epoch,ce,kl,l2,train_acc,test_acc,peak_nodes\n"));
}

#[test]
fn wall_clock_column_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let (code, _, _) = run(&["train", "--method", "fm", "--metrics", p.to_str().unwrap(), "--wall-clock"]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.lines().next().unwrap().ends_with(",wall_clock"));
}

#[test]
fn train_save_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.nprp");
    let (code, out, err) = run(&["train", "--method", "backprop", "--out", ckpt.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("saved"));
    let (code, out, _) = run(&["eval", "--ckpt", ckpt.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("test accuracy 1.0000"), "{out}");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nmethod = ct\nepochs = 2\nsteps = 3\n").unwrap();
    let (code, out, err) = run(&["train", "--config", cfg.to_str().unwrap(), "--method", "dt"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("trained dt (T=3, 2 epochs)"), "{out}");

    std::fs::write(&cfg, "epochs = 2\ncolour = blue\n").unwrap();
    let (code, _, err) = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown config key `colour`"), "{err}");
}

#[test]
fn missing_checkpoint_exits_1() {
    let (code, _, err) = run(&["eval", "--ckpt", "/nonexistent/model.nprp"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    for args in [&["frobnicate"][..], &["train", "--bogus"], &["train", "--method", "sgd"], &[]] {
        let (code, _, err) = run(args);
        assert_eq!(code, 2, "{args:?}");
        assert!(err.contains("Usage") || err.contains("--help"), "{err}");
    }
}

#[test]
fn help_exits_0() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["train", "eval", "predict", "check", "bench-mem"] {
        assert!(out.contains(sub), "{sub}");
    }
}

#[test]
fn check_passes() {
    let (code, out, _) = run(&["check"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains(", 0 failed"));
}

#[test]
fn bench_mem_reports_both_methods() {
    let (code, out, _) = run(&["bench-mem"]);
    assert_eq!(code, 0);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "method,T=2,T=10,ratio");
    assert!(rows[1].starts_with("dt,") && rows[2].starts_with("backprop,"));
}

#[test]
fn predict_rejects_wrong_image_shape_and_reads_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.nprp");
    assert_eq!(run(&["train", "--out", ckpt.to_str().unwrap()]).0, 0);
    // Blob models take 1x1 two-channel inputs; no image format carries that.
    let img = dir.path().join("x.pgm");
    std::fs::write(&img, b"P5\n1 1\n255\n\x80").unwrap();
    let (code, _, err) = run(&["predict", "--ckpt", ckpt.to_str().unwrap(), "--image", img.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("channels"), "{err}");
}
