//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line.
//!
//! Two criteria depend on the host: the MNIST run needs the IDX files (set
//! `NOPROP_MNIST_DIR`, default `data/mnist` at the workspace root) and the
//! parallel speedup needs at least four cores. When the host cannot provide
//! them the line reads `FAIL` with the reason, and only the parts that can
//! be measured are asserted.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use noprop::check::{bench_mem, run_suite};
use noprop::cli;
use noprop::config::{Method, TrainConfig};
use noprop::data::{load_mnist, synth_blobs, Dataset};
use noprop::inference::euler_integrate;
use noprop::rng::RngStream;
use noprop::trainer::{
    fm_loss_with, parallel_train_dt, train, train_noprop_dt, ModelBundle, ParallelOptions, TrainHooks,
};
use noprop::{ComputeGraph, Mode, Tensor};

fn report(id: &str, passed: bool, detail: impl std::fmt::Display) -> bool {
    println!("{} criterion {id}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn blobs() -> Dataset {
    synth_blobs(100, 2, 10.0, 1.0, 1).unwrap()
}

#[test]
fn criterion_1_oracle_suite() {
    let start = Instant::now();
    let suite = run_suite();
    let took = start.elapsed();
    for r in &suite.results {
        println!("    {r}");
    }
    let failed: Vec<_> = suite.results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    let ok = suite.passed() && took < Duration::from_secs(300);
    let groups = ["grad/", "bayes/", "kl/", "schedule/", "dt/"];
    assert!(groups.iter().all(|g| !suite.group(g).is_empty()));
    assert!(report(
        "1",
        ok,
        format!("{} checks, failed {failed:?}, {:.1}s (limit 300s)", suite.results.len(), took.as_secs_f64())
    ));
}

#[test]
fn criterion_2_blobs_end_to_end() {
    let data = blobs();
    let mut all = true;
    let mut lines = Vec::new();
    for (method, need) in [
        (Method::Dt, 1.0),
        (Method::Ct, 0.95),
        (Method::Fm, 0.95),
        (Method::Backprop, 1.0),
    ] {
        let cfg = TrainConfig::toy(method);
        assert_eq!(data.len(), 200);
        if method == Method::Dt {
            assert_eq!(cfg.steps, 5);
        }
        let start = Instant::now();
        let mut b = ModelBundle::new(&cfg, &data).unwrap();
        let r = train(&mut b, &data, TrainHooks::default()).unwrap();
        let took = start.elapsed();
        let acc = r.rows.last().unwrap().train_acc.unwrap();
        let ok = acc >= need && took < Duration::from_secs(120);
        all &= ok;
        lines.push(format!("{method} {acc:.3} (need {need}) in {:.2}s", took.as_secs_f64()));
    }
    assert!(report("2", all, lines.join("; ")));
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("NOPROP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn criterion_3_mnist_desk_scale() {
    let dir = mnist_dir();
    let (train_set, test_set) = match (load_mnist(&dir, "train"), load_mnist(&dir, "test")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            report(
                "3",
                false,
                format!("MNIST not available at {} ({e}); not measurable on this host", dir.display()),
            );
            return;
        }
    };
    let run = |method| {
        let mut cfg = TrainConfig::new(method);
        cfg.steps = 10;
        cfg.epochs = 5;
        cfg.batch_size = 128;
        cfg.eval_limit = test_set.len();
        let start = Instant::now();
        let mut b = ModelBundle::new(&cfg, &train_set).unwrap();
        let hooks = TrainHooks {
            test: Some(&test_set),
            on_row: None,
        };
        let r = train(&mut b, &train_set, hooks).unwrap();
        (r.rows.last().unwrap().test_acc.unwrap(), start.elapsed())
    };
    let (dt, dt_time) = run(Method::Dt);
    let (bp, _) = run(Method::Backprop);
    let ok = dt >= 0.98 && dt_time <= Duration::from_secs(3600) && (dt - bp).abs() <= 0.01;
    assert!(report(
        "3",
        ok,
        format!("dt test acc {dt:.4} in {:.0}s, backprop {bp:.4}", dt_time.as_secs_f64())
    ));
}

#[test]
fn criterion_4_memory_property() {
    let b = bench_mem(2, 10).unwrap();
    let dt_ok = (b.dt_ratio() - 1.0).abs() <= 0.10;
    let bp_ok = b.backprop_ratio() >= 4.0;
    assert!(report(
        "4",
        dt_ok && bp_ok,
        format!(
            "dt {} -> {} (x{:.3}), backprop {} -> {} (x{:.3})",
            b.dt.0,
            b.dt.1,
            b.dt_ratio(),
            b.backprop.0,
            b.backprop.1,
            b.backprop_ratio()
        )
    ));
}

fn max_abs_diff(a: &ModelBundle, b: &ModelBundle) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.blocks.iter().zip(&b.blocks) {
        for ((k1, t1), (k2, t2)) in x.store().params().zip(y.store().params()) {
            assert_eq!(k1, k2);
            worst = worst.max(t1.max_abs_diff(t2));
        }
    }
    worst
}

#[test]
fn criterion_5_parallel_blocks() {
    let data = blobs();
    let mut cfg = TrainConfig::toy(Method::Dt);
    cfg.steps = 4;
    cfg.epochs = 10;
    let fresh = ModelBundle::new(&cfg, &data).unwrap();

    let mut seq = fresh.clone();
    let t0 = Instant::now();
    train_noprop_dt(&mut seq, &data, TrainHooks::default()).unwrap();
    let seq_time = t0.elapsed();

    let mut par = fresh;
    let opts = ParallelOptions {
        workers: 4,
        ..Default::default()
    };
    let t1 = Instant::now();
    parallel_train_dt(&mut par, &data, TrainHooks::default(), &opts).unwrap();
    let par_time = t1.elapsed();

    let diff = max_abs_diff(&seq, &par);
    let speedup = seq_time.as_secs_f64() / par_time.as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let equal = diff <= 1e-12;
    let fast = speedup >= 1.5;
    let detail = format!("max abs diff {diff:e} (tol 1e-12), speedup x{speedup:.2} with 4 workers on {cores} core(s)");
    report("5", equal && fast, if cores < 4 && !fast {
        format!("{detail}; speedup needs a 4-core host")
    } else {
        detail
    });
    assert!(equal);
    if cores >= 4 {
        assert!(fast);
    }
}

#[test]
fn criterion_6_fm_oracle_field() {
    // Euler with the straight-line field lands on z_1.
    let mut s = RngStream::new(3, &[1]);
    let z0 = Tensor::randn(&[5, 4], &mut s);
    let z1 = Tensor::randn(&[5, 4], &mut s);
    let v = z1.sub(&z0).unwrap();
    let mut euler_err: f64 = 0.0;
    for steps in [1, 10, 1000] {
        let z = euler_integrate(&z0, steps, |_, _| Ok(v.clone())).unwrap();
        euler_err = euler_err.max(z.max_abs_diff(&z1));
    }

    // The flow-matching loss of that field is zero for any z_t.
    let data = blobs();
    let cfg = TrainConfig::toy(Method::Fm);
    let b = ModelBundle::new(&cfg, &data).unwrap();
    let (x, y) = data.batch(&(0..64).collect::<Vec<_>>());
    let mut g = ComputeGraph::new(Mode::Train);
    let l = fm_loss_with(&mut g, &b, &x, &y, &mut RngStream::new(4, &[1]), |g, p, _| g.sub(p.z1, p.z0)).unwrap();
    let loss = g.value(l.loss).item().abs();

    assert!(report(
        "6",
        euler_err <= 1e-12 && loss <= 1e-12,
        format!("Euler max err {euler_err:e}, fm_loss {loss:e} (tol 1e-12)")
    ));
}

#[test]
fn criterion_7_deterministic_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut all = true;
    let mut lines = Vec::new();
    let runs: [&[&str]; 5] = [
        &["--method", "dt"],
        &["--method", "dt", "--parallel"],
        &["--method", "ct"],
        &["--method", "fm"],
        &["--method", "backprop"],
    ];
    for (i, extra) in runs.iter().enumerate() {
        let csv = |k: usize| dir.path().join(format!("run{i}_{k}.csv"));
        for k in 0..2 {
            let mut args = vec!["noprop".to_string(), "train".into(), "--dataset".into(), "blobs".into()];
            args.extend(extra.iter().map(|s| s.to_string()));
            args.extend(["--seed".into(), "1".into(), "--metrics".into(), csv(k).display().to_string()]);
            let (mut out, mut err) = (Vec::new(), Vec::new());
            let code = cli::run(args, &mut out, &mut err);
            assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
        }
        let (a, b) = (std::fs::read(csv(0)).unwrap(), std::fs::read(csv(1)).unwrap());
        let same = a == b && !a.is_empty();
        all &= same;
        lines.push(format!("{} {}", extra.join(" "), if same { "identical" } else { "differ" }));
    }
    assert!(report("7", all, lines.join("; ")));
}
