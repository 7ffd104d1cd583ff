use proptest::prelude::*;

use super::*;
use crate::gradcheck::{grad_check, ParamValues};
use crate::rng::RngStream;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], s: &mut RngStream) -> Tensor {
    Tensor::randn(shape, s)
}

/// Reduces an arbitrary output to a scalar with fixed random weights, so the
/// upstream gradient is generic.
fn project(g: &mut ComputeGraph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut s = RngStream::new(seed, &[99]);
    let w = Tensor::randn(g.value(out).shape(), &mut s);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check_prim(
    params: ParamValues,
    mode: Mode,
    build: impl Fn(&mut ComputeGraph, &ParamValues) -> Result<NodeId>,
) {
    let report = grad_check(
        &params,
        mode,
        |g, p| {
            let out = build(g, p)?;
            project(g, out, 5)
        },
        1e-5,
    );
    assert!(report.passed(), "{report:?}");
}

fn pv(items: &[(&str, Tensor)]) -> ParamValues {
    items.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn linear_identity_passes_input_through() {
    let mut g = ComputeGraph::new(Mode::Eval);
    let x = g.constant(t(&[1, 3], &[1., 2., 3.]));
    let w = g.constant(Tensor::eye(3));
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3.]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = ComputeGraph::new(Mode::Eval);
    let x = g.constant(t(&[2], &[0., 0.]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn conv_all_ones_gives_nine() {
    let mut g = ComputeGraph::new(Mode::Eval);
    let x = g.constant(Tensor::ones(&[1, 3, 3, 1]));
    let w = g.constant(Tensor::ones(&[3, 3, 1, 1]));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn grad_of_sum_of_squares() {
    let mut g = ComputeGraph::new(Mode::Train);
    let w = g.param("w", &Tensor::scalar(3.0));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads["w"].data(), &[6.0]);
}

#[test]
fn cross_entropy_grad_matches_fd_oracle() {
    // Central differences at h = 1e-6 of -log softmax(z)[0] around z = (0, 0).
    let f = |z0: f64, z1: f64| -(z0 - (z0.exp() + z1.exp()).ln());
    let h = 1e-6;
    let fd = [
        (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h),
        (f(0.0, h) - f(0.0, -h)) / (2.0 * h),
    ];
    assert!((fd[0] + 0.5).abs() < 1e-9 && (fd[1] - 0.5).abs() < 1e-9);

    let mut g = ComputeGraph::new(Mode::Train);
    let z = g.param("z", &t(&[2], &[0., 0.]));
    let loss = g.cross_entropy(z, &[0]).unwrap();
    let grads = g.backward(loss).unwrap();
    let got = grads["z"].data();
    assert!((got[0] - fd[0]).abs() < 1e-9 && (got[1] - fd[1]).abs() < 1e-9);
    assert_eq!(got, &[-0.5, 0.5]);
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut g = ComputeGraph::new(Mode::Train);
    let w = g.param("w", &t(&[2], &[1., 2.]));
    assert!(matches!(g.backward(w), Err(Error::Contract(_))));
}

#[test]
fn constants_get_no_gradient() {
    let mut g = ComputeGraph::new(Mode::Train);
    let w = g.param("w", &Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(5.0));
    let p = g.mul(w, c).unwrap();
    let grads = g.backward(p).unwrap();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads["w"].item(), 5.0);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = ComputeGraph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    match g.linear(x, w, None) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn unknown_tag_is_unsupported() {
    assert!(matches!(
        Primitive::from_name("fft"),
        Err(Error::UnsupportedOp(_))
    ));
    assert_eq!(Primitive::from_name("relu").unwrap(), Primitive::Relu);
}

#[test]
fn dropout_through_apply_is_rejected() {
    let mut g = ComputeGraph::new(Mode::Train);
    let x = g.constant(Tensor::ones(&[2]));
    assert!(g.apply(Primitive::Dropout { keep_prob: 0.5 }, &[x]).is_err());
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = ComputeGraph::new(Mode::Eval);
    let x = g.constant(Tensor::scalar(1000.0));
    assert!(matches!(g.exp(x), Err(Error::NonFinite("exp"))));
}

#[test]
fn shared_param_accumulates() {
    let mut g = ComputeGraph::new(Mode::Train);
    let a = g.param("w", &Tensor::scalar(2.0));
    let b = g.param("w", &Tensor::scalar(2.0));
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    let q = g.add(p, a).unwrap();
    let grads = g.backward(q).unwrap();
    assert_eq!(grads["w"].item(), 5.0);
}

// ---- finite-difference checks, one per primitive ----

#[test]
fn fd_linear() {
    let mut s = RngStream::new(1, &[1]);
    let params = pv(&[
        ("x", rand_t(&[3, 4], &mut s)),
        ("w", rand_t(&[4, 2], &mut s)),
        ("b", rand_t(&[2], &mut s)),
    ]);
    check_prim(params, Mode::Train, |g, p| {
        let x = g.param("x", &p["x"]);
        let w = g.param("w", &p["w"]);
        let b = g.param("b", &p["b"]);
        g.linear(x, w, Some(b))
    });
}

#[test]
fn fd_conv2d_stride_and_pad() {
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let mut s = RngStream::new(2, &[stride as u64, pad as u64]);
        let params = pv(&[
            ("x", rand_t(&[2, 4, 4, 2], &mut s)),
            ("w", rand_t(&[3, 3, 2, 3], &mut s)),
            ("b", rand_t(&[3], &mut s)),
        ]);
        check_prim(params, Mode::Train, move |g, p| {
            let x = g.param("x", &p["x"]);
            let w = g.param("w", &p["w"]);
            let b = g.param("b", &p["b"]);
            g.conv2d(x, w, b, stride, pad)
        });
    }
}

#[test]
fn fd_max_pool() {
    let mut s = RngStream::new(3, &[1]);
    let params = pv(&[("x", rand_t(&[2, 4, 4, 2], &mut s))]);
    check_prim(params, Mode::Train, |g, p| {
        let x = g.param("x", &p["x"]);
        g.max_pool2d(x, 2)
    });
}

#[test]
fn fd_unary_family() {
    let mut s = RngStream::new(4, &[1]);
    let x = rand_t(&[3, 4], &mut s);
    let pos = x.map(|v| v.abs() + 0.5);
    for prim in [
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Tanh,
        Primitive::Softplus,
        Primitive::Exp,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::ScalarMul(-1.7),
        Primitive::ScalarAdd(0.3),
        Primitive::SquaredL2,
        Primitive::Transpose,
        Primitive::Reshape { shape: vec![2, 6] },
        Primitive::Sum { axis: None },
        Primitive::Sum { axis: Some(0) },
        Primitive::Mean { axis: None },
        Primitive::Mean { axis: Some(1) },
    ] {
        let params = pv(&[("x", x.clone())]);
        check_prim(params, Mode::Train, move |g, p| {
            let x = g.param("x", &p["x"]);
            g.apply(prim.clone(), &[x])
        });
    }
    for prim in [Primitive::Log, Primitive::Sqrt] {
        let params = pv(&[("x", pos.clone())]);
        check_prim(params, Mode::Train, move |g, p| {
            let x = g.param("x", &p["x"]);
            g.apply(prim.clone(), &[x])
        });
    }
}

#[test]
fn fd_binary_with_broadcast() {
    let mut s = RngStream::new(5, &[1]);
    let shapes: [(&[usize], &[usize]); 4] = [
        (&[3, 4], &[3, 4]),
        (&[3, 4], &[4]),
        (&[2, 3, 4], &[1]),
        (&[1], &[2, 2]),
    ];
    for (sa, sb) in shapes {
        for prim in [Primitive::Add, Primitive::Sub, Primitive::Mul, Primitive::Div] {
            let a = rand_t(sa, &mut s);
            let b = rand_t(sb, &mut s).map(|v| v.signum() * (v.abs() + 0.5));
            let params = pv(&[("a", a), ("b", b)]);
            check_prim(params, Mode::Train, move |g, p| {
                let a = g.param("a", &p["a"]);
                let b = g.param("b", &p["b"]);
                g.apply(prim.clone(), &[a, b])
            });
        }
    }
}

#[test]
fn fd_concat() {
    let mut s = RngStream::new(6, &[1]);
    for axis in 0..2 {
        let (sa, sb): (&[usize], &[usize]) = if axis == 0 { (&[2, 3], &[1, 3]) } else { (&[2, 3], &[2, 1]) };
        let params = pv(&[("a", rand_t(sa, &mut s)), ("b", rand_t(sb, &mut s))]);
        check_prim(params, Mode::Train, move |g, p| {
            let a = g.param("a", &p["a"]);
            let b = g.param("b", &p["b"]);
            g.concat(&[a, b], axis)
        });
    }
}

#[test]
fn fd_batchnorm_both_modes() {
    let mut s = RngStream::new(7, &[1]);
    for mode in [Mode::Train, Mode::Eval] {
        let params = pv(&[
            ("x", rand_t(&[4, 3], &mut s)),
            ("gamma", rand_t(&[3], &mut s)),
            ("beta", rand_t(&[3], &mut s)),
        ]);
        let rm = rand_t(&[3], &mut s);
        let rv = rand_t(&[3], &mut s).map(|v| v.abs() + 0.5);
        check_prim(params, mode, move |g, p| {
            let x = g.param("x", &p["x"]);
            let ga = g.param("gamma", &p["gamma"]);
            let be = g.param("beta", &p["beta"]);
            let rm = g.constant(rm.clone());
            let rv = g.constant(rv.clone());
            g.apply(Primitive::BatchNorm { eps: 1e-5 }, &[x, ga, be, rm, rv])
        });
    }
}

#[test]
fn fd_cross_entropy_and_time_embedding() {
    let mut s = RngStream::new(8, &[1]);
    let params = pv(&[("z", rand_t(&[3, 4], &mut s))]);
    check_prim(params, Mode::Train, |g, p| {
        let z = g.param("z", &p["z"]);
        g.cross_entropy(z, &[0, 3, 1])
    });
    let params = pv(&[("t", t(&[3, 1], &[0.1, 0.5, 0.9]))]);
    check_prim(params, Mode::Train, |g, p| {
        let tt = g.param("t", &p["t"]);
        g.time_embedding(tt, 8, 3.0)
    });
}

#[test]
fn fd_dropout_fixed_mask() {
    let mut s = RngStream::new(9, &[1]);
    let params = pv(&[("x", rand_t(&[3, 4], &mut s))]);
    check_prim(params, Mode::Train, |g, p| {
        let x = g.param("x", &p["x"]);
        // Same stream on every evaluation, so the mask is fixed.
        let mut stream = RngStream::new(1, &[2]);
        g.dropout(x, 0.7, &mut stream)
    });
}

#[test]
fn dropout_eval_is_identity() {
    let mut g = ComputeGraph::new(Mode::Eval);
    let x = g.constant(t(&[3], &[1., 2., 3.]));
    let mut stream = RngStream::new(0, &[0]);
    let y = g.dropout(x, 0.2, &mut stream).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3.]);
}

#[test]
fn batchnorm_train_normalizes_and_eval_is_affine() {
    let mut s = RngStream::new(10, &[1]);
    let x = rand_t(&[16, 3], &mut s).map(|v| 3.0 * v + 2.0);
    let mut g = ComputeGraph::new(Mode::Train);
    let xn = g.constant(x.clone());
    let ga = g.constant(Tensor::ones(&[3]));
    let be = g.constant(Tensor::zeros(&[3]));
    let rm = g.constant(Tensor::zeros(&[3]));
    let rv = g.constant(Tensor::ones(&[3]));
    let y = g
        .apply(Primitive::BatchNorm { eps: 1e-12 }, &[xn, ga, be, rm, rv])
        .unwrap();
    let yv = g.value(y);
    for j in 0..3 {
        let col: Vec<f64> = (0..16).map(|r| yv.data()[r * 3 + j]).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }
    let (mean, var) = g.batch_stats(y).unwrap();
    assert_eq!(mean.numel(), 3);
    assert!(var.data().iter().all(|&v| v > 0.0));

    // Eval mode: y = gamma (x - m) / sqrt(v + eps) + beta exactly.
    let mut g = ComputeGraph::new(Mode::Eval);
    let xn = g.constant(x.clone());
    let ga = g.constant(t(&[3], &[2., 1., 0.5]));
    let be = g.constant(t(&[3], &[0., 1., -1.]));
    let rm = g.constant(t(&[3], &[1., 2., 3.]));
    let rv = g.constant(t(&[3], &[4., 1., 0.25]));
    let y = g
        .apply(Primitive::BatchNorm { eps: 0.0 }, &[xn, ga, be, rm, rv])
        .unwrap();
    let yv = g.value(y).clone();
    for r in 0..16 {
        let xr = x.row(r);
        let exp = [
            2.0 * (xr[0] - 1.0) / 2.0,
            (xr[1] - 2.0) + 1.0,
            0.5 * (xr[2] - 3.0) / 0.5 - 1.0,
        ];
        for j in 0..3 {
            assert!((yv.row(r)[j] - exp[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn recorded_values_are_never_mutated() {
    let mut g = ComputeGraph::new(Mode::Train);
    let w = g.param("w", &t(&[2, 2], &[1., -2., 3., 4.]));
    let r = g.relu(w).unwrap();
    let snapshot: Vec<Tensor> = (0..g.len()).map(|i| g.nodes[i].value.clone()).collect();
    let s = g.sum(r).unwrap();
    let m = g.scale(s, 2.0).unwrap();
    g.backward(m).unwrap();
    for (i, v) in snapshot.iter().enumerate() {
        assert_eq!(&g.nodes[i].value, v);
    }
}

fn rand_shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=4, 1usize..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_are_distributions((r, c) in rand_shape(), seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut s = RngStream::new(seed, &[11]);
        let x = rand_t(&[r, c], &mut s).scale(scale);
        let mut g = ComputeGraph::new(Mode::Eval);
        let xn = g.constant(x);
        let y = g.softmax(xn).unwrap();
        let yv = g.value(y);
        for i in 0..r {
            let row = yv.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn random_mlp_composition_matches_fd((r, c) in rand_shape(), h in 1usize..=4, seed in 0u64..1000) {
        let mut s = RngStream::new(seed, &[12]);
        let params = pv(&[
            ("x", rand_t(&[r, c], &mut s)),
            ("w1", rand_t(&[c, h], &mut s)),
            ("b1", rand_t(&[h], &mut s)),
            ("w2", rand_t(&[h, 3], &mut s)),
        ]);
        let labels: Vec<usize> = (0..r).map(|i| i % 3).collect();
        let report = grad_check(&params, Mode::Train, |g, p| {
            let x = g.param("x", &p["x"]);
            let w1 = g.param("w1", &p["w1"]);
            let b1 = g.param("b1", &p["b1"]);
            let w2 = g.param("w2", &p["w2"]);
            let h = g.linear(x, w1, Some(b1))?;
            let h = g.tanh(h)?;
            let z = g.linear(h, w2, None)?;
            let ce = g.cross_entropy(z, &labels)?;
            g.mean(ce)
        }, 1e-5);
        prop_assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn optimizer_zero_grad_zero_decay_identity(v in -10.0f64..10.0, lr in 1e-4f64..1.0) {
        let mut store = crate::optim::ParamStore::new();
        store.insert("w", Tensor::vector(vec![v, -v])).unwrap();
        let grads = GradMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        store.step(&grads, &crate::optim::OptimizerConfig::adamw(lr, 0.0)).unwrap();
        prop_assert_eq!(store.get("w").unwrap().data(), &[v, -v]);
    }
}
