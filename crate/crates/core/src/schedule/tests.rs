use proptest::prelude::*;

use super::*;
use crate::autodiff::{ComputeGraph, Mode};
use crate::check::oracles;
use crate::rng::RngStream;

#[test]
fn cosine_top_is_clipped_to_hi() {
    let s = DiscreteSchedule::default_cosine(10).unwrap();
    assert_eq!(s.alpha_bar(10).unwrap(), 0.999);
    assert_eq!(s.alpha_bar(0).unwrap(), 1e-4);
}

#[test]
fn cosine_is_increasing() {
    let s = DiscreteSchedule::default_cosine(10).unwrap();
    for w in s.alpha_bars().windows(2) {
        assert!(w[0] < w[1], "{:?}", s.alpha_bars());
    }
}

#[test]
fn cosine_t2_midpoint_matches_calculator() {
    // cos^2((0.5 + 0.008) / 1.008 * pi / 2) / cos^2(0.008 / 1.008 * pi / 2),
    // evaluated independently with a Python calculator.
    let s = DiscreteSchedule::default_cosine(2).unwrap();
    assert!((s.alpha_bar(1).unwrap() - 0.493_843_590_440_637_75).abs() < 1e-14);
}

#[test]
fn cosine_t10_table_matches_calculator() {
    let expected = [
        1e-4,
        0.024_091_724_140_085_854,
        0.094_045_612_676_653_79,
        0.203_121_474_118_337_6,
        0.340_809_639_759_324_1,
        0.493_843_590_440_637_75,
        0.647_478_211_146_503_8,
        0.786_910_511_150_829_2,
        0.898_705_920_599_508_9,
        0.972_092_737_113_969,
        0.999,
    ];
    let s = DiscreteSchedule::default_cosine(10).unwrap();
    for (a, b) in s.alpha_bars().iter().zip(expected) {
        assert!((a - b).abs() < 1e-13, "{a} vs {b}");
    }
}

#[test]
fn invalid_clip_is_config_error() {
    for clip in [(0.0, 0.9), (0.5, 0.5), (0.1, 1.0), (0.9, 0.1)] {
        assert!(matches!(
            DiscreteSchedule::cosine(10, 0.008, clip),
            Err(Error::Config(_))
        ));
    }
    assert!(DiscreteSchedule::cosine(0, 0.008, DEFAULT_CLIP).is_err());
}

#[test]
fn identity_step_when_no_noise_added() {
    let c = posterior_from_pair(0.6, 0.6);
    assert_eq!((c.a, c.b, c.c), (0.0, 1.0, 0.0));
}

#[test]
fn posterior_worked_example_matches_grid_oracle() {
    let c = posterior_from_pair(0.9, 0.72);
    let (a, b, v) = oracles::bayes_coefficients_grid(0.9, 0.72);
    assert!((c.a - a).abs() < 1e-3 && (c.b - b).abs() < 1e-3 && (c.c - v).abs() < 1e-3);
    assert!((c.a - 0.6776).abs() < 1e-4);
    assert!((c.b - 0.3194).abs() < 1e-4);
    assert!((c.c - 0.07143).abs() < 1e-5);
}

#[test]
fn posterior_prior_dominated_limit() {
    let (ab_t, ab_prev) = (0.5, 1e-6);
    let c = posterior_from_pair(ab_t, ab_prev);
    let alpha = ab_prev / ab_t;
    assert!((c.b - alpha.sqrt() * (1.0 - ab_t)).abs() < 1e-8);
    let (a, b, v) = oracles::bayes_coefficients_grid(ab_t, ab_prev);
    assert!((c.a - a).abs() < 1e-3 && (c.b - b).abs() < 1e-3 && (c.c - v).abs() < 1e-3);
}

#[test]
fn posterior_out_of_range() {
    let s = DiscreteSchedule::default_cosine(4).unwrap();
    assert!(matches!(s.posterior_coefficients(0), Err(Error::Range { .. })));
    assert!(matches!(s.posterior_coefficients(5), Err(Error::Range { .. })));
    assert!(s.posterior_coefficients(4).is_ok());
    assert!(s.snr(5).is_err());
}

#[test]
fn posterior_matches_grid_on_random_pairs() {
    let mut s = RngStream::new(3, &[1]);
    for _ in 0..10 {
        let x = 0.001 + 0.998 * s.uniform();
        let y = 0.001 + 0.998 * s.uniform();
        let (ab_t, ab_prev) = (x.max(y), x.min(y));
        let c = posterior_from_pair(ab_t, ab_prev);
        let (a, b, v) = oracles::bayes_coefficients_grid(ab_t, ab_prev);
        assert!(
            (c.a - a).abs() < 1e-3 && (c.b - b).abs() < 1e-3 && (c.c - v).abs() < 1e-3,
            "{ab_t} {ab_prev}: {c:?} vs {a} {b} {v}"
        );
    }
}

#[test]
fn snr_arithmetic() {
    assert_eq!(snr_of(0.5), 1.0);
    assert!((snr_of(0.9) - 9.0).abs() < 1e-12);
}

#[test]
fn snr_diff_telescopes() {
    let s = DiscreteSchedule::default_cosine(10).unwrap();
    let total: f64 = (1..=10).map(|t| s.snr_diff(t).unwrap()).sum();
    let direct = s.snr(10).unwrap() - s.snr(0).unwrap();
    assert!((total - direct).abs() < 1e-10);
    assert!((1..=10).all(|t| s.snr_diff(t).unwrap() >= 0.0));
}

#[test]
fn snr_diff_equals_kl_weight() {
    // a_t^2 / c_t is the weight of |u_hat - u|^2 in the per-step KL.
    let s = DiscreteSchedule::default_cosine(10).unwrap();
    for t in 1..=10 {
        let c = s.posterior_coefficients(t).unwrap();
        let w = c.a * c.a / c.c;
        let d = s.snr_diff(t).unwrap();
        assert!((w - d).abs() < 1e-9 * d.max(1.0), "{t}: {w} vs {d}");
    }
}

#[test]
fn marginal_sample_near_clean_when_alpha_bar_high() {
    let u = Tensor::vector(vec![1.0, -2.0, 0.5]);
    let mut s = RngStream::new(1, &[2]);
    let mut probe = s.clone();
    let z = sample_q_marginal(&u, 0.999, &mut s).unwrap();
    for (i, (zv, uv)) in z.data().iter().zip(u.data()).enumerate() {
        let eps = probe.normal();
        let bound = (1.0 - 0.999f64).sqrt() * eps.abs() + (1.0 - 0.999f64.sqrt()) * uv.abs();
        assert!((zv - uv).abs() <= bound + 1e-15, "coord {i}");
    }
    assert!(sample_q_marginal(&u, 1.0, &mut s).is_err());
}

#[test]
fn marginal_sample_moments() {
    let n = 100_000;
    let u = Tensor::matrix(n, 2, [2.0, 0.0].repeat(n)).unwrap();
    let mut s = RngStream::new(2, &[3]);
    let z = sample_q_marginal(&u, 0.25, &mut s).unwrap();
    for (j, target) in [1.0, 0.0].into_iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|r| z.row(r)[j]).collect();
        let (m, v) = oracles::moments(&col);
        let sd = 0.75f64.sqrt();
        assert!((m - target).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {m}");
        // Var of the sample variance of a Gaussian: 2 sigma^4 / n.
        assert!((v - 0.75).abs() < 4.0 * (2.0 * 0.75f64.powi(2) / n as f64).sqrt(), "var {v}");
    }
}

#[test]
fn kernel_composition_reproduces_marginal() {
    // z_s ~ q(z_s|y), then z_t ~ N(sqrt(ab_t/ab_s) z_s, 1 - ab_t/ab_s) for t < s.
    let (ab_s, ab_t, u): (f64, f64, f64) = (0.8, 0.3, 1.5);
    let n = 100_000;
    let mut s = RngStream::new(4, &[1]);
    let k = ab_t / ab_s;
    let zs: Vec<f64> = (0..n)
        .map(|_| {
            let z_s = ab_s.sqrt() * u + (1.0 - ab_s).sqrt() * s.normal();
            k.sqrt() * z_s + (1.0 - k).sqrt() * s.normal()
        })
        .collect();
    let (m, v) = oracles::moments(&zs);
    let sd = (1.0 - ab_t).sqrt();
    assert!((m - ab_t.sqrt() * u).abs() < 3.0 * sd / (n as f64).sqrt());
    assert!((v - (1.0 - ab_t)).abs() < 4.0 * (2.0 * (1.0 - ab_t).powi(2) / n as f64).sqrt());
}

#[test]
fn kl_closed_form_examples() {
    assert_eq!(gaussian_kl_to_standard(&[3.0, -1.0], 0.0).unwrap(), 0.0);
    let kl = gaussian_kl_to_standard(&[1.0, 0.0], 0.5).unwrap();
    assert!((kl - 0.443_147_180_559_945_3).abs() < 1e-12);
    let mut s = RngStream::new(5, &[1]);
    let mc = oracles::monte_carlo_kl(&[1.0, 0.0], 0.5, 1_000_000, &mut s);
    assert!((mc - kl).abs() < 0.01 * kl, "{mc} vs {kl}");
}

#[test]
fn kl_is_nonnegative() {
    let mut s = RngStream::new(6, &[1]);
    for _ in 0..1000 {
        let ab = s.uniform() * 0.999;
        let d = 1 + s.below(8);
        let u: Vec<f64> = (0..d).map(|_| 3.0 * s.normal()).collect();
        assert!(gaussian_kl_to_standard(&u, ab).unwrap() >= -1e-12);
    }
}

#[test]
fn gamma_endpoints_and_monotone_snr() {
    let mut s = RngStream::new(7, &[1]);
    let g = TrainableGamma::new(8, &mut s).unwrap();
    assert_eq!(g.gamma_bar(0.0), 0.0);
    assert!((g.gamma_bar(1.0) - 1.0).abs() < 1e-15);
    assert!((g.gamma(0.0) - 7.0).abs() < 1e-12);
    assert!((g.gamma(1.0) + 7.0).abs() < 1e-12);
    let (s0, s1) = (g.eval(0.0).snr, g.eval(1.0).snr);
    assert!(s1 > s0);
    assert!((s1 - 7f64.exp()).abs() < 1e-9 && (s0 - (-7f64).exp()).abs() < 1e-15);
    assert!((g.eval(0.0).alpha_bar - 9.110_511_944_006_454e-4).abs() < 1e-12);
}

#[test]
fn gamma_prime_matches_central_differences() {
    let mut s = RngStream::new(8, &[1]);
    let g = TrainableGamma::new(8, &mut s).unwrap();
    for i in 1..=9 {
        let t = i as f64 / 10.0;
        let fd = oracles::central_difference(|x| g.gamma(x), t, 1e-5);
        let an = g.gamma_prime(t);
        assert!((an - fd).abs() / an.abs().max(1e-12) < 1e-6, "t={t}: {an} vs {fd}");
        assert!(g.snr_prime(t) >= 0.0);
    }
}

#[test]
fn gamma_graph_nodes_agree_with_direct_eval_and_fd() {
    let mut s = RngStream::new(9, &[1]);
    let gamma = TrainableGamma::new(5, &mut s).unwrap();
    let times = [0.05, 0.4, 0.77];
    let mut g = ComputeGraph::new(Mode::Train);
    let nodes = gamma.graph_nodes(&mut g, &times).unwrap();
    for (i, &t) in times.iter().enumerate() {
        assert!((g.value(nodes.gamma).data()[i] - gamma.gamma(t)).abs() < 1e-12);
        assert!((g.value(nodes.gamma_prime).data()[i] - gamma.gamma_prime(t)).abs() < 1e-10);
    }
    assert_eq!(g.value(nodes.gamma_at_0).item(), gamma.gamma(0.0));

    let params: crate::gradcheck::ParamValues =
        gamma.store().params().map(|(k, v)| (k.clone(), v.clone())).collect();
    let report = crate::gradcheck::grad_check(
        &params,
        Mode::Train,
        |g, p| {
            let mut store = crate::optim::ParamStore::new();
            for (k, v) in p {
                store.insert(k, v.clone())?;
            }
            let gm = TrainableGamma::from_store(store)?;
            let n = gm.graph_nodes(g, &times)?;
            let a = g.sum(n.gamma)?;
            let b = g.sum(n.gamma_prime)?;
            let b = g.scale(b, 0.3)?;
            g.add(a, b)
        },
        1e-5,
    );
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gamma_alpha_bar_snr_consistent() {
    let mut s = RngStream::new(10, &[1]);
    let g = TrainableGamma::new(8, &mut s).unwrap();
    for i in 0..=100 {
        let p = g.eval(i as f64 / 100.0);
        assert!((p.snr - snr_of(p.alpha_bar)).abs() < 1e-12 * p.snr.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gamma_strictly_decreasing_for_random_nets(seed in 0u64..10_000, hidden in 1usize..12,
                                                 g0 in -10.0f64..0.0, gap in 0.5f64..15.0) {
        let mut s = RngStream::new(seed, &[2]);
        let mut g = TrainableGamma::with_endpoints(hidden, g0, g0 + gap, &mut s).unwrap();
        // Randomize the raw weights beyond the default spread.
        for name in [gamma::W1, gamma::B1, gamma::W2] {
            let p = g.store_mut().get_mut(name).unwrap();
            for v in p.data_mut() {
                *v = 2.0 * s.normal();
            }
        }
        let mut prev = g.gamma(0.0);
        for i in 1..1000 {
            let cur = g.gamma(i as f64 / 999.0);
            prop_assert!(cur < prev, "i={} {} !< {}", i, cur, prev);
            prev = cur;
        }
    }
}
