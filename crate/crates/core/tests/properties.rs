use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use taskhedge::analytic::{bs_delta, bs_hedge_pnl};
use taskhedge::claims::Claim;
use taskhedge::evaluation::sample_variance;
use taskhedge::market_models::{
    simulate, BnsParams, HestonJumpParams, HestonParams, ModelSpec, TimeGrid,
};
use taskhedge::neural::{FeatureRow, GradScope, NetworkArch, NetworkParams, Tape};

fn heston() -> impl Strategy<Value = HestonParams> {
    (0.0..0.5f64, 0.5..5.0f64, 0.01..0.3f64, 0.0..1.0f64, -0.95..0.5f64)
        .prop_map(|(v0, kappa, eta, theta, rho)| HestonParams { v0: Some(v0), kappa, eta, theta, rho })
}

fn model() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (-0.2..0.2f64, 0.0..1.0f64).prop_map(|(mu, sigma)| ModelSpec::gbm(mu, sigma).unwrap()),
        heston().prop_map(ModelSpec::Heston),
        (heston(), 0.0..50.0f64, -0.3..0.1f64, 0.0..0.3f64).prop_map(|(heston, lambda_j, mu_j, sigma_j)| {
            ModelSpec::HestonJump(HestonJumpParams { heston, lambda_j, mu_j, sigma_j })
        }),
        (0.0..0.3f64, 0.1..5.0f64, 0.1..20.0f64, 1.0..50.0f64, -2.0..=0.0f64)
            .prop_map(|(sigma0_sq, lambda, a, b, rho)| ModelSpec::Bns(BnsParams { sigma0_sq, lambda, a, b, rho })),
    ]
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 48,
        rng_seed: RngSeed::Fixed(0x7a5c_4ed6),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn simulation_is_deterministic_and_positive(m in model(), seed in any::<u64>(), n_steps in 1usize..40) {
        let grid = TimeGrid::new(n_steps as f64 / 365.0, n_steps).unwrap();
        let a = simulate(&m, &grid, 16, 1.0, seed).unwrap();
        let b = simulate(&m, &grid, 16, 1.0, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.spot_matrix().iter().all(|&s| s > 0.0 && s.is_finite()));
        // full truncation keeps the raw Heston variance state, which may dip below zero
        if let Some(v) = a.variance_matrix() {
            prop_assert!(v.iter().all(|x| x.is_finite()));
            if let ModelSpec::Bns(_) = m {
                prop_assert!(v.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn jump_model_without_jumps_is_heston(h in heston(), mu_j in -0.3..0.1f64, sigma_j in 0.0..0.3f64, seed in any::<u64>()) {
        let grid = TimeGrid::daily(30).unwrap();
        let jump = ModelSpec::HestonJump(HestonJumpParams { heston: h, lambda_j: 0.0, mu_j, sigma_j });
        let a = simulate(&jump, &grid, 8, 1.0, seed).unwrap();
        let b = simulate(&ModelSpec::Heston(h), &grid, 8, 1.0, seed).unwrap();
        for (x, y) in a.spot_matrix().iter().zip(b.spot_matrix()) {
            prop_assert!(rel(*x, *y) < 1e-10);
        }
    }

    #[test]
    fn heston_without_vol_of_vol_is_gbm(eta in 0.001..0.5f64, kappa in 0.0..5.0f64, rho in -0.95..0.95f64, seed in any::<u64>()) {
        let grid = TimeGrid::daily(30).unwrap();
        let h = ModelSpec::Heston(HestonParams { v0: Some(eta), kappa, eta, theta: 0.0, rho });
        let a = simulate(&h, &grid, 8, 1.0, seed).unwrap();
        let b = simulate(&ModelSpec::gbm(0.0, eta.sqrt()).unwrap(), &grid, 8, 1.0, seed).unwrap();
        for (x, y) in a.spot_matrix().iter().zip(b.spot_matrix()) {
            prop_assert!(rel(*x, *y) < 1e-10, "{} vs {}", x, y);
        }
    }

    #[test]
    fn bns_without_jumps_decays_exponentially(sigma0_sq in 0.0..0.5f64, lambda in 0.1..5.0f64, seed in any::<u64>()) {
        let grid = TimeGrid::daily(60).unwrap();
        let m = ModelSpec::Bns(BnsParams { sigma0_sq, lambda, a: 1e-300, b: 10.0, rho: -0.5 });
        let set = simulate(&m, &grid, 4, 1.0, seed).unwrap();
        for p in 0..4 {
            for (k, v) in set.variance_path(p).unwrap().iter().enumerate() {
                prop_assert!((v - sigma0_sq * (-lambda * grid.time(k)).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences(
        n_tasks in 1usize..4,
        embed_dim in 1usize..3,
        hidden in prop::collection::vec(1usize..6, 1..4),
        seed in any::<u64>(),
        rows in prop::collection::vec((0usize..4, 0.7..1.4f64, 0.0..0.1f64, -1.0..1.0f64), 1..6),
    ) {
        let arch = NetworkArch::new(n_tasks, embed_dim, hidden).unwrap();
        let mut p = NetworkParams::init(&arch, seed).unwrap();
        // non-zero biases so that every tensor carries signal
        for i in 0..p.n_layers() {
            p.layer_bias_mut(i).iter_mut().enumerate().for_each(|(j, b)| *b = 0.05 * (j as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        let tasks: Vec<usize> = rows.iter().map(|r| r.0 % n_tasks).collect();
        let feats: Vec<FeatureRow> = rows.iter().map(|r| FeatureRow::new(r.1, 1.0, r.2)).collect();
        let up: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let mut tape = Tape::default();
        p.forward(&tasks, &feats, &mut tape).unwrap();
        // skip draws that put a hidden unit on the activation kink
        for i in 0..p.n_layers() - 1 {
            prop_assume!(tape.hidden_activations(i).iter().all(|a| a.abs() > 1e-4));
        }
        let mut g = p.zero_grads();
        p.backward(&tape, &up, &mut g, GradScope::All).unwrap();

        let objective = |q: &NetworkParams| {
            let mut t = Tape::default();
            q.forward(&tasks, &feats, &mut t).unwrap();
            t.output().iter().zip(&up).map(|(o, u)| o * u).sum::<f64>()
        };
        let h = 1e-6;
        let mut fd = p.zero_grads();
        for i in 0..p.as_slice().len() {
            let mut a = p.clone();
            a.as_mut_slice()[i] += h;
            let mut b = p.clone();
            b.as_mut_slice()[i] -= h;
            fd.data[i] = (objective(&a) - objective(&b)) / (2.0 * h);
        }
        let check = |x: &[f64], y: &[f64]| {
            let err = x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let scale = x.iter().map(|a| a.abs()).fold(0.0, f64::max);
            err / (scale + 1e-8)
        };
        prop_assert!(check(g.embedding(), fd.embedding()) < 1e-4);
        for i in 0..p.n_layers() {
            prop_assert!(check(g.layer_weights(i), fd.layer_weights(i)) < 1e-4, "weights {}", i);
            prop_assert!(check(g.layer_bias(i), fd.layer_bias(i)) < 1e-4, "bias {}", i);
        }
        for t in 0..n_tasks {
            if !tasks.contains(&t) {
                prop_assert!(g.embedding_row(t).iter().all(|&x| x == 0.0));
            }
        }
        let mut again = p.zero_grads();
        p.backward(&tape, &up, &mut again, GradScope::All).unwrap();
        prop_assert_eq!(again, g);
    }
}

#[test]
fn bs_hedge_matches_direct_computation() {
    let grid = TimeGrid::daily(30).unwrap();
    let paths = simulate(&ModelSpec::gbm(0.0, 0.33).unwrap(), &grid, 2000, 1.0, 77).unwrap();
    let claim = Claim::short_call(1.0).unwrap();
    let r = bs_hedge_pnl(&paths, &claim, 0.33, 0.0).unwrap();
    let dt = 30.0 / 365.0 / 30.0;
    for (p, s) in paths.paths().enumerate() {
        let mut pnl = -(s[30] - 1.0).max(0.0);
        for k in 0..30 {
            pnl += bs_delta(s[k], 1.0, 0.33, (30 - k) as f64 * dt) * (s[k + 1] - s[k]);
        }
        assert!((pnl - r.pnl[p]).abs() < 1e-12, "path {p}");
    }
}

#[test]
fn discrete_hedging_error_scales_with_rebalancing() {
    let claim = Claim::short_call(1.0).unwrap();
    let std_for = |n: usize| {
        let grid = TimeGrid::new(30.0 / 365.0, n).unwrap();
        let paths = simulate(&ModelSpec::gbm(0.0, 0.33).unwrap(), &grid, 40_000, 1.0, 5).unwrap();
        let pnl = bs_hedge_pnl(&paths, &claim, 0.33, 0.0).unwrap().pnl;
        sample_variance(&pnl).sqrt()
    };
    let (s30, s60, s120) = (std_for(30), std_for(60), std_for(120));
    for ratio in [s60 / s30, s120 / s60] {
        assert!((0.6..=0.85).contains(&ratio), "ratio {ratio}");
    }
}
