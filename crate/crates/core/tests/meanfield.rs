use gipsi::dynamics::{self, IntegratorConfig, Terminal, Trajectory};
use gipsi::experiments::mean_field_run;
use gipsi::market::{apply_shock, MarketNetwork, MarketState, ModelParams, ShockSpec};
use gipsi::meanfield::{
    self, check_equal_exponents, classify, eigenvalues, fit_dominant_exponent, reduce, FitReference,
    Regime, Variable,
};
use gipsi::Error;
use nalgebra::Matrix5;
use num_complex::Complex64;
use proptest::prelude::*;

fn unit(alpha: f64, beta: f64) -> ModelParams {
    ModelParams::unit_times(alpha, beta).unwrap()
}

/// Central-difference Jacobian of the engine in `(E, A, V, p, u)`.
fn jacobian(at: &MarketState, params: &ModelParams) -> Matrix5<f64> {
    let get = |s: &MarketState| {
        [s.equities[0], s.holdings[0], s.holdings_velocity[0], s.prices[0], s.returns[0]]
    };
    let set = |y: [f64; 5]| {
        let mut s = at.clone();
        s.equities[0] = y[0];
        s.holdings[0] = y[1];
        s.holdings_velocity[0] = y[2];
        s.prices[0] = y[3];
        s.returns[0] = y[4];
        s
    };
    let f = |y: [f64; 5]| {
        let d = dynamics::rhs(&set(y), params).unwrap();
        [d.equities[0], d.holdings[0], d.holdings_velocity[0], d.prices[0], d.returns[0]]
    };
    let y0 = get(at);
    let mut jac = Matrix5::zeros();
    for k in 0..5 {
        let h = 1e-6 * y0[k].abs().max(1.0);
        let (mut yp, mut ym) = (y0, y0);
        yp[k] += h;
        ym[k] -= h;
        let (fp, fm) = (f(yp), f(ym));
        for r in 0..5 {
            jac[(r, k)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    jac
}

fn nearest(pool: &[Complex64], target: Complex64) -> f64 {
    pool.iter().map(|c| (c - target).norm()).fold(f64::INFINITY, f64::min)
}

proptest! {
    #[test]
    fn closed_form_matches_jacobian_off_rest(
        gamma in -5.0f64..5.0,
        alpha in 0.3f64..3.0,
        tau_a in 0.1f64..10.0,
        tau_b in 0.1f64..10.0,
        f0 in -0.5f64..0.5,
    ) {
        let params = ModelParams::new(alpha, gamma / alpha, tau_a, tau_b).unwrap();
        // Linearize at the post-shock point with the velocities switched off.
        let mut at = apply_shock(&MarketNetwork::mean_field(), &ShockSpec { investor: 0, magnitude: f0 }, &params).unwrap();
        at.holdings_velocity[0] = 0.0;
        let reduced = reduce(&params, meanfield::post_shock_ap_over_e(f0)).unwrap();
        prop_assume!(reduced.discriminant().abs() > 1e-6);
        let pool: Vec<Complex64> = jacobian(&at, &params)
            .complex_eigenvalues()
            .iter()
            .map(|c| Complex64::new(c.re, c.im))
            .collect();
        let (lp, lm) = eigenvalues(&reduced);
        for lambda in [lp, lm] {
            prop_assert!(nearest(&pool, lambda) <= 1e-8 * lambda.norm().max(1.0));
        }
    }

    #[test]
    fn classification_follows_eigenvalue_signs(
        alpha in -5.0f64..5.0,
        beta in -5.0f64..5.0,
        tau_a in 0.1f64..10.0,
        tau_b in 0.1f64..10.0,
        ap_over_e in 0.5f64..2.0,
    ) {
        let label = classify(&ModelParams::new(alpha, beta, tau_a, tau_b).unwrap(), ap_over_e).unwrap();
        prop_assert_eq!(label.regime == Regime::Unstable, label.lambda_plus.re > 0.0);
        if label.regime != Regime::Unstable {
            prop_assert_eq!(label.regime == Regime::Oscillatory, label.lambda_plus.im != 0.0);
        }
        prop_assert!(label.lambda_plus.re >= label.lambda_minus.re);
    }

    #[test]
    fn transition_is_unity_without_shock(beta in -100.0f64..100.0) {
        prop_assert_eq!(meanfield::transition_gamma(0.0, beta).unwrap(), 1.0);
    }
}

#[test]
fn both_transition_curves_meet_at_unity() {
    for f0 in [1e-2, 1e-4, 1e-6, -1e-6, -1e-4, -1e-2] {
        let precise = meanfield::transition_gamma(f0, 1.5).unwrap();
        assert!((precise - 1.0).abs() < 3.0 * f0.abs());
        assert!(((1.0 + f0) - 1.0).abs() <= f0.abs() * 1.000_001);
    }
}

#[test]
fn residual_shrinks_quadratically() {
    let params = unit(0.5, 0.5);
    let max_at = |dt: f64| {
        let cfg = IntegratorConfig { dt, ..IntegratorConfig::with_horizon(20.0) };
        let traj = mean_field_run(&params, -0.1, &cfg).unwrap();
        meanfield::reduced_residual(&traj, &params).unwrap().max_abs()
    };
    let (a, b, c) = (max_at(0.002), max_at(0.001), max_at(0.0005));
    assert!(a / b > 3.5 && b / c > 3.5, "{a:e} {b:e} {c:e}");
}

#[test]
fn residual_vanishes_without_shock() {
    let params = unit(0.5, 0.5);
    let traj = mean_field_run(&params, 0.0, &IntegratorConfig::with_horizon(1.0)).unwrap();
    let series = meanfield::reduced_residual(&traj, &params).unwrap();
    assert_eq!(series.t.len(), 101 - 6);
    assert!(series.residual.iter().all(|r| *r == 0.0));
}

#[test]
fn initial_right_side_is_pure_second_term() {
    // u(0+) = 0 kills the first term; the second survives through du/dt.
    let params = unit(0.5, 0.5);
    let traj = mean_field_run(&params, -0.1, &IntegratorConfig::with_horizon(1.0)).unwrap();
    let v0 = 0.5 * 0.9f64.ln();
    let expected = -params.alpha * params.tau_b * v0 * v0;
    let got = meanfield::initial_nonlinear_term(&traj, &params).unwrap();
    assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
}

#[test]
fn residual_rejects_bad_inputs() {
    let params = unit(0.5, 0.5);
    let short = mean_field_run(&params, -0.1, &IntegratorConfig { dt: 0.01, ..IntegratorConfig::with_horizon(0.05) }).unwrap();
    assert!(matches!(meanfield::reduced_residual(&short, &params), Err(Error::InvalidTrajectory(_))));

    let net = MarketNetwork::new(2, 1, vec![1.0, 1.0], vec![1.0], vec![1.0, 1.0]).unwrap();
    let init = apply_shock(&net, &ShockSpec { investor: 0, magnitude: -0.1 }, &params).unwrap();
    let traj = dynamics::integrate(&init, &params, &IntegratorConfig::with_horizon(1.0)).unwrap();
    assert!(meanfield::reduced_residual(&traj, &params).is_err());
}

fn synthetic(price: impl Fn(f64) -> f64, equity: impl Fn(f64) -> f64, holdings: impl Fn(f64) -> f64) -> Trajectory {
    let rest = MarketState::at_rest(&MarketNetwork::mean_field());
    let samples = (0..=200)
        .map(|k| {
            let t = k as f64 * 0.05;
            let mut s = rest.clone();
            s.t = t;
            s.prices[0] = price(t);
            s.equities[0] = equity(t);
            s.holdings[0] = holdings(t);
            s
        })
        .collect();
    Trajectory { samples, events: vec![], terminal: Terminal::ReachedHorizon, horizon: 10.0 }
}

#[test]
fn fit_recovers_pure_exponential() {
    let traj = synthetic(|t| 3.0 * (0.5 * t).exp(), |_| 1.0, |_| 1.0);
    let w = fit_dominant_exponent(&traj, Variable::Price, (1.0, 9.0), FitReference::Zero).unwrap();
    assert!((w - 0.5).abs() < 1e-10);
}

#[test]
fn fit_rejects_thin_windows_and_flat_signals() {
    let traj = synthetic(|t| (0.5 * t).exp(), |_| 1.0, |_| 1.0);
    assert!(matches!(
        fit_dominant_exponent(&traj, Variable::Price, (1.0, 1.3), FitReference::Zero),
        Err(Error::IllConditioned(_))
    ));
    assert!(matches!(
        fit_dominant_exponent(&traj, Variable::Equity, (1.0, 9.0), FitReference::Initial),
        Err(Error::IllConditioned(_))
    ));
}

#[test]
fn decay_fit_matches_slow_root() {
    let params = unit(0.5, 0.5);
    let traj = mean_field_run(&params, -0.1, &IntegratorConfig::default()).unwrap();
    let w = fit_dominant_exponent(&traj, Variable::Price, (10.0, 30.0), FitReference::Final).unwrap();
    let last = traj.last();
    let ap_over_e = last.holdings[0] * last.prices[0] / last.equities[0];
    let lambda = eigenvalues(&reduce(&params, ap_over_e).unwrap()).0.re;
    assert!((w - lambda).abs() < 0.05 * lambda.abs(), "{w} vs {lambda}");
}

#[test]
fn small_shock_growth_matches_lambda_plus() {
    let params = unit(1.5, 1.5);
    let f0 = 1e-8;
    let traj = mean_field_run(&params, f0, &IntegratorConfig::with_horizon(25.0)).unwrap();
    let lambda = eigenvalues(&reduce(&params, meanfield::post_shock_ap_over_e(f0)).unwrap()).0.re;
    let w = fit_dominant_exponent(&traj, Variable::Price, (15.0, 25.0), FitReference::Initial).unwrap();
    assert!((w - lambda).abs() < 0.02 * lambda, "{w} vs {lambda}");
}

#[test]
fn linear_growth_exponents_agree() {
    for (gamma, window) in [(1.2f64, (60.0, 100.0)), (2.25, (15.0, 25.0))] {
        let root = gamma.sqrt();
        let traj = mean_field_run(&unit(root, root), 1e-8, &IntegratorConfig::with_horizon(window.1)).unwrap();
        let report = check_equal_exponents(&traj, window, FitReference::Initial).unwrap();
        assert!(report.agree, "gamma {gamma}: {report:?}");
    }
}

#[test]
fn mismatched_exponents_are_flagged() {
    let traj = synthetic(|t| (0.5 * t).exp(), |t| t.exp(), |t| (0.2 * t).exp());
    let report = check_equal_exponents(&traj, (1.0, 9.0), FitReference::Zero).unwrap();
    assert!(!report.agree);
    assert!(report.spread > meanfield::EXPONENT_SPREAD_THRESHOLD);
}

#[test]
fn cli_examples_classify_as_expected() {
    assert_eq!(meanfield::report(&unit(0.5, 0.5), 0.0).unwrap().label, Regime::StableDecay);
    let r = meanfield::report(&unit(1.5, 1.5), 0.0).unwrap();
    assert_eq!(r.label, Regime::Unstable);
    assert!(r.lambda_plus.re > 0.0);
    assert_eq!(meanfield::report(&unit(-10.0, 10.0), 0.0).unwrap().label, Regime::Oscillatory);
}
