//! Closed-form analytics of the one investor, one asset reduction.
//!
//! Eliminating `A` and `E` from the 1x1 equations leaves a damped oscillator
//! for the return `u = dp/dt`,
//!
//! ```text
//! [tau d^2/dt^2 + d/dt + omega^2] u = N(u, du/dt) / (tau_A + tau_B)
//! 1/tau = 1/tau_A + 1/tau_B,   omega^2 = (1 - gamma A p / E) / (tau_A + tau_B)
//! ```
//!
//! whose exponential modes `lambda_+-` decide the phase.

use num_complex::Complex64;
use serde::Serialize;

use crate::dynamics::{self, Terminal, Trajectory};
use crate::error::{Error, Result};
use crate::market::{MarketState, ModelParams};

/// Spread above which fitted exponents are considered unequal.
pub const EXPONENT_SPREAD_THRESHOLD: f64 = 0.05;

/// Minimum number of samples inside a fit window.
pub const MIN_FIT_SAMPLES: usize = 10;

/// Smallest `|X - X_ref|` accepted by the log-linear fit.
pub const MIN_FIT_SIGNAL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedParams {
    pub tau: f64,
    pub omega_sq: f64,
    pub ap_over_e: f64,
}

pub fn reduce(params: &ModelParams, ap_over_e: f64) -> Result<ReducedParams> {
    params.validate()?;
    if !(ap_over_e.is_finite() && ap_over_e > 0.0) {
        return Err(Error::param("ap_over_e", format!("must be > 0 (got {ap_over_e})")));
    }
    let (ta, tb) = (params.tau_a, params.tau_b);
    Ok(ReducedParams {
        tau: ta * tb / (ta + tb),
        omega_sq: (1.0 - params.gamma() * ap_over_e) / (ta + tb),
        ap_over_e,
    })
}

/// `A p / E` right after a shock of size `f0` to the rescaled 1x1 system:
/// `A = p = 1`, `E = 1 + f0`.
pub fn post_shock_ap_over_e(f0: f64) -> f64 {
    1.0 / (1.0 + f0)
}

impl ReducedParams {
    /// `1 - 4 tau omega^2`; negative means a complex pair.
    pub fn discriminant(&self) -> f64 {
        1.0 - 4.0 * self.tau * self.omega_sq
    }
}

/// Roots `(-1 +- sqrt(1 - 4 tau omega^2)) / (2 tau)`, larger real part first.
pub fn eigenvalues(reduced: &ReducedParams) -> (Complex64, Complex64) {
    let disc = reduced.discriminant();
    let two_tau = 2.0 * reduced.tau;
    if disc >= 0.0 {
        let root = disc.sqrt();
        (
            Complex64::new((-1.0 + root) / two_tau, 0.0),
            Complex64::new((-1.0 - root) / two_tau, 0.0),
        )
    } else {
        let im = (-disc).sqrt() / two_tau;
        let re = -1.0 / two_tau;
        (Complex64::new(re, im), Complex64::new(re, -im))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    Oscillatory,
    StableDecay,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseLabel {
    pub regime: Regime,
    /// `omega^2 == 0` or a vanishing discriminant: the boundary itself.
    pub marginal: bool,
    pub lambda_plus: Complex64,
    pub lambda_minus: Complex64,
}

pub fn classify(params: &ModelParams, ap_over_e: f64) -> Result<PhaseLabel> {
    let reduced = reduce(params, ap_over_e)?;
    Ok(classify_reduced(&reduced))
}

pub fn classify_reduced(reduced: &ReducedParams) -> PhaseLabel {
    let (lambda_plus, lambda_minus) = eigenvalues(reduced);
    let disc = reduced.discriminant();
    let regime = if reduced.omega_sq < 0.0 {
        Regime::Unstable
    } else if disc < 0.0 {
        Regime::Oscillatory
    } else {
        Regime::StableDecay
    };
    PhaseLabel {
        regime,
        marginal: reduced.omega_sq == 0.0 || disc == 0.0,
        lambda_plus,
        lambda_minus,
    }
}

/// Finite-shock transition `gamma* = (1 + f0) / (1 - beta f0)`.
pub fn transition_gamma(f0: f64, beta: f64) -> Result<f64> {
    if !(f0.is_finite() && f0 > -1.0) {
        return Err(Error::param("f0", format!("must be > -1 (got {f0})")));
    }
    let denom = 1.0 - beta * f0;
    if denom == 0.0 {
        return Err(Error::Degenerate(format!(
            "1 - beta*f0 vanishes for beta={beta}, f0={f0}"
        )));
    }
    Ok((1.0 + f0) / denom)
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexJson {
    pub re: f64,
    pub im: f64,
}

impl From<Complex64> for ComplexJson {
    fn from(c: Complex64) -> Self {
        ComplexJson { re: c.re, im: c.im }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanfieldReport {
    pub tau: f64,
    pub omega_sq: f64,
    pub lambda_plus: ComplexJson,
    pub lambda_minus: ComplexJson,
    pub label: Regime,
    pub marginal: bool,
    pub gamma: f64,
    pub gamma_star: Option<f64>,
    pub ap_over_e: f64,
}

/// Full report for a shock `f0` applied to the rescaled 1x1 system.
pub fn report(params: &ModelParams, f0: f64) -> Result<MeanfieldReport> {
    if !(f0.is_finite() && f0 > -1.0) {
        return Err(Error::param("f0", format!("must be > -1 (got {f0})")));
    }
    let ap_over_e = post_shock_ap_over_e(f0);
    let reduced = reduce(params, ap_over_e)?;
    let label = classify_reduced(&reduced);
    let gamma_star = match transition_gamma(f0, params.beta) {
        Ok(g) => Some(g),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MeanfieldReport {
        tau: reduced.tau,
        omega_sq: reduced.omega_sq,
        lambda_plus: label.lambda_plus.into(),
        lambda_minus: label.lambda_minus.into(),
        label: label.regime,
        marginal: label.marginal,
        gamma: params.gamma(),
        gamma_star,
        ap_over_e,
    })
}

/// Nonlinear right side of the reduced return equation,
/// `tau_B q u / p - (tau_B / alpha) q^2 / p` with `q = u + tau_A du/dt`.
///
/// With `alpha = 0` the price equation forces `q = 0`, so the second term
/// is taken as zero.
pub fn nonlinear_terms(params: &ModelParams, p: f64, u: f64, q: f64) -> f64 {
    let first = params.tau_b * q * u / p;
    if params.alpha == 0.0 {
        first
    } else {
        first - params.tau_b / params.alpha * q * q / p
    }
}

/// The reduced equation's nonlinear right side at the first sample, using
/// the engine's exact `du/dt`.
pub fn initial_nonlinear_term(traj: &Trajectory, params: &ModelParams) -> Result<f64> {
    let first = single_pair(traj.first())?;
    let d = dynamics::rhs(first, params)?;
    let (p, u) = (first.prices[0], first.returns[0]);
    Ok(nonlinear_terms(params, p, u, u + params.tau_a * d.returns[0]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub t: Vec<f64>,
    /// Left side minus right side of the reduced return equation.
    pub residual: Vec<f64>,
    /// The right side alone.
    pub nonlinear: Vec<f64>,
}

impl ResidualSeries {
    pub fn max_abs(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

fn single_pair(s: &MarketState) -> Result<&MarketState> {
    if s.n_investors != 1 || s.n_assets != 1 {
        return Err(Error::InvalidTrajectory(format!(
            "reduced equation needs a 1x1 system, got {}x{}",
            s.n_investors, s.n_assets
        )));
    }
    Ok(s)
}

/// Samples on the uniform output grid (a diverged run's last sample is not).
fn grid_samples(traj: &Trajectory) -> &[MarketState] {
    match traj.terminal {
        Terminal::Diverged => &traj.samples[..traj.samples.len() - 1],
        _ => &traj.samples,
    }
}

/// Pointwise residual of the reduced third-order return equation along a
/// 1x1 trajectory.
///
/// `dp/dt` is the sampled return; the second and third derivatives of `p`
/// come from central differences of the returns. Three samples are dropped
/// at each end, as are samples where the price is floored or the investor
/// is dead.
pub fn reduced_residual(traj: &Trajectory, params: &ModelParams) -> Result<ResidualSeries> {
    single_pair(traj.first())?;
    let samples = grid_samples(traj);
    if samples.len() < 7 {
        return Err(Error::InvalidTrajectory(format!(
            "need at least 7 samples, got {}",
            samples.len()
        )));
    }
    let h = samples[1].t - samples[0].t;
    if samples
        .windows(2)
        .any(|w| ((w[1].t - w[0].t) - h).abs() > 1e-9 * h.max(1.0))
    {
        return Err(Error::InvalidTrajectory("samples are not uniformly spaced".into()));
    }

    let (ta, tb) = (params.tau_a, params.tau_b);
    let mut out = ResidualSeries {
        t: Vec::new(),
        residual: Vec::new(),
        nonlinear: Vec::new(),
    };
    for i in 3..samples.len() - 3 {
        let s = &samples[i];
        let (p, e, a) = (s.prices[0], s.equities[0], s.holdings[0]);
        if p == 0.0 || e == 0.0 || !s.alive[0] {
            continue;
        }
        let (um, u, up) = (samples[i - 1].returns[0], s.returns[0], samples[i + 1].returns[0]);
        let d2 = (up - um) / (2.0 * h);
        let d3 = (up - 2.0 * u + um) / (h * h);
        let lhs = ta * tb * d3 + (ta + tb) * d2 + (1.0 - params.gamma() * a * p / e) * u;
        let rhs = nonlinear_terms(params, p, u, u + ta * d2);
        out.t.push(s.t);
        out.residual.push(lhs - rhs);
        out.nonlinear.push(rhs);
    }
    Ok(out)
}

/// Which aggregate quantity to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variable {
    /// Sum of prices.
    Price,
    /// Sum of equities.
    Equity,
    /// Sum of all holdings.
    Holdings,
}

impl Variable {
    fn value(&self, s: &MarketState) -> f64 {
        match self {
            Variable::Price => s.prices.iter().sum(),
            Variable::Equity => s.equities.iter().sum(),
            Variable::Holdings => s.holdings.iter().sum(),
        }
    }
}

/// Baseline subtracted before taking the logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitReference {
    /// `X_ref = 0`: growth of the variable itself.
    Zero,
    /// `X_ref = X(t_end)`: decay towards the final value.
    Final,
    /// `X_ref = X(0+)`: growth of the deviation from the post-shock value.
    Initial,
}

/// Least-squares slope of `ln|X - X_ref|` against `t` over `window`.
pub fn fit_dominant_exponent(
    traj: &Trajectory,
    variable: Variable,
    window: (f64, f64),
    reference: FitReference,
) -> Result<f64> {
    let samples = grid_samples(traj);
    let x_ref = match reference {
        FitReference::Zero => 0.0,
        FitReference::Final => variable.value(samples.last().unwrap_or(traj.first())),
        FitReference::Initial => variable.value(traj.first()),
    };
    let (lo, hi) = window;
    let mut pts = Vec::new();
    for s in samples.iter().filter(|s| s.t >= lo && s.t <= hi) {
        let dev = (variable.value(s) - x_ref).abs();
        if !(dev.is_finite() && dev >= MIN_FIT_SIGNAL) {
            return Err(Error::IllConditioned(format!(
                "|X - X_ref| = {dev:e} at t={} is below {MIN_FIT_SIGNAL:e}",
                s.t
            )));
        }
        pts.push((s.t, dev.ln()));
    }
    if pts.len() < MIN_FIT_SAMPLES {
        return Err(Error::IllConditioned(format!(
            "window [{lo}, {hi}] holds {} samples, need {MIN_FIT_SAMPLES}",
            pts.len()
        )));
    }
    Ok(least_squares_slope(&pts))
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in pts {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentReport {
    pub price: f64,
    pub equity: f64,
    pub holdings: f64,
    /// `max |w_i - w_j| / max |w_k|`.
    pub spread: f64,
    pub agree: bool,
}

pub fn check_equal_exponents(
    traj: &Trajectory,
    window: (f64, f64),
    reference: FitReference,
) -> Result<ExponentReport> {
    let price = fit_dominant_exponent(traj, Variable::Price, window, reference)?;
    let equity = fit_dominant_exponent(traj, Variable::Equity, window, reference)?;
    let holdings = fit_dominant_exponent(traj, Variable::Holdings, window, reference)?;
    let w = [price, equity, holdings];
    let scale = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut diff: f64 = 0.0;
    for a in &w {
        for b in &w {
            diff = diff.max((a - b).abs());
        }
    }
    let spread = if scale == 0.0 { 0.0 } else { diff / scale };
    Ok(ExponentReport {
        price,
        equity,
        holdings,
        spread,
        agree: spread < EXPONENT_SPREAD_THRESHOLD,
    })
}
