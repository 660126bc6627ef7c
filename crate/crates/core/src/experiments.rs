//! Parameter sweeps over `(alpha, beta)`, order-parameter and relaxation
//! maps, and boundary extraction.

use std::io::Write;
use std::path::PathBuf;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, IntegratorConfig, Observer, Terminal, Trajectory};
use crate::error::{Error, Result};
use crate::market::{
    apply_shock, build_synthetic_network, MarketNetwork, MarketState, ModelParams, ShockSpec,
    SyntheticSpec,
};

pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.1;
pub const DEFAULT_RELAX_TOL: f64 = 1e-6;

/// Time for a run to come back to rest, or the horizon if it never does.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Relaxation {
    Settled(f64),
    Censored(f64),
}

impl Relaxation {
    pub fn time(&self) -> f64 {
        match *self {
            Relaxation::Settled(t) | Relaxation::Censored(t) => t,
        }
    }

    pub fn is_censored(&self) -> bool {
        matches!(self, Relaxation::Censored(_))
    }
}

fn price_ratio_sum(initial: &[f64], now: &[f64]) -> f64 {
    initial
        .iter()
        .zip(now)
        .map(|(&p0, &p)| if p0 == 0.0 { 0.0 } else { p / p0 })
        .sum()
}

fn at_rest(s: &MarketState, tol: f64) -> bool {
    let prices_still = s.returns.iter().all(|u| u.abs() < tol);
    let equities_still = s
        .equity_rate
        .iter()
        .zip(&s.equities)
        .all(|(r, e)| r.abs() / e.max(tol) < tol);
    prices_still && equities_still
}

/// Streams order parameter and relaxation time without keeping samples.
#[derive(Debug, Clone)]
pub struct SummaryObserver {
    tol: f64,
    initial_prices: Option<Vec<f64>>,
    order_param: f64,
    rest_since: Option<f64>,
    last_t: f64,
}

impl SummaryObserver {
    pub fn new(tol: f64) -> Result<Self> {
        if !(tol.is_finite() && tol > 0.0) {
            return Err(Error::param("relax_tol", format!("must be > 0 (got {tol})")));
        }
        Ok(SummaryObserver {
            tol,
            initial_prices: None,
            order_param: 0.0,
            rest_since: None,
            last_t: 0.0,
        })
    }

    pub fn order_param(&self) -> f64 {
        self.order_param
    }

    /// Relaxation time given how the run ended.
    pub fn relaxation(&self, terminal: Terminal, horizon: f64) -> Relaxation {
        match (terminal, self.rest_since) {
            (Terminal::Diverged, _) | (_, None) => Relaxation::Censored(horizon),
            (_, Some(t)) => Relaxation::Settled(t),
        }
    }
}

impl Observer for SummaryObserver {
    fn observe(&mut self, s: &MarketState) {
        let p0 = self.initial_prices.get_or_insert_with(|| s.prices.clone());
        if s.prices.iter().all(|p| p.is_finite()) {
            let ratio = price_ratio_sum(p0, &s.prices);
            if ratio.is_finite() {
                self.order_param = ratio;
            }
        }
        if at_rest(s, self.tol) {
            self.rest_since.get_or_insert(s.t);
        } else {
            self.rest_since = None;
        }
        self.last_t = s.t;
    }
}

/// `sum_mu p_mu(t_end) / p_mu(0)` at the last sample with finite prices.
pub fn order_parameter(traj: &Trajectory) -> f64 {
    let p0 = &traj.first().prices;
    traj.samples
        .iter()
        .rev()
        .map(|s| price_ratio_sum(p0, &s.prices))
        .find(|r| r.is_finite())
        .unwrap_or(0.0)
}

/// Earliest sample time after which every return and relative equity rate
/// stays below `tol`.
pub fn relaxation_time(traj: &Trajectory, tol: f64) -> Result<Relaxation> {
    let mut obs = SummaryObserver::new(tol)?;
    traj.samples.iter().for_each(|s| obs.observe(s));
    Ok(obs.relaxation(traj.terminal, traj.horizon))
}

/// Shock the rescaled 1x1 system and integrate it.
pub fn mean_field_run(
    params: &ModelParams,
    shock_magnitude: f64,
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    let shock = ShockSpec {
        investor: 0,
        magnitude: shock_magnitude,
    };
    let initial = apply_shock(&MarketNetwork::mean_field(), &shock, params)?;
    dynamics::integrate(&initial, params, config)
}

/// Where the initial network of a run comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkSource {
    /// One investor holding one unit of one asset with unit equity.
    MeanField,
    Synthetic(SyntheticSpec),
    File(PathBuf),
}

impl NetworkSource {
    /// Network for repeat `repeat`; synthetic networks shift their seed.
    pub fn build(&self, repeat: usize) -> Result<MarketNetwork> {
        match self {
            NetworkSource::MeanField => Ok(MarketNetwork::mean_field()),
            NetworkSource::Synthetic(spec) => build_synthetic_network(&SyntheticSpec {
                seed: spec.seed.wrapping_add(repeat as u64),
                ..spec.clone()
            }),
            NetworkSource::File(path) => MarketNetwork::load(path),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn one_repeat() -> usize {
    1
}

fn default_collapse() -> f64 {
    DEFAULT_COLLAPSE_THRESHOLD
}

fn default_tol() -> f64 {
    DEFAULT_RELAX_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    #[serde(default = "one")]
    pub tau_a: f64,
    #[serde(default = "one")]
    pub tau_b: f64,
    pub shock: ShockSpec,
    pub network: NetworkSource,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default = "one_repeat")]
    pub repeats: usize,
    #[serde(default = "default_collapse")]
    pub collapse_threshold: f64,
    #[serde(default = "default_tol")]
    pub relax_tol: f64,
}

impl SweepSpec {
    pub fn mean_field(alpha_grid: Vec<f64>, beta_grid: Vec<f64>, magnitude: f64, t_max: f64) -> Self {
        SweepSpec {
            alpha_grid,
            beta_grid,
            tau_a: 1.0,
            tau_b: 1.0,
            shock: ShockSpec {
                investor: 0,
                magnitude,
            },
            network: NetworkSource::MeanField,
            integrator: IntegratorConfig::with_horizon(t_max),
            repeats: 1,
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
            relax_tol: DEFAULT_RELAX_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_grid("alpha_grid", &self.alpha_grid)?;
        check_grid("beta_grid", &self.beta_grid)?;
        if self.repeats == 0 {
            return Err(Error::param("repeats", "must be >= 1"));
        }
        if !(self.collapse_threshold.is_finite() && self.collapse_threshold >= 0.0) {
            return Err(Error::param("collapse_threshold", "must be finite and >= 0"));
        }
        if !(self.relax_tol.is_finite() && self.relax_tol > 0.0) {
            return Err(Error::param("relax_tol", "must be > 0"));
        }
        let probe = ModelParams::new(0.0, 0.0, self.tau_a, self.tau_b)?;
        self.integrator.validate(&probe)?;
        Ok(())
    }
}

fn check_grid(field: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::param(field, "grid is empty"));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::param(field, "grid values must be finite"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param(field, "grid must be strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CellLabel {
    Settled,
    Collapsed,
    Diverged,
    /// The engine reported an error for at least one repeat.
    Failed,
}

impl CellLabel {
    pub fn name(&self) -> &'static str {
        match self {
            CellLabel::Settled => "Settled",
            CellLabel::Collapsed => "Collapsed",
            CellLabel::Diverged => "Diverged",
            CellLabel::Failed => "Failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseCell {
    pub alpha: f64,
    pub beta: f64,
    /// Mean over repeats; NaN only for failed cells.
    pub order_param: f64,
    pub relax: Relaxation,
    pub label: CellLabel,
}

/// Cells in alpha-major order: `cells[a * beta_grid.len() + b]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseMap {
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub n_assets: usize,
    pub cells: Vec<PhaseCell>,
}

impl PhaseMap {
    pub fn cell(&self, a: usize, b: usize) -> &PhaseCell {
        &self.cells[a * self.beta_grid.len() + b]
    }

    pub fn n_failed(&self) -> usize {
        self.cells.iter().filter(|c| c.label == CellLabel::Failed).count()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "alpha,beta,order_param,relax_time,censored,label")?;
        for c in &self.cells {
            let mut line = String::new();
            for v in [c.alpha, c.beta, c.order_param, c.relax.time()] {
                dynamics::push_float(&mut line, v);
                line.push(',');
            }
            line.push_str(if c.relax.is_censored() { "true" } else { "false" });
            line.push(',');
            line.push_str(c.label.name());
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

struct RepeatOutcome {
    order_param: f64,
    relax: Relaxation,
    diverged: bool,
}

fn run_repeat(
    network: &MarketNetwork,
    params: &ModelParams,
    spec: &SweepSpec,
) -> Result<RepeatOutcome> {
    let initial = apply_shock(network, &spec.shock, params)?;
    let mut obs = SummaryObserver::new(spec.relax_tol)?;
    let outcome = dynamics::integrate_observed(&initial, params, &spec.integrator, &mut obs)?;
    Ok(RepeatOutcome {
        order_param: obs.order_param(),
        relax: obs.relaxation(outcome.terminal, outcome.horizon),
        diverged: outcome.terminal == Terminal::Diverged,
    })
}

fn run_cell(alpha: f64, beta: f64, networks: &[MarketNetwork], spec: &SweepSpec) -> PhaseCell {
    let failed = |reason: &Error| {
        warn!("cell alpha={alpha} beta={beta} failed: {reason}");
        PhaseCell {
            alpha,
            beta,
            order_param: f64::NAN,
            relax: Relaxation::Censored(spec.integrator.t_max),
            label: CellLabel::Failed,
        }
    };
    let params = match ModelParams::new(alpha, beta, spec.tau_a, spec.tau_b) {
        Ok(p) => p,
        Err(e) => return failed(&e),
    };
    let mut outcomes = Vec::with_capacity(networks.len());
    for net in networks {
        match run_repeat(net, &params, spec) {
            Ok(o) => outcomes.push(o),
            Err(e) => return failed(&e),
        }
    }
    let n = outcomes.len() as f64;
    let order_param = outcomes.iter().map(|o| o.order_param).sum::<f64>() / n;
    let settled: Vec<f64> = outcomes
        .iter()
        .filter(|o| !o.relax.is_censored())
        .map(|o| o.relax.time())
        .collect();
    let relax = if settled.is_empty() {
        Relaxation::Censored(spec.integrator.t_max)
    } else {
        Relaxation::Settled(settled.iter().sum::<f64>() / settled.len() as f64)
    };
    let n_assets = networks[0].n_assets as f64;
    let label = if outcomes.iter().any(|o| o.diverged) {
        CellLabel::Diverged
    } else if order_param < spec.collapse_threshold * n_assets {
        CellLabel::Collapsed
    } else {
        CellLabel::Settled
    };
    debug!("cell alpha={alpha} beta={beta}: {label:?} order_param={order_param}");
    PhaseCell {
        alpha,
        beta,
        order_param,
        relax,
        label,
    }
}

/// Run every `(alpha, beta)` cell on the current rayon pool.
///
/// Results do not depend on scheduling: every cell starts from the same
/// networks and owns its integrator state.
pub fn run_sweep(spec: &SweepSpec) -> Result<PhaseMap> {
    spec.validate()?;
    let networks = (0..spec.repeats)
        .map(|r| spec.network.build(r))
        .collect::<Result<Vec<_>>>()?;
    for net in &networks {
        spec.shock.validate(net.n_investors)?;
    }
    let nb = spec.beta_grid.len();
    let cells = (0..spec.alpha_grid.len() * nb)
        .into_par_iter()
        .map(|k| run_cell(spec.alpha_grid[k / nb], spec.beta_grid[k % nb], &networks, spec))
        .collect();
    Ok(PhaseMap {
        alpha_grid: spec.alpha_grid.clone(),
        beta_grid: spec.beta_grid.clone(),
        n_assets: networks[0].n_assets,
        cells,
    })
}

/// Direction in which boundary crossings are searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryAxis {
    /// Scan `beta` along each alpha row.
    Beta,
    /// Scan `alpha` along each beta column.
    Alpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryPoint {
    pub alpha: f64,
    pub beta: f64,
}

impl BoundaryPoint {
    pub fn gamma(&self) -> f64 {
        self.alpha * self.beta
    }
}

/// One row or column of the map: fixed coordinate, scanned grid and cells.
fn lines(map: &PhaseMap, axis: BoundaryAxis) -> Vec<(f64, Vec<f64>, Vec<&PhaseCell>)> {
    let (na, nb) = (map.alpha_grid.len(), map.beta_grid.len());
    match axis {
        BoundaryAxis::Beta => (0..na)
            .map(|a| (map.alpha_grid[a], map.beta_grid.clone(), (0..nb).map(|b| map.cell(a, b)).collect()))
            .collect(),
        BoundaryAxis::Alpha => (0..nb)
            .map(|b| (map.beta_grid[b], map.alpha_grid.clone(), (0..na).map(|a| map.cell(a, b)).collect()))
            .collect(),
    }
}

fn point(axis: BoundaryAxis, fixed: f64, scanned: f64) -> BoundaryPoint {
    match axis {
        BoundaryAxis::Beta => BoundaryPoint { alpha: fixed, beta: scanned },
        BoundaryAxis::Alpha => BoundaryPoint { alpha: scanned, beta: fixed },
    }
}

/// Locus where the order parameter first leaves the band `[ref/2, 2 ref]`,
/// `ref` being the first settled value of the line. Linear interpolation
/// between the bracketing cells; lines with no crossing are skipped.
pub fn extract_boundary(map: &PhaseMap, axis: BoundaryAxis) -> Vec<BoundaryPoint> {
    let mut locus = Vec::new();
    for (fixed, grid, cells) in lines(map, axis) {
        let Some(start) = cells.iter().position(|c| c.label == CellLabel::Settled) else {
            continue;
        };
        let reference = cells[start].order_param;
        if reference <= 0.0 {
            continue;
        }
        for k in start..cells.len() - 1 {
            let (lo, hi) = (cells[k].order_param, cells[k + 1].order_param);
            if cells[k + 1].label == CellLabel::Failed {
                break;
            }
            let target = if hi <= 0.5 * reference {
                0.5 * reference
            } else if hi >= 2.0 * reference {
                2.0 * reference
            } else {
                continue;
            };
            let frac = ((target - lo) / (hi - lo)).clamp(0.0, 1.0);
            locus.push(point(axis, fixed, grid[k] + frac * (grid[k + 1] - grid[k])));
            break;
        }
    }
    locus
}

/// Locus of the longest relaxation time along each line. Censored cells
/// count as longest; a run of equal maxima reports its midpoint, and an
/// interior isolated maximum is refined by a parabola through its
/// neighbours. Lines without any finite-or-censored maximum are skipped.
pub fn relaxation_ridge(map: &PhaseMap, axis: BoundaryAxis) -> Vec<BoundaryPoint> {
    let mut locus = Vec::new();
    for (fixed, grid, cells) in lines(map, axis) {
        let key: Vec<f64> = cells
            .iter()
            .map(|c| match (c.label, c.relax) {
                (CellLabel::Failed, _) => f64::NEG_INFINITY,
                (_, Relaxation::Censored(_)) => f64::INFINITY,
                (_, Relaxation::Settled(t)) => t,
            })
            .collect();
        let best = key.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best == f64::NEG_INFINITY {
            continue;
        }
        let first = key.iter().position(|&k| k == best).unwrap_or(0);
        let last = first + key[first..].iter().take_while(|&&k| k == best).count() - 1;
        let at = if first == last && first > 0 && first + 1 < key.len() && best.is_finite() {
            parabola_vertex(
                (grid[first - 1], key[first - 1]),
                (grid[first], key[first]),
                (grid[first + 1], key[first + 1]),
            )
        } else {
            0.5 * (grid[first] + grid[last])
        };
        locus.push(point(axis, fixed, at));
    }
    locus
}

fn parabola_vertex((x0, y0): (f64, f64), (x1, y1): (f64, f64), (x2, y2): (f64, f64)) -> f64 {
    let num = (x1 - x0).powi(2) * (y1 - y2) - (x1 - x2).powi(2) * (y1 - y0);
    let den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0);
    if den == 0.0 {
        x1
    } else {
        (x1 - 0.5 * num / den).clamp(x0, x2)
    }
}

/// `alpha,beta_star` rows.
pub fn write_boundary_csv(locus: &[BoundaryPoint], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "alpha,beta_star")?;
    for p in locus {
        let mut line = String::new();
        dynamics::push_float(&mut line, p.alpha);
        line.push(',');
        dynamics::push_float(&mut line, p.beta);
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Evenly spaced grid `start, start + step, ...` up to `stop` inclusive.
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| start + k as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stable_run(f0: f64) -> Trajectory {
        mean_field_run(
            &ModelParams::unit_times(0.5, 0.5).unwrap(),
            f0,
            &IntegratorConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_shock_is_at_rest() {
        let t = stable_run(0.0);
        assert_eq!(order_parameter(&t), 1.0);
        assert_eq!(relaxation_time(&t, 1e-6).unwrap(), Relaxation::Settled(0.0));
    }

    #[test]
    fn stable_order_parameter_below_one() {
        let op = order_parameter(&stable_run(-0.1));
        assert!(op > 0.0 && op < 1.0, "{op}");
    }

    #[test]
    fn unstable_run_is_censored() {
        let traj = mean_field_run(
            &ModelParams::unit_times(1.5, 1.5).unwrap(),
            0.1,
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(relaxation_time(&traj, 1e-6).unwrap(), Relaxation::Censored(69.0));
        assert!(order_parameter(&traj).is_finite());
    }

    #[test]
    fn relaxation_rejects_bad_tol() {
        assert!(relaxation_time(&stable_run(0.0), 0.0).is_err());
    }

    #[test]
    fn grid_validation() {
        let mut spec = SweepSpec::mean_field(vec![], vec![1.0], -0.01, 10.0);
        assert!(spec.validate().is_err());
        spec.alpha_grid = vec![1.0, 1.0];
        assert!(spec.validate().is_err());
        spec.alpha_grid = vec![0.5, 1.0];
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn linear_grid_is_inclusive() {
        let g = linear_grid(0.2, 2.0, 0.05);
        assert_eq!(g.len(), 37);
        assert!((g[36] - 2.0).abs() < 1e-12);
    }

    fn synthetic_map(values: &[f64]) -> PhaseMap {
        let beta_grid: Vec<f64> = (0..values.len()).map(|k| k as f64).collect();
        PhaseMap {
            alpha_grid: vec![1.0],
            beta_grid: beta_grid.clone(),
            n_assets: 1,
            cells: values
                .iter()
                .zip(&beta_grid)
                .map(|(&v, &b)| PhaseCell {
                    alpha: 1.0,
                    beta: b,
                    order_param: v,
                    relax: Relaxation::Settled(b),
                    label: CellLabel::Settled,
                })
                .collect(),
        }
    }

    #[test]
    fn boundary_interpolates_half_crossing() {
        let map = synthetic_map(&[1.0, 0.9, 0.3, 0.0]);
        let locus = extract_boundary(&map, BoundaryAxis::Beta);
        assert_eq!(locus.len(), 1);
        assert!((locus[0].beta - (1.0 + 0.4 / 0.6)).abs() < 1e-12);
    }

    #[test]
    fn boundary_detects_growth() {
        let map = synthetic_map(&[1.0, 1.5, 2.5]);
        let locus = extract_boundary(&map, BoundaryAxis::Beta);
        assert!((locus[0].beta - 1.5).abs() < 1e-12);
    }

    #[test]
    fn boundary_skips_flat_rows() {
        assert!(extract_boundary(&synthetic_map(&[1.0, 0.9, 0.8]), BoundaryAxis::Beta).is_empty());
    }

    #[test]
    fn ridge_finds_vertex() {
        let mut map = synthetic_map(&[1.0; 5]);
        for (c, t) in map.cells.iter_mut().zip([1.0, 3.0, 5.0, 3.0, 1.0]) {
            c.relax = Relaxation::Settled(t);
        }
        let ridge = relaxation_ridge(&map, BoundaryAxis::Beta);
        assert!((ridge[0].beta - 2.0).abs() < 1e-12);

        map.cells[2].relax = Relaxation::Censored(10.0);
        map.cells[3].relax = Relaxation::Censored(10.0);
        let ridge = relaxation_ridge(&map, BoundaryAxis::Beta);
        assert!((ridge[0].beta - 2.5).abs() < 1e-12);
    }

    #[test]
    fn phase_map_csv_shape() {
        let map = synthetic_map(&[1.0, 0.5]);
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "alpha,beta,order_param,relax_time,censored,label");
        assert_eq!(rows.len(), 3);
        assert!(rows[2].ends_with(",false,Settled"));
    }

    #[test]
    fn sweep_spec_json_defaults() {
        let spec: SweepSpec = serde_json::from_str(
            r#"{"alpha_grid":[0.5],"beta_grid":[0.5],
                "shock":{"investor":0,"magnitude":-0.01},
                "network":"mean_field"}"#,
        )
        .unwrap();
        assert_eq!(spec.repeats, 1);
        assert_eq!(spec.collapse_threshold, 0.1);
        assert_eq!(spec.integrator, IntegratorConfig::default());
    }
}
