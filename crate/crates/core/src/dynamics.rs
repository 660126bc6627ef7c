//! Fixed-step integration of the coupled holdings / price / equity response
//! equations, with absorbing bankruptcy and price-floor events.
//!
//! The second-order equations are integrated as a first-order system in
//! `(E, A, V = dA/dt, p, u = dp/dt)`:
//!
//! ```text
//! dE_i/dt      = sum_mu A_{i mu} u_mu
//! tau_B dV/dt  = -V_{i mu} + beta (dE_i/dt / E_i) A_{i mu}
//! tau_A du/dt  = -u_mu + alpha (dA_mu/dt / A_mu) p_mu
//! ```
//!
//! where `A_mu` and `dA_mu/dt` aggregate over the investors still alive.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Node, Result};
use crate::market::{ModelParams, MarketState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    /// Output sampling interval.
    pub dt: f64,
    /// RK4 steps per output sample.
    pub substeps: usize,
    pub t_max: f64,
    pub bankrupt_eps: f64,
    pub price_floor_eps: f64,
    pub divergence_cap: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            dt: 0.01,
            substeps: 1,
            t_max: 69.0,
            bankrupt_eps: 1e-9,
            price_floor_eps: 1e-9,
            divergence_cap: 1e9,
        }
    }
}

impl IntegratorConfig {
    pub fn with_horizon(t_max: f64) -> Self {
        IntegratorConfig {
            t_max,
            ..Default::default()
        }
    }

    pub fn step(&self) -> f64 {
        self.dt / self.substeps as f64
    }

    /// Number of output intervals after the initial sample.
    pub fn n_intervals(&self) -> usize {
        (self.t_max / self.dt).round().max(1.0) as usize
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::param("integrator.dt", format!("must be > 0 (got {})", self.dt)));
        }
        if self.substeps == 0 {
            return Err(Error::param("integrator.substeps", "must be >= 1"));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return Err(Error::param(
                "integrator.t_max",
                format!("must be > 0 (got {})", self.t_max),
            ));
        }
        if !(self.bankrupt_eps >= 0.0 && self.bankrupt_eps.is_finite()) {
            return Err(Error::param("integrator.bankrupt_eps", "must be >= 0"));
        }
        if !(self.price_floor_eps >= 0.0 && self.price_floor_eps.is_finite()) {
            return Err(Error::param("integrator.price_floor_eps", "must be >= 0"));
        }
        if self.divergence_cap.is_nan() || self.divergence_cap <= 0.0 {
            return Err(Error::param("integrator.divergence_cap", "must be > 0"));
        }
        let limit = params.tau_a.min(params.tau_b) / 10.0;
        if self.step() > limit {
            return Err(Error::param(
                "integrator.dt",
                format!(
                    "dt/substeps = {} exceeds min(tau_a, tau_b)/10 = {}",
                    self.step(),
                    limit
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Bankruptcy { investor: usize },
    PriceFloor { asset: usize },
    Diverged,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Bankruptcy { .. } => "bankruptcy",
            EventKind::PriceFloor { .. } => "price_floor",
            EventKind::Diverged => "diverged",
        }
    }

    pub fn index(&self) -> Option<usize> {
        match *self {
            EventKind::Bankruptcy { investor } => Some(investor),
            EventKind::PriceFloor { asset } => Some(asset),
            EventKind::Diverged => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminal {
    ReachedHorizon,
    Diverged,
    AllDead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// States at `t = 0, dt, 2 dt, ...`; a diverged run ends with the state
    /// at the substep where the cap was crossed.
    pub samples: Vec<MarketState>,
    pub events: Vec<Event>,
    pub terminal: Terminal,
    /// Requested horizon `t_max`.
    pub horizon: f64,
}

impl Trajectory {
    pub fn first(&self) -> &MarketState {
        &self.samples[0]
    }

    pub fn last(&self) -> &MarketState {
        self.samples.last().expect("trajectory has at least one sample")
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }
}

/// Everything the engine reports besides the samples themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub events: Vec<Event>,
    pub terminal: Terminal,
    pub horizon: f64,
}

/// Receives every output sample of an integration, in time order.
pub trait Observer {
    fn observe(&mut self, state: &MarketState);
}

impl<F: FnMut(&MarketState)> Observer for F {
    fn observe(&mut self, state: &MarketState) {
        self(state)
    }
}

/// Time derivative of a [`MarketState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub equities: Vec<f64>,
    pub holdings: Vec<f64>,
    pub holdings_velocity: Vec<f64>,
    pub prices: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Offsets of each block inside the packed state vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    m: usize,
}

impl Layout {
    fn of(state: &MarketState) -> Self {
        Layout {
            n: state.n_investors,
            m: state.n_assets,
        }
    }
    fn len(&self) -> usize {
        self.n + 2 * self.n * self.m + 2 * self.m
    }
    fn e(&self) -> usize {
        0
    }
    fn a(&self) -> usize {
        self.n
    }
    fn v(&self) -> usize {
        self.n + self.n * self.m
    }
    fn p(&self) -> usize {
        self.n + 2 * self.n * self.m
    }
    fn u(&self) -> usize {
        self.p() + self.m
    }

    fn pack(&self, s: &MarketState, y: &mut [f64]) {
        let nm = self.n * self.m;
        y[self.e()..self.e() + self.n].copy_from_slice(&s.equities);
        y[self.a()..self.a() + nm].copy_from_slice(&s.holdings);
        y[self.v()..self.v() + nm].copy_from_slice(&s.holdings_velocity);
        y[self.p()..self.p() + self.m].copy_from_slice(&s.prices);
        y[self.u()..self.u() + self.m].copy_from_slice(&s.returns);
    }

    fn unpack(&self, y: &[f64], s: &mut MarketState) {
        let nm = self.n * self.m;
        s.equities.copy_from_slice(&y[self.e()..self.e() + self.n]);
        s.holdings.copy_from_slice(&y[self.a()..self.a() + nm]);
        s.holdings_velocity.copy_from_slice(&y[self.v()..self.v() + nm]);
        s.prices.copy_from_slice(&y[self.p()..self.p() + self.m]);
        s.returns.copy_from_slice(&y[self.u()..self.u() + self.m]);
    }
}

fn trading_gain(lay: Layout, y: &[f64], i: usize) -> f64 {
    let m = lay.m;
    let row = &y[lay.a() + i * m..lay.a() + (i + 1) * m];
    let u = &y[lay.u()..lay.u() + m];
    row.iter().zip(u).map(|(a, u)| a * u).sum()
}

fn rhs_packed(
    lay: Layout,
    y: &[f64],
    alive: &[bool],
    floored: &[bool],
    params: &ModelParams,
    t: f64,
    out: &mut [f64],
) -> Result<()> {
    let (n, m) = (lay.n, lay.m);
    for i in 0..n {
        let (de, a0, v0) = (lay.e() + i, lay.a() + i * m, lay.v() + i * m);
        if !alive[i] {
            out[de] = 0.0;
            out[a0..a0 + m].fill(0.0);
            out[v0..v0 + m].fill(0.0);
            continue;
        }
        let equity = y[lay.e() + i];
        if equity == 0.0 {
            return Err(Error::EvaluationAtSingularity {
                node: Node::Investor(i),
                t,
            });
        }
        let gain = trading_gain(lay, y, i);
        out[de] = gain;
        let relative = params.beta * gain / equity;
        for mu in 0..m {
            let v = y[v0 + mu];
            out[a0 + mu] = v;
            out[v0 + mu] = (-v + relative * y[a0 + mu]) / params.tau_b;
        }
    }
    for mu in 0..m {
        let (dp, du) = (lay.p() + mu, lay.u() + mu);
        if floored[mu] {
            out[dp] = 0.0;
            out[du] = 0.0;
            continue;
        }
        let (mut agg_a, mut agg_v) = (0.0, 0.0);
        for i in (0..n).filter(|&i| alive[i]) {
            agg_a += y[lay.a() + i * m + mu];
            agg_v += y[lay.v() + i * m + mu];
        }
        let pressure = if agg_a != 0.0 {
            params.alpha * agg_v / agg_a * y[dp]
        } else if agg_v == 0.0 {
            0.0
        } else {
            return Err(Error::EvaluationAtSingularity {
                node: Node::Asset(mu),
                t,
            });
        };
        let u = y[du];
        out[dp] = u;
        out[du] = (-u + pressure) / params.tau_a;
    }
    Ok(())
}

/// Right-hand side of the response equations at `state`.
pub fn rhs(state: &MarketState, params: &ModelParams) -> Result<StateDerivative> {
    state.validate()?;
    let lay = Layout::of(state);
    let mut y = vec![0.0; lay.len()];
    lay.pack(state, &mut y);
    let mut d = vec![0.0; lay.len()];
    rhs_packed(lay, &y, &state.alive, &state.floored, params, state.t, &mut d)?;
    let nm = lay.n * lay.m;
    Ok(StateDerivative {
        equities: d[lay.e()..lay.e() + lay.n].to_vec(),
        holdings: d[lay.a()..lay.a() + nm].to_vec(),
        holdings_velocity: d[lay.v()..lay.v() + nm].to_vec(),
        prices: d[lay.p()..lay.p() + lay.m].to_vec(),
        returns: d[lay.u()..lay.u() + lay.m].to_vec(),
    })
}

struct Engine<'a> {
    lay: Layout,
    params: &'a ModelParams,
    config: &'a IntegratorConfig,
    y: Vec<f64>,
    k: [Vec<f64>; 4],
    scratch: Vec<f64>,
    state: MarketState,
    events: Vec<Event>,
}

impl<'a> Engine<'a> {
    fn new(initial: &MarketState, params: &'a ModelParams, config: &'a IntegratorConfig) -> Self {
        let lay = Layout::of(initial);
        let mut y = vec![0.0; lay.len()];
        lay.pack(initial, &mut y);
        let zeros = || vec![0.0; lay.len()];
        Engine {
            lay,
            params,
            config,
            y,
            k: [zeros(), zeros(), zeros(), zeros()],
            scratch: zeros(),
            state: initial.clone(),
            events: Vec::new(),
        }
    }

    fn rk4_step(&mut self, t: f64, h: f64) -> Result<()> {
        let (lay, params) = (self.lay, self.params);
        let (alive, floored) = (&self.state.alive, &self.state.floored);
        let [k1, k2, k3, k4] = &mut self.k;
        rhs_packed(lay, &self.y, alive, floored, params, t, k1)?;
        for (s, (y, k)) in self.scratch.iter_mut().zip(self.y.iter().zip(k1.iter())) {
            *s = y + 0.5 * h * k;
        }
        rhs_packed(lay, &self.scratch, alive, floored, params, t + 0.5 * h, k2)?;
        for (s, (y, k)) in self.scratch.iter_mut().zip(self.y.iter().zip(k2.iter())) {
            *s = y + 0.5 * h * k;
        }
        rhs_packed(lay, &self.scratch, alive, floored, params, t + 0.5 * h, k3)?;
        for (s, (y, k)) in self.scratch.iter_mut().zip(self.y.iter().zip(k3.iter())) {
            *s = y + h * k;
        }
        rhs_packed(lay, &self.scratch, alive, floored, params, t + h, k4)?;
        for (j, y) in self.y.iter_mut().enumerate() {
            *y += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        Ok(())
    }

    /// Absorbing clamps after a substep. Returns true when the run diverged.
    fn settle_events(&mut self, t: f64) -> bool {
        let lay = self.lay;
        let (n, m) = (lay.n, lay.m);
        let cfg = self.config;
        for i in 0..n {
            if !self.state.alive[i] {
                continue;
            }
            let e = lay.e() + i;
            if self.y[e] <= cfg.bankrupt_eps {
                self.y[e] = 0.0;
                self.y[lay.v() + i * m..lay.v() + (i + 1) * m].fill(0.0);
                self.state.alive[i] = false;
                self.events.push(Event {
                    t,
                    kind: EventKind::Bankruptcy { investor: i },
                });
            }
        }
        for idx in 0..n * m {
            if self.y[lay.a() + idx] < 0.0 {
                self.y[lay.a() + idx] = 0.0;
                self.y[lay.v() + idx] = 0.0;
            }
        }
        for mu in 0..m {
            if self.state.floored[mu] {
                continue;
            }
            if self.y[lay.p() + mu] <= cfg.price_floor_eps {
                self.y[lay.p() + mu] = 0.0;
                self.y[lay.u() + mu] = 0.0;
                self.state.floored[mu] = true;
                self.events.push(Event {
                    t,
                    kind: EventKind::PriceFloor { asset: mu },
                });
            }
        }
        let diverged = self
            .y
            .iter()
            .any(|v| !v.is_finite() || v.abs() > cfg.divergence_cap);
        if diverged {
            self.events.push(Event {
                t,
                kind: EventKind::Diverged,
            });
        }
        diverged
    }

    fn emit(&mut self, t: f64, observer: &mut impl Observer) {
        let lay = self.lay;
        self.state.t = t;
        lay.unpack(&self.y, &mut self.state);
        for i in 0..lay.n {
            self.state.equity_rate[i] = if self.state.alive[i] {
                trading_gain(lay, &self.y, i)
            } else {
                0.0
            };
        }
        debug_assert!((0..lay.n).all(|i| {
            !self.state.alive[i] || self.state.equity_rate[i] == self.state.trading_gain(i)
        }));
        observer.observe(&self.state);
    }
}

/// Integrate with classical RK4 and hand every output sample to `observer`.
pub fn integrate_observed(
    initial: &MarketState,
    params: &ModelParams,
    config: &IntegratorConfig,
    observer: &mut impl Observer,
) -> Result<RunOutcome> {
    params.validate()?;
    config.validate(params)?;
    initial.validate()?;

    let mut engine = Engine::new(initial, params, config);
    let h = config.step();
    let t0 = initial.t;
    engine.emit(t0, observer);

    let intervals = config.n_intervals();
    let mut terminal = Terminal::ReachedHorizon;
    'outer: for k in 0..intervals {
        for j in 0..config.substeps {
            let sub = k * config.substeps + j;
            let t = t0 + sub as f64 * h;
            engine.rk4_step(t, h)?;
            let t_next = t0 + (sub + 1) as f64 * h;
            if engine.settle_events(t_next) {
                engine.emit(t_next, observer);
                terminal = Terminal::Diverged;
                break 'outer;
            }
        }
        engine.emit(t0 + (k + 1) as f64 * config.dt, observer);
    }
    if terminal == Terminal::ReachedHorizon && engine.state.n_alive() == 0 {
        terminal = Terminal::AllDead;
    }
    Ok(RunOutcome {
        events: engine.events,
        terminal,
        horizon: config.t_max,
    })
}

pub fn integrate(
    initial: &MarketState,
    params: &ModelParams,
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    let mut samples = Vec::with_capacity(config.n_intervals() + 1);
    let outcome = integrate_observed(initial, params, config, &mut |s: &MarketState| {
        samples.push(s.clone())
    })?;
    Ok(Trajectory {
        samples,
        events: outcome.events,
        terminal: outcome.terminal,
        horizon: outcome.horizon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// Largest `|a - b| / max(1, |a|, |b|)` over all variables of all
    /// common samples.
    pub max_rel_deviation: f64,
    pub compared_samples: usize,
    pub coarse_terminal: Terminal,
    pub fine_terminal: Terminal,
}

/// Compare a run against the same run with twice as many substeps.
pub fn halve_step_check(
    initial: &MarketState,
    params: &ModelParams,
    config: &IntegratorConfig,
) -> Result<ConvergenceReport> {
    let coarse = integrate(initial, params, config)?;
    let fine_cfg = IntegratorConfig {
        substeps: config.substeps * 2,
        ..*config
    };
    let fine = integrate(initial, params, &fine_cfg)?;

    // Only samples on the common output grid; a diverged run's final sample
    // sits between grid points and is excluded.
    let on_grid = |traj: &Trajectory| match traj.terminal {
        Terminal::Diverged => traj.samples.len() - 1,
        _ => traj.samples.len(),
    };
    let common = on_grid(&coarse).min(on_grid(&fine));
    let mut worst: f64 = 0.0;
    for (a, b) in coarse.samples[..common].iter().zip(&fine.samples[..common]) {
        for (x, y) in state_values(a).zip(state_values(b)) {
            let scale = 1f64.max(x.abs()).max(y.abs());
            worst = worst.max((x - y).abs() / scale);
        }
    }
    Ok(ConvergenceReport {
        max_rel_deviation: worst,
        compared_samples: common,
        coarse_terminal: coarse.terminal,
        fine_terminal: fine.terminal,
    })
}

fn state_values(s: &MarketState) -> impl Iterator<Item = f64> + '_ {
    s.equities
        .iter()
        .chain(&s.holdings)
        .chain(&s.holdings_velocity)
        .chain(&s.prices)
        .chain(&s.returns)
        .copied()
}

/// `t,p_0..p_{M-1},E_0..E_{N-1}`, optionally followed by `A_i_mu`, `V_i_mu`
/// and `u_mu` columns. Every float carries 17 significant digits.
pub fn write_trajectory_csv(traj: &Trajectory, out: &mut impl Write, full: bool) -> std::io::Result<()> {
    let first = traj.first();
    let (n, m) = (first.n_investors, first.n_assets);
    let mut header = vec!["t".to_string()];
    header.extend((0..m).map(|mu| format!("p_{mu}")));
    header.extend((0..n).map(|i| format!("E_{i}")));
    if full {
        for prefix in ["A", "V"] {
            for i in 0..n {
                header.extend((0..m).map(|mu| format!("{prefix}_{i}_{mu}")));
            }
        }
        header.extend((0..m).map(|mu| format!("u_{mu}")));
    }
    writeln!(out, "{}", header.join(","))?;

    let mut line = String::new();
    for s in &traj.samples {
        line.clear();
        push_float(&mut line, s.t);
        for v in s.prices.iter().chain(&s.equities) {
            line.push(',');
            push_float(&mut line, *v);
        }
        if full {
            for v in s.holdings.iter().chain(&s.holdings_velocity).chain(&s.returns) {
                line.push(',');
                push_float(&mut line, *v);
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub(crate) fn push_float(buf: &mut String, v: f64) {
    use std::fmt::Write as _;
    let _ = write!(buf, "{v:.16e}");
}

#[derive(Debug, Serialize)]
struct EventRecord {
    t: f64,
    kind: &'static str,
    index: Option<usize>,
}

/// Sidecar event list `[{t, kind, index}]`.
pub fn events_json(events: &[Event]) -> serde_json::Value {
    let records: Vec<EventRecord> = events
        .iter()
        .map(|e| EventRecord {
            t: e.t,
            kind: e.kind.name(),
            index: e.kind.index(),
        })
        .collect();
    serde_json::to_value(records).expect("event records serialize")
}
