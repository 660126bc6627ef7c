//! Domain types for the bipartite investor/asset market, synthetic network
//! construction, delta-shock jump conditions and the equity bookkeeping
//! identity.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Behavioral couplings and response times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Inverse price elasticity.
    pub alpha: f64,
    /// Income elasticity of demand ("rashness").
    pub beta: f64,
    /// Market price response time.
    pub tau_a: f64,
    /// Investor portfolio response time.
    pub tau_b: f64,
}

impl ModelParams {
    pub fn new(alpha: f64, beta: f64, tau_a: f64, tau_b: f64) -> Result<Self> {
        let params = ModelParams {
            alpha,
            beta,
            tau_a,
            tau_b,
        };
        params.validate()?;
        Ok(params)
    }

    /// Unit response times, as used for every figure-style scenario.
    pub fn unit_times(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(alpha, beta, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::param("alpha", format!("must be finite (got {})", self.alpha)));
        }
        if !self.beta.is_finite() {
            return Err(Error::param("beta", format!("must be finite (got {})", self.beta)));
        }
        if !(self.tau_a.is_finite() && self.tau_a > 0.0) {
            return Err(Error::param("tau_a", format!("must be > 0 (got {})", self.tau_a)));
        }
        if !(self.tau_b.is_finite() && self.tau_b > 0.0) {
            return Err(Error::param("tau_b", format!("must be > 0 (got {})", self.tau_b)));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.alpha * self.beta
    }
}

/// Weighted bipartite network: who holds how much of what, at what price,
/// with what net worth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketNetwork {
    pub n_investors: usize,
    pub n_assets: usize,
    /// Row-major `n_investors x n_assets`; entry `(i, mu)` is the number of
    /// shares of asset `mu` held by investor `i`.
    pub holdings: Vec<f64>,
    pub prices: Vec<f64>,
    pub equities: Vec<f64>,
}

impl MarketNetwork {
    pub fn new(
        n_investors: usize,
        n_assets: usize,
        holdings: Vec<f64>,
        prices: Vec<f64>,
        equities: Vec<f64>,
    ) -> Result<Self> {
        let net = MarketNetwork {
            n_investors,
            n_assets,
            holdings,
            prices,
            equities,
        };
        net.validate()?;
        Ok(net)
    }

    /// The rescaled one investor, one asset system with `E = A = p = 1`.
    pub fn mean_field() -> Self {
        MarketNetwork {
            n_investors: 1,
            n_assets: 1,
            holdings: vec![1.0],
            prices: vec![1.0],
            equities: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_investors, self.n_assets);
        if n == 0 {
            return Err(Error::param("n_investors", "must be >= 1"));
        }
        if m == 0 {
            return Err(Error::param("n_assets", "must be >= 1"));
        }
        check_len("holdings", n * m, self.holdings.len())?;
        check_len("prices", m, self.prices.len())?;
        check_len("equities", n, self.equities.len())?;
        for (name, values) in [
            ("holdings", &self.holdings),
            ("prices", &self.prices),
            ("equities", &self.equities),
        ] {
            if let Some((k, v)) = values
                .iter()
                .enumerate()
                .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
            {
                return Err(Error::param(
                    format!("{name}[{k}]"),
                    format!("must be finite and >= 0 (got {v})"),
                ));
            }
        }
        for i in 0..n {
            if self.holdings[i * m..(i + 1) * m].iter().all(|&a| a == 0.0) {
                return Err(Error::param(
                    "holdings",
                    format!("investor {i} holds nothing (isolated node)"),
                ));
            }
        }
        for mu in 0..m {
            if (0..n).all(|i| self.holdings[i * m + mu] == 0.0) {
                return Err(Error::param(
                    "holdings",
                    format!("asset {mu} has no holder (isolated node)"),
                ));
            }
        }
        Ok(())
    }

    pub fn holding(&self, investor: usize, asset: usize) -> f64 {
        self.holdings[investor * self.n_assets + asset]
    }

    /// Portfolio value `(A p)_i` of every investor.
    pub fn portfolio_values(&self) -> Vec<f64> {
        portfolio_values(self.n_assets, &self.holdings, &self.prices)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let net: MarketNetwork = serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

pub(crate) fn portfolio_values(n_assets: usize, holdings: &[f64], prices: &[f64]) -> Vec<f64> {
    holdings
        .chunks_exact(n_assets)
        .map(|row| row.iter().zip(prices).map(|(a, p)| a * p).sum())
        .collect()
}

/// Parameters of the synthetic network generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_investors: usize,
    pub n_assets: usize,
    /// Bernoulli edge probability.
    pub density: f64,
    /// Edge weights are uniform in `(0, weight_scale]`.
    pub weight_scale: f64,
    /// Target ratio `(A p)_i / E_i`.
    pub leverage: f64,
    pub seed: u64,
    /// Every edge gets exactly `weight_scale` instead of a uniform draw.
    #[serde(default)]
    pub constant_weights: bool,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_investors == 0 {
            return Err(Error::param("n_investors", "must be >= 1"));
        }
        if self.n_assets == 0 {
            return Err(Error::param("n_assets", "must be >= 1"));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::param("density", format!("must be in (0, 1] (got {})", self.density)));
        }
        if !(self.weight_scale.is_finite() && self.weight_scale > 0.0) {
            return Err(Error::param(
                "weight_scale",
                format!("must be > 0 (got {})", self.weight_scale),
            ));
        }
        if !(self.leverage.is_finite() && self.leverage > 0.0) {
            return Err(Error::param("leverage", format!("must be > 0 (got {})", self.leverage)));
        }
        let expected_edges = self.density * (self.n_investors * self.n_assets) as f64;
        if expected_edges < self.n_investors.max(self.n_assets) as f64 {
            return Err(Error::param(
                "density",
                format!(
                    "density*n_investors*n_assets = {expected_edges} is below max(n_investors, n_assets)"
                ),
            ));
        }
        Ok(())
    }
}

const MAX_REPAIR_ROUNDS: usize = 8;

/// Random bipartite market with unit prices and equities fixed by leverage.
///
/// Edges are placed independently with probability `density`; isolated
/// investors and assets then receive one uniformly random edge each.
pub fn build_synthetic_network(spec: &SyntheticSpec) -> Result<MarketNetwork> {
    spec.validate()?;
    let (n, m) = (spec.n_investors, spec.n_assets);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw_weight = |rng: &mut ChaCha8Rng| {
        if spec.constant_weights {
            spec.weight_scale
        } else {
            // gen() is in [0, 1), so 1 - u is in (0, 1].
            (1.0 - rng.gen::<f64>()) * spec.weight_scale
        }
    };

    let mut holdings = vec![0.0; n * m];
    for h in holdings.iter_mut() {
        if rng.gen_bool(spec.density) {
            *h = draw_weight(&mut rng);
        }
    }

    for _ in 0..MAX_REPAIR_ROUNDS {
        let mut repaired = false;
        for i in 0..n {
            if holdings[i * m..(i + 1) * m].iter().all(|&a| a == 0.0) {
                let mu = rng.gen_range(0..m);
                holdings[i * m + mu] = draw_weight(&mut rng);
                repaired = true;
            }
        }
        for mu in 0..m {
            if (0..n).all(|i| holdings[i * m + mu] == 0.0) {
                let i = rng.gen_range(0..n);
                holdings[i * m + mu] = draw_weight(&mut rng);
                repaired = true;
            }
        }
        if !repaired {
            let prices = vec![1.0; m];
            let equities = portfolio_values(m, &holdings, &prices)
                .into_iter()
                .map(|v| v / spec.leverage)
                .collect();
            return MarketNetwork::new(n, m, holdings, prices, equities);
        }
    }
    Err(Error::Generation(format!(
        "isolated nodes remain after {MAX_REPAIR_ROUNDS} repair rounds"
    )))
}

/// Delta shock to one investor's equity: `E_i -> E_i (1 + magnitude)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockSpec {
    pub investor: usize,
    pub magnitude: f64,
}

impl ShockSpec {
    pub fn validate(&self, n_investors: usize) -> Result<()> {
        if !(self.magnitude.is_finite() && self.magnitude > -1.0) {
            return Err(Error::param(
                "shock.magnitude",
                format!("must be > -1 (got {})", self.magnitude),
            ));
        }
        if self.investor >= n_investors {
            return Err(Error::param(
                "shock.investor",
                format!("index {} out of range for {} investors", self.investor, n_investors),
            ));
        }
        Ok(())
    }
}

/// Every dynamical variable at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub t: f64,
    pub n_investors: usize,
    pub n_assets: usize,
    /// Row-major `n_investors x n_assets`.
    pub holdings: Vec<f64>,
    /// Row-major `n_investors x n_assets`.
    pub holdings_velocity: Vec<f64>,
    pub prices: Vec<f64>,
    /// `u = dp/dt`.
    pub returns: Vec<f64>,
    pub equities: Vec<f64>,
    /// `dE/dt` as reported by the engine for this sample.
    pub equity_rate: Vec<f64>,
    pub alive: Vec<bool>,
    /// Assets absorbed at the price floor.
    pub floored: Vec<bool>,
}

impl MarketState {
    /// The network at rest: zero velocities, everyone alive.
    pub fn at_rest(network: &MarketNetwork) -> Self {
        let (n, m) = (network.n_investors, network.n_assets);
        MarketState {
            t: 0.0,
            n_investors: n,
            n_assets: m,
            holdings: network.holdings.clone(),
            holdings_velocity: vec![0.0; n * m],
            prices: network.prices.clone(),
            returns: vec![0.0; m],
            equities: network.equities.clone(),
            equity_rate: vec![0.0; n],
            alive: network.equities.iter().map(|&e| e > 0.0).collect(),
            floored: vec![false; m],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_investors, self.n_assets);
        check_len("holdings", n * m, self.holdings.len())?;
        check_len("holdings_velocity", n * m, self.holdings_velocity.len())?;
        check_len("prices", m, self.prices.len())?;
        check_len("returns", m, self.returns.len())?;
        check_len("equities", n, self.equities.len())?;
        check_len("equity_rate", n, self.equity_rate.len())?;
        check_len("alive", n, self.alive.len())?;
        check_len("floored", m, self.floored.len())?;
        Ok(())
    }

    pub fn holding(&self, investor: usize, asset: usize) -> f64 {
        self.holdings[investor * self.n_assets + asset]
    }

    pub fn velocity(&self, investor: usize, asset: usize) -> f64 {
        self.holdings_velocity[investor * self.n_assets + asset]
    }

    /// `sum_mu A_{i mu} u_mu` for investor `i`.
    pub fn trading_gain(&self, investor: usize) -> f64 {
        let m = self.n_assets;
        self.holdings[investor * m..(investor + 1) * m]
            .iter()
            .zip(&self.returns)
            .map(|(a, u)| a * u)
            .sum()
    }

    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: MarketState = serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        state.validate()?;
        Ok(state)
    }
}

/// Post-shock state at `t = 0+`.
///
/// The delta shock is integrated across `t = 0`: the shocked investor's
/// equity jumps by `(1 + f0)` and its holdings acquire the velocity
/// `(beta / tau_b) A ln(1 + f0)`. Returns start at zero everywhere.
pub fn apply_shock(
    network: &MarketNetwork,
    shock: &ShockSpec,
    params: &ModelParams,
) -> Result<MarketState> {
    network.validate()?;
    params.validate()?;
    shock.validate(network.n_investors)?;

    let mut state = MarketState::at_rest(network);
    let m = network.n_assets;
    let i = shock.investor;
    let jump = (1.0 + shock.magnitude).ln();
    state.equities[i] *= 1.0 + shock.magnitude;
    let rate = params.beta / params.tau_b * jump;
    for mu in 0..m {
        state.holdings_velocity[i * m + mu] = rate * state.holdings[i * m + mu];
    }
    Ok(state)
}

/// `dE_i/dt - sum_mu A_{i mu} u_mu - f_i` per investor; zero for the dead.
pub fn equity_bookkeeping_residual(state: &MarketState, external_force: &[f64]) -> Result<Vec<f64>> {
    state.validate()?;
    check_len("external_force", state.n_investors, external_force.len())?;
    Ok((0..state.n_investors)
        .map(|i| {
            if state.alive[i] {
                state.equity_rate[i] - state.trading_gain(i) - external_force[i]
            } else {
                0.0
            }
        })
        .collect())
}
