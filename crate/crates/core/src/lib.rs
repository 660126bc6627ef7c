//! Shock propagation on bipartite investor/asset markets.
//!
//! Investors hold assets whose prices follow aggregate demand, and holdings
//! chase equity growth. Whether a delta shock to one investor's equity dies
//! out depends mostly on the product of the two feedback strengths.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod market;
pub mod meanfield;

pub use dynamics::{integrate, integrate_observed, IntegratorConfig, Terminal, Trajectory};
pub use error::{Error, Node, Result};
pub use market::{
    apply_shock, build_synthetic_network, MarketNetwork, MarketState, ModelParams, ShockSpec,
    SyntheticSpec,
};
