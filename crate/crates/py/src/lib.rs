//! Python bindings. Quantities cross the boundary as decimal strings so they
//! stay exact; results come back the same way.

use auctioneer::allocators::{local_execute, AuctionSpec, Solver, StandardAuctionConfig};
use auctioneer::gametheory::honest_coin;
use auctioneer::{Allocation, Bid, BidVector, Fixed, PaymentVector, ProviderBid};
use auctioneer_cli::commands::replay_round;
use auctioneer_cli::{CliError, ExperimentConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Solution = (Vec<Vec<String>>, Vec<String>, Vec<String>);

fn parse(s: &str) -> PyResult<Fixed> {
    s.parse().map_err(|e| PyValueError::new_err(format!("{s:?}: {e}")))
}

fn core_err(e: auctioneer::CoreError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Usage(msg) => PyValueError::new_err(msg),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn user_bids(users: &[(String, String)]) -> PyResult<Vec<Bid>> {
    users
        .iter()
        .enumerate()
        .map(|(i, (v, q))| Ok(Bid::new(i as u32, parse(v)?, parse(q)?)))
        .collect()
}

fn to_strings(x: &Allocation, p: &PaymentVector) -> Solution {
    let rows = (0..x.providers())
        .map(|j| x.row(j).iter().map(Fixed::to_string).collect())
        .collect();
    let s = |v: &[Fixed]| v.iter().map(Fixed::to_string).collect();
    (rows, s(&p.user_payments), s(&p.provider_payments))
}

/// Double auction on `(unit_value, demand)` users and `(unit_cost, capacity)`
/// providers. Returns `(allocation rows, user payments, provider payments)`.
#[pyfunction]
fn double_auction(users: Vec<(String, String)>, providers: Vec<(String, String)>) -> PyResult<Solution> {
    let ps = providers
        .iter()
        .enumerate()
        .map(|(j, (c, cap))| Ok(ProviderBid::new(j as u32, parse(c)?, parse(cap)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let bids = BidVector::double(user_bids(&users)?, ps);
    let spec = AuctionSpec::double(providers.len(), users.len(), 0);
    let (x, p) = local_execute(&bids, &spec, 0).map_err(core_err)?;
    Ok(to_strings(&x, &p))
}

/// Standard auction with VCG payments on `(unit_value, demand)` users and
/// the given provider capacities.
#[pyfunction]
#[pyo3(signature = (users, capacities, solver = "exact", epsilon = "0.1", seed = 0))]
fn standard_auction(
    users: Vec<(String, String)>,
    capacities: Vec<String>,
    solver: &str,
    epsilon: &str,
    seed: u64,
) -> PyResult<Solution> {
    let solver = match solver {
        "exact" => Solver::Exact,
        "local-search" => Solver::LocalSearch,
        other => return Err(PyValueError::new_err(format!("unknown solver {other:?}"))),
    };
    let caps = capacities.iter().map(|c| parse(c)).collect::<PyResult<Vec<_>>>()?;
    let cfg = StandardAuctionConfig {
        epsilon: parse(epsilon)?,
        solver,
        groups: 1,
    };
    let spec = AuctionSpec::standard(caps.len(), users.len(), 0, caps, cfg);
    let (x, p) = local_execute(&BidVector::standard(user_bids(&users)?), &spec, seed).map_err(core_err)?;
    Ok(to_strings(&x, &p))
}

/// Runs one round of an experiment config (TOML text) through the simulated
/// distributed auctioneer and returns the round report as JSON.
#[pyfunction]
fn simulate_round(config_toml: &str, round: usize) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(cli_err)?;
    let report = replay_round(&cfg, round).map_err(cli_err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Validates a config; raises `ValueError` naming the offending field.
#[pyfunction]
fn validate_config(config_toml: &str) -> PyResult<()> {
    ExperimentConfig::from_toml(config_toml).map(|_| ()).map_err(cli_err)
}

#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// The common coin an all-honest run with `m` providers and this seed yields.
#[pyfunction]
fn common_coin(seed: u64, m: usize) -> String {
    honest_coin(seed, m).to_string()
}

#[pymodule]
fn pyauctioneer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(double_auction, m)?)?;
    m.add_function(wrap_pyfunction!(standard_auction, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_round, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(common_coin, m)?)?;
    Ok(())
}
