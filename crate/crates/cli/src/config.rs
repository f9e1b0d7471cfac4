//! Experiment configuration, read from a TOML file.
//!
//! Fixed-point quantities are written as decimal strings (`"0.75"`) so that
//! every value in a config file is exact.

use std::path::{Path, PathBuf};

use auctioneer::allocators::{AuctionKind, AuctionSpec, Solver, StandardAuctionConfig};
use auctioneer::{fx, Fixed};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "AUCTIONEER_SEED";
pub const OUT_DIR_ENV: &str = "AUCTIONEER_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuctionSection {
    pub kind: AuctionKind,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Payment task groups `c` (standard auction).
    pub groups: usize,
    pub solver: Solver,
    pub epsilon: Fixed,
    /// Read-only: if present it must equal `m / (k + 1)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
}

impl Default for AuctionSection {
    fn default() -> Self {
        AuctionSection {
            kind: AuctionKind::Double,
            m: 4,
            n: 20,
            k: 1,
            groups: 1,
            solver: Solver::Exact,
            epsilon: fx("0.1"),
            parallelism: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub rounds: usize,
    /// Run payment tasks on separate threads.
    pub threaded: bool,
    pub max_delay: u32,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            rounds: 10,
            threaded: false,
            max_delay: 4,
        }
    }
}

/// Closed sampling ranges. A zero lower bound on demands or costs is raised
/// to one ulp, since both must be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributionSection {
    pub value_range: [Fixed; 2],
    pub demand_range: [Fixed; 2],
    pub cost_range: [Fixed; 2],
    /// Double auction: factor applied to each provider's share of total demand.
    pub double_capacity_scale: [Fixed; 2],
    /// Standard auction: factor applied to the load demanded at each provider.
    pub standard_capacity_scale: [Fixed; 2],
}

impl Default for DistributionSection {
    fn default() -> Self {
        DistributionSection {
            value_range: [fx("0.75"), fx("1.25")],
            demand_range: [fx("0"), fx("1")],
            cost_range: [fx("0"), fx("1")],
            double_capacity_scale: [fx("0.5"), fx("1.5")],
            standard_capacity_scale: [fx("0"), fx("0.25")],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    /// Monte Carlo samples per strategy and coalition.
    pub samples: usize,
    /// Added to the 95% half-width before a gain counts as a violation.
    pub tolerance: f64,
    /// Also run the planted-flaw suite and require every flaw that applies to
    /// the auction kind to be flagged.
    pub mutations: bool,
    pub truthfulness: bool,
    /// Largest number of users in the truthfulness lattice.
    pub lattice_users: usize,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection {
            samples: 30,
            tolerance: 1e-9,
            mutations: true,
            truthfulness: true,
            lattice_users: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub levels: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            sizes: vec![10, 20, 40],
            repeats: 3,
            levels: vec![1, 2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub prefix: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            prefix: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub auction: AuctionSection,
    pub run: RunSection,
    pub distribution: DistributionSection,
    pub check: CheckSection,
    pub bench: BenchSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies environment overrides, validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config: cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), CliError> {
        if let Some(s) = get(SEED_ENV) {
            self.run.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}: not an unsigned integer: {s:?}")))?;
        }
        if let Some(d) = get(OUT_DIR_ENV) {
            self.output.dir = PathBuf::from(d);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn parallelism(&self) -> usize {
        self.auction.m / (self.auction.k + 1)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        let a = &self.auction;
        if a.m <= 2 * a.k {
            return usage(format!("auction.m: need m > 2k, got m={} k={}", a.m, a.k));
        }
        if let Some(p) = a.parallelism {
            if p != self.parallelism() {
                return usage(format!(
                    "auction.parallelism: is derived as m/(k+1) = {}, got {p}",
                    self.parallelism()
                ));
            }
        }
        if self.run.rounds == 0 {
            return usage("run.rounds: must be at least 1".into());
        }
        if self.run.max_delay == 0 {
            return usage("run.max_delay: must be at least 1".into());
        }
        let d = &self.distribution;
        for (name, [lo, hi]) in [
            ("distribution.value_range", d.value_range),
            ("distribution.demand_range", d.demand_range),
            ("distribution.cost_range", d.cost_range),
            ("distribution.double_capacity_scale", d.double_capacity_scale),
            ("distribution.standard_capacity_scale", d.standard_capacity_scale),
        ] {
            if lo.is_negative() || lo > hi {
                return usage(format!("{name}: need 0 <= lo <= hi, got [{lo}, {hi}]"));
            }
        }
        if self.check.samples < 30 {
            return usage(format!("check.samples: need at least 30, got {}", self.check.samples));
        }
        if self.check.tolerance.is_nan() || self.check.tolerance < 0.0 {
            return usage("check.tolerance: must be nonnegative".into());
        }
        if self.bench.repeats == 0 {
            return usage("bench.repeats: must be at least 1".into());
        }
        if self.bench.levels.iter().any(|&p| p == 0 || p > a.m) {
            return usage(format!("bench.levels: each level must lie in 1..={}", a.m));
        }
        if a.kind == AuctionKind::Standard {
            if a.groups == 0 || a.groups * (a.k + 1) > a.m {
                return usage(format!(
                    "auction.groups: need 1 <= c and c*(k+1) <= m, got c={} k={} m={}",
                    a.groups, a.k, a.m
                ));
            }
            if a.epsilon <= Fixed::ZERO || a.epsilon >= Fixed::ONE {
                return usage(format!("auction.epsilon: must lie in (0, 1), got {}", a.epsilon));
            }
        }
        Ok(())
    }

    pub fn standard_config(&self) -> StandardAuctionConfig {
        StandardAuctionConfig {
            epsilon: self.auction.epsilon,
            solver: self.auction.solver,
            groups: self.auction.groups,
        }
    }

    /// The auction spec for an instance with the given capacities.
    pub fn spec(&self, capacities: Vec<Fixed>) -> AuctionSpec {
        let a = &self.auction;
        match a.kind {
            AuctionKind::Double => AuctionSpec::double(a.m, a.n, a.k),
            AuctionKind::Standard => AuctionSpec::standard(a.m, a.n, a.k, capacities, self.standard_config()),
        }
    }

    /// Seed of round `r`.
    pub fn round_seed(&self, r: usize) -> u64 {
        self.run.seed.wrapping_add(r as u64)
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.output.dir.join(format!("{}{name}", self.output.prefix))
    }
}
