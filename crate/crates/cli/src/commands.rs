//! The subcommands. Each returns a report plus whether it passed; `main`
//! turns that into an exit status.

use std::time::Instant;

use auctioneer::allocators::{
    local_execute, run_framework, AuctionKind, AuctionSpec, FrameworkRun, ProviderBehavior, RunOptions,
};
use auctioneer::blocks::ProtocolFlaws;
use auctioneer::canonical::to_canonical;
use auctioneer::gametheory::{
    check_bidder_truthfulness, check_correct_simulation, check_k_resilience, strategy_library, CorrectnessReport,
    EquilibriumReport, Lattice, SampleConfig, SimulationCase, TruthfulnessReport,
};
use auctioneer::{BidVector, Fixed, Outcome};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::instance::{gen_game, gen_instance};
use crate::report::{csv_err, write_text, RoundReport, RunReport, TIMING_NOTE};
use crate::CliError;

pub fn run_options(cfg: &ExperimentConfig, seed: u64) -> RunOptions {
    let mut o = RunOptions::new(seed);
    o.max_delay = cfg.run.max_delay;
    o.threaded = cfg.run.threaded;
    o
}

/// One all-honest framework execution of round `round`.
pub fn run_round(cfg: &ExperimentConfig, round: usize) -> Result<(BidVector, AuctionSpec, FrameworkRun), CliError> {
    let seed = cfg.round_seed(round);
    let (bids, caps) = gen_instance(cfg, seed);
    let spec = cfg.spec(caps);
    let views = vec![bids.clone(); spec.m];
    let behaviors = vec![ProviderBehavior::default(); spec.m];
    let run = run_framework(&views, &spec, &behaviors, &run_options(cfg, seed))?;
    Ok((bids, spec, run))
}

/// Report for one round, rebuilt from `(config, round)` alone.
pub fn replay_round(cfg: &ExperimentConfig, round: usize) -> Result<RoundReport, CliError> {
    let (bids, spec, run) = run_round(cfg, round)?;
    Ok(RoundReport::new(
        round,
        cfg.round_seed(round),
        &bids,
        &spec.capacities_for(&bids),
        &run,
    ))
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<(RunReport, bool), CliError> {
    let rounds = (0..cfg.run.rounds)
        .into_par_iter()
        .map(|r| replay_round(cfg, r))
        .collect::<Result<Vec<_>, _>>()?;
    let report = RunReport::new(cfg.clone(), rounds);
    let passed = report.totals.aborts == 0;
    Ok((report, passed))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMismatch {
    pub round: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleReport {
    pub rounds: usize,
    pub equal: usize,
    pub mismatches: Vec<OracleMismatch>,
}

/// Byte comparison of every simulated round with the trusted auctioneer on
/// the same instance and seed. Instances are also written out as JSON under
/// `<dir>/instances/` for external oracles.
pub fn oracle_compare(cfg: &ExperimentConfig) -> Result<(OracleReport, bool), CliError> {
    let results = (0..cfg.run.rounds)
        .into_par_iter()
        .map(|r| -> Result<(usize, bool, String), CliError> {
            let (bids, spec, run) = run_round(cfg, r)?;
            let seed = cfg.round_seed(r);
            let (x, p) = local_execute(&bids, &spec, seed)?;
            let equal = to_canonical(&run.outcome()) == to_canonical(&Outcome::solution(x, p));
            let dump = auctioneer::allocators::InstanceDump::new(&bids, &spec.capacities_for(&bids));
            Ok((r, equal, serde_json::to_string_pretty(&dump).expect("dump serializes")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = OracleReport {
        rounds: results.len(),
        equal: 0,
        mismatches: Vec::new(),
    };
    for (r, equal, dump) in results {
        write_text(
            &cfg.output
                .dir
                .join("instances")
                .join(format!("{}round-{r:04}.json", cfg.output.prefix)),
            &dump,
        )?;
        if equal {
            report.equal += 1;
        } else {
            report.mismatches.push(OracleMismatch {
                round: r,
                seed: cfg.round_seed(r),
            });
        }
    }
    let passed = report.mismatches.is_empty();
    Ok((report, passed))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationResult {
    pub flaw: String,
    pub flagged: bool,
}

/// Whether a planted flaw touches a block the auction runs. The double
/// auction has no coin and no data transfer.
pub fn flaw_applies(flaws: &ProtocolFlaws, kind: AuctionKind) -> bool {
    kind == AuctionKind::Standard || flaws.skip_input_validation
}

/// The planted protocol flaws, one per entry.
pub fn mutation_suite() -> Vec<(&'static str, ProtocolFlaws)> {
    vec![
        (
            "single_sender_transfer",
            ProtocolFlaws {
                single_sender_transfer: true,
                ..ProtocolFlaws::none()
            },
        ),
        (
            "unchecked_coin_range",
            ProtocolFlaws {
                unchecked_coin_range: true,
                ..ProtocolFlaws::none()
            },
        ),
        (
            "skip_input_validation",
            ProtocolFlaws {
                skip_input_validation: true,
                ..ProtocolFlaws::none()
            },
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub correct_simulation: CorrectnessReport,
    pub resilience: EquilibriumReport,
    pub mutations: Vec<MutationResult>,
    pub truthfulness: Option<TruthfulnessReport>,
    pub passed: bool,
}

impl CheckReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "correct simulation: {}/{} equal, {} mismatches\n",
            self.correct_simulation.equal,
            self.correct_simulation.runs,
            self.correct_simulation.mismatches.len()
        );
        s += &self.resilience.to_table();
        for m in &self.mutations {
            s += &format!(
                "mutation {}: {}\n",
                m.flaw,
                if m.flagged { "flagged" } else { "MISSED" }
            );
        }
        if let Some(t) = &self.truthfulness {
            s += &format!(
                "truthfulness: {} deviations over {} instances, {} profitable (value {}, demand {})\n",
                t.deviations_checked,
                t.instances,
                t.profitable(),
                t.profitable_value,
                t.profitable_demand
            );
        }
        s += if self.passed { "PASS\n" } else { "FAIL\n" };
        s
    }
}

pub fn check(cfg: &ExperimentConfig) -> Result<(CheckReport, bool), CliError> {
    let correct = if cfg.auction.kind == AuctionKind::Standard {
        // capacities differ per instance, so each case gets its own spec
        let mut total = CorrectnessReport {
            runs: 0,
            equal: 0,
            validity_checked: 0,
            mismatches: Vec::new(),
        };
        for r in 0..cfg.run.rounds {
            let seed = cfg.round_seed(r);
            let (bids, caps) = gen_instance(cfg, seed);
            let rep = check_correct_simulation(
                &cfg.spec(caps),
                &[SimulationCase::consistent(bids, cfg.auction.m)],
                &[seed],
            )?;
            total.runs += rep.runs;
            total.equal += rep.equal;
            total.validity_checked += rep.validity_checked;
            total.mismatches.extend(rep.mismatches);
        }
        total
    } else {
        let cases: Vec<SimulationCase> = (0..cfg.run.rounds)
            .map(|r| SimulationCase::consistent(gen_instance(cfg, cfg.round_seed(r)).0, cfg.auction.m))
            .collect();
        check_correct_simulation(&cfg.spec(Vec::new()), &cases, &[cfg.run.seed])?
    };

    let game = gen_game(cfg, cfg.run.seed);
    let library = strategy_library();
    let mut sc = SampleConfig::new(cfg.check.samples, cfg.run.seed);
    sc.max_delay = cfg.run.max_delay;
    let resilience = check_k_resilience(&game, cfg.auction.k, &library, &sc, cfg.check.tolerance)?;

    let mut mutations = Vec::new();
    if cfg.check.mutations {
        for (name, flaws) in mutation_suite() {
            if !flaw_applies(&flaws, cfg.auction.kind) {
                continue;
            }
            let mut sc = sc.clone();
            sc.flaws = flaws;
            let rep = check_k_resilience(&game, cfg.auction.k, &library, &sc, cfg.check.tolerance)?;
            mutations.push(MutationResult {
                flaw: name.into(),
                flagged: !rep.passed(),
            });
        }
    }

    let truthfulness = if cfg.check.truthfulness {
        let mut lattice = Lattice::five_point();
        lattice.max_users = cfg.check.lattice_users;
        let template = AuctionSpec::standard(1, 1, 0, vec![Fixed::ONE], cfg.standard_config());
        Some(check_bidder_truthfulness(cfg.auction.kind, &lattice, &template)?)
    } else {
        None
    };

    let passed = correct.passed()
        && resilience.passed()
        && mutations.iter().all(|m| m.flagged)
        && truthfulness.as_ref().is_none_or(|t| t.profitable() == 0);
    let report = CheckReport {
        correct_simulation: correct,
        resilience,
        mutations,
        truthfulness,
        passed,
    };
    Ok((report, passed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub groups: usize,
    pub median_task_secs: f64,
    pub median_total_secs: f64,
    /// Median p=1 task time divided by this row's; 1 for p=1.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub timing_note: String,
    pub threads_available: usize,
    pub warnings: Vec<String>,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_string(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn speedup(&self, n: usize, p: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n && r.p == p).map(|r| r.speedup)
    }
}

/// The auction spec used at parallelism level `p`: `k = m/p - 1` so that
/// `m/(k+1) = p`, with one payment group per parallel lane. Level 1 is the
/// trusted auctioneer itself.
pub fn bench_spec(cfg: &ExperimentConfig, p: usize, caps: Vec<Fixed>) -> AuctionSpec {
    let m = cfg.auction.m;
    let mut c = cfg.clone();
    if p <= 1 {
        c.auction.k = 0;
        c.auction.groups = 1;
    } else {
        c.auction.k = m / p - 1;
        c.auction.groups = p;
    }
    c.spec(caps)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times the standard auction at each parallelism level. Instances are
/// shared across levels; rounds run one at a time so timings do not compete.
pub fn bench(cfg: &ExperimentConfig) -> Result<(BenchReport, bool), CliError> {
    if cfg.auction.kind != AuctionKind::Standard {
        return Err(CliError::Usage("auction.kind: bench needs the standard auction".into()));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut warnings = Vec::new();
    for &p in &cfg.bench.levels {
        if p > threads {
            warnings.push(format!("p={p} exceeds the {threads} hardware thread(s) available"));
        }
    }
    let mut rows = Vec::new();
    for &n in &cfg.bench.sizes {
        let mut c = cfg.clone();
        c.auction.n = n;
        let instances: Vec<(u64, BidVector, Vec<Fixed>)> = (0..cfg.bench.repeats)
            .map(|r| {
                let seed = c.round_seed(r);
                let (b, caps) = gen_instance(&c, seed);
                (seed, b, caps)
            })
            .collect();
        let mut base = None;
        for &p in &cfg.bench.levels {
            let mut task = Vec::new();
            let mut total = Vec::new();
            let spec = bench_spec(&c, p, instances[0].2.clone());
            for (seed, bids, caps) in &instances {
                let mut spec = spec.clone();
                spec.capacities = caps.clone();
                if p <= 1 {
                    let t = Instant::now();
                    local_execute(bids, &spec, *seed)?;
                    let secs = t.elapsed().as_secs_f64();
                    task.push(secs);
                    total.push(secs);
                } else {
                    let mut opts = run_options(&c, *seed);
                    opts.threaded = true;
                    let views = vec![bids.clone(); spec.m];
                    let behaviors = vec![ProviderBehavior::default(); spec.m];
                    let t = Instant::now();
                    let run = run_framework(&views, &spec, &behaviors, &opts)?;
                    total.push(t.elapsed().as_secs_f64());
                    task.push(run.timings().tasks.as_secs_f64());
                }
            }
            let med = median(task);
            let base_time = *base.get_or_insert(med);
            rows.push(BenchRow {
                n,
                p,
                k: spec.k,
                groups: spec.standard.groups,
                median_task_secs: med,
                median_total_secs: median(total),
                speedup: base_time / med,
            });
        }
    }
    let report = BenchReport {
        timing_note: TIMING_NOTE.into(),
        threads_available: threads,
        warnings,
        rows,
    };
    Ok((report, true))
}
