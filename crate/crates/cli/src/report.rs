//! Run reports as JSON and CSV.

use std::io::Write;
use std::path::Path;

use auctioneer::allocators::{FrameworkRun, InstanceDump, PhaseTimings, PhaseTurns};
use auctioneer::canonical::{digest, Digest32};
use auctioneer::{social_welfare, BidVector, Fixed, Outcome};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const TIMING_NOTE: &str = "durations are host wall-clock around each in-process phase; \
message passing is simulated, so no network latency is included and replicas of the same task \
computed with identical inputs are executed once";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMillis {
    pub bid_agreement: f64,
    pub validation: f64,
    pub coin: f64,
    pub tasks: f64,
    pub gather: f64,
}

impl From<PhaseTimings> for PhaseMillis {
    fn from(t: PhaseTimings) -> Self {
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        PhaseMillis {
            bid_agreement: ms(t.bid_agreement),
            validation: ms(t.validation),
            coin: ms(t.coin),
            tasks: ms(t.tasks),
            gather: ms(t.gather),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnCounts {
    pub bid_agreement: u64,
    pub validation: u64,
    pub coin: u64,
    pub gather: u64,
}

impl From<PhaseTurns> for TurnCounts {
    fn from(t: PhaseTurns) -> Self {
        TurnCounts {
            bid_agreement: t.bid_agreement,
            validation: t.validation,
            coin: t.coin,
            gather: t.gather,
        }
    }
}

impl TurnCounts {
    pub fn total(&self) -> u64 {
        self.bid_agreement + self.validation + self.coin + self.gather
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub seed: u64,
    pub aborted: bool,
    /// Zero for aborted rounds.
    pub welfare: Fixed,
    pub user_payments: Fixed,
    pub provider_payments: Fixed,
    pub durations_ms: PhaseMillis,
    pub turns: TurnCounts,
    pub instance: InstanceDump,
    pub outcome: Outcome,
}

impl RoundReport {
    pub fn new(round: usize, seed: u64, bids: &BidVector, capacities: &[Fixed], run: &FrameworkRun) -> Self {
        let outcome = run.outcome();
        let (welfare, up, pp) = match &outcome {
            Outcome::Solution { allocation, payments } => (
                social_welfare(allocation, bids).unwrap_or(Fixed::ZERO),
                payments.total_user(),
                payments.total_provider(),
            ),
            Outcome::Abort => (Fixed::ZERO, Fixed::ZERO, Fixed::ZERO),
        };
        RoundReport {
            round,
            seed,
            aborted: outcome.is_abort(),
            welfare,
            user_payments: up,
            provider_payments: pp,
            durations_ms: run.timings().into(),
            turns: run.turns().into(),
            instance: InstanceDump::new(bids, capacities),
            outcome,
        }
    }

    /// Digest of everything except timings; equal across replays.
    pub fn fingerprint(&self) -> Digest32 {
        let mut r = self.clone();
        r.durations_ms = PhaseMillis::default();
        digest("round-report", &serde_json::to_vec(&r).expect("report serializes"))
    }

    /// Welfare recomputed from the stored instance and allocation.
    pub fn recomputed_welfare(&self) -> Result<Fixed, CliError> {
        match &self.outcome {
            Outcome::Solution { allocation, .. } => Ok(social_welfare(allocation, &self.instance.bids()?)?),
            Outcome::Abort => Ok(Fixed::ZERO),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub rounds: usize,
    pub solutions: usize,
    pub aborts: usize,
    pub welfare: Fixed,
    pub user_payments: Fixed,
    pub provider_payments: Fixed,
    pub turns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub timing_note: String,
    pub config: ExperimentConfig,
    pub totals: Totals,
    pub rounds: Vec<RoundReport>,
}

impl RunReport {
    pub fn new(config: ExperimentConfig, rounds: Vec<RoundReport>) -> Self {
        let mut t = Totals {
            rounds: rounds.len(),
            ..Default::default()
        };
        for r in &rounds {
            if r.aborted {
                t.aborts += 1;
            } else {
                t.solutions += 1;
            }
            t.welfare += r.welfare;
            t.user_payments += r.user_payments;
            t.provider_payments += r.provider_payments;
            t.turns += r.turns.total();
        }
        RunReport {
            timing_note: TIMING_NOTE.into(),
            config,
            totals: t,
            rounds,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "round",
            "seed",
            "aborted",
            "welfare",
            "user_payments",
            "provider_payments",
            "bid_agreement_ms",
            "validation_ms",
            "coin_ms",
            "tasks_ms",
            "gather_ms",
            "turns",
        ])
        .map_err(csv_err)?;
        for r in &self.rounds {
            let d = r.durations_ms;
            w.write_record([
                r.round.to_string(),
                r.seed.to_string(),
                r.aborted.to_string(),
                r.welfare.to_string(),
                r.user_payments.to_string(),
                r.provider_payments.to_string(),
                format!("{:.3}", d.bid_agreement),
                format!("{:.3}", d.validation),
                format!("{:.3}", d.coin),
                format!("{:.3}", d.tasks),
                format!("{:.3}", d.gather),
                r.turns.total().to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Writes `<prefix><stem>.json` and `<prefix><stem>.csv`.
    pub fn save(&self, cfg: &ExperimentConfig, stem: &str) -> Result<(), CliError> {
        std::fs::create_dir_all(&cfg.output.dir)?;
        std::fs::write(cfg.output_path(&format!("{stem}.json")), self.to_json())?;
        self.write_csv(std::fs::File::create(cfg.output_path(&format!("{stem}.csv")))?)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
