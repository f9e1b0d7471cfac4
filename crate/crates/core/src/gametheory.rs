//! Empirical game-theoretic checks: expected utilities under deviation
//! strategies, coalition resilience, correct simulation of the trusted
//! auctioneer, and bidder truthfulness.
//!
//! These are falsification harnesses. A clean report means no strategy in the
//! library gained anything on the sampled schedules, not that none exists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::allocators::{
    local_execute, pinned_coin, run_framework, standard_auction_allocate, vcg_payment, AuctionKind, AuctionSpec,
    FrameworkRun, OutputBehavior, ProviderBehavior, RunOptions,
};
use crate::blocks::{
    coin_from_seed, coin_share, run_block, BlockOutput, CoinBehavior, CommonCoin, ConsensusBehavior, DistributionSpec,
    Node, ProtocolFlaws,
};
use crate::canonical::{canonical_digest, to_canonical, Digest32};
use crate::encoding::{decode_bid, encode_bid};
use crate::error::{CoreError, Result};
use crate::fixed::{fx, Fixed};
use crate::simnet::{gen_fair_schedule, ProviderId, SchedulePolicy};
use crate::types::{user_value, utility, Bid, BidVector, Outcome, Role};

/// A set of colluding providers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coalition {
    members: BTreeSet<ProviderId>,
}

impl Coalition {
    pub fn new(members: impl IntoIterator<Item = ProviderId>, m: usize) -> Result<Self> {
        let members: BTreeSet<_> = members.into_iter().collect();
        if members.is_empty() || members.iter().any(|&j| j >= m) {
            return Err(CoreError::InvalidArgument(format!(
                "bad coalition {members:?} for m={m}"
            )));
        }
        Ok(Coalition { members })
    }

    pub fn members(&self) -> &BTreeSet<ProviderId> {
        &self.members
    }

    pub fn contains(&self, j: ProviderId) -> bool {
        self.members.contains(&j)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// All coalitions of size `1..=k` among `m` providers, smallest first.
pub fn coalitions(m: usize, k: usize) -> Vec<Coalition> {
    let mut out = Vec::new();
    fn rec(start: usize, m: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Coalition>) {
        if left == 0 {
            out.push(Coalition {
                members: cur.iter().copied().collect(),
            });
            return;
        }
        for j in start..m {
            cur.push(j);
            rec(j + 1, m, left - 1, cur, out);
            cur.pop();
        }
    }
    for size in 1..=k.min(m) {
        rec(0, m, size, &mut Vec::new(), &mut out);
    }
    out
}

/// The deviation classes of the strategy library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Follows the protocol; the control row.
    Identity,
    /// Feeds a modified vector into input validation.
    LieInput,
    /// Feeds a modified vector into bid agreement only.
    LieAgreementOnly,
    WithholdAll,
    /// Sends complemented bits to half the providers in bid agreement.
    EquivocateConsensus,
    CoinSkipCommit,
    CoinOutOfRange,
    /// Commits to and reveals a fixed share instead of a random one.
    CoinFixed,
    /// Inflates the coalition's revenue in every payment task it sends.
    CorruptTask,
    /// Outputs a solution that pays the coalition more.
    OutputFlip,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Identity => "identity",
            StrategyKind::LieInput => "lie_input",
            StrategyKind::LieAgreementOnly => "lie_agreement_only",
            StrategyKind::WithholdAll => "withhold_all",
            StrategyKind::EquivocateConsensus => "equivocate_consensus",
            StrategyKind::CoinSkipCommit => "coin_skip_commit",
            StrategyKind::CoinOutOfRange => "coin_out_of_range",
            StrategyKind::CoinFixed => "coin_fixed",
            StrategyKind::CorruptTask => "corrupt_task",
            StrategyKind::OutputFlip => "output_flip",
        }
    }

    pub fn all() -> Vec<StrategyKind> {
        use StrategyKind::*;
        vec![
            Identity,
            LieInput,
            LieAgreementOnly,
            WithholdAll,
            EquivocateConsensus,
            CoinSkipCommit,
            CoinOutOfRange,
            CoinFixed,
            CorruptTask,
            OutputFlip,
        ]
    }
}

/// A joint deviation: every coalition member follows the same strategy with a
/// shared view. Behaviour is a deterministic function of the instance,
/// coalition and seed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviationStrategy {
    pub kind: StrategyKind,
}

impl DeviationStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        DeviationStrategy { kind }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Per-provider behaviours for one run.
    pub fn behaviors(&self, game: &Game, coalition: &Coalition, seed: u64) -> Vec<ProviderBehavior> {
        let m = game.spec.m;
        let mut out = vec![ProviderBehavior::default(); m];
        let deviant = match self.kind {
            StrategyKind::Identity => return out,
            StrategyKind::LieInput => ProviderBehavior {
                validation_input: Some(perturb(&game.bids, seed)),
                ..Default::default()
            },
            StrategyKind::LieAgreementOnly => ProviderBehavior {
                agreement_view: Some(perturb(&game.bids, seed)),
                ..Default::default()
            },
            StrategyKind::WithholdAll => ProviderBehavior {
                withhold: true,
                ..Default::default()
            },
            StrategyKind::EquivocateConsensus => ProviderBehavior {
                agreement: ConsensusBehavior::Equivocate {
                    flipped_for: (0..m / 2).collect(),
                },
                ..Default::default()
            },
            StrategyKind::CoinSkipCommit => ProviderBehavior {
                coin: CoinBehavior::SkipCommit,
                ..Default::default()
            },
            StrategyKind::CoinOutOfRange => ProviderBehavior {
                coin: CoinBehavior::Reveal { value: fx("1.5") },
                ..Default::default()
            },
            StrategyKind::CoinFixed => ProviderBehavior {
                coin: CoinBehavior::Reveal { value: Fixed::ZERO },
                ..Default::default()
            },
            StrategyKind::CorruptTask => ProviderBehavior {
                corrupt_tasks: Some(coalition.members().clone()),
                ..Default::default()
            },
            StrategyKind::OutputFlip => {
                let flipped = match local_execute(&game.bids, &game.spec, seed) {
                    Ok((x, mut p)) => {
                        for &j in coalition.members() {
                            p.provider_payments[j] += Fixed::ONE;
                        }
                        Outcome::solution(x, p)
                    }
                    Err(_) => Outcome::Abort,
                };
                ProviderBehavior {
                    output: OutputBehavior::Replace(flipped),
                    ..Default::default()
                }
            }
        };
        for &j in coalition.members() {
            out[j] = deviant.clone();
        }
        out
    }
}

/// The full library, in a fixed order.
pub fn strategy_library() -> Vec<DeviationStrategy> {
    StrategyKind::all().into_iter().map(DeviationStrategy::new).collect()
}

/// Replaces one user's bid with a different valid bid.
fn perturb(bids: &BidVector, seed: u64) -> BidVector {
    let mut out = bids.clone();
    if out.n() == 0 {
        return out;
    }
    let i = (seed % out.n() as u64) as usize;
    let b = out.user_bids[i];
    out.user_bids[i] = if b.neutral {
        Bid::new(i as u32, Fixed::ONE, fx("0.5"))
    } else {
        Bid::new(i as u32, b.unit_value + fx("0.125"), b.demand)
    };
    out
}

/// An auction instance with the bids every bidder truthfully sent to every
/// provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Game {
    pub spec: AuctionSpec,
    pub bids: BidVector,
}

/// Options shared by every Monte Carlo sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleConfig {
    pub samples: usize,
    pub base_seed: u64,
    pub policy: SchedulePolicy,
    pub max_delay: u32,
    pub flaws: ProtocolFlaws,
}

impl SampleConfig {
    pub fn new(samples: usize, base_seed: u64) -> Self {
        SampleConfig {
            samples,
            base_seed,
            policy: SchedulePolicy::RandomFair,
            max_delay: 4,
            flaws: ProtocolFlaws::none(),
        }
    }

    fn seed(&self, s: usize) -> u64 {
        self.base_seed.wrapping_add(s as u64)
    }

    fn options(&self, s: usize) -> RunOptions {
        let mut o = RunOptions::new(self.seed(s));
        o.policy = self.policy;
        o.max_delay = self.max_delay;
        o.flaws = self.flaws;
        o
    }
}

/// A Monte Carlo mean with its 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
    pub samples: usize,
}

fn z95() -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.975)
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Estimate {
            mean,
            half_width: z95() * (var / n.max(1) as f64).sqrt(),
            samples: n,
        }
    }
}

/// One simulated run together with what each provider was told to do.
struct Sample {
    run: FrameworkRun,
    behaviors: Vec<ProviderBehavior>,
}

fn run_samples(
    game: &Game,
    cfg: &SampleConfig,
    profile: &(dyn Fn(u64) -> Vec<ProviderBehavior> + Sync),
) -> Result<Vec<Sample>> {
    let views = vec![game.bids.clone(); game.spec.m];
    (0..cfg.samples)
        .into_par_iter()
        .map(|s| {
            let behaviors = profile(cfg.seed(s));
            let run = run_framework(&views, &game.spec, &behaviors, &cfg.options(s))?;
            Ok(Sample { run, behaviors })
        })
        .collect()
}

fn provider_utilities(game: &Game, outcome: &Outcome) -> Result<Vec<Fixed>> {
    (0..game.spec.m)
        .map(|j| utility(Role::Provider, j, outcome, &game.bids))
        .collect()
}

/// Mean utility of every provider when providers behave as `profile(seed)`.
pub fn expected_utility(
    game: &Game,
    cfg: &SampleConfig,
    profile: &(dyn Fn(u64) -> Vec<ProviderBehavior> + Sync),
) -> Result<Vec<Estimate>> {
    if cfg.samples < 30 {
        return Err(CoreError::InvalidArgument(format!(
            "need at least 30 samples, got {}",
            cfg.samples
        )));
    }
    let samples = run_samples(game, cfg, profile)?;
    let per_sample = samples
        .iter()
        .map(|s| provider_utilities(game, &s.run.outcome()))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..game.spec.m)
        .map(|j| Estimate::from_samples(&per_sample.iter().map(|u| u[j].to_f64()).collect::<Vec<_>>()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Violation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub coalition: Vec<ProviderId>,
    pub strategy: String,
    pub member: ProviderId,
    pub baseline_mean: f64,
    pub deviant_mean: f64,
    /// Half-width of the paired difference.
    pub half_width: f64,
    pub verdict: Verdict,
}

/// A run in which honest providers did something the protocol forbids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformanceIssue {
    pub coalition: Vec<ProviderId>,
    pub strategy: String,
    pub seed: u64,
    pub detail: String,
}

/// A specific outcome that a coalition made more likely at honest providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceIssue {
    pub coalition: Vec<ProviderId>,
    pub strategy: String,
    pub outcome_digest: String,
    pub baseline_freq: f64,
    pub deviant_freq: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub m: usize,
    pub k: usize,
    pub samples: usize,
    pub tolerance: f64,
    pub rows: Vec<ReportRow>,
    pub conformance: Vec<ConformanceIssue>,
    pub influence: Vec<InfluenceIssue>,
}

impl EquilibriumReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.verdict == Verdict::Violation).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0 && self.conformance.is_empty() && self.influence.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<22} {:>6} {:>12} {:>12} {:>10}  verdict",
            "coalition", "strategy", "member", "baseline", "deviant", "+/-"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:<22} {:>6} {:>12.6} {:>12.6} {:>10.2e}  {}",
                format!("{:?}", r.coalition),
                r.strategy,
                r.member,
                r.baseline_mean,
                r.deviant_mean,
                r.half_width,
                match r.verdict {
                    Verdict::Ok => "ok",
                    Verdict::Violation => "VIOLATION",
                }
            );
        }
        for c in &self.conformance {
            let _ = writeln!(
                s,
                "conformance {:?} {} seed {}: {}",
                c.coalition, c.strategy, c.seed, c.detail
            );
        }
        for i in &self.influence {
            let _ = writeln!(
                s,
                "influence {:?} {} outcome {}: {:.3} -> {:.3} (margin {:.3})",
                i.coalition, i.strategy, i.outcome_digest, i.baseline_freq, i.deviant_freq, i.margin
            );
        }
        let _ = writeln!(
            s,
            "{} rows, {} violations, {} conformance issues, {} influence issues",
            self.rows.len(),
            self.violations(),
            self.conformance.len(),
            self.influence.len()
        );
        s
    }
}

/// The value honest providers agree on, or abort if they output different
/// values or any of them aborted.
fn honest_outcome(sample: &Sample) -> Outcome {
    let mut honest = sample
        .run
        .outputs()
        .iter()
        .zip(&sample.behaviors)
        .filter(|(_, b)| b.is_honest())
        .map(|(o, _)| o);
    match honest.next() {
        Some(first @ Outcome::Solution { .. }) if honest.all(|o| o == first) => first.clone(),
        _ => Outcome::Abort,
    }
}

/// Protocol rules honest providers must follow whatever the coalition does.
fn conformance(sample: &Sample, game: &Game) -> Vec<String> {
    let mut issues = Vec::new();
    let run = &sample.run;
    let honest: Vec<usize> = (0..game.spec.m).filter(|&j| sample.behaviors[j].is_honest()).collect();

    let solutions: BTreeSet<Vec<u8>> = honest
        .iter()
        .filter_map(|&j| match &run.outputs()[j] {
            o @ Outcome::Solution { .. } => Some(to_canonical(o)),
            Outcome::Abort => None,
        })
        .collect();
    if solutions.len() > 1 {
        issues.push(format!(
            "honest providers output {} different solutions",
            solutions.len()
        ));
    }

    let inputs: BTreeSet<Vec<u8>> = (0..game.spec.m)
        .filter(|&j| !sample.behaviors[j].withhold)
        .filter_map(|j| {
            sample.behaviors[j]
                .validation_input
                .clone()
                .or_else(|| run.agreed[j].as_value().cloned())
        })
        .map(|v| to_canonical(&v))
        .collect();
    if inputs.len() > 1 && honest.iter().any(|&j| !run.allocator.validated[j].is_bot()) {
        issues.push("input validation accepted differing inputs".into());
    }

    let bad_reveal = sample.behaviors.iter().any(|b| match &b.coin {
        CoinBehavior::Reveal { value } => value.is_negative() || *value > Fixed::ONE,
        _ => false,
    });
    if bad_reveal
        && honest
            .iter()
            .any(|&j| run.allocator.coin.get(j).is_some_and(|c| !c.is_bot()))
    {
        issues.push("common coin accepted an out-of-range share".into());
    }
    issues
}

fn hex(d: &Digest32) -> String {
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Runs every strategy for every coalition of size at most `k` and compares
/// each member's expected utility with the all-honest baseline on the same
/// seeds.
pub fn check_k_resilience(
    game: &Game,
    k: usize,
    library: &[DeviationStrategy],
    cfg: &SampleConfig,
    tolerance: f64,
) -> Result<EquilibriumReport> {
    let m = game.spec.m;
    if m <= 2 * k {
        return Err(CoreError::Config(format!("need m > 2k, got m={m} k={k}")));
    }
    let honest_profile = |_seed: u64| vec![ProviderBehavior::default(); m];
    let baseline = run_samples(game, cfg, &honest_profile)?;
    let base_utils = baseline
        .iter()
        .map(|s| provider_utilities(game, &s.run.outcome()))
        .collect::<Result<Vec<_>>>()?;
    let base_freq = outcome_frequencies(baseline.iter().map(honest_outcome));

    let mut report = EquilibriumReport {
        m,
        k,
        samples: cfg.samples,
        tolerance,
        rows: Vec::new(),
        conformance: Vec::new(),
        influence: Vec::new(),
    };
    let n = cfg.samples as f64;

    for coalition in coalitions(m, k) {
        let members: Vec<ProviderId> = coalition.members().iter().copied().collect();
        for strategy in library {
            let profile = |seed: u64| strategy.behaviors(game, &coalition, seed);
            let samples = run_samples(game, cfg, &profile)?;
            let utils = samples
                .iter()
                .map(|s| provider_utilities(game, &s.run.outcome()))
                .collect::<Result<Vec<_>>>()?;

            for &j in &members {
                let base: Vec<f64> = base_utils.iter().map(|u| u[j].to_f64()).collect();
                let dev: Vec<f64> = utils.iter().map(|u| u[j].to_f64()).collect();
                let diff: Vec<f64> = dev.iter().zip(&base).map(|(d, b)| d - b).collect();
                let est = Estimate::from_samples(&diff);
                let violation = est.mean > est.half_width + tolerance;
                report.rows.push(ReportRow {
                    coalition: members.clone(),
                    strategy: strategy.name().into(),
                    member: j,
                    baseline_mean: Estimate::from_samples(&base).mean,
                    deviant_mean: Estimate::from_samples(&dev).mean,
                    half_width: est.half_width,
                    verdict: if violation { Verdict::Violation } else { Verdict::Ok },
                });
            }

            for (s, sample) in samples.iter().enumerate() {
                for detail in conformance(sample, game) {
                    report.conformance.push(ConformanceIssue {
                        coalition: members.clone(),
                        strategy: strategy.name().into(),
                        seed: cfg.seed(s),
                        detail,
                    });
                }
            }

            let dev_freq = outcome_frequencies(samples.iter().map(honest_outcome));
            for (digest, &f) in &dev_freq {
                let b = base_freq.get(digest).copied().unwrap_or(0.0);
                let pooled = (f + b) / 2.0;
                let margin = z95() * (2.0 * pooled * (1.0 - pooled) / n).sqrt() + tolerance;
                if f - b > margin {
                    report.influence.push(InfluenceIssue {
                        coalition: members.clone(),
                        strategy: strategy.name().into(),
                        outcome_digest: hex(digest),
                        baseline_freq: b,
                        deviant_freq: f,
                        margin,
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Relative frequency of each non-abort outcome.
fn outcome_frequencies(outcomes: impl Iterator<Item = Outcome>) -> BTreeMap<Digest32, f64> {
    let mut counts: BTreeMap<Digest32, usize> = BTreeMap::new();
    let mut total = 0usize;
    for o in outcomes {
        total += 1;
        if !o.is_abort() {
            *counts.entry(canonical_digest("outcome", &o)).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(d, c)| (d, c as f64 / total.max(1) as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// Correct simulation

/// One case: the vector each provider received from the bidders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationCase {
    pub views: Vec<BidVector>,
}

impl SimulationCase {
    pub fn consistent(bids: BidVector, m: usize) -> Self {
        SimulationCase { views: vec![bids; m] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationMismatch {
    pub case: usize,
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub runs: usize,
    pub equal: usize,
    pub validity_checked: usize,
    pub mismatches: Vec<SimulationMismatch>,
}

impl CorrectnessReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.equal == self.runs
    }
}

/// The bid a bidder's submission turns into after encoding: itself if it is
/// valid and encodable, the neutral bid otherwise.
pub fn effective_bid(b: &Bid) -> Bid {
    match encode_bid(b) {
        Ok(s) => decode_bid(&s, b.bidder_id),
        Err(_) => Bid::neutral(b.bidder_id),
    }
}

/// All-honest runs compared byte for byte with the trusted auctioneer run on
/// the agreed vector with the same seed.
pub fn check_correct_simulation(
    spec: &AuctionSpec,
    cases: &[SimulationCase],
    seeds: &[u64],
) -> Result<CorrectnessReport> {
    let m = spec.m;
    let behaviors = vec![ProviderBehavior::default(); m];
    let jobs: Vec<(usize, u64)> = (0..cases.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(c, seed)| -> Result<(bool, usize, Vec<SimulationMismatch>)> {
            let case = &cases[c];
            let mut problems = Vec::new();
            let mut validity = 0;
            let run = run_framework(&case.views, spec, &behaviors, &RunOptions::new(seed))?;
            let mismatch = |detail: String| SimulationMismatch { case: c, seed, detail };

            let agreed: BTreeSet<Vec<u8>> = run
                .agreed
                .iter()
                .map(|a| a.as_value().map(to_canonical).unwrap_or_default())
                .collect();
            let Some(resolved) = run.agreed[0].as_value().filter(|_| agreed.len() == 1) else {
                problems.push(mismatch("bid agreement not unanimous".into()));
                return Ok((false, validity, problems));
            };

            for i in 0..resolved.n() {
                let submitted: BTreeSet<Vec<u8>> = case.views.iter().map(|v| to_canonical(&v.user_bids[i])).collect();
                if submitted.len() == 1 {
                    validity += 1;
                    let expect = effective_bid(&case.views[0].user_bids[i]);
                    if resolved.user_bids[i] != expect {
                        problems.push(mismatch(format!(
                            "bidder {i}: agreed bid differs from consistent submission"
                        )));
                    }
                }
            }

            let expected = local_execute(resolved, spec, seed).map(|(x, p)| Outcome::solution(x, p))?;
            let equal = to_canonical(&run.outcome()) == to_canonical(&expected);
            if !equal {
                problems.push(mismatch(format!(
                    "outcome {} differs from trusted run {}",
                    hex(&canonical_digest("outcome", &run.outcome())),
                    hex(&canonical_digest("outcome", &expected))
                )));
            }
            Ok((equal, validity, problems))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = CorrectnessReport {
        runs: jobs.len(),
        equal: 0,
        validity_checked: 0,
        mismatches: Vec::new(),
    };
    for (equal, v, problems) in results {
        report.equal += usize::from(equal);
        report.validity_checked += v;
        report.mismatches.extend(problems);
    }
    Ok(report)
}

/// Total-variation distance between the outcome distribution of honest
/// simulations over `sim_seeds` and of trusted runs over `local_seeds`.
pub fn outcome_distribution_distance(
    spec: &AuctionSpec,
    bids: &BidVector,
    sim_seeds: &[u64],
    local_seeds: &[u64],
) -> Result<f64> {
    let behaviors = vec![ProviderBehavior::default(); spec.m];
    let views = vec![bids.clone(); spec.m];
    let sim = sim_seeds
        .par_iter()
        .map(|&s| Ok(run_framework(&views, spec, &behaviors, &RunOptions::new(s))?.outcome()))
        .collect::<Result<Vec<_>>>()?;
    let local = local_seeds
        .par_iter()
        .map(|&s| local_execute(bids, spec, s).map(|(x, p)| Outcome::solution(x, p)))
        .collect::<Result<Vec<_>>>()?;
    let freq = |os: &[Outcome]| {
        let mut c: BTreeMap<Digest32, f64> = BTreeMap::new();
        for o in os {
            *c.entry(canonical_digest("outcome", o)).or_default() += 1.0 / os.len() as f64;
        }
        c
    };
    let (a, b) = (freq(&sim), freq(&local));
    let keys: BTreeSet<_> = a.keys().chain(b.keys()).collect();
    Ok(keys
        .into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
        / 2.0)
}

// ---------------------------------------------------------------------------
// Truthfulness

/// Instances built from every assignment of lattice points to users.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub values: Vec<Fixed>,
    pub demands: Vec<Fixed>,
    pub max_users: usize,
    /// One entry per provider configuration; capacities for the standard
    /// auction.
    pub capacities: Vec<Vec<Fixed>>,
    /// Provider unit costs for the double auction, parallel to `capacities`.
    pub costs: Vec<Vec<Fixed>>,
}

impl Lattice {
    /// The 5-point grid used by the acceptance checks.
    pub fn five_point() -> Self {
        Lattice {
            values: ["0.75", "0.875", "1.0", "1.125", "1.25"].map(fx).to_vec(),
            demands: ["0.125", "0.25", "0.5", "0.75", "1.0"].map(fx).to_vec(),
            max_users: 4,
            capacities: vec![vec![fx("1.0")], vec![fx("1.0"), fx("0.5")]],
            costs: vec![vec![fx("0.5")], vec![fx("0.25"), fx("0.875")]],
        }
    }

    fn points(&self) -> Vec<(Fixed, Fixed)> {
        self.values
            .iter()
            .flat_map(|&v| self.demands.iter().map(move |&d| (v, d)))
            .collect()
    }

    /// Every user-bid profile with `1..=max_users` users.
    pub fn profiles(&self) -> impl Iterator<Item = Vec<Bid>> + '_ {
        let pts = self.points();
        (1..=self.max_users).flat_map(move |n| {
            let pts = pts.clone();
            let total = pts.len().pow(n as u32);
            (0..total).map(move |mut code| {
                (0..n)
                    .map(|i| {
                        let (v, d) = pts[code % pts.len()];
                        code /= pts.len();
                        Bid::new(i as u32, v, d)
                    })
                    .collect()
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Misreport {
    pub bids: Vec<Bid>,
    pub config: usize,
    pub user: usize,
    pub report: Bid,
    pub truthful_utility: Fixed,
    pub deviant_utility: Fixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthfulnessReport {
    pub kind: AuctionKind,
    pub instances: usize,
    pub deviations_checked: usize,
    /// Profitable misreports that change only the unit value (or drop out).
    pub profitable_value: usize,
    /// Profitable misreports that change the demand.
    pub profitable_demand: usize,
    /// Truthful users with negative utility.
    pub ir_violations: usize,
    /// Up to ten examples.
    pub examples: Vec<Misreport>,
}

impl TruthfulnessReport {
    pub fn profitable(&self) -> usize {
        self.profitable_value + self.profitable_demand
    }
}

fn outcome_for(spec: &AuctionSpec, bids: &BidVector) -> Result<Outcome> {
    local_execute(bids, spec, 0).map(|(x, p)| Outcome::solution(x, p))
}

/// Utility of user `i` when the auction runs on `reported` but the user's
/// true bid is the one in `truth`. For the standard auction only the user's
/// own payment is computed.
fn reported_utility(spec: &AuctionSpec, reported: &BidVector, truth: &BidVector, i: usize) -> Result<Fixed> {
    match spec.kind {
        AuctionKind::Double => utility(Role::User, i, &outcome_for(spec, reported)?, truth),
        AuctionKind::Standard => {
            let coin = pinned_coin(0, spec.m);
            let x = standard_auction_allocate(reported, &spec.capacities, &spec.standard, coin);
            let p = vcg_payment(reported, &spec.capacities, &spec.standard, coin, &x, i)?;
            Ok(user_value(&x, truth, i) - p)
        }
    }
}

/// Exhaustively checks that no user gains by reporting another lattice bid
/// (or the neutral bid) while everyone else reports truthfully.
pub fn check_bidder_truthfulness(
    kind: AuctionKind,
    lattice: &Lattice,
    spec_template: &AuctionSpec,
) -> Result<TruthfulnessReport> {
    let pts = lattice.points();
    let mut jobs = Vec::new();
    for (config, caps) in lattice.capacities.iter().enumerate() {
        for bids in lattice.profiles() {
            jobs.push((config, caps.clone(), bids));
        }
    }
    let results = jobs
        .par_iter()
        .map(|(config, caps, users)| -> Result<TruthfulnessReport> {
            let m = caps.len();
            let n = users.len();
            let (spec, truth) = match kind {
                AuctionKind::Standard => {
                    let mut s = spec_template.clone();
                    s.kind = AuctionKind::Standard;
                    s.m = m;
                    s.n = n;
                    s.k = 0;
                    s.capacities = caps.clone();
                    s.standard.groups = 1;
                    (s, BidVector::standard(users.clone()))
                }
                AuctionKind::Double => {
                    let costs = &lattice.costs[*config];
                    let provs = (0..m)
                        .map(|j| crate::types::ProviderBid::new(j as u32, costs[j], caps[j]))
                        .collect();
                    (AuctionSpec::double(m, n, 0), BidVector::double(users.clone(), provs))
                }
            };
            let mut r = TruthfulnessReport {
                kind,
                instances: 1,
                deviations_checked: 0,
                profitable_value: 0,
                profitable_demand: 0,
                ir_violations: 0,
                examples: Vec::new(),
            };
            for i in 0..n {
                let u_true = reported_utility(&spec, &truth, &truth, i)?;
                if u_true.is_negative() {
                    r.ir_violations += 1;
                }
                let own = truth.user_bids[i];
                let reports = pts
                    .iter()
                    .map(|&(v, d)| Bid::new(i as u32, v, d))
                    .chain(std::iter::once(Bid::neutral(i as u32)))
                    .filter(|b| *b != own);
                for report in reports {
                    let mut lie = truth.clone();
                    lie.user_bids[i] = report;
                    let u_lie = reported_utility(&spec, &lie, &truth, i)?;
                    r.deviations_checked += 1;
                    if u_lie > u_true {
                        if report.neutral || report.demand == own.demand {
                            r.profitable_value += 1;
                        } else {
                            r.profitable_demand += 1;
                        }
                        if r.examples.len() < 10 {
                            r.examples.push(Misreport {
                                bids: users.clone(),
                                config: *config,
                                user: i,
                                report,
                                truthful_utility: u_true,
                                deviant_utility: u_lie,
                            });
                        }
                    }
                }
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = TruthfulnessReport {
        kind,
        instances: 0,
        deviations_checked: 0,
        profitable_value: 0,
        profitable_demand: 0,
        ir_violations: 0,
        examples: Vec::new(),
    };
    for r in results {
        total.instances += r.instances;
        total.deviations_checked += r.deviations_checked;
        total.profitable_value += r.profitable_value;
        total.profitable_demand += r.profitable_demand;
        total.ir_violations += r.ir_violations;
        for e in r.examples {
            if total.examples.len() < 10 {
                total.examples.push(e);
            }
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Coin statistics

/// Chi-square statistic and p-value of `counts` against equal bins.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    (stat, 1.0 - dist.cdf(stat))
}

/// p-value of the chi-square homogeneity test between two binned samples.
/// Bins empty in both samples are dropped.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        bins += 1;
        let (ea, eb) = (na * col / (na + nb), nb * col / (na + nb));
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    if bins < 2 {
        return 1.0;
    }
    let dist = ChiSquared::new((bins - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

fn bin(u: Fixed, bins: usize) -> usize {
    ((u.raw() as u128 * bins as u128) >> crate::fixed::FRAC_BITS) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoinDeviationResult {
    pub behavior: String,
    pub bot_rate: f64,
    pub non_bot: u64,
    /// Homogeneity p-value of the non-abort outputs against the honest ones.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoinReport {
    pub runs: usize,
    pub counts: Vec<u64>,
    pub chi_square: f64,
    pub p_value: f64,
    pub deviations: Vec<CoinDeviationResult>,
}

impl CoinReport {
    pub fn passed(&self, alpha: f64) -> bool {
        self.p_value >= alpha && self.deviations.iter().all(|d| d.p_value >= alpha)
    }
}

/// Output of the coin at provider 0 (or the first honest provider) for one
/// run with the given behaviours.
fn coin_run(m: usize, seed: u64, behaviors: &[CoinBehavior], flaws: ProtocolFlaws) -> Result<BlockOutput<Fixed>> {
    let nodes = (0..m)
        .map(|j| {
            let (share, salt) = coin_share(seed, j);
            Node::Run(CommonCoin::new(
                m,
                DistributionSpec::Uniform01,
                share,
                salt,
                behaviors[j].clone(),
                flaws,
            ))
        })
        .collect();
    let mut sched = gen_fair_schedule(seed ^ 0xC011, m, SchedulePolicy::RandomFair, 4)?;
    let (outs, _) = run_block(nodes, &mut sched, 10_000_000)?;
    let first_honest = behaviors.iter().position(|b| *b == CoinBehavior::Honest).unwrap_or(0);
    Ok(outs[first_honest].clone())
}

/// Uniformity of the honest coin over `runs` seeds and, for each single
/// deviator behaviour, its abort rate and whether its non-abort outputs are
/// distributed like the honest ones.
pub fn coin_statistics(m: usize, runs: usize, bins: usize, base_seed: u64) -> Result<CoinReport> {
    let honest = vec![CoinBehavior::Honest; m];
    let count = |behaviors: &[CoinBehavior]| -> Result<(Vec<u64>, u64)> {
        let outs = (0..runs as u64)
            .into_par_iter()
            .map(|s| coin_run(m, base_seed.wrapping_add(s), behaviors, ProtocolFlaws::none()))
            .collect::<Result<Vec<_>>>()?;
        let mut counts = vec![0u64; bins];
        let mut bots = 0;
        for o in outs {
            match o {
                BlockOutput::Value(u) => counts[bin(u, bins)] += 1,
                BlockOutput::Bot => bots += 1,
            }
        }
        Ok((counts, bots))
    };
    let (counts, bots) = count(&honest)?;
    if bots > 0 {
        return Err(CoreError::Liveness(format!("{bots} honest coin runs aborted")));
    }
    let (chi_square, p_value) = chi_square_uniform(&counts);

    let deviants = [
        ("skip_commit", CoinBehavior::SkipCommit),
        ("out_of_range", CoinBehavior::Reveal { value: fx("1.5") }),
        ("fixed_share", CoinBehavior::Reveal { value: Fixed::ZERO }),
        ("mismatched_reveal", CoinBehavior::Mismatch),
    ];
    let mut deviations = Vec::new();
    for (name, b) in deviants {
        let mut behaviors = honest.clone();
        behaviors[m - 1] = b;
        let (dev_counts, dev_bots) = count(&behaviors)?;
        deviations.push(CoinDeviationResult {
            behavior: name.into(),
            bot_rate: dev_bots as f64 / runs as f64,
            non_bot: dev_counts.iter().sum(),
            p_value: chi_square_homogeneity(&counts, &dev_counts),
        });
    }
    Ok(CoinReport {
        runs,
        counts,
        chi_square,
        p_value,
        deviations,
    })
}

/// Whether every provider weakly prefers the honest outcome of `game` to
/// abort, as the equilibrium claims assume.
pub fn satisfies_solution_preference(game: &Game, seed: u64) -> Result<bool> {
    let (x, p) = local_execute(&game.bids, &game.spec, seed)?;
    let o = Outcome::solution(x, p);
    Ok(provider_utilities(game, &o)?.iter().all(|u| !u.is_negative()))
}

/// The honest coin value for `seed`, as seen by every provider.
pub fn honest_coin(seed: u64, m: usize) -> Fixed {
    coin_from_seed(seed, m, &DistributionSpec::Uniform01)
}

/// True when `game` uses the standard auction.
pub fn is_standard(game: &Game) -> bool {
    game.spec.kind == AuctionKind::Standard
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocators::StandardAuctionConfig;
    use crate::types::ProviderBid;

    fn double_game() -> Game {
        let users = vec![
            Bid::new(0, fx("1.2"), fx("1.0")),
            Bid::new(1, fx("0.8"), fx("1.0")),
            Bid::new(2, fx("1.0"), fx("0.5")),
        ];
        let provs = (0..4)
            .map(|j| ProviderBid::new(j, fx("0.25") + Fixed::from_raw(j as i64 * 4096), fx("0.6")))
            .collect();
        Game {
            spec: AuctionSpec::double(4, 3, 1),
            bids: BidVector::double(users, provs),
        }
    }

    fn standard_game() -> Game {
        let users = vec![
            Bid::new(0, fx("1.0"), fx("0.5")),
            Bid::new(1, fx("0.9"), fx("0.5")),
            Bid::new(2, fx("1.1"), fx("0.25")),
            Bid::new(3, fx("0.8"), fx("0.75")),
        ];
        let cfg = StandardAuctionConfig {
            groups: 2,
            ..Default::default()
        };
        Game {
            spec: AuctionSpec::standard(4, 4, 1, vec![fx("0.5"), fx("0.5"), fx("0.25"), fx("0.75")], cfg),
            bids: BidVector::standard(users),
        }
    }

    #[test]
    fn coalition_enumeration() {
        assert_eq!(coalitions(4, 1).len(), 4);
        assert_eq!(coalitions(8, 3).len(), 8 + 28 + 56);
        assert!(Coalition::new([], 4).is_err());
        assert!(Coalition::new([4], 4).is_err());
    }

    #[test]
    fn deterministic_honest_utility_has_zero_variance() {
        let g = double_game();
        let honest = |_| vec![ProviderBehavior::default(); 4];
        let est = expected_utility(&g, &SampleConfig::new(30, 1), &honest).unwrap();
        let (x, p) = local_execute(&g.bids, &g.spec, 0).unwrap();
        let o = Outcome::solution(x, p);
        for (j, e) in est.iter().enumerate() {
            assert_eq!(e.half_width, 0.0);
            assert_eq!(e.mean, utility(Role::Provider, j, &o, &g.bids).unwrap().to_f64());
        }
        let mut rr = SampleConfig::new(30, 1000);
        rr.policy = SchedulePolicy::RoundRobin;
        assert_eq!(expected_utility(&g, &rr, &honest).unwrap(), est);
        assert!(expected_utility(&g, &SampleConfig::new(29, 1), &honest).is_err());
    }

    #[test]
    fn abort_strategy_yields_zero() {
        let g = double_game();
        let profile = |_| {
            let mut b = vec![ProviderBehavior::default(); 4];
            b[0].output = OutputBehavior::Abort;
            b
        };
        for e in expected_utility(&g, &SampleConfig::new(30, 5), &profile).unwrap() {
            assert_eq!(e.mean, 0.0);
        }
    }

    #[test]
    fn library_is_clean_on_small_games() {
        for g in [double_game(), standard_game()] {
            assert!(satisfies_solution_preference(&g, 0).unwrap());
            let report = check_k_resilience(&g, 1, &strategy_library(), &SampleConfig::new(30, 7), 1e-9).unwrap();
            assert!(report.passed(), "{}", report.to_table());
            for r in report.rows.iter().filter(|r| r.strategy == "identity") {
                assert_eq!(r.baseline_mean, r.deviant_mean);
            }
        }
    }

    #[test]
    fn planted_flaws_are_caught() {
        let g = standard_game();
        let flaws = [
            ProtocolFlaws {
                single_sender_transfer: true,
                ..Default::default()
            },
            ProtocolFlaws {
                unchecked_coin_range: true,
                ..Default::default()
            },
            ProtocolFlaws {
                skip_input_validation: true,
                ..Default::default()
            },
        ];
        for f in flaws {
            let mut cfg = SampleConfig::new(30, 3);
            cfg.flaws = f;
            let report = check_k_resilience(&g, 1, &strategy_library(), &cfg, 1e-9).unwrap();
            assert!(!report.passed(), "{f:?} not caught");
        }
    }

    #[test]
    fn correct_simulation_with_inconsistent_and_invalid_bidders() {
        let g = double_game();
        let mut views = vec![g.bids.clone(); 4];
        views[1].user_bids[2].unit_value = fx("1.125");
        views[3].user_bids[0].demand = Fixed::from_raw(-1);
        for v in &mut views {
            v.user_bids[1].demand = Fixed::from_raw(-3);
        }
        let report = check_correct_simulation(&g.spec, &[SimulationCase { views }], &[1, 2, 3]).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.validity_checked, 3);
    }

    #[test]
    fn truthfulness_small_lattice() {
        let lattice = Lattice {
            values: vec![fx("0.75"), fx("1.0"), fx("1.25")],
            demands: vec![fx("0.5"), fx("1.0")],
            max_users: 2,
            capacities: vec![vec![fx("1.0")]],
            costs: vec![vec![fx("0.5")]],
        };
        let template = standard_game().spec;
        let r = check_bidder_truthfulness(AuctionKind::Standard, &lattice, &template).unwrap();
        assert_eq!(r.instances, 6 + 36);
        assert_eq!(r.profitable_value, 0);
        assert_eq!(r.ir_violations, 0);
    }

    #[test]
    fn demand_underreport_can_pay_off() {
        // user 0 wins alone truthfully; shrinking its demand lets both win
        let spec = AuctionSpec::standard(1, 2, 0, vec![fx("1.0")], StandardAuctionConfig::default());
        let truth = BidVector::standard(vec![
            Bid::new(0, fx("1.0"), fx("1.0")),
            Bid::new(1, fx("1.25"), fx("0.5")),
        ]);
        let mut lie = truth.clone();
        lie.user_bids[0].demand = fx("0.5");
        let u = |b: &BidVector| utility(Role::User, 0, &outcome_for(&spec, b).unwrap(), &truth).unwrap();
        assert_eq!(u(&truth), fx("0.375"));
        assert_eq!(u(&lie), fx("0.5"));
    }

    #[test]
    fn coin_statistics_small() {
        let r = coin_statistics(3, 400, 10, 11).unwrap();
        assert_eq!(r.counts.iter().sum::<u64>(), 400);
        let by_name: BTreeMap<_, _> = r.deviations.iter().map(|d| (d.behavior.as_str(), d)).collect();
        assert_eq!(by_name["skip_commit"].bot_rate, 1.0);
        assert_eq!(by_name["out_of_range"].bot_rate, 1.0);
        assert_eq!(by_name["fixed_share"].bot_rate, 0.0);
    }

    #[test]
    fn chi_square_sanity() {
        let (_, p) = chi_square_uniform(&[100; 10]);
        assert!((p - 1.0).abs() < 1e-12);
        let (_, p) = chi_square_uniform(&[1000, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!(p < 1e-6);
        assert!(chi_square_homogeneity(&[50, 50], &[50, 50]) > 0.99);
    }
}
