//! The full protocol: bid agreement, then the parallel allocator (input
//! validation, common coin, task execution, data transfer, gather).
//!
//! Blocks run one after another, each in its own [`World`](crate::simnet::World)
//! with a schedule derived from the run seed. A provider that ends a block
//! with `Bot` stops participating, which the others observe as silence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use crate::blocks::{
    coin_share, run_block, BidAgreement, BlockOutput, CoinBehavior, CommonCoin, ConsensusBehavior, DataTransfer,
    DistributionSpec, InputValidation, Node, ProtocolFlaws, TransferBehavior, TransferSpec, ValidationBehavior,
};
use crate::canonical::{canonical_digest, from_canonical, to_canonical, Digest32};
use crate::error::{CoreError, Result};
use crate::fixed::Fixed;
use crate::simnet::{gen_fair_schedule, ProviderId, SchedulePolicy};
use crate::types::{Allocation, BidVector, Outcome};

use super::{
    assemble_payments, build_task_graph, double_auction, payment_chunk, standard_auction_allocate, AuctionKind,
    AuctionSpec, PaymentChunk, TaskKind,
};

/// What a provider does with its final outcome.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub enum OutputBehavior {
    #[default]
    Honest,
    Abort,
    Replace(Outcome),
}

/// Per-provider overrides of the honest protocol. The default is honest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ProviderBehavior {
    /// Never sends anything in any block.
    pub withhold: bool,
    /// Vector fed into bid agreement instead of what the bidders sent.
    pub agreement_view: Option<BidVector>,
    pub agreement: ConsensusBehavior,
    /// Vector fed into input validation instead of the agreed one.
    pub validation_input: Option<BidVector>,
    pub validation: ValidationBehavior,
    pub coin: CoinBehavior,
    /// Adds one currency unit of revenue for each listed provider to every
    /// payment task result this provider sends.
    pub corrupt_tasks: Option<BTreeSet<ProviderId>>,
    pub output: OutputBehavior,
}

impl ProviderBehavior {
    pub fn is_honest(&self) -> bool {
        *self == ProviderBehavior::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    /// Seeds the schedules and the honest coin shares.
    pub seed: u64,
    pub policy: SchedulePolicy,
    pub max_delay: u32,
    /// Turn budget of each block.
    pub turn_budget: u64,
    pub flaws: ProtocolFlaws,
    /// Run payment tasks of different provider groups on separate threads.
    pub threaded: bool,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        RunOptions {
            seed,
            policy: SchedulePolicy::RandomFair,
            max_delay: 4,
            turn_budget: 50_000_000,
            flaws: ProtocolFlaws::none(),
            threaded: false,
        }
    }

    fn schedule_seed(&self, block: u64) -> u64 {
        // splitmix64 finalizer, so block schedules are unrelated to each other
        let mut z = self.seed ^ block.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub bid_agreement: Duration,
    pub validation: Duration,
    pub coin: Duration,
    pub tasks: Duration,
    pub gather: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PhaseTurns {
    pub bid_agreement: u64,
    pub validation: u64,
    pub coin: u64,
    pub gather: u64,
}

impl PhaseTurns {
    pub fn total(&self) -> u64 {
        self.bid_agreement + self.validation + self.coin + self.gather
    }
}

/// Per-provider results of the parallel allocator.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocatorRun {
    /// Final output of each provider, after any output override.
    pub outputs: Vec<Outcome>,
    pub validated: Vec<BlockOutput<BidVector>>,
    /// Empty for the double auction, which uses no coin.
    pub coin: Vec<BlockOutput<Fixed>>,
    pub timings: PhaseTimings,
    pub turns: PhaseTurns,
}

impl AllocatorRun {
    /// The outcome if every provider output the same solution, else abort.
    pub fn outcome(&self) -> Outcome {
        unanimous(&self.outputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameworkRun {
    pub agreed: Vec<BlockOutput<BidVector>>,
    pub allocator: AllocatorRun,
}

impl FrameworkRun {
    pub fn outputs(&self) -> &[Outcome] {
        &self.allocator.outputs
    }

    pub fn outcome(&self) -> Outcome {
        self.allocator.outcome()
    }

    pub fn timings(&self) -> PhaseTimings {
        self.allocator.timings
    }

    pub fn turns(&self) -> PhaseTurns {
        self.allocator.turns
    }
}

fn unanimous(outputs: &[Outcome]) -> Outcome {
    match outputs.first() {
        Some(first @ Outcome::Solution { .. }) if outputs.iter().all(|o| o == first) => first.clone(),
        _ => Outcome::Abort,
    }
}

fn check_shapes(m: usize, views: usize, behaviors: &[ProviderBehavior]) -> Result<()> {
    if views != m || behaviors.len() != m {
        return Err(CoreError::DimensionMismatch(format!(
            "expected {m} provider inputs and behaviors, got {views} and {}",
            behaviors.len()
        )));
    }
    Ok(())
}

/// Bid agreement on the providers' views followed by the parallel allocator.
pub fn run_framework(
    views: &[BidVector],
    spec: &AuctionSpec,
    behaviors: &[ProviderBehavior],
    opts: &RunOptions,
) -> Result<FrameworkRun> {
    spec.validate()?;
    let m = spec.m;
    check_shapes(m, views.len(), behaviors)?;
    let started = Instant::now();
    let nodes = (0..m)
        .map(|j| {
            let b = &behaviors[j];
            if b.withhold {
                return Node::Halted;
            }
            let view = b.agreement_view.as_ref().unwrap_or(&views[j]);
            Node::Run(BidAgreement::new(m, view, b.agreement.clone()))
        })
        .collect();
    let mut sched = gen_fair_schedule(opts.schedule_seed(1), m, opts.policy, opts.max_delay)?;
    let (agreed, turns) = run_block(nodes, &mut sched, opts.turn_budget)?;
    let agreement_time = started.elapsed();

    let mut allocator = parallel_allocator(&agreed, spec, behaviors, opts)?;
    allocator.timings.bid_agreement = agreement_time;
    allocator.turns.bid_agreement = turns;
    Ok(FrameworkRun { agreed, allocator })
}

/// The parallel allocator on each provider's (possibly aborted) input.
pub fn parallel_allocator(
    inputs: &[BlockOutput<BidVector>],
    spec: &AuctionSpec,
    behaviors: &[ProviderBehavior],
    opts: &RunOptions,
) -> Result<AllocatorRun> {
    spec.validate()?;
    let m = spec.m;
    check_shapes(m, inputs.len(), behaviors)?;
    let mut timings = PhaseTimings::default();
    let mut turns = PhaseTurns::default();

    // input validation
    let t = Instant::now();
    let nodes = (0..m)
        .map(|j| {
            let b = &behaviors[j];
            let input = match (&b.validation_input, &inputs[j]) {
                _ if b.withhold => return Node::Halted,
                (Some(v), _) => v.clone(),
                (None, BlockOutput::Value(v)) => v.clone(),
                (None, BlockOutput::Bot) => return Node::Halted,
            };
            Node::Run(InputValidation::new(m, input, b.validation.clone(), opts.flaws))
        })
        .collect();
    let mut sched = gen_fair_schedule(opts.schedule_seed(2), m, opts.policy, opts.max_delay)?;
    let (validated, n_turns) = run_block(nodes, &mut sched, opts.turn_budget)?;
    turns.validation = n_turns;
    timings.validation = t.elapsed();

    // a provider stays live while it holds a value and follows the protocol's
    // message pattern at all
    let mut live: Vec<Option<BidVector>> = (0..m)
        .map(|j| {
            let ok = !behaviors[j].withhold;
            validated[j].as_value().filter(|v| ok && spec.accepts(v)).cloned()
        })
        .collect();

    let mut coin = Vec::new();
    let mut coins = vec![Fixed::ZERO; m];
    if spec.kind == AuctionKind::Standard {
        let t = Instant::now();
        let nodes = (0..m)
            .map(|j| {
                if live[j].is_none() {
                    return Node::Halted;
                }
                let (share, salt) = coin_share(opts.seed, j);
                Node::Run(CommonCoin::new(
                    m,
                    DistributionSpec::Uniform01,
                    share,
                    salt,
                    behaviors[j].coin.clone(),
                    opts.flaws,
                ))
            })
            .collect();
        let mut sched = gen_fair_schedule(opts.schedule_seed(3), m, opts.policy, opts.max_delay)?;
        let (out, n_turns) = run_block(nodes, &mut sched, opts.turn_budget)?;
        turns.coin = n_turns;
        timings.coin = t.elapsed();
        for j in 0..m {
            match out[j].as_value() {
                Some(c) => coins[j] = *c,
                None => live[j] = None,
            }
        }
        coin = out;
    }

    let mut outputs = match spec.kind {
        AuctionKind::Double => {
            let t = Instant::now();
            let mut memo: HashMap<Digest32, Outcome> = HashMap::new();
            let outs = live
                .iter()
                .map(|v| match v {
                    None => Ok(Outcome::Abort),
                    Some(v) => {
                        let key = canonical_digest("task-input", v);
                        if let Some(o) = memo.get(&key) {
                            return Ok(o.clone());
                        }
                        let (x, p) = double_auction(v)?;
                        let o = Outcome::solution(x, p);
                        memo.insert(key, o.clone());
                        Ok(o)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            timings.tasks = t.elapsed();
            outs
        }
        AuctionKind::Standard => {
            let (outs, task_time, gather_time, n_turns) = standard_tasks(spec, &live, &coins, behaviors, opts)?;
            timings.tasks = task_time;
            timings.gather = gather_time;
            turns.gather = n_turns;
            outs
        }
    };

    for (j, b) in behaviors.iter().enumerate() {
        match &b.output {
            OutputBehavior::Honest => {}
            OutputBehavior::Abort => outputs[j] = Outcome::Abort,
            OutputBehavior::Replace(o) => outputs[j] = o.clone(),
        }
    }

    Ok(AllocatorRun {
        outputs,
        validated,
        coin,
        timings,
        turns,
    })
}

type TaskKey = (Digest32, Fixed);

/// Allocation, payment tasks, transfer of all task results, gather.
fn standard_tasks(
    spec: &AuctionSpec,
    live: &[Option<BidVector>],
    coins: &[Fixed],
    behaviors: &[ProviderBehavior],
    opts: &RunOptions,
) -> Result<(Vec<Outcome>, Duration, Duration, u64)> {
    let m = spec.m;
    let graph = build_task_graph(spec)?;
    let caps = &spec.capacities;
    let cfg = &spec.standard;
    let t = Instant::now();

    // Task results are pure in (input, coin): replicas holding the same pair
    // compute once, which is what concurrent replicas cost in wall-clock.
    let keys: Vec<Option<TaskKey>> = live
        .iter()
        .zip(coins)
        .map(|(v, c)| v.as_ref().map(|v| (canonical_digest("task-input", v), *c)))
        .collect();
    let mut inputs: BTreeMap<TaskKey, &BidVector> = BTreeMap::new();
    for (k, v) in keys.iter().zip(live) {
        if let (Some(k), Some(v)) = (k, v) {
            inputs.insert(*k, v);
        }
    }
    let allocs: BTreeMap<TaskKey, Allocation> = inputs
        .iter()
        .map(|(k, v)| (*k, standard_auction_allocate(v, caps, cfg, k.1)))
        .collect();

    let groups: Vec<(u32, std::ops::Range<usize>, BTreeSet<ProviderId>)> = graph
        .payment_tasks()
        .map(|t| match t.kind {
            TaskKind::Payments { first_user, end_user } => (t.id, first_user..end_user, t.assigned.clone()),
            _ => unreachable!("payment_tasks yields payment tasks"),
        })
        .collect();
    let mut jobs: BTreeSet<(u32, TaskKey)> = BTreeSet::new();
    for (id, _, members) in &groups {
        for &j in members {
            if let Some(k) = keys[j] {
                jobs.insert((*id, k));
            }
        }
    }
    let run_job = |(id, key): &(u32, TaskKey)| {
        let (_, users, _) = groups.iter().find(|g| g.0 == *id).expect("job of a known task");
        let chunk = payment_chunk(inputs[key], caps, cfg, key.1, &allocs[key], users.clone());
        ((*id, *key), chunk)
    };
    let jobs: Vec<_> = jobs.into_iter().collect();
    let results: Vec<((u32, TaskKey), Result<PaymentChunk>)> = if opts.threaded {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.iter().map(|job| s.spawn(move || run_job(job))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("payment task panicked"))
                .collect()
        })
    } else {
        jobs.iter().map(run_job).collect()
    };
    let mut chunks: BTreeMap<(u32, TaskKey), PaymentChunk> = BTreeMap::new();
    for (k, r) in results {
        chunks.insert(k, r?);
    }
    let task_time = t.elapsed();

    // transfer 0 carries the allocation from everyone; transfer g carries the
    // payment task g result from its group
    let t = Instant::now();
    let all: Vec<ProviderId> = (0..m).collect();
    let mut transfers = vec![TransferSpec::new(0, all.clone(), all.clone())];
    transfers.extend(
        groups
            .iter()
            .map(|(id, _, members)| TransferSpec::new(*id, members.iter().copied(), all.clone())),
    );
    let nodes = (0..m)
        .map(|j| {
            let Some(key) = keys[j] else { return Node::Halted };
            let mut mine = BTreeMap::new();
            mine.insert(0u32, to_canonical(&allocs[&key]));
            for (id, _, members) in &groups {
                if members.contains(&j) {
                    let mut chunk = chunks[&(*id, key)].clone();
                    if let Some(beneficiaries) = &behaviors[j].corrupt_tasks {
                        for &b in beneficiaries {
                            chunk.provider_revenue[b] += Fixed::ONE;
                        }
                    }
                    mine.insert(*id, to_canonical(&chunk));
                }
            }
            Node::Run(DataTransfer::new(
                j,
                transfers.clone(),
                mine,
                TransferBehavior::Honest,
                opts.flaws,
            ))
        })
        .collect();
    let mut sched = gen_fair_schedule(opts.schedule_seed(4), m, opts.policy, opts.max_delay)?;
    let (received, n_turns) = run_block(nodes, &mut sched, opts.turn_budget)?;

    let outs = received
        .into_iter()
        .map(|r| {
            let Some(values) = r.value() else { return Outcome::Abort };
            gather(&values, &groups, m, spec.n).unwrap_or(Outcome::Abort)
        })
        .collect();
    Ok((outs, task_time, t.elapsed(), n_turns))
}

fn gather(
    values: &BTreeMap<u32, Vec<u8>>,
    groups: &[(u32, std::ops::Range<usize>, BTreeSet<ProviderId>)],
    m: usize,
    n: usize,
) -> Result<Outcome> {
    let missing = || CoreError::InvalidArgument("transfer result missing".into());
    let x: Allocation = from_canonical(values.get(&0).ok_or_else(missing)?)?;
    let chunks = groups
        .iter()
        .map(|(id, _, _)| from_canonical::<PaymentChunk>(values.get(id).ok_or_else(missing)?))
        .collect::<Result<Vec<_>>>()?;
    if x.providers() != m || x.users() != n {
        return Err(CoreError::DimensionMismatch("transferred allocation".into()));
    }
    Ok(Outcome::solution(x, assemble_payments(&chunks, m, n)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocators::{local_execute, StandardAuctionConfig};
    use crate::fixed::fx;
    use crate::types::{Bid, ProviderBid};

    fn double_instance() -> (AuctionSpec, BidVector) {
        let users = vec![
            Bid::new(0, fx("1.2"), fx("1.0")),
            Bid::new(1, fx("0.8"), fx("1.0")),
            Bid::new(2, fx("1.0"), fx("0.5")),
        ];
        let provs = (0..4)
            .map(|j| ProviderBid::new(j, fx("0.3") + Fixed::from_raw(j as i64 * 1000), fx("0.6")))
            .collect();
        (AuctionSpec::double(4, 3, 1), BidVector::double(users, provs))
    }

    fn standard_instance() -> (AuctionSpec, BidVector) {
        let users = vec![
            Bid::new(0, fx("1.0"), fx("0.6")),
            Bid::new(1, fx("0.9"), fx("0.5")),
            Bid::new(2, fx("1.1"), fx("0.3")),
            Bid::new(3, fx("0.8"), fx("0.7")),
        ];
        let cfg = StandardAuctionConfig {
            groups: 2,
            ..Default::default()
        };
        (
            AuctionSpec::standard(4, 4, 1, vec![fx("1.0"), fx("0.5"), fx("0.5"), fx("0.25")], cfg),
            BidVector::standard(users),
        )
    }

    fn honest(m: usize) -> Vec<ProviderBehavior> {
        vec![ProviderBehavior::default(); m]
    }

    #[test]
    fn honest_runs_match_local_execution() {
        for (spec, b) in [double_instance(), standard_instance()] {
            for seed in 0..5 {
                let run = run_framework(&vec![b.clone(); 4], &spec, &honest(4), &RunOptions::new(seed)).unwrap();
                let (x, p) = local_execute(&b, &spec, seed).unwrap();
                assert_eq!(run.outcome(), Outcome::solution(x, p));
            }
        }
    }

    #[test]
    fn threaded_tasks_give_same_outcome() {
        let (spec, b) = standard_instance();
        let mut opts = RunOptions::new(3);
        let a = run_framework(&vec![b.clone(); 4], &spec, &honest(4), &opts).unwrap();
        opts.threaded = true;
        let c = run_framework(&vec![b; 4], &spec, &honest(4), &opts).unwrap();
        assert_eq!(a.outcome(), c.outcome());
    }

    #[test]
    fn differing_allocator_inputs_abort() {
        let (spec, b) = standard_instance();
        let mut other = b.clone();
        other.user_bids[1].unit_value = fx("0.95");
        let inputs = vec![
            BlockOutput::Value(b.clone()),
            BlockOutput::Value(other),
            BlockOutput::Value(b.clone()),
            BlockOutput::Value(b),
        ];
        let run = parallel_allocator(&inputs, &spec, &honest(4), &RunOptions::new(1)).unwrap();
        assert!(run.outputs.iter().all(Outcome::is_abort));
    }

    #[test]
    fn corrupted_payment_task_aborts() {
        let (spec, b) = standard_instance();
        let mut behaviors = honest(4);
        behaviors[0].corrupt_tasks = Some([0].into_iter().collect());
        let run = run_framework(&vec![b; 4], &spec, &behaviors, &RunOptions::new(1)).unwrap();
        assert!(run.outputs()[1..].iter().all(Outcome::is_abort));
    }

    #[test]
    fn corrupted_task_passes_with_single_sender_flaw() {
        let (spec, b) = standard_instance();
        let mut behaviors = honest(4);
        behaviors[0].corrupt_tasks = Some([0].into_iter().collect());
        let mut opts = RunOptions::new(1);
        opts.flaws.single_sender_transfer = true;
        let run = run_framework(&vec![b.clone(); 4], &spec, &behaviors, &opts).unwrap();
        let Outcome::Solution { payments, .. } = run.outcome() else {
            panic!("expected a solution")
        };
        let (_, honest_pay) = local_execute(&b, &spec, 1).unwrap();
        assert_eq!(
            payments.provider_payments[0],
            honest_pay.provider_payments[0] + Fixed::ONE
        );
    }

    #[test]
    fn withholding_provider_aborts_without_error() {
        let (spec, b) = double_instance();
        let mut behaviors = honest(4);
        behaviors[2].withhold = true;
        let run = run_framework(&vec![b; 4], &spec, &behaviors, &RunOptions::new(9)).unwrap();
        assert!(run.outcome().is_abort());
    }

    #[test]
    fn output_override_breaks_unanimity() {
        let (spec, b) = double_instance();
        let mut behaviors = honest(4);
        behaviors[3].output = OutputBehavior::Abort;
        let run = run_framework(&vec![b; 4], &spec, &behaviors, &RunOptions::new(2)).unwrap();
        assert!(!run.outputs()[0].is_abort());
        assert!(run.outcome().is_abort());
    }
}
