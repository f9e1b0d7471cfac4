//! Protocol building blocks, each a state machine that runs on [`simnet`].
//!
//! Every block ends at each provider with either a value or `Bot` (abort).
//! Deviating behaviours are part of each block's state so that coalition
//! strategies can be expressed without a second implementation.
//!
//! [`simnet`]: crate::simnet

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::{digest, to_canonical, Digest32, Reader, Writer};
use crate::encoding::{
    decode_bid, decode_provider_bid, empty_provider_stream, encode_bid, encode_provider_bid, BitStream, STREAM_LEN,
};
use crate::error::{CoreError, Result};
use crate::fixed::Fixed;
use crate::simnet::{Envelope, Outbox, Process, ProviderId, Scheduler, Tag, World};
use crate::types::{Bid, BidVector};

pub const BLOCK_BID_AGREEMENT: u32 = 1;
pub const BLOCK_INPUT_VALIDATION: u32 = 2;
pub const BLOCK_COMMON_COIN: u32 = 3;
pub const BLOCK_DATA_TRANSFER: u32 = 4;

const ROUND_BITS: u32 = 0;
const ROUND_ECHO: u32 = 1;
const ROUND_COMMIT: u32 = 0;
const ROUND_REVEAL: u32 = 1;

/// Final value of a block at one provider.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOutput<T> {
    Value(T),
    Bot,
}

impl<T> BlockOutput<T> {
    pub fn value(self) -> Option<T> {
        match self {
            BlockOutput::Value(v) => Some(v),
            BlockOutput::Bot => None,
        }
    }

    pub fn as_value(&self) -> Option<&T> {
        match self {
            BlockOutput::Value(v) => Some(v),
            BlockOutput::Bot => None,
        }
    }

    pub fn is_bot(&self) -> bool {
        matches!(self, BlockOutput::Bot)
    }
}

/// Planted protocol bugs used to check that the test harness notices them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtocolFlaws {
    /// Data transfer trusts the lowest-id sender instead of comparing copies.
    pub single_sender_transfer: bool,
    /// The common coin accepts reveals outside `[0, 1]`.
    pub unchecked_coin_range: bool,
    /// Input validation returns its own input without comparing.
    pub skip_input_validation: bool,
}

impl ProtocolFlaws {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn any(&self) -> bool {
        self.single_sender_transfer || self.unchecked_coin_range || self.skip_input_validation
    }
}

/// Either a live protocol participant or a provider that has stopped.
///
/// Halted providers never send; they model both withholding deviators and
/// providers that already aborted in an earlier block.
#[derive(Debug, Clone, Hash)]
pub enum Node<P> {
    Run(P),
    Halted,
}

impl<P: Process> Process for Node<P> {
    type Output = P::Output;

    fn on_move(&mut self, inbox: Vec<Envelope>, out: &mut Outbox) {
        if let Node::Run(p) = self {
            p.on_move(inbox, out);
        }
    }

    fn output(&self) -> Option<&P::Output> {
        match self {
            Node::Run(p) => p.output(),
            Node::Halted => None,
        }
    }

    fn is_honest(&self) -> bool {
        match self {
            Node::Run(p) => p.is_honest(),
            Node::Halted => false,
        }
    }
}

/// Runs one block to completion and maps providers without output to `Bot`.
pub fn run_block<P, T>(
    nodes: Vec<Node<P>>,
    sched: &mut impl Scheduler,
    turn_budget: u64,
) -> Result<(Vec<BlockOutput<T>>, u64)>
where
    P: Process<Output = BlockOutput<T>>,
    T: Clone + std::fmt::Debug + std::hash::Hash,
{
    let result = World::new(nodes).run(sched, turn_budget)?;
    let outs = result
        .outputs
        .into_iter()
        .map(|o| o.unwrap_or(BlockOutput::Bot))
        .collect();
    Ok((outs, result.turns))
}

// ---------------------------------------------------------------------------
// Bit sets

/// Packed bit vector; the payload unit of batched consensus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct BitSet {
    len: usize,
    words: Vec<u64>,
}

impl BitSet {
    pub fn zeros(len: usize) -> Self {
        BitSet {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        let mut s = BitSet::default();
        for b in bits {
            s.push(b);
        }
        s
    }

    pub fn push(&mut self, b: bool) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, b);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, b: bool) {
        let mask = 1u64 << (i % 64);
        if b {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn flip_all(&self) -> BitSet {
        let mut out = self.clone();
        for w in &mut out.words {
            *w = !*w;
        }
        out.clear_tail();
        out
    }

    pub fn any(&self) -> bool {
        self.words.iter().any(|&w| w != 0)
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    fn write(&self, w: &mut Writer) {
        w.u32(self.len as u32);
        for word in &self.words {
            w.u64(*word);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        let len = r.u32()? as usize;
        let nwords = len.div_ceil(64);
        if nwords * 8 > r.remaining() {
            return Err(CoreError::Truncated);
        }
        let words: Vec<u64> = r
            .take(nwords * 8)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if !len.is_multiple_of(64) && words[nwords - 1] >> (len % 64) != 0 {
            return Err(CoreError::InvalidArgument("nonzero padding bits".into()));
        }
        Ok(BitSet { len, words })
    }
}

// ---------------------------------------------------------------------------
// Rational consensus (stand-in)

/// How a provider behaves inside a consensus instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum ConsensusBehavior {
    #[default]
    Honest,
    /// Sends the complement of its input bits to the listed providers.
    Equivocate { flipped_for: BTreeSet<ProviderId> },
}

/// Per-instance decisions of a batch: `Some(bit)` or `None` for abort.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Decisions {
    values: BitSet,
    aborted: BitSet,
}

impl Decisions {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        if self.aborted.get(i) {
            None
        } else {
            Some(self.values.get(i))
        }
    }

    pub fn any_aborted(&self) -> bool {
        self.aborted.any()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ConsensusPhase {
    Start,
    AwaitBits,
    AwaitEchoes,
    Decided,
}

/// A batch of binary consensus instances sharing one tag, one instance per
/// bit position.
///
/// Round one broadcasts the input bits; round two echoes the full vector of
/// bits received from every provider. A provider aborts an instance if any
/// echo disagrees with what it received directly (equivocation), otherwise it
/// decides the majority bit, breaking ties by the parity of the bit sum.
#[derive(Debug, Clone, Hash)]
pub struct ConsensusInstance {
    block: u32,
    m: usize,
    inputs: BitSet,
    behavior: ConsensusBehavior,
    phase: ConsensusPhase,
    received: BTreeMap<ProviderId, BitSet>,
    echoes: BTreeMap<ProviderId, Vec<BitSet>>,
    malformed: bool,
    decision: Option<BlockOutput<Decisions>>,
}

impl ConsensusInstance {
    pub fn new(block: u32, m: usize, inputs: BitSet, behavior: ConsensusBehavior) -> Self {
        ConsensusInstance {
            block,
            m,
            inputs,
            behavior,
            phase: ConsensusPhase::Start,
            received: BTreeMap::new(),
            echoes: BTreeMap::new(),
            malformed: false,
            decision: None,
        }
    }

    fn width(&self) -> usize {
        self.inputs.len()
    }

    fn send_bits(&self, out: &mut Outbox) {
        let tag = Tag::new(self.block, Tag::ALL, ROUND_BITS);
        let encode = |bits: &BitSet| {
            let mut w = Writer::new();
            bits.write(&mut w);
            Arc::<[u8]>::from(w.finish())
        };
        let honest = encode(&self.inputs);
        match &self.behavior {
            ConsensusBehavior::Honest => out.broadcast(tag, honest),
            ConsensusBehavior::Equivocate { flipped_for } => {
                let flipped = encode(&self.inputs.flip_all());
                for to in 0..self.m {
                    let p = if flipped_for.contains(&to) { &flipped } else { &honest };
                    out.send(to, tag, p.clone());
                }
            }
        }
    }

    fn send_echo(&self, out: &mut Outbox) {
        let mut w = Writer::new();
        for bits in self.received.values() {
            bits.write(&mut w);
        }
        out.broadcast(Tag::new(self.block, Tag::ALL, ROUND_ECHO), w.finish());
    }

    fn absorb(&mut self, env: &Envelope) {
        let mut r = Reader::new(&env.payload);
        match env.tag.round {
            ROUND_BITS => {
                if self.received.contains_key(&env.from) {
                    return;
                }
                match BitSet::read(&mut r).and_then(|b| r.finish().map(|_| b)) {
                    Ok(bits) if bits.len() == self.width() => {
                        self.received.insert(env.from, bits);
                    }
                    _ => {
                        self.malformed = true;
                        self.received.insert(env.from, BitSet::zeros(self.width()));
                    }
                }
            }
            ROUND_ECHO => {
                if self.echoes.contains_key(&env.from) {
                    return;
                }
                let parsed: Result<Vec<BitSet>> = (0..self.m).map(|_| BitSet::read(&mut r)).collect();
                match parsed {
                    Ok(v) if r.remaining() == 0 && v.iter().all(|b| b.len() == self.width()) => {
                        self.echoes.insert(env.from, v);
                    }
                    _ => {
                        self.malformed = true;
                        self.echoes.insert(env.from, vec![BitSet::zeros(self.width()); self.m]);
                    }
                }
            }
            _ => self.malformed = true,
        }
    }

    fn decide(&self) -> BlockOutput<Decisions> {
        if self.malformed {
            return BlockOutput::Bot;
        }
        let width = self.width();
        let mut aborted = BitSet::zeros(width);
        for echo in self.echoes.values() {
            for (origin, direct) in self.received.values().enumerate() {
                for (k, word) in aborted.words.iter_mut().enumerate() {
                    *word |= direct.words[k] ^ echo[origin].words[k];
                }
            }
        }
        let rows: Vec<&[u64]> = self.received.values().map(|b| b.words.as_slice()).collect();
        if rows.windows(2).all(|w| w[0] == w[1]) {
            // unanimous rows are their own majority
            let values = self
                .received
                .values()
                .next()
                .cloned()
                .unwrap_or_else(|| BitSet::zeros(width));
            return BlockOutput::Value(Decisions { values, aborted });
        }
        let mut values = BitSet::zeros(width);
        for (k, word) in values.words.iter_mut().enumerate() {
            for bit in 0..64 {
                let ones = rows.iter().filter(|r| (r[k] >> bit) & 1 == 1).count();
                // padding is zero in every row, so it stays zero here
                if combine_count(ones, self.m) {
                    *word |= 1 << bit;
                }
            }
        }
        BlockOutput::Value(Decisions { values, aborted })
    }
}

impl Process for ConsensusInstance {
    type Output = BlockOutput<Decisions>;

    fn on_move(&mut self, inbox: Vec<Envelope>, out: &mut Outbox) {
        let block = self.block;
        for env in inbox.iter().filter(|e| e.tag.block == block) {
            self.absorb(env);
        }
        if self.phase == ConsensusPhase::Start {
            self.send_bits(out);
            self.phase = ConsensusPhase::AwaitBits;
        }
        if self.phase == ConsensusPhase::AwaitBits && self.received.len() == self.m {
            self.send_echo(out);
            self.phase = ConsensusPhase::AwaitEchoes;
        }
        if self.phase == ConsensusPhase::AwaitEchoes && self.echoes.len() == self.m {
            self.decision = Some(self.decide());
            self.phase = ConsensusPhase::Decided;
        }
    }

    fn output(&self) -> Option<&Self::Output> {
        self.decision.as_ref()
    }

    fn is_honest(&self) -> bool {
        self.behavior == ConsensusBehavior::Honest
    }
}

/// The combine rule applied by honest providers when every provider is
/// honest: per-position majority, ties broken by parity.
pub fn combine_bits(inputs: &[bool]) -> bool {
    combine_count(inputs.iter().filter(|&&b| b).count(), inputs.len())
}

fn combine_count(ones: usize, m: usize) -> bool {
    match (2 * ones).cmp(&m) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => ones % 2 == 1,
    }
}

/// Single-bit rational consensus among `inputs.len()` providers.
///
/// Returns each provider's output: `Some(bit)` or `None` for abort.
pub fn rational_consensus(
    block: u32,
    inputs: &[bool],
    behaviors: &[ConsensusBehavior],
    sched: &mut impl Scheduler,
    turn_budget: u64,
) -> Result<Vec<Option<bool>>> {
    let m = inputs.len();
    let nodes = inputs
        .iter()
        .zip(behaviors)
        .map(|(&b, beh)| Node::Run(ConsensusInstance::new(block, m, BitSet::from_bools([b]), beh.clone())))
        .collect();
    let (outs, _) = run_block(nodes, sched, turn_budget)?;
    Ok(outs.into_iter().map(|o| o.value().and_then(|d| d.get(0))).collect())
}

// ---------------------------------------------------------------------------
// Bid agreement

/// Streams of every bid slot of `view`, concatenated: users first, then
/// provider bids. Unencodable bids are replaced by the neutral (empty) bid.
pub fn bid_vector_bits(view: &BidVector) -> BitSet {
    let mut bits = BitSet::default();
    let mut push = |s: BitStream| s.bits().iter().for_each(|&b| bits.push(b));
    for bid in &view.user_bids {
        push(
            encode_bid(bid).unwrap_or_else(|_| encode_bid(&Bid::neutral(bid.bidder_id)).expect("neutral bid encodes")),
        );
    }
    if let Some(ps) = &view.provider_bids {
        for p in ps {
            push(encode_provider_bid(p).unwrap_or_else(|_| empty_provider_stream()));
        }
    }
    bits
}

/// Decodes agreed bits back into a bid vector with `n` users and, for double
/// auctions, `providers` provider bids.
pub fn bits_to_bid_vector(bits: &[bool], n: usize, providers: Option<usize>) -> BidVector {
    let stream = |slot: usize| {
        BitStream::from_bits(bits[slot * STREAM_LEN..(slot + 1) * STREAM_LEN].to_vec()).expect("slot has stream length")
    };
    let user_bids = (0..n).map(|i| decode_bid(&stream(i), i as u32)).collect();
    let provider_bids = providers.map(|m| (0..m).map(|j| decode_provider_bid(&stream(n + j), j as u32)).collect());
    BidVector {
        user_bids,
        provider_bids,
    }
}

/// Agreement on a bid vector through one consensus instance per bit of every
/// bid stream.
#[derive(Debug, Clone, Hash)]
pub struct BidAgreement {
    n: usize,
    providers: Option<usize>,
    consensus: ConsensusInstance,
    out: Option<BlockOutput<BidVector>>,
}

impl BidAgreement {
    /// `view` is the vector this provider received from the bidders.
    pub fn new(m: usize, view: &BidVector, behavior: ConsensusBehavior) -> Self {
        BidAgreement {
            n: view.n(),
            providers: view.provider_bids.as_ref().map(Vec::len),
            consensus: ConsensusInstance::new(BLOCK_BID_AGREEMENT, m, bid_vector_bits(view), behavior),
            out: None,
        }
    }
}

impl Process for BidAgreement {
    type Output = BlockOutput<BidVector>;

    fn on_move(&mut self, inbox: Vec<Envelope>, out: &mut Outbox) {
        self.consensus.on_move(inbox, out);
        if self.out.is_none() {
            if let Some(decided) = self.consensus.output() {
                self.out = Some(match decided {
                    BlockOutput::Value(d) if !d.any_aborted() => {
                        let bits: Vec<bool> = (0..d.len()).map(|i| d.get(i) == Some(true)).collect();
                        BlockOutput::Value(bits_to_bid_vector(&bits, self.n, self.providers))
                    }
                    _ => BlockOutput::Bot,
                });
            }
        }
    }

    fn output(&self) -> Option<&Self::Output> {
        self.out.as_ref()
    }

    fn is_honest(&self) -> bool {
        self.consensus.is_honest()
    }
}

// ---------------------------------------------------------------------------
// Input validation

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum ValidationBehavior {
    #[default]
    Honest,
    /// Sends `vector` instead of its input to the listed providers.
    SendOther {
        vector: BidVector,
        to: BTreeSet<ProviderId>,
    },
}

/// Every provider broadcasts its input; it outputs that input only if all
/// received vectors are identical.
#[derive(Debug, Clone, Hash)]
pub struct InputValidation {
    m: usize,
    input: BidVector,
    behavior: ValidationBehavior,
    skip_check: bool,
    started: bool,
    seen: BTreeMap<ProviderId, Arc<[u8]>>,
    out: Option<BlockOutput<BidVector>>,
}

impl InputValidation {
    pub fn new(m: usize, input: BidVector, behavior: ValidationBehavior, flaws: ProtocolFlaws) -> Self {
        InputValidation {
            m,
            input,
            behavior,
            skip_check: flaws.skip_input_validation,
            started: false,
            seen: BTreeMap::new(),
            out: None,
        }
    }
}

impl Process for InputValidation {
    type Output = BlockOutput<BidVector>;

    fn on_move(&mut self, inbox: Vec<Envelope>, out: &mut Outbox) {
        if !self.started {
            self.started = true;
            let tag = Tag::new(BLOCK_INPUT_VALIDATION, Tag::ALL, 0);
            let mine: Arc<[u8]> = to_canonical(&self.input).into();
            match &self.behavior {
                ValidationBehavior::Honest => out.broadcast(tag, mine),
                ValidationBehavior::SendOther { vector, to } => {
                    let other: Arc<[u8]> = to_canonical(vector).into();
                    for r in 0..self.m {
                        out.send(r, tag, if to.contains(&r) { other.clone() } else { mine.clone() });
                    }
                }
            }
            if self.skip_check {
                self.out = Some(BlockOutput::Value(self.input.clone()));
            }
        }
        for env in inbox {
            if env.tag.block == BLOCK_INPUT_VALIDATION {
                self.seen.entry(env.from).or_insert(env.payload);
            }
        }
        if self.out.is_none() && self.seen.len() == self.m {
            let mut distinct = self.seen.values().collect::<Vec<_>>();
            distinct.dedup();
            self.out = Some(if distinct.len() == 1 {
                BlockOutput::Value(self.input.clone())
            } else {
                BlockOutput::Bot
            });
        }
    }

    fn output(&self) -> Option<&Self::Output> {
        self.out.as_ref()
    }

    fn is_honest(&self) -> bool {
        self.behavior == ValidationBehavior::Honest
    }
}

// ---------------------------------------------------------------------------
// Common coin

/// Target distribution of the coin.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    Uniform01,
    /// Index `i` with probability `weights[i]`; weights sum to exactly one.
    Discrete {
        weights: Vec<Fixed>,
    },
    /// Integer in `lo..=hi`, each equally likely up to grid resolution.
    UniformInt {
        lo: i64,
        hi: i64,
    },
}

impl DistributionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DistributionSpec::Uniform01 => Ok(()),
            DistributionSpec::Discrete { weights } => {
                let total: Fixed = weights.iter().sum();
                if weights.iter().any(|w| w.is_negative()) || total != Fixed::ONE {
                    Err(CoreError::InvalidArgument(
                        "discrete weights must be nonnegative and sum to 1".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            DistributionSpec::UniformInt { lo, hi } if lo > hi => {
                Err(CoreError::InvalidArgument(format!("empty integer range {lo}..={hi}")))
            }
            DistributionSpec::UniformInt { .. } => Ok(()),
        }
    }

    /// Inverse CDF applied to `u` in `[0, 1)`.
    pub fn transform(&self, u: Fixed) -> Fixed {
        match self {
            DistributionSpec::Uniform01 => u,
            DistributionSpec::Discrete { weights } => {
                let mut acc = Fixed::ZERO;
                for (i, w) in weights.iter().enumerate() {
                    acc += *w;
                    if u < acc {
                        return Fixed::from_int(i as i64);
                    }
                }
                Fixed::from_int(weights.len().saturating_sub(1) as i64)
            }
            DistributionSpec::UniformInt { lo, hi } => {
                let span = (hi - lo + 1) as i128;
                let k = (u.raw() as i128 * span) >> crate::fixed::FRAC_BITS;
                Fixed::from_int(lo + k as i64)
            }
        }
    }
}

/// A hash commitment to a coin share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoinCommitment {
    pub digest: Digest32,
    pub value: Fixed,
    pub salt: [u8; 16],
}

fn commitment_digest(value: Fixed, salt: &[u8; 16]) -> Digest32 {
    let mut data = Vec::with_capacity(24);
    data.extend_from_slice(salt);
    data.extend_from_slice(&value.to_le_bytes());
    digest("coin-commitment", &data)
}

impl CoinCommitment {
    pub fn commit(value: Fixed, salt: [u8; 16]) -> Self {
        CoinCommitment {
            digest: commitment_digest(value, &salt),
            value,
            salt,
        }
    }

    /// Whether a reveal opens `digest` to a share in `[0, 1]`.
    pub fn verify(digest: &Digest32, value: Fixed, salt: &[u8; 16], check_range: bool) -> bool {
        let in_range = !value.is_negative() && value <= Fixed::ONE;
        commitment_digest(value, salt) == *digest && (in_range || !check_range)
    }
}

/// Honest share and salt of provider `j` for a pinned coin seed.
pub fn coin_share(seed: u64, j: ProviderId) -> (Fixed, [u8; 16]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let value = Fixed::from_raw(rng.random_range(0..=Fixed::ONE.raw()));
    let salt: [u8; 16] = rng.random();
    (value, salt)
}

/// Sum of shares modulo one.
pub fn combine_shares(shares: impl IntoIterator<Item = Fixed>) -> Fixed {
    shares.into_iter().fold(Fixed::ZERO, |acc, s| (acc + s.fract()).fract())
}

/// The value an honest coin run produces for a pinned seed.
pub fn coin_from_seed(seed: u64, m: usize, dist: &DistributionSpec) -> Fixed {
    dist.transform(combine_shares((0..m).map(|j| coin_share(seed, j).0)))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum CoinBehavior {
    #[default]
    Honest,
    /// Never commits; reveals its share as soon as it has seen the others.
    SkipCommit,
    /// Commits to and reveals `value` regardless of range.
    Reveal { value: Fixed },
    /// Commits honestly but reveals a different share.
    Mismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum CoinPhase {
    Start,
    AwaitCommits,
    AwaitReveals,
    Done,
}

/// Commit-reveal coin: shares are summed modulo one and passed through the
/// inverse CDF of the requested distribution.
#[derive(Debug, Clone, Hash)]
pub struct CommonCoin {
    m: usize,
    dist: DistributionSpec,
    share: CoinCommitment,
    behavior: CoinBehavior,
    check_range: bool,
    phase: CoinPhase,
    commits: BTreeMap<ProviderId, Digest32>,
    reveals: BTreeMap<ProviderId, (Fixed, [u8; 16])>,
    out: Option<BlockOutput<Fixed>>,
}

impl CommonCoin {
    pub fn new(
        m: usize,
        dist: DistributionSpec,
        share: Fixed,
        salt: [u8; 16],
        behavior: CoinBehavior,
        flaws: ProtocolFlaws,
    ) -> Self {
        let committed = match &behavior {
            CoinBehavior::Reveal { value } => *value,
            _ => share,
        };
        CommonCoin {
            m,
            dist,
            share: CoinCommitment::commit(committed, salt),
            behavior,
            check_range: !flaws.unchecked_coin_range,
            phase: CoinPhase::Start,
            commits: BTreeMap::new(),
            reveals: BTreeMap::new(),
            out: None,
        }
    }

    fn reveal(&self, out: &mut Outbox) {
        let value = match self.behavior {
            CoinBehavior::Mismatch => Fixed::ONE - self.share.value,
            _ => self.share.value,
        };
        let mut w = Writer::new();
        w.raw(&self.share.salt);
        w.fixed(value);
        out.broadcast(Tag::new(BLOCK_COMMON_COIN, Tag::ALL, ROUND_REVEAL), w.finish());
    }

    fn finish(&self) -> BlockOutput<Fixed> {
        let mut shares = Vec::with_capacity(self.m);
        for (j, (value, salt)) in &self.reveals {
            match self.commits.get(j) {
                Some(d) if CoinCommitment::verify(d, *value, salt, self.check_range) => shares.push(*value),
                _ => return BlockOutput::Bot,
            }
        }
        BlockOutput::Value(self.dist.transform(combine_shares(shares)))
    }
}

impl Process for CommonCoin {
    type Output = BlockOutput<Fixed>;

    fn on_move(&mut self, inbox: Vec<Envelope>, out: &mut Outbox) {
        for env in inbox.iter().filter(|e| e.tag.block == BLOCK_COMMON_COIN) {
            let mut r = Reader::new(&env.payload);
            match env.tag.round {
                ROUND_COMMIT => {
                    if let Ok(d) = r.take(32) {
                        self.commits.entry(env.from).or_insert_with(|| d.try_into().unwrap());
                    }
                }
                ROUND_REVEAL => {
                    let parsed = r.take(16).and_then(|s| Ok((s.try_into().unwrap(), r.fixed()?)));
                    match parsed {
                        Ok((salt, value)) => {
                            self.reveals.entry(env.from).or_insert((value, salt));
                        }
                        // unparseable reveal: record something that cannot verify
                        Err(_) => {
                            self.reveals.entry(env.from).or_insert((Fixed::from_int(-1), [0; 16]));
                        }
                    }
                }
                _ => {}
            }
        }
        if self.phase == CoinPhase::Start {
            if self.behavior != CoinBehavior::SkipCommit {
                out.broadcast(
                    Tag::new(BLOCK_COMMON_COIN, Tag::ALL, ROUND_COMMIT),
                    self.share.digest.to_vec(),
                );
            }
            self.phase = CoinPhase::AwaitCommits;
        }
        let others_committed = (0..self.m).filter(|j| self.commits.contains_key(j)).count();
        let ready = match self.behavior {
            CoinBehavior::SkipCommit => others_committed + 1 >= self.m,
            _ => others_committed == self.m,
        };
        if self.phase == CoinPhase::AwaitCommits && ready {
            self.reveal(out);
            self.phase = CoinPhase::AwaitReveals;
        }
        if self.phase == CoinPhase::AwaitReveals && self.reveals.len() == self.m {
            self.out = Some(self.finish());
            self.phase = CoinPhase::Done;
        }
    }

    fn output(&self) -> Option<&Self::Output> {
        self.out.as_ref()
    }

    fn is_honest(&self) -> bool {
        self.behavior == CoinBehavior::Honest
    }
}

// ---------------------------------------------------------------------------
// Data transfer

/// One transfer: senders in `senders` deliver a value to `receivers`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransferSpec {
    pub id: u32,
    pub senders: BTreeSet<ProviderId>,
    pub receivers: BTreeSet<ProviderId>,
}

impl TransferSpec {
    pub fn new(
        id: u32,
        senders: impl IntoIterator<Item = ProviderId>,
        receivers: impl IntoIterator<Item = ProviderId>,
    ) -> Self {
        TransferSpec {
            id,
            senders: senders.into_iter().collect(),
            receivers: receivers.into_iter().collect(),
        }
    }

    /// Whether coalitions of size `k` cannot control this transfer alone.
    pub fn is_resilient(&self, k: usize) -> bool {
        self.senders.len() > k && self.receivers.len() > k
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum TransferBehavior {
    #[default]
    Honest,
    /// Sends `payload` instead of its input for the given transfer ids, to
    /// the listed receivers only (all receivers when empty).
    Substitute {
        payloads: BTreeMap<u32, Vec<u8>>,
        to: BTreeSet<ProviderId>,
    },
}

/// A provider's side of a set of concurrent transfers.
///
/// A receiver outputs the values of every transfer it receives once all
/// senders' copies agree, and aborts as soon as two copies differ.
#[derive(Debug, Clone, Hash)]
pub struct DataTransfer {
    me: ProviderId,
    transfers: Vec<TransferSpec>,
    inputs: BTreeMap<u32, Arc<[u8]>>,
    behavior: TransferBehavior,
    trust_lowest_sender: bool,
    started: bool,
    copies: BTreeMap<u32, BTreeMap<ProviderId, Arc<[u8]>>>,
    out: Option<BlockOutput<BTreeMap<u32, Vec<u8>>>>,
}

impl DataTransfer {
    /// `inputs` holds this provider's value for every transfer it sends in.
    pub fn new(
        me: ProviderId,
        transfers: Vec<TransferSpec>,
        inputs: BTreeMap<u32, Vec<u8>>,
        behavior: TransferBehavior,
        flaws: ProtocolFlaws,
    ) -> Self {
        DataTransfer {
            me,
            transfers,
            inputs: inputs.into_iter().map(|(k, v)| (k, v.into())).collect(),
            behavior,
            trust_lowest_sender: flaws.single_sender_transfer,
            started: false,
            copies: BTreeMap::new(),
            out: None,
        }
    }

    fn decide(&self) -> Option<BlockOutput<BTreeMap<u32, Vec<u8>>>> {
        let mut values = BTreeMap::new();
        for t in self.transfers.iter().filter(|t| t.receivers.contains(&self.me)) {
            let got = self.copies.get(&t.id);
            if self.trust_lowest_sender {
                let first = t.senders.iter().next()?;
                values.insert(t.id, got?.get(first)?.to_vec());
                continue;
            }
            let got = got.map(|g| g.values().collect::<Vec<_>>()).unwrap_or_default();
            if got.windows(2).any(|w| w[0] != w[1]) {
                return Some(BlockOutput::Bot);
            }
            if got.len() < t.senders.len() {
                return None;
            }
            values.insert(t.id, got[0].to_vec());
        }
        // a conflict in a later transfer still aborts, even if an earlier one is incomplete
        Some(BlockOutput::Value(values))
    }

    fn conflict(&self) -> bool {
        !self.trust_lowest_sender
            && self.copies.values().any(|c| {
                let v: Vec<_> = c.values().collect();
                v.windows(2).any(|w| w[0] != w[1])
            })
    }
}

impl Process for DataTransfer {
    type Output = BlockOutput<BTreeMap<u32, Vec<u8>>>;

    fn on_move(&mut self, inbox: Vec<Envelope>, out: &mut Outbox) {
        if !self.started {
            self.started = true;
            for t in self.transfers.iter().filter(|t| t.senders.contains(&self.me)) {
                let Some(mine) = self.inputs.get(&t.id) else { continue };
                let tag = Tag::new(BLOCK_DATA_TRANSFER, t.id, 0);
                match &self.behavior {
                    TransferBehavior::Substitute { payloads, to } if payloads.contains_key(&t.id) => {
                        let other: Arc<[u8]> = payloads[&t.id].clone().into();
                        for &r in &t.receivers {
                            let p = if to.is_empty() || to.contains(&r) { &other } else { mine };
                            out.send(r, tag, p.clone());
                        }
                    }
                    _ => out.multicast(t.receivers.iter().copied(), tag, mine.clone()),
                }
            }
        }
        for env in inbox.into_iter().filter(|e| e.tag.block == BLOCK_DATA_TRANSFER) {
            let expected = self
                .transfers
                .iter()
                .any(|t| t.id == env.tag.slot && t.senders.contains(&env.from));
            if expected {
                self.copies
                    .entry(env.tag.slot)
                    .or_default()
                    .entry(env.from)
                    .or_insert(env.payload);
            }
        }
        if self.out.is_none() {
            if self.conflict() {
                self.out = Some(BlockOutput::Bot);
            } else {
                self.out = self.decide();
            }
        }
    }

    fn output(&self) -> Option<&Self::Output> {
        self.out.as_ref()
    }

    fn is_honest(&self) -> bool {
        self.behavior == TransferBehavior::Honest
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::fx;
    use crate::simnet::{gen_fair_schedule, SchedulePolicy};
    use crate::types::ProviderBid;

    const BUDGET: u64 = 1_000_000;

    fn sched(seed: u64, m: usize) -> crate::simnet::Schedule {
        gen_fair_schedule(seed, m, SchedulePolicy::RandomFair, 3).unwrap()
    }

    #[test]
    fn consensus_unanimous_input() {
        let out = rational_consensus(
            9,
            &[true; 4],
            &vec![ConsensusBehavior::Honest; 4],
            &mut sched(1, 4),
            BUDGET,
        )
        .unwrap();
        assert_eq!(out, vec![Some(true); 4]);
    }

    #[test]
    fn consensus_mixed_inputs_agree() {
        for seed in 0..100 {
            let inputs = [false, false, true];
            let out = rational_consensus(
                9,
                &inputs,
                &vec![ConsensusBehavior::Honest; 3],
                &mut sched(seed, 3),
                BUDGET,
            )
            .unwrap();
            let first = out[0].expect("honest run decides");
            assert!(out.iter().all(|o| *o == Some(first)));
            assert!(inputs.contains(&first));
            assert_eq!(first, combine_bits(&inputs));
        }
    }

    #[test]
    fn consensus_tie_breaks_by_parity() {
        assert!(!combine_bits(&[true, true, false, false]));
        assert!(combine_bits(&[true, false]));
        assert!(combine_bits(&[true, true, true, false, false, false]));
    }

    #[test]
    fn consensus_equivocation_aborts() {
        let mut behaviors = vec![ConsensusBehavior::Honest; 4];
        behaviors[3] = ConsensusBehavior::Equivocate {
            flipped_for: [0, 1].into_iter().collect(),
        };
        for seed in 0..20 {
            let out = rational_consensus(9, &[false; 4], &behaviors, &mut sched(seed, 4), BUDGET).unwrap();
            assert!(out[..3].iter().all(Option::is_none), "{out:?}");
        }
    }

    fn agree(views: &[BidVector], seed: u64) -> Vec<BlockOutput<BidVector>> {
        let m = views.len();
        let nodes = views
            .iter()
            .map(|v| Node::Run(BidAgreement::new(m, v, ConsensusBehavior::Honest)))
            .collect();
        run_block(nodes, &mut sched(seed, m), BUDGET).unwrap().0
    }

    fn sample_vector() -> BidVector {
        BidVector::double(
            vec![
                Bid::new(0, fx("1.0"), fx("0.5")),
                Bid::neutral(1),
                Bid::new(2, fx("0.8"), fx("0.25")),
            ],
            vec![
                ProviderBid::new(0, fx("0.2"), fx("1")),
                ProviderBid::new(1, fx("0.4"), fx("2")),
            ],
        )
    }

    #[test]
    fn bid_agreement_validity() {
        let v = sample_vector();
        let outs = agree(&vec![v.clone(); 4], 3);
        assert!(outs.iter().all(|o| *o == BlockOutput::Value(v.clone())));
    }

    #[test]
    fn bid_agreement_inconsistent_bidder_follows_combine_rule() {
        let base = sample_vector();
        let mut views = vec![base.clone(); 4];
        views[0].user_bids[0].unit_value = fx("1.25");
        views[1].user_bids[0].unit_value = fx("0.75");
        views[2].user_bids[0].demand = fx("0.125");
        let streams: Vec<BitStream> = views.iter().map(|v| encode_bid(&v.user_bids[0]).unwrap()).collect();
        let combined: Vec<bool> = (0..STREAM_LEN)
            .map(|k| combine_bits(&streams.iter().map(|s| s.get(k)).collect::<Vec<_>>()))
            .collect();
        let expected_bid = decode_bid(&BitStream::from_bits(combined).unwrap(), 0);
        for seed in 0..10 {
            let outs = agree(&views, seed);
            let first = outs[0].as_value().unwrap().clone();
            assert!(outs.iter().all(|o| o.as_value() == Some(&first)));
            assert_eq!(first.user_bids[0], expected_bid);
            assert_eq!(first.user_bids[1..], base.user_bids[1..]);
        }
    }

    #[test]
    fn bid_agreement_unencodable_bid_becomes_neutral() {
        let mut v = sample_vector();
        v.user_bids[2].demand = Fixed::from_raw(-5);
        let outs = agree(&vec![v; 3], 1);
        for o in outs {
            assert_eq!(o.value().unwrap().user_bids[2], Bid::neutral(2));
        }
    }

    fn validate(
        inputs: Vec<BidVector>,
        behaviors: Vec<ValidationBehavior>,
        flaws: ProtocolFlaws,
    ) -> Vec<BlockOutput<BidVector>> {
        let m = inputs.len();
        let nodes = inputs
            .into_iter()
            .zip(behaviors)
            .map(|(v, b)| Node::Run(InputValidation::new(m, v, b, flaws)))
            .collect();
        run_block(nodes, &mut sched(5, m), BUDGET).unwrap().0
    }

    #[test]
    fn input_validation_cases() {
        let v = sample_vector();
        let outs = validate(
            vec![v.clone(); 4],
            vec![ValidationBehavior::Honest; 4],
            ProtocolFlaws::none(),
        );
        assert!(outs.iter().all(|o| *o == BlockOutput::Value(v.clone())));

        let mut w = v.clone();
        w.user_bids[0].demand = fx("0.75");
        let mut inputs = vec![v.clone(); 4];
        inputs[2] = w.clone();
        let outs = validate(inputs, vec![ValidationBehavior::Honest; 4], ProtocolFlaws::none());
        assert!(outs.iter().all(BlockOutput::is_bot));

        let mut behaviors = vec![ValidationBehavior::Honest; 4];
        behaviors[1] = ValidationBehavior::SendOther {
            vector: w,
            to: (0..4).collect(),
        };
        let outs = validate(vec![v; 4], behaviors, ProtocolFlaws::none());
        for j in [0, 2, 3] {
            assert!(outs[j].is_bot());
        }
    }

    #[test]
    fn skipped_validation_flaw_accepts_differing_inputs() {
        let v = sample_vector();
        let mut w = v.clone();
        w.user_bids[0].demand = fx("0.75");
        let flaws = ProtocolFlaws {
            skip_input_validation: true,
            ..Default::default()
        };
        let outs = validate(vec![v.clone(), w], vec![ValidationBehavior::Honest; 2], flaws);
        assert_eq!(outs[0], BlockOutput::Value(v));
    }

    fn coin(
        shares: &[Fixed],
        behaviors: Vec<CoinBehavior>,
        flaws: ProtocolFlaws,
        dist: DistributionSpec,
    ) -> Vec<BlockOutput<Fixed>> {
        let m = shares.len();
        let nodes = shares
            .iter()
            .zip(behaviors)
            .enumerate()
            .map(|(j, (&s, b))| Node::Run(CommonCoin::new(m, dist.clone(), s, [j as u8; 16], b, flaws)))
            .collect();
        run_block(nodes, &mut sched(11, m), BUDGET).unwrap().0
    }

    #[test]
    fn coin_sums_modulo_one() {
        let outs = coin(
            &[fx("0.25"), fx("0.5"), fx("0.5")],
            vec![CoinBehavior::Honest; 3],
            ProtocolFlaws::none(),
            DistributionSpec::Uniform01,
        );
        assert!(outs.iter().all(|o| *o == BlockOutput::Value(fx("0.25"))));
        let outs = coin(
            &[Fixed::ZERO; 2],
            vec![CoinBehavior::Honest; 2],
            ProtocolFlaws::none(),
            DistributionSpec::Uniform01,
        );
        assert!(outs.iter().all(|o| *o == BlockOutput::Value(Fixed::ZERO)));
    }

    #[test]
    fn coin_out_of_range_aborts() {
        let mut behaviors = vec![CoinBehavior::Honest; 3];
        behaviors[2] = CoinBehavior::Reveal { value: fx("1.5") };
        let outs = coin(
            &[fx("0.25"); 3],
            behaviors.clone(),
            ProtocolFlaws::none(),
            DistributionSpec::Uniform01,
        );
        assert!(outs.iter().all(BlockOutput::is_bot));

        let flaws = ProtocolFlaws {
            unchecked_coin_range: true,
            ..Default::default()
        };
        let outs = coin(&[fx("0.25"); 3], behaviors, flaws, DistributionSpec::Uniform01);
        assert_eq!(outs[0], BlockOutput::Value(fx("0")));
    }

    #[test]
    fn coin_skip_commit_and_mismatch_abort() {
        for dev in [CoinBehavior::SkipCommit, CoinBehavior::Mismatch] {
            let mut behaviors = vec![CoinBehavior::Honest; 4];
            behaviors[0] = dev;
            let outs = coin(
                &[fx("0.125"); 4],
                behaviors,
                ProtocolFlaws::none(),
                DistributionSpec::Uniform01,
            );
            assert!(outs[1..].iter().all(BlockOutput::is_bot));
        }
    }

    #[test]
    fn distribution_transforms() {
        let d = DistributionSpec::Discrete {
            weights: vec![fx("0.25"), fx("0.75")],
        };
        d.validate().unwrap();
        assert_eq!(d.transform(fx("0.2")), Fixed::from_int(0));
        assert_eq!(d.transform(fx("0.25")), Fixed::from_int(1));
        let u = DistributionSpec::UniformInt { lo: 3, hi: 6 };
        assert_eq!(u.transform(Fixed::ZERO), Fixed::from_int(3));
        assert_eq!(u.transform(Fixed::from_raw(Fixed::ONE.raw() - 1)), Fixed::from_int(6));
        assert!(DistributionSpec::Discrete {
            weights: vec![fx("0.5")]
        }
        .validate()
        .is_err());
        assert!(DistributionSpec::UniformInt { lo: 2, hi: 1 }.validate().is_err());
    }

    #[test]
    fn commitment_verification() {
        let c = CoinCommitment::commit(fx("0.5"), [7; 16]);
        assert!(CoinCommitment::verify(&c.digest, fx("0.5"), &[7; 16], true));
        assert!(!CoinCommitment::verify(&c.digest, fx("0.25"), &[7; 16], true));
        assert!(!CoinCommitment::verify(&c.digest, fx("0.5"), &[8; 16], true));
        let big = CoinCommitment::commit(fx("1.5"), [1; 16]);
        assert!(!CoinCommitment::verify(&big.digest, fx("1.5"), &[1; 16], true));
        assert!(CoinCommitment::verify(&big.digest, fx("1.5"), &[1; 16], false));
    }

    #[test]
    fn honest_coin_matches_pinned_seed() {
        for seed in 0..20 {
            let m = 4;
            let nodes = (0..m)
                .map(|j| {
                    let (s, salt) = coin_share(seed, j);
                    Node::Run(CommonCoin::new(
                        m,
                        DistributionSpec::Uniform01,
                        s,
                        salt,
                        CoinBehavior::Honest,
                        ProtocolFlaws::none(),
                    ))
                })
                .collect();
            let outs = run_block(nodes, &mut sched(seed, m), BUDGET).unwrap().0;
            let expected = coin_from_seed(seed, m, &DistributionSpec::Uniform01);
            assert!(outs.iter().all(|o| *o == BlockOutput::Value(expected)));
        }
    }

    fn transfer(
        spec: TransferSpec,
        inputs: &[(ProviderId, Vec<u8>)],
        halted: &[ProviderId],
        flaws: ProtocolFlaws,
    ) -> Vec<BlockOutput<BTreeMap<u32, Vec<u8>>>> {
        let m = 4;
        let nodes = (0..m)
            .map(|j| {
                if halted.contains(&j) {
                    return Node::Halted;
                }
                let ins = inputs
                    .iter()
                    .filter(|(s, _)| *s == j)
                    .map(|(_, v)| (spec.id, v.clone()))
                    .collect();
                Node::Run(DataTransfer::new(
                    j,
                    vec![spec.clone()],
                    ins,
                    TransferBehavior::Honest,
                    flaws,
                ))
            })
            .collect();
        run_block(nodes, &mut sched(2, m), BUDGET).unwrap().0
    }

    #[test]
    fn data_transfer_cases() {
        let spec = TransferSpec::new(7, [0, 1], 0..4);
        let outs = transfer(spec.clone(), &[(0, vec![7]), (1, vec![7])], &[], ProtocolFlaws::none());
        assert!(outs
            .iter()
            .all(|o| o.as_value().map(|v| v[&7].clone()) == Some(vec![7])));

        let outs = transfer(spec.clone(), &[(0, vec![7]), (1, vec![8])], &[], ProtocolFlaws::none());
        assert!(outs.iter().all(BlockOutput::is_bot));

        // k = 1: |S| = 2 with one silent sender
        let outs = transfer(spec.clone(), &[(0, vec![7])], &[1], ProtocolFlaws::none());
        assert!(outs.iter().enumerate().all(|(j, o)| j == 1 || o.is_bot()));
        assert!(spec.is_resilient(1));
        assert!(!spec.is_resilient(2));
    }

    #[test]
    fn single_sender_flaw_trusts_lowest_id() {
        let spec = TransferSpec::new(7, [0, 1], 0..4);
        let flaws = ProtocolFlaws {
            single_sender_transfer: true,
            ..Default::default()
        };
        let outs = transfer(spec, &[(0, vec![9]), (1, vec![7])], &[], flaws);
        assert!(outs
            .iter()
            .all(|o| o.as_value().map(|v| v[&7].clone()) == Some(vec![9])));
    }

    #[test]
    fn bitset_io() {
        let b = BitSet::from_bools((0..130).map(|i| i % 3 == 0));
        let mut w = Writer::new();
        b.write(&mut w);
        let bytes = w.finish();
        let mut r = Reader::new(&bytes);
        assert_eq!(BitSet::read(&mut r).unwrap(), b);
        assert_eq!(b.flip_all().flip_all(), b);
        assert!(!b.flip_all().get(0));
    }
}
