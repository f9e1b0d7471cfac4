//! Deterministic turn-based asynchronous network.
//!
//! Each turn the schedule picks one provider to move. The mover receives a
//! subset of the envelopes addressed to it (any envelope that has waited
//! `max_delay` of the recipient's moves is always included), runs one step of
//! its state machine and may send new envelopes. Given the same seed and the
//! same initial processes, a run is reproducible bit for bit.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Debug;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::{digest, Digest32};
use crate::error::{CoreError, Result};

pub type ProviderId = usize;

/// Disambiguates concurrent block instances sharing one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tag {
    /// Block instance.
    pub block: u32,
    /// Bidder or task the message concerns; `Tag::ALL` for batched messages.
    pub slot: u32,
    /// Protocol round (or bit position).
    pub round: u32,
}

impl Tag {
    pub const ALL: u32 = u32::MAX;

    pub const fn new(block: u32, slot: u32, round: u32) -> Self {
        Tag { block, slot, round }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub from: ProviderId,
    pub to: ProviderId,
    pub tag: Tag,
    pub payload: Arc<[u8]>,
}

impl Debug for Envelope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Envelope")
            .field("from", &self.from)
            .field("to", &self.to)
            .field("tag", &self.tag)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

/// Messages produced during one move.
#[derive(Debug)]
pub struct Outbox {
    me: ProviderId,
    m: usize,
    sent: Vec<Envelope>,
}

impl Outbox {
    fn new(me: ProviderId, m: usize) -> Self {
        Outbox {
            me,
            m,
            sent: Vec::new(),
        }
    }

    pub fn me(&self) -> ProviderId {
        self.me
    }

    pub fn providers(&self) -> usize {
        self.m
    }

    pub fn send(&mut self, to: ProviderId, tag: Tag, payload: impl Into<Arc<[u8]>>) {
        self.sent.push(Envelope {
            from: self.me,
            to,
            tag,
            payload: payload.into(),
        });
    }

    /// Sends the same payload to every provider, the sender included.
    pub fn broadcast(&mut self, tag: Tag, payload: impl Into<Arc<[u8]>>) {
        self.multicast(0..self.m, tag, payload);
    }

    pub fn multicast(&mut self, to: impl IntoIterator<Item = ProviderId>, tag: Tag, payload: impl Into<Arc<[u8]>>) {
        let payload: Arc<[u8]> = payload.into();
        for r in to {
            self.send(r, tag, payload.clone());
        }
    }
}

/// A provider's protocol state machine.
///
/// Processes must be reactive: a move with an empty inbox that sends nothing
/// must not lead to later sends without new input. The simulator relies on
/// this to stop runs in which every remaining provider waits forever.
pub trait Process: Hash {
    type Output: Clone + Debug + Hash;

    fn on_move(&mut self, inbox: Vec<Envelope>, out: &mut Outbox);

    fn output(&self) -> Option<&Self::Output>;

    /// False for processes that deviate from the protocol. A stalled run made
    /// only of honest processes is a liveness bug.
    fn is_honest(&self) -> bool {
        true
    }
}

/// A process that never sends and never outputs.
#[derive(Debug, Clone, Copy, Hash, Default)]
pub struct Silent<O>(std::marker::PhantomData<O>);

impl<O: Clone + Debug + Hash> Process for Silent<O> {
    type Output = O;

    fn on_move(&mut self, _inbox: Vec<Envelope>, _out: &mut Outbox) {}

    fn output(&self) -> Option<&O> {
        None
    }

    fn is_honest(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulePolicy {
    /// Fixed order `0, 1, ..., m-1` every round.
    RoundRobin,
    /// A fresh seeded permutation of the providers every round.
    RandomFair,
}

/// Chooses movers and which pending envelopes they receive.
///
/// Implementations must be fair: every provider moves at least once in every
/// `2m - 1` consecutive turns. Delivery deadlines are enforced by the world.
pub trait Scheduler {
    fn max_delay(&self) -> u32;

    fn next_mover(&mut self, turn: u64) -> ProviderId;

    /// For each pending, not yet overdue envelope (in send order), whether
    /// to deliver it on this move.
    fn deliver(&mut self, mover: ProviderId, pending: &[&Envelope]) -> Vec<bool>;
}

/// Seeded fair schedule.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub seed: u64,
    pub policy: SchedulePolicy,
    pub max_delay: u32,
    m: usize,
    rng: ChaCha8Rng,
    round: Vec<ProviderId>,
    pos: usize,
}

/// Builds a seeded fair schedule for `m` providers.
pub fn gen_fair_schedule(seed: u64, m: usize, policy: SchedulePolicy, max_delay: u32) -> Result<Schedule> {
    if m == 0 {
        return Err(CoreError::InvalidArgument(
            "schedule needs at least one provider".into(),
        ));
    }
    if max_delay == 0 {
        return Err(CoreError::InvalidArgument("max_delay must be positive".into()));
    }
    Ok(Schedule {
        seed,
        policy,
        max_delay,
        m,
        rng: ChaCha8Rng::seed_from_u64(seed),
        round: (0..m).collect(),
        pos: m,
    })
}

impl Schedule {
    pub fn providers(&self) -> usize {
        self.m
    }
}

impl Scheduler for Schedule {
    fn max_delay(&self) -> u32 {
        self.max_delay
    }

    fn next_mover(&mut self, _turn: u64) -> ProviderId {
        if self.pos == self.m {
            self.pos = 0;
            if self.policy == SchedulePolicy::RandomFair {
                self.round.shuffle(&mut self.rng);
            }
        }
        let j = self.round[self.pos];
        self.pos += 1;
        j
    }

    fn deliver(&mut self, _mover: ProviderId, pending: &[&Envelope]) -> Vec<bool> {
        if self.max_delay == 1 {
            return vec![true; pending.len()];
        }
        pending.iter().map(|_| self.rng.random_bool(0.5)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Send,
    Deliver,
}

/// One line of a run transcript.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub turn: u64,
    pub event: EventKind,
    pub seq: u64,
    pub from: ProviderId,
    pub to: ProviderId,
    pub tag: Tag,
    #[serde(with = "hex_digest")]
    pub payload_hash: Digest32,
}

mod hex_digest {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        let hex: String = d.iter().map(|b| format!("{b:02x}")).collect();
        s.serialize_str(&hex)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        if s.len() != 64 {
            return Err(serde::de::Error::custom("digest must be 64 hex characters"));
        }
        for (i, b) in out.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(serde::de::Error::custom)?;
        }
        Ok(out)
    }
}

/// Renders a transcript as JSON lines.
pub fn transcript_jsonl(entries: &[TranscriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("transcript entries serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Hash)]
struct InFlight {
    seq: u64,
    waited: u32,
    env: Envelope,
}

/// Simulation state: processes, in-flight envelopes and write-once outputs.
#[derive(Debug, Clone)]
pub struct World<P: Process> {
    turn: u64,
    next_seq: u64,
    procs: Vec<P>,
    in_flight: Vec<InFlight>,
    outputs: Vec<Option<P::Output>>,
    record: bool,
    transcript: Vec<TranscriptEntry>,
    // providers that made an idle move since the last send, delivery or output
    idle_since_activity: Vec<bool>,
}

impl<P: Process> World<P> {
    pub fn new(procs: Vec<P>) -> Self {
        let m = procs.len();
        World {
            turn: 0,
            next_seq: 0,
            procs,
            in_flight: Vec::new(),
            outputs: vec![None; m],
            record: false,
            transcript: Vec::new(),
            idle_since_activity: vec![false; m],
        }
    }

    /// Enables transcript recording.
    pub fn with_transcript(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    pub fn providers(&self) -> usize {
        self.procs.len()
    }

    pub fn turn(&self) -> u64 {
        self.turn
    }

    pub fn outputs(&self) -> &[Option<P::Output>] {
        &self.outputs
    }

    pub fn processes(&self) -> &[P] {
        &self.procs
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn all_honest(&self) -> bool {
        self.procs.iter().all(Process::is_honest)
    }

    pub fn done(&self) -> bool {
        self.outputs.iter().all(Option::is_some) && self.in_flight.is_empty()
    }

    /// Stable hash of the full world state.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.turn.hash(&mut h);
        self.next_seq.hash(&mut h);
        self.procs.hash(&mut h);
        self.in_flight.hash(&mut h);
        self.outputs.hash(&mut h);
        self.transcript.hash(&mut h);
        h.finish()
    }

    fn stalled(&self) -> bool {
        self.in_flight.is_empty() && self.idle_since_activity.iter().all(|&b| b)
    }

    fn log(&mut self, event: EventKind, seq: u64, env: &Envelope) {
        if self.record {
            self.transcript.push(TranscriptEntry {
                turn: self.turn,
                event,
                seq,
                from: env.from,
                to: env.to,
                tag: env.tag,
                payload_hash: digest("envelope", &env.payload),
            });
        }
    }

    /// Advances one turn: one provider receives and moves.
    pub fn step(&mut self, sched: &mut impl Scheduler) {
        let mover = sched.next_mover(self.turn);
        let max_delay = sched.max_delay();

        let mut forced = Vec::new();
        let mut optional = Vec::new();
        for (idx, f) in self.in_flight.iter_mut().enumerate() {
            if f.env.to == mover {
                f.waited += 1;
                if f.waited >= max_delay {
                    forced.push(idx);
                } else {
                    optional.push(idx);
                }
            }
        }
        let mut chosen = forced;
        if !optional.is_empty() {
            let views: Vec<&Envelope> = optional.iter().map(|&i| &self.in_flight[i].env).collect();
            let picks = sched.deliver(mover, &views);
            chosen.extend(optional.iter().zip(picks).filter(|(_, p)| *p).map(|(&i, _)| i));
        }
        chosen.sort_unstable();

        let mut inbox = Vec::with_capacity(chosen.len());
        let mut delivered = Vec::with_capacity(chosen.len());
        for &idx in chosen.iter().rev() {
            let f = self.in_flight.remove(idx);
            delivered.push((f.seq, f.env.clone()));
            inbox.push(f.env);
        }
        inbox.reverse();
        delivered.reverse();
        for (seq, env) in &delivered {
            self.log(EventKind::Deliver, *seq, env);
        }

        let mut out = Outbox::new(mover, self.procs.len());
        self.procs[mover].on_move(inbox, &mut out);

        let mut active = !delivered.is_empty() || !out.sent.is_empty();
        for env in out.sent {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.log(EventKind::Send, seq, &env);
            self.in_flight.push(InFlight { seq, waited: 0, env });
        }
        if self.outputs[mover].is_none() {
            if let Some(o) = self.procs[mover].output() {
                self.outputs[mover] = Some(o.clone());
                active = true;
            }
        }
        if active {
            self.idle_since_activity.iter_mut().for_each(|b| *b = false);
        } else {
            self.idle_since_activity[mover] = true;
        }
        self.turn += 1;
    }

    /// Steps until every provider has an output and the network is drained,
    /// the run stalls, or `turn_budget` turns have elapsed.
    pub fn run(mut self, sched: &mut impl Scheduler, turn_budget: u64) -> Result<RunResult<P>> {
        if turn_budget == 0 {
            return Err(CoreError::InvalidArgument("turn budget must be positive".into()));
        }
        let start = self.turn;
        let mut stalled = false;
        while !self.done() {
            if self.turn - start >= turn_budget {
                break;
            }
            if self.stalled() {
                stalled = true;
                break;
            }
            self.step(sched);
        }
        let complete = self.outputs.iter().all(Option::is_some);
        if !complete && self.all_honest() {
            return Err(CoreError::Liveness(format!(
                "{} of {} honest providers without output after {} turns",
                self.outputs.iter().filter(|o| o.is_none()).count(),
                self.procs.len(),
                self.turn - start
            )));
        }
        Ok(RunResult {
            turns: self.turn - start,
            stalled,
            undelivered: self.in_flight.len(),
            outputs: self.outputs,
            transcript: self.transcript,
            processes: self.procs,
        })
    }
}

/// Per-provider outputs of a run; `None` marks a provider that never produced
/// one and is scored as abort.
#[derive(Debug)]
pub struct RunResult<P: Process> {
    pub outputs: Vec<Option<P::Output>>,
    pub transcript: Vec<TranscriptEntry>,
    pub turns: u64,
    pub stalled: bool,
    pub undelivered: usize,
    pub processes: Vec<P>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Broadcasts once, outputs after hearing from everyone.
    #[derive(Debug, Clone, Hash)]
    struct Gossip {
        m: usize,
        started: bool,
        heard: BTreeSet<ProviderId>,
        out: Option<usize>,
        mute: bool,
    }

    impl Gossip {
        fn new(m: usize) -> Self {
            Gossip {
                m,
                started: false,
                heard: BTreeSet::new(),
                out: None,
                mute: false,
            }
        }
    }

    impl Process for Gossip {
        type Output = usize;

        fn on_move(&mut self, inbox: Vec<Envelope>, out: &mut Outbox) {
            if self.mute {
                return;
            }
            if !self.started {
                self.started = true;
                out.broadcast(Tag::new(0, 0, 0), vec![out.me() as u8]);
            }
            self.heard.extend(inbox.iter().map(|e| e.from));
            if self.heard.len() == self.m {
                self.out = Some(self.m);
            }
        }

        fn output(&self) -> Option<&usize> {
            self.out.as_ref()
        }

        fn is_honest(&self) -> bool {
            !self.mute
        }
    }

    #[test]
    fn round_robin_order() {
        let mut s = gen_fair_schedule(9, 3, SchedulePolicy::RoundRobin, 1).unwrap();
        let order: Vec<_> = (0..9).map(|t| s.next_mover(t)).collect();
        assert_eq!(order, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    fn movers(seed: u64, m: usize, policy: SchedulePolicy, turns: usize) -> Vec<ProviderId> {
        let mut s = gen_fair_schedule(seed, m, policy, 2).unwrap();
        (0..turns as u64).map(|t| s.next_mover(t)).collect()
    }

    #[test]
    fn windows_contain_every_provider() {
        for seed in 0..100 {
            for m in [1, 2, 3, 5, 8] {
                for policy in [SchedulePolicy::RoundRobin, SchedulePolicy::RandomFair] {
                    let max_delay = 2;
                    let seq = movers(seed, m, policy, 40 * m);
                    for w in seq.windows(m * max_delay) {
                        let seen: BTreeSet<_> = w.iter().collect();
                        assert_eq!(seen.len(), m, "seed {seed} m {m} {policy:?}");
                    }
                    // move counts per provider differ by at most one in every prefix of whole rounds
                    for rounds in 1..40 {
                        let mut counts = vec![0; m];
                        seq[..rounds * m].iter().for_each(|&j| counts[j] += 1);
                        assert!(counts.iter().all(|&c| c == rounds));
                    }
                }
            }
        }
    }

    #[test]
    fn different_seeds_give_different_streams() {
        for seed in 0..100u64 {
            let a = movers(seed, 5, SchedulePolicy::RandomFair, 50);
            let b = movers(seed + 1000, 5, SchedulePolicy::RandomFair, 50);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn idle_step_only_advances_turn() {
        let mut procs = vec![Gossip::new(2), Gossip::new(2)];
        procs.iter_mut().for_each(|p| p.mute = true);
        let mut w = World::new(procs);
        let before = w.clone();
        let mut s = gen_fair_schedule(0, 2, SchedulePolicy::RoundRobin, 1).unwrap();
        w.step(&mut s);
        assert_eq!(w.turn(), 1);
        assert_eq!(w.in_flight(), 0);
        assert_eq!(w.outputs(), before.outputs());
    }

    #[test]
    fn overdue_envelope_is_forced() {
        struct Never;
        impl Scheduler for Never {
            fn max_delay(&self) -> u32 {
                3
            }
            fn next_mover(&mut self, turn: u64) -> ProviderId {
                (turn % 2) as usize
            }
            fn deliver(&mut self, _: ProviderId, pending: &[&Envelope]) -> Vec<bool> {
                vec![false; pending.len()]
            }
        }
        let mut w = World::new(vec![Gossip::new(2), Gossip::new(2)]);
        let mut s = Never;
        w.step(&mut s); // 0 broadcasts
        assert_eq!(w.in_flight(), 2);
        w.step(&mut s); // 1 moves: waited 1
        w.step(&mut s); // 0 moves: waited 1 for its own copy
        w.step(&mut s); // 1: waited 2
        assert!(w.in_flight.iter().any(|f| f.env.to == 1 && f.env.from == 0));
        w.step(&mut s);
        w.step(&mut s); // 1: waited 3, forced
        assert!(!w.in_flight.iter().any(|f| f.env.to == 1 && f.env.from == 0));
    }

    #[test]
    fn determinism_replay() {
        let build = || World::new((0..4).map(|_| Gossip::new(4)).collect()).with_transcript(true);
        for seed in 0..20 {
            let mut a = build();
            let mut b = build();
            let mut sa = gen_fair_schedule(seed, 4, SchedulePolicy::RandomFair, 3).unwrap();
            let mut sb = gen_fair_schedule(seed, 4, SchedulePolicy::RandomFair, 3).unwrap();
            for _ in 0..30 {
                a.step(&mut sa);
                b.step(&mut sb);
                assert_eq!(a.fingerprint(), b.fingerprint());
            }
        }
    }

    #[test]
    fn liveness_and_reliability() {
        let w = World::new((0..4).map(|_| Gossip::new(4)).collect()).with_transcript(true);
        let mut s = gen_fair_schedule(5, 4, SchedulePolicy::RandomFair, 4).unwrap();
        let r = w.run(&mut s, 1_000_000).unwrap();
        assert!(r.outputs.iter().all(|o| *o == Some(4)));
        let sends: Vec<_> = r
            .transcript
            .iter()
            .filter(|e| e.event == EventKind::Send)
            .map(|e| e.seq)
            .collect();
        let mut delivers: Vec<_> = r
            .transcript
            .iter()
            .filter(|e| e.event == EventKind::Deliver)
            .map(|e| e.seq)
            .collect();
        delivers.sort_unstable();
        assert_eq!(sends, delivers);
        assert_eq!(r.undelivered, 0);
    }

    #[test]
    fn silent_deviator_stalls_without_error() {
        let mut procs: Vec<_> = (0..4).map(|_| Gossip::new(4)).collect();
        procs[2].mute = true;
        let mut s = gen_fair_schedule(1, 4, SchedulePolicy::RandomFair, 2).unwrap();
        let r = World::new(procs).run(&mut s, 1_000_000).unwrap();
        assert!(r.stalled);
        assert!(r.outputs.iter().all(Option::is_none));
    }

    #[test]
    fn zero_budget_is_an_error() {
        let w = World::new(vec![Gossip::new(1)]);
        let mut s = gen_fair_schedule(1, 1, SchedulePolicy::RoundRobin, 1).unwrap();
        assert!(matches!(w.run(&mut s, 0), Err(CoreError::InvalidArgument(_))));
    }

    #[test]
    fn honest_budget_exhaustion_is_a_liveness_error() {
        let w = World::new((0..3).map(|_| Gossip::new(3)).collect());
        let mut s = gen_fair_schedule(1, 3, SchedulePolicy::RoundRobin, 1).unwrap();
        assert!(matches!(w.run(&mut s, 2), Err(CoreError::Liveness(_))));
    }

    #[test]
    fn transcript_jsonl_roundtrip() {
        let w = World::new((0..2).map(|_| Gossip::new(2)).collect()).with_transcript(true);
        let mut s = gen_fair_schedule(5, 2, SchedulePolicy::RoundRobin, 1).unwrap();
        let r = w.run(&mut s, 100).unwrap();
        let text = transcript_jsonl(&r.transcript);
        let back: Vec<TranscriptEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, r.transcript);
    }
}
