//! Allocation algorithms for the two auction kinds, the task graph that
//! splits the standard auction across provider groups, and a sequential
//! reference executor standing in for the trusted auctioneer.

mod framework;

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{coin_from_seed, DistributionSpec};
use crate::canonical::{CanonicalDecode, CanonicalEncode, Reader, Writer};
use crate::error::{CoreError, Result};
use crate::fixed::Fixed;
use crate::simnet::ProviderId;
use crate::types::{social_welfare, user_value, Allocation, Bid, BidVector, PaymentVector, ProviderBid};

pub use framework::{
    parallel_allocator, run_framework, AllocatorRun, FrameworkRun, OutputBehavior, PhaseTimings, PhaseTurns,
    ProviderBehavior, RunOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuctionKind {
    Standard,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Exact,
    LocalSearch,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StandardAuctionConfig {
    /// Approximation slack; the local search runs `ceil(1 / epsilon)` restarts.
    pub epsilon: Fixed,
    pub solver: Solver,
    /// Number of payment tasks (provider groups).
    pub groups: usize,
}

impl Default for StandardAuctionConfig {
    fn default() -> Self {
        StandardAuctionConfig {
            epsilon: Fixed::from_raw(Fixed::ONE.raw() / 10),
            solver: Solver::Exact,
            groups: 1,
        }
    }
}

impl StandardAuctionConfig {
    pub fn restarts(&self) -> usize {
        let one = Fixed::ONE.raw();
        let eps = self.epsilon.raw().max(1);
        ((one + eps - 1) / eps) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuctionSpec {
    pub kind: AuctionKind,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Provider capacities for the standard auction, where providers do not
    /// bid. Ignored for double auctions.
    #[serde(default)]
    pub capacities: Vec<Fixed>,
    #[serde(default)]
    pub standard: StandardAuctionConfig,
}

impl AuctionSpec {
    pub fn double(m: usize, n: usize, k: usize) -> Self {
        AuctionSpec {
            kind: AuctionKind::Double,
            m,
            n,
            k,
            capacities: Vec::new(),
            standard: StandardAuctionConfig::default(),
        }
    }

    pub fn standard(m: usize, n: usize, k: usize, capacities: Vec<Fixed>, cfg: StandardAuctionConfig) -> Self {
        AuctionSpec {
            kind: AuctionKind::Standard,
            m,
            n,
            k,
            capacities,
            standard: cfg,
        }
    }

    /// Maximum parallelism `floor(m / (k + 1))`.
    pub fn parallelism(&self) -> usize {
        self.m / (self.k + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(CoreError::Config(msg));
        if self.m == 0 {
            return err("m: need at least one provider".into());
        }
        if self.m <= 2 * self.k {
            return err(format!("m: need m > 2k, got m={} k={}", self.m, self.k));
        }
        if self.kind == AuctionKind::Standard {
            let c = self.standard.groups;
            if self.capacities.len() != self.m {
                return err(format!(
                    "capacities: expected {} entries, got {}",
                    self.m,
                    self.capacities.len()
                ));
            }
            if self.capacities.iter().any(|c| c.is_negative()) {
                return err("capacities: must be nonnegative".into());
            }
            if c == 0 || c * (self.k + 1) > self.m {
                return err(format!(
                    "groups: need 1 <= c and c*(k+1) <= m, got c={c} k={} m={}",
                    self.k, self.m
                ));
            }
            let eps = self.standard.epsilon;
            if eps <= Fixed::ZERO || eps >= Fixed::ONE {
                return err(format!("epsilon: must lie in (0, 1), got {eps}"));
            }
        }
        Ok(())
    }

    /// Capacities the allocation must respect for the given bids.
    pub fn capacities_for(&self, bids: &BidVector) -> Vec<Fixed> {
        match self.kind {
            AuctionKind::Standard => self.capacities.clone(),
            AuctionKind::Double => bids.declared_capacities().unwrap_or_else(|| vec![Fixed::ZERO; self.m]),
        }
    }

    /// Whether `bids` has the shape this auction expects.
    pub fn accepts(&self, bids: &BidVector) -> bool {
        bids.n() == self.n
            && match self.kind {
                AuctionKind::Standard => bids.provider_bids.is_none(),
                AuctionKind::Double => bids.provider_bids.as_ref().is_some_and(|p| p.len() == self.m),
            }
    }
}

// ---------------------------------------------------------------------------
// Double auction

/// McAfee-style double auction with water-filling.
///
/// Users are sorted by unit value (descending) and providers by unit cost
/// (ascending), ties by id. `K` is the last index at which the user value
/// still covers the provider cost. With `K >= 2` the first `K - 1` users are
/// water-filled into the first `K` providers; users pay the `K`-th user value
/// and providers receive the `K`-th provider cost per unit. With `K = 1` the
/// single pair trades at the midpoint of value and cost.
pub fn double_auction(bids: &BidVector) -> Result<(Allocation, PaymentVector)> {
    let providers = bids
        .provider_bids
        .as_ref()
        .ok_or_else(|| CoreError::InvalidArgument("double auction needs provider bids".into()))?;
    let (m, n) = (providers.len(), bids.n());
    let mut alloc = Allocation::zeros(m, n);
    let mut pay = PaymentVector::zeros(m, n);

    let mut users: Vec<&Bid> = bids
        .user_bids
        .iter()
        .filter(|b| !b.neutral && b.demand > Fixed::ZERO)
        .collect();
    users.sort_by(|a, b| b.unit_value.cmp(&a.unit_value).then(a.bidder_id.cmp(&b.bidder_id)));
    let mut sellers: Vec<&ProviderBid> = providers.iter().filter(|p| p.capacity > Fixed::ZERO).collect();
    sellers.sort_by(|a, b| a.unit_cost.cmp(&b.unit_cost).then(a.provider_id.cmp(&b.provider_id)));

    let breakeven = users
        .iter()
        .zip(&sellers)
        .take_while(|(u, p)| u.unit_value >= p.unit_cost)
        .count();

    let (winners, open, user_price, provider_price) = match breakeven {
        0 => return Ok((alloc, pay)),
        1 => {
            let mid = users[0].unit_value.midpoint(sellers[0].unit_cost);
            (&users[..1], &sellers[..1], mid, mid)
        }
        k => (
            &users[..k - 1],
            &sellers[..k],
            users[k - 1].unit_value,
            sellers[k - 1].unit_cost,
        ),
    };

    let mut slots = open.iter().map(|p| (p.provider_id as usize, p.capacity));
    let mut current = slots.next();
    for u in winners {
        let i = u.bidder_id as usize;
        let mut need = u.demand;
        while need > Fixed::ZERO {
            let Some((j, room)) = current.as_mut() else { break };
            let q = need.min(*room);
            alloc.add(*j, i, q);
            // capped at own value so no winner pays more than it gains
            pay.user_payments[i] += user_price.mul_ceil(q).min(u.unit_value.mul_floor(q));
            pay.provider_payments[*j] += provider_price.mul_floor(q);
            need -= q;
            *room -= q;
            if room.is_zero() {
                current = slots.next();
            }
        }
    }
    Ok((alloc, pay))
}

// ---------------------------------------------------------------------------
// Standard auction

/// A single-provider assignment: `assignment[i]` is the provider serving
/// user `i` in full, if any.
pub type Assignment = Vec<Option<ProviderId>>;

struct Problem<'a> {
    bids: &'a BidVector,
    caps: &'a [Fixed],
    /// `floor(value * demand)`, zero for neutral users.
    worth: Vec<Fixed>,
}

impl<'a> Problem<'a> {
    fn new(bids: &'a BidVector, caps: &'a [Fixed]) -> Self {
        let worth = bids
            .user_bids
            .iter()
            .map(|b| if b.neutral { Fixed::ZERO } else { b.full_value() })
            .collect();
        Problem { bids, caps, worth }
    }

    fn demand(&self, i: usize) -> Fixed {
        self.bids.user_bids[i].demand
    }

    fn eligible(&self, i: usize) -> bool {
        !self.bids.user_bids[i].neutral
    }

    fn welfare(&self, a: &Assignment) -> Fixed {
        a.iter()
            .enumerate()
            .filter(|(_, j)| j.is_some())
            .map(|(i, _)| self.worth[i])
            .sum()
    }
}

/// Exact branch and bound over users in id order, trying providers `0..m`
/// before leaving a user out. Only strictly better leaves replace the
/// incumbent, so the result is the first optimum in that order.
fn solve_exact(p: &Problem<'_>) -> Assignment {
    let n = p.worth.len();
    let mut by_unit: Vec<usize> = (0..n).filter(|&i| p.eligible(i)).collect();
    by_unit.sort_by(|&a, &b| {
        let (ba, bb) = (&p.bids.user_bids[a], &p.bids.user_bids[b]);
        bb.unit_value.cmp(&ba.unit_value).then(a.cmp(&b))
    });
    let mut suffix = vec![Fixed::ZERO; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + p.worth[i];
    }

    struct Search<'s, 'a> {
        p: &'s Problem<'a>,
        by_unit: Vec<usize>,
        suffix: Vec<Fixed>,
        room: Vec<Fixed>,
        cur: Assignment,
        best: Option<(Fixed, Assignment)>,
    }

    impl Search<'_, '_> {
        // fractional relaxation of the remaining users against pooled capacity
        fn bound(&self, depth: usize, welfare: Fixed) -> Fixed {
            let mut pool: Fixed = self.room.iter().copied().sum();
            let mut frac = Fixed::ZERO;
            for &i in self.by_unit.iter().filter(|&&i| i >= depth) {
                if pool <= Fixed::ZERO {
                    break;
                }
                let b = &self.p.bids.user_bids[i];
                let q = b.demand.min(pool);
                frac += b.unit_value.mul_ceil(q);
                pool -= q;
            }
            welfare + frac.min(self.suffix[depth])
        }

        fn go(&mut self, depth: usize, welfare: Fixed) {
            if let Some((w, _)) = &self.best {
                if self.bound(depth, welfare) <= *w {
                    return;
                }
            }
            if depth == self.cur.len() {
                self.best = Some((welfare, self.cur.clone()));
                return;
            }
            if self.p.eligible(depth) {
                let d = self.p.demand(depth);
                for j in 0..self.room.len() {
                    if d <= self.room[j] {
                        self.room[j] -= d;
                        self.cur[depth] = Some(j);
                        self.go(depth + 1, welfare + self.p.worth[depth]);
                        self.cur[depth] = None;
                        self.room[j] += d;
                    }
                }
            }
            self.go(depth + 1, welfare);
        }
    }

    let mut s = Search {
        p,
        by_unit,
        suffix,
        room: p.caps.to_vec(),
        cur: vec![None; n],
        best: None,
    };
    s.go(0, Fixed::ZERO);
    s.best.map(|(_, a)| a).unwrap_or_else(|| vec![None; n])
}

/// Randomized restarts of a greedy fill followed by hill climbing over
/// insert, swap and shift-then-insert moves. The restart seeds come from
/// `coin`, so providers holding the same coin value get the same answer.
fn solve_local_search(p: &Problem<'_>, restarts: usize, coin: Fixed) -> Assignment {
    let n = p.worth.len();
    let m = p.caps.len();
    let mut rng = ChaCha8Rng::seed_from_u64(coin.raw() as u64 ^ 0x5E_ED0F_C01E);
    let mut best: Option<(Fixed, Assignment)> = None;
    let eligible: Vec<usize> = (0..n).filter(|&i| p.eligible(i)).collect();

    for _ in 0..restarts.max(1) {
        let mut a: Assignment = vec![None; n];
        let mut room = p.caps.to_vec();
        let mut order = eligible.clone();
        order.shuffle(&mut rng);
        let mut provs: Vec<usize> = (0..m).collect();
        for &i in &order {
            provs.shuffle(&mut rng);
            if let Some(&j) = provs.iter().find(|&&j| p.demand(i) <= room[j]) {
                room[j] -= p.demand(i);
                a[i] = Some(j);
            }
        }
        improve(p, &mut a, &mut room, &eligible);
        let w = p.welfare(&a);
        if best.as_ref().is_none_or(|(bw, _)| w > *bw) {
            best = Some((w, a));
        }
    }
    best.map(|(_, a)| a).unwrap_or_else(|| vec![None; n])
}

fn improve(p: &Problem<'_>, a: &mut Assignment, room: &mut [Fixed], eligible: &[usize]) {
    let m = room.len();
    loop {
        let mut changed = false;
        for &j in eligible {
            if a[j].is_some() || p.worth[j].is_zero() {
                continue;
            }
            let dj = p.demand(j);
            // plain insert
            if let Some(t) = (0..m).find(|&t| dj <= room[t]) {
                room[t] -= dj;
                a[j] = Some(t);
                changed = true;
                continue;
            }
            // swap out a cheaper user, or shift it elsewhere to make room
            'outer: for &i in eligible {
                let Some(t) = a[i] else { continue };
                let di = p.demand(i);
                if dj > room[t] + di {
                    continue;
                }
                if let Some(u) = (0..m).find(|&u| u != t && di <= room[u]) {
                    room[u] -= di;
                    room[t] += di - dj;
                    a[i] = Some(u);
                    a[j] = Some(t);
                    changed = true;
                    break 'outer;
                }
                if p.worth[j] > p.worth[i] {
                    room[t] += di - dj;
                    a[i] = None;
                    a[j] = Some(t);
                    changed = true;
                    break 'outer;
                }
            }
        }
        if !changed {
            return;
        }
    }
}

/// Single-provider assignment maximizing (or, for the local search,
/// approximately maximizing) total user value.
pub fn solve_assignment(bids: &BidVector, caps: &[Fixed], cfg: &StandardAuctionConfig, coin: Fixed) -> Assignment {
    let p = Problem::new(bids, caps);
    match cfg.solver {
        Solver::Exact => solve_exact(&p),
        Solver::LocalSearch => solve_local_search(&p, cfg.restarts(), coin),
    }
}

pub fn assignment_to_allocation(a: &Assignment, bids: &BidVector, m: usize) -> Allocation {
    let mut x = Allocation::zeros(m, bids.n());
    for (i, j) in a.iter().enumerate() {
        if let Some(j) = j {
            x.set(*j, i, bids.user_bids[i].demand);
        }
    }
    x
}

/// Standard auction allocation: each served user gets its full demand from
/// exactly one provider.
pub fn standard_auction_allocate(
    bids: &BidVector,
    caps: &[Fixed],
    cfg: &StandardAuctionConfig,
    coin: Fixed,
) -> Allocation {
    assignment_to_allocation(&solve_assignment(bids, caps, cfg, coin), bids, caps.len())
}

/// VCG payment of `user` for allocation `x`:
/// `max(0, W(without user) - (W(x) - value_user(x)))`, where the first term
/// reruns the solver with the user's bid replaced by the neutral bid.
pub fn vcg_payment(
    bids: &BidVector,
    caps: &[Fixed],
    cfg: &StandardAuctionConfig,
    coin: Fixed,
    x: &Allocation,
    user: usize,
) -> Result<Fixed> {
    let welfare = social_welfare(x, bids)?;
    let own = user_value(x, bids, user);
    let mut without = bids.clone();
    without.user_bids[user] = Bid::neutral(user as u32);
    let rest = standard_auction_allocate(&without, caps, cfg, coin);
    let w_minus = social_welfare(&rest, &without)?;
    Ok((w_minus - (welfare - own)).max(Fixed::ZERO))
}

/// Output of one payment task: payments of a contiguous range of users and
/// the revenue they bring each provider.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PaymentChunk {
    pub first_user: u32,
    pub user_payments: Vec<Fixed>,
    pub provider_revenue: Vec<Fixed>,
}

impl CanonicalEncode for PaymentChunk {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.first_user);
        w.fixeds(&self.user_payments);
        w.fixeds(&self.provider_revenue);
    }
}

impl CanonicalDecode for PaymentChunk {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(PaymentChunk {
            first_user: r.u32()?,
            user_payments: r.fixeds()?,
            provider_revenue: r.fixeds()?,
        })
    }
}

pub fn payment_chunk(
    bids: &BidVector,
    caps: &[Fixed],
    cfg: &StandardAuctionConfig,
    coin: Fixed,
    x: &Allocation,
    users: Range<usize>,
) -> Result<PaymentChunk> {
    let mut revenue = vec![Fixed::ZERO; caps.len()];
    let mut pays = Vec::with_capacity(users.len());
    for i in users.clone() {
        let p = vcg_payment(bids, caps, cfg, coin, x, i)?;
        for j in x.providers_of(i) {
            revenue[j] += p;
        }
        pays.push(p);
    }
    Ok(PaymentChunk {
        first_user: users.start as u32,
        user_payments: pays,
        provider_revenue: revenue,
    })
}

/// Joins payment chunks in order into a payment vector.
pub fn assemble_payments(chunks: &[PaymentChunk], m: usize, n: usize) -> Result<PaymentVector> {
    let mut pay = PaymentVector::zeros(m, n);
    let mut next = 0usize;
    for c in chunks {
        if c.first_user as usize != next || c.provider_revenue.len() != m {
            return Err(CoreError::DimensionMismatch(
                "payment chunks do not tile the users".into(),
            ));
        }
        for (off, p) in c.user_payments.iter().enumerate() {
            pay.user_payments[next + off] = *p;
        }
        next += c.user_payments.len();
        for (j, r) in c.provider_revenue.iter().enumerate() {
            pay.provider_payments[j] += *r;
        }
    }
    if next != n {
        return Err(CoreError::DimensionMismatch(format!(
            "payment chunks cover {next} of {n} users"
        )));
    }
    Ok(pay)
}

// ---------------------------------------------------------------------------
// Task graph

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// The whole double auction, run locally by every provider.
    DoubleAuction,
    Allocate,
    Payments {
        first_user: usize,
        end_user: usize,
    },
    Gather,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub id: u32,
    #[serde(flatten)]
    pub kind: TaskKind,
    pub deps: Vec<u32>,
    pub assigned: BTreeSet<ProviderId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskGraph {
    pub tasks: Vec<Task>,
}

/// Splits `0..len` into `parts` contiguous ranges whose sizes differ by at
/// most one, larger ranges first.
pub fn split_even(len: usize, parts: usize) -> Vec<Range<usize>> {
    let (base, extra) = (len / parts, len % parts);
    let mut start = 0;
    (0..parts)
        .map(|g| {
            let size = base + usize::from(g < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

impl TaskGraph {
    pub fn payment_tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks
            .iter()
            .filter(|t| matches!(t.kind, TaskKind::Payments { .. }))
    }

    pub fn sink(&self) -> &Task {
        self.tasks.last().expect("graph has a sink")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task graph serializes")
    }

    /// Structural checks: dependencies point backwards, every task has at
    /// least `k + 1` providers and the last task depends on all others and
    /// runs everywhere.
    pub fn check(&self, m: usize, k: usize) -> Result<()> {
        for (pos, t) in self.tasks.iter().enumerate() {
            if t.id as usize != pos || t.deps.iter().any(|&d| d >= t.id) {
                return Err(CoreError::Config(format!("task {} is out of order", t.id)));
            }
            if t.assigned.len() < k + 1 || t.assigned.iter().any(|&j| j >= m) {
                return Err(CoreError::Config(format!("task {} has a bad assignment", t.id)));
            }
        }
        let sink = self.sink();
        if sink.assigned.len() != m || sink.deps.len() + 1 != self.tasks.len() {
            return Err(CoreError::Config(
                "sink must depend on all tasks and run everywhere".into(),
            ));
        }
        Ok(())
    }
}

pub fn build_task_graph(spec: &AuctionSpec) -> Result<TaskGraph> {
    spec.validate()?;
    let all: BTreeSet<ProviderId> = (0..spec.m).collect();
    if spec.kind == AuctionKind::Double {
        return Ok(TaskGraph {
            tasks: vec![Task {
                id: 0,
                kind: TaskKind::DoubleAuction,
                deps: vec![],
                assigned: all,
            }],
        });
    }
    let c = spec.standard.groups;
    let mut tasks = vec![Task {
        id: 0,
        kind: TaskKind::Allocate,
        deps: vec![],
        assigned: all.clone(),
    }];
    for (g, (users, provs)) in split_even(spec.n, c).into_iter().zip(split_even(spec.m, c)).enumerate() {
        tasks.push(Task {
            id: g as u32 + 1,
            kind: TaskKind::Payments {
                first_user: users.start,
                end_user: users.end,
            },
            deps: vec![0],
            assigned: provs.collect(),
        });
    }
    tasks.push(Task {
        id: c as u32 + 1,
        kind: TaskKind::Gather,
        deps: (0..=c as u32).collect(),
        assigned: all,
    });
    Ok(TaskGraph { tasks })
}

// ---------------------------------------------------------------------------
// Reference executor

/// The coin value the honest protocol produces for `seed`.
pub fn pinned_coin(seed: u64, m: usize) -> Fixed {
    coin_from_seed(seed, m, &DistributionSpec::Uniform01)
}

/// Runs the auction sequentially, as a trusted auctioneer would, with the
/// coin fixed by `seed`.
pub fn local_execute(bids: &BidVector, spec: &AuctionSpec, seed: u64) -> Result<(Allocation, PaymentVector)> {
    spec.validate()?;
    if !spec.accepts(bids) {
        return Err(CoreError::DimensionMismatch(
            "bids do not match the auction spec".into(),
        ));
    }
    match spec.kind {
        AuctionKind::Double => double_auction(bids),
        AuctionKind::Standard => {
            let caps = &spec.capacities;
            let coin = pinned_coin(seed, spec.m);
            let x = standard_auction_allocate(bids, caps, &spec.standard, coin);
            let chunk = payment_chunk(bids, caps, &spec.standard, coin, &x, 0..bids.n())?;
            let pay = assemble_payments(&[chunk], spec.m, bids.n())?;
            Ok((x, pay))
        }
    }
}

/// Plain-text instance exchanged with the oracle tools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDump {
    pub n: usize,
    pub m: usize,
    pub values: Vec<Fixed>,
    pub demands: Vec<Fixed>,
    pub capacities: Vec<Fixed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<Vec<Fixed>>,
}

impl InstanceDump {
    pub fn new(bids: &BidVector, capacities: &[Fixed]) -> Self {
        InstanceDump {
            n: bids.n(),
            m: capacities.len(),
            values: bids.user_bids.iter().map(|b| b.unit_value).collect(),
            demands: bids.user_bids.iter().map(|b| b.demand).collect(),
            capacities: capacities.to_vec(),
            costs: bids
                .provider_bids
                .as_ref()
                .map(|ps| ps.iter().map(|p| p.unit_cost).collect()),
        }
    }

    pub fn bids(&self) -> Result<BidVector> {
        if self.values.len() != self.n || self.demands.len() != self.n || self.capacities.len() != self.m {
            return Err(CoreError::DimensionMismatch("instance dump field lengths".into()));
        }
        let users = (0..self.n)
            .map(|i| {
                if self.demands[i].is_zero() && self.values[i].is_zero() {
                    Bid::neutral(i as u32)
                } else {
                    Bid::new(i as u32, self.values[i], self.demands[i])
                }
            })
            .collect();
        Ok(match &self.costs {
            None => BidVector::standard(users),
            Some(costs) if costs.len() == self.m => BidVector::double(
                users,
                (0..self.m)
                    .map(|j| ProviderBid::new(j as u32, costs[j], self.capacities[j]))
                    .collect(),
            ),
            Some(_) => return Err(CoreError::DimensionMismatch("instance dump costs".into())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::fx;
    use crate::types::check_feasible;

    fn users(vd: &[(&str, &str)]) -> Vec<Bid> {
        vd.iter()
            .enumerate()
            .map(|(i, (v, d))| Bid::new(i as u32, fx(v), fx(d)))
            .collect()
    }

    fn providers(cc: &[(&str, &str)]) -> Vec<ProviderBid> {
        cc.iter()
            .enumerate()
            .map(|(j, (c, cap))| ProviderBid::new(j as u32, fx(c), fx(cap)))
            .collect()
    }

    #[test]
    fn double_single_pair_trades_at_midpoint() {
        let b = BidVector::double(users(&[("1.0", "0.5")]), providers(&[("0.2", "1.0")]));
        let (x, p) = double_auction(&b).unwrap();
        assert_eq!(x.get(0, 0), fx("0.5"));
        let mid = fx("1.0").midpoint(fx("0.2"));
        assert_eq!(p.user_payments[0], mid.mul_ceil(fx("0.5")));
        assert_eq!(p.provider_payments[0], mid.mul_floor(fx("0.5")));
    }

    #[test]
    fn double_water_fills_across_providers() {
        let b = BidVector::double(
            users(&[("1.2", "1.0"), ("0.8", "1.0")]),
            providers(&[("0.3", "0.6"), ("0.5", "2.0")]),
        );
        let (x, p) = double_auction(&b).unwrap();
        assert_eq!(x.get(0, 0), fx("0.6"));
        assert_eq!(x.get(1, 0), fx("0.4"));
        assert_eq!(x.user_total(1), Fixed::ZERO);
        let per_unit = |price: &str, q: &str| fx(price).mul_ceil(fx(q));
        assert_eq!(p.user_payments[0], per_unit("0.8", "0.6") + per_unit("0.8", "0.4"));
        assert_eq!(p.provider_payments[0], fx("0.5").mul_floor(fx("0.6")));
        assert_eq!(p.provider_payments[1], fx("0.5").mul_floor(fx("0.4")));
        assert!(p.total_user() >= p.total_provider());
    }

    #[test]
    fn double_no_trade_cases() {
        let b = BidVector::double(vec![], providers(&[("0.2", "1.0")]));
        let (x, p) = double_auction(&b).unwrap();
        assert!(x.is_zero() && p == PaymentVector::zeros(1, 0));
        let b = BidVector::double(users(&[("0.1", "1.0")]), providers(&[("0.2", "1.0")]));
        assert!(double_auction(&b).unwrap().0.is_zero());
        assert!(double_auction(&BidVector::standard(vec![])).is_err());
    }

    #[test]
    fn standard_examples() {
        let cfg = StandardAuctionConfig::default();
        let b = BidVector::standard(users(&[("2.0", "0.5")]));
        let x = standard_auction_allocate(&b, &[fx("1.0")], &cfg, Fixed::ZERO);
        assert_eq!(social_welfare(&x, &b).unwrap(), fx("1.0"));
        assert_eq!(
            vcg_payment(&b, &[fx("1.0")], &cfg, Fixed::ZERO, &x, 0).unwrap(),
            Fixed::ZERO
        );

        let b = BidVector::standard(users(&[("1.0", "0.6"), ("0.9", "0.6")]));
        let caps = [fx("1.0")];
        let x = standard_auction_allocate(&b, &caps, &cfg, Fixed::ZERO);
        assert_eq!(x.get(0, 0), fx("0.6"));
        assert_eq!(x.get(0, 1), Fixed::ZERO);
        let p0 = vcg_payment(&b, &caps, &cfg, Fixed::ZERO, &x, 0).unwrap();
        assert_eq!(p0, fx("0.9").mul_floor(fx("0.6")));
        assert_eq!(vcg_payment(&b, &caps, &cfg, Fixed::ZERO, &x, 1).unwrap(), Fixed::ZERO);
    }

    #[test]
    fn local_search_is_feasible_and_deterministic() {
        let cfg = StandardAuctionConfig {
            solver: Solver::LocalSearch,
            ..Default::default()
        };
        let b = BidVector::standard(users(&[
            ("1.0", "0.6"),
            ("0.9", "0.5"),
            ("1.1", "0.3"),
            ("0.8", "0.7"),
            ("1.2", "0.2"),
        ]));
        let caps = [fx("1.0"), fx("0.5")];
        let x = standard_auction_allocate(&b, &caps, &cfg, fx("0.3"));
        assert!(check_feasible(&x, &b, &caps));
        assert!(crate::types::is_single_provider(&x));
        assert_eq!(x, standard_auction_allocate(&b, &caps, &cfg, fx("0.3")));
        let exact = standard_auction_allocate(&b, &caps, &StandardAuctionConfig::default(), Fixed::ZERO);
        assert!(social_welfare(&x, &b).unwrap() <= social_welfare(&exact, &b).unwrap());
    }

    #[test]
    fn task_graph_shapes() {
        let g = build_task_graph(&AuctionSpec::double(4, 10, 1)).unwrap();
        assert_eq!(g.tasks.len(), 1);
        assert_eq!(g.tasks[0].assigned.len(), 4);

        let cfg = StandardAuctionConfig {
            groups: 4,
            ..Default::default()
        };
        let spec = AuctionSpec::standard(8, 20, 1, vec![Fixed::ONE; 8], cfg.clone());
        let g = build_task_graph(&spec).unwrap();
        assert_eq!(g.tasks.len(), 6);
        g.check(8, 1).unwrap();
        for t in g.payment_tasks() {
            assert_eq!(t.assigned.len(), 2);
            let TaskKind::Payments { first_user, end_user } = t.kind else {
                unreachable!()
            };
            assert_eq!(end_user - first_user, 5);
        }
        let json = g.to_json();
        assert_eq!(serde_json::from_str::<TaskGraph>(&json).unwrap(), g);

        let spec = AuctionSpec::standard(8, 20, 3, vec![Fixed::ONE; 8], cfg);
        assert!(matches!(build_task_graph(&spec), Err(CoreError::Config(_))));
        assert_eq!(spec.parallelism(), 2);
    }

    #[test]
    fn spec_validation() {
        assert!(AuctionSpec::double(4, 3, 2).validate().is_err());
        assert!(AuctionSpec::double(5, 3, 2).validate().is_ok());
        let mut s = AuctionSpec::standard(4, 3, 1, vec![Fixed::ONE; 3], StandardAuctionConfig::default());
        assert!(s.validate().is_err());
        s.capacities.push(Fixed::ONE);
        s.validate().unwrap();
        s.standard.epsilon = Fixed::ONE;
        assert!(s.validate().is_err());
    }

    #[test]
    fn chunks_reassemble_local_payments() {
        let b = BidVector::standard(users(&[("1.0", "0.6"), ("0.9", "0.5"), ("1.1", "0.3"), ("0.8", "0.7")]));
        let caps = [fx("1.0"), fx("0.5")];
        let cfg = StandardAuctionConfig::default();
        let x = standard_auction_allocate(&b, &caps, &cfg, Fixed::ZERO);
        let whole = payment_chunk(&b, &caps, &cfg, Fixed::ZERO, &x, 0..4).unwrap();
        let parts: Vec<_> = split_even(4, 3)
            .into_iter()
            .map(|r| payment_chunk(&b, &caps, &cfg, Fixed::ZERO, &x, r).unwrap())
            .collect();
        assert_eq!(
            assemble_payments(&parts, 2, 4).unwrap(),
            assemble_payments(&[whole], 2, 4).unwrap()
        );
        assert!(assemble_payments(&parts[1..], 2, 4).is_err());
    }

    #[test]
    fn instance_dump_roundtrip() {
        let b = BidVector::double(users(&[("1.2", "1.0"), ("0.8", "0.25")]), providers(&[("0.3", "0.6")]));
        let d = InstanceDump::new(&b, &b.declared_capacities().unwrap());
        let json = serde_json::to_string(&d).unwrap();
        let back: InstanceDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back.bids().unwrap(), b);
    }

    #[test]
    fn split_even_tiles() {
        assert_eq!(split_even(10, 3), vec![0..4, 4..7, 7..10]);
        assert_eq!(split_even(2, 4), vec![0..1, 1..2, 2..2, 2..2]);
    }
}
