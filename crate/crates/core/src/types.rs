//! Auction domain types and the pure functions over them: welfare, utility
//! and feasibility.

use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalDecode, CanonicalEncode, Reader, Writer};
use crate::error::{CoreError, Result};
use crate::fixed::Fixed;

/// A user's bid: a per-unit value for bandwidth and the amount requested.
///
/// The neutral bid excludes the bidder from the auction; it carries no value
/// and no demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bid {
    pub bidder_id: u32,
    pub unit_value: Fixed,
    pub demand: Fixed,
    pub neutral: bool,
}

impl Bid {
    pub fn new(bidder_id: u32, unit_value: Fixed, demand: Fixed) -> Self {
        Bid {
            bidder_id,
            unit_value,
            demand,
            neutral: false,
        }
    }

    pub fn neutral(bidder_id: u32) -> Self {
        Bid {
            bidder_id,
            unit_value: Fixed::ZERO,
            demand: Fixed::ZERO,
            neutral: true,
        }
    }

    pub fn is_valid(&self) -> bool {
        if self.neutral {
            self.unit_value.is_zero() && self.demand.is_zero()
        } else {
            !self.unit_value.is_negative() && self.demand > Fixed::ZERO
        }
    }

    /// Value of receiving the full demand.
    pub fn full_value(&self) -> Fixed {
        self.demand.mul_floor(self.unit_value)
    }
}

/// A provider's declared per-unit cost and its capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProviderBid {
    pub provider_id: u32,
    pub unit_cost: Fixed,
    pub capacity: Fixed,
}

impl ProviderBid {
    pub fn new(provider_id: u32, unit_cost: Fixed, capacity: Fixed) -> Self {
        ProviderBid {
            provider_id,
            unit_cost,
            capacity,
        }
    }

    /// Placeholder for a provider whose bid could not be decoded.
    pub fn empty(provider_id: u32) -> Self {
        ProviderBid::new(provider_id, Fixed::ZERO, Fixed::ZERO)
    }

    pub fn is_valid(&self) -> bool {
        !self.unit_cost.is_negative() && !self.capacity.is_negative()
    }
}

/// All bids as seen by one provider. Provider bids are present only in double
/// auctions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BidVector {
    pub user_bids: Vec<Bid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_bids: Option<Vec<ProviderBid>>,
}

impl BidVector {
    pub fn standard(user_bids: Vec<Bid>) -> Self {
        BidVector {
            user_bids,
            provider_bids: None,
        }
    }

    pub fn double(user_bids: Vec<Bid>, provider_bids: Vec<ProviderBid>) -> Self {
        BidVector {
            user_bids,
            provider_bids: Some(provider_bids),
        }
    }

    pub fn n(&self) -> usize {
        self.user_bids.len()
    }

    pub fn is_double(&self) -> bool {
        self.provider_bids.is_some()
    }

    /// Checks dense indexing by id and per-bid validity.
    pub fn is_well_formed(&self) -> bool {
        let users_ok = self
            .user_bids
            .iter()
            .enumerate()
            .all(|(i, b)| b.bidder_id as usize == i && b.is_valid());
        let providers_ok = self.provider_bids.as_ref().is_none_or(|ps| {
            ps.iter()
                .enumerate()
                .all(|(j, p)| p.provider_id as usize == j && p.is_valid())
        });
        users_ok && providers_ok
    }

    /// Provider capacities declared in the bids, for double auctions.
    pub fn declared_capacities(&self) -> Option<Vec<Fixed>> {
        self.provider_bids
            .as_ref()
            .map(|ps| ps.iter().map(|p| p.capacity).collect())
    }

    fn provider_cost(&self, j: usize) -> Fixed {
        self.provider_bids
            .as_ref()
            .and_then(|ps| ps.get(j))
            .map_or(Fixed::ZERO, |p| p.unit_cost)
    }
}

/// An `m x n` matrix of allocated quantities; entry `(j, i)` is the amount of
/// user `i` served at provider `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Allocation {
    m: usize,
    n: usize,
    quantities: Vec<Fixed>,
}

impl Allocation {
    pub fn zeros(m: usize, n: usize) -> Self {
        Allocation {
            m,
            n,
            quantities: vec![Fixed::ZERO; m * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Fixed>>) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(CoreError::DimensionMismatch("ragged allocation rows".into()));
        }
        Ok(Allocation {
            m,
            n,
            quantities: rows.into_iter().flatten().collect(),
        })
    }

    pub fn providers(&self) -> usize {
        self.m
    }

    pub fn users(&self) -> usize {
        self.n
    }

    pub fn get(&self, provider: usize, user: usize) -> Fixed {
        self.quantities[provider * self.n + user]
    }

    pub fn set(&mut self, provider: usize, user: usize, q: Fixed) {
        self.quantities[provider * self.n + user] = q;
    }

    pub fn add(&mut self, provider: usize, user: usize, q: Fixed) {
        self.quantities[provider * self.n + user] += q;
    }

    pub fn row(&self, provider: usize) -> &[Fixed] {
        &self.quantities[provider * self.n..(provider + 1) * self.n]
    }

    /// Total allocated to `user` across providers.
    pub fn user_total(&self, user: usize) -> Fixed {
        (0..self.m).map(|j| self.get(j, user)).sum()
    }

    pub fn provider_load(&self, provider: usize) -> Fixed {
        self.row(provider).iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.quantities.iter().all(|q| q.is_zero())
    }

    /// Providers serving `user` with a nonzero amount.
    pub fn providers_of(&self, user: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.m).filter(move |&j| !self.get(j, user).is_zero())
    }
}

/// Signed transfers: what each user pays and what each provider receives.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PaymentVector {
    pub user_payments: Vec<Fixed>,
    pub provider_payments: Vec<Fixed>,
}

impl PaymentVector {
    pub fn zeros(m: usize, n: usize) -> Self {
        PaymentVector {
            user_payments: vec![Fixed::ZERO; n],
            provider_payments: vec![Fixed::ZERO; m],
        }
    }

    pub fn total_user(&self) -> Fixed {
        self.user_payments.iter().sum()
    }

    pub fn total_provider(&self) -> Fixed {
        self.provider_payments.iter().sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.user_payments
            .iter()
            .chain(&self.provider_payments)
            .all(|p| !p.is_negative())
    }
}

/// Result of an auction: a solution, or the abort value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Solution {
        allocation: Allocation,
        payments: PaymentVector,
    },
    Abort,
}

impl Outcome {
    pub fn solution(allocation: Allocation, payments: PaymentVector) -> Self {
        Outcome::Solution { allocation, payments }
    }

    pub fn is_abort(&self) -> bool {
        matches!(self, Outcome::Abort)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Provider,
}

fn check_dims(alloc: &Allocation, bids: &BidVector) -> Result<()> {
    if alloc.users() != bids.n() {
        return Err(CoreError::DimensionMismatch(format!(
            "allocation has {} users, bids have {}",
            alloc.users(),
            bids.n()
        )));
    }
    if let Some(ps) = &bids.provider_bids {
        if ps.len() != alloc.providers() {
            return Err(CoreError::DimensionMismatch(format!(
                "allocation has {} providers, bids have {}",
                alloc.providers(),
                ps.len()
            )));
        }
    }
    Ok(())
}

/// Value `user` derives from `alloc`. Each entry is rounded separately so the
/// welfare and utility identities hold exactly.
pub fn user_value(alloc: &Allocation, bids: &BidVector, user: usize) -> Fixed {
    let v = bids.user_bids[user].unit_value;
    (0..alloc.providers()).map(|j| alloc.get(j, user).mul_floor(v)).sum()
}

/// Cost `provider` incurs under `alloc` (zero in standard auctions).
pub fn provider_cost(alloc: &Allocation, bids: &BidVector, provider: usize) -> Fixed {
    let c = bids.provider_cost(provider);
    alloc.row(provider).iter().map(|q| q.mul_floor(c)).sum()
}

/// Total user value, minus total provider cost when provider bids are present.
pub fn social_welfare(alloc: &Allocation, bids: &BidVector) -> Result<Fixed> {
    check_dims(alloc, bids)?;
    let users: Fixed = (0..alloc.users()).map(|i| user_value(alloc, bids, i)).sum();
    let costs: Fixed = (0..alloc.providers()).map(|j| provider_cost(alloc, bids, j)).sum();
    Ok(users - costs)
}

/// Utility of a participant. Abort is worth zero to everyone.
pub fn utility(role: Role, id: usize, outcome: &Outcome, bids: &BidVector) -> Result<Fixed> {
    let (alloc, pay) = match outcome {
        Outcome::Abort => {
            let bound = match role {
                Role::User => bids.n(),
                Role::Provider => usize::MAX,
            };
            return if id < bound {
                Ok(Fixed::ZERO)
            } else {
                Err(CoreError::IndexOutOfRange { role, id })
            };
        }
        Outcome::Solution { allocation, payments } => (allocation, payments),
    };
    check_dims(alloc, bids)?;
    match role {
        Role::User => {
            if id >= alloc.users() {
                return Err(CoreError::IndexOutOfRange { role, id });
            }
            Ok(user_value(alloc, bids, id) - pay.user_payments[id])
        }
        Role::Provider => {
            if id >= alloc.providers() {
                return Err(CoreError::IndexOutOfRange { role, id });
            }
            Ok(pay.provider_payments[id] - provider_cost(alloc, bids, id))
        }
    }
}

/// Demand and capacity constraints; also rejects negative entries.
pub fn check_feasible(alloc: &Allocation, bids: &BidVector, capacities: &[Fixed]) -> bool {
    if alloc.users() != bids.n() || alloc.providers() != capacities.len() {
        return false;
    }
    let nonneg = alloc.quantities.iter().all(|q| !q.is_negative());
    let demand_ok = (0..alloc.users()).all(|i| alloc.user_total(i) <= bids.user_bids[i].demand);
    let capacity_ok = (0..alloc.providers()).all(|j| alloc.provider_load(j) <= capacities[j]);
    nonneg && demand_ok && capacity_ok
}

/// Each user is served by at most one provider.
pub fn is_single_provider(alloc: &Allocation) -> bool {
    (0..alloc.users()).all(|i| alloc.providers_of(i).count() <= 1)
}

impl CanonicalEncode for Bid {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.bidder_id);
        w.u8(self.neutral as u8);
        w.fixed(self.unit_value);
        w.fixed(self.demand);
    }
}

impl CanonicalDecode for Bid {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Bid {
            bidder_id: r.u32()?,
            neutral: r.u8()? != 0,
            unit_value: r.fixed()?,
            demand: r.fixed()?,
        })
    }
}

impl CanonicalEncode for ProviderBid {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.provider_id);
        w.fixed(self.unit_cost);
        w.fixed(self.capacity);
    }
}

impl CanonicalDecode for ProviderBid {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(ProviderBid {
            provider_id: r.u32()?,
            unit_cost: r.fixed()?,
            capacity: r.fixed()?,
        })
    }
}

impl CanonicalEncode for BidVector {
    fn encode(&self, w: &mut Writer) {
        w.seq(&self.user_bids);
        match &self.provider_bids {
            None => w.u8(0),
            Some(ps) => {
                w.u8(1);
                w.seq(ps);
            }
        }
    }
}

impl CanonicalDecode for BidVector {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let user_bids = r.seq()?;
        let provider_bids = match r.u8()? {
            0 => None,
            _ => Some(r.seq()?),
        };
        Ok(BidVector {
            user_bids,
            provider_bids,
        })
    }
}

impl CanonicalEncode for Allocation {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.m as u32);
        w.u32(self.n as u32);
        for q in &self.quantities {
            w.fixed(*q);
        }
    }
}

impl CanonicalDecode for Allocation {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        let len = m
            .checked_mul(n)
            .filter(|&l| l.saturating_mul(8) <= r.remaining())
            .ok_or(CoreError::Truncated)?;
        let quantities = (0..len).map(|_| r.fixed()).collect::<Result<_>>()?;
        Ok(Allocation { m, n, quantities })
    }
}

impl CanonicalEncode for PaymentVector {
    fn encode(&self, w: &mut Writer) {
        w.fixeds(&self.user_payments);
        w.fixeds(&self.provider_payments);
    }
}

impl CanonicalDecode for PaymentVector {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(PaymentVector {
            user_payments: r.fixeds()?,
            provider_payments: r.fixeds()?,
        })
    }
}

impl CanonicalEncode for Outcome {
    fn encode(&self, w: &mut Writer) {
        match self {
            Outcome::Abort => w.u8(0),
            Outcome::Solution { allocation, payments } => {
                w.u8(1);
                allocation.encode(w);
                payments.encode(w);
            }
        }
    }
}

impl CanonicalDecode for Outcome {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        match r.u8()? {
            0 => Ok(Outcome::Abort),
            _ => Ok(Outcome::Solution {
                allocation: Allocation::decode(r)?,
                payments: PaymentVector::decode(r)?,
            }),
        }
    }
}
