//! Fixed-length bit streams for bids, the unit of per-bit agreement.
//!
//! Layout: `W` bits of unit value (most significant first), `W` bits of
//! demand, then one flag bit. For user bids the flag marks the neutral bid;
//! for provider bids it marks an empty (withdrawn) provider.

use crate::error::{CoreError, Result};
use crate::fixed::Fixed;
use crate::types::{Bid, ProviderBid};

/// Bits per numeric field.
pub const FIELD_BITS: u32 = 64;
/// Total stream length: two fields plus the flag.
pub const STREAM_LEN: usize = 2 * FIELD_BITS as usize + 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitStream(Vec<bool>);

impl BitStream {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.len() != STREAM_LEN {
            return Err(CoreError::StreamLength {
                got: bits.len(),
                expected: STREAM_LEN,
            });
        }
        Ok(BitStream(bits))
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, pos: usize) -> bool {
        self.0[pos]
    }

    fn pack(a: u64, b: u64, flag: bool) -> Self {
        let mut bits = Vec::with_capacity(STREAM_LEN);
        for word in [a, b] {
            bits.extend((0..FIELD_BITS).rev().map(|k| (word >> k) & 1 == 1));
        }
        bits.push(flag);
        BitStream(bits)
    }

    fn unpack(&self) -> (u64, u64, bool) {
        let w = FIELD_BITS as usize;
        let field = |bits: &[bool]| bits.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64);
        (field(&self.0[..w]), field(&self.0[w..2 * w]), self.0[2 * w])
    }
}

fn field(v: Fixed, name: &'static str) -> Result<u64> {
    u64::try_from(v.raw()).map_err(|_| CoreError::FieldOverflow {
        field: name,
        bits: FIELD_BITS,
    })
}

fn unfield(raw: u64) -> Option<Fixed> {
    i64::try_from(raw).ok().map(Fixed::from_raw)
}

/// Encodes a user bid. Fails when a field does not fit an unsigned `W`-bit
/// field; callers substitute the neutral bid.
pub fn encode_bid(b: &Bid) -> Result<BitStream> {
    if b.neutral {
        return Ok(BitStream::pack(0, 0, true));
    }
    Ok(BitStream::pack(
        field(b.unit_value, "unit_value")?,
        field(b.demand, "demand")?,
        false,
    ))
}

/// Decodes a user bid; anything that is not a valid bid becomes the neutral bid.
pub fn decode_bid(stream: &BitStream, bidder_id: u32) -> Bid {
    let (value, demand, neutral) = stream.unpack();
    if neutral {
        return Bid::neutral(bidder_id);
    }
    match (unfield(value), unfield(demand)) {
        (Some(unit_value), Some(demand)) => {
            let bid = Bid::new(bidder_id, unit_value, demand);
            if bid.is_valid() {
                bid
            } else {
                Bid::neutral(bidder_id)
            }
        }
        _ => Bid::neutral(bidder_id),
    }
}

pub fn encode_provider_bid(p: &ProviderBid) -> Result<BitStream> {
    Ok(BitStream::pack(
        field(p.unit_cost, "unit_cost")?,
        field(p.capacity, "capacity")?,
        false,
    ))
}

/// Encoding of the empty provider bid.
pub fn empty_provider_stream() -> BitStream {
    BitStream::pack(0, 0, true)
}

/// Decodes a provider bid; invalid streams become a provider with no capacity.
pub fn decode_provider_bid(stream: &BitStream, provider_id: u32) -> ProviderBid {
    let (cost, capacity, empty) = stream.unpack();
    if empty {
        return ProviderBid::empty(provider_id);
    }
    match (unfield(cost), unfield(capacity)) {
        (Some(c), Some(q)) => ProviderBid::new(provider_id, c, q),
        _ => ProviderBid::empty(provider_id),
    }
}
