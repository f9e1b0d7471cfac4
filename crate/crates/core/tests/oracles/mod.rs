//! Independent reference implementations used only by tests.
//!
//! These are written straight from the auction rules, with raw integer
//! arithmetic on the 20-bit grid, and share no code with the library beyond
//! its data types.
#![allow(dead_code)]

use auctioneer::{Allocation, Bid, BidVector, Fixed, PaymentVector};

const F: u32 = 20;

fn floor_mul(a: Fixed, b: Fixed) -> i64 {
    ((a.raw() as i128 * b.raw() as i128) >> F) as i64
}

fn ceil_mul(a: Fixed, b: Fixed) -> i64 {
    let p = a.raw() as i128 * b.raw() as i128;
    ((p + (1 << F) - 1) >> F) as i64
}

fn worth(b: &Bid) -> i64 {
    if b.neutral {
        0
    } else {
        floor_mul(b.unit_value, b.demand)
    }
}

/// Best single-provider assignment by exhaustive enumeration.
///
/// Assignments are visited in lexicographic order over users `0..n`, each
/// user trying providers `0..m` before "unserved"; the first assignment with
/// the highest welfare wins. Returns the assignment and its welfare (raw).
pub fn brute_force_assignment(users: &[Bid], caps: &[Fixed]) -> (Vec<Option<usize>>, i64) {
    let (n, m) = (users.len(), caps.len());
    let choices = m + 1;
    let total = choices.pow(n as u32);
    let mut best: Option<(Vec<Option<usize>>, i64)> = None;
    for code in 0..total {
        // most significant digit is user 0; digit m means unserved
        let mut digits = vec![0usize; n];
        let mut c = code;
        for i in (0..n).rev() {
            digits[i] = c % choices;
            c /= choices;
        }
        let assign: Vec<Option<usize>> = digits.iter().map(|&d| (d < m).then_some(d)).collect();
        let mut load = vec![0i64; m];
        let mut ok = true;
        let mut w = 0i64;
        for (i, a) in assign.iter().enumerate() {
            if let Some(j) = *a {
                if users[i].neutral {
                    ok = false;
                    break;
                }
                load[j] += users[i].demand.raw();
                w += worth(&users[i]);
            }
        }
        if !ok || load.iter().zip(caps).any(|(l, c)| *l > c.raw()) {
            continue;
        }
        if best.as_ref().is_none_or(|(_, bw)| w > *bw) {
            best = Some((assign, w));
        }
    }
    best.expect("the empty assignment is always feasible")
}

/// VCG allocation and payments for the standard auction by brute force.
pub fn brute_force_vcg(bids: &BidVector, caps: &[Fixed]) -> (Allocation, PaymentVector) {
    let users = &bids.user_bids;
    let (n, m) = (users.len(), caps.len());
    let (assign, w) = brute_force_assignment(users, caps);
    let mut x = Allocation::zeros(m, n);
    let mut pay = PaymentVector::zeros(m, n);
    for (i, a) in assign.iter().enumerate() {
        if let Some(j) = *a {
            x.set(j, i, users[i].demand);
        }
    }
    for i in 0..n {
        let own = if assign[i].is_some() { worth(&users[i]) } else { 0 };
        let mut without = users.clone();
        without[i] = Bid::neutral(i as u32);
        let (_, w_minus) = brute_force_assignment(&without, caps);
        let p = (w_minus - (w - own)).max(0);
        pay.user_payments[i] = Fixed::from_raw(p);
        if let Some(j) = assign[i] {
            pay.provider_payments[j] = Fixed::from_raw(pay.provider_payments[j].raw() + p);
        }
    }
    (x, pay)
}

/// Double auction computed from the overlap of demand and capacity intervals.
///
/// Winners' demands are laid end to end on a line, as are the open
/// providers' capacities; each user receives from each provider the length
/// of the overlap of their intervals.
pub fn double_auction_oracle(bids: &BidVector) -> (Allocation, PaymentVector) {
    let providers = bids.provider_bids.as_ref().expect("double auction bids");
    let (m, n) = (providers.len(), bids.n());
    let mut x = Allocation::zeros(m, n);
    let mut pay = PaymentVector::zeros(m, n);

    let mut u: Vec<&Bid> = bids
        .user_bids
        .iter()
        .filter(|b| !b.neutral && b.demand.raw() > 0)
        .collect();
    u.sort_by_key(|b| (std::cmp::Reverse(b.unit_value.raw()), b.bidder_id));
    let mut p: Vec<_> = providers.iter().filter(|p| p.capacity.raw() > 0).collect();
    p.sort_by_key(|p| (p.unit_cost.raw(), p.provider_id));

    let mut k = 0;
    while k < u.len() && k < p.len() && u[k].unit_value >= p[k].unit_cost {
        k += 1;
    }
    if k == 0 {
        return (x, pay);
    }
    let (winners, sellers, up, pp) = if k == 1 {
        let mid = Fixed::from_raw((u[0].unit_value.raw() + p[0].unit_cost.raw()).div_euclid(2));
        (&u[..1], &p[..1], mid, mid)
    } else {
        (&u[..k - 1], &p[..k], u[k - 1].unit_value, p[k - 1].unit_cost)
    };

    let mut seller_start = Vec::new();
    let mut acc = 0i64;
    for s in sellers {
        seller_start.push(acc);
        acc += s.capacity.raw();
    }
    let mut start = 0i64;
    for w in winners {
        let (a, b) = (start, start + w.demand.raw());
        start = b;
        for (si, s) in sellers.iter().enumerate() {
            let (c, d) = (seller_start[si], seller_start[si] + s.capacity.raw());
            let q = b.min(d) - a.max(c);
            if q <= 0 {
                continue;
            }
            let q = Fixed::from_raw(q);
            let (i, j) = (w.bidder_id as usize, s.provider_id as usize);
            x.set(j, i, q);
            let charge = ceil_mul(up, q).min(floor_mul(w.unit_value, q));
            pay.user_payments[i] = Fixed::from_raw(pay.user_payments[i].raw() + charge);
            pay.provider_payments[j] = Fixed::from_raw(pay.provider_payments[j].raw() + floor_mul(pp, q));
        }
    }
    (x, pay)
}
