//! Random instances drawn from the evaluation distributions.

use auctioneer::allocators::AuctionKind;
use auctioneer::gametheory::{satisfies_solution_preference, Game};
use auctioneer::{Bid, BidVector, Fixed, ProviderBid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;

fn uniform(rng: &mut impl Rng, [lo, hi]: [Fixed; 2]) -> Fixed {
    Fixed::from_raw(rng.random_range(lo.raw()..=hi.raw()))
}

fn positive([lo, hi]: [Fixed; 2]) -> [Fixed; 2] {
    [lo.max(Fixed::EPSILON), hi.max(Fixed::EPSILON)]
}

/// Bids and provider capacities for one instance; deterministic in `seed`.
///
/// A provider's demanded load is its even share of the total user demand,
/// since any provider can serve any user. Double-auction capacities scale
/// that share by `double_capacity_scale`; standard-auction capacities scale
/// it by `standard_capacity_scale`, so with the default `[0, 0.25]` at most a
/// quarter of the demand can be served.
pub fn gen_instance(cfg: &ExperimentConfig, seed: u64) -> (BidVector, Vec<Fixed>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = &cfg.distribution;
    let (m, n) = (cfg.auction.m, cfg.auction.n);
    let users: Vec<Bid> = (0..n)
        .map(|i| {
            let v = uniform(&mut rng, d.value_range);
            let q = uniform(&mut rng, positive(d.demand_range));
            Bid::new(i as u32, v, q)
        })
        .collect();
    let total: i64 = users.iter().map(|b| b.demand.raw()).sum();
    let share = Fixed::from_raw(total / m as i64);
    match cfg.auction.kind {
        AuctionKind::Double => {
            let providers: Vec<ProviderBid> = (0..m)
                .map(|j| {
                    let cost = uniform(&mut rng, positive(d.cost_range));
                    let cap = share.mul_floor(uniform(&mut rng, d.double_capacity_scale));
                    ProviderBid::new(j as u32, cost, cap)
                })
                .collect();
            let caps = providers.iter().map(|p| p.capacity).collect();
            (BidVector::double(users, providers), caps)
        }
        AuctionKind::Standard => {
            let caps = (0..m)
                .map(|_| share.mul_floor(uniform(&mut rng, d.standard_capacity_scale)))
                .collect();
            (BidVector::standard(users), caps)
        }
    }
}

/// An instance on which every provider prefers the honest outcome to abort.
/// Resamples with derived seeds until one qualifies.
pub fn gen_game(cfg: &ExperimentConfig, seed: u64) -> Game {
    for attempt in 0u64.. {
        let s = seed ^ attempt.wrapping_mul(0xA076_1D64_78BD_642F);
        let (bids, caps) = gen_instance(cfg, s);
        let game = Game {
            spec: cfg.spec(caps),
            bids,
        };
        if satisfies_solution_preference(&game, s).unwrap_or(false) {
            return game;
        }
    }
    unreachable!("attempt counter is unbounded")
}

#[cfg(test)]
mod tests {
    use super::*;
    use auctioneer::fx;

    fn cfg(kind: AuctionKind, m: usize, n: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.auction.kind = kind;
        c.auction.m = m;
        c.auction.n = n;
        c
    }

    #[test]
    fn values_and_demands_in_range() {
        let c = cfg(AuctionKind::Double, 8, 200);
        let (bids, caps) = gen_instance(&c, 3);
        for b in &bids.user_bids {
            assert!(b.unit_value >= fx("0.75") && b.unit_value <= fx("1.25"));
            assert!(b.demand > Fixed::ZERO && b.demand <= Fixed::ONE);
        }
        let total: i64 = bids.user_bids.iter().map(|b| b.demand.raw()).sum();
        let share = total as f64 / 8.0 / Fixed::ONE.raw() as f64;
        for (p, cap) in bids.provider_bids.as_ref().unwrap().iter().zip(&caps) {
            assert!(p.unit_cost > Fixed::ZERO && p.unit_cost <= Fixed::ONE);
            assert!(cap.to_f64() >= 0.5 * share - 1e-6 && cap.to_f64() <= 1.5 * share + 1e-6);
        }
    }

    #[test]
    fn same_seed_same_instance() {
        for kind in [AuctionKind::Double, AuctionKind::Standard] {
            let c = cfg(kind, 4, 30);
            assert_eq!(gen_instance(&c, 9), gen_instance(&c, 9));
            assert_ne!(gen_instance(&c, 9), gen_instance(&c, 10));
        }
    }

    #[test]
    fn standard_capacities_at_most_a_quarter_of_load() {
        let c = cfg(AuctionKind::Standard, 4, 50);
        for seed in 0..20 {
            let (bids, caps) = gen_instance(&c, seed);
            let total: i64 = bids.user_bids.iter().map(|b| b.demand.raw()).sum();
            for cap in caps {
                assert!(cap.raw() * 4 <= total / 4 + 4);
            }
        }
    }

    #[test]
    fn games_satisfy_solution_preference() {
        let c = cfg(AuctionKind::Double, 4, 10);
        let g = gen_game(&c, 5);
        assert!(satisfies_solution_preference(&g, 0).unwrap());
    }
}
