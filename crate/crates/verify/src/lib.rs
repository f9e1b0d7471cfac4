//! Holds the `acceptance` test target, which prints one line per acceptance
//! criterion and exits nonzero if any fails. Run it with
//! `cargo test -p auctioneer-verify --test acceptance`.
