use iovfl_bench::{chain_of, masked_updates, nodes};
use iovfl_core::aggregation::smpc_sum;
use iovfl_core::{verify_chain, ChainStatus};

#[test]
fn masked_fixture_sums_to_the_plain_total() {
    let n = 8;
    let sum = smpc_sum(&masked_updates(n, 16), &nodes(n)).unwrap();
    let want: f64 = (0..n).map(|i| i as f64 * 0.01).sum();
    assert!(sum.iter().all(|s| (s - want).abs() < 1e-9), "{sum:?}");
}

#[test]
fn chain_fixture_verifies() {
    let c = chain_of(20);
    assert_eq!(c.len(), 21);
    assert_eq!(verify_chain(&c), ChainStatus::Valid);
}
