use criterion::{criterion_group, criterion_main};

use iovfl_bench::{bench_ledger, bench_masks, bench_smpc_sum, bench_train};

criterion_group!(benches, bench_masks, bench_smpc_sum, bench_ledger, bench_train);
criterion_main!(benches);
