//! Benchmark-only crate; the actual benchmarks live in `benches/kernels.rs`
//! (`cargo bench -p lde-bench`). Keeping them here keeps criterion out of
//! the library crate's dependency closure.
