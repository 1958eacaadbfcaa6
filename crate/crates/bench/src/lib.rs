//! Criterion benchmarks for the pipeline stages live in `benches/stages.rs`.
//!
//! Run with `cargo bench -p stereoflow-bench`.
