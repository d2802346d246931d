//! Command-line orchestration: dataset ingestion, benchmarks, training
//! runs and run comparison.

pub mod bench;
pub mod commands;
pub mod data;
pub mod idx;

pub use bench::{bench_conv, bench_gemm, parse_conv_spec, write_rows, BenchData, BenchOptions, BenchRow, PolicyKind};
pub use commands::{
    cmd_compare, cmd_quantize, cmd_train, compare_metrics, CompareReport, EpochGap, QuantizeReport, Tolerances,
    TrainArtifacts,
};
pub use data::{DataSource, DatasetHandle, Normalization};
