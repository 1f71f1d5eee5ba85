//! Retrieval metrics, a RANSAC reference verifier and the ranking-time bench.

pub mod bench;
pub mod metrics;
pub mod ransac;

pub use bench::{bench_ranking_time, BenchReport, BenchRow};
pub use metrics::{compute_metrics, compute_metrics_at, MetricReport, PrPoint, DEFAULT_RANKS};
pub use ransac::{ransac_verify, RansacConfig, RansacResult, Similarity};
