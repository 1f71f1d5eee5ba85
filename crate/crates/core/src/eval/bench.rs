//! Verification-stage timing as a function of neighbors per query feature.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::{default_reference_rank, score_neighbors, Index};
use crate::pipeline::{rank_matches, QueryOptions};
use crate::types::{FeatureSet, MatchRecord};
use crate::verify::{AblationFlags, VerifyConfig};

pub const DEFAULT_K_SWEEP: [usize; 5] = [25, 50, 100, 200, 400];

pub const TIMING_REPEATS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub k: usize,
    /// Mean matches per query.
    pub matches: f64,
    /// Mean verification wall time per query.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of ln(time) against ln(matches).
    pub log_log_slope: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,matches,seconds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.k, r.matches, r.seconds);
        }
        out
    }
}

/// Least-squares slope of `y` on `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Times spatial verification for each K in `ks`.
///
/// Neighbor lists are retrieved once at the largest K (untimed); every K
/// then re-scores affinities with reference rank `K / 2` and times
/// [`rank_matches`] on a single worker thread. Each query keeps the fastest
/// of [`TIMING_REPEATS`] runs to damp scheduler noise; rows average over
/// queries.
pub fn bench_ranking_time(
    queries: &[&FeatureSet],
    index: &Index,
    ks: &[usize],
    nprobe: usize,
    verify_cfg: &VerifyConfig,
) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(Error::Config("ranking bench needs at least one query".into()));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let neighbors: Vec<Vec<Vec<(u32, f32)>>> = queries
        .iter()
        .map(|q| index.search_many(q.descriptors(), kmax, nprobe))
        .collect();
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build bench thread pool: {e}")))?;
    let opts = QueryOptions::top(usize::MAX);

    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let (mut total_matches, mut total_time) = (0usize, 0.0);
        for (q, hits) in queries.iter().zip(&neighbors) {
            let phi = default_reference_rank(k);
            let matches: Vec<MatchRecord> = hits
                .iter()
                .enumerate()
                .flat_map(|(i, h)| score_neighbors(i as u32, &h[..k.min(h.len())], phi, &index.images))
                .collect();
            total_matches += matches.len();
            let mut best = f64::INFINITY;
            for _ in 0..TIMING_REPEATS {
                let start = Instant::now();
                let ranked = single.install(|| {
                    rank_matches(q, &matches, &index.images, verify_cfg, &AblationFlags::FULL, &opts)
                })?;
                best = best.min(start.elapsed().as_secs_f64());
                std::hint::black_box(ranked);
            }
            total_time += best;
        }
        let n = queries.len() as f64;
        rows.push(BenchRow {
            k,
            matches: total_matches as f64 / n,
            seconds: total_time / n,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.matches > 0.0 && r.seconds > 0.0)
        .map(|r| (r.matches.ln(), r.seconds.ln()))
        .collect();
    let log_log_slope = if pts.len() >= 2 { slope(&pts) } else { f64::NAN };
    Ok(BenchReport { rows, log_log_slope })
}
