use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::GroundTruth;
use crate::pipeline::RankedResult;

pub const DEFAULT_RANKS: [usize; 4] = [25, 50, 100, 200];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Cutoff rank.
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean average precision over queries with at least one relevant image.
    pub map: f64,
    pub recall_at: BTreeMap<usize, f64>,
    /// Recall restricted to donor images, over queries that have donors.
    pub donor_recall_at: Option<BTreeMap<usize, f64>>,
    /// Micro-averaged precision and recall at every cutoff.
    pub pr_curve: Vec<PrPoint>,
    pub evaluated_queries: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn pr_curve_csv(&self) -> String {
        let mut out = String::from("k,precision,recall\n");
        for p in &self.pr_curve {
            let _ = writeln!(out, "{},{},{}", p.k, p.precision, p.recall);
        }
        out
    }
}

/// Average precision of one ranking: the precision at each relevant hit,
/// summed and divided by the number of relevant images.
pub fn average_precision(ranked: &[&str], relevant: &BTreeSet<String>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().enumerate() {
        if relevant.contains(*id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

fn recall_at(ranked: &[&str], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|id| relevant.contains(**id)).count();
    hits as f64 / relevant.len() as f64
}

struct QueryStats {
    ap: f64,
    recall: Vec<f64>,
    donor_recall: Option<Vec<f64>>,
    /// Relevant hits within the first `i + 1` entries.
    cumulative_hits: Vec<usize>,
    relevant: usize,
}

pub fn compute_metrics(results: &[RankedResult], gt: &GroundTruth) -> Result<MetricReport> {
    compute_metrics_at(results, gt, &DEFAULT_RANKS)
}

pub fn compute_metrics_at(results: &[RankedResult], gt: &GroundTruth, ranks: &[usize]) -> Result<MetricReport> {
    for r in results {
        if gt.relevant(&r.query_id).is_none() {
            return Err(Error::Validation(format!(
                "query {} has no groundtruth entry",
                r.query_id
            )));
        }
    }
    let stats: Vec<QueryStats> = results
        .par_iter()
        .filter_map(|r| {
            let relevant = gt.relevant(&r.query_id)?;
            if relevant.is_empty() {
                return None;
            }
            // repeated ids count once, at their first position
            let mut seen = HashSet::new();
            let ranked: Vec<&str> = r
                .ranked
                .iter()
                .map(|e| e.image_id.as_str())
                .filter(|id| seen.insert(*id))
                .collect();
            let mut hits = 0;
            let cumulative_hits = ranked
                .iter()
                .map(|id| {
                    hits += usize::from(relevant.contains(*id));
                    hits
                })
                .collect();
            let donor_recall = gt
                .donors(&r.query_id)
                .filter(|d| !d.is_empty())
                .map(|d| ranks.iter().map(|&k| recall_at(&ranked, d, k)).collect());
            Some(QueryStats {
                ap: average_precision(&ranked, relevant),
                recall: ranks.iter().map(|&k| recall_at(&ranked, relevant, k)).collect(),
                donor_recall,
                cumulative_hits,
                relevant: relevant.len(),
            })
        })
        .collect();

    let n = stats.len();
    let mean = |f: &dyn Fn(&QueryStats) -> f64| {
        if n == 0 {
            0.0
        } else {
            stats.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let map = mean(&|s| s.ap);
    let recall_at = ranks
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, mean(&|s| s.recall[i])))
        .collect();
    let with_donors: Vec<&Vec<f64>> = stats.iter().filter_map(|s| s.donor_recall.as_ref()).collect();
    let donor_recall_at = (!with_donors.is_empty()).then(|| {
        ranks
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                (
                    k,
                    with_donors.iter().map(|d| d[i]).sum::<f64>() / with_donors.len() as f64,
                )
            })
            .collect()
    });

    let total_relevant: usize = stats.iter().map(|s| s.relevant).sum();
    let depth = stats.iter().map(|s| s.cumulative_hits.len()).max().unwrap_or(0);
    let pr_curve = (1..=depth)
        .map(|k| {
            let (mut hits, mut retrieved) = (0usize, 0usize);
            for s in &stats {
                let len = s.cumulative_hits.len().min(k);
                if len > 0 {
                    hits += s.cumulative_hits[len - 1];
                }
                retrieved += len;
            }
            PrPoint {
                k,
                precision: if retrieved == 0 { 0.0 } else { hits as f64 / retrieved as f64 },
                recall: if total_relevant == 0 { 0.0 } else { hits as f64 / total_relevant as f64 },
            }
        })
        .collect();

    Ok(MetricReport {
        map,
        recall_at,
        donor_recall_at,
        pr_curve,
        evaluated_queries: n,
    })
}
