//! Query orchestration: match, verify, rank, emit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{knn_matches, ImageTable, Index, IndexConfig};
use crate::types::{Dataset, FeatureSet, MatchRecord};
pub use crate::verify::AblationFlags;
use crate::verify::{group_matches_by_image, verify_image, DensityMap, ObjectCluster, VerifyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: String,
    pub score: f64,
    pub num_clusters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_id: String,
    /// Score descending, then image id ascending.
    pub ranked: Vec<RankedEntry>,
    /// Clusters of each ranked image, keyed by image id.
    pub clusters: Option<BTreeMap<String, Vec<ObjectCluster>>>,
    /// Vote density of each ranked image, keyed by image id.
    pub vote_maps: Option<BTreeMap<String, DensityMap>>,
}

impl RankedResult {
    pub fn rank_of(&self, image_id: &str) -> Option<usize> {
        self.ranked.iter().position(|e| e.image_id == image_id).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryOptions {
    pub top_n: usize,
    pub keep_clusters: bool,
    pub keep_vote_maps: bool,
}

impl Default for QueryOptions {
    fn default() -> Self {
        QueryOptions {
            top_n: 100,
            keep_clusters: false,
            keep_vote_maps: false,
        }
    }
}

impl QueryOptions {
    pub fn top(top_n: usize) -> Self {
        QueryOptions {
            top_n,
            ..QueryOptions::default()
        }
    }
}

fn lookup<'a>(queries: &'a Dataset, query_id: &str) -> Result<&'a FeatureSet> {
    queries
        .get(query_id)
        .ok_or_else(|| Error::NotFound(format!("query {query_id} is not in the query set")))
}

fn sort_entries(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
}

/// Full retrieval for a query looked up by id.
pub fn run_query(
    query_id: &str,
    queries: &Dataset,
    index: &Index,
    index_cfg: &IndexConfig,
    verify_cfg: &VerifyConfig,
    flags: &AblationFlags,
    opts: &QueryOptions,
) -> Result<RankedResult> {
    let query = lookup(queries, query_id)?;
    run_query_features(query, index, index_cfg, verify_cfg, flags, opts)
}

pub fn run_query_features(
    query: &FeatureSet,
    index: &Index,
    index_cfg: &IndexConfig,
    verify_cfg: &VerifyConfig,
    flags: &AblationFlags,
    opts: &QueryOptions,
) -> Result<RankedResult> {
    let matches = knn_matches(query, index, index_cfg)?;
    rank_matches(query, &matches, &index.images, verify_cfg, flags, opts)
}

/// Verifies and ranks precomputed matches. Every database image with at
/// least one match is scored independently, so the ranking does not depend
/// on database order.
pub fn rank_matches(
    query: &FeatureSet,
    matches: &[MatchRecord],
    images: &ImageTable,
    verify_cfg: &VerifyConfig,
    flags: &AblationFlags,
    opts: &QueryOptions,
) -> Result<RankedResult> {
    verify_cfg.validate()?;
    let sets = group_matches_by_image(matches, query, images)?;
    let query_size = [query.width, query.height];
    let mut verdicts: Vec<_> = sets
        .par_iter()
        .map(|ims| {
            let db_size = images.sizes[ims.db_image as usize];
            verify_image(ims, query_size, db_size, verify_cfg, flags, opts.keep_vote_maps)
        })
        .collect();

    let mut entries: Vec<(RankedEntry, usize)> = verdicts
        .iter()
        .enumerate()
        .map(|(i, v)| {
            (
                RankedEntry {
                    image_id: images.ids[v.db_image as usize].clone(),
                    score: v.score,
                    num_clusters: v.clusters.len(),
                },
                i,
            )
        })
        .collect();
    entries.sort_by(|(a, _), (b, _)| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    entries.truncate(opts.top_n);

    let mut clusters = opts.keep_clusters.then(BTreeMap::new);
    let mut vote_maps = opts.keep_vote_maps.then(BTreeMap::new);
    for (entry, i) in &entries {
        if let Some(c) = clusters.as_mut() {
            c.insert(entry.image_id.clone(), std::mem::take(&mut verdicts[*i].clusters));
        }
        if let (Some(m), Some(d)) = (vote_maps.as_mut(), verdicts[*i].density.take()) {
            m.insert(entry.image_id.clone(), d);
        }
    }
    Ok(RankedResult {
        query_id: query.image_id.clone(),
        ranked: entries.into_iter().map(|(e, _)| e).collect(),
        clusters,
        vote_maps,
    })
}

/// Feature-only baseline: an image scores the sum of its match affinities.
pub fn run_baseline_feature_only(
    query_id: &str,
    queries: &Dataset,
    index: &Index,
    index_cfg: &IndexConfig,
    top_n: usize,
) -> Result<RankedResult> {
    let query = lookup(queries, query_id)?;
    let matches = knn_matches(query, index, index_cfg)?;
    Ok(baseline_from_matches(&query.image_id, &matches, &index.images, top_n))
}

pub fn baseline_from_matches(
    query_id: &str,
    matches: &[MatchRecord],
    images: &ImageTable,
    top_n: usize,
) -> RankedResult {
    let mut sums: BTreeMap<u32, f64> = BTreeMap::new();
    for m in matches {
        *sums.entry(m.db_image).or_default() += m.affinity;
    }
    let mut ranked: Vec<RankedEntry> = sums
        .into_iter()
        .map(|(img, score)| RankedEntry {
            image_id: images.ids[img as usize].clone(),
            score,
            num_clusters: 0,
        })
        .collect();
    sort_entries(&mut ranked);
    ranked.truncate(top_n);
    RankedResult {
        query_id: query_id.to_string(),
        ranked,
        clusters: None,
        vote_maps: None,
    }
}

#[derive(Serialize)]
struct ClusterLine<'a> {
    query_id: &'a str,
    image_id: &'a str,
    bin: [i64; 2],
    size: usize,
    votes: usize,
    cs: f64,
    #[serde(rename = "as")]
    angle: f64,
    score: f64,
}

/// One JSON object per cluster of every ranked image with retained clusters.
pub fn diagnostics_jsonl(result: &RankedResult) -> String {
    let mut out = String::new();
    let Some(clusters) = &result.clusters else {
        return out;
    };
    for entry in &result.ranked {
        for c in clusters.get(&entry.image_id).into_iter().flatten() {
            let line = ClusterLine {
                query_id: &result.query_id,
                image_id: &entry.image_id,
                bin: [c.bin_coordinate.0, c.bin_coordinate.1],
                size: c.member_matches.len(),
                votes: c.vote_count,
                cs: c.centrality_score,
                angle: c.angle_score,
                score: c.score,
            };
            let json = serde_json::to_string(&line).expect("cluster line serializes");
            let _ = writeln!(out, "{json}");
        }
    }
    out
}
