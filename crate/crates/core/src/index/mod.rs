//! Nearest-neighbor search over the pooled database descriptors, plus the
//! rank-adaptive affinity that turns neighbor lists into scored matches.
//!
//! Two backends are provided: an exact [`FlatIndex`] scan and an
//! [`IvfPqIndex`] (inverted file with product-quantized residuals searched
//! through per-query distance tables). Both order neighbors by
//! `(distance, db image id, db feature index)`, so output never depends on
//! thread scheduling.

mod distance;
pub mod kmeans;
mod persist;
pub mod pq;

use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dataset, FeatureSet, Keypoint, MatchRecord};

pub use distance::squared_l2;
pub use persist::{load_index, read_index, save_index, write_index, INDEX_MAGIC};
pub use pq::ProductQuantizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexKind {
    Flat,
    IvfPq,
}

/// Build- and query-time parameters of the descriptor index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    /// Neighbors retrieved per query feature (K).
    pub k_neighbors: usize,
    /// 1-based reference rank whose distance anchors the affinity margin.
    pub reference_rank: usize,
    pub kind: IndexKind,
    pub ivf_cells: usize,
    pub pq_subquantizers: usize,
    /// Bits per PQ code; only 8 is supported.
    pub pq_bits: u32,
    pub nprobe: usize,
    pub kmeans_iterations: usize,
    pub seed: u64,
    /// Debug mode: inverted lists keep raw vectors instead of PQ codes.
    pub bypass_pq: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            k_neighbors: 20,
            reference_rank: 10,
            kind: IndexKind::Flat,
            ivf_cells: 64,
            pq_subquantizers: 8,
            pq_bits: 8,
            nprobe: 8,
            kmeans_iterations: 25,
            seed: 0,
            bypass_pq: false,
        }
    }
}

impl IndexConfig {
    /// Sets K and the default reference rank `max(1, K/2)`.
    pub fn with_k(mut self, k: usize) -> Self {
        self.k_neighbors = k;
        self.reference_rank = default_reference_rank(k);
        self
    }

    pub fn validate_query(&self) -> Result<()> {
        if self.k_neighbors < 2 {
            return Err(Error::Config(format!(
                "k_neighbors must be at least 2, got {}",
                self.k_neighbors
            )));
        }
        if self.reference_rank < 1 || self.reference_rank > self.k_neighbors {
            return Err(Error::Config(format!(
                "reference rank {} outside [1, {}]",
                self.reference_rank, self.k_neighbors
            )));
        }
        if self.nprobe < 1 {
            return Err(Error::Config("nprobe must be at least 1".into()));
        }
        Ok(())
    }

    pub fn validate_build(&self, dim: usize) -> Result<()> {
        if self.kind == IndexKind::IvfPq {
            if self.pq_subquantizers == 0 || !dim.is_multiple_of(self.pq_subquantizers) {
                return Err(Error::Config(format!(
                    "pq subquantizers {} must divide descriptor dim {dim}",
                    self.pq_subquantizers
                )));
            }
            if self.pq_bits != 8 {
                return Err(Error::Config(format!(
                    "only 8-bit PQ codes are supported, got {}",
                    self.pq_bits
                )));
            }
            if self.ivf_cells == 0 {
                return Err(Error::Config("ivf_cells must be at least 1".into()));
            }
            if self.kmeans_iterations == 0 {
                return Err(Error::Config("kmeans_iterations must be at least 1".into()));
            }
        }
        Ok(())
    }
}

pub fn default_reference_rank(k: usize) -> usize {
    (k / 2).max(1)
}

/// Geometry of every indexed database image and the map from global
/// descriptor row to `(image, feature)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageTable {
    pub ids: Vec<String>,
    pub sizes: Vec<[f64; 2]>,
    pub keypoints: Vec<Vec<Keypoint>>,
    owner_image: Vec<u32>,
    owner_feature: Vec<u32>,
}

impl ImageTable {
    fn new(ids: Vec<String>, sizes: Vec<[f64; 2]>, keypoints: Vec<Vec<Keypoint>>) -> Self {
        let mut owner_image = Vec::new();
        let mut owner_feature = Vec::new();
        for (img, kps) in keypoints.iter().enumerate() {
            for f in 0..kps.len() {
                owner_image.push(img as u32);
                owner_feature.push(f as u32);
            }
        }
        ImageTable {
            ids,
            sizes,
            keypoints,
            owner_image,
            owner_feature,
        }
    }

    fn from_dataset(ds: &Dataset) -> Self {
        ImageTable::new(
            ds.images().iter().map(|f| f.image_id.clone()).collect(),
            ds.images().iter().map(|f| [f.width, f.height]).collect(),
            ds.images().iter().map(|f| f.keypoints.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.owner_image.len()
    }

    /// `(image, feature)` owning a global descriptor row.
    pub fn owner(&self, row: u32) -> (u32, u32) {
        (
            self.owner_image[row as usize],
            self.owner_feature[row as usize],
        )
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.ids.binary_search_by(|id| id.as_str().cmp(image_id)).ok()
    }
}

/// Exact index: every database descriptor in one contiguous matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    pub(crate) dim: usize,
    pub(crate) descriptors: Vec<f32>,
}

/// Database rows scanned per tile in batched search; sized to stay cache resident.
const FLAT_TILE_ROWS: usize = 1024;

impl FlatIndex {
    fn search(&self, v: &[f32], k: usize) -> Vec<(u32, f32)> {
        let mut top = TopK::new(k);
        for (row, d) in self.descriptors.chunks_exact(self.dim).enumerate() {
            top.push(squared_l2(v, d), row as u32);
        }
        top.into_sorted()
    }

    /// Same results as calling [`FlatIndex::search`] per vector, but the
    /// database is streamed once per batch in cache-sized tiles.
    fn search_batch(&self, vs: &[f32], k: usize) -> Vec<Vec<(u32, f32)>> {
        let n = vs.len() / self.dim;
        let mut tops: Vec<TopK> = (0..n).map(|_| TopK::new(k)).collect();
        let tile = FLAT_TILE_ROWS * self.dim;
        for (t, block) in self.descriptors.chunks(tile).enumerate() {
            let base = t * FLAT_TILE_ROWS;
            for (v, top) in vs.chunks_exact(self.dim).zip(tops.iter_mut()) {
                for (r, d) in block.chunks_exact(self.dim).enumerate() {
                    top.push(squared_l2(v, d), (base + r) as u32);
                }
            }
        }
        tops.into_iter().map(TopK::into_sorted).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct InvertedList {
    pub(crate) rows: Vec<u32>,
    /// `rows.len() × m` codes, empty in bypass mode.
    pub(crate) codes: Vec<u8>,
    /// `rows.len() × dim` raw vectors, only in bypass mode.
    pub(crate) raw: Vec<f32>,
}

/// Inverted file over coarse k-means cells with PQ-encoded residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    pub(crate) dim: usize,
    pub(crate) coarse: Vec<f32>,
    pub(crate) pq: ProductQuantizer,
    pub(crate) lists: Vec<InvertedList>,
    pub(crate) bypass: bool,
}

impl IvfPqIndex {
    pub fn cells(&self) -> usize {
        self.lists.len()
    }

    fn probe_cells(&self, v: &[f32], nprobe: usize) -> Vec<usize> {
        let mut top = TopK::new(nprobe.min(self.cells()));
        for (c, cent) in self.coarse.chunks_exact(self.dim).enumerate() {
            top.push(squared_l2(v, cent), c as u32);
        }
        top.into_sorted().into_iter().map(|(c, _)| c as usize).collect()
    }

    fn search(&self, v: &[f32], k: usize, nprobe: usize) -> Vec<(u32, f32)> {
        let mut top = TopK::new(k);
        let m = self.pq.subquantizers();
        let mut residual = vec![0f32; self.dim];
        for c in self.probe_cells(v, nprobe) {
            let list = &self.lists[c];
            if self.bypass {
                for (&row, raw) in list.rows.iter().zip(list.raw.chunks_exact(self.dim)) {
                    top.push(squared_l2(v, raw), row);
                }
                continue;
            }
            let cent = &self.coarse[c * self.dim..(c + 1) * self.dim];
            for ((r, &x), &y) in residual.iter_mut().zip(v).zip(cent) {
                *r = x - y;
            }
            let table = self.pq.distance_table(&residual);
            for (&row, code) in list.rows.iter().zip(list.codes.chunks_exact(m)) {
                top.push(ProductQuantizer::asymmetric_distance(&table, code), row);
            }
        }
        top.into_sorted()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Flat(FlatIndex),
    IvfPq(IvfPqIndex),
}

/// A built, immutable descriptor index together with the geometry of the
/// images it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub images: ImageTable,
    pub backend: Backend,
}

impl Index {
    pub fn dim(&self) -> usize {
        match &self.backend {
            Backend::Flat(f) => f.dim,
            Backend::IvfPq(i) => i.dim,
        }
    }

    pub fn kind(&self) -> IndexKind {
        match &self.backend {
            Backend::Flat(_) => IndexKind::Flat,
            Backend::IvfPq(_) => IndexKind::IvfPq,
        }
    }

    /// The `k` nearest global rows to `v` as `(row, squared distance)`,
    /// ordered by distance then row.
    pub fn search(&self, v: &[f32], k: usize, nprobe: usize) -> Vec<(u32, f32)> {
        match &self.backend {
            Backend::Flat(f) => f.search(v, k),
            Backend::IvfPq(i) => i.search(v, k, nprobe),
        }
    }

    /// [`Index::search`] for every row of the row-major matrix `vs`,
    /// parallelized over batches of rows.
    pub fn search_many(&self, vs: &[f32], k: usize, nprobe: usize) -> Vec<Vec<(u32, f32)>> {
        const BATCH: usize = 64;
        let dim = self.dim();
        vs.par_chunks(BATCH * dim)
            .flat_map_iter(|batch| match &self.backend {
                Backend::Flat(f) => f.search_batch(batch, k),
                Backend::IvfPq(i) => batch.chunks_exact(dim).map(|v| i.search(v, k, nprobe)).collect(),
            })
            .collect()
    }
}

/// Bounded max-heap keeping the `k` smallest `(distance, row)` pairs.
///
/// Non-negative f32 bit patterns sort like the values, so the pair packs
/// into one u64 key with the row as tie-breaker.
struct TopK {
    k: usize,
    heap: BinaryHeap<u64>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, dist: f32, row: u32) {
        if self.k == 0 {
            return;
        }
        let key = (u64::from(dist.max(0.0).to_bits()) << 32) | u64::from(row);
        if self.heap.len() < self.k {
            self.heap.push(key);
        } else if key < *self.heap.peek().expect("non-empty") {
            self.heap.pop();
            self.heap.push(key);
        }
    }

    fn into_sorted(self) -> Vec<(u32, f32)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|key| (key as u32, f32::from_bits((key >> 32) as u32)))
            .collect()
    }
}

/// Builds an index over every descriptor of `ds`.
///
/// For IVF-PQ the quantizers are trained on the descriptors of a seeded
/// random `holdout_fraction` of the database images.
pub fn build_index(ds: &Dataset, cfg: &IndexConfig, holdout_fraction: f64) -> Result<Index> {
    if ds.is_empty() || ds.total_features() == 0 {
        return Err(Error::Config("cannot index an empty dataset".into()));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction {holdout_fraction} outside (0, 1]"
        )));
    }
    let dim = ds.dim();
    cfg.validate_build(dim)?;
    let images = ImageTable::from_dataset(ds);
    let mut all = Vec::with_capacity(ds.total_features() * dim);
    for fs in ds.images() {
        all.extend_from_slice(fs.descriptors());
    }
    let backend = match cfg.kind {
        IndexKind::Flat => Backend::Flat(FlatIndex {
            dim,
            descriptors: all,
        }),
        IndexKind::IvfPq => Backend::IvfPq(build_ivfpq(ds, cfg, holdout_fraction, &all)?),
    };
    Ok(Index { images, backend })
}

fn training_sample(ds: &Dataset, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let take = ((ds.len() as f64 * fraction).ceil() as usize).clamp(1, ds.len());
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .flat_map(|i| ds.images()[i].descriptors().iter().copied())
        .collect()
}

fn build_ivfpq(ds: &Dataset, cfg: &IndexConfig, fraction: f64, all: &[f32]) -> Result<IvfPqIndex> {
    let dim = ds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = training_sample(ds, fraction, &mut rng);
    let n_train = train.len() / dim;
    if n_train < cfg.ivf_cells {
        return Err(Error::Config(format!(
            "training sample has {n_train} vectors, fewer than {} IVF cells",
            cfg.ivf_cells
        )));
    }
    let coarse = kmeans::train(&train, dim, cfg.ivf_cells, cfg.kmeans_iterations, &mut rng);

    let residual_of = |v: &[f32], cell: usize| -> Vec<f32> {
        v.iter()
            .zip(&coarse[cell * dim..(cell + 1) * dim])
            .map(|(x, c)| x - c)
            .collect()
    };
    let train_residuals: Vec<f32> = train
        .par_chunks_exact(dim)
        .flat_map_iter(|v| residual_of(v, kmeans::nearest(v, &coarse, dim).0 as usize))
        .collect();
    let pq = ProductQuantizer::train(
        &train_residuals,
        dim,
        cfg.pq_subquantizers,
        cfg.kmeans_iterations,
        &mut rng,
    );

    let cells: Vec<u32> = all
        .par_chunks_exact(dim)
        .map(|v| kmeans::nearest(v, &coarse, dim).0)
        .collect();
    let mut lists = vec![InvertedList::default(); cfg.ivf_cells];
    for (row, (v, &cell)) in all.chunks_exact(dim).zip(&cells).enumerate() {
        let list = &mut lists[cell as usize];
        list.rows.push(row as u32);
        if cfg.bypass_pq {
            list.raw.extend_from_slice(v);
        } else {
            pq.encode(&residual_of(v, cell as usize), &mut list.codes);
        }
    }
    Ok(IvfPqIndex {
        dim,
        coarse,
        pq,
        lists,
        bypass: cfg.bypass_pq,
    })
}

/// Retrieves K neighbors for every query feature and scores each match by
/// its distance margin below the reference-rank neighbor:
/// `affinity = max(0, d_φ − d_j)`.
///
/// Output is ordered by query feature, then rank.
pub fn knn_matches(query: &FeatureSet, index: &Index, cfg: &IndexConfig) -> Result<Vec<MatchRecord>> {
    cfg.validate_query()?;
    if query.dim() != index.dim() && !query.is_empty() {
        return Err(Error::Config(format!(
            "query {} has descriptor dim {} but the index uses {}",
            query.image_id,
            query.dim(),
            index.dim()
        )));
    }
    let hits = index.search_many(query.descriptors(), cfg.k_neighbors, cfg.nprobe);
    Ok(hits
        .iter()
        .enumerate()
        .flat_map(|(qi, h)| score_neighbors(qi as u32, h, cfg.reference_rank, &index.images))
        .collect())
}

/// Converts one query feature's sorted neighbor list into match records.
pub fn score_neighbors(
    query_feature_index: u32,
    hits: &[(u32, f32)],
    reference_rank: usize,
    images: &ImageTable,
) -> Vec<MatchRecord> {
    if hits.is_empty() {
        return Vec::new();
    }
    let dist = |sq: f32| f64::from(sq).max(0.0).sqrt();
    let reference = dist(hits[reference_rank.clamp(1, hits.len()) - 1].1);
    hits.iter()
        .enumerate()
        .map(|(r, &(row, sq))| {
            let (db_image, db_feature_index) = images.owner(row);
            let d = dist(sq);
            MatchRecord {
                query_feature_index,
                db_image,
                db_feature_index,
                rank: r as u32 + 1,
                affinity: (reference - d).max(0.0),
                l2_distance: d,
            }
        })
        .collect()
}
