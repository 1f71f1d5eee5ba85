//! Object-level spatial verification.
//!
//! For every database image sharing matches with the query the verifier
//!
//! 1. estimates an affinity-weighted centroid of the matched query keypoints,
//! 2. maps each match through its own similarity transform (rotation by the
//!    keypoint angle difference, scaling by the keypoint scale ratio) so that
//!    it votes for where that centroid lies in the database image,
//! 3. bins the votes on a square grid whose cell size grows sub-linearly with
//!    the database image resolution,
//! 4. keeps a strict one-to-one subset of each bin and scores it by vote
//!    centrality, angle coherence and (log) cardinality.
//!
//! Each occupied bin is a candidate shared object; the image score combines
//! the per-object scores.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::ImageTable;
use crate::types::{normalize_angle, FeatureSet, Keypoint, MatchRecord};

/// `1/√(2π)`, the standard normal density at zero.
pub const PDF_AT_ZERO: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageScoreMode {
    /// Score of the best object cluster.
    MaxCluster,
    /// Sum over all object clusters.
    SumClusters,
}

/// Units in which vote distances enter the centrality density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceNormalizer {
    /// Distances are divided by the bin window size.
    WindowSize,
}

/// Spread statistic used for the angle coherence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngleSpread {
    /// Circular standard deviation `sqrt(-2 ln R)`.
    Circular,
    /// Plain standard deviation of the raw radian values.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Divisor `b` of the image resolution in the window-size rule.
    pub bin_scale: f64,
    /// Sub-linearity exponent `ε` of the window-size rule.
    pub epsilon: f64,
    pub distance_normalizer: DistanceNormalizer,
    pub image_score_mode: ImageScoreMode,
    pub min_cluster_votes: usize,
    pub angle_spread: AngleSpread,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            bin_scale: 10.0,
            epsilon: 0.01,
            distance_normalizer: DistanceNormalizer::WindowSize,
            image_score_mode: ImageScoreMode::MaxCluster,
            min_cluster_votes: 2,
            angle_spread: AngleSpread::Circular,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon {} must lie in (0, 1)",
                self.epsilon
            )));
        }
        if !(self.bin_scale >= 1.0 && self.bin_scale.is_finite()) {
            return Err(Error::Config(format!(
                "bin scale {} must be at least 1",
                self.bin_scale
            )));
        }
        if self.min_cluster_votes < 1 {
            return Err(Error::Config("min_cluster_votes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Switches that remove scoring components, for ablation studies.
///
/// With `use_cs` off a bin is scored by its raw vote count (plain Hough
/// voting) and `use_as`/`use_log` are ignored. With `use_log` off the
/// cardinality factor is `|O|` instead of `ln |O|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Off: votes aim at the query image center instead of the weighted centroid.
    pub use_centroid: bool,
    pub use_cs: bool,
    pub use_as: bool,
    pub use_log: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::FULL
    }
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags {
        use_centroid: true,
        use_cs: true,
        use_as: true,
        use_log: true,
    };

    pub const PURE_HOUGH: AblationFlags = AblationFlags {
        use_centroid: false,
        use_cs: false,
        use_as: false,
        use_log: false,
    };

    /// The cumulative ladder: pure Hough, +centroid, +CS, +AS, +log.
    pub fn ladder() -> [(&'static str, AblationFlags); 5] {
        let centroid = AblationFlags {
            use_centroid: true,
            ..AblationFlags::PURE_HOUGH
        };
        let cs = AblationFlags {
            use_cs: true,
            ..centroid
        };
        let angle = AblationFlags { use_as: true, ..cs };
        [
            ("pure-hough", AblationFlags::PURE_HOUGH),
            ("centroid", centroid),
            ("cs", cs),
            ("as", angle),
            ("full", AblationFlags::FULL),
        ]
    }

    pub fn from_name(name: &str) -> Option<AblationFlags> {
        AblationFlags::ladder()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f)
    }
}

/// One correspondence between a query keypoint and a keypoint of the
/// database image that owns the enclosing [`ImageMatchSet`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMatch {
    pub query_feature_index: u32,
    pub db_feature_index: u32,
    pub query_keypoint: Keypoint,
    pub db_keypoint: Keypoint,
    pub affinity: f64,
}

/// All matches between the query and one database image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatchSet {
    pub db_image: u32,
    pub matches: Vec<ImageMatch>,
}

/// Splits a match list into per-database-image sets, ordered by image.
/// Within a set, matches keep their input order.
pub fn group_matches_by_image(
    matches: &[MatchRecord],
    query: &FeatureSet,
    images: &ImageTable,
) -> Result<Vec<ImageMatchSet>> {
    let mut order: Vec<usize> = (0..matches.len()).collect();
    order.sort_by_key(|&i| matches[i].db_image);
    let mut sets: Vec<ImageMatchSet> = Vec::new();
    for i in order {
        let m = &matches[i];
        let kps = images.keypoints.get(m.db_image as usize).ok_or_else(|| {
            Error::Validation(format!("match references unknown db image {}", m.db_image))
        })?;
        let db_keypoint = *kps.get(m.db_feature_index as usize).ok_or_else(|| {
            Error::Validation(format!(
                "match references feature {} of db image {} which has {}",
                m.db_feature_index,
                m.db_image,
                kps.len()
            ))
        })?;
        let query_keypoint = *query
            .keypoints
            .get(m.query_feature_index as usize)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "match references query feature {} of {}",
                    m.query_feature_index,
                    query.len()
                ))
            })?;
        let im = ImageMatch {
            query_feature_index: m.query_feature_index,
            db_feature_index: m.db_feature_index,
            query_keypoint,
            db_keypoint,
            affinity: m.affinity,
        };
        match sets.last_mut() {
            Some(s) if s.db_image == m.db_image => s.matches.push(im),
            _ => sets.push(ImageMatchSet {
                db_image: m.db_image,
                matches: vec![im],
            }),
        }
    }
    Ok(sets)
}

/// Affinity-weighted mean of the matched query locations. Falls back to the
/// unweighted mean when every affinity is zero.
pub fn weighted_centroid(ims: &ImageMatchSet) -> [f64; 2] {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for m in &ims.matches {
        sx += m.query_keypoint.x * m.affinity;
        sy += m.query_keypoint.y * m.affinity;
        sw += m.affinity;
    }
    if sw > 0.0 {
        return [sx / sw, sy / sw];
    }
    let n = ims.matches.len().max(1) as f64;
    let (mx, my) = ims.matches.iter().fold((0.0, 0.0), |(x, y), m| {
        (x + m.query_keypoint.x, y + m.query_keypoint.y)
    });
    [mx / n, my / n]
}

/// Bin side length `(max(w, h) / b)^(1 − ε)` for a database image of size `w × h`.
pub fn window_size(width: f64, height: f64, cfg: &VerifyConfig) -> f64 {
    (width.max(height) / cfg.bin_scale).powf(1.0 - cfg.epsilon)
}

/// Grid cell `ceil(v / ws)` per axis.
pub fn bin_of(v: [f64; 2], ws: f64) -> (i64, i64) {
    ((v[0] / ws).ceil() as i64, (v[1] / ws).ceil() as i64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub position: [f64; 2],
    pub match_index: usize,
    /// Database keypoint angle minus query keypoint angle, in `[0, 2π)`.
    pub angle_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteBin {
    pub coord: (i64, i64),
    /// Match indices in ascending order.
    pub members: Vec<usize>,
}

/// Votes cast by one database image's matches, in that image's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteSpace {
    pub db_image: u32,
    pub votes: Vec<Vote>,
    pub window_size: f64,
    /// Occupied bins in ascending coordinate order.
    pub bins: Vec<VoteBin>,
}

/// Projects every match into the database image: the offset from the query
/// keypoint to `c` is rotated by the angle difference, scaled by the scale
/// ratio and added to the database keypoint location.
pub fn project_votes(ims: &ImageMatchSet, c: [f64; 2], db_size: [f64; 2], cfg: &VerifyConfig) -> VoteSpace {
    let ws = window_size(db_size[0], db_size[1], cfg);
    let votes: Vec<Vote> = ims
        .matches
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (q, p) = (&m.query_keypoint, &m.db_keypoint);
            let a = normalize_angle(p.angle - q.angle).unwrap_or(0.0);
            let (sin, cos) = a.sin_cos();
            let ratio = p.scale / q.scale;
            let (ox, oy) = (c[0] - q.x, c[1] - q.y);
            let tx = (cos * ox - sin * oy) * ratio;
            let ty = (sin * ox + cos * oy) * ratio;
            Vote {
                position: [p.x + tx, p.y + ty],
                match_index: i,
                angle_diff: a,
            }
        })
        .collect();

    let mut keyed: Vec<((i64, i64), usize)> = votes
        .iter()
        .map(|v| (bin_of(v.position, ws), v.match_index))
        .collect();
    keyed.sort_unstable();
    let mut bins: Vec<VoteBin> = Vec::new();
    for (coord, idx) in keyed {
        match bins.last_mut() {
            Some(b) if b.coord == coord => b.members.push(idx),
            _ => bins.push(VoteBin {
                coord,
                members: vec![idx],
            }),
        }
    }
    VoteSpace {
        db_image: ims.db_image,
        votes,
        window_size: ws,
        bins,
    }
}

/// Greedy one-to-one selection: strongest affinity first (lower match index
/// on ties), skipping matches whose query or database feature is already
/// used. Returns the kept indices in ascending order.
pub fn filter_one_to_one(members: &[usize], ims: &ImageMatchSet) -> Vec<usize> {
    let mut order = members.to_vec();
    order.sort_by(|&a, &b| {
        ims.matches[b]
            .affinity
            .total_cmp(&ims.matches[a].affinity)
            .then(a.cmp(&b))
    });
    let mut used_q = HashSet::with_capacity(order.len());
    let mut used_p = HashSet::with_capacity(order.len());
    let mut kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let m = &ims.matches[i];
            if used_q.contains(&m.query_feature_index) || used_p.contains(&m.db_feature_index) {
                return false;
            }
            used_q.insert(m.query_feature_index);
            used_p.insert(m.db_feature_index);
            true
        })
        .collect();
    kept.sort_unstable();
    kept
}

/// Standard normal density.
#[inline]
pub fn gaussian_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() * PDF_AT_ZERO
}

/// Circular standard deviation `sqrt(-2 ln R)` of a set of angles.
///
/// `1 − R` is accumulated as a mean of `2 sin²(d/2)` over deviations from
/// the mean direction, which stays accurate when the angles nearly agree.
pub fn circular_std(angles: &[f64]) -> f64 {
    if angles.len() < 2 {
        return 0.0;
    }
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    if s.hypot(c) <= f64::EPSILON * angles.len() as f64 {
        // resultant vanishes: directions cancel completely
        return (-2.0 * f64::MIN_POSITIVE.ln()).sqrt();
    }
    let mean = s.atan2(c);
    let one_minus_r = angles
        .iter()
        .map(|a| {
            let d = (a - mean + PI).rem_euclid(TAU) - PI;
            2.0 * (d / 2.0).sin().powi(2)
        })
        .sum::<f64>()
        / angles.len() as f64;
    let r = (1.0 - one_minus_r).max(f64::MIN_POSITIVE);
    let ln_r = if one_minus_r < 0.5 {
        (-one_minus_r).ln_1p()
    } else {
        r.ln()
    };
    (-2.0 * ln_r).max(0.0).sqrt()
}

/// Population standard deviation of raw radian values.
pub fn linear_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// A candidate shared object: the one-to-one filtered matches of one bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectCluster {
    pub db_image: u32,
    pub bin_coordinate: (i64, i64),
    /// Match indices into the image's [`ImageMatchSet`], ascending.
    pub member_matches: Vec<usize>,
    /// Votes in the bin before one-to-one filtering.
    pub vote_count: usize,
    pub centrality_score: f64,
    pub angle_score: f64,
    /// `CS · AS · ln |O|`.
    pub os2os_score: f64,
    /// Score used for ranking under the active ablation flags; equals
    /// `os2os_score` with every component enabled.
    pub score: f64,
}

/// Scores a filtered member set `o` of one bin.
pub fn score_cluster(o: &[usize], votes: &VoteSpace, cfg: &VerifyConfig) -> ObjectCluster {
    assert!(!o.is_empty(), "cannot score an empty cluster");
    let ws = match cfg.distance_normalizer {
        DistanceNormalizer::WindowSize => votes.window_size,
    };
    let n = o.len() as f64;
    let (mx, my) = o.iter().fold((0.0, 0.0), |(x, y), &i| {
        let p = votes.votes[i].position;
        (x + p[0], y + p[1])
    });
    let center = [mx / n, my / n];
    let cs = o
        .iter()
        .map(|&i| {
            let p = votes.votes[i].position;
            gaussian_pdf((p[0] - center[0]).hypot(p[1] - center[1]) / ws)
        })
        .sum::<f64>()
        / n;
    let angles: Vec<f64> = o.iter().map(|&i| votes.votes[i].angle_diff).collect();
    let spread = match cfg.angle_spread {
        AngleSpread::Circular => circular_std(&angles),
        AngleSpread::Linear => linear_std(&angles),
    };
    let angle_score = 1.0 / (1.0 + spread);
    let os2os = cs * angle_score * n.ln();
    ObjectCluster {
        db_image: votes.db_image,
        bin_coordinate: bin_of(votes.votes[o[0]].position, votes.window_size),
        member_matches: o.to_vec(),
        vote_count: o.len(),
        centrality_score: cs,
        angle_score,
        os2os_score: os2os,
        score: os2os,
    }
}

fn ablated_score(c: &ObjectCluster, flags: &AblationFlags) -> f64 {
    if !flags.use_cs {
        return c.vote_count as f64;
    }
    let n = c.member_matches.len() as f64;
    let mut s = c.centrality_score;
    if flags.use_as {
        s *= c.angle_score;
    }
    s * if flags.use_log { n.ln() } else { n }
}

/// Accumulated vote density on the database image grid, one cell per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    /// Row-major `height × width`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageVerdict {
    pub db_image: u32,
    pub score: f64,
    /// Clusters that reached the vote minimum, best first.
    pub clusters: Vec<ObjectCluster>,
    pub centroid: [f64; 2],
    pub window_size: f64,
    pub density: Option<DensityMap>,
}

/// Runs centroid estimation, vote projection, binning, filtering and
/// scoring for one database image.
pub fn verify_image(
    ims: &ImageMatchSet,
    query_size: [f64; 2],
    db_size: [f64; 2],
    cfg: &VerifyConfig,
    flags: &AblationFlags,
    with_density: bool,
) -> ImageVerdict {
    let centroid = if flags.use_centroid {
        weighted_centroid(ims)
    } else {
        [query_size[0] / 2.0, query_size[1] / 2.0]
    };
    let votes = project_votes(ims, centroid, db_size, cfg);

    let mut clusters = Vec::new();
    for bin in &votes.bins {
        let kept = if flags.use_cs {
            filter_one_to_one(&bin.members, ims)
        } else {
            bin.members.clone()
        };
        let enough = if flags.use_cs {
            kept.len() >= cfg.min_cluster_votes
        } else {
            bin.members.len() >= cfg.min_cluster_votes
        };
        if !enough {
            continue;
        }
        let mut cluster = score_cluster(&kept, &votes, cfg);
        cluster.bin_coordinate = bin.coord;
        cluster.vote_count = bin.members.len();
        cluster.score = ablated_score(&cluster, flags);
        clusters.push(cluster);
    }
    clusters.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bin_coordinate.cmp(&b.bin_coordinate))
    });
    let score = match cfg.image_score_mode {
        ImageScoreMode::MaxCluster => clusters.first().map_or(0.0, |c| c.score),
        ImageScoreMode::SumClusters => clusters.iter().map(|c| c.score).sum(),
    };
    let density = with_density.then(|| density_map(&votes, db_size));
    ImageVerdict {
        db_image: ims.db_image,
        score,
        clusters,
        centroid,
        window_size: votes.window_size,
        density,
    }
}

/// Each vote adds the density of its distance (in window units) from its
/// bin's mean vote to that bin's grid cell; votes outside the image are
/// dropped.
fn density_map(votes: &VoteSpace, db_size: [f64; 2]) -> DensityMap {
    let ws = votes.window_size;
    let width = ((db_size[0] / ws).ceil() as usize).max(1);
    let height = ((db_size[1] / ws).ceil() as usize).max(1);
    let mut values = vec![0.0; width * height];
    for bin in &votes.bins {
        let (bx, by) = bin.coord;
        if bx < 1 || by < 1 || bx as usize > width || by as usize > height {
            continue;
        }
        let n = bin.members.len() as f64;
        let (mx, my) = bin.members.iter().fold((0.0, 0.0), |(x, y), &i| {
            let p = votes.votes[i].position;
            (x + p[0], y + p[1])
        });
        let contribution: f64 = bin
            .members
            .iter()
            .map(|&i| {
                let p = votes.votes[i].position;
                gaussian_pdf((p[0] - mx / n).hypot(p[1] - my / n) / ws)
            })
            .sum();
        values[(by as usize - 1) * width + (bx as usize - 1)] += contribution;
    }
    DensityMap {
        width,
        height,
        values,
    }
}
