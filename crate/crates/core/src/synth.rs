//! Seeded synthetic datasets with planted similarity-transformed objects.
//!
//! Database images hold random keypoints with L2-normalized Gaussian
//! descriptors. Each query is a composite: optionally a full copy of a host
//! image, plus compact keypoint subsets ("objects") cut from donor images,
//! pasted under a random similarity transform and noise. Every plant is
//! recorded so that retrieval and vote geometry can be checked against
//! closed-form expectations.
//!
//! Optional distractor families add copies of query descriptors to
//! otherwise unrelated database images:
//!
//! * scrambled copies sit at random positions, scales and angles;
//! * bursts repeat a few query features many times in one small disc, with
//!   tiny scale and a shared orientation;
//! * clutter copies a compact group of query features once each into one
//!   small disc with tiny scale and random orientations.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_dataset, write_groundtruth, GroundTruth};
use crate::types::{Dataset, FeatureSet, Keypoint};

/// Placement attempts per donor object before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformRanges {
    /// Rotation range in radians, half-open.
    pub rotation: [f64; 2],
    /// Donor-to-query keypoint scale ratio range.
    pub scale: [f64; 2],
    /// Minimum distance in pixels between a pasted object and the query border.
    pub margin: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            rotation: [0.0, TAU],
            scale: [0.5, 2.0],
            margin: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistractorConfig {
    pub scrambled_images: usize,
    pub scrambled_features: [usize; 2],
    pub burst_images: usize,
    pub burst_features: [usize; 2],
    pub burst_copies: usize,
    pub clutter_images: usize,
    pub clutter_features: [usize; 2],
    /// Radius of the disc holding a burst or clutter group.
    pub group_radius: f64,
    /// Scale of burst and clutter copies relative to the source keypoint.
    pub tiny_scale: f64,
    /// Upper bound on outlier and distractor copies of any one query feature.
    pub max_copies_per_feature: usize,
}

impl Default for DistractorConfig {
    fn default() -> Self {
        DistractorConfig {
            scrambled_images: 0,
            scrambled_features: [20, 30],
            burst_images: 0,
            burst_features: [1, 3],
            burst_copies: 5,
            clutter_images: 0,
            clutter_features: [30, 50],
            group_radius: 6.0,
            tiny_scale: 0.02,
            max_copies_per_feature: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_db_images: usize,
    pub num_queries: usize,
    pub features_per_image: usize,
    pub descriptor_dim: usize,
    pub canvas_width: [f64; 2],
    pub canvas_height: [f64; 2],
    /// Keypoint scales are drawn log-uniformly from this range.
    pub keypoint_scale: [f64; 2],
    /// Keypoints per planted object.
    pub donor_object_size: [usize; 2],
    pub donors_per_query: [usize; 2],
    /// Build each query on top of a full copy of a database image.
    pub with_host: bool,
    pub transform: TransformRanges,
    pub descriptor_noise_sigma: f64,
    /// Pixel jitter of query keypoint positions.
    pub geometry_noise_sigma: f64,
    /// Radian jitter of query keypoint angles.
    pub angle_noise_sigma: f64,
    /// Log-scale jitter of query keypoint scales.
    pub scale_noise_sigma: f64,
    /// Fraction of a donor's matches that are spurious copies placed at
    /// random in the donor image.
    pub outlier_fraction: f64,
    pub distractors: DistractorConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_db_images: 100,
            num_queries: 10,
            features_per_image: 200,
            descriptor_dim: 32,
            canvas_width: [480.0, 800.0],
            canvas_height: [360.0, 640.0],
            keypoint_scale: [1.5, 12.0],
            donor_object_size: [15, 30],
            donors_per_query: [1, 2],
            with_host: true,
            transform: TransformRanges::default(),
            descriptor_noise_sigma: 0.02,
            geometry_noise_sigma: 0.0,
            angle_noise_sigma: 0.0,
            scale_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            distractors: DistractorConfig::default(),
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::Config(format!("{name} range {r:?} is reversed")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.num_db_images == 0 || self.features_per_image == 0 || self.descriptor_dim == 0 {
            return cfg_err("image count, features per image and descriptor dim must be positive".into());
        }
        check_range("canvas width", &self.canvas_width)?;
        check_range("canvas height", &self.canvas_height)?;
        check_range("keypoint scale", &self.keypoint_scale)?;
        check_range("donor object size", &self.donor_object_size)?;
        check_range("donors per query", &self.donors_per_query)?;
        check_range("rotation", &self.transform.rotation)?;
        check_range("transform scale", &self.transform.scale)?;
        check_range("scrambled features", &self.distractors.scrambled_features)?;
        check_range("burst features", &self.distractors.burst_features)?;
        check_range("clutter features", &self.distractors.clutter_features)?;
        if self.canvas_width[0] <= 0.0 || self.canvas_height[0] <= 0.0 || self.keypoint_scale[0] <= 0.0 {
            return cfg_err("canvas sizes and keypoint scales must be positive".into());
        }
        if self.transform.scale[0] <= 0.0 {
            return cfg_err(format!("minimum transform scale {} must be positive", self.transform.scale[0]));
        }
        if self.donor_object_size[0] == 0 || self.donor_object_size[1] > self.features_per_image {
            return cfg_err(format!(
                "donor object size {:?} must lie in [1, features_per_image = {}]",
                self.donor_object_size, self.features_per_image
            ));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return cfg_err(format!("outlier fraction {} must lie in [0, 1)", self.outlier_fraction));
        }
        for (name, v) in [
            ("descriptor noise", self.descriptor_noise_sigma),
            ("geometry noise", self.geometry_noise_sigma),
            ("angle noise", self.angle_noise_sigma),
            ("scale noise", self.scale_noise_sigma),
            ("group radius", self.distractors.group_radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return cfg_err(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if self.distractors.tiny_scale.is_nan() || self.distractors.tiny_scale <= 0.0 {
            return cfg_err("tiny_scale must be positive".into());
        }
        let roles = self.donors_per_query[1] + usize::from(self.with_host);
        if roles == 0 {
            return cfg_err("a query needs a host or at least one donor".into());
        }
        if roles > self.num_db_images {
            return cfg_err(format!("{roles} relevant images per query exceed the database size"));
        }
        Ok(())
    }
}

/// Ground truth for one pasted object. The transform maps query
/// coordinates onto donor coordinates: `p = s R(rotation) q + translation`,
/// with donor angle = query angle + rotation and donor scale = s × query scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub query_id: String,
    pub donor_image_id: String,
    pub rotation: f64,
    pub scale: f64,
    pub translation: [f64; 2],
    /// Pairwise corresponding with `planted_donor_indices`.
    pub planted_query_indices: Vec<u32>,
    pub planted_donor_indices: Vec<u32>,
    /// Spurious copies: query feature `outlier_query_indices[i]` was
    /// duplicated as donor feature `outlier_donor_indices[i]`.
    pub outlier_query_indices: Vec<u32>,
    pub outlier_donor_indices: Vec<u32>,
    /// Disc in the query image covering the pasted object.
    pub query_object_center: [f64; 2],
    pub query_object_radius: f64,
    pub geometry_noise_sigma: f64,
    pub angle_noise_sigma: f64,
    pub scale_noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub database: Dataset,
    pub queries: Dataset,
    pub groundtruth: GroundTruth,
    pub plants: Vec<PlantRecord>,
}

struct Canvas {
    width: f64,
    height: f64,
    keypoints: Vec<Keypoint>,
    descriptors: Vec<Vec<f32>>,
}

impl Canvas {
    fn push(&mut self, kp: Keypoint, desc: Vec<f32>) -> u32 {
        self.keypoints.push(kp);
        self.descriptors.push(desc);
        (self.keypoints.len() - 1) as u32
    }

    fn into_feature_set(self, id: String, dim: usize) -> Result<FeatureSet> {
        FeatureSet::new(id, self.width, self.height, self.keypoints, self.descriptors.concat(), dim)
    }
}

struct Gen<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn uniform(&mut self, r: [f64; 2]) -> f64 {
        if r[0] == r[1] {
            r[0]
        } else {
            self.rng.random_range(r[0]..r[1])
        }
    }

    fn count(&mut self, r: [usize; 2]) -> usize {
        self.rng.random_range(r[0]..=r[1])
    }

    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn descriptor(&mut self) -> Vec<f32> {
        let mut v: Vec<f32> = (0..self.cfg.descriptor_dim)
            .map(|_| self.rng.sample::<f32, _>(StandardNormal))
            .collect();
        normalize(&mut v);
        v
    }

    fn noisy_copy(&mut self, v: &[f32]) -> Vec<f32> {
        let sigma = self.cfg.descriptor_noise_sigma;
        if sigma == 0.0 {
            return v.to_vec();
        }
        let mut out: Vec<f32> = v
            .iter()
            .map(|&x| x + (sigma * self.normal()) as f32)
            .collect();
        normalize(&mut out);
        out
    }

    fn scale(&mut self) -> f64 {
        let [lo, hi] = self.cfg.keypoint_scale;
        self.uniform([lo.ln(), hi.ln()]).exp()
    }

    fn random_keypoint(&mut self, w: f64, h: f64) -> Keypoint {
        let x = self.uniform([0.0, w]);
        let y = self.uniform([0.0, h]);
        let s = self.scale();
        let a = self.uniform([0.0, TAU]);
        Keypoint::new(x, y, s, a).expect("finite random keypoint")
    }

    fn point_in_disc(&mut self, center: [f64; 2], radius: f64, w: f64, h: f64) -> [f64; 2] {
        let r = radius * self.uniform([0.0, 1.0]).sqrt();
        let t = self.uniform([0.0, TAU]);
        [
            (center[0] + r * t.cos()).clamp(0.0, w),
            (center[1] + r * t.sin()).clamp(0.0, h),
        ]
    }

    /// Applies the configured query-side geometry noise.
    fn jitter(&mut self, kp: Keypoint, w: f64, h: f64) -> Keypoint {
        let c = self.cfg;
        let mut out = kp;
        if c.geometry_noise_sigma > 0.0 {
            out.x = (kp.x + c.geometry_noise_sigma * self.normal()).clamp(0.0, w);
            out.y = (kp.y + c.geometry_noise_sigma * self.normal()).clamp(0.0, h);
        }
        if c.angle_noise_sigma > 0.0 {
            out.angle = kp.angle + c.angle_noise_sigma * self.normal();
        }
        if c.scale_noise_sigma > 0.0 {
            out.scale = kp.scale * (c.scale_noise_sigma * self.normal()).exp();
        }
        Keypoint::new(out.x, out.y, out.scale, out.angle).expect("finite jittered keypoint")
    }

    fn canvas(&mut self, features: usize) -> Canvas {
        let width = self.uniform(self.cfg.canvas_width);
        let height = self.uniform(self.cfg.canvas_height);
        let mut c = Canvas {
            width,
            height,
            keypoints: Vec::with_capacity(features),
            descriptors: Vec::with_capacity(features),
        };
        for _ in 0..features {
            let kp = self.random_keypoint(width, height);
            let d = self.descriptor();
            c.push(kp, d);
        }
        c
    }
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Indices of the `n` keypoints nearest to `center`, ties by index.
fn nearest_keypoints(kps: &[Keypoint], center: [f64; 2], n: usize, allowed: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..kps.len()).filter(|&i| allowed(i)).collect();
    order.sort_by(|&a, &b| {
        dist(kps[a].location(), center)
            .total_cmp(&dist(kps[b].location(), center))
            .then(a.cmp(&b))
    });
    order.truncate(n);
    order
}

/// One query feature before the final shuffle.
struct QueryItem {
    kp: Keypoint,
    desc: Vec<f32>,
    /// `(plant, position within the plant)` for planted donor features.
    plant: Option<(usize, usize)>,
}

struct PendingPlant {
    donor: usize,
    rotation: f64,
    scale: f64,
    translation: [f64; 2],
    donor_indices: Vec<u32>,
    center: [f64; 2],
    radius: f64,
}

/// Builds the full dataset for `cfg`. Output depends only on the config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut g = Gen {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut db: Vec<Canvas> = (0..cfg.num_db_images)
        .map(|_| g.canvas(cfg.features_per_image))
        .collect();
    let db_id = |i: usize| format!("db{i:05}");

    // relevant images (host first, then donors) for every query
    let roles: Vec<Vec<usize>> = (0..cfg.num_queries)
        .map(|_| {
            let n = g.count(cfg.donors_per_query) + usize::from(cfg.with_host);
            sample(&mut g.rng, cfg.num_db_images, n).into_vec()
        })
        .collect();
    let used: BTreeSet<usize> = roles.iter().flatten().copied().collect();
    let pool: Vec<usize> = (0..cfg.num_db_images).filter(|i| !used.contains(i)).collect();

    let mut queries = Vec::with_capacity(cfg.num_queries);
    let mut plants = Vec::new();
    let mut relevance = BTreeMap::new();
    let mut donor_flags = BTreeMap::new();

    for (qn, role) in roles.iter().enumerate() {
        let query_id = format!("q{qn:04}");
        let (host, donors) = if cfg.with_host {
            (Some(role[0]), &role[1..])
        } else {
            (None, &role[..])
        };

        let (width, height, mut items) = match host {
            Some(h) => {
                let (w, hh) = (db[h].width, db[h].height);
                let mut items = Vec::with_capacity(db[h].keypoints.len());
                for i in 0..db[h].keypoints.len() {
                    let kp = g.jitter(db[h].keypoints[i], w, hh);
                    let desc = g.noisy_copy(&db[h].descriptors[i]);
                    items.push(QueryItem { kp, desc, plant: None });
                }
                (w, hh, items)
            }
            None => {
                let c = g.canvas(cfg.features_per_image);
                let items = c
                    .keypoints
                    .into_iter()
                    .zip(c.descriptors)
                    .map(|(kp, desc)| QueryItem { kp, desc, plant: None })
                    .collect();
                (c.width, c.height, items)
            }
        };

        let mut pending: Vec<PendingPlant> = Vec::new();
        for &donor in donors {
            let plant_no = pending.len();
            let d = &db[donor];
            let n = g.count(cfg.donor_object_size).min(d.keypoints.len());
            let seed_point = [g.uniform([0.0, d.width]), g.uniform([0.0, d.height])];
            let chosen = nearest_keypoints(&d.keypoints, seed_point, n, |_| true);
            let m_p = chosen.iter().fold([0.0, 0.0], |acc, &i| {
                [acc[0] + d.keypoints[i].x / n as f64, acc[1] + d.keypoints[i].y / n as f64]
            });
            let r_p = chosen
                .iter()
                .map(|&i| dist(d.keypoints[i].location(), m_p))
                .fold(0.0, f64::max);
            let rotation = g.uniform(cfg.transform.rotation);

            // each attempt redraws the scale and the position
            let mut placed = None;
            for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
                let scale = g.uniform(cfg.transform.scale);
                let radius = r_p / scale + 1e-9;
                let lo = cfg.transform.margin + radius;
                if lo > width - lo || lo > height - lo {
                    continue;
                }
                let c = [g.uniform([lo, width - lo]), g.uniform([lo, height - lo])];
                let fits = if attempt < MAX_PLACEMENT_ATTEMPTS / 2 {
                    pending.iter().all(|p| dist(p.center, c) >= p.radius + radius)
                } else {
                    // partial overlap: neither center covered, earlier objects keep half
                    pending.iter().enumerate().all(|(pn, p)| {
                        let total = p.donor_indices.len();
                        let kept = items
                            .iter()
                            .filter(|it| matches!(it.plant, Some((n, _)) if n == pn))
                            .filter(|it| dist(it.kp.location(), c) > radius)
                            .count();
                        dist(p.center, c) >= p.radius.max(radius) && 2 * kept >= total
                    })
                };
                if fits {
                    placed = Some((c, scale, radius));
                    break;
                }
            }
            let (m_q, scale, radius) = placed.ok_or_else(|| {
                Error::Config(format!(
                    "could not place a donor object of radius {r_p:.1} in a {width:.0}x{height:.0} query \
                     after {MAX_PLACEMENT_ATTEMPTS} attempts"
                ))
            })?;

            // pasted objects occlude whatever was underneath
            items.retain(|it| dist(it.kp.location(), m_q) > radius);

            let (sin, cos) = rotation.sin_cos();
            let donor_kps: Vec<Keypoint> = chosen.iter().map(|&i| d.keypoints[i]).collect();
            let donor_descs: Vec<Vec<f32>> = chosen.iter().map(|&i| d.descriptors[i].clone()).collect();
            for (k, (p, desc)) in donor_kps.iter().zip(&donor_descs).enumerate() {
                // q = R(-r)(p - m_p) / s + m_q
                let (dx, dy) = (p.x - m_p[0], p.y - m_p[1]);
                let qx = (cos * dx + sin * dy) / scale + m_q[0];
                let qy = (-sin * dx + cos * dy) / scale + m_q[1];
                let exact = Keypoint::new(qx, qy, p.scale / scale, p.angle - rotation)?;
                let kp = g.jitter(exact, width, height);
                let desc = g.noisy_copy(desc);
                items.push(QueryItem {
                    kp,
                    desc,
                    plant: Some((plant_no, k)),
                });
            }
            let translation = [
                m_p[0] - scale * (cos * m_q[0] - sin * m_q[1]),
                m_p[1] - scale * (sin * m_q[0] + cos * m_q[1]),
            ];
            pending.push(PendingPlant {
                donor,
                rotation,
                scale,
                translation,
                donor_indices: chosen.iter().map(|&i| i as u32).collect(),
                center: m_q,
                radius,
            });
        }

        items.shuffle(&mut g.rng);
        // surviving (position in object, query index) pairs per plant
        let mut survivors: Vec<Vec<(usize, u32)>> = vec![Vec::new(); pending.len()];
        for (i, it) in items.iter().enumerate() {
            if let Some((pn, k)) = it.plant {
                survivors[pn].push((k, i as u32));
            }
        }
        survivors.iter_mut().for_each(|s| s.sort_unstable());
        let planted_q: Vec<Vec<u32>> = survivors.iter().map(|s| s.iter().map(|&(_, q)| q).collect()).collect();
        let planted_d: Vec<Vec<u32>> = survivors
            .iter()
            .zip(&pending)
            .map(|(s, p)| s.iter().map(|&(k, _)| p.donor_indices[k]).collect())
            .collect();
        let mut copies = vec![0usize; items.len()];
        let cap = cfg.distractors.max_copies_per_feature;

        for (pn, p) in pending.iter().enumerate() {
            let n = planted_q[pn].len() as f64;
            let m = (n * cfg.outlier_fraction / (1.0 - cfg.outlier_fraction)).round() as usize;
            let own: BTreeSet<u32> = planted_q[pn].iter().copied().collect();
            let mut candidates: Vec<usize> = (0..items.len())
                .filter(|&i| !own.contains(&(i as u32)) && copies[i] < cap)
                .collect();
            candidates.shuffle(&mut g.rng);
            candidates.truncate(m);
            let mut oq = Vec::with_capacity(candidates.len());
            let mut od = Vec::with_capacity(candidates.len());
            for qi in candidates {
                copies[qi] += 1;
                let (w, h) = (db[p.donor].width, db[p.donor].height);
                let kp = g.random_keypoint(w, h);
                let desc = g.noisy_copy(&items[qi].desc);
                od.push(db[p.donor].push(kp, desc));
                oq.push(qi as u32);
            }
            plants.push(PlantRecord {
                query_id: query_id.clone(),
                donor_image_id: db_id(p.donor),
                rotation: p.rotation,
                scale: p.scale,
                translation: p.translation,
                planted_query_indices: planted_q[pn].clone(),
                planted_donor_indices: planted_d[pn].clone(),
                outlier_query_indices: oq,
                outlier_donor_indices: od,
                query_object_center: p.center,
                query_object_radius: p.radius,
                geometry_noise_sigma: cfg.geometry_noise_sigma,
                angle_noise_sigma: cfg.angle_noise_sigma,
                scale_noise_sigma: cfg.scale_noise_sigma,
            });
        }

        add_distractors(&mut g, &mut db, &pool, &items, &mut copies)?;

        let rel: BTreeSet<String> = role.iter().map(|&i| db_id(i)).collect();
        let don: BTreeSet<String> = donors.iter().map(|&i| db_id(i)).collect();
        relevance.insert(query_id.clone(), rel);
        if !don.is_empty() {
            donor_flags.insert(query_id.clone(), don);
        }
        let (kps, descs): (Vec<Keypoint>, Vec<Vec<f32>>) = items.into_iter().map(|it| (it.kp, it.desc)).unzip();
        let canvas = Canvas {
            width,
            height,
            keypoints: kps,
            descriptors: descs,
        };
        queries.push(canvas.into_feature_set(query_id, cfg.descriptor_dim)?);
    }

    let database = db
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.into_feature_set(db_id(i), cfg.descriptor_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthOutput {
        database: Dataset::new(database)?,
        queries: Dataset::new(queries)?,
        groundtruth: GroundTruth::new(relevance, donor_flags)?,
        plants,
    })
}

fn add_distractors(
    g: &mut Gen<'_>,
    db: &mut [Canvas],
    pool: &[usize],
    items: &[QueryItem],
    copies: &mut [usize],
) -> Result<()> {
    let dc = g.cfg.distractors.clone();
    let total = dc.scrambled_images + dc.burst_images + dc.clutter_images;
    if total == 0 {
        return Ok(());
    }
    if total > pool.len() {
        return Err(Error::Config(format!(
            "{total} distractor images requested but only {} database images are free",
            pool.len()
        )));
    }
    let targets: Vec<usize> = sample(&mut g.rng, pool.len(), total)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let cap = dc.max_copies_per_feature;
    let (scrambled, rest) = targets.split_at(dc.scrambled_images);
    let (bursts, clutter) = rest.split_at(dc.burst_images);

    for &t in scrambled {
        let n = g.count(dc.scrambled_features);
        let mut avail: Vec<usize> = (0..items.len()).filter(|&i| copies[i] < cap).collect();
        avail.shuffle(&mut g.rng);
        for &qi in avail.iter().take(n) {
            copies[qi] += 1;
            let kp = g.random_keypoint(db[t].width, db[t].height);
            let desc = g.noisy_copy(&items[qi].desc);
            db[t].push(kp, desc);
        }
    }

    for &t in bursts {
        let (w, h) = (db[t].width, db[t].height);
        let center = disc_center(g, w, h, dc.group_radius);
        let turn = g.uniform([0.0, TAU]);
        let n = g.count(dc.burst_features);
        let mut avail: Vec<usize> = (0..items.len()).filter(|&i| copies[i] < cap).collect();
        avail.shuffle(&mut g.rng);
        for &qi in avail.iter().take(n) {
            let reps = dc.burst_copies.min(cap - copies[qi]);
            copies[qi] += reps;
            let src = items[qi].kp;
            for _ in 0..reps {
                let [x, y] = g.point_in_disc(center, dc.group_radius, w, h);
                let kp = Keypoint::new(x, y, src.scale * dc.tiny_scale, src.angle + turn)?;
                let desc = g.noisy_copy(&items[qi].desc);
                db[t].push(kp, desc);
            }
        }
    }

    for &t in clutter {
        let (w, h) = (db[t].width, db[t].height);
        let center = disc_center(g, w, h, dc.group_radius);
        let n = g.count(dc.clutter_features);
        let anchor = items[g.rng.random_range(0..items.len())].kp.location();
        let kps: Vec<Keypoint> = items.iter().map(|it| it.kp).collect();
        let group = nearest_keypoints(&kps, anchor, n, |i| copies[i] < cap);
        for qi in group {
            copies[qi] += 1;
            let [x, y] = g.point_in_disc(center, dc.group_radius, w, h);
            let a = g.uniform([0.0, TAU]);
            let kp = Keypoint::new(x, y, items[qi].kp.scale * dc.tiny_scale, a)?;
            let desc = g.noisy_copy(&items[qi].desc);
            db[t].push(kp, desc);
        }
    }
    Ok(())
}

fn disc_center(g: &mut Gen<'_>, w: f64, h: f64, radius: f64) -> [f64; 2] {
    let mx = radius.min(w / 2.0);
    let my = radius.min(h / 2.0);
    [g.uniform([mx, w - mx]), g.uniform([my, h - my])]
}

/// Where every planted vote for a plant must land, given the centroid `c`
/// used for that database image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleVote {
    pub point: [f64; 2],
    /// Zero for noise-free plants; otherwise a conservative three-sigma bound.
    pub error_radius: f64,
}

/// Closed-form vote location: the query-to-donor similarity applied to `c`.
pub fn oracle_vote_point(plant: &PlantRecord, c: [f64; 2]) -> OracleVote {
    let s = plant.scale;
    let (cr, sr) = (plant.rotation.cos(), plant.rotation.sin());
    let point = [
        s * cr * c[0] - s * sr * c[1] + plant.translation[0],
        s * sr * c[0] + s * cr * c[1] + plant.translation[1],
    ];
    let lever = ((c[0] - plant.query_object_center[0]).powi(2) + (c[1] - plant.query_object_center[1]).powi(2)).sqrt()
        + plant.query_object_radius;
    let error_radius = 3.0 * s * (plant.geometry_noise_sigma * std::f64::consts::SQRT_2
        + (plant.angle_noise_sigma + plant.scale_noise_sigma) * lever);
    OracleVote { point, error_radius }
}

/// Files written by [`write_to_dir`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub db_manifest: PathBuf,
    pub query_manifest: PathBuf,
    pub groundtruth: PathBuf,
    pub plants: PathBuf,
}

/// Writes `db/`, `queries/`, their manifests, `groundtruth.tsv` and
/// `plants.jsonl` under `dir`.
pub fn write_to_dir(out: &SynthOutput, dir: impl AsRef<Path>) -> Result<SynthPaths> {
    let dir = dir.as_ref();
    let paths = SynthPaths {
        db_manifest: dir.join("db_manifest.tsv"),
        query_manifest: dir.join("query_manifest.tsv"),
        groundtruth: dir.join("groundtruth.tsv"),
        plants: dir.join("plants.jsonl"),
    };
    // manifests sit in `dir` and point into the feature directories
    write_dataset(&out.database, dir.join("db"), &paths.db_manifest)?;
    write_dataset(&out.queries, dir.join("queries"), &paths.query_manifest)?;
    write_groundtruth(&out.groundtruth, &paths.groundtruth)?;
    let mut text = String::new();
    for p in &out.plants {
        let line = serde_json::to_string(p).map_err(|e| Error::Format(e.to_string()))?;
        let _ = writeln!(text, "{line}");
    }
    fs::write(&paths.plants, text).map_err(|e| Error::io(&paths.plants, e))?;
    Ok(paths)
}

pub fn read_plants(path: impl AsRef<Path>) -> Result<Vec<PlantRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("plants line {}: {e}", i + 1)))
        })
        .collect()
}
