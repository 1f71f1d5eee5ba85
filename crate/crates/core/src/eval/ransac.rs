//! Seeded RANSAC with a 4-DOF similarity model, kept as an independent
//! reference for the voting verifier. It is never used for ranking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::verify::ImageMatchSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Reprojection distance in database pixels.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 1000,
            inlier_threshold: 3.0,
            seed: 0,
        }
    }
}

/// `p = a·q + t` over complex numbers, where `a = scale·e^(i·rotation)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub a: [f64; 2],
    pub t: [f64; 2],
}

impl Similarity {
    pub fn apply(&self, q: [f64; 2]) -> [f64; 2] {
        let [ar, ai] = self.a;
        [ar * q[0] - ai * q[1] + self.t[0], ai * q[0] + ar * q[1] + self.t[1]]
    }

    pub fn scale(&self) -> f64 {
        self.a[0].hypot(self.a[1])
    }

    pub fn rotation(&self) -> f64 {
        self.a[1].atan2(self.a[0]).rem_euclid(std::f64::consts::TAU)
    }

    /// Exact fit to two correspondences; `None` when the query points coincide.
    fn from_two(q1: [f64; 2], q2: [f64; 2], p1: [f64; 2], p2: [f64; 2]) -> Option<Similarity> {
        let dq = [q1[0] - q2[0], q1[1] - q2[1]];
        let dp = [p1[0] - p2[0], p1[1] - p2[1]];
        let den = dq[0] * dq[0] + dq[1] * dq[1];
        if den < 1e-12 {
            return None;
        }
        // a = dp / dq
        let a = [
            (dp[0] * dq[0] + dp[1] * dq[1]) / den,
            (dp[1] * dq[0] - dp[0] * dq[1]) / den,
        ];
        let t = [
            p1[0] - (a[0] * q1[0] - a[1] * q1[1]),
            p1[1] - (a[1] * q1[0] + a[0] * q1[1]),
        ];
        Some(Similarity { a, t })
    }

    /// Least-squares fit over the given correspondences.
    fn fit(pairs: &[([f64; 2], [f64; 2])]) -> Option<Similarity> {
        let n = pairs.len() as f64;
        let (mut qm, mut pm) = ([0.0; 2], [0.0; 2]);
        for (q, p) in pairs {
            qm = [qm[0] + q[0] / n, qm[1] + q[1] / n];
            pm = [pm[0] + p[0] / n, pm[1] + p[1] / n];
        }
        let (mut num, mut den) = ([0.0; 2], 0.0);
        for (q, p) in pairs {
            let qc = [q[0] - qm[0], q[1] - qm[1]];
            let pc = [p[0] - pm[0], p[1] - pm[1]];
            // pc · conj(qc)
            num[0] += pc[0] * qc[0] + pc[1] * qc[1];
            num[1] += pc[1] * qc[0] - pc[0] * qc[1];
            den += qc[0] * qc[0] + qc[1] * qc[1];
        }
        if den < 1e-12 {
            return None;
        }
        let a = [num[0] / den, num[1] / den];
        let t = [
            pm[0] - (a[0] * qm[0] - a[1] * qm[1]),
            pm[1] - (a[1] * qm[0] + a[0] * qm[1]),
        ];
        Some(Similarity { a, t })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub inlier_count: usize,
    /// Match indices, ascending.
    pub inliers: Vec<usize>,
    pub model: Option<Similarity>,
}

fn inliers_of(model: &Similarity, ims: &ImageMatchSet, threshold: f64) -> Vec<usize> {
    ims.matches
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let v = model.apply(m.query_keypoint.location());
            (v[0] - m.db_keypoint.x).hypot(v[1] - m.db_keypoint.y) <= threshold
        })
        .map(|(i, _)| i)
        .collect()
}

/// Returns the largest consensus set found, refined once by least squares.
pub fn ransac_verify(ims: &ImageMatchSet, cfg: &RansacConfig) -> RansacResult {
    let n = ims.matches.len();
    let none = RansacResult {
        inlier_count: 0,
        inliers: Vec::new(),
        model: None,
    };
    if n < 2 {
        return none;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Similarity, Vec<usize>)> = None;
    for _ in 0..cfg.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (mi, mj) = (&ims.matches[i], &ims.matches[j]);
        let Some(model) = Similarity::from_two(
            mi.query_keypoint.location(),
            mj.query_keypoint.location(),
            mi.db_keypoint.location(),
            mj.db_keypoint.location(),
        ) else {
            continue;
        };
        let inl = inliers_of(&model, ims, cfg.inlier_threshold);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((model, inl));
        }
    }
    let Some((mut model, mut inliers)) = best else {
        return none;
    };
    let pairs: Vec<_> = inliers
        .iter()
        .map(|&i| (ims.matches[i].query_keypoint.location(), ims.matches[i].db_keypoint.location()))
        .collect();
    if let Some(refined) = Similarity::fit(&pairs) {
        let again = inliers_of(&refined, ims, cfg.inlier_threshold);
        if again.len() >= inliers.len() {
            model = refined;
            inliers = again;
        }
    }
    RansacResult {
        inlier_count: inliers.len(),
        inliers,
        model: Some(model),
    }
}
