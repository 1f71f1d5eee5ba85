//! Seeded Lloyd's k-means used for the coarse quantizer and the PQ
//! sub-codebooks.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::distance::squared_l2;

/// Clusters `data` (row-major, `dim` columns) into `k` centroids.
///
/// Initial centroids are `k` distinct rows drawn from `rng`. A cluster that
/// ends an assignment step empty is reseeded with the row that currently
/// lies farthest from its own centroid.
pub fn train<R: Rng>(data: &[f32], dim: usize, k: usize, iterations: usize, rng: &mut R) -> Vec<f32> {
    let n = data.len() / dim;
    assert!(k >= 1 && k <= n, "k-means needs 1 <= k <= n (k={k}, n={n})");
    let mut centroids = Vec::with_capacity(k * dim);
    let mut picks = sample(rng, n, k).into_vec();
    picks.sort_unstable();
    for &i in &picks {
        centroids.extend_from_slice(&data[i * dim..(i + 1) * dim]);
    }

    let mut assignment = vec![(0u32, 0f32); n];
    for _ in 0..iterations {
        assign(data, dim, &centroids, &mut assignment);

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (row, &(c, _)) in data.chunks_exact(dim).zip(&assignment) {
            let c = c as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *s += f64::from(v);
            }
        }

        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *dst = (s * inv) as f32;
                }
                continue;
            }
            // empty: reseed from the farthest not-yet-used point
            let far = assignment
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("n >= k guarantees a candidate");
            taken[far] = true;
            assignment[far].1 = 0.0;
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
        }
    }
    centroids
}

/// Index of the closest centroid (lowest index on ties) and its squared distance.
pub fn nearest(v: &[f32], centroids: &[f32], dim: usize) -> (u32, f32) {
    let mut best = (0u32, f32::INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(v, cent);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

fn assign(data: &[f32], dim: usize, centroids: &[f32], out: &mut [(u32, f32)]) {
    data.par_chunks_exact(dim)
        .zip(out.par_iter_mut())
        .for_each(|(row, slot)| *slot = nearest(row, centroids, dim));
}
