//! Product quantization with asymmetric distance computation.

use rand::Rng;

use super::distance::squared_l2;
use super::kmeans;

/// Centroids per sub-quantizer; codes are one byte each.
pub const CODEBOOK_SIZE: usize = 256;

/// `m` independent codebooks, each quantizing a contiguous `dim / m` slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    dim: usize,
    m: usize,
    /// `m × 256 × dsub`, row-major.
    codebooks: Vec<f32>,
}

impl ProductQuantizer {
    /// Trains each sub-codebook with k-means on its slice of `data`.
    ///
    /// With fewer than 256 training rows the codebook holds one centroid per
    /// row and the unused slots repeat the last centroid; the encoder picks
    /// the lowest index on ties so those slots are never emitted.
    pub fn train<R: Rng>(data: &[f32], dim: usize, m: usize, iterations: usize, rng: &mut R) -> Self {
        assert!(m > 0 && dim.is_multiple_of(m), "m must divide dim");
        let n = data.len() / dim;
        let dsub = dim / m;
        let k = CODEBOOK_SIZE.min(n);
        let mut codebooks = Vec::with_capacity(m * CODEBOOK_SIZE * dsub);
        let mut slice = Vec::with_capacity(n * dsub);
        for s in 0..m {
            slice.clear();
            for row in data.chunks_exact(dim) {
                slice.extend_from_slice(&row[s * dsub..(s + 1) * dsub]);
            }
            let mut book = kmeans::train(&slice, dsub, k, iterations, rng);
            let last = book[(k - 1) * dsub..].to_vec();
            for _ in k..CODEBOOK_SIZE {
                book.extend_from_slice(&last);
            }
            codebooks.extend_from_slice(&book);
        }
        ProductQuantizer { dim, m, codebooks }
    }

    pub fn from_parts(dim: usize, m: usize, codebooks: Vec<f32>) -> Self {
        assert_eq!(codebooks.len(), dim * CODEBOOK_SIZE, "codebook size mismatch");
        ProductQuantizer { dim, m, codebooks }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subquantizers(&self) -> usize {
        self.m
    }

    pub fn codebooks(&self) -> &[f32] {
        &self.codebooks
    }

    fn dsub(&self) -> usize {
        self.dim / self.m
    }

    fn book(&self, s: usize) -> &[f32] {
        let len = CODEBOOK_SIZE * self.dsub();
        &self.codebooks[s * len..(s + 1) * len]
    }

    pub fn encode(&self, v: &[f32], out: &mut Vec<u8>) {
        let dsub = self.dsub();
        for s in 0..self.m {
            let (code, _) = kmeans::nearest(&v[s * dsub..(s + 1) * dsub], self.book(s), dsub);
            out.push(code as u8);
        }
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        let dsub = self.dsub();
        let mut out = Vec::with_capacity(self.dim);
        for (s, &c) in code.iter().enumerate() {
            let c = c as usize;
            out.extend_from_slice(&self.book(s)[c * dsub..(c + 1) * dsub]);
        }
        out
    }

    /// Per-query lookup table: entry `s·256 + c` is the squared distance from
    /// the query's `s`-th slice to centroid `c` of codebook `s`.
    pub fn distance_table(&self, v: &[f32]) -> Vec<f32> {
        let dsub = self.dsub();
        let mut table = Vec::with_capacity(self.m * CODEBOOK_SIZE);
        for s in 0..self.m {
            let q = &v[s * dsub..(s + 1) * dsub];
            table.extend(self.book(s).chunks_exact(dsub).map(|c| squared_l2(q, c)));
        }
        table
    }

    #[inline]
    pub fn asymmetric_distance(table: &[f32], code: &[u8]) -> f32 {
        code.iter()
            .enumerate()
            .map(|(s, &c)| table[s * CODEBOOK_SIZE + c as usize])
            .sum()
    }
}
