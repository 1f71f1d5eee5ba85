//! Single-file index persistence.
//!
//! Layout, little-endian, version 1:
//!
//! ```text
//! "OS2OSIX1"
//! u32 kind (0 = flat, 1 = ivf-pq)   u32 dim
//! u32 ivf_cells   u32 pq_subquantizers   u32 pq_bits   u32 flags (bit 0: raw lists)
//! u32 image count, then per image:
//!     u32 id length, id bytes (UTF-8), f32 width, f32 height,
//!     u32 keypoint count, keypoint count × (f32 x, f32 y, f32 scale, f32 angle)
//! flat:   rows × dim f32 descriptors, rows in image order
//! ivf-pq: ivf_cells × dim f32 coarse centroids
//!         pq_subquantizers × 256 × (dim / pq_subquantizers) f32 codebooks
//!         per cell: u32 length, length × u32 row,
//!                   then length × pq_subquantizers u8 codes
//!                   (or length × dim f32 raw vectors when bit 0 of flags is set)
//! ```
//!
//! Any layout change must bump the magic's version digit.

use std::fs;
use std::path::Path;

use super::{Backend, FlatIndex, ImageTable, Index, InvertedList, IvfPqIndex, ProductQuantizer};
use crate::error::{Error, Result};
use crate::index::pq::CODEBOOK_SIZE;
use crate::types::Keypoint;

pub const INDEX_MAGIC: &[u8; 8] = b"OS2OSIX1";

pub fn write_index(index: &Index) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(INDEX_MAGIC);
    let (kind, cells, m, flags) = match &index.backend {
        Backend::Flat(_) => (0u32, 0u32, 0u32, 0u32),
        Backend::IvfPq(i) => (
            1,
            i.lists.len() as u32,
            i.pq.subquantizers() as u32,
            u32::from(i.bypass),
        ),
    };
    let pq_bits = if kind == 1 { 8u32 } else { 0 };
    for v in [kind, index.dim() as u32, cells, m, pq_bits, flags] {
        put_u32(&mut w, v);
    }
    let t = &index.images;
    put_u32(&mut w, t.len() as u32);
    for ((id, size), kps) in t.ids.iter().zip(&t.sizes).zip(&t.keypoints) {
        put_u32(&mut w, id.len() as u32);
        w.extend_from_slice(id.as_bytes());
        put_f32(&mut w, size[0] as f32);
        put_f32(&mut w, size[1] as f32);
        put_u32(&mut w, kps.len() as u32);
        for kp in kps {
            for v in [kp.x, kp.y, kp.scale] {
                put_f32(&mut w, v as f32);
            }
            let a = kp.angle as f32;
            let a = if f64::from(a) >= std::f64::consts::TAU { 0.0 } else { a };
            put_f32(&mut w, a);
        }
    }
    match &index.backend {
        Backend::Flat(f) => f.descriptors.iter().for_each(|&v| put_f32(&mut w, v)),
        Backend::IvfPq(i) => {
            i.coarse.iter().for_each(|&v| put_f32(&mut w, v));
            i.pq.codebooks().iter().for_each(|&v| put_f32(&mut w, v));
            for list in &i.lists {
                put_u32(&mut w, list.rows.len() as u32);
                list.rows.iter().for_each(|&r| put_u32(&mut w, r));
                if i.bypass {
                    list.raw.iter().for_each(|&v| put_f32(&mut w, v));
                } else {
                    w.extend_from_slice(&list.codes);
                }
            }
        }
    }
    w
}

pub fn read_index(bytes: &[u8]) -> Result<Index> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != INDEX_MAGIC {
        return Err(Error::Format("bad index magic".into()));
    }
    let kind = r.u32()?;
    let dim = r.u32()? as usize;
    let cells = r.u32()? as usize;
    let m = r.u32()? as usize;
    let _pq_bits = r.u32()?;
    let flags = r.u32()?;
    if dim == 0 {
        return Err(Error::Format("index descriptor dim is zero".into()));
    }

    let n_images = r.u32()? as usize;
    let mut ids = Vec::with_capacity(n_images);
    let mut sizes = Vec::with_capacity(n_images);
    let mut keypoints = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("index image id is not UTF-8".into()))?
            .to_string();
        let size = [f64::from(r.f32()?), f64::from(r.f32()?)];
        let n = r.u32()? as usize;
        let mut kps = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let (x, y, s, a) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
            kps.push(Keypoint::new(x.into(), y.into(), s.into(), a.into())?);
        }
        ids.push(id);
        sizes.push(size);
        keypoints.push(kps);
    }
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Format("index image ids are not strictly sorted".into()));
    }
    let images = ImageTable::new(ids, sizes, keypoints);
    let rows = images.rows();

    let backend = match kind {
        0 => Backend::Flat(FlatIndex {
            dim,
            descriptors: r.f32s(rows * dim)?,
        }),
        1 => {
            if m == 0 || !dim.is_multiple_of(m) || cells == 0 {
                return Err(Error::Format("inconsistent IVF-PQ parameters".into()));
            }
            let bypass = flags & 1 != 0;
            let coarse = r.f32s(cells * dim)?;
            let pq = ProductQuantizer::from_parts(dim, m, r.f32s(CODEBOOK_SIZE * dim)?);
            let mut lists = Vec::with_capacity(cells);
            let mut seen = 0usize;
            for _ in 0..cells {
                let len = r.u32()? as usize;
                let mut list = InvertedList::default();
                for _ in 0..len {
                    let row = r.u32()?;
                    if row as usize >= rows {
                        return Err(Error::Format(format!("inverted list row {row} out of range")));
                    }
                    list.rows.push(row);
                }
                if bypass {
                    list.raw = r.f32s(len * dim)?;
                } else {
                    list.codes = r.take(len * m)?.to_vec();
                }
                seen += len;
                lists.push(list);
            }
            if seen != rows {
                return Err(Error::Format(format!(
                    "inverted lists hold {seen} rows but {rows} keypoints are indexed"
                )));
            }
            Backend::IvfPq(IvfPqIndex {
                dim,
                coarse,
                pq,
                lists,
                bypass,
            })
        }
        other => return Err(Error::Format(format!("unknown index kind {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after index payload".into()));
    }
    Ok(Index { images, backend })
}

pub fn save_index(index: &Index, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_index(index)).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: impl AsRef<Path>) -> Result<Index> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_index(&bytes)
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(w: &mut Vec<u8>, v: f32) {
    w.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("index file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}
