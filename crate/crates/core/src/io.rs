//! On-disk formats: binary feature files, text manifests, groundtruth,
//! ranked results and vote-density images.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! 0..8    magic "OS2OSF1\0"
//! 8..12   u32 keypoint count n
//! 12..16  u32 descriptor dim d
//! 16..20  f32 image width
//! 20..24  f32 image height
//! 24..28  u32 reserved, must be 0
//! then n × (f32 x, f32 y, f32 scale, f32 angle)
//! then n·d f32 descriptor values, row-major
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pipeline::{RankedEntry, RankedResult};
use crate::types::{Dataset, FeatureSet, Keypoint};

pub const FEATURE_MAGIC: &[u8; 8] = b"OS2OSF1\0";
pub const FEATURE_HEADER_LEN: usize = 28;

/// Serializes a feature set into the binary feature-file layout.
pub fn encode_feature_set(fs: &FeatureSet) -> Vec<u8> {
    let n = fs.len();
    let d = fs.dim();
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + n * 16 + n * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(fs.width as f32).to_le_bytes());
    out.extend_from_slice(&(fs.height as f32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for kp in &fs.keypoints {
        out.extend_from_slice(&(kp.x as f32).to_le_bytes());
        out.extend_from_slice(&(kp.y as f32).to_le_bytes());
        out.extend_from_slice(&(kp.scale as f32).to_le_bytes());
        out.extend_from_slice(&angle_to_f32(kp.angle).to_le_bytes());
    }
    for v in fs.descriptors() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Narrowing can round an angle just below 2π up to 2π; keep it in range.
fn angle_to_f32(a: f64) -> f32 {
    let v = a as f32;
    if f64::from(v) >= TAU {
        f32::from_bits((TAU as f32).to_bits() - 1)
    } else {
        v
    }
}

/// Parses the binary feature-file layout.
pub fn decode_feature_set(bytes: &[u8], image_id: &str) -> Result<FeatureSet> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::Format(format!(
            "{image_id}: {} bytes is shorter than the {FEATURE_HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..8] != FEATURE_MAGIC {
        return Err(Error::Format(format!("{image_id}: bad feature-file magic")));
    }
    let n = read_u32(bytes, 8) as usize;
    let d = read_u32(bytes, 12) as usize;
    let width = f64::from(read_f32(bytes, 16));
    let height = f64::from(read_f32(bytes, 20));
    if read_u32(bytes, 24) != 0 {
        return Err(Error::Format(format!(
            "{image_id}: reserved header field is not zero"
        )));
    }
    let expected = n
        .checked_mul(16 + d.saturating_mul(4))
        .and_then(|body| body.checked_add(FEATURE_HEADER_LEN));
    match expected {
        Some(len) if len == bytes.len() => {}
        Some(len) if len > bytes.len() => {
            return Err(Error::Format(format!(
                "{image_id}: declares {n} keypoints of dim {d} ({len} bytes) but file has {} bytes",
                bytes.len()
            )))
        }
        Some(len) => {
            return Err(Error::Format(format!(
                "{image_id}: {} trailing bytes after {len}-byte body",
                bytes.len() - len
            )))
        }
        None => return Err(Error::Format(format!("{image_id}: size overflow"))),
    }
    if d == 0 {
        return Err(Error::Format(format!("{image_id}: descriptor dim is zero")));
    }
    let mut keypoints = Vec::with_capacity(n);
    let mut off = FEATURE_HEADER_LEN;
    for i in 0..n {
        let x = f64::from(read_f32(bytes, off));
        let y = f64::from(read_f32(bytes, off + 4));
        let scale = f64::from(read_f32(bytes, off + 8));
        let angle = f64::from(read_f32(bytes, off + 12));
        off += 16;
        let kp = Keypoint::new(x, y, scale, angle)
            .map_err(|e| Error::Validation(format!("{image_id}: keypoint {i}: {e}")))?;
        keypoints.push(kp);
    }
    let descriptors: Vec<f32> = bytes[off..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureSet::new(image_id, width, height, keypoints, descriptors, d)
}

fn read_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn write_feature_file(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_set(fs)).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; the image id is taken from the file stem.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    read_feature_file_as(path, &id)
}

pub fn read_feature_file_as(path: impl AsRef<Path>, image_id: &str) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_set(&bytes, image_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Path as written in the manifest, relative to the manifest's directory.
    pub path: PathBuf,
    pub width: f64,
    pub height: f64,
}

/// The list of images making up a database or query set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Filled in once the referenced feature files have been read.
    pub descriptor_dim: Option<usize>,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }
}

pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line {}: expected 4 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("manifest line {}: bad {what} {s:?}", lineno + 1))
            })
        };
        let entry = ManifestEntry {
            image_id: fields[0].to_string(),
            path: PathBuf::from(fields[1]),
            width: num(fields[2], "width")?,
            height: num(fields[3], "height")?,
        };
        if !seen.insert(entry.image_id.clone()) {
            return Err(Error::Validation(format!(
                "manifest line {}: duplicate image id {}",
                lineno + 1,
                entry.image_id
            )));
        }
        entries.push(entry);
    }
    entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(DatasetManifest {
        base_dir: base_dir.into(),
        entries,
        descriptor_dim: None,
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, base)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for e in &manifest.entries {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}",
            e.image_id,
            e.path.display(),
            e.width,
            e.height
        );
    }
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every feature file named by the manifest, checking that sizes and
/// descriptor dimensions agree.
pub fn load_dataset(manifest: &mut DatasetManifest) -> Result<Dataset> {
    let images = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let fs = read_feature_file_as(manifest.resolve(entry), &entry.image_id)?;
            if (fs.width - entry.width).abs() > 0.5 || (fs.height - entry.height).abs() > 0.5 {
                return Err(Error::Validation(format!(
                    "{}: manifest says {}x{} but feature file says {}x{}",
                    entry.image_id, entry.width, entry.height, fs.width, fs.height
                )));
            }
            Ok(fs)
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset::new(images)?;
    manifest.descriptor_dim = Some(ds.dim());
    Ok(ds)
}

/// Writes each feature set to `dir/features/<id>.bin` and a manifest at
/// `manifest_path` referencing them.
pub fn write_dataset(
    ds: &Dataset,
    dir: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let manifest_path = manifest_path.as_ref();
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for fs in ds.images() {
        let file = feat_dir.join(format!("{}.bin", fs.image_id));
        write_feature_file(fs, &file)?;
        // manifest paths are relative to the manifest's own directory
        let rel = file.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(file.clone());
        entries.push(ManifestEntry {
            image_id: fs.image_id.clone(),
            path: rel,
            width: fs.width,
            height: fs.height,
        });
    }
    let manifest = DatasetManifest {
        base_dir: base,
        entries,
        descriptor_dim: Some(ds.dim()),
    };
    write_manifest(&manifest, manifest_path)?;
    Ok(manifest)
}

/// Relevance judgments per query, with the subset of relevant images that
/// only donate a small object.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub relevance: BTreeMap<String, BTreeSet<String>>,
    pub donor_flags: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn new(
        relevance: BTreeMap<String, BTreeSet<String>>,
        donor_flags: BTreeMap<String, BTreeSet<String>>,
    ) -> Result<Self> {
        for (q, donors) in &donor_flags {
            let relevant = relevance.get(q);
            if let Some(bad) = donors
                .iter()
                .find(|d| !relevant.is_some_and(|r| r.contains(*d)))
            {
                return Err(Error::Validation(format!(
                    "query {q}: donor {bad} is not in the relevant set"
                )));
            }
        }
        Ok(GroundTruth {
            relevance,
            donor_flags,
        })
    }

    pub fn relevant(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.relevance.get(query_id)
    }

    pub fn donors(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.donor_flags.get(query_id)
    }

    /// Checks that every query and relevant id is known.
    pub fn validate_ids(
        &self,
        is_query: impl Fn(&str) -> bool,
        is_db_image: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (q, rel) in &self.relevance {
            if !is_query(q) {
                return Err(Error::Validation(format!("groundtruth names unknown query {q}")));
            }
            if let Some(bad) = rel.iter().find(|id| !is_db_image(id)) {
                return Err(Error::Validation(format!(
                    "groundtruth for {q} names unknown image {bad}"
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_groundtruth(text: &str) -> Result<GroundTruth> {
    let mut relevance: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut donors: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let query = fields[0].to_string();
        let rel = relevance.entry(query.clone()).or_default();
        match fields.as_slice() {
            [_] => {}
            [_, id] => {
                rel.insert(id.to_string());
            }
            [_, id, "donor"] => {
                rel.insert(id.to_string());
                donors.entry(query).or_default().insert(id.to_string());
            }
            _ => {
                return Err(Error::Format(format!(
                    "groundtruth line {}: expected query<TAB>relevant[<TAB>donor]",
                    lineno + 1
                )))
            }
        }
    }
    GroundTruth::new(relevance, donors)
}

pub fn read_groundtruth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_groundtruth(&text)
}

pub fn write_groundtruth(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for (q, rel) in &gt.relevance {
        if rel.is_empty() {
            let _ = writeln!(text, "{q}");
        }
        let donors = gt.donor_flags.get(q);
        for id in rel {
            if donors.is_some_and(|d| d.contains(id)) {
                let _ = writeln!(text, "{q}\t{id}\tdonor");
            } else {
                let _ = writeln!(text, "{q}\t{id}");
            }
        }
    }
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Formats ranked results as `query_id<TAB>rank<TAB>image_id<TAB>score<TAB>num_clusters`.
pub fn format_results(results: &[RankedResult]) -> String {
    let mut text = String::new();
    for r in results {
        for (i, e) in r.ranked.iter().enumerate() {
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}\t{}",
                r.query_id,
                i + 1,
                e.image_id,
                e.score,
                e.num_clusters
            );
        }
    }
    text
}

pub fn write_results(results: &[RankedResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_results(results)).map_err(|e| Error::io(path, e))
}

/// Reads a results file back. Queries keep their first-appearance order and
/// entries are ordered by the rank column.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<RankedResult>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<(usize, RankedEntry)>> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("results line {}: malformed", lineno + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let rank: usize = f[1].parse().map_err(|_| bad())?;
        let entry = RankedEntry {
            image_id: f[2].to_string(),
            score: f[3].parse().map_err(|_| bad())?,
            num_clusters: f[4].parse().map_err(|_| bad())?,
        };
        if !rows.contains_key(f[0]) {
            order.push(f[0].to_string());
        }
        rows.entry(f[0].to_string()).or_default().push((rank, entry));
    }
    Ok(order
        .into_iter()
        .map(|q| {
            let mut entries = rows.remove(&q).unwrap_or_default();
            entries.sort_by_key(|(rank, _)| *rank);
            RankedResult {
                query_id: q,
                ranked: entries.into_iter().map(|(_, e)| e).collect(),
                clusters: None,
                vote_maps: None,
            }
        })
        .collect())
}

/// Encodes a density grid as binary PGM (P5), scaling the maximum to 255.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "grid size mismatch");
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_pgm(width, height, values))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
