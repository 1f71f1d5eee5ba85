//! Geometric and feature domain types shared by every stage of the engine.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How far (in pixels) a keypoint may sit outside its image before it is
/// rejected rather than clamped onto the border.
pub const BOUNDARY_TOLERANCE: f64 = 1.0;

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::Validation(format!("angle {a} is not finite")));
    }
    let r = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    Ok(if r >= TAU { 0.0 } else { r })
}

/// Location, scale and orientation of one local feature.
///
/// Coordinates are in pixels of the owning image, the scale is the
/// detector's characteristic size and the angle is in radians in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub angle: f64,
}

impl Keypoint {
    /// Builds a keypoint, normalizing the angle and rejecting a non-positive
    /// or non-finite scale.
    pub fn new(x: f64, y: f64, scale: f64, angle: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::Validation(format!(
                "keypoint position ({x}, {y}) is not finite"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Validation(format!(
                "keypoint scale {scale} must be finite and positive"
            )));
        }
        Ok(Keypoint {
            x,
            y,
            scale,
            angle: normalize_angle(angle)?,
        })
    }

    #[inline]
    pub fn location(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// All keypoints and descriptors extracted from one image.
///
/// Descriptors are stored as one row-major `len × dim` matrix; row `i`
/// belongs to `keypoints[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub keypoints: Vec<Keypoint>,
    descriptors: Vec<f32>,
    dim: usize,
}

impl FeatureSet {
    /// Validates and assembles a feature set.
    ///
    /// Keypoints up to [`BOUNDARY_TOLERANCE`] pixels outside the image are
    /// clamped onto the border; anything further out is rejected.
    pub fn new(
        image_id: impl Into<String>,
        width: f64,
        height: f64,
        mut keypoints: Vec<Keypoint>,
        descriptors: Vec<f32>,
        dim: usize,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if image_id.is_empty() || image_id.contains(['\t', '\n', '\r']) {
            return Err(Error::Validation(format!(
                "image id {image_id:?} must be non-empty and free of tabs/newlines"
            )));
        }
        if !(width.is_finite() && width > 0.0 && height.is_finite() && height > 0.0) {
            return Err(Error::Validation(format!(
                "{image_id}: image size {width}x{height} must be positive"
            )));
        }
        if dim == 0 {
            return Err(Error::Validation(format!(
                "{image_id}: descriptor dimension must be positive"
            )));
        }
        if descriptors.len() != keypoints.len() * dim {
            return Err(Error::Validation(format!(
                "{image_id}: {} keypoints but {} descriptor values (dim {dim})",
                keypoints.len(),
                descriptors.len()
            )));
        }
        if let Some(pos) = descriptors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{image_id}: descriptor {} holds a non-finite value",
                pos / dim
            )));
        }
        for (i, kp) in keypoints.iter_mut().enumerate() {
            *kp = Keypoint::new(kp.x, kp.y, kp.scale, kp.angle)
                .map_err(|e| Error::Validation(format!("{image_id}: keypoint {i}: {e}")))?;
            kp.x = clamp_coordinate(kp.x, width).ok_or_else(|| {
                Error::Validation(format!(
                    "{image_id}: keypoint {i} x={} outside [0, {width}]",
                    kp.x
                ))
            })?;
            kp.y = clamp_coordinate(kp.y, height).ok_or_else(|| {
                Error::Validation(format!(
                    "{image_id}: keypoint {i} y={} outside [0, {height}]",
                    kp.y
                ))
            })?;
        }
        Ok(FeatureSet {
            image_id,
            width,
            height,
            keypoints,
            descriptors,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    /// The whole row-major descriptor matrix.
    pub fn descriptors(&self) -> &[f32] {
        &self.descriptors
    }

    pub fn center(&self) -> [f64; 2] {
        [self.width / 2.0, self.height / 2.0]
    }
}

fn clamp_coordinate(v: f64, extent: f64) -> Option<f64> {
    if v < -BOUNDARY_TOLERANCE || v > extent + BOUNDARY_TOLERANCE {
        None
    } else {
        Some(v.clamp(0.0, extent))
    }
}

/// One query-feature to database-feature correspondence.
///
/// `db_image` indexes the image table of the index the match came from;
/// `rank` is 1-based within the query feature's neighbor list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub query_feature_index: u32,
    pub db_image: u32,
    pub db_feature_index: u32,
    pub rank: u32,
    pub affinity: f64,
    pub l2_distance: f64,
}

/// A collection of feature sets sharing one descriptor dimension, kept
/// sorted by image id so that load order never leaks into results.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    images: Vec<FeatureSet>,
    dim: usize,
}

impl Dataset {
    pub fn new(mut images: Vec<FeatureSet>) -> Result<Self> {
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(w) = images.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::Validation(format!(
                "duplicate image id {}",
                w[0].image_id
            )));
        }
        let dim = images.first().map_or(0, |fs| fs.dim());
        if let Some(bad) = images.iter().find(|fs| fs.dim() != dim) {
            return Err(Error::Validation(format!(
                "{} has descriptor dim {} but the dataset uses {dim}",
                bad.image_id,
                bad.dim()
            )));
        }
        Ok(Dataset { images, dim })
    }

    pub fn images(&self) -> &[FeatureSet] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, image_id: &str) -> Option<&FeatureSet> {
        self.position(image_id).map(|i| &self.images[i])
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.images
            .binary_search_by(|fs| fs.image_id.as_str().cmp(image_id))
            .ok()
    }

    pub fn total_features(&self) -> usize {
        self.images.iter().map(FeatureSet::len).sum()
    }
}
