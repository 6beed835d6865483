//! Fusion of image and point features.
//!
//! Late fusion (default) concatenates per-point image features with point
//! features and applies a 256-channel MLP. Early fusion instead appends raw
//! RGB to the coordinates before point feature extraction; the point-only
//! baseline skips the image entirely.

use crate::geometry::PointCloud;
use crate::image_features::Image;
use crate::numerics::{Tape, Tensor, Value};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const FUSED_WIDTH: usize = 256;

/// How image information enters the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Coarsest image features concatenated with point features, then MLP.
    Late,
    /// Raw RGB appended to point coordinates before feature extraction.
    Early,
    /// Point cloud only; the image is ignored.
    None,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "late" => Some(FusionMode::Late),
            "early" => Some(FusionMode::Early),
            "none" => Some(FusionMode::None),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Late => "late",
            FusionMode::Early => "early",
            FusionMode::None => "none",
        }
    }
}

/// One or two 256-channel linear+LeakyReLU layers; the first takes the
/// 128+128 concatenation.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub layers: Vec<(Tensor, Tensor)>, // (weight, bias)
}

/// Concatenates the two feature blocks and applies the fusion MLP.
pub fn fuse_features(
    tape: &Tape,
    point_feats: &Tensor,
    image_feats_at_points: &Tensor,
    params: &FusionParams,
) -> Tensor {
    assert_eq!(
        point_feats.shape()[0],
        image_feats_at_points.shape()[0],
        "row count mismatch: {} point rows vs {} image rows",
        point_feats.shape()[0],
        image_feats_at_points.shape()[0]
    );
    assert!(
        matches!(params.layers.len(), 1 | 2),
        "fusion MLP must have one or two layers"
    );
    let mut x = tape.concat_cols(point_feats, image_feats_at_points);
    for (w, b) in &params.layers {
        assert_eq!(
            x.shape()[1],
            w.shape()[0],
            "fusion layer input width {} vs weight rows {}",
            x.shape()[1],
            w.shape()[0]
        );
        x = tape.linear_leaky(&x, w, b, LEAKY_SLOPE);
    }
    x
}

/// Nearest-pixel RGB lookup at full-resolution projections; invalid points
/// get (0, 0, 0).
pub fn rgb_at_projections(image: &Image, pixel_coords: &[[f64; 2]], validity: &[bool]) -> Vec<f64> {
    assert_eq!(pixel_coords.len(), validity.len(), "coords/validity length mismatch");
    let mut rgb = Vec::with_capacity(pixel_coords.len() * 3);
    for (&[u, v], &ok) in pixel_coords.iter().zip(validity) {
        if !ok {
            rgb.extend_from_slice(&[0.0; 3]);
            continue;
        }
        let col = (u.floor() as isize).clamp(0, image.width() as isize - 1) as usize;
        let row = (v.floor() as isize).clamp(0, image.height() as isize - 1) as usize;
        rgb.extend_from_slice(&image.pixel(row, col));
    }
    rgb
}

/// Per-point `[x, y, z, r, g, b]` input for the early-fusion baseline.
/// Color is centered and scaled to the magnitude of the coordinates
/// (tens of meters); raw [0,1] values would be numerically invisible next
/// to them under the shared uniform weight init.
pub const RGB_GAIN: f64 = 20.0;

pub fn early_fuse(cloud: &PointCloud, rgb_at_points: &[f64]) -> Value {
    let n = cloud.len();
    assert_eq!(rgb_at_points.len(), n * 3, "rgb buffer must be N x 3");
    let mut data = Vec::with_capacity(n * 6);
    for i in 0..n {
        data.extend_from_slice(&cloud.point(i));
        data.extend(rgb_at_points[i * 3..(i + 1) * 3].iter().map(|c| (c - 0.5) * RGB_GAIN));
    }
    Value::new(vec![n, 6], data)
}
