//! Affine-invariant depth normalization and its inverse, channel replication
//! and averaging for single-channel modalities, and unit normalization for
//! normal maps.

use crate::error::{Error, Result};
use crate::grid::{percentile, Field2D, FieldStack};

/// Percentile anchors of a depth normalization, in scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthNormalization {
    /// 2nd-percentile depth.
    pub d2: f64,
    /// 98th-percentile depth.
    pub d98: f64,
}

impl DepthNormalization {
    pub fn new(d2: f64, d98: f64) -> Result<Self> {
        if !(d98 > d2) {
            return Err(Error::DegenerateDepthRange);
        }
        Ok(Self { d2, d98 })
    }
}

/// Maps depth to `((d - d2) / (d98 - d2) - 0.5) * 2`, anchoring the 2nd and
/// 98th percentiles at -1 and +1. Values outside the anchors exceed the unit
/// range; no clamping is applied.
///
/// Percentiles are computed over valid pixels only. The result is invariant
/// to positive affine transforms of the input.
pub fn normalize_depth(d: &Field2D) -> Result<(Field2D, DepthNormalization)> {
    if d.valid_count() < 2 {
        return Err(Error::NoValidPixels);
    }
    let d2 = percentile(d, 2.0)?;
    let d98 = percentile(d, 98.0)?;
    if d98 == d2 {
        return Err(Error::DegenerateDepthRange);
    }
    let norm = DepthNormalization { d2, d98 };
    let span = d98 - d2;
    let out = d.map(|v| ((v - d2) / span - 0.5) * 2.0)?;
    Ok((out, norm))
}

/// Exact inverse of [`normalize_depth`] for the given anchors.
pub fn denormalize_depth(d_tilde: &Field2D, norm: &DepthNormalization) -> Result<Field2D> {
    let span = norm.d98 - norm.d2;
    d_tilde.map(|v| (v / 2.0 + 0.5) * span + norm.d2)
}

/// Replicates a single-channel field into a 3-channel stack.
pub fn replicate_channels(d: &Field2D) -> FieldStack {
    FieldStack::from_planes(vec![d.clone(), d.clone(), d.clone()]).expect("identical planes")
}

/// Per-pixel arithmetic mean of a 3-channel stack.
pub fn average_channels(s: &FieldStack) -> Result<Field2D> {
    if s.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            got: s.channels(),
        });
    }
    let ab = s.plane(0).zip_map(s.plane(1), |a, b| a + b)?;
    ab.zip_map(s.plane(2), |ab, c| (ab + c) / 3.0)
}

/// Pixels whose vector norm falls below this are treated as degenerate and
/// replaced by the camera-facing normal (0, 0, 1).
pub const DEGENERATE_NORMAL_EPS: f64 = 1e-8;

/// Scales every pixel vector of a 3-channel stack to unit Euclidean length.
/// Returns the normalized stack and the count of degenerate (near-zero)
/// pixels that were replaced by (0, 0, 1).
pub fn normalize_normals(n: &FieldStack) -> Result<(FieldStack, usize)> {
    if n.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            got: n.channels(),
        });
    }
    let (x, y, z) = (n.plane(0), n.plane(1), n.plane(2));
    let len = x.len();
    let mut out = vec![vec![0.0f64; len], vec![0.0f64; len], vec![0.0f64; len]];
    let mut degenerate = 0usize;
    for i in 0..len {
        let (vx, vy, vz) = (x.values()[i], y.values()[i], z.values()[i]);
        let norm = (vx * vx + vy * vy + vz * vz).sqrt();
        if norm < DEGENERATE_NORMAL_EPS {
            if x.is_valid(i) {
                degenerate += 1;
            }
            out[0][i] = 0.0;
            out[1][i] = 0.0;
            out[2][i] = 1.0;
        } else {
            out[0][i] = vx / norm;
            out[1][i] = vy / norm;
            out[2][i] = vz / norm;
        }
    }
    let mask = x.mask().map(<[bool]>::to_vec);
    let planes = out
        .into_iter()
        .map(|values| match &mask {
            Some(m) => Field2D::with_mask(x.height(), x.width(), values, m.clone()),
            None => Field2D::new(x.height(), x.width(), values),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((FieldStack::from_planes(planes)?, degenerate))
}
