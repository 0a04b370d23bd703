//! Training-set augmentation: enriched apex frame positions crossed with
//! small in-plane rotations, 70 variants per sample in the non-degenerate
//! case.
//!
//! Rotation acts on the flow field directly: the sampling grid is rotated
//! about the image center and every sampled 2-vector is co-rotated by the
//! same angle, which is exactly what recomputing flow from rigidly rotated
//! frames would give.

use thiserror::Error;

use crate::datahub::FlowField;

/// Rotation sweep in degrees.
pub const ROTATION_ANGLES: [i32; 7] = [-15, -10, -5, 0, 5, 10, 15];

/// Fractions of the onset->apex span used for enriched positions.
const RISE_FRACTIONS: [f64; 4] = [0.6, 0.7, 0.8, 0.9];
/// Fractions of the apex->offset span used for enriched positions.
const DECAY_FRACTIONS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("frame positions not ordered: onset {onset}, apex {apex}, offset {offset}")]
    Unordered { onset: u32, apex: u32, offset: u32 },
}

/// Onset/apex/offset frame indices of one micro-expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePositions {
    pub onset: u32,
    pub apex: u32,
    pub offset: u32,
}

impl FramePositions {
    pub fn new(onset: u32, apex: u32, offset: u32) -> Result<Self, AugmentError> {
        if onset <= apex && apex <= offset {
            Ok(FramePositions {
                onset,
                apex,
                offset,
            })
        } else {
            Err(AugmentError::Unordered {
                onset,
                apex,
                offset,
            })
        }
    }
}

/// One variant per (apex position, rotation angle) pair.
#[derive(Debug, Clone)]
pub struct AugmentPlan {
    pub apex_positions: Vec<u32>,
    pub angles: Vec<i32>,
    pub variants: Vec<(u32, i32)>,
}

/// Enriched apex positions: four fractions of the rise span plus five of the
/// decay span, rounded to the nearest frame (half away from zero),
/// deduplicated, with the onset frame excluded. Ascending order.
pub fn enriched_apex_positions(pos: &FramePositions) -> Vec<u32> {
    let onset = pos.onset as f64;
    let apex = pos.apex as f64;
    let offset = pos.offset as f64;
    let mut raw: Vec<u32> = RISE_FRACTIONS
        .iter()
        .map(|f| onset + (apex - onset) * f)
        .chain(DECAY_FRACTIONS.iter().map(|f| apex + (offset - apex) * f))
        .map(|x| x.round() as u32)
        .collect();
    raw.sort_unstable();
    raw.dedup();
    raw.retain(|&p| p != pos.onset);
    raw
}

/// The rotation sweep, smallest to largest; includes the unrotated original.
pub fn rotation_angles() -> Vec<i32> {
    ROTATION_ANGLES.to_vec()
}

/// Original apex plus enriched positions, crossed with every angle.
pub fn build_plan(pos: &FramePositions) -> AugmentPlan {
    let mut apex_positions = vec![pos.apex];
    for p in enriched_apex_positions(pos) {
        if p != pos.apex {
            apex_positions.push(p);
        }
    }
    let angles = rotation_angles();
    let variants: Vec<(u32, i32)> = apex_positions
        .iter()
        .flat_map(|&p| angles.iter().map(move |&a| (p, a)))
        .collect();
    AugmentPlan {
        apex_positions,
        angles,
        variants,
    }
}

/// Rotate a flow field about the image center: bilinear resampling of the
/// grid (out-of-bounds reads as zero) plus rotation of each 2-vector by the
/// same angle.
pub fn rotate_flow(flow: &FlowField, angle_deg: f64) -> FlowField {
    if angle_deg == 0.0 {
        return flow.clone();
    }
    let (h, w) = (flow.height(), flow.width());
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let mut out = vec![0.0f32; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // Inverse-map the output pixel through R(-theta).
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let u = bilinear(flow, 0, sx, sy);
            let v = bilinear(flow, 1, sx, sy);
            // Co-rotate the sampled vector by R(theta).
            out[y * w + x] = (cos * u - sin * v) as f32;
            out[h * w + y * w + x] = (sin * u + cos * v) as f32;
        }
    }
    FlowField::from_raw(h, w, out)
}

fn bilinear(flow: &FlowField, channel: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= flow.width() as f64 || yi >= flow.height() as f64 {
            0.0
        } else {
            flow.get(channel, yi as usize, xi as usize) as f64
        }
    };
    let v00 = sample(x0, y0);
    let v10 = sample(x0 + 1.0, y0);
    let v01 = sample(x0, y0 + 1.0);
    let v11 = sample(x0 + 1.0, y0 + 1.0);
    (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
}
