//! 3D pose error: mean per-joint Euclidean distance in millimeters, up to
//! translation. Each predicted frame is translated so its alignment anchor
//! (centroid, or a chosen root joint) coincides with the ground truth's
//! before measuring; rotation and scale are never corrected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Align {
    Centroid,
    /// Translate so the given joint coincides exactly.
    Root(usize),
}

fn frame_errors(pred: &Pose3D, gt: &Pose3D, align: Align) -> Result<Vec<f64>> {
    if pred.joint_count() != gt.joint_count() {
        return Err(Error::ShapeMismatch {
            op: "mpjpe",
            lhs: vec![pred.joint_count()],
            rhs: vec![gt.joint_count()],
        });
    }
    let offset = match align {
        Align::Centroid => {
            let (cp, cg) = (pred.centroid(), gt.centroid());
            [cg[0] - cp[0], cg[1] - cp[1], cg[2] - cp[2]]
        }
        Align::Root(j) => {
            if j >= pred.joint_count() {
                return Err(Error::InvalidArgument(format!(
                    "root joint {j} out of range for k = {}",
                    pred.joint_count()
                )));
            }
            let (rp, rg) = (pred.joint(j), gt.joint(j));
            [rg[0] - rp[0], rg[1] - rp[1], rg[2] - rp[2]]
        }
    };
    Ok((0..pred.joint_count())
        .map(|j| {
            let (p, g) = (pred.joint(j), gt.joint(j));
            ((p[0] + offset[0] - g[0]).powi(2)
                + (p[1] + offset[1] - g[1]).powi(2)
                + (p[2] + offset[2] - g[2]).powi(2))
            .sqrt()
        })
        .collect())
}

/// Mean per-joint position error over aligned frames, pooled over every
/// (frame, joint) pair. Inputs are millimeter-space poses.
pub fn mpjpe(pred: &[Pose3D], gt: &[Pose3D], align: Align) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "mpjpe",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("mpjpe over zero frames".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for e in frame_errors(p, g, align)? {
            total += e;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
