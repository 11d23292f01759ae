//! Batch inference over a dataset: normalize, lift each sequence, refine
//! each frame via the self-supervised correction (or regress only), and
//! denormalize back to millimeters. Sequences run in parallel; frames of a
//! sequence stay strictly ordered.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::pose::Pose3D;
use crate::ssc::{refine_frame, RefineConfig, RefineReport, Verdict};

#[derive(Debug, Clone)]
pub struct InferOptions {
    /// Apply the per-frame self-supervised correction; when false the output
    /// is the plain Ψ_C regression under the trained weights.
    pub use_ssc: bool,
    pub refine: RefineConfig,
    /// Reset the temporal state before every frame (the single-frame
    /// ablation; temporal context is discarded).
    pub reset_state_every_frame: bool,
}

#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub seq_id: String,
    pub t: u64,
    pub pose3d_mm: Pose3D,
    pub ssc: Option<RefineReport>,
}

/// Run the full inference path over every sequence of a dataset.
pub fn infer_dataset(
    ckpt: &Checkpoint,
    data: &SequenceDataset,
    opts: &InferOptions,
) -> Result<Vec<FramePrediction>> {
    if data.k != ckpt.meta.k {
        return Err(Error::ShapeMismatch {
            op: "infer",
            lhs: vec![data.k],
            rhs: vec![ckpt.meta.k],
        });
    }
    if opts.use_ssc {
        opts.refine.validate(ckpt.meta.k)?;
    }
    let per_sequence: Vec<Result<Vec<FramePrediction>>> = data
        .sequences
        .par_iter()
        .map(|seq| {
            let normalized = seq
                .frames
                .iter()
                .map(|f| ckpt.stats.normalize_2d(&f.joints2d))
                .collect::<Result<Vec<_>>>()?;
            let lifted = if opts.reset_state_every_frame {
                ckpt.params.lifter.lift_sequence_stateless(&normalized)?
            } else {
                ckpt.params.lifter.lift_sequence(&normalized)?
            };
            let mut out = Vec::with_capacity(seq.frames.len());
            for ((frame, p2d), p3d) in seq.frames.iter().zip(&normalized).zip(&lifted) {
                let (pose_norm, report) = if opts.use_ssc {
                    let (pose, report) =
                        refine_frame(p2d, p3d, &ckpt.params.projector, &ckpt.stats, &opts.refine)?;
                    (pose, Some(report))
                } else {
                    (ckpt.params.projector.regress_3d(p3d)?, None)
                };
                out.push(FramePrediction {
                    seq_id: frame.seq_id.clone(),
                    t: frame.t,
                    pose3d_mm: ckpt.stats.denormalize_3d(&pose_norm)?,
                    ssc: report,
                });
            }
            Ok(out)
        })
        .collect();
    let mut flat = Vec::with_capacity(data.frame_count());
    for seq in per_sequence {
        flat.extend(seq?);
    }
    Ok(flat)
}

#[derive(Serialize, Deserialize)]
struct SscLine {
    verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_after: Option<f64>,
    robust_change_mm: f64,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    seq_id: String,
    t: u64,
    pose3d_mm: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ssc: Option<SscLine>,
}

/// Write predictions as JSON Lines.
pub fn save_predictions(preds: &[FramePrediction], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in preds {
        let line = PredictionLine {
            seq_id: p.seq_id.clone(),
            t: p.t,
            pose3d_mm: p.pose3d_mm.to_joints(),
            ssc: p.ssc.as_ref().map(|r| SscLine {
                verdict: r.verdict,
                loss_before: Some(r.loss_before()).filter(|v| v.is_finite()),
                loss_after: Some(r.loss_after()).filter(|v| v.is_finite()),
                robust_change_mm: r.last_change_mm(),
            }),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("prediction serializes"))?;
    }
    out.flush()?;
    Ok(())
}

/// Load predictions back; only the pose and identity fields are needed for
/// evaluation.
pub fn load_predictions(path: &Path) -> Result<Vec<(String, u64, Pose3D)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine = serde_json::from_str(&line).map_err(|e| Error::DatasetFormat {
            line: Some(i + 1),
            msg: e.to_string(),
        })?;
        out.push((
            parsed.seq_id,
            parsed.t,
            Pose3D::from_joints(&parsed.pose3d_mm).map_err(|e| Error::DatasetFormat {
                line: Some(i + 1),
                msg: e.to_string(),
            })?,
        ));
    }
    if out.is_empty() {
        return Err(Error::DatasetFormat {
            line: None,
            msg: "no predictions in file".into(),
        });
    }
    Ok(out)
}
