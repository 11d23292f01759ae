//! Inference-time self-supervised correction.
//!
//! Per frame, the trained projector pair is cloned and nudged by a few Adam
//! steps to minimize ‖p2d − Ψ_P(Ψ_C(p3d))‖₂², then the corrected 3D pose is
//! read out of Ψ_C. The clones are disposable: the shared weights are never
//! touched. A robust-joint displacement heuristic in millimeter space stops
//! the refinement early when it converges (< ε mm) and discards it entirely
//! when it moves too far (> τ mm), returning the unrefined regression
//! instead. Batchnorm always runs in eval mode here; single frames have no
//! batch statistics.

use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamRegistry;
use crate::pipeline::NormStats;
use crate::pose::{Pose2D, Pose3D};
use crate::projector::{eval_bn, project_graph, regress_graph, ProjectorParams};

/// Refinement hyperparameters. ε and τ are millimeter thresholds on the
/// mean robust-joint displacement per iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub max_iters: usize,
    pub step_size: f64,
    pub eps_mm: f64,
    pub tau_mm: f64,
    /// Joint indices driving the convergence/discard heuristic; resolve
    /// them from joint names with [`crate::data::resolve_robust_joints`].
    pub robust_joints: Vec<usize>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: 2,
            step_size: 1e-2,
            eps_mm: 5.0,
            tau_mm: 20.0,
            robust_joints: Vec::new(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.eps_mm < self.tau_mm) {
            return Err(Error::InvalidArgument(format!(
                "convergence threshold eps ({}) must be below discard threshold tau ({})",
                self.eps_mm, self.tau_mm
            )));
        }
        if self.step_size <= 0.0 {
            return Err(Error::InvalidArgument("step_size must be positive".into()));
        }
        if self.robust_joints.is_empty() {
            return Err(Error::InvalidArgument("robust joint set is empty".into()));
        }
        if let Some(&bad) = self.robust_joints.iter().find(|&&j| j >= joints) {
            return Err(Error::InvalidArgument(format!(
                "robust joint index {bad} out of range for k = {joints}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Refined,
    ConvergedEarly,
    Discarded,
}

/// Diagnostics of one frame's correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineReport {
    /// Projection loss trajectory: initial value, then one entry per
    /// completed iteration (length ≤ max_iters + 1).
    pub losses: Vec<f64>,
    /// Mean robust-joint displacement per iteration, millimeters.
    pub robust_changes_mm: Vec<f64>,
    pub verdict: Verdict,
}

impl RefineReport {
    pub fn loss_before(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn loss_after(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    pub fn last_change_mm(&self) -> f64 {
        self.robust_changes_mm.last().copied().unwrap_or(0.0)
    }
}

/// Mean Euclidean displacement over a joint subset, in the units of the
/// poses given (millimeters for the refinement heuristic).
pub fn robust_joint_change(before: &Pose3D, after: &Pose3D, joints: &[usize]) -> Result<f64> {
    if joints.is_empty() {
        return Err(Error::InvalidArgument("robust joint set is empty".into()));
    }
    if before.joint_count() != after.joint_count() {
        return Err(Error::ShapeMismatch {
            op: "robust_joint_change",
            lhs: vec![before.joint_count()],
            rhs: vec![after.joint_count()],
        });
    }
    let mut total = 0.0;
    for &j in joints {
        if j >= before.joint_count() {
            return Err(Error::InvalidArgument(format!(
                "robust joint index {j} out of range for k = {}",
                before.joint_count()
            )));
        }
        let (a, b) = (before.joint(j), after.joint(j));
        total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    }
    Ok(total / joints.len() as f64)
}

/// One forward pass of the clone pair: Ψ_C output, and the projection loss
/// against the observed 2D pose, with gradients available.
struct PassOutput {
    graph: Graph,
    registry: ParamRegistry,
    pose: Vec<f64>,
    loss_value: f64,
    loss: crate::graph::Value,
}

fn forward_pass(clone: &ProjectorParams, p3d: &Pose3D, p2d: &Pose2D) -> Result<PassOutput> {
    let mut g = Graph::new();
    let mut reg = ParamRegistry::new();
    let vars = clone.bind(&mut g, &mut reg, "", true);
    let x = g.leaf(p3d.to_tensor());
    let target = g.leaf(p2d.to_tensor());
    let (c, q) = {
        let mut bn = eval_bn(clone);
        let c = regress_graph(&mut g, &vars, x, &mut bn)?;
        let q = project_graph(&mut g, &vars, c, &mut bn)?;
        (c, q)
    };
    let loss = g.mse(target, q)?;
    Ok(PassOutput {
        pose: g.value(c).data().to_vec(),
        loss_value: g.value(loss).item(),
        loss,
        graph: g,
        registry: reg,
    })
}

fn mean_robust_displacement_mm(
    before: &[f64],
    after: &[f64],
    joints: &[usize],
    stats: &NormStats,
) -> f64 {
    let b = stats.denormalize_3d_raw(before);
    let a = stats.denormalize_3d_raw(after);
    let mut total = 0.0;
    for &j in joints {
        let d0 = b[3 * j] - a[3 * j];
        let d1 = b[3 * j + 1] - a[3 * j + 1];
        let d2 = b[3 * j + 2] - a[3 * j + 2];
        total += (d0 * d0 + d1 * d1 + d2 * d2).sqrt();
    }
    total / joints.len() as f64
}

/// Refine one frame's 3D estimate against its observed 2D pose.
///
/// `p2d` and `p3d` are in normalized model units; `stats` converts Ψ_C
/// outputs to millimeters for the ε/τ heuristic. The shared `projector` is
/// cloned per frame and left bit-identical. On discard (τ violation or a
/// non-finite loss), the returned pose is the Ψ_C regression under the
/// original weights, independent of step size and iteration count.
pub fn refine_frame(
    p2d: &Pose2D,
    p3d: &Pose3D,
    projector: &ProjectorParams,
    stats: &NormStats,
    cfg: &RefineConfig,
) -> Result<(Pose3D, RefineReport)> {
    cfg.validate(projector.joint_count())?;
    if p3d.joint_count() != projector.joint_count() || p2d.joint_count() != projector.joint_count() {
        return Err(Error::ShapeMismatch {
            op: "refine_frame",
            lhs: vec![p2d.joint_count(), p3d.joint_count()],
            rhs: vec![projector.joint_count()],
        });
    }

    // disposable per-frame clones of the trained pair
    let mut clone = projector.clone();
    let mut adam = AdamState::new(cfg.step_size);

    let mut pass = forward_pass(&clone, p3d, p2d)?;
    // the clone is still bit-identical to the original here, so this pose is
    // exactly the unrefined regression and serves as the discard fallback
    let original_pose = pass.pose.clone();
    let mut report = RefineReport {
        losses: vec![pass.loss_value],
        robust_changes_mm: Vec::new(),
        verdict: Verdict::Refined,
    };

    let discard = |mut report: RefineReport, original_pose: &[f64]| -> Result<(Pose3D, RefineReport)> {
        report.verdict = Verdict::Discarded;
        Ok((Pose3D::new(original_pose.to_vec())?, report))
    };

    if !pass.loss_value.is_finite() {
        report.losses.clear();
        return discard(report, &original_pose);
    }

    let mut current_pose = pass.pose.clone();
    for _ in 0..cfg.max_iters {
        let grads = pass.registry.collect(&pass.graph, &pass.graph.backward(pass.loss)?);
        adam_step(&mut clone, &grads, &mut adam)?;

        let next = forward_pass(&clone, p3d, p2d)?;
        if !next.loss_value.is_finite() || next.pose.iter().any(|v| !v.is_finite()) {
            return discard(report, &original_pose);
        }
        let change = mean_robust_displacement_mm(&current_pose, &next.pose, &cfg.robust_joints, stats);
        report.losses.push(next.loss_value);
        report.robust_changes_mm.push(change);
        current_pose = next.pose.clone();
        pass = next;

        if change > cfg.tau_mm {
            return discard(report, &original_pose);
        }
        if change < cfg.eps_mm {
            report.verdict = Verdict::ConvergedEarly;
            return Ok((Pose3D::new(current_pose)?, report));
        }
    }
    Ok((Pose3D::new(current_pose)?, report))
}
