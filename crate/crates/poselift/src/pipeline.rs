//! End-to-end training: max-min normalization, clip decomposition, the
//! mixed 2D/3D objective, and the three-stage schedule (lifter init,
//! projector init, joint fine-tune).


use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::lifter::{lift_clip_graph, LifterParams, LifterVars};
use crate::nn::{sample_joint_mask, BnMode};
use crate::params::{join, HasParams, ParamRegistry};
use crate::pose::{Pose2D, Pose3D};
use crate::projector::{
    eval_bn, project_graph, regress_graph, train_bn, BnFn, ProjectorParams, ProjectorVars,
};
use crate::tensor::Tensor;
use crate::adam::{adam_step, AdamState};

/// Training hyperparameters. Field defaults mirror the reference settings:
/// clip length 8, learning rate 1e-5, joint-dropout probability 0.3, scale
/// augmentation in [0.9, 1.1], two LSTM layers of width 1024.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub clip_len: usize,
    pub lr: f64,
    /// Within each stage the learning rate decays geometrically to
    /// `lr * lr_decay` by the stage's final step; 1.0 keeps it constant.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub stage_a_steps: usize,
    pub stage_b_steps: usize,
    pub stage_c_steps: usize,
    pub lambda_3d: f64,
    pub lambda_init: f64,
    pub lambda_proj: f64,
    pub delta: f64,
    pub aug_scale: [f64; 2],
    pub seed: u64,
    pub hidden_width: usize,
    pub lstm_layers: usize,
    /// 2D-only batches interleaved per 3D batch in stage C (when 2D data exists).
    pub mix_ratio_2d: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_len: 8,
            lr: 1e-5,
            lr_decay: 1.0,
            batch_size: 16,
            stage_a_steps: 1000,
            stage_b_steps: 1000,
            stage_c_steps: 1000,
            lambda_3d: 1.0,
            lambda_init: 1.0,
            lambda_proj: 1.0,
            delta: 0.3,
            aug_scale: [0.9, 1.1],
            seed: 0,
            hidden_width: 1024,
            lstm_layers: 2,
            mix_ratio_2d: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len < 1 {
            return Err(Error::InvalidArgument("clip_len must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::InvalidArgument("lr_decay must be in (0, 1]".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.lambda_3d < 0.0 || self.lambda_init < 0.0 || self.lambda_proj < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidArgument("delta must be in [0, 1]".into()));
        }
        if self.aug_scale[0] > self.aug_scale[1] || self.aug_scale[0] <= 0.0 {
            return Err(Error::InvalidArgument("bad augmentation scale range".into()));
        }
        if self.lstm_layers < 1 || self.hidden_width < 1 {
            return Err(Error::InvalidArgument("model dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-coordinate max-min normalization statistics, computed once from the
/// training split. 2D statistics are over pixels, 3D over millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min2d: Vec<f64>,
    pub max2d: Vec<f64>,
    pub min3d: Vec<f64>,
    pub max3d: Vec<f64>,
}

fn norm_coord(v: f64, min: f64, max: f64) -> f64 {
    if max == min {
        0.0
    } else {
        (v - min) / (max - min)
    }
}

fn denorm_coord(v: f64, min: f64, max: f64) -> f64 {
    if max == min {
        min
    } else {
        v * (max - min) + min
    }
}

impl NormStats {
    /// Scan training datasets for per-coordinate extremes. 2D statistics are
    /// taken over every dataset, 3D statistics over the frames that carry
    /// 3D annotations.
    pub fn from_datasets(datasets: &[&SequenceDataset]) -> Result<Self> {
        let first = datasets
            .first()
            .ok_or_else(|| Error::InvalidArgument("no datasets for normalization".into()))?;
        let k = first.k;
        let (mut min2d, mut max2d) = (vec![f64::INFINITY; 2 * k], vec![f64::NEG_INFINITY; 2 * k]);
        let (mut min3d, mut max3d) = (vec![f64::INFINITY; 3 * k], vec![f64::NEG_INFINITY; 3 * k]);
        let mut saw2d = false;
        let mut saw3d = false;
        for ds in datasets {
            if ds.k != k {
                return Err(Error::ShapeMismatch {
                    op: "norm_stats",
                    lhs: vec![k],
                    rhs: vec![ds.k],
                });
            }
            for seq in &ds.sequences {
                for f in &seq.frames {
                    saw2d = true;
                    for (i, &v) in f.joints2d.as_slice().iter().enumerate() {
                        min2d[i] = min2d[i].min(v);
                        max2d[i] = max2d[i].max(v);
                    }
                    if let Some(p3d) = &f.joints3d {
                        saw3d = true;
                        for (i, &v) in p3d.as_slice().iter().enumerate() {
                            min3d[i] = min3d[i].min(v);
                            max3d[i] = max3d[i].max(v);
                        }
                    }
                }
            }
        }
        if !saw2d || !saw3d {
            return Err(Error::InvalidArgument(
                "normalization needs at least one frame with 2D and one with 3D annotations".into(),
            ));
        }
        Ok(Self {
            min2d,
            max2d,
            min3d,
            max3d,
        })
    }

    pub fn normalize_2d(&self, p: &Pose2D) -> Result<Pose2D> {
        self.check(p.as_slice().len(), self.min2d.len(), "normalize_2d")?;
        Pose2D::new(
            p.as_slice()
                .iter()
                .enumerate()
                .map(|(i, &v)| norm_coord(v, self.min2d[i], self.max2d[i]))
                .collect(),
        )
    }

    pub fn denormalize_2d(&self, p: &Pose2D) -> Result<Pose2D> {
        self.check(p.as_slice().len(), self.min2d.len(), "denormalize_2d")?;
        Pose2D::new(
            p.as_slice()
                .iter()
                .enumerate()
                .map(|(i, &v)| denorm_coord(v, self.min2d[i], self.max2d[i]))
                .collect(),
        )
    }

    pub fn normalize_3d(&self, p: &Pose3D) -> Result<Pose3D> {
        self.check(p.as_slice().len(), self.min3d.len(), "normalize_3d")?;
        Pose3D::new(
            p.as_slice()
                .iter()
                .enumerate()
                .map(|(i, &v)| norm_coord(v, self.min3d[i], self.max3d[i]))
                .collect(),
        )
    }

    pub fn denormalize_3d(&self, p: &Pose3D) -> Result<Pose3D> {
        self.check(p.as_slice().len(), self.min3d.len(), "denormalize_3d")?;
        Pose3D::new(
            p.as_slice()
                .iter()
                .enumerate()
                .map(|(i, &v)| denorm_coord(v, self.min3d[i], self.max3d[i]))
                .collect(),
        )
    }

    /// Denormalize a raw 3D coordinate vector without pose validation;
    /// used on not-yet-validated network outputs.
    pub fn denormalize_3d_raw(&self, coords: &[f64]) -> Vec<f64> {
        coords
            .iter()
            .enumerate()
            .map(|(i, &v)| denorm_coord(v, self.min3d[i], self.max3d[i]))
            .collect()
    }

    fn check(&self, got: usize, want: usize, op: &'static str) -> Result<()> {
        if got != want {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![got],
                rhs: vec![want],
            });
        }
        Ok(())
    }
}

/// Split a sequence into consecutive non-overlapping clips of exactly `n`
/// frames; a trailing remainder shorter than `n` is dropped.
pub fn make_clips<T: Clone>(seq: &[T], n: usize) -> Result<Vec<Vec<T>>> {
    if n < 1 {
        return Err(Error::InvalidArgument("clip length must be >= 1".into()));
    }
    Ok(seq.chunks_exact(n).map(|c| c.to_vec()).collect())
}

/// All trainable weights of the model: the lifter (encoder + LSTM stack +
/// readout) and the projector pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub lifter: LifterParams,
    pub projector: ProjectorParams,
}

impl ParamSet {
    pub fn xavier(joints: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        Self {
            lifter: LifterParams::xavier(joints, hidden, layers, rng),
            projector: ProjectorParams::xavier(joints, hidden, rng),
        }
    }

    pub fn zeros(joints: usize, hidden: usize, layers: usize) -> Self {
        Self {
            lifter: LifterParams::zeros(joints, hidden, layers),
            projector: ProjectorParams::zeros(joints, hidden),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.lifter.joint_count()
    }

    pub fn bind(
        &self,
        g: &mut Graph,
        reg: &mut ParamRegistry,
        train_lifter: bool,
        train_projector: bool,
    ) -> (LifterVars, ProjectorVars) {
        (
            self.lifter.bind(g, reg, "lifter", train_lifter),
            self.projector.bind(g, reg, "projector", train_projector),
        )
    }
}

impl HasParams for ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        self.lifter.visit(&join(prefix, "lifter"), f);
        self.projector.visit(&join(prefix, "projector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.lifter.visit_mut(&join(prefix, "lifter"), f);
        self.projector.visit_mut(&join(prefix, "projector"), f);
    }
}

/// Adapter exposing only the parameters a stage actually trains, so the
/// optimizer sees exactly the keys the registry produced.
struct TrainableView<'a> {
    lifter: Option<&'a mut LifterParams>,
    projector: Option<&'a mut ProjectorParams>,
}

impl HasParams for TrainableView<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        if let Some(l) = &self.lifter {
            l.visit(&join(prefix, "lifter"), f);
        }
        if let Some(p) = &self.projector {
            p.visit(&join(prefix, "projector"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        if let Some(l) = &mut self.lifter {
            l.visit_mut(&join(prefix, "lifter"), f);
        }
        if let Some(p) = &mut self.projector {
            p.visit_mut(&join(prefix, "projector"), f);
        }
    }
}

/// One frame in normalized model units.
#[derive(Debug, Clone)]
pub struct NormalizedFrame {
    pub p2d: Pose2D,
    pub gt3d: Option<Pose3D>,
}

/// A clip of normalized frames; annotation must be all-3D or all-2D.
#[derive(Debug, Clone)]
pub struct NormalizedClip {
    pub frames: Vec<NormalizedFrame>,
}

impl NormalizedClip {
    pub fn is_3d(&self) -> Result<bool> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty clip".into()))?
            .gt3d
            .is_some();
        if self.frames.iter().any(|f| f.gt3d.is_some() != first) {
            return Err(Error::InvalidArgument(
                "mixed 2D/3D annotation within one clip".into(),
            ));
        }
        Ok(first)
    }
}

/// Which loss terms a graph build should include (zero-weight terms are
/// skipped entirely so they contribute neither value nor side effects).
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_3d: f64,
    pub lambda_init: f64,
    pub lambda_proj: f64,
}

/// Batched clip tensors ready for a graph build: per-frame stacked inputs
/// plus optional per-frame 3D targets.
struct PreparedBatch {
    frames2d: Vec<Tensor>,
    gt3d: Option<Vec<Tensor>>,
    clip_count: usize,
}

impl PreparedBatch {
    fn from_clips(clips: &[&NormalizedClip]) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let n = first.frames.len();
        let is_3d = first.is_3d()?;
        for c in clips {
            if c.frames.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "prepare_batch",
                    lhs: vec![n],
                    rhs: vec![c.frames.len()],
                });
            }
            if c.is_3d()? != is_3d {
                return Err(Error::InvalidArgument(
                    "mixed 2D/3D annotation within one batch".into(),
                ));
            }
        }
        let mut frames2d = Vec::with_capacity(n);
        let mut gt3d = is_3d.then(|| Vec::with_capacity(n));
        for t in 0..n {
            let rows2d: Vec<Tensor> = clips.iter().map(|c| c.frames[t].p2d.to_tensor()).collect();
            frames2d.push(Tensor::from_rows(&rows2d)?);
            if let Some(gt) = &mut gt3d {
                let rows3d: Vec<Tensor> = clips
                    .iter()
                    .map(|c| c.frames[t].gt3d.as_ref().expect("validated 3D clip").to_tensor())
                    .collect();
                gt.push(Tensor::from_rows(&rows3d)?);
            }
        }
        Ok(Self {
            frames2d,
            gt3d,
            clip_count: clips.len(),
        })
    }

    fn total_rows(&self) -> usize {
        self.clip_count * self.frames2d.len()
    }
}

/// Expand per-row joint keep masks into a `[rows, 3K]` 0/1 tensor.
fn mask_tensor(masks: &[Vec<bool>], joints: usize) -> Result<Tensor> {
    let rows: Vec<Tensor> = masks
        .iter()
        .map(|keep| {
            let mut row = Vec::with_capacity(joints * 3);
            for &k in keep {
                let v = if k { 1.0 } else { 0.0 };
                row.extend_from_slice(&[v, v, v]);
            }
            Tensor::vector(row)
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Assemble the full training objective for one batch of clips on a graph.
///
/// 3D batches:  λ_3d·Σ_t‖p_t − gt_t‖² + λ_init·(init loss on dropped poses)
///              + λ_proj·Σ_t‖p2d_t − Ψ_P(Ψ_C(p_t))‖²
/// 2D batches:  the λ_proj term only; the 3D terms are treated as zero.
#[allow(clippy::too_many_arguments)]
fn batch_loss_graph(
    g: &mut Graph,
    batch: &PreparedBatch,
    lifter_vars: &LifterVars,
    proj_vars: &ProjectorVars,
    weights: LossWeights,
    keep_masks: Option<&[Vec<bool>]>,
    joints: usize,
    bn: &mut BnFn,
) -> Result<Value> {
    let frame_values: Vec<Value> = batch.frames2d.iter().map(|t| g.leaf(t.clone())).collect();
    let p3d_frames = lift_clip_graph(g, &frame_values, lifter_vars, Some(batch.clip_count))?;
    let p3d_stack = g.concat_rows(&p3d_frames)?;
    let p2d_stack = g.concat_rows(&frame_values)?;

    let mut terms: Vec<Value> = Vec::new();
    if let Some(gt3d) = &batch.gt3d {
        let gt_values: Vec<Value> = gt3d.iter().map(|t| g.leaf(t.clone())).collect();
        let gt_stack = g.concat_rows(&gt_values)?;
        if weights.lambda_3d > 0.0 {
            let l3d = g.mse(p3d_stack, gt_stack)?;
            terms.push(g.scale(l3d, weights.lambda_3d));
        }
        if weights.lambda_init > 0.0 {
            let masks = keep_masks.ok_or_else(|| {
                Error::InvalidArgument("init loss requires dropout masks".into())
            })?;
            if masks.len() != batch.total_rows() {
                return Err(Error::ShapeMismatch {
                    op: "batch_loss_graph",
                    lhs: vec![masks.len()],
                    rhs: vec![batch.total_rows()],
                });
            }
            let mask = g.leaf(mask_tensor(masks, joints)?);
            let dropped = g.hadamard(p3d_stack, mask)?;
            let c_drop = regress_graph(g, proj_vars, dropped, bn)?;
            let l_init3 = g.mse(c_drop, gt_stack)?;
            let q_drop = project_graph(g, proj_vars, c_drop, bn)?;
            let l_init2 = g.mse(q_drop, p2d_stack)?;
            let l_init = g.add(l_init3, l_init2)?;
            terms.push(g.scale(l_init, weights.lambda_init));
        }
    }
    if weights.lambda_proj > 0.0 {
        let c_clean = regress_graph(g, proj_vars, p3d_stack, bn)?;
        let q_clean = project_graph(g, proj_vars, c_clean, bn)?;
        let l_proj = g.mse(q_clean, p2d_stack)?;
        terms.push(g.scale(l_proj, weights.lambda_proj));
    }

    match terms.split_first() {
        None => Ok(g.leaf(Tensor::scalar(0.0))),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

/// The mixed objective for one clip, with explicit dropout masks (one per
/// frame). Train-mode batchnorm; the lifter runs but only the loss value is
/// returned.
pub fn mixed_batch_loss_masked(
    model: &mut ParamSet,
    clip: &NormalizedClip,
    weights: LossWeights,
    keep_masks: Option<&[Vec<bool>]>,
    mode: BnMode,
) -> Result<f64> {
    let joints = model.joint_count();
    let mut g = Graph::new();
    let mut reg = ParamRegistry::new();
    let (lv, pv) = model.bind(&mut g, &mut reg, false, false);
    let batch = PreparedBatch::from_clips(&[clip])?;
    let loss = match mode {
        BnMode::Train => {
            let mut bn = train_bn(&mut model.projector);
            batch_loss_graph(&mut g, &batch, &lv, &pv, weights, keep_masks, joints, &mut bn)?
        }
        BnMode::Eval => {
            let projector = &model.projector;
            let mut bn = eval_bn(projector);
            batch_loss_graph(&mut g, &batch, &lv, &pv, weights, keep_masks, joints, &mut bn)?
        }
    };
    Ok(g.value(loss).item())
}

/// The mixed objective for one clip: λ-weighted 3D sequence, projector-init
/// and reprojection-consistency terms for 3D clips, reprojection only for
/// 2D clips. Dropout masks are sampled from `rng` with probability `delta`.
pub fn mixed_batch_loss(
    model: &mut ParamSet,
    clip: &NormalizedClip,
    weights: LossWeights,
    delta: f64,
    rng: &mut ChaCha8Rng,
    mode: BnMode,
) -> Result<f64> {
    let joints = model.joint_count();
    let masks = if clip.is_3d()? && weights.lambda_init > 0.0 {
        Some(
            (0..clip.frames.len())
                .map(|_| sample_joint_mask(joints, delta, rng))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    mixed_batch_loss_masked(model, clip, weights, masks.as_deref(), mode)
}

/// Raw clip of dataset frames (pixel/mm units) plus its annotation kind.
#[derive(Debug, Clone)]
struct RawClip {
    frames2d: Vec<Pose2D>,
    frames3d: Option<Vec<Pose3D>>,
}

fn collect_raw_clips(ds: &SequenceDataset, n: usize, need_3d: bool) -> Result<Vec<RawClip>> {
    let mut out = Vec::new();
    for seq in &ds.sequences {
        for clip in make_clips(&seq.frames, n)? {
            let has3d = clip.iter().all(|f| f.joints3d.is_some());
            let any3d = clip.iter().any(|f| f.joints3d.is_some());
            if any3d && !has3d {
                return Err(Error::InvalidArgument(format!(
                    "sequence `{}` mixes annotated and unannotated frames within one clip",
                    seq.id
                )));
            }
            if need_3d && !has3d {
                return Err(Error::InvalidArgument(format!(
                    "sequence `{}` lacks 3D annotations required for the 3D training set",
                    seq.id
                )));
            }
            out.push(RawClip {
                frames2d: clip.iter().map(|f| f.joints2d.clone()).collect(),
                frames3d: has3d.then(|| {
                    clip.iter()
                        .map(|f| f.joints3d.clone().expect("checked"))
                        .collect()
                }),
            });
        }
    }
    Ok(out)
}

/// Scale-augment (same factor on 2D and 3D) and normalize one raw clip.
fn augment_and_normalize(
    clip: &RawClip,
    scale: f64,
    stats: &NormStats,
) -> Result<NormalizedClip> {
    let mut frames = Vec::with_capacity(clip.frames2d.len());
    for (t, p2d) in clip.frames2d.iter().enumerate() {
        let scaled2d = Pose2D::new(p2d.as_slice().iter().map(|&v| v * scale).collect())?;
        let gt3d = match &clip.frames3d {
            Some(f3) => {
                let scaled3d = Pose3D::new(f3[t].as_slice().iter().map(|&v| v * scale).collect())?;
                Some(stats.normalize_3d(&scaled3d)?)
            }
            None => None,
        };
        frames.push(NormalizedFrame {
            p2d: stats.normalize_2d(&scaled2d)?,
            gt3d,
        });
    }
    Ok(NormalizedClip { frames })
}

/// Progress callback: (stage name, step index, loss).
pub type ProgressFn<'a> = dyn FnMut(&'static str, usize, f64) + 'a;

/// Epoch-shuffled clip sampler. When the batch covers the whole pool the
/// order is fixed, which makes small-dataset runs true full-batch descent.
struct ClipSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl ClipSampler {
    fn new(pool_len: usize, batch_size: usize) -> Self {
        Self {
            order: (0..pool_len).collect(),
            pos: 0,
            batch: batch_size.min(pool_len),
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.batch == self.order.len() {
            return self.order.clone();
        }
        if self.pos + self.batch > self.order.len() {
            use rand::seq::SliceRandom;
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

fn run_stage(
    stage: &'static str,
    steps: usize,
    model: &mut ParamSet,
    cfg: &TrainConfig,
    stats: &NormStats,
    clips3d: &[RawClip],
    clips2d: &[RawClip],
    weights: LossWeights,
    train_lifter: bool,
    train_projector: bool,
    rng: &mut ChaCha8Rng,
    progress: &mut ProgressFn,
) -> Result<()> {
    let mut adam = AdamState::new(cfg.lr);
    let joints = model.joint_count();
    let cycle = 1 + if clips2d.is_empty() { 0 } else { cfg.mix_ratio_2d };
    let mut sampler3d = ClipSampler::new(clips3d.len(), cfg.batch_size);
    let mut sampler2d = ClipSampler::new(clips2d.len().max(1), cfg.batch_size);
    for step in 0..steps {
        if cfg.lr_decay < 1.0 && steps > 1 {
            adam.lr = cfg.lr * cfg.lr_decay.powf(step as f64 / (steps - 1) as f64);
        }
        let use_2d = !clips2d.is_empty() && stage == "C" && step % cycle != 0;
        let pool = if use_2d { clips2d } else { clips3d };
        let sampler = if use_2d { &mut sampler2d } else { &mut sampler3d };

        // deterministic batch assembly: indices, scales, then masks
        let indices = sampler.next(rng);
        let scales: Vec<f64> = (0..indices.len())
            .map(|_| rng.gen_range(cfg.aug_scale[0]..=cfg.aug_scale[1]))
            .collect();
        let clips: Vec<NormalizedClip> = indices
            .iter()
            .zip(&scales)
            .map(|(&i, &s)| augment_and_normalize(&pool[i], s, stats))
            .collect::<Result<Vec<_>>>()?;
        let clip_refs: Vec<&NormalizedClip> = clips.iter().collect();
        let batch = PreparedBatch::from_clips(&clip_refs)?;

        let masks = if !use_2d && weights.lambda_init > 0.0 {
            Some(
                (0..batch.total_rows())
                    .map(|_| sample_joint_mask(joints, cfg.delta, rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };

        let mut g = Graph::new();
        let mut reg = ParamRegistry::new();
        let (lv, pv) = model.bind(&mut g, &mut reg, train_lifter, train_projector);
        let loss = {
            let mut bn = train_bn(&mut model.projector);
            batch_loss_graph(&mut g, &batch, &lv, &pv, weights, masks.as_deref(), joints, &mut bn)?
        };
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence { stage, step });
        }
        let grads = reg.collect(&g, &g.backward(loss)?);
        let mut view = TrainableView {
            lifter: train_lifter.then_some(&mut model.lifter),
            projector: train_projector.then_some(&mut model.projector),
        };
        adam_step(&mut view, &grads, &mut adam)?;
        progress(stage, step, loss_value);
    }
    Ok(())
}

/// Stage-wise training:
///
/// A. train the lifter on 3D clips (3D sequence loss only);
/// B. freeze the lifter, train the projector pair on the init objective
///    with joint dropout;
/// C. unfreeze everything and minimize the mixed objective over interleaved
///    3D and 2D batches.
///
/// Returns the final parameters (optimizer state discarded) and the
/// normalization statistics, which together form the checkpoint.
pub fn train(
    data3d: &SequenceDataset,
    data2d: Option<&SequenceDataset>,
    cfg: &TrainConfig,
    progress: &mut ProgressFn,
) -> Result<(ParamSet, NormStats)> {
    cfg.validate()?;
    if data3d.sequences.is_empty() {
        return Err(Error::InvalidArgument("3D training dataset is empty".into()));
    }
    let mut sources: Vec<&SequenceDataset> = vec![data3d];
    if let Some(d2) = data2d {
        sources.push(d2);
    }
    let stats = NormStats::from_datasets(&sources)?;

    let clips3d = collect_raw_clips(data3d, cfg.clip_len, true)?;
    if clips3d.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no 3D clips: every sequence is shorter than clip_len = {}",
            cfg.clip_len
        )));
    }
    let clips2d = match data2d {
        Some(d2) => collect_raw_clips(d2, cfg.clip_len, false)?,
        None => Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ParamSet::xavier(data3d.k, cfg.hidden_width, cfg.lstm_layers, &mut rng);

    run_stage(
        "A",
        cfg.stage_a_steps,
        &mut model,
        cfg,
        &stats,
        &clips3d,
        &[],
        LossWeights { lambda_3d: 1.0, lambda_init: 0.0, lambda_proj: 0.0 },
        true,
        false,
        &mut rng,
        progress,
    )?;
    run_stage(
        "B",
        cfg.stage_b_steps,
        &mut model,
        cfg,
        &stats,
        &clips3d,
        &[],
        LossWeights { lambda_3d: 0.0, lambda_init: 1.0, lambda_proj: 0.0 },
        false,
        true,
        &mut rng,
        progress,
    )?;
    run_stage(
        "C",
        cfg.stage_c_steps,
        &mut model,
        cfg,
        &stats,
        &clips3d,
        &clips2d,
        LossWeights {
            lambda_3d: cfg.lambda_3d,
            lambda_init: cfg.lambda_init,
            lambda_proj: cfg.lambda_proj,
        },
        true,
        true,
        &mut rng,
        progress,
    )?;

    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FrameRecord;

    fn stats_2x() -> NormStats {
        // 2 joints: 2D range [0, 10] per coordinate, 3D range [-5, 5]
        NormStats {
            min2d: vec![0.0; 4],
            max2d: vec![10.0; 4],
            min3d: vec![-5.0; 6],
            max3d: vec![5.0; 6],
        }
    }

    #[test]
    fn normalize_extremes_map_to_unit_interval() {
        let s = stats_2x();
        let at_min = Pose2D::new(vec![0.0; 4]).unwrap();
        let at_max = Pose2D::new(vec![10.0; 4]).unwrap();
        assert_eq!(s.normalize_2d(&at_min).unwrap().as_slice(), &[0.0; 4]);
        assert_eq!(s.normalize_2d(&at_max).unwrap().as_slice(), &[1.0; 4]);
        let at_min3 = Pose3D::new(vec![-5.0; 6]).unwrap();
        let at_max3 = Pose3D::new(vec![5.0; 6]).unwrap();
        assert_eq!(s.normalize_3d(&at_min3).unwrap().as_slice(), &[0.0; 6]);
        assert_eq!(s.normalize_3d(&at_max3).unwrap().as_slice(), &[1.0; 6]);
    }

    #[test]
    fn normalize_roundtrip_within_1e9_relative() {
        let s = stats_2x();
        let p = Pose3D::new(vec![-4.2, 0.0, 3.3, 1.1, -0.7, 4.9]).unwrap();
        let back = s.denormalize_3d(&s.normalize_3d(&p).unwrap()).unwrap();
        for (a, b) in p.as_slice().iter().zip(back.as_slice()) {
            let rel = (a - b).abs() / a.abs().max(1.0);
            assert!(rel < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_coordinate_maps_to_zero_and_back_to_min() {
        let mut s = stats_2x();
        s.min2d[1] = 7.0;
        s.max2d[1] = 7.0;
        let p = Pose2D::new(vec![3.0, 7.0, 5.0, 2.0]).unwrap();
        let n = s.normalize_2d(&p).unwrap();
        assert_eq!(n.as_slice()[1], 0.0);
        let back = s.denormalize_2d(&n).unwrap();
        assert_eq!(back.as_slice()[1], 7.0);
    }

    #[test]
    fn make_clips_examples() {
        let seq: Vec<u32> = (0..104).collect();
        assert_eq!(make_clips(&seq, 8).unwrap().len(), 13);

        let seq: Vec<u32> = (0..10).collect();
        let clips = make_clips(&seq, 4).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[1], vec![4, 5, 6, 7]); // 8, 9 dropped

        let seq: Vec<u32> = (0..6).collect();
        let clips = make_clips(&seq, 6).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0], seq);

        assert!(make_clips(&seq, 0).is_err());
        assert!(make_clips(&seq, 7).unwrap().is_empty());
    }

    fn tiny_model(k: usize) -> ParamSet {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        ParamSet::xavier(k, 6, 2, &mut rng)
    }

    fn random_clip(k: usize, n: usize, with_3d: bool, seed: u64) -> NormalizedClip {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NormalizedClip {
            frames: (0..n)
                .map(|_| NormalizedFrame {
                    p2d: Pose2D::new((0..2 * k).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
                    gt3d: with_3d.then(|| {
                        Pose3D::new((0..3 * k).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
                    }),
                })
                .collect(),
        }
    }

    #[test]
    fn two_d_only_clip_with_zero_proj_weight_has_zero_loss() {
        let mut model = tiny_model(3);
        let clip = random_clip(3, 4, false, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = mixed_batch_loss(
            &mut model,
            &clip,
            LossWeights { lambda_3d: 1.0, lambda_init: 1.0, lambda_proj: 0.0 },
            0.3,
            &mut rng,
            BnMode::Train,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn perfect_model_on_consistent_data_has_zero_loss() {
        // all-zero model: p3d = 0, psi_c = 0, psi_p = 0; data all zeros
        let mut model = ParamSet::zeros(2, 4, 2);
        let clip = NormalizedClip {
            frames: (0..3)
                .map(|_| NormalizedFrame {
                    p2d: Pose2D::zeros(2),
                    gt3d: Some(Pose3D::zeros(2)),
                })
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let loss = mixed_batch_loss(
            &mut model,
            &clip,
            LossWeights { lambda_3d: 1.0, lambda_init: 1.0, lambda_proj: 1.0 },
            0.3,
            &mut rng,
            BnMode::Train,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn mixed_loss_matches_per_term_oracles() {
        let base = tiny_model(3);
        let clip = random_clip(3, 4, true, 11);
        let masks: Vec<Vec<bool>> = (0..4).map(|i| vec![i % 2 == 0, true, i % 3 != 0]).collect();
        let (l3, li, lp) = (0.7, 1.3, 2.1);

        // per-term oracles: each weight alone on a fresh model clone
        let term = |w3: f64, wi: f64, wp: f64| -> f64 {
            let mut m = base.clone();
            mixed_batch_loss_masked(
                &mut m,
                &clip,
                LossWeights { lambda_3d: w3, lambda_init: wi, lambda_proj: wp },
                Some(&masks),
                BnMode::Train,
            )
            .unwrap()
        };
        let want = term(l3, 0.0, 0.0) + term(0.0, li, 0.0) + term(0.0, 0.0, lp);

        let mut model = base.clone();
        let got = mixed_batch_loss_masked(
            &mut model,
            &clip,
            LossWeights { lambda_3d: l3, lambda_init: li, lambda_proj: lp },
            Some(&masks),
            BnMode::Train,
        )
        .unwrap();
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn mixed_annotation_clip_is_rejected() {
        let mut model = tiny_model(2);
        let mut clip = random_clip(2, 3, true, 13);
        clip.frames[1].gt3d = None;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = mixed_batch_loss(
            &mut model,
            &clip,
            LossWeights { lambda_3d: 1.0, lambda_init: 1.0, lambda_proj: 1.0 },
            0.0,
            &mut rng,
            BnMode::Train,
        )
        .unwrap_err();
        assert!(err.to_string().contains("mixed"), "{err}");
    }

    #[test]
    fn two_d_only_clips_contribute_no_gradient_outside_proj_term() {
        // with lambda_proj = 0, a 2D-only batch must leave every gradient at
        // exactly zero: no 3D term may leak
        let model = tiny_model(2);
        let clip = random_clip(2, 3, false, 17);
        let mut g = Graph::new();
        let mut reg = ParamRegistry::new();
        let (lv, pv) = model.bind(&mut g, &mut reg, true, true);
        let batch = PreparedBatch::from_clips(&[&clip]).unwrap();
        let projector = &model.projector;
        let mut bn = eval_bn(projector);
        let loss = batch_loss_graph(
            &mut g,
            &batch,
            &lv,
            &pv,
            LossWeights { lambda_3d: 1.0, lambda_init: 1.0, lambda_proj: 0.0 },
            None,
            2,
            &mut bn,
        )
        .unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        let grads = reg.collect(&g, &g.backward(loss).unwrap());
        for (name, grad) in grads {
            assert!(grad.data().iter().all(|&v| v == 0.0), "nonzero grad for {name}");
        }
    }

    fn synthetic_linear_dataset(seqs: usize, frames: usize, k: usize, seed: u64) -> SequenceDataset {
        use rand_chacha::rand_core::SeedableRng;
        // 3D is an affine function of smooth 2D trajectories, so the lifter
        // can drive the sequence loss toward zero
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..k).map(|i| format!("j{i}")).collect();
        let mut ds = SequenceDataset::new(k, names).unwrap();
        let a: Vec<f64> = (0..3 * k).map(|_| rng.gen_range(-0.8..0.8)).collect();
        for s in 0..seqs {
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq: f64 = rng.gen_range(0.02..0.1);
            for t in 0..frames {
                let p2d: Vec<f64> = (0..2 * k)
                    .map(|i| {
                        100.0
                            + 40.0
                                * ((freq * t as f64 + phase + i as f64 * 0.35).sin())
                    })
                    .collect();
                let p3d: Vec<f64> = (0..3 * k)
                    .map(|i| {
                        let src = &p2d[(i * 2 / 3) % (2 * k)];
                        1000.0 + a[i] * src * 4.0
                    })
                    .collect();
                ds.push_frame(
                    FrameRecord {
                        seq_id: format!("s{s}"),
                        t: t as u64,
                        joints2d: Pose2D::new(p2d).unwrap(),
                        joints3d: Some(Pose3D::new(p3d).unwrap()),
                        visibility: None,
                    },
                    None,
                )
                .unwrap();
            }
        }
        ds
    }

    fn fast_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            clip_len: 8,
            lr: 2e-3,
            batch_size: 8,
            stage_a_steps: 60,
            stage_b_steps: 60,
            stage_c_steps: 30,
            hidden_width: 16,
            lstm_layers: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_a_reduces_sequence_loss_on_linear_data() {
        // 50 clips of linear synthetic data; stage A alone must cut the
        // sequence loss below 10% of its starting value
        let ds = synthetic_linear_dataset(5, 80, 3, 99); // 5 seqs * 10 clips
        let cfg = TrainConfig {
            stage_a_steps: 2000,
            stage_b_steps: 0,
            stage_c_steps: 0,
            lr: 2e-3,
            batch_size: 8,
            hidden_width: 16,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut first = None;
        let mut last = 0.0;
        let (_, _) = train(&ds, None, &cfg, &mut |stage, _, loss| {
            if stage == "A" {
                first.get_or_insert(loss);
                last = loss;
            }
        })
        .unwrap();
        let first = first.unwrap();
        assert!(
            last < 0.1 * first,
            "stage A loss {last} did not reach 10% of initial {first}"
        );
    }

    #[test]
    fn stage_b_strictly_decreases_with_full_batch() {
        // full-batch stage B (batch >= clip count), delta = 0: the init loss
        // must strictly decrease over the first 100 steps
        let ds = synthetic_linear_dataset(2, 40, 2, 7); // 10 clips
        let cfg = TrainConfig {
            stage_a_steps: 50,
            stage_b_steps: 100,
            stage_c_steps: 0,
            lr: 1e-3,
            batch_size: 16,
            hidden_width: 12,
            delta: 0.0,
            aug_scale: [1.0, 1.0],
            seed: 11,
            ..TrainConfig::default()
        };
        let mut losses = Vec::new();
        train(&ds, None, &cfg, &mut |stage, _, loss| {
            if stage == "B" {
                losses.push(loss);
            }
        })
        .unwrap();
        assert_eq!(losses.len(), 100);
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "stage B loss not strictly decreasing: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let ds = synthetic_linear_dataset(3, 24, 2, 21);
        let cfg = fast_cfg(8);
        let mut noop = |_: &'static str, _: usize, _: f64| {};
        let (m1, s1) = train(&ds, None, &cfg, &mut noop).unwrap();
        let (m2, s2) = train(&ds, None, &cfg, &mut noop).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(m1.checksum(), m2.checksum());
        assert_eq!(m1, m2);
    }

    #[test]
    fn stage_b_never_mutates_lifter() {
        let ds = synthetic_linear_dataset(2, 24, 2, 31);
        let cfg = TrainConfig {
            stage_a_steps: 10,
            stage_b_steps: 25,
            stage_c_steps: 0,
            ..fast_cfg(3)
        };
        // checksum the lifter as soon as stage B begins, compare at the end
        let mut lifter_sum_entering_b: Option<u64> = None;
        let model_holder: std::cell::RefCell<Option<u64>> = std::cell::RefCell::new(None);
        let _ = model_holder; // placeholder: checksums done after train below

        // train twice: once stopping after A, once through B; lifter must match
        let cfg_a_only = TrainConfig { stage_b_steps: 0, ..cfg.clone() };
        let mut noop = |_: &'static str, _: usize, _: f64| {};
        let (model_a, _) = train(&ds, None, &cfg_a_only, &mut noop).unwrap();
        let (model_ab, _) = train(&ds, None, &cfg, &mut noop).unwrap();
        lifter_sum_entering_b.get_or_insert(model_a.lifter.checksum());
        assert_eq!(model_a.lifter.checksum(), model_ab.lifter.checksum());
        assert_ne!(model_a.projector.checksum(), model_ab.projector.checksum());
    }

    #[test]
    fn training_on_empty_3d_data_fails() {
        let ds = SequenceDataset::new(2, vec!["a".into(), "b".into()]).unwrap();
        let mut noop = |_: &'static str, _: usize, _: f64| {};
        assert!(train(&ds, None, &TrainConfig::default(), &mut noop).is_err());
    }

    #[test]
    fn default_config_serializes_reference_values() {
        let cfg = TrainConfig::default();
        let json: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        assert_eq!(json["delta"], 0.3);
        assert_eq!(json["lr"], 1e-5);
        assert_eq!(json["lstm_layers"], 2);
        assert_eq!(json["clip_len"], 8);
        assert_eq!(json["aug_scale"][0], 0.9);
        assert_eq!(json["aug_scale"][1], 1.1);
    }
}
