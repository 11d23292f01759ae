//! Synthetic keypoint data: a fixed skeleton rig animated with smooth
//! sinusoidal joint rotations, forward kinematics in millimeters, and
//! pinhole-projected 2D observations with optional Gaussian pixel noise.
//!
//! With zero noise the generated 2D is exactly the pinhole projection of
//! the generated 3D, so the data forms a closed loop the whole pipeline can
//! be audited against.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{project_pinhole, PinholeCamera};
use crate::data::{FrameRecord, SequenceDataset};
use crate::error::{Error, Result};
use crate::pose::Pose3D;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seqs: usize,
    pub frames: usize,
    pub k: usize,
    /// Standard deviation of the Gaussian pixel noise on 2D observations.
    pub noise_px: f64,
    pub seed: u64,
    pub camera: PinholeCamera,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seqs: 200,
            frames: 64,
            k: 14,
            noise_px: 0.0,
            seed: 7,
            camera: PinholeCamera::facing_forward(1100.0, 1100.0, 500.0, 500.0),
        }
    }
}

/// One rig node: a bone hanging off its parent with a fixed local offset and
/// per-axis rotation amplitude limits (radians).
struct BoneNode {
    name: &'static str,
    parent: Option<usize>,
    offset: [f64; 3],
    max_amp: [f64; 3],
    /// Emitted joint position in the dataset joint order, if any (the
    /// pelvis-center root is virtual in the 14-joint rig).
    emit: Option<usize>,
}

pub struct Skeleton {
    nodes: Vec<BoneNode>,
    pub joint_names: Vec<String>,
    pub k: usize,
}

impl Skeleton {
    /// Joint-index pairs connected by a rigid bone, for bone-length audits.
    pub fn emitted_bones(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (Some(j), Some(p)) = (node.emit, node.parent) else {
                continue;
            };
            if let Some(pj) = self.nodes[p].emit {
                out.push((pj, j));
            }
        }
        out
    }
}

const TORSO: [f64; 3] = [0.12, 0.25, 0.08];
const LIMB_UPPER: [f64; 3] = [0.7, 0.12, 0.12];
const HINGE: [f64; 3] = [0.6, 0.0, 0.0];
const RIGID: [f64; 3] = [0.0, 0.0, 0.0];
const HEAD: [f64; 3] = [0.15, 0.2, 0.1];

/// The standard 14-joint rig (shoulders, elbows, wrists, hips, knees,
/// ankles, head top, neck) or the 17-joint variant that adds pelvis, spine
/// and head, giving the refinement heuristic a real pelvis to track.
pub fn skeleton(k: usize) -> Result<Skeleton> {
    let names: Vec<&'static str> = match k {
        14 => vec![
            "head_top",
            "neck",
            "shoulder_left",
            "shoulder_right",
            "elbow_left",
            "elbow_right",
            "wrist_left",
            "wrist_right",
            "hip_left",
            "hip_right",
            "knee_left",
            "knee_right",
            "ankle_left",
            "ankle_right",
        ],
        17 => vec![
            "pelvis",
            "spine",
            "neck",
            "head",
            "head_top",
            "shoulder_left",
            "shoulder_right",
            "elbow_left",
            "elbow_right",
            "wrist_left",
            "wrist_right",
            "hip_left",
            "hip_right",
            "knee_left",
            "knee_right",
            "ankle_left",
            "ankle_right",
        ],
        other => {
            return Err(Error::InvalidArgument(format!(
                "no synthetic rig for k = {other}; supported: 14, 17"
            )))
        }
    };
    let joint_index = |name: &str| names.iter().position(|n| *n == name);

    // node list: (name, parent name, local offset mm, amplitude limits)
    let spec: Vec<(&'static str, Option<&'static str>, [f64; 3], [f64; 3])> = vec![
        ("pelvis", None, [0.0, 0.0, 0.0], TORSO),
        ("spine", Some("pelvis"), [0.0, 260.0, 0.0], TORSO),
        ("neck", Some("spine"), [0.0, 260.0, 0.0], TORSO),
        ("head", Some("neck"), [0.0, 120.0, 0.0], HEAD),
        ("head_top", Some("head"), [0.0, 110.0, 0.0], RIGID),
        ("shoulder_left", Some("neck"), [170.0, -30.0, 0.0], RIGID),
        ("shoulder_right", Some("neck"), [-170.0, -30.0, 0.0], RIGID),
        ("elbow_left", Some("shoulder_left"), [0.0, -280.0, 0.0], LIMB_UPPER),
        ("elbow_right", Some("shoulder_right"), [0.0, -280.0, 0.0], LIMB_UPPER),
        ("wrist_left", Some("elbow_left"), [0.0, -250.0, 0.0], HINGE),
        ("wrist_right", Some("elbow_right"), [0.0, -250.0, 0.0], HINGE),
        ("hip_left", Some("pelvis"), [100.0, -60.0, 0.0], RIGID),
        ("hip_right", Some("pelvis"), [-100.0, -60.0, 0.0], RIGID),
        ("knee_left", Some("hip_left"), [0.0, -420.0, 0.0], LIMB_UPPER),
        ("knee_right", Some("hip_right"), [0.0, -420.0, 0.0], LIMB_UPPER),
        ("ankle_left", Some("knee_left"), [0.0, -400.0, 0.0], HINGE),
        ("ankle_right", Some("knee_right"), [0.0, -400.0, 0.0], HINGE),
    ];
    // amplitude of a parent node moves everything below it; the rotation
    // belongs to the bone from the parent joint toward this node's children

    let mut nodes = Vec::with_capacity(spec.len());
    let mut index_of = std::collections::HashMap::new();
    for (name, parent, offset, max_amp) in spec {
        let parent_idx = parent.map(|p| index_of[p]);
        index_of.insert(name, nodes.len());
        nodes.push(BoneNode {
            name,
            parent: parent_idx,
            offset,
            max_amp,
            emit: joint_index(name),
        });
    }
    Ok(Skeleton {
        nodes,
        joint_names: names.iter().map(|s| s.to_string()).collect(),
        k,
    })
}

/// One sinusoidal degree of freedom: `a * sin(omega * t + phase)`.
#[derive(Clone, Copy)]
struct Oscillator {
    amp: f64,
    omega: f64,
    phase: f64,
}

impl Oscillator {
    /// Free-running oscillator with its own frequency.
    fn sample(max_amp: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            amp: max_amp * rng.gen_range(0.2..1.0),
            // 0.4..1.6 cycles per 100 frames keeps motion smooth per frame
            omega: std::f64::consts::TAU * rng.gen_range(0.4..1.6) / 100.0,
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Oscillator phase-locked to the sequence's gait cycle: limbs swing at
    /// a shared frequency with left/right sides in antiphase plus a small
    /// per-sequence jitter, like cyclic human motion.
    fn locked(max_amp: f64, gait_omega: f64, base_phase: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            amp: max_amp * rng.gen_range(0.35..1.0),
            omega: gait_omega,
            phase: base_phase + rng.gen_range(-0.3..0.3),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * (self.omega * t + self.phase).sin()
    }
}

struct SequenceMotion {
    node_rot: Vec<[Oscillator; 3]>,
    root_pos: [Oscillator; 3],
    base: [f64; 3],
}

fn sample_motion(skel: &Skeleton, rng: &mut ChaCha8Rng) -> SequenceMotion {
    use std::f64::consts::{PI, TAU};
    let gait_omega = TAU * rng.gen_range(0.6..1.4) / 100.0;
    let gait_phase = rng.gen_range(0.0..TAU);
    // phase offsets within the gait cycle: opposite sides in antiphase,
    // arms counter to the same-side leg
    let side_phase = |name: &str| -> Option<f64> {
        let left = name.ends_with("_left");
        let offset = match () {
            _ if name.starts_with("elbow") || name.starts_with("wrist") => PI,
            _ if name.starts_with("knee") || name.starts_with("ankle") => 0.5 * PI,
            _ => 0.0,
        };
        (name.ends_with("_left") || name.ends_with("_right"))
            .then(|| gait_phase + offset + if left { 0.0 } else { PI })
    };
    let node_rot = skel
        .nodes
        .iter()
        .map(|n| {
            match side_phase(n.name) {
                Some(base) => [
                    // the dominant swing (about x) follows the gait cycle
                    Oscillator::locked(n.max_amp[0], gait_omega, base, rng),
                    Oscillator::sample(n.max_amp[1], rng),
                    Oscillator::sample(n.max_amp[2], rng),
                ],
                None => [
                    Oscillator::sample(n.max_amp[0], rng),
                    Oscillator::sample(n.max_amp[1], rng),
                    Oscillator::sample(n.max_amp[2], rng),
                ],
            }
        })
        .collect();
    let root_pos = [
        Oscillator::locked(200.0, gait_omega, gait_phase - 0.5 * PI, rng),
        Oscillator::sample(60.0, rng),
        Oscillator::sample(150.0, rng),
    ];
    // close camera: strong perspective makes depth genuinely recoverable
    SequenceMotion {
        node_rot,
        root_pos,
        base: [0.0, 150.0, 2400.0],
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn mat_apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn euler_xyz(rx: f64, ry: f64, rz: f64) -> Mat3 {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    let mx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let my = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let mz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&mx, &mat_mul(&my, &mz))
}

/// Forward kinematics for one frame: world position of every rig node.
fn fk_frame(skel: &Skeleton, motion: &SequenceMotion, t: f64, depth_offset: [f64; 3]) -> Vec<[f64; 3]> {
    let mut world_pos: Vec<[f64; 3]> = Vec::with_capacity(skel.nodes.len());
    let mut world_rot: Vec<Mat3> = Vec::with_capacity(skel.nodes.len());
    for (i, node) in skel.nodes.iter().enumerate() {
        let local = euler_xyz(
            motion.node_rot[i][0].at(t),
            motion.node_rot[i][1].at(t),
            motion.node_rot[i][2].at(t),
        );
        match node.parent {
            None => {
                let pos = [
                    motion.base[0] + motion.root_pos[0].at(t) + depth_offset[0],
                    motion.base[1] + motion.root_pos[1].at(t) + depth_offset[1],
                    motion.base[2] + motion.root_pos[2].at(t) + depth_offset[2],
                ];
                world_pos.push(pos);
                world_rot.push(local);
            }
            Some(p) => {
                let pos_off = mat_apply(&world_rot[p], node.offset);
                world_pos.push([
                    world_pos[p][0] + pos_off[0],
                    world_pos[p][1] + pos_off[1],
                    world_pos[p][2] + pos_off[2],
                ]);
                world_rot.push(mat_mul(&world_rot[p], &local));
            }
        }
    }
    world_pos
}

fn emit_pose(skel: &Skeleton, world: &[[f64; 3]]) -> Pose3D {
    let mut coords = vec![0.0; 3 * skel.k];
    for (i, node) in skel.nodes.iter().enumerate() {
        if let Some(j) = node.emit {
            coords[3 * j] = world[i][0];
            coords[3 * j + 1] = world[i][1];
            coords[3 * j + 2] = world[i][2];
        }
    }
    Pose3D::new(coords).expect("fk output is finite")
}

/// Generate a deterministic synthetic dataset. Motion and observation noise
/// come from independent streams of the seed, so datasets that differ only
/// in `noise_px` share bit-identical 3D trajectories.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SequenceDataset> {
    cfg.camera.validate()?;
    if cfg.frames < 1 || cfg.seqs < 1 {
        return Err(Error::InvalidArgument("seqs and frames must be >= 1".into()));
    }
    let skel = skeleton(cfg.k)?;
    let mut rng_motion = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng_noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, cfg.noise_px.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("bad noise sigma: {e}")))?;

    // pushing the subject along the camera's viewing axis resolves
    // behind-camera placements
    let r = &cfg.camera.rotation;
    let view_dir_world = [r[2][0], r[2][1], r[2][2]];

    let mut dataset = SequenceDataset::new(skel.k, skel.joint_names.clone())?;
    for s in 0..cfg.seqs {
        let motion = sample_motion(&skel, &mut rng_motion);
        let mut frames3d: Option<Vec<Pose3D>> = None;
        let mut attempts = 0;
        while frames3d.is_none() {
            let offset = [
                view_dir_world[0] * 500.0 * attempts as f64,
                view_dir_world[1] * 500.0 * attempts as f64,
                view_dir_world[2] * 500.0 * attempts as f64,
            ];
            let candidate: Vec<Pose3D> = (0..cfg.frames)
                .map(|t| emit_pose(&skel, &fk_frame(&skel, &motion, t as f64, offset)))
                .collect();
            let all_visible = candidate
                .iter()
                .all(|p| project_pinhole(p, &cfg.camera).is_ok());
            if all_visible {
                frames3d = Some(candidate);
            } else {
                attempts += 1;
                if attempts >= 100 {
                    return Err(Error::InvalidArgument(format!(
                        "sequence {s}: joints remain behind the camera after 100 depth offsets"
                    )));
                }
            }
        }
        for (t, p3d) in frames3d.expect("set above").into_iter().enumerate() {
            let clean2d = project_pinhole(&p3d, &cfg.camera)?;
            let noisy: Vec<f64> = clean2d
                .as_slice()
                .iter()
                .map(|&v| {
                    if cfg.noise_px > 0.0 {
                        v + noise.sample(&mut rng_noise)
                    } else {
                        v
                    }
                })
                .collect();
            dataset.push_frame(
                FrameRecord {
                    seq_id: format!("s{s}"),
                    t: t as u64,
                    joints2d: crate::pose::Pose2D::new(noisy)?,
                    joints3d: Some(p3d),
                    visibility: None,
                },
                None,
            )?;
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_dataset;
    use tempfile::tempdir;

    fn small_cfg(noise: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            seqs: 3,
            frames: 20,
            k: 14,
            noise_px: noise,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_produces_byte_identical_files() {
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_dataset(&synth_generate(&small_cfg(1.5, 42)).unwrap(), &p1).unwrap();
        save_dataset(&synth_generate(&small_cfg(1.5, 42)).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn zero_noise_matches_pinhole_projection_exactly() {
        let cfg = small_cfg(0.0, 11);
        let ds = synth_generate(&cfg).unwrap();
        for seq in &ds.sequences {
            for f in &seq.frames {
                let clean = project_pinhole(f.joints3d.as_ref().unwrap(), &cfg.camera).unwrap();
                assert_eq!(f.joints2d, clean);
            }
        }
    }

    #[test]
    fn noise_streams_leave_3d_trajectories_identical() {
        let a = synth_generate(&small_cfg(0.0, 5)).unwrap();
        let b = synth_generate(&small_cfg(2.0, 5)).unwrap();
        for (sa, sb) in a.sequences.iter().zip(&b.sequences) {
            for (fa, fb) in sa.frames.iter().zip(&sb.frames) {
                assert_eq!(fa.joints3d, fb.joints3d);
                assert_ne!(fa.joints2d, fb.joints2d);
            }
        }
    }

    #[test]
    fn bone_lengths_constant_across_frames() {
        let ds = synth_generate(&small_cfg(0.0, 13)).unwrap();
        let skel = skeleton(14).unwrap();
        let bones = skel.emitted_bones();
        assert!(!bones.is_empty());
        for seq in &ds.sequences {
            let lengths0: Vec<f64> = bones
                .iter()
                .map(|&(a, b)| {
                    let p = seq.frames[0].joints3d.as_ref().unwrap();
                    let (ja, jb) = (p.joint(a), p.joint(b));
                    ((ja[0] - jb[0]).powi(2) + (ja[1] - jb[1]).powi(2) + (ja[2] - jb[2]).powi(2)).sqrt()
                })
                .collect();
            for f in &seq.frames {
                let p = f.joints3d.as_ref().unwrap();
                for (bi, &(a, b)) in bones.iter().enumerate() {
                    let (ja, jb) = (p.joint(a), p.joint(b));
                    let len = ((ja[0] - jb[0]).powi(2) + (ja[1] - jb[1]).powi(2) + (ja[2] - jb[2]).powi(2)).sqrt();
                    assert!(
                        (len - lengths0[bi]).abs() < 1e-9,
                        "bone {bi} length drifted: {} vs {}",
                        len,
                        lengths0[bi]
                    );
                }
            }
        }
    }

    #[test]
    fn seventeen_joint_rig_has_pelvis() {
        let cfg = SynthConfig { k: 17, seqs: 1, frames: 4, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        assert_eq!(ds.k, 17);
        assert!(ds.joint_names.iter().any(|n| n == "pelvis"));
    }

    #[test]
    fn unsupported_rig_size_is_an_error() {
        let cfg = SynthConfig { k: 9, ..SynthConfig::default() };
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn impossible_camera_errors_after_100_attempts() {
        // camera 60 m past the subject: 100 depth offsets of 500 mm cannot
        // bring the body back in front of it
        let mut cfg = small_cfg(0.0, 3);
        cfg.seqs = 1;
        cfg.camera.translation = [0.0, 0.0, -60_000.0];
        let err = synth_generate(&cfg).unwrap_err();
        assert!(err.to_string().contains("100"), "{err}");
    }

    #[test]
    fn depth_offset_recovers_a_behind_camera_start() {
        // subject starts 2 m behind the camera; a few depth offsets fix it
        let mut cfg = small_cfg(0.0, 3);
        cfg.seqs = 1;
        cfg.camera.translation = [0.0, 0.0, -6_000.0];
        let ds = synth_generate(&cfg).unwrap();
        assert_eq!(ds.sequences[0].frames.len(), cfg.frames);
    }
}
