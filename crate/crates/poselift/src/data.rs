//! Keypoint dataset model and JSON-Lines I/O.
//!
//! A dataset file starts with one header line declaring the joint layout,
//! followed by one frame record per line:
//!
//! ```text
//! {"k":14,"joint_names":[...],"units_2d":"px","units_3d":"mm"}
//! {"seq_id":"s1","t":0,"joints2d":[[u,v],...],"joints3d":[[x,y,z],...],"visibility":[true,...]}
//! ```
//!
//! `joints3d` and `visibility` are optional; a file without `joints3d` loads
//! as a 2D-only dataset. 2D coordinates are pixels, 3D are millimeters.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D};

/// One timestamped keypoint observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub seq_id: String,
    pub t: u64,
    pub joints2d: Pose2D,
    pub joints3d: Option<Pose3D>,
    pub visibility: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub k: usize,
    pub joint_names: Vec<String>,
    pub units_2d: String,
    pub units_3d: String,
    pub sequences: Vec<Sequence>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    k: usize,
    joint_names: Vec<String>,
    units_2d: String,
    units_3d: String,
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    seq_id: String,
    t: u64,
    joints2d: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints3d: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visibility: Option<Vec<bool>>,
}

impl SequenceDataset {
    pub fn new(k: usize, joint_names: Vec<String>) -> Result<Self> {
        if joint_names.len() != k {
            return Err(Error::DatasetFormat {
                line: None,
                msg: format!("{} joint names declared for k = {k}", joint_names.len()),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &joint_names {
            if !seen.insert(name.to_ascii_lowercase()) {
                return Err(Error::DatasetFormat {
                    line: None,
                    msg: format!("duplicate joint name `{name}`"),
                });
            }
        }
        Ok(Self {
            k,
            joint_names,
            units_2d: "px".into(),
            units_3d: "mm".into(),
            sequences: Vec::new(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    /// True when every frame carries a 3D annotation.
    pub fn is_fully_3d(&self) -> bool {
        self.sequences
            .iter()
            .all(|s| s.frames.iter().all(|f| f.joints3d.is_some()))
    }

    /// Append a frame, validating joint counts and time ordering.
    pub fn push_frame(&mut self, frame: FrameRecord, line: Option<usize>) -> Result<()> {
        if frame.joints2d.joint_count() != self.k {
            return Err(Error::DatasetFormat {
                line,
                msg: format!(
                    "frame declares {} 2D joints, dataset k = {}",
                    frame.joints2d.joint_count(),
                    self.k
                ),
            });
        }
        if let Some(p3d) = &frame.joints3d {
            if p3d.joint_count() != self.k {
                return Err(Error::DatasetFormat {
                    line,
                    msg: format!(
                        "frame declares {} 3D joints, dataset k = {}",
                        p3d.joint_count(),
                        self.k
                    ),
                });
            }
        }
        if let Some(vis) = &frame.visibility {
            if vis.len() != self.k {
                return Err(Error::DatasetFormat {
                    line,
                    msg: format!("visibility has {} entries, dataset k = {}", vis.len(), self.k),
                });
            }
        }
        let seq = match self.sequences.iter_mut().find(|s| s.id == frame.seq_id) {
            Some(s) => s,
            None => {
                self.sequences.push(Sequence {
                    id: frame.seq_id.clone(),
                    frames: Vec::new(),
                });
                self.sequences.last_mut().unwrap()
            }
        };
        if let Some(last) = seq.frames.last() {
            if frame.t <= last.t {
                return Err(Error::DatasetFormat {
                    line,
                    msg: format!(
                        "frame index {} does not increase within sequence `{}` (previous {})",
                        frame.t, frame.seq_id, last.t
                    ),
                });
            }
        }
        seq.frames.push(frame);
        Ok(())
    }
}

pub fn save_dataset(dataset: &SequenceDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = HeaderLine {
        k: dataset.k,
        joint_names: dataset.joint_names.clone(),
        units_2d: dataset.units_2d.clone(),
        units_3d: dataset.units_3d.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for seq in &dataset.sequences {
        for f in &seq.frames {
            let line = FrameLine {
                seq_id: f.seq_id.clone(),
                t: f.t,
                joints2d: f.joints2d.to_joints(),
                joints3d: f.joints3d.as_ref().map(|p| p.to_joints()),
                visibility: f.visibility.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("frame serializes"))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<SequenceDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_text = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(Error::DatasetFormat {
                line: None,
                msg: "no sequences (empty file)".into(),
            })
        }
    };
    let header: HeaderLine = serde_json::from_str(&header_text).map_err(|e| Error::DatasetFormat {
        line: Some(1),
        msg: format!("bad header: {e}"),
    })?;
    let mut dataset = SequenceDataset::new(header.k, header.joint_names)?;
    dataset.units_2d = header.units_2d;
    dataset.units_3d = header.units_3d;

    let mut lineno = 1;
    for line in lines {
        lineno += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FrameLine = serde_json::from_str(&line).map_err(|e| Error::DatasetFormat {
            line: Some(lineno),
            msg: e.to_string(),
        })?;
        let frame = FrameRecord {
            seq_id: parsed.seq_id,
            t: parsed.t,
            joints2d: Pose2D::from_joints(&parsed.joints2d).map_err(|e| Error::DatasetFormat {
                line: Some(lineno),
                msg: e.to_string(),
            })?,
            joints3d: match parsed.joints3d {
                Some(j) => Some(Pose3D::from_joints(&j).map_err(|e| Error::DatasetFormat {
                    line: Some(lineno),
                    msg: e.to_string(),
                })?),
                None => None,
            },
            visibility: parsed.visibility,
        };
        dataset.push_frame(frame, Some(lineno))?;
    }
    if dataset.sequences.is_empty() {
        return Err(Error::DatasetFormat {
            line: None,
            msg: "no sequences".into(),
        });
    }
    Ok(dataset)
}

/// The joints whose stability drives the refinement heuristics, most to
/// least preferred.
pub const ROBUST_JOINT_NAMES: [&str; 5] = [
    "pelvis",
    "shoulder_left",
    "shoulder_right",
    "hip_left",
    "hip_right",
];

/// Map the robust-joint names onto this dataset's joint list. Names are
/// matched case-insensitively; missing names are skipped (a 14-joint list
/// has no pelvis, so it falls back to shoulders + hips). Returns the indices
/// plus a note describing the resolution for startup logging.
pub fn resolve_robust_joints(joint_names: &[String]) -> Result<(Vec<usize>, String)> {
    let lower: Vec<String> = joint_names.iter().map(|n| n.to_ascii_lowercase()).collect();
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for name in ROBUST_JOINT_NAMES {
        match lower.iter().position(|n| n == name) {
            Some(i) => found.push((name, i)),
            None => missing.push(name),
        }
    }
    if found.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "none of the robust joints {ROBUST_JOINT_NAMES:?} exist in the joint list {joint_names:?}"
        )));
    }
    let indices: Vec<usize> = found.iter().map(|(_, i)| *i).collect();
    let note = if missing.is_empty() {
        format!(
            "robust joints: {}",
            found.iter().map(|(n, i)| format!("{n}#{i}")).collect::<Vec<_>>().join(", ")
        )
    } else {
        format!(
            "robust joints: {} (missing {}, falling back to the present subset)",
            found.iter().map(|(n, i)| format!("{n}#{i}")).collect::<Vec<_>>().join(", "),
            missing.join(", ")
        )
    };
    Ok((indices, note))
}

/// Pair every prediction frame with its ground-truth frame by (seq_id, t).
pub fn match_frames<'a>(
    pred: &'a [(String, u64, Pose3D)],
    gt: &'a SequenceDataset,
) -> Result<Vec<(&'a str, &'a Pose3D, &'a Pose3D)>> {
    let mut index: HashMap<(&str, u64), &Pose3D> = HashMap::new();
    for seq in &gt.sequences {
        for f in &seq.frames {
            if let Some(p3d) = &f.joints3d {
                index.insert((f.seq_id.as_str(), f.t), p3d);
            }
        }
    }
    let mut out = Vec::with_capacity(pred.len());
    for (seq_id, t, pose) in pred {
        let gt_pose = index.get(&(seq_id.as_str(), *t)).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no 3D ground truth for predicted frame seq `{seq_id}` t = {t}"
            ))
        })?;
        out.push((seq_id.as_str(), pose, *gt_pose));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_dataset(with_3d: bool) -> SequenceDataset {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut ds = SequenceDataset::new(2, names).unwrap();
        for t in 0..3 {
            ds.push_frame(
                FrameRecord {
                    seq_id: "s1".into(),
                    t,
                    joints2d: Pose2D::new(vec![t as f64, 1.0, 2.0, 3.0]).unwrap(),
                    joints3d: with_3d.then(|| {
                        Pose3D::new(vec![0.5 * t as f64, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()
                    }),
                    visibility: Some(vec![true, t % 2 == 0]),
                },
                None,
            )
            .unwrap();
        }
        ds
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = tiny_dataset(true);
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);

        // canonical form: saving the loaded dataset is byte-identical
        let path2 = dir.path().join("d2.jsonl");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_file_reports_no_sequences() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("no sequences"), "{err}");
    }

    #[test]
    fn header_only_file_reports_no_sequences() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        std::fs::write(
            &path,
            "{\"k\":2,\"joint_names\":[\"a\",\"b\"],\"units_2d\":\"px\",\"units_3d\":\"mm\"}\n",
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("no sequences"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"k\":2,\"joint_names\":[\"a\",\"b\"],\"units_2d\":\"px\",\"units_3d\":\"mm\"}\nnot json\n",
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn k_mismatch_rejected_with_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("k.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"k\":2,\"joint_names\":[\"a\",\"b\"],\"units_2d\":\"px\",\"units_3d\":\"mm\"}\n",
                "{\"seq_id\":\"s\",\"t\":0,\"joints2d\":[[1,2]]}\n"
            ),
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("k = 2"), "{err}");
    }

    #[test]
    fn missing_joints3d_loads_as_2d_only() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d2d.jsonl");
        save_dataset(&tiny_dataset(false), &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(!loaded.is_fully_3d());
        assert!(loaded.sequences[0].frames.iter().all(|f| f.joints3d.is_none()));
    }

    #[test]
    fn non_increasing_t_rejected() {
        let mut ds = tiny_dataset(true);
        let err = ds
            .push_frame(
                FrameRecord {
                    seq_id: "s1".into(),
                    t: 1,
                    joints2d: Pose2D::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
                    joints3d: None,
                    visibility: None,
                },
                Some(99),
            )
            .unwrap_err();
        assert!(err.to_string().contains("line 99"), "{err}");
    }

    #[test]
    fn duplicate_joint_names_rejected() {
        let err = SequenceDataset::new(2, vec!["a".into(), "A".into()]).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn robust_joints_prefer_pelvis_then_fall_back() {
        let with_pelvis: Vec<String> = ["pelvis", "shoulder_left", "shoulder_right", "hip_left", "hip_right", "head"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (idx, note) = resolve_robust_joints(&with_pelvis).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert!(!note.contains("missing"));

        let fourteen: Vec<String> = ["head_top", "neck", "shoulder_left", "shoulder_right", "hip_left", "hip_right"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (idx, note) = resolve_robust_joints(&fourteen).unwrap();
        assert_eq!(idx, vec![2, 3, 4, 5]);
        assert!(note.contains("missing pelvis"), "{note}");

        assert!(resolve_robust_joints(&["x".to_string()]).is_err());
    }
}
