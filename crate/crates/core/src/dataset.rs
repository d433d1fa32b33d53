//! JSON-Lines pose datasets and atomic file output.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{project, CameraIntrinsics, PosePair};
use crate::error::{Error, Result};
use crate::posegen::GeneratedSequence;
use crate::skeleton::{bones_of, AngleMatrix, Pose2D, Pose3D, SkeletonTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Gt,
    Generated,
}

/// One frame. `joints3d` are camera coordinates in mm, `joints2d` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub frame_id: u64,
    pub sequence_id: u64,
    pub action: String,
    pub joints3d: Vec<[f64; 3]>,
    pub joints2d: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bone_lengths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angles: Option<Vec<[f64; 3]>>,
    pub source: Source,
    /// Digest of the skeleton the record was written for.
    pub topology: String,
}

impl DatasetRecord {
    pub fn pose3d(&self) -> Result<Pose3D> {
        Pose3D::new(self.joints3d.iter().map(|j| Vector3::from(*j)).collect())
    }

    pub fn pose2d(&self) -> Result<Pose2D> {
        Pose2D::new(self.joints2d.iter().map(|j| Vector2::from(*j)).collect())
    }

    /// Network training pair: projected input and root-relative target.
    pub fn pair(&self, topo: &SkeletonTopology) -> Result<PosePair> {
        Ok(PosePair {
            input: self.pose2d()?,
            target: self.pose3d()?.root_relative(topo.root()),
        })
    }

    pub fn validate(&self, topo: &SkeletonTopology) -> Result<()> {
        let digest = topo.digest();
        if self.topology != digest {
            return Err(Error::TopologyMismatch(format!(
                "record written for {}, expected {}",
                self.topology, digest
            )));
        }
        topo.check_joints("record joints3d", self.joints3d.len())?;
        topo.check_joints("record joints2d", self.joints2d.len())?;
        let pose = self.pose3d()?;
        self.pose2d()?;
        if let Some(l) = &self.bone_lengths {
            topo.check_bones("record bone_lengths", l.len())?;
            if self.source == Source::Generated {
                for (b, (v, &len)) in bones_of(&pose, topo)?.iter().zip(l).enumerate() {
                    if (v.norm() - len).abs() > 1e-6 * len.abs().max(1.0) {
                        return Err(Error::InvalidValue(format!(
                            "bone {b} is {} mm but bone_lengths says {len}",
                            v.norm()
                        )));
                    }
                }
            }
        }
        if let Some(a) = &self.angles {
            topo.check_bones("record angles", a.len())?;
            AngleMatrix::new(a.clone())?;
        }
        Ok(())
    }
}

/// Records for a ground-truth style pose list; 2D by projection.
pub fn records_from_poses(
    poses: &[(Pose3D, String)],
    sequence_ids: &[u64],
    cam: &CameraIntrinsics,
    topo: &SkeletonTopology,
    source: Source,
) -> Result<Vec<DatasetRecord>> {
    let digest = topo.digest();
    poses
        .iter()
        .zip(sequence_ids)
        .enumerate()
        .map(|(i, ((pose, action), &seq))| {
            topo.check_joints("pose", pose.len())?;
            let p2 = project(pose, cam)?;
            let lengths = bones_of(pose, topo)?.iter().map(|b| b.norm()).collect();
            Ok(DatasetRecord {
                frame_id: i as u64,
                sequence_id: seq,
                action: action.clone(),
                joints3d: pose.joints().iter().map(|j| [j.x, j.y, j.z]).collect(),
                joints2d: p2.joints().iter().map(|j| [j.x, j.y]).collect(),
                bone_lengths: Some(lengths),
                angles: None,
                source,
                topology: digest.clone(),
            })
        })
        .collect()
}

/// One record per generated frame, numbered consecutively.
pub fn records_from_sequences(
    sequences: &[GeneratedSequence],
    cam: &CameraIntrinsics,
    topo: &SkeletonTopology,
    source: Source,
) -> Result<Vec<DatasetRecord>> {
    let digest = topo.digest();
    let mut out = Vec::new();
    for s in sequences {
        for f in &s.frames {
            let p2 = project(&f.pose, cam)?;
            let lengths = bones_of(&f.pose, topo)?.iter().map(|b| b.norm()).collect();
            out.push(DatasetRecord {
                frame_id: out.len() as u64,
                sequence_id: s.sequence_id as u64,
                action: s.action.clone(),
                joints3d: f.pose.joints().iter().map(|j| [j.x, j.y, j.z]).collect(),
                joints2d: p2.joints().iter().map(|j| [j.x, j.y]).collect(),
                bone_lengths: Some(lengths),
                angles: Some(f.angles.rows().to_vec()),
                source,
                topology: digest.clone(),
            });
        }
    }
    Ok(out)
}

pub fn to_jsonl(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSON-Lines text; blank lines are skipped and errors carry the
/// 1-based line number.
pub fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str, path: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Reads and validates a dataset file against `topo`.
pub fn read_dataset(path: &Path, topo: &SkeletonTopology) -> Result<Vec<DatasetRecord>> {
    let name = path.display().to_string();
    let text = read_to_string(path)?;
    let records: Vec<DatasetRecord> = parse_jsonl(&text, &name)?;
    let mut line = 0;
    let mut it = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    for r in &records {
        if let Some((i, _)) = it.next() {
            line = i + 1;
        }
        r.validate(topo).map_err(|e| match e {
            Error::TopologyMismatch(m) => Error::TopologyMismatch(format!("{name}:{line}: {m}")),
            other => Error::Parse {
                path: name.clone(),
                line,
                message: other.to_string(),
            },
        })?;
    }
    Ok(records)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidValue(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(format!("writing {}", path.display()), e));
    }
    Ok(())
}
