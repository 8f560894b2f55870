//! On-disk sequence format: `manifest.json` beside `frames.bin`.
//!
//! frames.bin layout: magic "CHSQ", version u16 LE, frame count u32 LE, then
//! per frame 4·H·W f32 LE values in frame order. The manifest carries
//! everything else (intrinsics, keypoints, per-frame poses as xyzw + xyz +
//! tau). Write-then-read is identity to f32 precision.

use super::{Frame, ProfileMeta, Sequence};
use crate::geometry::{CameraIntrinsics, Pose, UnitQuaternion};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"CHSQ";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic in frames.bin (expected CHSQ)")]
    BadMagic,
    #[error("unsupported frames.bin version {0}")]
    BadVersion(u16),
    #[error("frame count mismatch: manifest says {manifest}, frames.bin holds {binary}")]
    FrameCountMismatch { manifest: usize, binary: usize },
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("geometry: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Serialize, Deserialize)]
struct FramePose {
    q: [f64; 4],
    t: [f64; 3],
    tau: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    id: String,
    fps: f64,
    width: u32,
    height: u32,
    intrinsics: [f64; 9],
    keypoints: Vec<[f64; 3]>,
    guidance: String,
    tumbling: String,
    approach: String,
    frame_count: u32,
    frames: Vec<FramePose>,
}

pub fn write_sequence(seq: &Sequence, dir: impl AsRef<Path>) -> Result<(), DataError> {
    seq.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        id: seq.id.clone(),
        fps: seq.fps,
        width: seq.width() as u32,
        height: seq.height() as u32,
        intrinsics: seq.intrinsics.matrix(),
        keypoints: seq.keypoints.clone(),
        guidance: seq.meta.guidance.clone(),
        tumbling: seq.meta.tumbling.clone(),
        approach: seq.meta.approach.clone(),
        frame_count: seq.frames.len() as u32,
        frames: seq
            .frames
            .iter()
            .map(|f| FramePose {
                q: UnitQuaternion::from_rotation(&f.pose.rotation).coords(),
                t: f.pose.position,
                tau: f.time_s,
            })
            .collect(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;

    let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join("frames.bin"))?);
    bin.write_all(MAGIC)?;
    bin.write_all(&VERSION.to_le_bytes())?;
    bin.write_all(&(seq.frames.len() as u32).to_le_bytes())?;
    for f in &seq.frames {
        let mut raw = Vec::with_capacity(f.image.numel() * 4);
        for &v in f.image.data() {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        bin.write_all(&raw)?;
    }
    bin.flush()?;
    Ok(())
}

pub fn read_sequence(dir: impl AsRef<Path>) -> Result<Sequence, DataError> {
    let dir = dir.as_ref();
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let mut file = std::io::BufReader::new(std::fs::File::open(dir.join("frames.bin"))?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::BadMagic);
    }
    let mut u16b = [0u8; 2];
    file.read_exact(&mut u16b)?;
    let version = u16::from_le_bytes(u16b);
    if version != VERSION {
        return Err(DataError::BadVersion(version));
    }
    let mut u32b = [0u8; 4];
    file.read_exact(&mut u32b)?;
    let bin_count = u32::from_le_bytes(u32b) as usize;
    if bin_count != manifest.frame_count as usize || manifest.frames.len() != bin_count {
        return Err(DataError::FrameCountMismatch {
            manifest: manifest.frame_count as usize,
            binary: bin_count,
        });
    }
    let (w, h) = (manifest.width as usize, manifest.height as usize);
    let frame_values = 4 * h * w;
    let mut frames = Vec::with_capacity(bin_count);
    let mut raw = vec![0u8; frame_values * 4];
    for (i, fp) in manifest.frames.iter().enumerate() {
        if let Err(e) = file.read_exact(&mut raw) {
            // a truncated payload is a frame-count disagreement in disguise
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                return Err(DataError::FrameCountMismatch {
                    manifest: manifest.frame_count as usize,
                    binary: i,
                });
            }
            return Err(e.into());
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let image = crate::diffcore::tensor::Tensor::new(vec![4, h, w], data)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        // quaternions are validated unit-norm on read
        let q = UnitQuaternion::new(fp.q)?;
        frames.push(Frame {
            index: i,
            time_s: fp.tau,
            image,
            pose: Pose::new(q.to_rotation(), fp.t),
        });
    }
    let seq = Sequence {
        id: manifest.id,
        intrinsics: CameraIntrinsics::from_matrix(&manifest.intrinsics),
        fps: manifest.fps,
        frames,
        keypoints: manifest.keypoints,
        meta: ProfileMeta {
            guidance: manifest.guidance,
            tumbling: manifest.tumbling,
            approach: manifest.approach,
        },
    };
    seq.validate()?;
    Ok(seq)
}

/// SHA-256 of one file, hex-encoded.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String, DataError> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_str(&h.finalize()))
}

/// Content hash of a directory tree: relative paths and file bytes, walked
/// in sorted order.
pub fn dir_hash(dir: impl AsRef<Path>) -> Result<String, DataError> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    collect_files(dir, dir, &mut paths)?;
    paths.sort();
    let mut h = Sha256::new();
    for rel in &paths {
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(&std::fs::read(dir.join(rel))?);
    }
    Ok(hex_str(&h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), DataError> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(
                path.strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/"),
            );
        }
    }
    Ok(())
}

fn hex_str(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
