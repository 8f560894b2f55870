//! Sequence datasets: in-memory types, the on-disk format, Stage-1 balanced
//! resampling, online augmentation and sliding-window batching.

mod augment;
mod io;

pub use augment::{augment_frame, augment_stage1_sample, AugmentParts};
pub use io::{dir_hash, file_hash, read_sequence, write_sequence, DataError};

use crate::diffcore::tensor::Tensor;
use crate::diffcore::Rng;
use crate::geometry::{
    depth_bin, norm3, viewsphere_class, CameraIntrinsics, Pose, Vec3, ViewsphereGrid,
};

/// One timestamped RGBT frame with its ground-truth pose.
#[derive(Clone)]
pub struct Frame {
    pub index: usize,
    pub time_s: f64,
    /// [4, H, W], values in [0, 1].
    pub image: Tensor<f32>,
    pub pose: Pose,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProfileMeta {
    pub guidance: String,
    pub tumbling: String,
    pub approach: String,
}

/// An ordered rendezvous sequence sharing one camera and one keypoint set.
#[derive(Clone)]
pub struct Sequence {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub fps: f64,
    pub frames: Vec<Frame>,
    pub keypoints: Vec<Vec3>,
    pub meta: ProfileMeta,
}

impl Sequence {
    pub fn width(&self) -> usize {
        self.frames[0].image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.frames[0].image.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    /// Checks the structural invariants: consecutive indices from 0, shared
    /// image shape, pixel values in [0, 1].
    pub fn validate(&self) -> Result<(), DataError> {
        if self.frames.is_empty() {
            return Err(DataError::Invalid("sequence has no frames".into()));
        }
        let shape = self.frames[0].image.shape().to_vec();
        if shape.len() != 3 || shape[0] != 4 {
            return Err(DataError::Invalid(format!(
                "frame image must be [4,H,W], got {shape:?}"
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i {
                return Err(DataError::Invalid(format!(
                    "frame {i} carries index {}",
                    f.index
                )));
            }
            if f.image.shape() != shape {
                return Err(DataError::Invalid(format!("frame {i} shape mismatch")));
            }
            if f.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(DataError::Invalid(format!(
                    "frame {i} has pixels outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// One Stage-1 training observation. The source pose rides along so online
/// pose-perturbing augmentation can recompute the labels.
#[derive(Clone)]
pub struct Stage1Sample {
    pub image: Tensor<f32>,
    /// One-hot attitude class over the full grid, exactly one entry = 1.
    pub onehot: Vec<f32>,
    pub position: Vec3,
    pub pose: Pose,
}

impl Stage1Sample {
    pub fn class_index(&self) -> usize {
        self.onehot.iter().position(|&v| v == 1.0).expect("one hot")
    }
}

/// Balanced Stage-1 resampling.
///
/// Labels every frame with its viewsphere class, discards unrepresented
/// classes, builds `k_t` depth bins from the observed min/max range and then,
/// per surviving class, draws ceil(N/K') per occupied bin — with replacement
/// when a bin is smaller than the quota — before trimming back to exactly
/// `n_per_class` by removing one draw from each of the excess bins. The trim
/// keeps per-bin counts within 1 of each other.
pub fn stage1_resample(
    sequences: &[Sequence],
    grid: &ViewsphereGrid,
    k_t: usize,
    n_per_class: usize,
    rng: &mut Rng,
) -> Vec<Stage1Sample> {
    assert!(n_per_class >= 1 && k_t >= 1);
    let mut by_class: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); grid.class_count()];
    let mut depth_min = f64::INFINITY;
    let mut depth_max = f64::NEG_INFINITY;
    for (si, seq) in sequences.iter().enumerate() {
        for (fi, frame) in seq.frames.iter().enumerate() {
            let class = viewsphere_class(&frame.pose.rotation, grid);
            let depth = norm3(&frame.pose.position);
            depth_min = depth_min.min(depth);
            depth_max = depth_max.max(depth);
            by_class[class].push((si, fi, depth));
        }
    }
    assert!(depth_min.is_finite(), "no observations to resample");
    if depth_max - depth_min < 1e-12 {
        depth_max = depth_min + 1e-9;
    }
    let edges: Vec<f64> = (0..=k_t)
        .map(|i| depth_min + (depth_max - depth_min) * i as f64 / k_t as f64)
        .collect();

    let mut out = Vec::new();
    for members in by_class.iter().filter(|m| !m.is_empty()) {
        // split the class members over the occupied depth bins
        let mut bins: Vec<Vec<&(usize, usize, f64)>> = vec![Vec::new(); k_t];
        for obs in members {
            let b = depth_bin(&[0.0, 0.0, obs.2], &edges).expect("depth within observed range");
            bins[b].push(obs);
        }
        let occupied: Vec<usize> = (0..k_t).filter(|&b| !bins[b].is_empty()).collect();
        let quota = n_per_class.div_ceil(occupied.len());
        let mut drawn: Vec<Vec<&(usize, usize, f64)>> = Vec::with_capacity(occupied.len());
        for &b in &occupied {
            let pool = &bins[b];
            let mut picks = Vec::with_capacity(quota);
            if pool.len() >= quota {
                let mut idx: Vec<usize> = (0..pool.len()).collect();
                rng.shuffle(&mut idx);
                picks.extend(idx[..quota].iter().map(|&i| pool[i]));
            } else {
                // oversample with replacement
                for _ in 0..quota {
                    picks.push(pool[rng.below(pool.len())]);
                }
            }
            drawn.push(picks);
        }
        // trim the excess: one draw from each of `excess` distinct bins
        let excess = quota * occupied.len() - n_per_class;
        let mut bin_order: Vec<usize> = (0..drawn.len()).collect();
        rng.shuffle(&mut bin_order);
        for &bi in bin_order.iter().take(excess) {
            let kill = rng.below(drawn[bi].len());
            drawn[bi].swap_remove(kill);
        }
        for picks in drawn {
            for &&(si, fi, _) in &picks {
                let frame = &sequences[si].frames[fi];
                let mut onehot = vec![0.0f32; grid.class_count()];
                onehot[viewsphere_class(&frame.pose.rotation, grid)] = 1.0;
                out.push(Stage1Sample {
                    image: frame.image.clone(),
                    onehot,
                    position: frame.pose.position,
                    pose: frame.pose,
                });
            }
        }
    }
    rng.shuffle(&mut out);
    out
}

/// One truncated-BPTT window over a sequence partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    /// First frame offset within the partition.
    pub start: usize,
    pub len: usize,
    /// Index of the predecessor window whose exported state is carried in;
    /// `None` means a fresh zero state.
    pub carry_from: Option<usize>,
}

/// Sliding windows of length `window` at the given stride. The final partial
/// window is dropped; each window after the first carries the recurrent
/// state the previous window produced at frame offset `stride`.
pub fn sliding_windows(total: usize, window: usize, stride: usize) -> Vec<Window> {
    assert!(stride >= 1, "stride must be >= 1");
    if window > total {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut idx = 0usize;
    while start + window <= total {
        out.push(Window {
            start,
            len: window,
            carry_from: if idx == 0 { None } else { Some(idx - 1) },
        });
        start += stride;
        idx += 1;
    }
    out
}

/// The partition length menu, in seconds.
pub const PARTITION_CHOICES_S: [f64; 4] = [64.0, 128.0, 256.0, 512.0];

/// Greedy partition of a sequence duration into randomly sampled lengths
/// from {64, 128, 256, 512} s; the remainder below the minimum choice is
/// appended to the last partition. Durations shorter than the minimum map to
/// a single full-length partition.
pub fn sample_training_lengths(total_s: f64, rng: &mut Rng) -> Vec<f64> {
    let min_choice = PARTITION_CHOICES_S[0];
    if total_s < min_choice {
        return vec![total_s];
    }
    let mut parts = Vec::new();
    let mut remaining = total_s;
    while remaining >= min_choice {
        let feasible: Vec<f64> = PARTITION_CHOICES_S
            .iter()
            .copied()
            .filter(|&c| c <= remaining)
            .collect();
        let pick = feasible[rng.below(feasible.len())];
        parts.push(pick);
        remaining -= pick;
    }
    if remaining > 0.0 {
        *parts.last_mut().unwrap() += remaining;
    }
    parts
}
