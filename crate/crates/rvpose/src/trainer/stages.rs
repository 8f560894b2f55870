//! The three training stages.
//!
//! Stage 1 trains trunk + classification heads + uncertainty scalars on the
//! balanced resampled set with online augmentation. Stage 2 trains the full
//! model over sliding windows with detached state carryover, the trunk
//! frozen for the first quarter of the epochs. Stage 3 refines with the
//! reprojection loss under a step schedule, early stopping on validation
//! reprojection error and emitting the best-validation checkpoint.

use super::adam::{adam_step, AdamState};
use super::config::TrainConfig;
use super::runlog::{LogRecord, RunLog};
use super::schedule::lr_schedule;
use super::TrainError;
use crate::backbone::Mode;
use crate::dataset::{
    augment_frame, augment_stage1_sample, sample_training_lengths, sliding_windows,
    AugmentParts, Sequence, Stage1Sample, Window,
};
use crate::diffcore::checkpoint::Checkpoint;
use crate::diffcore::graph::{Graph, Var};
use crate::diffcore::tensor::Tensor;
use crate::diffcore::{derive_seed, Rng};
use crate::geometry::{
    attitude_error, position_error, project, rotation_to_sixd, CameraIntrinsics, Pose,
    UnitQuaternion, ViewsphereGrid,
};
use crate::heads::{stage1_loss, stage2_loss, stage3_loss, behind_camera_penalty};
use crate::model::{PoseModel, StreamingEstimator};
use crate::recurrent::detach_state;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub runlog: RunLog,
    pub final_val: BTreeMap<String, f64>,
}

fn save_last_good(
    last_good: &Checkpoint,
    out_dir: Option<&Path>,
) -> Option<std::path::PathBuf> {
    let dir = out_dir?;
    let path = dir.join("last_good.chkp");
    std::fs::create_dir_all(dir).ok()?;
    last_good.save(&path).ok()?;
    Some(path)
}

/// Maps a numeric failure anywhere in a stage (including validation over a
/// blown-up model) to `Diverged`, preserving the last good checkpoint.
fn guard_diverged<T>(
    result: Result<T, TrainError>,
    step: u64,
    last_good: &Checkpoint,
    out_dir: Option<&Path>,
) -> Result<T, TrainError> {
    match result {
        Ok(v) => Ok(v),
        Err(e) => {
            let saved = save_last_good(last_good, out_dir);
            Err(TrainError::Diverged {
                step,
                detail: e.to_string(),
                last_good: saved,
            })
        }
    }
}

/// Keeps the first `channels` planes of a [C,H,W] image (RGB ablation).
fn clip_channels(img: &Tensor<f32>, channels: usize) -> Tensor<f32> {
    let s = img.shape();
    if s[0] == channels {
        return img.clone();
    }
    let plane = s[1] * s[2];
    Tensor::new(
        vec![channels, s[1], s[2]],
        img.data()[..channels * plane].to_vec(),
    )
    .unwrap()
}

/// Stacks [C,H,W] images into [B,C,H,W].
fn stack_images(images: &[Tensor<f32>]) -> Tensor<f32> {
    let s = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        assert_eq!(img.shape(), s);
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), s[0], s[1], s[2]], data).unwrap()
}

// ---------------------------------------------------------------------
// stage 1
// ---------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn train_stage1(
    model: &PoseModel<f32>,
    samples: &[Stage1Sample],
    intrinsics: &CameraIntrinsics,
    grid: &ViewsphereGrid,
    cfg: &TrainConfig,
    data_hash: &str,
    out_dir: Option<&Path>,
) -> Result<StageOutput, TrainError> {
    assert_eq!(
        model.cfg.classes,
        grid.class_count(),
        "model head size must match the viewsphere grid"
    );
    assert!(!samples.is_empty());
    model.record_intrinsics(intrinsics);
    let mut log = RunLog::new();
    log.push(LogRecord::Config {
        stage: 1,
        seed: cfg.seed,
        data_hash: data_hash.to_string(),
        echo: cfg.echo(),
    });

    let mut rng = Rng::seed_from(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    let val_n = ((samples.len() as f64 * cfg.val_fraction).ceil() as usize)
        .clamp(1, samples.len().saturating_sub(1).max(1));
    let (val_idx, train_idx) = order.split_at(val_n);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let params = model.store.params().to_vec();
    let mut adam = AdamState::new(&params);
    let mut step: u64 = 0;
    let mut last_good = model.checkpoint_for_stage(1);
    let epochs = cfg.epochs(1);
    let start = Instant::now();

    'epochs: for epoch in 0..epochs {
        let lr = lr_schedule(cfg.schedule(1), epoch, epochs, cfg.base_lr(1));
        rng.shuffle(&mut train_idx);
        for chunk in train_idx.chunks(cfg.minibatch) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut onehot = Vec::with_capacity(chunk.len() * model.cfg.classes);
            let mut positions = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut srng = Rng::seed_from(derive_seed(
                    derive_seed(cfg.seed, epoch as u64),
                    idx as u64,
                ));
                let aug = augment_stage1_sample(
                    &samples[idx],
                    intrinsics,
                    grid,
                    &mut srng,
                    cfg.augment,
                    AugmentParts::default(),
                );
                images.push(clip_channels(&aug.image, model.cfg.backbone.in_channels));
                onehot.extend_from_slice(&aug.onehot);
                positions.push(aug.position);
            }
            let batch = stack_images(&images);
            let hot =
                Tensor::new(vec![chunk.len(), model.cfg.classes], onehot).unwrap();

            let result = (|| -> Result<(f64, Vec<f64>), TrainError> {
                let mut g = Graph::<f32>::new();
                let x = g.input(batch);
                let mut net_rng = Rng::seed_from(derive_seed(cfg.seed ^ 0x5157, step));
                let (logits, t_hat) = model.forward_stage1(&mut g, x, Mode::Train, &mut net_rng)?;
                let sa = g.param(&model.sigma_cls.0);
                let st = g.param(&model.sigma_cls.1);
                let loss = stage1_loss(&mut g, logits, &hot, t_hat, &positions, sa, st)?;
                let loss_v = g.value(loss).item() as f64;
                g.backward(loss)?;
                adam_step(&params, &mut adam, lr)?;
                model.store.zero_grads();
                let sigmas = vec![
                    model.sigma_cls.0.value().item() as f64,
                    model.sigma_cls.1.value().item() as f64,
                ];
                Ok((loss_v, sigmas))
            })();
            match result {
                Ok((loss, sigmas)) => {
                    step += 1;
                    log.push(LogRecord::Step {
                        step,
                        epoch,
                        loss,
                        sigmas,
                        lr,
                        wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    });
                }
                Err(e) => {
                    let saved = save_last_good(&last_good, out_dir);
                    return Err(TrainError::Diverged {
                        step,
                        detail: e.to_string(),
                        last_good: saved,
                    });
                }
            }
            if cfg.max_steps > 0 && step as usize >= cfg.max_steps {
                break 'epochs;
            }
        }
        let metrics = guard_diverged(
            validate_stage1(model, samples, &val_idx, cfg),
            step,
            &last_good,
            out_dir,
        )?;
        log.push(LogRecord::Epoch {
            epoch,
            metrics: metrics.clone(),
        });
        last_good = model.checkpoint_for_stage(1);
    }
    let final_val = guard_diverged(
        validate_stage1(model, samples, &val_idx, cfg),
        step,
        &last_good,
        out_dir,
    )?;
    Ok(StageOutput {
        checkpoint: model.checkpoint_for_stage(1),
        runlog: log,
        final_val,
    })
}

fn validate_stage1(
    model: &PoseModel<f32>,
    samples: &[Stage1Sample],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<BTreeMap<String, f64>, TrainError> {
    let mut correct = 0usize;
    let mut rel_sum = 0.0f64;
    for chunk in val_idx.chunks(cfg.minibatch.max(1)) {
        let images: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|&i| clip_channels(&samples[i].image, model.cfg.backbone.in_channels))
            .collect();
        let batch = stack_images(&images);
        let mut g = Graph::<f32>::new();
        let x = g.input(batch);
        let mut rng = Rng::seed_from(0);
        let (logits, t_hat) = model.forward_stage1(&mut g, x, Mode::Infer, &mut rng)?;
        let lv = g.value(logits);
        let tv = g.value(t_hat);
        let k = model.cfg.classes;
        for (row, &idx) in chunk.iter().enumerate() {
            let scores = &lv.data()[row * k..(row + 1) * k];
            let pred = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            if pred == samples[idx].class_index() {
                correct += 1;
            }
            let t_pred = [
                tv.data()[row * 3] as f64,
                tv.data()[row * 3 + 1] as f64,
                tv.data()[row * 3 + 2] as f64,
            ];
            let (_, dtr) = position_error(&t_pred, &samples[idx].position)
                .map_err(|e| TrainError::Config(e.to_string()))?;
            rel_sum += dtr;
        }
    }
    let mut m = BTreeMap::new();
    m.insert(
        "val_acc".to_string(),
        correct as f64 / val_idx.len() as f64,
    );
    m.insert("val_pos_rel".to_string(), rel_sum / val_idx.len() as f64);
    Ok(m)
}

// ---------------------------------------------------------------------
// window batching shared by stages 2 and 3
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct PartitionRef {
    seq: usize,
    start: usize,
    len: usize,
}

fn build_partitions(
    sequences: &[Sequence],
    rng: &mut Rng,
) -> Vec<PartitionRef> {
    let mut parts = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        let lengths = sample_training_lengths(seq.duration_s(), rng);
        let mut cursor = 0usize;
        for len_s in lengths {
            let frames = (len_s * seq.fps).round() as usize;
            let frames = frames.min(seq.len() - cursor);
            if frames == 0 {
                continue;
            }
            parts.push(PartitionRef {
                seq: si,
                start: cursor,
                len: frames,
            });
            cursor += frames;
        }
    }
    parts
}

struct WindowBatch {
    /// Per time-step [B, C, H, W].
    images: Vec<Tensor<f32>>,
    /// Per time-step [B, 6].
    r_gt: Vec<Tensor<f32>>,
    /// Per time-step [B, 3].
    t_gt: Vec<Tensor<f32>>,
    /// Per time-step ground-truth poses (after augmentation).
    poses: Vec<Vec<Pose>>,
}

#[allow(clippy::too_many_arguments)]
fn window_batch(
    sequences: &[Sequence],
    parts: &[PartitionRef],
    active: &[usize],
    frame_offset: usize,
    window: usize,
    cfg: &TrainConfig,
    epoch: usize,
    in_channels: usize,
    augment: bool,
) -> WindowBatch {
    let mut images = Vec::with_capacity(window);
    let mut r_gt = Vec::with_capacity(window);
    let mut t_gt = Vec::with_capacity(window);
    let mut poses = Vec::with_capacity(window);
    for kappa in 0..window {
        let mut imgs = Vec::with_capacity(active.len());
        let mut r_data = Vec::with_capacity(active.len() * 6);
        let mut t_data = Vec::with_capacity(active.len() * 3);
        let mut pose_row = Vec::with_capacity(active.len());
        for &pi in active {
            let part = parts[pi];
            let seq = &sequences[part.seq];
            let abs = part.start + frame_offset + kappa;
            let frame = &seq.frames[abs];
            let (img, pose) = if augment && cfg.augment > 0.0 {
                // seed from (epoch, sequence, absolute frame): overlapping
                // windows see the same augmented frame, keeping carryover
                // consistent
                let s = derive_seed(
                    derive_seed(cfg.seed ^ 0xA06, epoch as u64),
                    (part.seq as u64) << 32 | abs as u64,
                );
                let mut frng = Rng::seed_from(s);
                augment_frame(
                    &frame.image,
                    &frame.pose,
                    &seq.intrinsics,
                    &mut frng,
                    cfg.augment,
                    AugmentParts::default(),
                )
            } else {
                (frame.image.clone(), frame.pose)
            };
            imgs.push(clip_channels(&img, in_channels));
            let sixd = rotation_to_sixd(&pose.rotation);
            r_data.extend(sixd.0.iter().map(|&v| v as f32));
            t_data.extend(pose.position.iter().map(|&v| v as f32));
            pose_row.push(pose);
        }
        images.push(stack_images(&imgs));
        r_gt.push(Tensor::new(vec![active.len(), 6], r_data).unwrap());
        t_gt.push(Tensor::new(vec![active.len(), 3], t_data).unwrap());
        poses.push(pose_row);
    }
    WindowBatch {
        images,
        r_gt,
        t_gt,
        poses,
    }
}

/// Validation over held-out partitions: streams each partition statefully
/// and reports mean attitude error (deg), mean relative position error, and
/// mean keypoint reprojection error (px).
fn validate_sequences(
    model: &PoseModel<f32>,
    sequences: &[Sequence],
    parts: &[PartitionRef],
) -> Result<BTreeMap<String, f64>, TrainError> {
    let mut dq_sum = 0.0f64;
    let mut dtr_sum = 0.0f64;
    let mut reproj_sum = 0.0f64;
    let mut frames = 0usize;
    for part in parts {
        let seq = &sequences[part.seq];
        let mut est = StreamingEstimator::new(model);
        for off in 0..part.len {
            let frame = &seq.frames[part.start + off];
            let img = clip_channels(&frame.image, model.cfg.backbone.in_channels);
            let pred = est.estimate(&img)?;
            let q_hat = UnitQuaternion::from_rotation(&pred.rotation);
            let q_gt = UnitQuaternion::from_rotation(&frame.pose.rotation);
            dq_sum += attitude_error(&q_hat, &q_gt).to_degrees();
            let (_, dtr) = position_error(&pred.position, &frame.pose.position)
                .map_err(|e| TrainError::Config(e.to_string()))?;
            dtr_sum += dtr;
            reproj_sum += reprojection_error_px(seq, &pred, &frame.pose);
            frames += 1;
        }
    }
    let n = frames.max(1) as f64;
    let mut m = BTreeMap::new();
    m.insert("val_dq_deg".to_string(), dq_sum / n);
    m.insert("val_dtr".to_string(), dtr_sum / n);
    m.insert("val_reproj_px".to_string(), reproj_sum / n);
    Ok(m)
}

/// Mean keypoint reprojection error for one frame; predicted keypoints at
/// or behind the camera plane are charged the image-diagonal penalty.
fn reprojection_error_px(seq: &Sequence, pred: &Pose, gt: &Pose) -> f64 {
    let (w, h) = (seq.width(), seq.height());
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in &seq.keypoints {
        let Some(z_gt) = project(&seq.intrinsics, gt, p) else {
            continue;
        };
        match project(&seq.intrinsics, pred, p) {
            Some(z) => {
                sum += ((z[0] - z_gt[0]).powi(2) + (z[1] - z_gt[1]).powi(2)).sqrt();
            }
            None => sum += behind_camera_penalty(1, w, h),
        }
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn split_partitions(
    parts: Vec<PartitionRef>,
    val_fraction: f64,
    rng: &mut Rng,
) -> (Vec<PartitionRef>, Vec<PartitionRef>) {
    if parts.len() == 1 {
        // toy overfit runs: validate on the training partition
        return (parts.clone(), parts);
    }
    let mut order: Vec<usize> = (0..parts.len()).collect();
    rng.shuffle(&mut order);
    let val_n = ((parts.len() as f64 * val_fraction).ceil() as usize)
        .clamp(1, parts.len() - 1);
    let val: Vec<PartitionRef> = order[..val_n].iter().map(|&i| parts[i]).collect();
    let train: Vec<PartitionRef> = order[val_n..].iter().map(|&i| parts[i]).collect();
    (train, val)
}

// ---------------------------------------------------------------------
// stages 2 and 3
// ---------------------------------------------------------------------

enum WindowLoss {
    Stage2,
    Stage3,
}

pub fn train_stage2(
    model: &PoseModel<f32>,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    data_hash: &str,
    out_dir: Option<&Path>,
) -> Result<StageOutput, TrainError> {
    train_windowed(model, sequences, cfg, data_hash, out_dir, WindowLoss::Stage2)
}

pub fn train_stage3(
    model: &PoseModel<f32>,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    data_hash: &str,
    out_dir: Option<&Path>,
) -> Result<StageOutput, TrainError> {
    train_windowed(model, sequences, cfg, data_hash, out_dir, WindowLoss::Stage3)
}

fn train_windowed(
    model: &PoseModel<f32>,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    data_hash: &str,
    out_dir: Option<&Path>,
    which: WindowLoss,
) -> Result<StageOutput, TrainError> {
    assert!(!sequences.is_empty());
    if cfg.stride == 0 || cfg.stride > cfg.window {
        return Err(TrainError::Config(format!(
            "stride {} must be in [1, window {}]",
            cfg.stride, cfg.window
        )));
    }
    let stage: u8 = match which {
        WindowLoss::Stage2 => 2,
        WindowLoss::Stage3 => 3,
    };
    model.record_intrinsics(&sequences[0].intrinsics);
    let mut log = RunLog::new();
    log.push(LogRecord::Config {
        stage,
        seed: cfg.seed,
        data_hash: data_hash.to_string(),
        echo: cfg.echo(),
    });

    let mut rng = Rng::seed_from(cfg.seed ^ 0x57A6E2 + stage as u64);
    let parts = build_partitions(sequences, &mut rng);
    if parts.is_empty() {
        return Err(TrainError::Config("no usable partitions".into()));
    }
    let (train_parts, val_parts) = split_partitions(parts, cfg.val_fraction, &mut rng);
    if train_parts.is_empty() {
        return Err(TrainError::Config("no training partitions after split".into()));
    }
    // windows per training partition; partitions shorter than one window
    // contribute nothing and are dropped with a note
    let windows_per_part: Vec<Vec<Window>> = train_parts
        .iter()
        .map(|p| sliding_windows(p.len, cfg.window, cfg.stride))
        .collect();
    for (i, w) in windows_per_part.iter().enumerate() {
        if w.is_empty() {
            log.push(LogRecord::Note {
                text: format!(
                    "partition {i} ({} frames) shorter than one window; skipped",
                    train_parts[i].len
                ),
            });
        }
    }

    let groups: Vec<Vec<usize>> = (0..train_parts.len())
        .filter(|&i| !windows_per_part[i].is_empty())
        .collect::<Vec<_>>()
        .chunks(cfg.minibatch.max(1))
        .map(|c| c.to_vec())
        .collect();
    if groups.is_empty() {
        return Err(TrainError::Config(
            "every partition is shorter than one window".into(),
        ));
    }

    let params = model.store.params().to_vec();
    let mut adam = AdamState::new(&params);
    let mut step: u64 = 0;
    let mut last_good = model.checkpoint_for_stage(stage);
    let epochs = cfg.epochs(stage);
    let freeze_epochs = match which {
        WindowLoss::Stage2 => (cfg.freeze_fraction * epochs as f64).ceil() as usize,
        WindowLoss::Stage3 => 0,
    };
    let start = Instant::now();

    // stage 3: early stopping on validation reprojection error, the initial
    // model included as a candidate so refinement can never lose ground
    let mut best_val = f64::INFINITY;
    let mut best_ck: Option<Checkpoint> = None;
    let mut best_epoch: isize = -1;
    if matches!(which, WindowLoss::Stage3) {
        let m = validate_sequences(model, sequences, &val_parts)?;
        best_val = m["val_reproj_px"];
        best_ck = Some(model.checkpoint_for_stage(stage));
        log.push(LogRecord::Epoch {
            epoch: 0,
            metrics: m,
        });
    }

    'epochs: for epoch in 0..epochs {
        model.set_trunk_trainable(epoch >= freeze_epochs);
        let lr = lr_schedule(cfg.schedule(stage), epoch, epochs, cfg.base_lr(stage));
        for (gi, group) in groups.iter().enumerate() {
            let max_rank = group
                .iter()
                .map(|&pi| windows_per_part[pi].len())
                .max()
                .unwrap();
            let mut current: Vec<usize> = group
                .iter()
                .copied()
                .filter(|&pi| !windows_per_part[pi].is_empty())
                .collect();
            let mut state = model.zero_state(current.len());
            for rank in 0..max_rank {
                let needed: Vec<usize> = group
                    .iter()
                    .copied()
                    .filter(|&pi| rank < windows_per_part[pi].len())
                    .collect();
                if needed.is_empty() {
                    break;
                }
                if needed != current {
                    let rows: Vec<usize> = needed
                        .iter()
                        .map(|pi| current.iter().position(|c| c == pi).unwrap())
                        .collect();
                    state = state.select_rows(&rows);
                    current = needed.clone();
                }
                let batch = window_batch(
                    sequences,
                    &train_parts,
                    &current,
                    rank * cfg.stride,
                    cfg.window,
                    cfg,
                    epoch,
                    model.cfg.backbone.in_channels,
                    true,
                );
                let result = (|| -> Result<(f64, Vec<f64>, Option<crate::recurrent::RecurrentState<f32>>), TrainError> {
                    let mut g = Graph::<f32>::new();
                    let frames: Vec<Var> =
                        batch.images.iter().map(|t| g.input(t.clone())).collect();
                    let mut net_rng =
                        Rng::seed_from(derive_seed(cfg.seed ^ 0x2E7 + stage as u64, step));
                    let (outs, states) =
                        model.forward_sequence(&mut g, &frames, &state, Mode::Train, &mut net_rng)?;
                    let r_hats: Vec<Var> = outs.iter().map(|&(r, _)| r).collect();
                    let t_hats: Vec<Var> = outs.iter().map(|&(_, t)| t).collect();
                    let (loss, sigmas) = match which {
                        WindowLoss::Stage2 => {
                            let sr = g.param(&model.sigma_reg.0);
                            let st = g.param(&model.sigma_reg.1);
                            let loss = stage2_loss(
                                &mut g, &r_hats, &batch.r_gt, &t_hats, &batch.t_gt, sr, st,
                            )?;
                            let sig = vec![
                                model.sigma_reg.0.value().item() as f64,
                                model.sigma_reg.1.value().item() as f64,
                            ];
                            (loss, sig)
                        }
                        WindowLoss::Stage3 => {
                            let seq0 = &sequences[train_parts[current[0]].seq];
                            let (loss, _stats) = stage3_loss(
                                &mut g,
                                &r_hats,
                                &t_hats,
                                &batch.poses,
                                &seq0.intrinsics,
                                &seq0.keypoints,
                                seq0.width(),
                                seq0.height(),
                            )?;
                            (loss, Vec::new())
                        }
                    };
                    let loss_v = g.value(loss).item() as f64;
                    g.backward(loss)?;
                    adam_step(&params, &mut adam, lr)?;
                    model.store.zero_grads();
                    // carry the state produced at the stride offset
                    let carry = if model.rnn.is_some() && !states.is_empty() {
                        Some(detach_state(&g, &states[cfg.stride - 1]))
                    } else {
                        None
                    };
                    Ok((loss_v, sigmas, carry))
                })();
                match result {
                    Ok((loss, sigmas, carry)) => {
                        step += 1;
                        log.push(LogRecord::Step {
                            step,
                            epoch,
                            loss,
                            sigmas,
                            lr,
                            wall_ms: start.elapsed().as_secs_f64() * 1e3,
                        });
                        log.push(LogRecord::Window {
                            group: gi,
                            rank,
                            carry_from: if rank == 0 { None } else { Some(rank - 1) },
                        });
                        if let Some(c) = carry {
                            state = c;
                        }
                    }
                    Err(e) => {
                        let saved = save_last_good(&last_good, out_dir);
                        return Err(TrainError::Diverged {
                            step,
                            detail: e.to_string(),
                            last_good: saved,
                        });
                    }
                }
                if cfg.max_steps > 0 && step as usize >= cfg.max_steps {
                    break 'epochs;
                }
            }
        }
        let metrics = guard_diverged(
            validate_sequences(model, sequences, &val_parts),
            step,
            &last_good,
            out_dir,
        )?;
        log.push(LogRecord::Epoch {
            epoch: epoch + 1,
            metrics: metrics.clone(),
        });
        last_good = model.checkpoint_for_stage(stage);
        if matches!(which, WindowLoss::Stage3) {
            let v = metrics["val_reproj_px"];
            if v < best_val {
                best_val = v;
                best_ck = Some(model.checkpoint_for_stage(stage));
                best_epoch = epoch as isize;
            } else if (epoch as isize - best_epoch) as usize >= cfg.patience {
                log.push(LogRecord::Note {
                    text: format!(
                        "early stop at epoch {epoch}: no improvement for {} epochs",
                        cfg.patience
                    ),
                });
                break 'epochs;
            }
        }
    }
    model.set_trunk_trainable(true);

    let final_val = guard_diverged(
        validate_sequences(model, sequences, &val_parts),
        step,
        &last_good,
        out_dir,
    )?;
    let checkpoint = match which {
        WindowLoss::Stage3 => {
            // emit the best-validation checkpoint (possibly the initial one)
            let ck = best_ck.unwrap_or_else(|| model.checkpoint_for_stage(stage));
            if cfg.max_steps > 0 {
                // determinism runs want the literal post-step parameters
                model.checkpoint_for_stage(stage)
            } else {
                ck
            }
        }
        WindowLoss::Stage2 => model.checkpoint_for_stage(stage),
    };
    Ok(StageOutput {
        checkpoint,
        runlog: log,
        final_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_cover_sequences() {
        let mut rng = Rng::seed_from(1);
        let seq = crate::scenegen::generate_sequence(
            "t",
            &crate::scenegen::GuidanceProfile {
                kind: crate::scenegen::GuidanceKind::FixedRange { range_m: 30.0 },
                approach: crate::scenegen::Approach::VBar,
            },
            &crate::scenegen::TumblingProfile::SingleAxis {
                axis: [0.0, 1.0, 0.0],
                rate_deg_s: 6.0,
            },
            &crate::scenegen::make_default_target(),
            &{
                let mut c = crate::scenegen::SceneConfig::desk_default(20.0, 3);
                c.width = 8;
                c.height = 8;
                c.intrinsics = CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0);
                c
            },
        )
        .unwrap();
        let parts = build_partitions(&[seq.clone()], &mut rng);
        let total: usize = parts.iter().map(|p| p.len).sum();
        assert_eq!(total, seq.len(), "partitions cover every frame");
        for w in &parts {
            assert!(w.start + w.len <= seq.len());
        }
    }
}
