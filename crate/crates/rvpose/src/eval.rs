//! Sequence-level evaluation and report emission.
//!
//! Evaluation streams frames in order through a stateful estimator — fresh
//! zero state at the start, carried across the whole sequence, matching
//! deployment — and reports per-frame position and attitude errors plus
//! mean/median summaries. Reports serialize to JSON (radians, mirroring the
//! in-memory type) or CSV (degrees for readability, summary appended as
//! `#` comment lines).

use crate::dataset::Sequence;
use crate::diffcore::tensor::Tensor;
use crate::geometry::{attitude_error, position_error, Pose, UnitQuaternion};
use crate::model::{PoseModel, StreamingEstimator};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("graph: {0}")]
    Graph(#[from] crate::diffcore::GraphError),
    #[error("{0}")]
    Invalid(String),
}

/// Anything that maps frames to poses, statefully.
pub trait PoseEstimator {
    /// Called once before a sequence starts.
    fn reset(&mut self);
    /// One [C,H,W] frame in sequence order.
    fn estimate(&mut self, image: &Tensor<f32>) -> Result<Pose, EvalError>;
}

/// The network behind the [`PoseEstimator`] trait, with channel clipping
/// for models trained on fewer input channels.
pub struct NetworkEstimator<'m> {
    inner: StreamingEstimator<'m, f32>,
    in_channels: usize,
}

impl<'m> NetworkEstimator<'m> {
    pub fn new(model: &'m PoseModel<f32>) -> NetworkEstimator<'m> {
        NetworkEstimator {
            in_channels: model.cfg.backbone.in_channels,
            inner: StreamingEstimator::new(model),
        }
    }
}

impl PoseEstimator for NetworkEstimator<'_> {
    fn reset(&mut self) {
        self.inner.reset();
    }

    fn estimate(&mut self, image: &Tensor<f32>) -> Result<Pose, EvalError> {
        let img = if image.shape()[0] == self.in_channels {
            image.clone()
        } else {
            let s = image.shape();
            let plane = s[1] * s[2];
            Tensor::new(
                vec![self.in_channels, s[1], s[2]],
                image.data()[..self.in_channels * plane].to_vec(),
            )
            .unwrap()
        };
        Ok(self.inner.estimate(&img)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrameError {
    pub tau_s: f64,
    pub dt_m: f64,
    pub dtr: f64,
    /// Radians internally; the CSV emitter converts to degrees.
    pub dq_rad: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub mean_dt_m: f64,
    pub median_dt_m: f64,
    pub mean_dtr: f64,
    pub median_dtr: f64,
    pub mean_dq_rad: f64,
    pub median_dq_rad: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SequenceReport {
    pub sequence_id: String,
    pub model_id: String,
    pub rows: Vec<FrameError>,
    pub summary: Summary,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize(rows: &[FrameError]) -> Summary {
    let n = rows.len().max(1) as f64;
    let mut dt: Vec<f64> = rows.iter().map(|r| r.dt_m).collect();
    let mut dtr: Vec<f64> = rows.iter().map(|r| r.dtr).collect();
    let mut dq: Vec<f64> = rows.iter().map(|r| r.dq_rad).collect();
    Summary {
        mean_dt_m: dt.iter().sum::<f64>() / n,
        median_dt_m: median(&mut dt),
        mean_dtr: dtr.iter().sum::<f64>() / n,
        median_dtr: median(&mut dtr),
        mean_dq_rad: dq.iter().sum::<f64>() / n,
        median_dq_rad: median(&mut dq),
    }
}

/// Streams the whole sequence through the estimator and scores every frame.
pub fn evaluate_sequence(
    est: &mut dyn PoseEstimator,
    seq: &Sequence,
    model_id: &str,
) -> Result<SequenceReport, EvalError> {
    est.reset();
    let mut rows = Vec::with_capacity(seq.len());
    for frame in &seq.frames {
        let pred = est.estimate(&frame.image)?;
        let q_hat = UnitQuaternion::from_rotation(&pred.rotation);
        let q_gt = UnitQuaternion::from_rotation(&frame.pose.rotation);
        let dq = attitude_error(&q_hat, &q_gt);
        let (dt, dtr) = position_error(&pred.position, &frame.pose.position)
            .map_err(|e| EvalError::Invalid(e.to_string()))?;
        rows.push(FrameError {
            tau_s: frame.time_s,
            dt_m: dt,
            dtr,
            dq_rad: dq,
        });
    }
    let summary = summarize(&rows);
    Ok(SequenceReport {
        sequence_id: seq.id.clone(),
        model_id: model_id.to_string(),
        rows,
        summary,
    })
}

/// Compares a model against a reference sequence, warning (not aborting) on
/// intrinsics mismatch with the training data recorded in the checkpoint.
pub fn intrinsics_mismatch_warning(model: &PoseModel<f32>, seq: &Sequence) -> Option<String> {
    let trained = model.recorded_intrinsics()?;
    let k = &seq.intrinsics;
    if (trained.fx - k.fx).abs() > 1e-9
        || (trained.fy - k.fy).abs() > 1e-9
        || (trained.cx - k.cx).abs() > 1e-9
        || (trained.cy - k.cy).abs() > 1e-9
    {
        Some(format!(
            "intrinsics mismatch: model trained with fx={} fy={} cx={} cy={}, sequence {} has fx={} fy={} cx={} cy={}",
            trained.fx, trained.fy, trained.cx, trained.cy,
            seq.id, k.fx, k.fy, k.cx, k.cy
        ))
    } else {
        None
    }
}

/// CSV with exactly the columns tau_s, dt_m, dtr, dq_deg and the summary
/// appended as '#'-prefixed comment lines.
pub fn emit_csv(report: &SequenceReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut out = String::from("tau_s,dt_m,dtr,dq_deg\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.tau_s,
            r.dt_m,
            r.dtr,
            r.dq_rad.to_degrees()
        ));
    }
    let s = &report.summary;
    out.push_str(&format!(
        "# sequence={} model={}\n",
        report.sequence_id, report.model_id
    ));
    out.push_str(&format!(
        "# mean_dt_m={} median_dt_m={}\n",
        s.mean_dt_m, s.median_dt_m
    ));
    out.push_str(&format!(
        "# mean_dtr={} median_dtr={}\n",
        s.mean_dtr, s.median_dtr
    ));
    out.push_str(&format!(
        "# mean_dq_deg={} median_dq_deg={}\n",
        s.mean_dq_rad.to_degrees(),
        s.median_dq_rad.to_degrees()
    ));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn emit_json(report: &SequenceReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub fn read_json(path: impl AsRef<Path>) -> Result<SequenceReport, EvalError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Paired evaluation of several model arms over the same sequences, with
/// per-arm summaries and deltas against the first arm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub sequence_id: String,
    pub arms: Vec<ArmSummary>,
    /// deltas[i] = arms[i+1] − arms[0], in summary units.
    pub deltas: Vec<ArmDelta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub summary: Summary,
    pub max_dt_m: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmDelta {
    pub name: String,
    pub versus: String,
    pub d_mean_dt_m: f64,
    pub d_mean_dtr: f64,
    pub d_mean_dq_rad: f64,
    pub d_max_dt_m: f64,
}

/// Builds the paired report from already-computed per-arm sequence reports
/// (all over the same sequence).
pub fn ablation_report(reports: &[(String, SequenceReport)]) -> Result<AblationReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Invalid("no arms".into()));
    }
    let seq_id = &reports[0].1.sequence_id;
    for (_, r) in reports {
        if &r.sequence_id != seq_id {
            return Err(EvalError::Invalid(format!(
                "arms evaluated on different sequences: {} vs {}",
                r.sequence_id, seq_id
            )));
        }
    }
    let arms: Vec<ArmSummary> = reports
        .iter()
        .map(|(name, r)| ArmSummary {
            name: name.clone(),
            summary: r.summary,
            max_dt_m: r.rows.iter().map(|x| x.dt_m).fold(0.0, f64::max),
        })
        .collect();
    let base = &arms[0];
    let deltas = arms[1..]
        .iter()
        .map(|a| ArmDelta {
            name: a.name.clone(),
            versus: base.name.clone(),
            d_mean_dt_m: a.summary.mean_dt_m - base.summary.mean_dt_m,
            d_mean_dtr: a.summary.mean_dtr - base.summary.mean_dtr,
            d_mean_dq_rad: a.summary.mean_dq_rad - base.summary.mean_dq_rad,
            d_max_dt_m: a.max_dt_m - base.max_dt_m,
        })
        .collect();
    Ok(AblationReport {
        sequence_id: seq_id.clone(),
        arms,
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Frame, ProfileMeta};
    use crate::diffcore::Rng;
    use crate::geometry::{CameraIntrinsics, Rotation};

    struct OracleEstimator {
        poses: Vec<Pose>,
        next: usize,
    }

    impl PoseEstimator for OracleEstimator {
        fn reset(&mut self) {
            self.next = 0;
        }
        fn estimate(&mut self, _image: &Tensor<f32>) -> Result<Pose, EvalError> {
            let p = self.poses[self.next];
            self.next += 1;
            Ok(p)
        }
    }

    struct ConstantEstimator(Pose);

    impl PoseEstimator for ConstantEstimator {
        fn reset(&mut self) {}
        fn estimate(&mut self, _image: &Tensor<f32>) -> Result<Pose, EvalError> {
            Ok(self.0)
        }
    }

    fn toy_sequence(n: usize) -> Sequence {
        let mut rng = Rng::seed_from(61);
        let frames = (0..n)
            .map(|i| Frame {
                index: i,
                time_s: i as f64 * 0.1,
                image: Tensor::rand_uniform(&[4, 4, 4], 0.0, 1.0, &mut rng),
                pose: Pose::new(
                    Rotation::from_axis_angle(&[0.0, 1.0, 0.0], 0.1 * i as f64),
                    [0.0, 0.0, 10.0 + i as f64 * 0.2],
                ),
            })
            .collect();
        Sequence {
            id: "toy".into(),
            intrinsics: CameraIntrinsics::new(4.0, 4.0, 2.0, 2.0),
            fps: 10.0,
            frames,
            keypoints: vec![[0.0, 0.0, 0.0]],
            meta: ProfileMeta::default(),
        }
    }

    #[test]
    fn perfect_oracle_scores_zero() {
        let seq = toy_sequence(10);
        let mut est = OracleEstimator {
            poses: seq.frames.iter().map(|f| f.pose).collect(),
            next: 0,
        };
        let report = evaluate_sequence(&mut est, &seq, "oracle").unwrap();
        assert_eq!(report.rows.len(), 10, "row count equals frame count");
        for r in &report.rows {
            assert_eq!(r.dt_m, 0.0);
            assert_eq!(r.dq_rad, 0.0);
        }
        assert_eq!(report.summary.mean_dt_m, 0.0);
        assert_eq!(report.summary.median_dq_rad, 0.0);
    }

    #[test]
    fn constant_estimator_tracks_tumble_angle() {
        let seq = toy_sequence(20);
        let first = seq.frames[0].pose;
        let mut est = ConstantEstimator(first);
        let report = evaluate_sequence(&mut est, &seq, "constant").unwrap();
        // attitude error sweeps with the ground-truth tumble: frame i is
        // 0.1·i rad from the held pose
        for &i in &[3usize, 10, 19] {
            let want = 0.1 * i as f64;
            assert!(
                (report.rows[i].dq_rad - want).abs() < 1e-9,
                "frame {i}: {} vs {want}",
                report.rows[i].dq_rad
            );
        }
        // summaries stay within the min/max envelope of per-frame values
        let max_dq = report.rows.iter().map(|r| r.dq_rad).fold(0.0, f64::max);
        let min_dq = report.rows.iter().map(|r| r.dq_rad).fold(f64::MAX, f64::min);
        assert!(report.summary.mean_dq_rad >= min_dq && report.summary.mean_dq_rad <= max_dq);
        assert!(report.summary.median_dq_rad >= min_dq && report.summary.median_dq_rad <= max_dq);
    }

    #[test]
    fn json_round_trip_and_csv_parse_back() {
        let seq = toy_sequence(5);
        let mut est = ConstantEstimator(seq.frames[2].pose);
        let report = evaluate_sequence(&mut est, &seq, "m1").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let jpath = dir.path().join("r.json");
        emit_json(&report, &jpath).unwrap();
        let back = read_json(&jpath).unwrap();
        assert_eq!(back, report);

        let cpath = dir.path().join("r.csv");
        emit_csv(&report, &cpath).unwrap();
        let text = std::fs::read_to_string(&cpath).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "tau_s,dt_m,dtr,dq_deg");
        let mut data_rows = 0;
        for line in lines {
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4, "CSV must have exactly 4 columns");
            for f in fields {
                f.parse::<f64>().expect("numeric field");
            }
            data_rows += 1;
        }
        assert_eq!(data_rows, 5);
        // degrees in the CSV, radians in the type
        let second = text.lines().nth(1).unwrap();
        let dq_deg: f64 = second.split(',').nth(3).unwrap().parse().unwrap();
        assert!((dq_deg - report.rows[0].dq_rad.to_degrees()).abs() < 1e-9);
    }

    #[test]
    fn empty_report_emits_header_and_summary_only() {
        let report = SequenceReport {
            sequence_id: "empty".into(),
            model_id: "m".into(),
            rows: Vec::new(),
            summary: summarize(&[]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        emit_csv(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "tau_s,dt_m,dtr,dq_deg");
        assert!(lines.all(|l| l.starts_with('#')));
    }

    #[test]
    fn ablation_report_requires_same_sequence_and_builds_deltas() {
        let seq = toy_sequence(6);
        let mut a = ConstantEstimator(seq.frames[0].pose);
        let mut b = ConstantEstimator(seq.frames[3].pose);
        let ra = evaluate_sequence(&mut a, &seq, "arm_a").unwrap();
        let rb = evaluate_sequence(&mut b, &seq, "arm_b").unwrap();
        let rep = ablation_report(&[("a".into(), ra.clone()), ("b".into(), rb.clone())]).unwrap();
        assert_eq!(rep.arms.len(), 2);
        assert_eq!(rep.deltas.len(), 1);
        assert!(
            (rep.deltas[0].d_mean_dq_rad
                - (rb.summary.mean_dq_rad - ra.summary.mean_dq_rad))
                .abs()
                < 1e-12
        );
        // mismatched sequences rejected
        let mut other = toy_sequence(6);
        other.id = "other".into();
        let rc = evaluate_sequence(&mut ConstantEstimator(seq.frames[0].pose), &other, "c").unwrap();
        assert!(ablation_report(&[("a".into(), ra), ("c".into(), rc)]).is_err());
    }

    #[test]
    fn report_bytes_are_deterministic() {
        let seq = toy_sequence(8);
        let make = || {
            let mut est = ConstantEstimator(seq.frames[1].pose);
            let report = evaluate_sequence(&mut est, &seq, "det").unwrap();
            serde_json::to_vec(&report).unwrap()
        };
        assert_eq!(make(), make());
    }
}
