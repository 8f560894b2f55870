//! Full estimation network: trunk (backbone), optional recurrent stack,
//! per-stage heads and uncertainty scalars, wired for the three training
//! stages and for stateful streaming inference.
//!
//! Parameter naming is the cross-stage contract: `trunk.*` persists through
//! every stage, `rnn.*` appears from Stage 2 on, `head_cls.*` exists only in
//! Stage 1 checkpoints and `head_reg.*` in Stages 2-3. The model
//! configuration itself rides inside checkpoints as `meta.*` tensors, so a
//! checkpoint file alone is enough to rebuild and run the network.

use crate::backbone::{Backbone, BackboneConfig, Mode};
use crate::diffcore::checkpoint::{Checkpoint, CheckpointError, ParamStore};
use crate::diffcore::graph::{Graph, GraphError, ParamRef, Var};
use crate::diffcore::tensor::{Element, Tensor};
use crate::diffcore::Rng;
use crate::geometry::{sixd_to_rotation, CameraIntrinsics, Pose, Rotation, SixD};
use crate::heads::{build_sigma_pair, PoseHeads};
use crate::recurrent::{detach_state, RecurrentStack, RecurrentState, ZoneoutConfig};

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub zoneout: ZoneoutConfig,
    /// Viewsphere class count for the Stage-1 head.
    pub classes: usize,
    /// false bypasses the recurrent stack (plain CNN ablation).
    pub recurrence: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            hidden: 128,
            lstm_layers: 2,
            zoneout: ZoneoutConfig {
                zeta_c: 0.15,
                zeta_h: 0.15,
            },
            classes: 72,
            recurrence: true,
        }
    }
}

pub struct PoseModel<E: Element> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    pub backbone: Backbone<E>,
    pub rnn: Option<RecurrentStack<E>>,
    pub head_cls: PoseHeads<E>,
    pub head_reg: PoseHeads<E>,
    pub sigma_cls: (ParamRef<E>, ParamRef<E>),
    pub sigma_reg: (ParamRef<E>, ParamRef<E>),
    /// Intrinsics of the training data, recorded for evaluation-time
    /// mismatch warnings: [fx, fy, cx, cy].
    pub trained_intrinsics: std::rc::Rc<std::cell::RefCell<Tensor<E>>>,
}

impl<E: Element> PoseModel<E> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<PoseModel<E>, GraphError> {
        cfg.backbone.validate()?;
        let mut rng = Rng::seed_from(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&cfg.backbone, &mut store, "trunk", &mut rng)?;
        let feat = cfg.backbone.out_channels();
        let rnn = if cfg.recurrence {
            Some(RecurrentStack::build(
                &mut store,
                "rnn",
                feat,
                cfg.hidden,
                cfg.lstm_layers,
                cfg.zoneout,
                &mut rng,
            ))
        } else {
            None
        };
        let reg_feat = if cfg.recurrence { cfg.hidden } else { feat };
        let head_cls = PoseHeads::build(&mut store, "head_cls", feat, cfg.classes, &mut rng);
        let head_reg = PoseHeads::build(&mut store, "head_reg", reg_feat, 6, &mut rng);
        let sigma_cls = build_sigma_pair(&mut store, "sigma.cls_att", "sigma.cls_pos");
        let sigma_reg = build_sigma_pair(&mut store, "sigma.reg_att", "sigma.reg_pos");
        let trained_intrinsics =
            store.register_buffer("meta.intrinsics", Tensor::zeros(&[4]));
        let model = PoseModel {
            cfg: cfg.clone(),
            store,
            backbone,
            rnn,
            head_cls,
            head_reg,
            sigma_cls,
            sigma_reg,
            trained_intrinsics,
        };
        Ok(model)
    }

    pub fn record_intrinsics(&self, k: &CameraIntrinsics) {
        *self.trained_intrinsics.borrow_mut() = Tensor::from_f64s(&[4], &[k.fx, k.fy, k.cx, k.cy]);
    }

    pub fn recorded_intrinsics(&self) -> Option<CameraIntrinsics> {
        let t = self.trained_intrinsics.borrow();
        let d = t.data();
        if d[0].as_f64() > 0.0 {
            Some(CameraIntrinsics::new(
                d[0].as_f64(),
                d[1].as_f64(),
                d[2].as_f64(),
                d[3].as_f64(),
            ))
        } else {
            None
        }
    }

    /// Trunk parameter names (persist across all stages).
    pub fn trunk_params(&self) -> Vec<ParamRef<E>> {
        self.store
            .params()
            .iter()
            .filter(|p| p.name().starts_with("trunk."))
            .cloned()
            .collect()
    }

    pub fn set_trunk_trainable(&self, trainable: bool) {
        for p in self.trunk_params() {
            p.set_trainable(trainable);
        }
    }

    /// Stage-1 forward: backbone pooled features straight into the
    /// classification heads. Returns (logits [N,K], t̂ [N,3]).
    pub fn forward_stage1(
        &self,
        g: &mut Graph<E>,
        images: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, Var), GraphError> {
        let feat = self.backbone.forward(g, images, mode, rng)?;
        self.head_cls.forward(g, feat.pooled)
    }

    /// Sequence forward for Stages 2-3 and inference: trunk features for the
    /// whole window in one batched pass (batch-norm statistics then cover
    /// T·B samples instead of B), then the recurrent stack (or a direct
    /// bypass in cnn-only mode), then the regression heads per time-step.
    /// Returns per-step (r̂ [N,6], t̂ [N,3]) and the per-step state handles.
    pub fn forward_sequence(
        &self,
        g: &mut Graph<E>,
        frames: &[Var],
        state_in: &RecurrentState<E>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Vec<(Var, Var)>, Vec<crate::recurrent::StateVars>), GraphError> {
        let batch = g.shape(frames[0])[0];
        let stacked = if frames.len() == 1 {
            frames[0]
        } else {
            g.concat(frames, 0)?
        };
        let feat = self.backbone.forward(g, stacked, mode, rng)?;
        let mut pooled = Vec::with_capacity(frames.len());
        for k in 0..frames.len() {
            pooled.push(g.slice(feat.pooled, 0, k * batch, batch)?);
        }
        let (features, states) = match &self.rnn {
            Some(rnn) => rnn.forward(g, &pooled, state_in, mode, rng)?,
            None => (pooled, Vec::new()),
        };
        let mut outs = Vec::with_capacity(features.len());
        for &y in &features {
            outs.push(self.head_reg.forward(g, y)?);
        }
        Ok((outs, states))
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState<E> {
        match &self.rnn {
            Some(rnn) => RecurrentState::zeros(rnn.num_layers(), rnn.hidden, batch),
            None => RecurrentState::zeros(1, 1, batch),
        }
    }

    // ------------------------------------------------------------------
    // checkpointing
    // ------------------------------------------------------------------

    fn meta_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let c = &self.cfg;
        let widths: Vec<f64> = c.backbone.widths.iter().map(|&w| w as f64).collect();
        ck.insert(
            "meta.widths",
            &Tensor::<E>::from_f64s(&[widths.len()], &widths),
        );
        ck.insert(
            "meta.arch",
            &Tensor::<E>::from_f64s(
                &[8],
                &[
                    c.backbone.in_channels as f64,
                    c.backbone.first_kernel as f64,
                    c.backbone.dropout_p,
                    c.backbone.blocks_per_stage as f64,
                    c.hidden as f64,
                    c.lstm_layers as f64,
                    c.classes as f64,
                    if c.recurrence { 1.0 } else { 0.0 },
                ],
            ),
        );
        ck.insert(
            "meta.zoneout",
            &Tensor::<E>::from_f64s(&[2], &[c.zoneout.zeta_c, c.zoneout.zeta_h]),
        );
        ck
    }

    /// Checkpoint restricted to the given stage's parameter families.
    pub fn checkpoint_for_stage(&self, stage: u8) -> Checkpoint {
        let keep: &[&str] = match stage {
            1 => &["trunk.", "head_cls.", "sigma.cls"],
            2 => &["trunk.", "rnn.", "head_reg.", "sigma.reg"],
            _ => &["trunk.", "rnn.", "head_reg."],
        };
        let full = self.store.to_checkpoint();
        let mut ck = self.meta_checkpoint();
        for name in full.names() {
            if keep.iter().any(|p| name.starts_with(p)) || name.starts_with("meta.intrinsics") {
                // re-insert from the full snapshot
                if let Some(e) = full.get(name) {
                    let t: Tensor<E> = e.to_tensor(name).expect("self-written entry");
                    ck.insert(name, &t);
                }
            }
        }
        ck
    }

    /// Loads every intersecting entry; returns how many tensors matched.
    pub fn load_matching(&self, ck: &Checkpoint) -> Result<usize, CheckpointError> {
        self.store.load_matching(ck)
    }

    /// Rebuilds the configuration recorded in a checkpoint's meta entries.
    pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<ModelConfig, CheckpointError> {
        let widths: Tensor<E> = ck
            .get("meta.widths")
            .ok_or_else(|| CheckpointError::Missing("meta.widths".into()))?
            .to_tensor("meta.widths")?;
        let arch: Tensor<E> = ck
            .get("meta.arch")
            .ok_or_else(|| CheckpointError::Missing("meta.arch".into()))?
            .to_tensor("meta.arch")?;
        let zo: Tensor<E> = ck
            .get("meta.zoneout")
            .ok_or_else(|| CheckpointError::Missing("meta.zoneout".into()))?
            .to_tensor("meta.zoneout")?;
        let a = arch.data();
        Ok(ModelConfig {
            backbone: BackboneConfig {
                in_channels: a[0].as_f64() as usize,
                widths: widths.data().iter().map(|w| w.as_f64() as usize).collect(),
                first_kernel: a[1].as_f64() as usize,
                dropout_p: a[2].as_f64(),
                blocks_per_stage: a[3].as_f64() as usize,
            },
            hidden: a[4].as_f64() as usize,
            lstm_layers: a[5].as_f64() as usize,
            zoneout: ZoneoutConfig {
                zeta_c: zo.data()[0].as_f64(),
                zeta_h: zo.data()[1].as_f64(),
            },
            classes: a[6].as_f64() as usize,
            recurrence: a[7].as_f64() != 0.0,
        })
    }

    /// Full reconstruction from a checkpoint file: config from meta entries,
    /// weights by name.
    pub fn from_checkpoint_file(
        path: impl AsRef<std::path::Path>,
        seed: u64,
    ) -> Result<(PoseModel<E>, Checkpoint), ModelLoadError> {
        let ck = Checkpoint::load(&path)?;
        let cfg = Self::config_from_checkpoint(&ck)?;
        let model = PoseModel::new(&cfg, seed).map_err(ModelLoadError::Build)?;
        model.load_matching(&ck)?;
        Ok((model, ck))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelLoadError {
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("model build: {0}")]
    Build(GraphError),
}

/// Stateful frame-by-frame estimator. Keeps the recurrent state across
/// frames the way a deployed pipeline does: fresh zero state at the start
/// of a sequence, carried thereafter.
pub struct StreamingEstimator<'m, E: Element> {
    model: &'m PoseModel<E>,
    state: RecurrentState<E>,
    /// Count of frames where Gram-Schmidt failed and identity attitude was
    /// substituted.
    pub degenerate_frames: usize,
}

impl<'m, E: Element> StreamingEstimator<'m, E> {
    pub fn new(model: &'m PoseModel<E>) -> StreamingEstimator<'m, E> {
        StreamingEstimator {
            model,
            state: model.zero_state(1),
            degenerate_frames: 0,
        }
    }

    pub fn reset(&mut self) {
        self.state = self.model.zero_state(1);
        self.degenerate_frames = 0;
    }

    /// Estimates the pose of one [C,H,W] frame, advancing the recurrent
    /// state. Degenerate attitude outputs fall back to the identity
    /// rotation rather than aborting.
    pub fn estimate(&mut self, image: &Tensor<f32>) -> Result<Pose, GraphError> {
        let mut rng = Rng::seed_from(0); // inference consumes no randomness
        let mut g = Graph::<E>::new();
        let shape = image.shape();
        let batched: Tensor<E> = image
            .reshaped(&[1, shape[0], shape[1], shape[2]])
            .cast::<E>();
        let x = g.input(batched);
        let (outs, states) =
            self.model
                .forward_sequence(&mut g, &[x], &self.state, Mode::Infer, &mut rng)?;
        if let Some(last) = states.last() {
            self.state = detach_state(&g, last);
        }
        let (r_var, t_var) = outs[0];
        let r = g.value(r_var);
        let t = g.value(t_var);
        let sixd = SixD([
            r.data()[0].as_f64(),
            r.data()[1].as_f64(),
            r.data()[2].as_f64(),
            r.data()[3].as_f64(),
            r.data()[4].as_f64(),
            r.data()[5].as_f64(),
        ]);
        let rotation = match sixd_to_rotation(&sixd) {
            Ok(rot) => rot,
            Err(_) => {
                self.degenerate_frames += 1;
                Rotation::identity()
            }
        };
        Ok(Pose::new(
            rotation,
            [
                t.data()[0].as_f64(),
                t.data()[1].as_f64(),
                t.data()[2].as_f64(),
            ],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(recurrence: bool) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 4,
                widths: vec![2, 4],
                first_kernel: 3,
                dropout_p: 0.0,
                blocks_per_stage: 1,
            },
            hidden: 6,
            lstm_layers: 1,
            zoneout: ZoneoutConfig::disabled(),
            classes: 8,
            recurrence,
        }
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_config() {
        let cfg = tiny_config(true);
        let model = PoseModel::<f32>::new(&cfg, 1).unwrap();
        model.record_intrinsics(&CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.chkp");
        model.checkpoint_for_stage(2).save(&path).unwrap();
        let (loaded, _) = PoseModel::<f32>::from_checkpoint_file(&path, 2).unwrap();
        assert_eq!(loaded.cfg.hidden, cfg.hidden);
        assert_eq!(loaded.cfg.classes, cfg.classes);
        assert_eq!(loaded.cfg.backbone.widths, cfg.backbone.widths);
        assert!(loaded.cfg.recurrence);
        let k = loaded.recorded_intrinsics().unwrap();
        assert_eq!(k.fx, 8.0);
        // trunk weights actually transferred
        let a = model
            .store
            .params()
            .iter()
            .find(|p| p.name() == "trunk.stem.conv.w")
            .unwrap()
            .value();
        let b = loaded
            .store
            .params()
            .iter()
            .find(|p| p.name() == "trunk.stem.conv.w")
            .unwrap()
            .value();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn stage_checkpoints_share_trunk_but_differ_in_heads() {
        let model = PoseModel::<f32>::new(&tiny_config(true), 3).unwrap();
        let s1 = model.checkpoint_for_stage(1);
        let s2 = model.checkpoint_for_stage(2);
        let trunk1: Vec<&str> = s1.names().filter(|n| n.starts_with("trunk.")).collect();
        let trunk2: Vec<&str> = s2.names().filter(|n| n.starts_with("trunk.")).collect();
        assert_eq!(trunk1, trunk2, "trunk names identical across stages");
        assert!(s1.names().any(|n| n.starts_with("head_cls.")));
        assert!(!s1.names().any(|n| n.starts_with("head_reg.")));
        assert!(s2.names().any(|n| n.starts_with("head_reg.")));
        assert!(!s2.names().any(|n| n.starts_with("head_cls.")));
        assert!(!s2.names().any(|n| n.starts_with("rnn."))  == model.rnn.is_none());
    }

    #[test]
    fn trunk_weights_interop_between_modes() {
        // cnn-only and recurrent variants share trunk names, so checkpoints
        // flow between them
        let drcnn = PoseModel::<f32>::new(&tiny_config(true), 4).unwrap();
        let cnn = PoseModel::<f32>::new(&tiny_config(false), 5).unwrap();
        let ck = drcnn.checkpoint_for_stage(2);
        let loaded = cnn.load_matching(&ck).unwrap();
        assert!(loaded > 0);
        let a = drcnn
            .store
            .params()
            .iter()
            .find(|p| p.name() == "trunk.stem.conv.w")
            .unwrap()
            .value();
        let b = cnn
            .store
            .params()
            .iter()
            .find(|p| p.name() == "trunk.stem.conv.w")
            .unwrap()
            .value();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cnn_only_outputs_are_order_equivariant() {
        let model = PoseModel::<f32>::new(&tiny_config(false), 6).unwrap();
        let mut rng = Rng::seed_from(7);
        let frames: Vec<Tensor<f32>> = (0..3)
            .map(|_| Tensor::rand_uniform(&[1, 4, 8, 8], 0.0, 1.0, &mut rng))
            .collect();
        let run = |order: &[usize]| {
            let mut g = Graph::<f32>::new();
            let vars: Vec<Var> = order.iter().map(|&i| g.input(frames[i].clone())).collect();
            let state = model.zero_state(1);
            let mut r = Rng::seed_from(0);
            let (outs, _) = model
                .forward_sequence(&mut g, &vars, &state, Mode::Infer, &mut r)
                .unwrap();
            outs.iter()
                .map(|&(rv, _)| g.value(rv).data().to_vec())
                .collect::<Vec<_>>()
        };
        let fwd = run(&[0, 1, 2]);
        let rev = run(&[2, 1, 0]);
        assert_eq!(fwd[0], rev[2], "permuting frames permutes outputs");
        assert_eq!(fwd[2], rev[0]);
    }

    #[test]
    fn drcnn_outputs_depend_on_order() {
        let model = PoseModel::<f32>::new(&tiny_config(true), 8).unwrap();
        let mut rng = Rng::seed_from(9);
        let frames: Vec<Tensor<f32>> = (0..3)
            .map(|_| Tensor::rand_uniform(&[1, 4, 8, 8], 0.0, 1.0, &mut rng))
            .collect();
        let run = |order: &[usize]| {
            let mut g = Graph::<f32>::new();
            let vars: Vec<Var> = order.iter().map(|&i| g.input(frames[i].clone())).collect();
            let state = model.zero_state(1);
            let mut r = Rng::seed_from(0);
            let (outs, _) = model
                .forward_sequence(&mut g, &vars, &state, Mode::Infer, &mut r)
                .unwrap();
            g.value(outs.last().unwrap().0).data().to_vec()
        };
        assert_ne!(run(&[0, 1, 2]), run(&[2, 1, 0]));
    }

    #[test]
    fn streaming_estimator_matches_batch_forward() {
        let model = PoseModel::<f32>::new(&tiny_config(true), 10).unwrap();
        let mut rng = Rng::seed_from(11);
        let frames: Vec<Tensor<f32>> = (0..4)
            .map(|_| Tensor::rand_uniform(&[4, 8, 8], 0.0, 1.0, &mut rng))
            .collect();
        let mut est = StreamingEstimator::new(&model);
        let mut streamed = Vec::new();
        for f in &frames {
            streamed.push(est.estimate(f).unwrap());
        }
        // whole-sequence forward
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = frames
            .iter()
            .map(|f| g.input(f.reshaped(&[1, 4, 8, 8])))
            .collect();
        let state = model.zero_state(1);
        let mut r = Rng::seed_from(0);
        let (outs, _) = model
            .forward_sequence(&mut g, &vars, &state, Mode::Infer, &mut r)
            .unwrap();
        for (k, &(rv, tv)) in outs.iter().enumerate() {
            let r6 = g.value(rv);
            let sixd = SixD(std::array::from_fn(|i| r6.data()[i] as f64));
            let want = sixd_to_rotation(&sixd).unwrap();
            let got = streamed[k].rotation;
            for (a, b) in want.matrix().iter().zip(got.matrix()) {
                assert!((a - b).abs() < 1e-5, "frame {k}");
            }
            let t = g.value(tv);
            for i in 0..3 {
                assert!((t.data()[i] as f64 - streamed[k].position[i]).abs() < 1e-5);
            }
        }
    }
}
