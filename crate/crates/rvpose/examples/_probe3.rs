use rvpose::backbone::Mode;
use rvpose::dataset::Sequence;
use rvpose::diffcore::{Checkpoint, Graph, Rng, Var};
use rvpose::geometry::*;
use rvpose::model::PoseModel;
use rvpose::scenegen::*;

fn gen_one(idx: usize, seed: u64) -> Sequence {
    let target = make_default_target();
    let plan = benchmark_plan(6, 2);
    let entry = &plan[idx];
    let scene = SceneConfig {
        width: 64, height: 64,
        intrinsics: CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0),
        fps: 10.0, duration_s: 60.0,
        sun_dir: entry.sun_dir, glare_strength: entry.glare_factor,
        noise_rgb: 0.01, noise_thermal: 0.01,
        seed: rvpose::diffcore::derive_seed(seed, idx as u64),
    };
    generate_sequence(&entry.id, &entry.guidance, &entry.tumbling, &target, &scene).unwrap()
}

fn window_dq(model: &PoseModel<f32>, seq: &Sequence, start: usize, mode: Mode) -> f64 {
    let mut g = Graph::<f32>::new();
    let frames: Vec<Var> = (0..8).map(|k| {
        let f = &seq.frames[start + k];
        let s = f.image.shape().to_vec();
        g.input(f.image.reshaped(&[1, s[0], s[1], s[2]]))
    }).collect();
    let state = model.zero_state(1);
    let mut rng = Rng::seed_from(1);
    let (outs, _) = model.forward_sequence(&mut g, &frames, &state, mode, &mut rng).unwrap();
    let mut dq_sum = 0.0;
    for (k, &(rv, _tv)) in outs.iter().enumerate() {
        let r = g.value(rv);
        let sixd = SixD(std::array::from_fn(|i| r.data()[i] as f64));
        let rot = sixd_to_rotation(&sixd).unwrap_or(Rotation::identity());
        let q = UnitQuaternion::from_rotation(&rot);
        let qg = UnitQuaternion::from_rotation(&seq.frames[start + k].pose.rotation);
        dq_sum += attitude_error(&q, &qg).to_degrees();
    }
    dq_sum / 8.0
}

fn main() {
    let ck = Checkpoint::load("/tmp/probe2_s2.chkp").unwrap();
    let base_cfg = PoseModel::<f32>::config_from_checkpoint(&ck).unwrap();
    println!("ckpt cfg: dropout {} zoneout {}", base_cfg.backbone.dropout_p, base_cfg.zoneout.zeta_c);

    // variant with dropout and zoneout disabled; same weights
    let mut clean_cfg = base_cfg.clone();
    clean_cfg.backbone.dropout_p = 0.0;
    clean_cfg.zoneout = rvpose::recurrent::ZoneoutConfig::disabled();
    let clean = PoseModel::<f32>::new(&clean_cfg, 0).unwrap();
    println!("loaded {}", clean.load_matching(&ck).unwrap());
    let full = PoseModel::<f32>::new(&base_cfg, 0).unwrap();
    full.load_matching(&ck).unwrap();

    let seq = gen_one(0, 7);
    for start in [100usize, 300] {
        let v1 = window_dq(&clean, &seq, start, Mode::Train);  // batch BN, no noise
        let v2 = window_dq(&clean, &seq, start, Mode::Infer);  // running BN, no noise
        let v3 = window_dq(&full, &seq, start, Mode::Infer);   // running BN + zoneout expectation
        println!("window @{start}: train-BN {v1:.1} deg | infer-BN {v2:.1} deg | full-infer {v3:.1} deg");
    }
}
