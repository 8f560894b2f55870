use rvpose::dataset::Sequence;
use rvpose::eval::{evaluate_sequence, NetworkEstimator};
use rvpose::geometry::CameraIntrinsics;
use rvpose::model::PoseModel;
use rvpose::scenegen::*;

fn gen_one(id_index: usize, seed: u64) -> Sequence {
    let target = make_default_target();
    let plan = benchmark_plan(6, 2);
    let entry = &plan[id_index];
    let scene = SceneConfig {
        width: 64, height: 64,
        intrinsics: CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0),
        fps: 10.0, duration_s: 60.0,
        sun_dir: entry.sun_dir,
        glare_strength: entry.glare_factor,
        noise_rgb: 0.01, noise_thermal: 0.01,
        seed: rvpose::diffcore::derive_seed(seed, id_index as u64),
    };
    generate_sequence(&entry.id, &entry.guidance, &entry.tumbling, &target, &scene).unwrap()
}

fn main() {
    let (model, _) = PoseModel::<f32>::from_checkpoint_file("/tmp/pilot_s2.chkp", 0).unwrap();
    for idx in [0usize, 2] {
        let seq = gen_one(idx, 7);
        let mut est = NetworkEstimator::new(&model);
        let rep = evaluate_sequence(&mut est, &seq, "s2").unwrap();
        println!("{} (TRAIN): mean dq {:.2} deg  dtr {:.4}", seq.id, rep.summary.mean_dq_rad.to_degrees(), rep.summary.mean_dtr);
        // per-frame dq profile, every 100th frame
        for r in rep.rows.iter().step_by(100) {
            println!("   tau {:5.1}  dq {:6.1} deg  dtr {:.4}", r.tau_s, r.dq_rad.to_degrees(), r.dtr);
        }
    }
}
