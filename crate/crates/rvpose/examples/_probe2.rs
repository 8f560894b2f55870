use rvpose::dataset::Sequence;
use rvpose::diffcore::Checkpoint;
use rvpose::eval::{evaluate_sequence, NetworkEstimator};
use rvpose::geometry::CameraIntrinsics;
use rvpose::model::PoseModel;
use rvpose::scenegen::*;
use rvpose::trainer::*;
use std::time::Instant;

fn gen_all(seed: u64) -> (Vec<Sequence>, Vec<Sequence>) {
    let target = make_default_target();
    let plan = benchmark_plan(6, 2);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, entry) in plan.iter().enumerate() {
        let scene = SceneConfig {
            width: 64, height: 64,
            intrinsics: CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0),
            fps: 10.0, duration_s: 60.0,
            sun_dir: entry.sun_dir,
            glare_strength: entry.glare_factor,
            noise_rgb: 0.01, noise_thermal: 0.01,
            seed: rvpose::diffcore::derive_seed(seed, i as u64),
        };
        let seq = generate_sequence(&entry.id, &entry.guidance, &entry.tumbling, &target, &scene).unwrap();
        if entry.train { train.push(seq) } else { test.push(seq) }
    }
    (train, test)
}

fn main() {
    let (train, test) = gen_all(7);
    let cfg = TrainConfig {
        in_channels: 4,
        widths: vec![8, 16, 32, 64, 128],
        hidden: 96, lstm_layers: 2,
        grid_az: 30, grid_el: 30,
        augment: 0.5, minibatch: 16,
        s2_epochs: 24, s2_lr: 3e-3, freeze_fraction: 0.125,
        seed: 42,
        ..TrainConfig::default()
    };
    let model = PoseModel::<f32>::new(&cfg.model_config(), cfg.seed).unwrap();
    let ck = Checkpoint::load("/tmp/pilot_s1.chkp").unwrap();
    println!("loaded {} tensors from stage 1", model.load_matching(&ck).unwrap());
    let t0 = Instant::now();
    let s2 = train_stage2(&model, &train, &cfg, "h", None).unwrap();
    println!("stage2 {} steps in {:?}", s2.runlog.losses().len(), t0.elapsed());
    s2.runlog.write_ndjson("/tmp/probe2_runlog.ndjson").unwrap();
    s2.checkpoint.save("/tmp/probe2_s2.chkp").unwrap();
    for (e, v) in s2.runlog.epoch_metric("val_dq_deg") { println!("epoch {e}: val_dq {v:.1}"); }
    let losses = s2.runlog.losses();
    println!("loss first20 {:.1} last20 {:.1}",
        losses[..20].iter().sum::<f64>()/20.0,
        losses[losses.len()-20..].iter().sum::<f64>()/20.0);
    for seq in train.iter().take(1).chain(test.iter()) {
        let mut est = NetworkEstimator::new(&model);
        let rep = evaluate_sequence(&mut est, seq, "s2").unwrap();
        println!("{}: mean dq {:.2}  dtr {:.4}", seq.id, rep.summary.mean_dq_rad.to_degrees(), rep.summary.mean_dtr);
    }
}
