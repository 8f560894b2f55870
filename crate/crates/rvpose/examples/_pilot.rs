use rvpose::dataset::{stage1_resample, Sequence};
use rvpose::diffcore::{Checkpoint, Rng};
use rvpose::eval::{evaluate_sequence, NetworkEstimator};
use rvpose::geometry::{CameraIntrinsics, ViewsphereGrid};
use rvpose::model::PoseModel;
use rvpose::scenegen::*;
use rvpose::trainer::*;
use std::time::Instant;

fn gen_dataset(seed: u64) -> (Vec<Sequence>, Vec<Sequence>) {
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
    let t0 = Instant::now();
    let (train, test) = gen_dataset(7);
    println!("gen {} train + {} test in {:?}", train.len(), test.len(), t0.elapsed());

    let cfg = TrainConfig {
        in_channels: 4,
        widths: vec![8, 16, 32, 64, 128],
        hidden: 96, lstm_layers: 2,
        grid_az: 30, grid_el: 30, k_t: 5, n_per_class: 24,
        augment: 0.5, minibatch: 16,
        s1_epochs: 12, s1_lr: 2e-3,
        s2_epochs: 8, s2_lr: 1e-3,
        s3_epochs: 5, s3_lr: 1e-4,
        seed: 42,
        ..TrainConfig::default()
    };
    let grid = ViewsphereGrid::new(30, 30).unwrap();
    let mut rng = Rng::seed_from(cfg.seed ^ 0x5EED);
    let t1 = Instant::now();
    let samples = stage1_resample(&train, &grid, cfg.k_t, cfg.n_per_class, &mut rng);
    println!("resample {} samples ({} classes) in {:?}", samples.len(), samples.len()/cfg.n_per_class, t1.elapsed());

    let model = PoseModel::<f32>::new(&cfg.model_config(), cfg.seed).unwrap();
    println!("params {}", model.store.param_count());
    let t2 = Instant::now();
    let s1 = train_stage1(&model, &samples, &train[0].intrinsics, &grid, &cfg, "h", None).unwrap();
    println!("stage1 {} steps in {:?} val {:?}", s1.runlog.losses().len(), t2.elapsed(), s1.final_val);
    s1.checkpoint.save("/tmp/pilot_s1.chkp").unwrap();

    let t3 = Instant::now();
    let s2 = train_stage2(&model, &train, &cfg, "h", None).unwrap();
    println!("stage2 {} steps in {:?} val {:?}", s2.runlog.losses().len(), t3.elapsed(), s2.final_val);
    s2.checkpoint.save("/tmp/pilot_s2.chkp").unwrap();

    let t4 = Instant::now();
    let s3 = train_stage3(&model, &train, &cfg, "h", None).unwrap();
    println!("stage3 {} steps in {:?} val {:?}", s3.runlog.losses().len(), t4.elapsed(), s3.final_val);
    // load best-val checkpoint into the model for evaluation
    model.load_matching(&s3.checkpoint).unwrap();
    s3.checkpoint.save("/tmp/pilot_s3.chkp").unwrap();

    for seq in &test {
        let mut est = NetworkEstimator::new(&model);
        let rep = evaluate_sequence(&mut est, seq, "pilot").unwrap();
        println!("{}: mean dq {:.2} deg  dtr {:.4}  dt {:.3} m", seq.id,
            rep.summary.mean_dq_rad.to_degrees(), rep.summary.mean_dtr, rep.summary.mean_dt_m);
    }
    println!("total {:?}", t0.elapsed());
    let _ = Checkpoint::load("/tmp/pilot_s1.chkp").unwrap();
}
