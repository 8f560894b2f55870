//! Command-line surface: dataset generation, per-stage training, sequence
//! evaluation, the gradient-check suite, paired ablations and report
//! merging. Exit codes: 0 success, 2 configuration error, 3 numeric error.

use crate::dataset::{dir_hash, read_sequence, stage1_resample, write_sequence, Sequence};
use crate::diffcore::{GraphError, Rng};
use crate::eval::{
    ablation_report, emit_csv, emit_json, evaluate_sequence, intrinsics_mismatch_warning,
    read_json, NetworkEstimator, SequenceReport,
};
use crate::geometry::{CameraIntrinsics, ViewsphereGrid};
use crate::model::PoseModel;
use crate::scenegen::{benchmark_plan, generate_sequence, make_default_target, SceneConfig};
use crate::trainer::{
    train_stage1, train_stage2, train_stage3, GenConfig, TrainConfig, TrainError,
};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "rvpose",
    about = "6-DoF pose estimation for rendezvous sequences: dataset generation, three-stage training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark dataset (train + held-out sequences).
    Gen {
        /// Flat TOML config; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage, reading train* sequences from the dataset dir.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint initializing the trunk (and any matching weights).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint over sequences, emitting per-frame reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only sequences whose id contains this substring.
        #[arg(long)]
        sequence: Option<String>,
        #[arg(long, value_enum, default_value = "both")]
        format: ReportFormat,
    },
    /// Run the finite-difference suites over every differentiable primitive.
    Gradcheck {
        /// Seeds per checked input role.
        #[arg(long, default_value = "20")]
        seeds: u64,
    },
    /// Paired evaluation of several checkpoints over the same sequences.
    Ablate {
        /// name=checkpoint, repeatable; the first arm is the baseline.
        #[arg(long = "arm", required = true)]
        arms: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequence: Option<String>,
    },
    /// Merge JSON reports into one summary table.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point taking explicit arguments (testable); returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints usage itself; unknown flags are config errors
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn train_err(e: TrainError) -> CliError {
    match &e {
        TrainError::NonFiniteGrad { .. } | TrainError::Diverged { .. } => {
            CliError::Numeric(e.to_string())
        }
        TrainError::Graph(GraphError::Numeric { .. }) => CliError::Numeric(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Gen { config, out, seed } => cmd_gen(config.as_deref(), &out, seed),
        Command::Train {
            stage,
            config,
            data,
            out,
            init,
            seed,
        } => cmd_train(stage, config.as_deref(), &data, &out, init.as_deref(), seed),
        Command::Eval {
            checkpoint,
            data,
            out,
            sequence,
            format,
        } => cmd_eval(&checkpoint, &data, &out, sequence.as_deref(), format),
        Command::Gradcheck { seeds } => cmd_gradcheck(seeds),
        Command::Ablate {
            arms,
            data,
            out,
            sequence,
        } => cmd_ablate(&arms, &data, &out, sequence.as_deref()),
        Command::Report { inputs, out } => cmd_report(&inputs, out.as_deref()),
    }
}

fn load_gen_config(path: Option<&Path>) -> Result<GenConfig, CliError> {
    match path {
        None => Ok(GenConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(config_err)?;
            GenConfig::from_toml_str(&text).map_err(config_err)
        }
    }
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(config_err)?;
            TrainConfig::from_toml_str(&text).map_err(config_err)
        }
    }
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_gen_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(out).map_err(config_err)?;
    let model = make_default_target();
    let plan = benchmark_plan(cfg.train_sequences, cfg.test_sequences);
    let mut hashes = Vec::new();
    for (i, entry) in plan.iter().enumerate() {
        let duration = cfg.durations[i % cfg.durations.len()];
        let scene = SceneConfig {
            width: cfg.width,
            height: cfg.height,
            intrinsics: CameraIntrinsics::new(
                cfg.focal,
                cfg.focal,
                cfg.width as f64 / 2.0,
                cfg.height as f64 / 2.0,
            ),
            fps: cfg.fps,
            duration_s: duration,
            sun_dir: entry.sun_dir,
            glare_strength: cfg.glare * entry.glare_factor,
            noise_rgb: cfg.noise_rgb,
            noise_thermal: cfg.noise_thermal,
            seed: crate::diffcore::derive_seed(cfg.seed, i as u64),
        };
        let seq = generate_sequence(&entry.id, &entry.guidance, &entry.tumbling, &model, &scene)
            .map_err(config_err)?;
        let dir = out.join(&entry.id);
        write_sequence(&seq, &dir).map_err(config_err)?;
        let h = dir_hash(&dir).map_err(config_err)?;
        println!("{}  {} frames  {}", entry.id, seq.len(), h);
        hashes.push(format!("{} {h}", entry.id));
    }
    // combined content hash over the per-sequence hashes, written beside the
    // data (not under any sequence dir, so it never hashes itself)
    let mut digest = Sha256::new();
    for line in &hashes {
        digest.update(line.as_bytes());
        digest.update(b"\n");
    }
    let combined: String = digest
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let mut body = hashes.join("\n");
    body.push_str(&format!("\ncombined {combined}\n"));
    std::fs::write(out.join("dataset_hash.txt"), body).map_err(config_err)?;
    println!("dataset {combined}");
    Ok(())
}

/// Reads every sequence whose directory name starts with the prefix.
fn load_sequences(data: &Path, prefix: &str) -> Result<Vec<Sequence>, CliError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(data)
        .map_err(config_err)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .map(|n| n.to_string_lossy().starts_with(prefix))
                    .unwrap_or(false)
                && p.join("manifest.json").exists()
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Config(format!(
            "no `{prefix}*` sequences under {}",
            data.display()
        )));
    }
    dirs.iter()
        .map(|d| read_sequence(d).map_err(config_err))
        .collect()
}

fn cmd_train(
    stage: u8,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    if !(1..=3).contains(&stage) {
        return Err(CliError::Config(format!("stage must be 1..3, got {stage}")));
    }
    let mut cfg = load_train_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(out).map_err(config_err)?;
    let sequences = load_sequences(data, "train")?;
    let data_hash = dir_hash(data).map_err(config_err)?;

    let model = PoseModel::<f32>::new(&cfg.model_config(), cfg.seed).map_err(config_err)?;
    if let Some(init_path) = init {
        let ck = crate::diffcore::Checkpoint::load(init_path).map_err(config_err)?;
        let n = model.load_matching(&ck).map_err(config_err)?;
        println!("loaded {n} tensors from {}", init_path.display());
    }

    let output = match stage {
        1 => {
            let grid = ViewsphereGrid::new(cfg.grid_az, cfg.grid_el).map_err(config_err)?;
            let mut rng = Rng::seed_from(cfg.seed ^ 0x5EED);
            let samples =
                stage1_resample(&sequences, &grid, cfg.k_t, cfg.n_per_class, &mut rng);
            println!(
                "stage 1: {} resampled observations over {} classes",
                samples.len(),
                samples.len() / cfg.n_per_class.max(1)
            );
            train_stage1(
                &model,
                &samples,
                &sequences[0].intrinsics,
                &grid,
                &cfg,
                &data_hash,
                Some(out),
            )
            .map_err(train_err)?
        }
        2 => train_stage2(&model, &sequences, &cfg, &data_hash, Some(out)).map_err(train_err)?,
        _ => train_stage3(&model, &sequences, &cfg, &data_hash, Some(out)).map_err(train_err)?,
    };
    let ck_path = out.join(format!("stage{stage}.chkp"));
    output.checkpoint.save(&ck_path).map_err(config_err)?;
    output
        .runlog
        .write_ndjson(out.join(format!("stage{stage}_runlog.ndjson")))
        .map_err(config_err)?;
    print!("stage {stage} done:");
    for (k, v) in &output.final_val {
        print!(" {k}={v:.4}");
    }
    println!("\ncheckpoint {}", ck_path.display());
    Ok(())
}

fn model_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "model".to_string())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    sequence: Option<&str>,
    format: ReportFormat,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(config_err)?;
    let (model, _) = PoseModel::<f32>::from_checkpoint_file(checkpoint, 0).map_err(config_err)?;
    let model_id = model_id_of(checkpoint);
    let sequences = load_sequences(data, "")?;
    let mut evaluated = 0usize;
    for seq in &sequences {
        if let Some(filter) = sequence {
            if !seq.id.contains(filter) {
                continue;
            }
        }
        if let Some(warning) = intrinsics_mismatch_warning(&model, seq) {
            eprintln!("warning: {warning}");
        }
        let mut est = NetworkEstimator::new(&model);
        let report = evaluate_sequence(&mut est, seq, &model_id)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let s = &report.summary;
        println!(
            "{}  mean dt={:.3} m  dtr={:.4}  dq={:.2} deg  (median {:.3}/{:.4}/{:.2})",
            seq.id,
            s.mean_dt_m,
            s.mean_dtr,
            s.mean_dq_rad.to_degrees(),
            s.median_dt_m,
            s.median_dtr,
            s.median_dq_rad.to_degrees()
        );
        let base = out.join(format!("{}_{model_id}", seq.id));
        match format {
            ReportFormat::Csv => {
                emit_csv(&report, base.with_extension("csv")).map_err(config_err)?
            }
            ReportFormat::Json => {
                emit_json(&report, base.with_extension("json")).map_err(config_err)?
            }
            ReportFormat::Both => {
                emit_csv(&report, base.with_extension("csv")).map_err(config_err)?;
                emit_json(&report, base.with_extension("json")).map_err(config_err)?;
            }
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(CliError::Config("no sequences matched".into()));
    }
    Ok(())
}

fn cmd_gradcheck(seeds: u64) -> Result<(), CliError> {
    let results = crate::gradsuite::run_full_suite(seeds);
    let mut all_pass = true;
    for r in &results {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<28} max rel err {:.3e}  ({} seeds)",
            r.name, r.max_rel_err, r.seeds
        );
        all_pass &= r.passed();
    }
    if all_pass {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(CliError::Numeric(
            "gradient checks exceeded tolerance".into(),
        ))
    }
}

fn cmd_ablate(
    arms: &[String],
    data: &Path,
    out: &Path,
    sequence: Option<&str>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(config_err)?;
    let parsed: Vec<(String, PathBuf)> = arms
        .iter()
        .map(|a| {
            a.split_once('=')
                .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
                .ok_or_else(|| CliError::Config(format!("--arm wants name=checkpoint, got `{a}`")))
        })
        .collect::<Result<_, _>>()?;
    if parsed.len() < 2 {
        return Err(CliError::Config("ablate needs at least two arms".into()));
    }
    let sequences = load_sequences(data, "test")?;
    let mut wrote = 0usize;
    for seq in &sequences {
        if let Some(filter) = sequence {
            if !seq.id.contains(filter) {
                continue;
            }
        }
        let mut reports: Vec<(String, SequenceReport)> = Vec::new();
        for (name, path) in &parsed {
            let (model, _) =
                PoseModel::<f32>::from_checkpoint_file(path, 0).map_err(config_err)?;
            let mut est = NetworkEstimator::new(&model);
            let report = evaluate_sequence(&mut est, seq, name)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            reports.push((name.clone(), report));
        }
        let ab = ablation_report(&reports).map_err(config_err)?;
        println!("sequence {}", seq.id);
        for arm in &ab.arms {
            println!(
                "  {:<12} mean dt={:.3}  dtr={:.4}  dq={:.2} deg  max dt={:.3}",
                arm.name,
                arm.summary.mean_dt_m,
                arm.summary.mean_dtr,
                arm.summary.mean_dq_rad.to_degrees(),
                arm.max_dt_m
            );
        }
        for d in &ab.deltas {
            println!(
                "  {} - {}: d_mean_dt={:+.3}  d_max_dt={:+.3}  d_dq={:+.2} deg",
                d.name,
                d.versus,
                d.d_mean_dt_m,
                d.d_max_dt_m,
                d.d_mean_dq_rad.to_degrees()
            );
        }
        let path = out.join(format!("ablation_{}.json", seq.id));
        std::fs::write(&path, serde_json::to_vec_pretty(&ab).map_err(config_err)?)
            .map_err(config_err)?;
        wrote += 1;
    }
    if wrote == 0 {
        return Err(CliError::Config("no sequences matched".into()));
    }
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for path in inputs {
        let r = read_json(path).map_err(config_err)?;
        rows.push(r);
    }
    rows.sort_by(|a, b| {
        (a.model_id.clone(), a.sequence_id.clone())
            .cmp(&(b.model_id.clone(), b.sequence_id.clone()))
    });
    let mut table = String::new();
    table.push_str(&format!(
        "{:<14} {:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "model", "sequence", "mean_dt", "med_dt", "mean_dtr", "med_dtr", "mean_dq", "med_dq"
    ));
    for r in &rows {
        let s = &r.summary;
        table.push_str(&format!(
            "{:<14} {:<10} {:>9.3} {:>9.3} {:>9.4} {:>9.4} {:>9.2} {:>9.2}\n",
            r.model_id,
            r.sequence_id,
            s.mean_dt_m,
            s.median_dt_m,
            s.mean_dtr,
            s.median_dtr,
            s.mean_dq_rad.to_degrees(),
            s.median_dq_rad.to_degrees()
        ));
    }
    print!("{table}");
    if let Some(path) = out {
        std::fs::write(path, table).map_err(config_err)?;
    }
    Ok(())
}
