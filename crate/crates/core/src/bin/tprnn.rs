//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 input or parse,
//! 5 numeric divergence, 6 i/o.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tprnn::arch::{build_model, Model, ModelConfig, Variant};
use tprnn::eval::{eval_windows, forecast_poses, mae_report, pck_report, Forecaster};
use tprnn::layers::checkpoint::write_atomic;
use tprnn::metrics::{
    horizon_csv, horizon_frame, pck_csv, HorizonReport, DEFAULT_HORIZONS_MS, PCK_THRESHOLD,
};
use tprnn::numcore::Vector;
use tprnn::posedata::{
    load_manifest, load_sequence, synth_multiscale, write_sequence, Dataset, DatasetManifest,
    ManifestEntry, PoseSequence, Space, Split, VelocitySequence, SYNTH_INTERVAL_MS,
};
use tprnn::train::{loss_csv, LossRecord, TrainCheckpoint, TrainConfig, Trainer};
use tprnn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tprnn",
    version,
    about = "Triangular-prism RNN for pose forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-scale dataset with an 80/20 split.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_seq: usize,
        #[arg(long, default_value_t = 400)]
        length: usize,
        #[arg(long, default_value_t = 6)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of both configs.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the loss every this many iterations (0 = never).
        #[arg(long, default_value_t = 0)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Protocol::Mae)]
        protocol: Protocol,
        /// Comma-separated horizons in milliseconds (mae).
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<u32>>,
        /// Future frames to score (pck).
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 50)]
        seed_len: usize,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast poses following a seed CSV.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed_csv: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// `zero` starts from the last seed pose at rest; `estimate` uses the
        /// difference of the last two seed poses as the only velocity.
        #[arg(long, value_enum)]
        init_vel: Option<InitVel>,
        #[arg(long, default_value_t = SYNTH_INTERVAL_MS)]
        interval_ms: f64,
    },
    /// Train and evaluate every ablation variant on identical windows.
    Ablate {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<u32>>,
        #[arg(long, default_value_t = 50)]
        seed_len: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Mae,
    Pck,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitVel {
    Zero,
    Estimate,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 3,
        Error::Input(_) | Error::Parse { .. } | Error::Shape { .. } | Error::Format(_) => 4,
        Error::Numeric { .. } => 5,
        Error::Io { .. } => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            out,
            n_seq,
            length,
            dim,
            seed,
        } => cmd_synth(&out, n_seq, length, dim, seed),
        Command::Train {
            model_config,
            train_config,
            manifest,
            out,
            seed,
            resume,
            log_every,
        } => cmd_train(
            &model_config,
            &train_config,
            &manifest,
            &out,
            seed,
            resume.as_deref(),
            log_every,
        ),
        Command::Eval {
            checkpoint,
            manifest,
            protocol,
            horizons,
            frames,
            seed_len,
            out,
        } => cmd_eval(
            &checkpoint,
            &manifest,
            protocol,
            horizons,
            frames,
            seed_len,
            out.as_deref(),
        ),
        Command::Forecast {
            checkpoint,
            seed_csv,
            steps,
            out,
            init_vel,
            interval_ms,
        } => cmd_forecast(&checkpoint, &seed_csv, steps, &out, init_vel, interval_ms),
        Command::Ablate {
            model_config,
            train_config,
            manifest,
            out,
            seed,
            horizons,
            seed_len,
        } => cmd_ablate(
            &model_config,
            &train_config,
            &manifest,
            &out,
            seed,
            horizons,
            seed_len,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn cmd_synth(out: &Path, n_seq: usize, length: usize, dim: usize, seed: u64) -> Result<()> {
    if n_seq == 0 {
        return Err(Error::Input("n-seq must be at least 1".into()));
    }
    let seqs = synth_multiscale(n_seq, length, dim, seed)?;
    create_dir(out)?;
    let n_train = if n_seq == 1 {
        1
    } else {
        ((n_seq as f64 * 0.8).round() as usize).clamp(1, n_seq - 1)
    };
    let mut entries = Vec::with_capacity(n_seq);
    for (i, s) in seqs.iter().enumerate() {
        let path = out.join(format!("seq_{i:03}.csv"));
        write_sequence(&path, s)?;
        entries.push(ManifestEntry {
            path,
            split: if i < n_train {
                Split::Train
            } else {
                Split::Test
            },
            action: "synthetic".into(),
            dim,
            interval_ms: s.frame_interval_ms,
        });
    }
    let manifest = DatasetManifest {
        entries,
        mask: None,
        space: Space::AngleExpmap,
    };
    write_atomic(&out.join("manifest.txt"), manifest.to_text(out).as_bytes())?;
    eprintln!(
        "wrote {n_seq} sequences ({n_train} train, {} test) to {}",
        n_seq - n_train,
        out.display()
    );
    Ok(())
}

fn load_configs(
    model_config: &Path,
    train_config: &Path,
    seed: Option<u64>,
) -> Result<(ModelConfig, TrainConfig)> {
    let mut mc = ModelConfig::load(model_config)?;
    let mut tc = TrainConfig::load(train_config)?;
    if let Some(s) = seed {
        mc.seed = s;
        tc.seed = s;
    }
    Ok((mc, tc))
}

fn load_dataset(manifest: &Path, dim: usize) -> Result<Dataset> {
    let m = load_manifest(manifest)?;
    let data = Dataset::load(&m)?;
    let data_dim = m.effective_dim().unwrap_or(dim);
    if data_dim != dim {
        return Err(Error::Config {
            field: "dim".into(),
            reason: format!("model dim {dim} but manifest data has dim {data_dim}"),
        });
    }
    Ok(data)
}

/// Rows of an earlier `loss.csv` before `iteration`, so a resumed run
/// writes the same trace as an uninterrupted one.
fn previous_losses(path: &Path, iteration: usize) -> Vec<LossRecord> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let mut f = l.split(',');
            Some(LossRecord {
                iteration: f.next()?.parse().ok()?,
                loss: f.next()?.parse().ok()?,
                lr: f.next()?.parse().ok()?,
            })
        })
        .filter(|r| r.iteration < iteration)
        .collect()
}

fn run_training(
    model: Model,
    data: &Dataset,
    tc: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    log_every: usize,
) -> Result<Model> {
    create_dir(out)?;
    let set = data.training_set()?;
    let loss_path = out.join("loss.csv");
    let (mut trainer, mut losses) = match resume {
        Some(path) => {
            let ck = TrainCheckpoint::load(path)?;
            if ck.model.config != model.config {
                return Err(Error::Config {
                    field: "model".into(),
                    reason: "checkpoint was written for a different model configuration".into(),
                });
            }
            let prev = previous_losses(&loss_path, ck.iteration);
            (Trainer::resume(ck, &set, tc.clone())?, prev)
        }
        None => (Trainer::new(model, &set, tc.clone())?, Vec::new()),
    };
    let result = trainer.run(
        |r| {
            if log_every > 0 && (r.iteration + 1) % log_every == 0 {
                eprintln!(
                    "iteration {} loss {:.6} lr {}",
                    r.iteration + 1,
                    r.loss,
                    r.lr
                );
            }
            losses.push(*r);
        },
        |ck| ck.save(&out.join(format!("checkpoint_{:08}.bin", ck.iteration))),
    );
    write_atomic(&loss_path, loss_csv(&losses).as_bytes())?;
    if let Err(e) = result {
        if matches!(e, Error::Numeric { .. }) {
            let path = out.join("checkpoint_last_finite.bin");
            trainer.checkpoint().save(&path)?;
            eprintln!("diverged; last finite state saved to {}", path.display());
        }
        return Err(e);
    }
    trainer
        .checkpoint()
        .save(&out.join("checkpoint_final.bin"))?;
    Ok(trainer.into_model())
}

fn cmd_train(
    model_config: &Path,
    train_config: &Path,
    manifest: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
    log_every: usize,
) -> Result<()> {
    let (mc, tc) = load_configs(model_config, train_config, seed)?;
    let data = load_dataset(manifest, mc.dim)?;
    let model = build_model(&mc)?;
    eprintln!("{} with {} parameters", mc.variant, model.param_count());
    run_training(model, &data, &tc, out, resume, log_every)?;
    Ok(())
}

fn target_len_for(horizons: &[u32], interval_ms: f64) -> Result<usize> {
    let mut last = 0;
    for &h in horizons {
        last = last.max(horizon_frame(h, interval_ms)?);
    }
    Ok(last + 1)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn interval_of(data: &Dataset) -> Result<f64> {
    data.test
        .first()
        .map(|s| s.frame_interval_ms)
        .ok_or_else(|| Error::Input("manifest has no test sequences".into()))
}

fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    protocol: Protocol,
    horizons: Option<Vec<u32>>,
    frames: usize,
    seed_len: usize,
    out: Option<&Path>,
) -> Result<()> {
    if seed_len < 2 {
        return Err(Error::config("seed_len", "needs at least 2 frames"));
    }
    let model = Model::load(checkpoint)?;
    let data = load_dataset(manifest, model.config.dim)?;
    let interval = interval_of(&data)?;
    let name = model.config.variant.name();
    let text = match protocol {
        Protocol::Mae => {
            let horizons = horizons.unwrap_or_else(|| DEFAULT_HORIZONS_MS.to_vec());
            let target_len = target_len_for(&horizons, interval)?;
            let windows = eval_windows(&data.test, seed_len, target_len);
            let model_report = mae_report(Forecaster::Model(&model), &windows, &horizons)?;
            let zero = mae_report(Forecaster::ZeroVelocity, &windows, &horizons)?;
            horizon_csv(&[(name, &model_report), ("zero_velocity", &zero)])
        }
        Protocol::Pck => {
            if frames == 0 {
                return Err(Error::config("frames", "must be at least 1"));
            }
            let windows = eval_windows(&data.test, seed_len, frames);
            let (m, skipped_m) = pck_report(Forecaster::Model(&model), &windows, PCK_THRESHOLD)?;
            let (z, _) = pck_report(Forecaster::ZeroVelocity, &windows, PCK_THRESHOLD)?;
            if skipped_m > 0 {
                eprintln!("skipped {skipped_m} degenerate frames");
            }
            pck_csv(&[(name, m), ("zero_velocity", z)])
        }
    };
    emit(out, &text)
}

fn cmd_forecast(
    checkpoint: &Path,
    seed_csv: &Path,
    steps: usize,
    out: &Path,
    init_vel: Option<InitVel>,
    interval_ms: f64,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::Input("steps must be at least 1".into()));
    }
    let model = Model::load(checkpoint)?;
    let seed = load_sequence(seed_csv, interval_ms)?;
    let frames = &seed.frames;
    let n = frames.len();
    let velocities = match init_vel {
        None => {
            if n < 2 {
                return Err(Error::Input(format!(
                    "seed has {n} frame; at least 2 are needed without --init-vel"
                )));
            }
            VelocitySequence {
                steps: frames
                    .windows(2)
                    .map(|w| w[1].sub(&w[0]))
                    .collect::<Result<_>>()?,
                origin_pose: frames[0].clone(),
                frame_interval_ms: interval_ms,
            }
        }
        Some(InitVel::Zero) => VelocitySequence {
            steps: vec![Vector::zeros(seed.dim())],
            origin_pose: frames[n - 1].clone(),
            frame_interval_ms: interval_ms,
        },
        Some(InitVel::Estimate) => {
            if n < 2 {
                return Err(Error::Input(
                    "--init-vel estimate needs at least 2 seed frames".into(),
                ));
            }
            VelocitySequence {
                steps: vec![frames[n - 1].sub(&frames[n - 2])?],
                origin_pose: frames[n - 2].clone(),
                frame_interval_ms: interval_ms,
            }
        }
    };
    let poses = forecast_poses(&model, &velocities, &frames[n - 1], steps)?;
    write_sequence(
        out,
        &PoseSequence {
            frames: poses,
            ..seed
        },
    )
}

/// The model config for one rung of the ablation ladder.
fn ablation_config(base: &ModelConfig, variant: Variant) -> ModelConfig {
    let (k, levels) = match variant {
        Variant::SingleLayerPose | Variant::SingleLayerVel => (base.k, 1),
        Variant::Stacked2Vel | Variant::DoubleScaleVel | Variant::DoubleScaleHierVel => (2, 2),
        Variant::DoubleScalePhaseVel => (base.k, 2),
        Variant::TpRnn => (base.k, base.levels.max(2)),
    };
    ModelConfig {
        variant,
        k,
        levels,
        ..base.clone()
    }
}

fn cmd_ablate(
    model_config: &Path,
    train_config: &Path,
    manifest: &Path,
    out: &Path,
    seed: Option<u64>,
    horizons: Option<Vec<u32>>,
    seed_len: usize,
) -> Result<()> {
    let (mc, tc) = load_configs(model_config, train_config, seed)?;
    let data = load_dataset(manifest, mc.dim)?;
    let horizons = horizons.unwrap_or_else(|| DEFAULT_HORIZONS_MS.to_vec());
    let target_len = target_len_for(&horizons, interval_of(&data)?)?;
    let windows = eval_windows(&data.test, seed_len, target_len);
    let mut reports: Vec<(&'static str, HorizonReport)> = Vec::new();
    for variant in Variant::ALL {
        let cfg = ablation_config(&mc, variant);
        let model = build_model(&cfg)?;
        eprintln!("training {variant} ({} parameters)", model.param_count());
        let trained = run_training(model, &data, &tc, &out.join(variant.name()), None, 0)?;
        reports.push((
            variant.name(),
            mae_report(Forecaster::Model(&trained), &windows, &horizons)?,
        ));
    }
    reports.push((
        "zero_velocity",
        mae_report(Forecaster::ZeroVelocity, &windows, &horizons)?,
    ));
    let rows: Vec<(&str, &HorizonReport)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    write_atomic(&out.join("ablation.csv"), horizon_csv(&rows).as_bytes())
}
