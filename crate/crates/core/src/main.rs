use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use partseg::data::{
    corrupt_labels, curate, dataset_read, dataset_write, generate_dataset, train_validator, CurateConfig, SynthConfig,
    ValidatorConfig, ValidatorModel,
};
use partseg::decoder::DecoderConfig;
use partseg::encoder::{train_encoder, EncoderConfig, EncoderTrainConfig};
use partseg::inference::{benchmark, evaluate, sweep_deltas, EvalConfig, EvalMode, DEFAULT_THETA};
use partseg::model::SegModel;
use partseg::training::{train_decoder, DecoderTrainConfig, SegLossConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "partseg", version, about = "Scale-aware point-prompted 3D part segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Interactive,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labelled clouds.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long, default_value_t = 2)]
        min_parts: usize,
        #[arg(long, default_value_t = 8)]
        max_parts: usize,
    },
    /// Quality filter, connectivity refinement and part-count filter.
    Curate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        validator: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        #[arg(long, default_value_t = partseg::data::DEFAULT_EPS_FACTOR)]
        eps_factor: f32,
        #[arg(long, default_value_t = partseg::data::DEFAULT_MIN_PTS)]
        min_pts: usize,
    },
    /// Train the annotation validator on clean vs label-corrupted clouds.
    TrainValidator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        corrupt_fraction: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Contrastive encoder training; writes a model bundle with a fresh decoder.
    TrainEncoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-5)]
        lr: f32,
        #[arg(long, default_value_t = partseg::encoder::DEFAULT_TAU)]
        tau: f32,
        #[arg(long, default_value_t = partseg::encoder::DEFAULT_ANCHORS)]
        anchors: usize,
        #[arg(long, default_value_t = 96)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of per-step losses.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decoder training against the frozen encoder of a bundle.
    TrainDecoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        lr: f32,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        drop: f64,
        #[arg(long, default_value_t = 0.7)]
        lambda_bce: f32,
        #[arg(long, default_value_t = 0.3)]
        lambda_dice: f32,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// CSV of per-step losses: step, loss, bce, dice, pi.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a bundle on a labelled dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Interactive)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Toggle::Off)]
        scale: Toggle,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f32,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Run every protocol plus the scale sweep instead of one mode.
        #[arg(long)]
        all: bool,
        /// Evaluate only the first `limit` clouds.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// HTTP JSON service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn csv(path: Option<&Path>, header: &str) -> Result<Option<BufWriter<File>>> {
    let Some(p) = path else { return Ok(None) };
    let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
    writeln!(w, "{header}")?;
    Ok(Some(w))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, count, seed, points, min_parts, max_parts } => {
            let cfg = SynthConfig { min_parts, max_parts, ..SynthConfig::default() };
            let clouds = generate_dataset(count, seed, points, &cfg)?;
            dataset_write(&clouds, &out)?;
            println!("wrote {} clouds to {}", clouds.len(), out.display());
        }
        Command::Curate { data, out, validator, threshold, eps_factor, min_pts } => {
            let clouds = dataset_read(&data)?;
            let v = validator.map(ValidatorModel::load).transpose()?;
            let cfg = CurateConfig { validator: v.as_ref(), threshold, eps_factor, min_pts, ..CurateConfig::default() };
            let (kept, report) = curate(&clouds, &cfg)?;
            dataset_write(&kept, &out)?;
            println!("{report:?}");
        }
        Command::TrainValidator { data, out, corrupt_fraction, epochs, lr, points, seed } => {
            let clean: Vec<_> = dataset_read(&data)?.into_iter().filter(|c| c.labels.is_some()).collect();
            let corrupted = clean
                .iter()
                .enumerate()
                .map(|(i, c)| corrupt_labels(c, corrupt_fraction, seed ^ (i as u64 + 1)))
                .collect::<partseg::Result<Vec<_>>>()?;
            let cfg = ValidatorConfig { epochs, lr, points, seed, ..ValidatorConfig::default() };
            let (model, report) = train_validator(&clean, &corrupted, &cfg)?;
            model.save(&out)?;
            println!("{report:?}");
        }
        Command::TrainEncoder { data, out, epochs, lr, tau, anchors, dim, res, seed, log } => {
            let clouds = dataset_read(&data)?;
            let enc = EncoderConfig { dim, res, ..EncoderConfig::default() };
            let dec = DecoderConfig { dim, ..DecoderConfig::default() };
            let mut model = SegModel::new(enc, dec, seed)?;
            let cfg = EncoderTrainConfig { lr, epochs, tau, anchors, seed, ..EncoderTrainConfig::default() };
            let mut w = csv(log.as_deref(), "step,loss")?;
            let t = Instant::now();
            let result = train_encoder(&model.encoder, &mut model.encoder_store, &clouds, &cfg, |s, l| {
                if let Some(w) = w.as_mut() {
                    let _ = writeln!(w, "{s},{l}");
                }
            });
            if let Some(w) = w.as_mut() {
                w.flush()?;
            }
            model.save(&out)?;
            let report = result?;
            println!(
                "encoder: {} steps in {:.1}s, final epoch mean loss {:.4}",
                report.step_losses.len(),
                t.elapsed().as_secs_f64(),
                report.epoch_means.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TrainDecoder {
            data,
            encoder,
            out,
            lr,
            epochs,
            drop,
            lambda_bce,
            lambda_dice,
            batch,
            points,
            seed,
            threads,
            log,
        } => {
            let clouds = dataset_read(&data)?;
            let mut model = SegModel::load(&encoder)?;
            let cfg = DecoderTrainConfig {
                lr,
                epochs,
                batch,
                p_drop: drop,
                loss: SegLossConfig { lambda_bce, lambda_dice, ..SegLossConfig::default() },
                points,
                seed,
                threads,
                ..DecoderTrainConfig::default()
            };
            let mut w = csv(log.as_deref(), "step,loss,bce,dice,pi")?;
            let t = Instant::now();
            let SegModel { encoder, encoder_store, decoder, decoder_store } = &mut model;
            let result = train_decoder(decoder, decoder_store, encoder, encoder_store, &clouds, &cfg, |s| {
                if let Some(w) = w.as_mut() {
                    let _ = writeln!(w, "{},{},{},{},{}", s.step, s.loss, s.bce, s.dice, s.pi);
                }
            });
            if let Some(w) = w.as_mut() {
                w.flush()?;
            }
            // Saved on failure too, holding the last finite parameters.
            model.save(&out)?;
            let report = result?;
            println!(
                "decoder: {} steps in {:.1}s, final epoch mean loss {:.4}",
                report.steps.len(),
                t.elapsed().as_secs_f64(),
                report.epoch_means.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval { data, ckpt, mode, scale, theta, report, all, limit } => {
            let mut clouds = dataset_read(&data)?;
            if let Some(l) = limit {
                clouds.truncate(l);
            }
            let model = SegModel::load(&ckpt)?;
            let cfg = EvalConfig {
                mode: match mode {
                    Mode::Interactive => EvalMode::Interactive,
                    Mode::Full => EvalMode::Full,
                },
                with_scale: matches!(scale, Toggle::On),
                theta,
                ..EvalConfig::default()
            };
            if all {
                let b = benchmark(&model, &clouds, &cfg, &sweep_deltas())?;
                println!("interactive (no scale): {:.4}", b.interactive_no_scale.dataset_miou);
                println!("interactive (+scale):   {:.4}", b.interactive_scale.dataset_miou);
                println!("full (no scale):        {:.4}", b.full_no_scale.dataset_miou);
                println!("full (+scale):          {:.4}", b.full_scale.dataset_miou);
                for r in &b.sweep {
                    println!("sweep delta {:+.1}: miou {:.4} (delta {:+.4})", r.delta, r.miou, r.delta_iou);
                }
                if let Some(p) = report {
                    write_json(&p, &b)?;
                }
            } else {
                let r = evaluate(&model, &clouds, &cfg)?;
                println!("dataset mIoU: {:.4} over {} objects", r.dataset_miou, r.per_object.len());
                if let Some(p) = report {
                    write_json(&p, &r)?;
                }
            }
        }
        Command::Serve { addr, model } => {
            let state = partseg::service::AppState::new();
            if let Some(p) = model {
                state.load_model(&p)?;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                log::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, partseg::service::router(state)).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
