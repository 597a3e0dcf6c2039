use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmdetect::denoiser::{grad_check, init_model, jitter_parameters, probe_round_robin, random_batch, train_with_progress, ModelConfig};
use dmdetect::diffusion::ScheduleMode;
use dmdetect::harness::{emit_schedule_table, records_to_csv, run_sweep, schedule_table_csv, DetectorKind, SweepConfig, TrainJob};
use dmdetect::numerics::make_stream;
use dmdetect::{Error, Result};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "dmdetect", version, about = "Diffusion-model signal detection and SER sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser from a training job JSON and write the checkpoint.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the job's output path.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Steps between progress lines on stderr (0 disables).
        #[arg(long, default_value_t = 500)]
        log_every: usize,
    },
    /// Run a Monte-Carlo SER sweep and write results.csv and manifest.json.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sweep-out")]
        output_dir: PathBuf,
        /// Relative timestep perturbation in percent.
        #[arg(long, allow_hyphen_values = true)]
        perturb_t: Option<f64>,
        /// Relative scaling-factor perturbation in percent.
        #[arg(long, allow_hyphen_values = true)]
        perturb_alpha: Option<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reverse_steps: Option<usize>,
    },
    /// Print the matched (t, alpha) per SNR as CSV.
    ScheduleTable {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        snr: Vec<f64>,
        #[arg(long, default_value = "corrected")]
        mode: ScheduleMode,
        /// Per-dimension signal power.
        #[arg(long, default_value_t = 1.0)]
        power: f64,
    },
    /// Compare analytic and finite-difference gradients for a model config.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the DM pipeline with the exact predictor over a sweep config.
    OracleEval {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            seed,
            output,
            log_every,
        } => {
            let mut job = TrainJob::from_json_file(&config)?;
            if let Some(seed) = seed {
                job.train.seed = seed;
            }
            if let Some(output) = output {
                job.output = output;
            }
            let (ch, c, model_cfg) = job.resolve()?;
            let ckpt = train_with_progress(&job.train, &model_cfg, &ch, &c, &mut |p| {
                if log_every > 0 && (p.step % log_every == 0 || p.step == p.total_steps) {
                    eprintln!("step {}/{} loss {:.6} lr {:.3e}", p.step, p.total_steps, p.loss, p.lr);
                }
            })?;
            ckpt.save(&job.output)?;
            println!(
                "wrote {} (final loss {:.6}, null-predictor loss {:.6})",
                job.output.display(),
                ckpt.meta.final_loss,
                ckpt.meta.null_loss
            );
        }
        Command::Sweep {
            config,
            seed,
            output_dir,
            perturb_t,
            perturb_alpha,
            checkpoint,
            reverse_steps,
        } => {
            let mut cfg = SweepConfig::from_json_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(p) = perturb_t {
                cfg.dm.options.perturb_t_pct = p;
            }
            if let Some(p) = perturb_alpha {
                cfg.dm.options.perturb_alpha_pct = p;
            }
            if let Some(path) = checkpoint {
                cfg.dm.checkpoint = Some(path);
            }
            if let Some(n) = reverse_steps {
                cfg.dm.options.reverse_steps = n;
            }
            let outcome = run_sweep(&cfg, Some(&output_dir))?;
            print!("{}", records_to_csv(&outcome.records));
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::ScheduleTable { snr, mode, power } => {
            print!("{}", schedule_table_csv(&emit_schedule_table(&snr, power, mode)?));
        }
        Command::Gradcheck {
            config,
            probes,
            batch,
            seed,
        } => {
            let model_cfg: ModelConfig = read_json(&config)?;
            if probes == 0 || batch == 0 {
                return Err(Error::ConfigInvalid("--probes and --batch must be positive".into()));
            }
            let mut model = init_model(&model_cfg, &mut make_stream(seed, 1))?;
            jitter_parameters(&mut model, 0.1, &mut make_stream(seed, 2));
            let data = random_batch(model_cfg.input_dim(), batch, &mut make_stream(seed, 0));
            let probe_list = probe_round_robin(model.params(), probes, &mut make_stream(seed, 3));
            let err = grad_check(&model, &data, &probe_list)?;
            println!("max relative error {err:.3e} over {probes} probes");
            if err.is_nan() || err >= GRADCHECK_TOLERANCE {
                eprintln!("gradient check failed (tolerance {GRADCHECK_TOLERANCE:e})");
                return Ok(ExitCode::from(3));
            }
        }
        Command::OracleEval {
            config,
            seed,
            output_dir,
        } => {
            let mut cfg = SweepConfig::from_json_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.detectors = vec![DetectorKind::Oracle];
            let outcome = run_sweep(&cfg, output_dir.as_deref())?;
            print!("{}", records_to_csv(&outcome.records));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
