//! Seeded Monte-Carlo SER sweeps, schedule tables and run manifests.
//!
//! Every (detector, SNR) cell draws its symbols and channel noise from
//! substream `snr_index` of the sweep seed, so all detectors at one SNR see
//! exactly the same transmissions. Multi-step DM noise comes from a separate
//! substream so it never shifts that shared sequence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{load_channel_matrix, signal_power_per_dim, sigma2_from_snr, LinearChannel};
use crate::classical::{Equalizer, LinearDetector, MlDetector};
use crate::denoiser::{Checkpoint, DenoiserModel, ModelConfig, TrainConfig};
use crate::detector_dm::{Denoise, DmDetector, DmOptions, NullPredictor, OraclePredictor, SnrGainAccumulator};
use crate::diffusion::{DiffusionSchedule, ScheduleMode};
use crate::error::{Error, Result};
use crate::modem::{build_constellation, count_errors, nearest_symbol_decision, sample_symbols, Constellation, ErrorCounts, Scheme, SymbolBlock};
use crate::numerics::{make_stream, RealMatrix};

/// Trials pushed through the denoiser per batched call.
const DM_CHUNK: usize = 256;
/// Offset separating reverse-process noise substreams from channel substreams.
const REVERSE_NOISE_SUBSTREAM: u64 = 1 << 32;

pub const CSV_HEADER: &str = "detector,snr_db,trials,symbol_errors,ser,ber,eff_snr_gain_db,seed,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Ml,
    Mmse,
    Zf,
    Mf,
    /// Trained denoiser from the configured checkpoint.
    Dm,
    /// DM pipeline with an all-zero predictor.
    DmNull,
    /// DM pipeline with the exact predictor.
    Oracle,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Ml => "ml",
            DetectorKind::Mmse => "mmse",
            DetectorKind::Zf => "zf",
            DetectorKind::Mf => "mf",
            DetectorKind::Dm => "dm",
            DetectorKind::DmNull => "dm-null",
            DetectorKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::ConfigInvalid(format!("unknown detector `{s}`")))
    }
}

/// Where the channel matrix comes from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelSource {
    #[default]
    Identity,
    /// JSON channel file, see [`crate::channel::ChannelFile`].
    File(PathBuf),
}

impl ChannelSource {
    /// Real-equivalent channel matrix, which must be `d x d`.
    pub fn matrix(&self, d: usize) -> Result<RealMatrix> {
        let h = match self {
            ChannelSource::Identity => return Ok(RealMatrix::identity(d)),
            ChannelSource::File(path) => load_channel_matrix(path).map_err(|e| match e {
                Error::Io(io) => Error::ConfigInvalid(format!("{}: {io}", path.display())),
                other => other,
            })?,
        };
        if h.rows() != d {
            return Err(Error::ConfigInvalid(format!(
                "channel matrix is {}x{} in real form, expected {d}x{d}",
                h.rows(),
                h.cols()
            )));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DmSweepOptions {
    #[serde(flatten)]
    pub options: DmOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the raw weights instead of the averaged ones.
    #[serde(default)]
    pub raw_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub scheme: Scheme,
    /// Symbols per transmission (receive antennas of a square channel).
    pub n_r: usize,
    #[serde(default)]
    pub channel: ChannelSource,
    pub snr_db: Vec<f64>,
    pub detectors: Vec<DetectorKind>,
    /// Transmissions per (detector, SNR) cell.
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dm: DmSweepOptions,
    /// Write measured cell times to `wall_ms`; otherwise 0 so outputs are
    /// byte-for-byte reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl SweepConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::ConfigInvalid("trials must be at least 1".into()));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::ConfigInvalid("snr_db grid must be nonempty and finite".into()));
        }
        if self.detectors.is_empty() {
            return Err(Error::ConfigInvalid("detectors list is empty".into()));
        }
        if self.n_r == 0 {
            return Err(Error::ConfigInvalid("n_r must be positive".into()));
        }
        if self.dm.options.reverse_steps == 0 {
            return Err(Error::ConfigInvalid("dm.reverse_steps must be at least 1".into()));
        }
        if self.detectors.contains(&DetectorKind::Dm) && self.dm.checkpoint.is_none() {
            return Err(Error::ConfigInvalid("detector `dm` needs dm.checkpoint".into()));
        }
        Ok(())
    }

    pub fn constellation(&self) -> Constellation {
        build_constellation(self.scheme)
    }

    /// Noiseless channel of the configured geometry.
    pub fn base_channel(&self) -> Result<LinearChannel> {
        let d = self.n_r * self.scheme.real_dims();
        LinearChannel::new(self.channel.matrix(d)?, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub detector: String,
    pub snr_db: f64,
    pub trials: u64,
    pub symbol_errors: u64,
    pub ser: f64,
    pub ber: f64,
    pub eff_snr_gain_db: f64,
    pub seed: u64,
    pub wall_ms: f64,
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.detector,
            fmt_sig9(self.snr_db),
            self.trials,
            self.symbol_errors,
            fmt_sig9(self.ser),
            fmt_sig9(self.ber),
            fmt_sig9(self.eff_snr_gain_db),
            self.seed,
            fmt_sig9(self.wall_ms)
        )
    }
}

/// `%.9g`-style formatting.
pub fn fmt_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub snr_db: f64,
    pub sigma2: f64,
    pub t: f64,
    pub alpha: f64,
}

/// Matched `(t, alpha)` per SNR for signal power `p_s`.
pub fn emit_schedule_table(snr_db: &[f64], p_s: f64, mode: ScheduleMode) -> Result<Vec<ScheduleRow>> {
    snr_db
        .iter()
        .map(|&snr| {
            let sigma2 = sigma2_from_snr(snr, p_s)?;
            let s = DiffusionSchedule::matched(sigma2, p_s, mode)?;
            Ok(ScheduleRow {
                snr_db: snr,
                sigma2,
                t: s.t,
                alpha: s.alpha,
            })
        })
        .collect()
}

pub fn schedule_table_csv(rows: &[ScheduleRow]) -> String {
    let mut out = String::from("snr_db,sigma2,t,alpha\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_sig9(r.snr_db),
            fmt_sig9(r.sigma2),
            fmt_sig9(r.t),
            fmt_sig9(r.alpha)
        ));
    }
    out
}

/// Per-dimension sign-detection error rate `Q(sqrt(snr))` for BPSK.
pub fn reference_ser_bpsk(snr_db: f64) -> f64 {
    let snr = 10f64.powf(snr_db / 10.0);
    0.5 * libm::erfc((snr / 2.0).sqrt())
}

/// Standard deviation of an empirical rate with true value `p` over `n` draws.
pub fn binomial_std(p: f64, n: f64) -> f64 {
    (p * (1.0 - p) / n).sqrt()
}

/// Records plus the DM schedule used at each SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<MetricRecord>,
    pub schedule: Vec<ScheduleRow>,
    pub warnings: Vec<String>,
}

enum CellDetector<'a> {
    Ml(MlDetector),
    Linear(LinearDetector),
    Dm(DmDetector, &'a dyn Denoise),
    Oracle(DmDetector),
}

/// Runs every (detector, SNR) cell in memory. `model` is required only when
/// the detector list contains [`DetectorKind::Dm`].
pub fn evaluate_sweep(cfg: &SweepConfig, model: Option<&DenoiserModel>) -> Result<SweepOutcome> {
    cfg.validate()?;
    let c = cfg.constellation();
    let base = cfg.base_channel()?;
    let p_s = signal_power_per_dim(&base, &c);
    let schedule = cfg
        .snr_db
        .iter()
        .map(|&snr| {
            let sigma2 = sigma2_from_snr(snr, p_s)?;
            let ch = base.with_sigma2(sigma2)?;
            let s = DmDetector::new(&ch, &c, &cfg.dm.options)?.schedule();
            Ok(ScheduleRow {
                snr_db: snr,
                sigma2,
                t: s.t,
                alpha: s.alpha,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let null = NullPredictor;
    let mut records = Vec::with_capacity(cfg.detectors.len() * cfg.snr_db.len());
    for &kind in &cfg.detectors {
        for (idx, row) in schedule.iter().enumerate() {
            let ch = base.with_sigma2(row.sigma2)?;
            let det = match kind {
                DetectorKind::Ml => CellDetector::Ml(MlDetector::new(&ch, &c)?),
                DetectorKind::Mmse => CellDetector::Linear(LinearDetector::new(&ch, Equalizer::Mmse)?),
                DetectorKind::Zf => CellDetector::Linear(LinearDetector::new(&ch, Equalizer::Zf)?),
                DetectorKind::Mf => CellDetector::Linear(LinearDetector::new(&ch, Equalizer::Mf)?),
                DetectorKind::Dm => {
                    let m = model.ok_or_else(|| Error::ConfigInvalid("detector `dm` needs a model".into()))?;
                    CellDetector::Dm(DmDetector::new(&ch, &c, &cfg.dm.options)?, m)
                }
                DetectorKind::DmNull => CellDetector::Dm(DmDetector::new(&ch, &c, &cfg.dm.options)?, &null),
                DetectorKind::Oracle => CellDetector::Oracle(DmDetector::new(&ch, &c, &cfg.dm.options)?),
            };
            let started = Instant::now();
            let (counts, gain) = run_cell(cfg, &ch, &c, &det, idx as u64)?;
            let wall_ms = if cfg.record_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            records.push(MetricRecord {
                detector: kind.name().to_string(),
                snr_db: row.snr_db,
                trials: cfg.trials as u64,
                symbol_errors: counts.symbol_errors,
                ser: counts.ser(),
                ber: counts.ber(),
                eff_snr_gain_db: gain.gain().db,
                seed: cfg.seed,
                wall_ms,
            });
        }
    }
    Ok(SweepOutcome {
        records,
        schedule,
        warnings: Vec::new(),
    })
}

fn run_cell(
    cfg: &SweepConfig,
    ch: &LinearChannel,
    c: &Constellation,
    det: &CellDetector<'_>,
    substream: u64,
) -> Result<(ErrorCounts, SnrGainAccumulator)> {
    let mut stream = make_stream(cfg.seed, substream);
    let mut reverse_noise = make_stream(cfg.seed, REVERSE_NOISE_SUBSTREAM + substream);
    let mut counts = ErrorCounts::default();
    let mut gain = SnrGainAccumulator::default();
    let d = ch.d();
    let mut remaining = cfg.trials;
    while remaining > 0 {
        let n = remaining.min(DM_CHUNK);
        remaining -= n;
        let mut truth = Vec::with_capacity(n);
        let mut rs = Vec::with_capacity(n * d);
        let mut clean = Vec::with_capacity(n * d);
        for _ in 0..n {
            let s = sample_symbols(c, cfg.n_r, &mut stream);
            rs.extend(ch.transmit(&s, &mut stream)?);
            clean.extend(ch.apply(&s.coords)?);
            truth.push(s);
        }
        let estimates: Vec<(SymbolBlock, Vec<f64>)> = match det {
            CellDetector::Ml(ml) => rs
                .chunks(d)
                .map(|r| {
                    let s = SymbolBlock::from_indices(c, ml.detect_indices(r)?);
                    let x0 = ch.apply(&s.coords)?;
                    Ok((s, x0))
                })
                .collect::<Result<_>>()?,
            CellDetector::Linear(lin) => rs
                .chunks(d)
                .map(|r| {
                    let soft = lin.equalize(r)?;
                    Ok((nearest_symbol_decision(&soft, c)?, ch.apply(&soft)?))
                })
                .collect::<Result<_>>()?,
            CellDetector::Dm(dm, model) => dm_decisions(dm, *model, &rs, d, c, &mut reverse_noise)?,
            CellDetector::Oracle(dm) => {
                let oracle = OraclePredictor { x0: clean.clone() };
                dm_decisions(dm, &oracle, &rs, d, c, &mut reverse_noise)?
            }
        };
        for ((s, (decided, x0_hat)), hs) in truth.iter().zip(&estimates).zip(clean.chunks(d)) {
            counts += count_errors(s, decided, c)?;
            gain.add(hs, x0_hat)?;
        }
    }
    Ok((counts, gain))
}

fn dm_decisions(
    dm: &DmDetector,
    model: &dyn Denoise,
    rs: &[f64],
    d: usize,
    c: &Constellation,
    noise: &mut crate::numerics::RandomStream,
) -> Result<Vec<(SymbolBlock, Vec<f64>)>> {
    let x0 = dm.estimate_batch(rs, model, Some(noise))?;
    x0.chunks(d)
        .map(|x| {
            let s = dm.h_inv().matvec(x)?;
            Ok((nearest_symbol_decision(&s, c)?, x.to_vec()))
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Run metadata written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SweepConfig,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub checkpoint_sha256: Option<String>,
    pub schedule: Vec<ScheduleRow>,
    pub csv: String,
    pub warnings: Vec<String>,
}

pub const CSV_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` into `dir`, creating it if needed. A differing
/// checkpoint hash in an existing manifest adds a warning.
pub fn write_manifest(dir: &Path, manifest: &mut Manifest) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(MANIFEST_FILE);
    if let Ok(text) = std::fs::read_to_string(&path) {
        let previous = serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.get("checkpoint_sha256").and_then(|h| h.as_str()).map(str::to_string));
        if let (Some(old), Some(new)) = (previous, manifest.checkpoint_sha256.as_ref()) {
            if &old != new {
                manifest
                    .warnings
                    .push(format!("checkpoint hash changed since previous run: {old} -> {new}"));
            }
        }
    }
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
    Ok(path)
}

/// Full sweep: loads the checkpoint if needed, evaluates, and writes the CSV
/// and manifest into `output_dir` when given.
pub fn run_sweep(cfg: &SweepConfig, output_dir: Option<&Path>) -> Result<SweepOutcome> {
    let started_at = chrono::Utc::now().to_rfc3339();
    cfg.validate()?;
    let mut checkpoint_sha256 = None;
    let model = match (&cfg.dm.checkpoint, cfg.detectors.contains(&DetectorKind::Dm)) {
        (Some(path), true) => {
            if !path.exists() {
                return Err(Error::CheckpointMissing(path.clone()));
            }
            let bytes = std::fs::read(path)?;
            checkpoint_sha256 = Some(sha256_hex(&bytes));
            let text = String::from_utf8(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ckpt = Checkpoint::from_json_str(&text)?;
            Some(if cfg.dm.raw_weights { ckpt.raw_model()? } else { ckpt.model()? })
        }
        _ => None,
    };
    let mut outcome = evaluate_sweep(cfg, model.as_ref())?;
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CSV_FILE), records_to_csv(&outcome.records))?;
        let mut manifest = Manifest {
            config: cfg.clone(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            checkpoint_sha256,
            schedule: outcome.schedule.clone(),
            csv: CSV_FILE.to_string(),
            warnings: outcome.warnings.clone(),
        };
        write_manifest(dir, &mut manifest)?;
        outcome.warnings = manifest.warnings;
    }
    Ok(outcome)
}

/// `train` subcommand input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub scheme: Scheme,
    pub n_r: usize,
    #[serde(default)]
    pub channel: ChannelSource,
    /// Architecture; defaults to the desk-scale model for this geometry.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    pub output: PathBuf,
}

impl TrainJob {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
    }

    /// Noiseless training channel, constellation and architecture.
    pub fn resolve(&self) -> Result<(LinearChannel, Constellation, ModelConfig)> {
        if self.n_r == 0 {
            return Err(Error::ConfigInvalid("n_r must be positive".into()));
        }
        let c = build_constellation(self.scheme);
        let d = self.n_r * c.dims();
        let ch = LinearChannel::new(self.channel.matrix(d)?, 0.0)?;
        let model = self.model.clone().unwrap_or_else(|| ModelConfig::desk(self.n_r, c.dims()));
        if model.input_dim() != d {
            return Err(Error::ConfigInvalid(format!(
                "model covers {} real dims, channel has {d}",
                model.input_dim()
            )));
        }
        Ok((ch, c, model))
    }
}
