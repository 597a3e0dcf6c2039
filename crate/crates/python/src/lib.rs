use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dmdetect::channel::{signal_power_per_dim, LinearChannel};
use dmdetect::classical::{detect_linear, detect_ml as ml, Equalizer};
use dmdetect::denoiser::{train as train_model, Checkpoint, DenoiserModel};
use dmdetect::detector_dm::{Denoise, DmDetector, DmOptions, NullPredictor};
use dmdetect::diffusion::{scaling_factor, timestep_from_channel, ScheduleMode};
use dmdetect::harness::{self, SweepConfig, TrainJob};
use dmdetect::modem::{build_constellation, sample_symbols, Constellation, Scheme};
use dmdetect::numerics::{make_stream, RealMatrix};

create_exception!(dmdetect, DmdetectError, PyRuntimeError, "Runtime failure inside dmdetect.");

fn to_py(e: dmdetect::Error) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        DmdetectError::new_err(e.to_string())
    }
}

fn parse_mode(mode: &str) -> PyResult<ScheduleMode> {
    mode.parse().map_err(to_py)
}

fn parse_scheme(scheme: &str) -> PyResult<Scheme> {
    scheme.parse().map_err(to_py)
}

/// A symbol alphabet with unit average energy.
#[pyclass(name = "Modem", frozen)]
struct PyModem {
    c: Constellation,
}

#[pymethods]
impl PyModem {
    #[new]
    fn new(scheme: &str) -> PyResult<Self> {
        Ok(Self {
            c: build_constellation(parse_scheme(scheme)?),
        })
    }

    #[getter]
    fn size(&self) -> usize {
        self.c.size()
    }

    /// Real dimensions per symbol.
    #[getter]
    fn dims(&self) -> usize {
        self.c.dims()
    }

    #[getter]
    fn bits_per_symbol(&self) -> u32 {
        self.c.bits_per_symbol()
    }

    fn points(&self) -> Vec<Vec<f64>> {
        (0..self.c.size()).map(|k| self.c.point(k).to_vec()).collect()
    }

    /// Draws `n` uniform symbols; returns `(indices, stacked coordinates)`.
    #[pyo3(signature = (n, seed, substream=0))]
    fn sample(&self, n: usize, seed: u64, substream: u64) -> (Vec<usize>, Vec<f64>) {
        let s = sample_symbols(&self.c, n, &mut make_stream(seed, substream));
        (s.indices, s.coords)
    }

    fn __repr__(&self) -> String {
        let name = self.c.scheme().map_or("custom", Scheme::name);
        format!("Modem({name})")
    }
}

/// Real-valued linear Gaussian channel `r = H x + n`.
#[pyclass(name = "Channel", frozen)]
struct PyChannel {
    ch: LinearChannel,
}

#[pymethods]
impl PyChannel {
    #[new]
    fn new(h: Vec<Vec<f64>>, sigma2: f64) -> PyResult<Self> {
        let rows = h.len();
        let cols = h.first().map_or(0, Vec::len);
        if h.iter().any(|row| row.len() != cols) {
            return Err(PyValueError::new_err("channel rows must have equal length"));
        }
        let m = RealMatrix::new(rows, cols, h.concat()).map_err(to_py)?;
        Ok(Self {
            ch: LinearChannel::new(m, sigma2).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn identity(d: usize, sigma2: f64) -> PyResult<Self> {
        Ok(Self {
            ch: LinearChannel::identity(d, sigma2).map_err(to_py)?,
        })
    }

    #[getter]
    fn d(&self) -> usize {
        self.ch.d()
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.ch.sigma2()
    }

    fn with_sigma2(&self, sigma2: f64) -> PyResult<Self> {
        Ok(Self {
            ch: self.ch.with_sigma2(sigma2).map_err(to_py)?,
        })
    }

    /// Per-dimension received signal power for the given modem.
    fn signal_power(&self, modem: &PyModem) -> f64 {
        signal_power_per_dim(&self.ch, &modem.c)
    }

    fn apply(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.ch.apply(&x).map_err(to_py)
    }

    #[pyo3(signature = (x, seed, substream=0))]
    fn transmit(&self, x: Vec<f64>, seed: u64, substream: u64) -> PyResult<Vec<f64>> {
        self.ch
            .transmit_coords(&x, &mut make_stream(seed, substream))
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Channel(d={}, sigma2={})", self.ch.d(), self.ch.sigma2())
    }
}

/// Trained (or freshly loaded) transformer denoiser.
#[pyclass(name = "Denoiser", frozen)]
struct PyDenoiser {
    ckpt: Checkpoint,
    model: DenoiserModel,
}

impl PyDenoiser {
    fn from_checkpoint(ckpt: Checkpoint, raw: bool) -> PyResult<Self> {
        let model = if raw { ckpt.raw_model() } else { ckpt.model() }.map_err(to_py)?;
        Ok(Self { ckpt, model })
    }
}

#[pymethods]
impl PyDenoiser {
    /// Loads a checkpoint; `raw=True` selects the raw weights over the averaged ones.
    #[staticmethod]
    #[pyo3(signature = (path, raw=false))]
    fn load(path: PathBuf, raw: bool) -> PyResult<Self> {
        Self::from_checkpoint(Checkpoint::load(&path).map_err(to_py)?, raw)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ckpt.save(&path).map_err(to_py)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params().num_parameters()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.model.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// `(final_loss, null_loss)` recorded at the end of training.
    #[getter]
    fn losses(&self) -> (f64, f64) {
        (self.ckpt.meta.final_loss, self.ckpt.meta.null_loss)
    }

    /// Returns `(h_hat, eps_hat)` for one noisy input.
    fn predict(&self, x: Vec<f64>, t: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        self.model.predict(&x, t).map_err(to_py)
    }
}

/// Matched `(t, alpha)` for a channel noise variance.
#[pyfunction]
#[pyo3(signature = (sigma2, power=1.0, mode="corrected"))]
fn schedule(sigma2: f64, power: f64, mode: &str) -> PyResult<(f64, f64)> {
    let t = timestep_from_channel(sigma2, power, power, parse_mode(mode)?).map_err(to_py)?;
    Ok((t, scaling_factor(t, power, sigma2).map_err(to_py)?))
}

/// Rows of `(snr_db, sigma2, t, alpha)`.
#[pyfunction]
#[pyo3(signature = (snr_db, power=1.0, mode="corrected"))]
fn schedule_table(snr_db: Vec<f64>, power: f64, mode: &str) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let rows = harness::emit_schedule_table(&snr_db, power, parse_mode(mode)?).map_err(to_py)?;
    Ok(rows.iter().map(|r| (r.snr_db, r.sigma2, r.t, r.alpha)).collect())
}

#[pyfunction]
fn reference_ser_bpsk(snr_db: f64) -> f64 {
    harness::reference_ser_bpsk(snr_db)
}

#[pyfunction]
fn detect_ml(r: Vec<f64>, channel: &PyChannel, modem: &PyModem) -> PyResult<Vec<usize>> {
    Ok(ml(&r, &channel.ch, &modem.c).map_err(to_py)?.indices)
}

/// Linear equalizer (`"zf"`, `"mmse"` or `"mf"`) followed by slicing.
#[pyfunction]
#[pyo3(signature = (r, channel, modem, kind="mmse"))]
fn detect_equalized(r: Vec<f64>, channel: &PyChannel, modem: &PyModem, kind: &str) -> PyResult<Vec<usize>> {
    let kind = match kind {
        "zf" => Equalizer::Zf,
        "mmse" => Equalizer::Mmse,
        "mf" => Equalizer::Mf,
        other => return Err(PyValueError::new_err(format!("unknown equalizer `{other}`"))),
    };
    Ok(detect_linear(&r, &channel.ch, &modem.c, kind).map_err(to_py)?.indices)
}

/// Diffusion detection. Without a denoiser the null predictor is used.
/// Returns `(indices, x0_hat)`.
#[pyfunction]
#[pyo3(signature = (r, channel, modem, denoiser=None, mode="corrected", reverse_steps=1, seed=0))]
fn detect_dm(
    r: Vec<f64>,
    channel: &PyChannel,
    modem: &PyModem,
    denoiser: Option<&PyDenoiser>,
    mode: &str,
    reverse_steps: usize,
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let opts = DmOptions {
        reverse_steps,
        ..DmOptions::with_mode(parse_mode(mode)?)
    };
    let det = DmDetector::new(&channel.ch, &modem.c, &opts).map_err(to_py)?;
    let model: &dyn Denoise = match denoiser {
        Some(d) => &d.model,
        None => &NullPredictor,
    };
    let mut noise = make_stream(seed, 0);
    let (s, x0_hat) = det.detect(&r, &modem.c, model, Some(&mut noise)).map_err(to_py)?;
    Ok((s.indices, x0_hat))
}

/// Runs a sweep from its JSON text. Returns one dict per CSV row and writes
/// `results.csv` plus `manifest.json` when `output_dir` is given.
#[pyfunction]
#[pyo3(signature = (config_json, output_dir=None))]
fn run_sweep<'py>(py: Python<'py>, config_json: &str, output_dir: Option<PathBuf>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: SweepConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let outcome = py
        .detach(|| harness::run_sweep(&cfg, output_dir.as_deref()))
        .map_err(to_py)?;
    outcome
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("detector", &r.detector)?;
            d.set_item("snr_db", r.snr_db)?;
            d.set_item("trials", r.trials)?;
            d.set_item("symbol_errors", r.symbol_errors)?;
            d.set_item("ser", r.ser)?;
            d.set_item("ber", r.ber)?;
            d.set_item("eff_snr_gain_db", r.eff_snr_gain_db)?;
            d.set_item("seed", r.seed)?;
            d.set_item("wall_ms", r.wall_ms)?;
            Ok(d)
        })
        .collect()
}

/// Trains a denoiser from training-job JSON text. The checkpoint is written
/// to the job's `output` path when `save` is true.
#[pyfunction]
#[pyo3(signature = (job_json, save=true))]
fn train(py: Python<'_>, job_json: &str, save: bool) -> PyResult<PyDenoiser> {
    let job: TrainJob = serde_json::from_str(job_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let ckpt = py
        .detach(|| {
            let (ch, c, model_cfg) = job.resolve()?;
            let ckpt = train_model(&job.train, &model_cfg, &ch, &c)?;
            if save {
                ckpt.save(&job.output)?;
            }
            Ok::<_, dmdetect::Error>(ckpt)
        })
        .map_err(to_py)?;
    PyDenoiser::from_checkpoint(ckpt, false)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DmdetectError", m.py().get_type::<DmdetectError>())?;
    m.add_class::<PyModem>()?;
    m.add_class::<PyChannel>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_table, m)?)?;
    m.add_function(wrap_pyfunction!(reference_ser_bpsk, m)?)?;
    m.add_function(wrap_pyfunction!(detect_ml, m)?)?;
    m.add_function(wrap_pyfunction!(detect_equalized, m)?)?;
    m.add_function(wrap_pyfunction!(detect_dm, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[pymodule(name = "dmdetect")]
fn dmdetect_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
