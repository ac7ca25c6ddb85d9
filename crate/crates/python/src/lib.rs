//! Python bindings for the `marionette` crate.
//!
//! Configs and checkpoint headers cross the boundary as JSON text; images
//! cross as PNG paths. Long-running calls release the GIL.

use std::path::{Path, PathBuf};

use marionette::checkpoint::CheckpointBundle;
use marionette::config::Config;
use marionette::datagen::{load_clip, load_png, DatasetConfig};
use marionette::diffusion::{DiffusionSchedule, SamplerConfig, ScheduleConfig};
use marionette::metrics::FloatImage;
use marionette::pipeline::AnimationRequest;
use marionette::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Bad inputs, configs and files raise `ValueError`; missing files raise
/// `OSError`; unmet preconditions and numeric failures raise `RuntimeError`.
fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Format { .. } => PyValueError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Precondition(_) | Error::Tensor(_) => PyRuntimeError::new_err(msg),
    }
}

fn json_value(text: &str) -> PyResult<serde_json::Value> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("invalid JSON: {e}")))
}

fn load_bundle(path: &Path) -> marionette::Result<CheckpointBundle> {
    let p = if path.is_dir() {
        path.join(marionette::cli::CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    };
    CheckpointBundle::load(&p)
}

/// Runs the command line with `argv` (without the program name) and returns
/// its exit code.
#[pyfunction]
fn run_command(py: Python<'_>, argv: Vec<String>) -> i32 {
    let full: Vec<String> = std::iter::once("marionette".to_string()).chain(argv).collect();
    py.detach(move || marionette::cli::run_command(full))
}

/// Every config field with its default, as pretty JSON.
#[pyfunction]
fn default_config() -> String {
    Config::default().dump()
}

/// Parses and validates partial config JSON, returning the full config.
#[pyfunction]
fn parse_config(text: &str) -> PyResult<String> {
    marionette::config::parse_config(text).map(|c| c.dump()).map_err(to_py)
}

/// Loads and validates a config file, returning the full config.
#[pyfunction]
fn load_config(path: PathBuf) -> PyResult<String> {
    marionette::config::load_config(&path).map(|c| c.dump()).map_err(to_py)
}

/// Writes a synthetic dataset under `root` and returns the clip directories.
#[pyfunction]
#[pyo3(signature = (root, clips=20, frames=24, seed=0, resolution=64, motion_amplitude=0.04))]
fn gen_dataset(
    py: Python<'_>,
    root: PathBuf,
    clips: usize,
    frames: usize,
    seed: u64,
    resolution: u32,
    motion_amplitude: f64,
) -> PyResult<Vec<PathBuf>> {
    let cfg = DatasetConfig {
        clips,
        frames,
        seed,
        resolution,
        motion_amplitude,
    };
    Config {
        data: cfg.clone(),
        ..Config::default()
    }
    .validate()
    .map_err(to_py)?;
    py.detach(move || marionette::datagen::gen_dataset(&root, &cfg))
        .map(|v| v.into_iter().map(|(p, _)| p).collect())
        .map_err(to_py)
}

/// Window layout for `n` frames: `windows` holds `(start, end)` pairs and
/// `weights[i]` the `(window, weight)` pairs blended into frame `i`.
#[pyfunction]
#[pyo3(signature = (n, window=8, overlap=2))]
fn plan_windows(py: Python<'_>, n: usize, window: usize, overlap: usize) -> PyResult<Bound<'_, PyDict>> {
    let plan = marionette::pipeline::plan_windows(n, window, overlap).map_err(to_py)?;
    let weights: Vec<Vec<(usize, f64)>> = plan
        .weights
        .iter()
        .map(|ws| ws.iter().map(|w| (w.window, w.weight)).collect())
        .collect();
    let d = PyDict::new(py);
    d.set_item("num_frames", plan.num_frames)?;
    d.set_item("window", plan.window)?;
    d.set_item("overlap", plan.overlap)?;
    d.set_item("windows", plan.windows)?;
    d.set_item("weights", weights)?;
    Ok(d)
}

fn load_float(path: &Path) -> PyResult<FloatImage> {
    load_png(path).map(|img| FloatImage::from_rgb(&img)).map_err(to_py)
}

/// SSIM between two PNG files of equal size.
#[pyfunction]
fn ssim(a: PathBuf, b: PathBuf) -> PyResult<f64> {
    marionette::metrics::ssim(&load_float(&a)?, &load_float(&b)?).map_err(to_py)
}

/// PSNR in dB between two PNG files of equal size; identical images give
/// the cap.
#[pyfunction]
fn psnr(a: PathBuf, b: PathBuf) -> PyResult<f64> {
    marionette::metrics::psnr(&load_float(&a)?, &load_float(&b)?).map_err(to_py)
}

/// Frame-aligned metrics between two video directories, as a dict. The
/// feature metrics need a checkpoint for its frozen encoder.
#[pyfunction]
#[pyo3(signature = (pred, gt, ckpt=None))]
fn evaluate(py: Python<'_>, pred: PathBuf, gt: PathBuf, ckpt: Option<PathBuf>) -> PyResult<Bound<'_, PyAny>> {
    let report = py
        .detach(move || -> marionette::Result<String> {
            let p = marionette::cli::load_videos(&pred)?;
            let g = marionette::cli::load_videos(&gt)?;
            let enc = ckpt
                .as_ref()
                .map(|c| load_bundle(c).and_then(|b| b.encoders()))
                .transpose()?;
            let enc_ref = match &enc {
                Some(e) => Some((&e.semantic, e.hash()?)),
                None => None,
            };
            let report = marionette::metrics::evaluate(&p, &g, enc_ref)?;
            Ok(serde_json::to_string(&report).expect("report serializes"))
        })
        .map_err(to_py)?;
    py.import("json")?.call_method1("loads", (report,))
}

/// A noise schedule built from schedule config JSON (defaults when omitted).
#[pyclass(frozen, module = "marionette_py")]
struct Schedule {
    inner: DiffusionSchedule,
}

#[pymethods]
impl Schedule {
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: ScheduleConfig = match config_json {
            Some(t) => serde_json::from_value(json_value(t)?)
                .map_err(|e| to_py(Error::Config(vec![format!("schedule: {e}")])))?,
            None => ScheduleConfig::default(),
        };
        let mut errs = Vec::new();
        cfg.validate(&mut errs, "schedule");
        if !errs.is_empty() {
            return Err(to_py(Error::Config(errs)));
        }
        Ok(Self {
            inner: cfg.build().map_err(to_py)?,
        })
    }

    #[getter]
    fn num_timesteps(&self) -> usize {
        self.inner.num_timesteps()
    }

    /// `betas()[t - 1]` is beta at timestep `t`, for `1 <= t <= T`.
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    /// Indexed like `betas`; alpha_bar at `t = 0` is 1.
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// Descending timesteps visited by a `num_steps` deterministic sampler.
    fn ddim_timesteps(&self, num_steps: usize) -> PyResult<Vec<usize>> {
        self.inner.ddim_timesteps(num_steps).map_err(to_py)
    }
}

/// A loaded checkpoint. `path` may name the file or a training output
/// directory holding it.
#[pyclass(frozen, module = "marionette_py")]
struct Checkpoint {
    bundle: CheckpointBundle,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let bundle = py.detach(move || load_bundle(&path)).map_err(to_py)?;
        Ok(Self { bundle })
    }

    /// 0: encoders only; 1: image model; 2: with temporal layers.
    #[getter]
    fn stage(&self) -> u8 {
        self.bundle.header.stage
    }

    #[getter]
    fn num_tensors(&self) -> usize {
        self.bundle.tensors.len()
    }

    fn header_json(&self) -> String {
        serde_json::to_string_pretty(&self.bundle.header).expect("header serializes")
    }

    /// Animates `reference` (PNG) with the poses of a clip (its directory or
    /// `clip.json`), writes `frames/` and `result.json` under `out`, and
    /// returns the written paths.
    #[pyo3(signature = (reference, poses, out, seed=0, num_steps=20, eta=0.0, window=8, overlap=2, ref_pose=None))]
    #[allow(clippy::too_many_arguments)]
    fn animate(
        &self,
        py: Python<'_>,
        reference: PathBuf,
        poses: PathBuf,
        out: PathBuf,
        seed: u64,
        num_steps: usize,
        eta: f64,
        window: usize,
        overlap: usize,
        ref_pose: Option<PathBuf>,
    ) -> PyResult<Vec<PathBuf>> {
        let header = &self.bundle.header;
        if !matches!(header.stage, 1 | 2) {
            return Err(to_py(Error::Precondition(format!(
                "animation needs a stage 1 or 2 checkpoint, got stage {}",
                header.stage
            ))));
        }
        let sampler = SamplerConfig { num_steps, eta, seed };
        let mut errs = Vec::new();
        sampler.validate(&mut errs, "sampler", header.schedule.num_timesteps);
        if !errs.is_empty() {
            return Err(to_py(Error::Config(errs)));
        }
        let bundle = &self.bundle;
        py.detach(move || -> marionette::Result<Vec<PathBuf>> {
            let clip_dir = |p: &PathBuf| {
                if p.is_dir() {
                    p.clone()
                } else {
                    p.parent().map(PathBuf::from).unwrap_or_default()
                }
            };
            let reference_pose = match &ref_pose {
                Some(p) => {
                    let rec = load_clip(&clip_dir(p))?;
                    Some(rec.poses.frames[rec.reference_index].clone())
                }
                None => None,
            };
            let request = AnimationRequest {
                reference_image: load_png(&reference)?,
                driving: load_clip(&clip_dir(&poses))?.poses,
                reference_pose,
                seed,
                window,
                overlap,
            };
            let schedule = bundle.header.schedule.build()?;
            let video =
                marionette::pipeline::animate(&request, &bundle.encoders()?, &bundle.model()?, &schedule, &sampler)?;
            video.write(&out)
        })
        .map_err(to_py)
    }
}

#[pymodule]
pub fn marionette_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CHECKPOINT_FILE", marionette::cli::CHECKPOINT_FILE)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(plan_windows, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Schedule>()?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
