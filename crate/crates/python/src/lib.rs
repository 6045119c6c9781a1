//! Python bindings for the `avaca` crate.
//!
//! Feature matrices cross the boundary as lists of rows; reports come back as
//! plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use avaca::datahub::{read_manifest, stratified_split, synthesize_dataset, write_manifest, Split, SynthSpec, DEFAULT_RATIOS};
use avaca::eval::{self, EvalReport};
use avaca::model::{self, AudioMode, AvacaConfig, FeatureSequence, ModelParameters};
use avaca::numerics::Array;
use avaca::objectives::{self, LossConfig};
use avaca::trainer::{self, Checkpoint, CheckpointConfig, TrainConfig};
use avaca::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr>(text: &str, what: &str) -> PyResult<T> {
    text.parse()
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {text:?}")))
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Array> {
    Array::from_rows(&rows).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn loss_config(alpha: usize, theta: f64, lambda: f64, epsilon: f64) -> PyResult<LossConfig> {
    let config = LossConfig {
        alpha,
        theta,
        lambda,
        epsilon,
    };
    config.validate().map_err(to_py)?;
    Ok(config)
}

/// ROC-AUC of `scores` against 0/1 `labels`, ties counted as one half.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::roc_auc(&scores, &labels).map_err(to_py)
}

/// The `max(1, len // alpha)` largest scores, in descending order.
#[pyfunction]
#[pyo3(signature = (scores, alpha = 16))]
fn kmax_select(scores: Vec<f64>, alpha: usize) -> PyResult<Vec<f64>> {
    objectives::kmax_select(&scores, alpha).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (scores, label, alpha = 16, epsilon = 1e-7))]
fn dmil_loss(scores: Vec<f64>, label: u8, alpha: usize, epsilon: f64) -> PyResult<f64> {
    objectives::dmil_loss(&scores, label, alpha, epsilon).map_err(to_py)
}

#[pyfunction]
fn center_loss(scores: Vec<f64>, label: u8) -> PyResult<f64> {
    objectives::center_loss(&scores, label).map_err(to_py)
}

/// Weighted loss; returns a dict with `dmil`, `center`, `total` and `k`.
#[pyfunction]
#[pyo3(signature = (scores, label, alpha = 16, theta = 10.0, lambda_ = 1.0, epsilon = 1e-7))]
fn total_loss<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    label: u8,
    alpha: usize,
    theta: f64,
    lambda_: f64,
    epsilon: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = loss_config(alpha, theta, lambda_, epsilon)?;
    let b = objectives::total_loss(&scores, label, &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dmil", b.dmil)?;
    d.set_item("center", b.center)?;
    d.set_item("total", b.total)?;
    d.set_item("k", b.k_used)?;
    Ok(d)
}

/// Parameters plus architecture of one fusion model.
#[pyclass(name = "Model", module = "avaca_py")]
struct PyModel {
    config: CheckpointConfig,
    params: ModelParameters,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (d_visual, d_audio, d_model = 128, heads = 4, audio_mode = "focused", seed = 0, visual_channels = 4))]
    fn new(
        d_visual: usize,
        d_audio: usize,
        d_model: usize,
        heads: usize,
        audio_mode: &str,
        seed: u64,
        visual_channels: usize,
    ) -> PyResult<Self> {
        let model = AvacaConfig {
            d_visual,
            d_audio,
            d_model,
            heads,
            audio_mode: parse(audio_mode, "audio mode")?,
            seed,
            visual_channels,
        };
        let params = model::init_parameters(&model).map_err(to_py)?;
        Ok(Self {
            config: CheckpointConfig {
                model,
                loss: LossConfig::default(),
            },
            params,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let Checkpoint { config, params } = trainer::load_checkpoint(&path).map_err(to_py)?;
        Ok(Self { config, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.params, &self.config, &path).map_err(to_py)
    }

    /// One anomaly score per clip; `visual` and `audio` are lists of rows.
    #[pyo3(signature = (visual, audio, audio_mode = None))]
    fn score(&self, visual: Vec<Vec<f64>>, audio: Vec<Vec<f64>>, audio_mode: Option<&str>) -> PyResult<Vec<f64>> {
        let mut config = self.config.model.clone();
        if let Some(mode) = audio_mode {
            config.audio_mode = parse(mode, "audio mode")?;
        }
        let features = FeatureSequence::new("python", matrix(visual, "visual")?, matrix(audio, "audio")?).map_err(to_py)?;
        model::forward(&features, &config, &self.params).map_err(to_py)
    }

    #[getter]
    fn audio_mode(&self) -> String {
        self.config.model.audio_mode.to_string()
    }

    #[getter]
    fn heads(&self) -> usize {
        self.config.model.heads
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }

    /// Shape and row-major values of one named parameter.
    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let a = self
            .params
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name:?}")))?;
        Ok((a.shape().to_vec(), a.data().to_vec()))
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        let m = &self.config.model;
        format!(
            "Model(d_visual={}, d_audio={}, d_model={}, heads={}, audio_mode='{}')",
            m.d_visual, m.d_audio, m.d_model, m.heads, m.audio_mode
        )
    }
}

/// Writes a synthetic dataset; `spec_json` overrides the default spec.
/// Returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_json = None, seed = None))]
fn synthesize(out_dir: PathBuf, spec_json: Option<&str>, seed: Option<u64>) -> PyResult<PathBuf> {
    let mut spec = match spec_json {
        Some(text) => SynthSpec::from_json(text).map_err(to_py)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    synthesize_dataset(&spec, &out_dir).map_err(to_py)?;
    Ok(out_dir.join(avaca::datahub::MANIFEST_FILE))
}

/// Stratified 60/20/20 split of `manifest`, written next to it as `out`.
/// Returns (train, val, test) counts.
#[pyfunction]
#[pyo3(signature = (manifest, out, seed = 0))]
fn split(manifest: PathBuf, out: PathBuf, seed: u64) -> PyResult<(usize, usize, usize)> {
    let m = read_manifest(&manifest).map_err(to_py)?;
    let mut s = stratified_split(&m, DEFAULT_RATIOS, seed).map_err(to_py)?;
    if let Some(base) = &m.base_dir {
        for r in &mut s.records {
            r.visual_path = base.join(&r.visual_path);
            r.audio_path = base.join(&r.audio_path);
        }
    }
    write_manifest(&s, &out).map_err(to_py)?;
    let count = |sp| s.in_split(sp).count();
    Ok((count(Split::Train), count(Split::Val), count(Split::Test)))
}

/// Trains on the train/val splits of `manifest` and writes outputs to
/// `out_dir`. Returns the best model and the per-epoch history as dicts.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config_json = None, epochs = None, audio_mode = None, seed = None))]
fn train<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out_dir: PathBuf,
    config_json: Option<&str>,
    epochs: Option<usize>,
    audio_mode: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let m = read_manifest(&manifest).map_err(to_py)?;
    let mut config = match config_json {
        Some(text) => {
            let c: TrainConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
            c.validate().map_err(to_py)?;
            c
        }
        None => trainer::config_for_manifest(&m).map_err(to_py)?,
    };
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(mode) = audio_mode {
        config.model.audio_mode = parse(mode, "audio mode")?;
    }
    if let Some(s) = seed {
        config = config.with_seed(s);
    }
    let outcome = py.detach(|| trainer::train(&m, &config)).map_err(to_py)?;
    trainer::write_outputs(&outcome, &out_dir).map_err(to_py)?;
    let history = outcome
        .history
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("dmil", e.dmil)?;
            d.set_item("center", e.center)?;
            d.set_item("total", e.total)?;
            d.set_item("val_auc", e.val_auc)?;
            d.set_item("seconds", e.seconds)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let best = PyModel {
        config: outcome.best.config,
        params: outcome.best.params,
    };
    Ok((best, history))
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("manifest_id", &r.manifest_id)?;
    d.set_item("split", r.split.to_string())?;
    d.set_item("audio_mode", r.audio_mode.to_string())?;
    d.set_item("clip_auc", r.clip_auc)?;
    d.set_item("video_auc", r.video_auc)?;
    d.set_item("clip_auc_std", r.clip_auc_std)?;
    d.set_item("video_auc_std", r.video_auc_std)?;
    let videos = PyDict::new(py);
    for v in &r.videos {
        videos.set_item(&v.video_id, (v.label, v.kmax_mean))?;
    }
    d.set_item("videos", videos)?;
    Ok(d)
}

/// Scores one split of `manifest` with `model` and returns the report.
#[pyfunction]
#[pyo3(signature = (model, manifest, split = "test", audio_mode = None))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    manifest: PathBuf,
    split: &str,
    audio_mode: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = read_manifest(&manifest).map_err(to_py)?;
    let mode: AudioMode = match audio_mode {
        Some(text) => parse(text, "audio mode")?,
        None => model.config.model.audio_mode,
    };
    let checkpoint = Checkpoint {
        config: model.config.clone(),
        params: model.params.clone(),
    };
    let split = parse(split, "split")?;
    let report = py
        .detach(|| eval::evaluate(&checkpoint, &m, split, mode))
        .map_err(to_py)?;
    report_dict(py, &report)
}

/// Finite-difference check of the full model on a toy configuration;
/// returns the maximum relative error.
#[pyfunction]
#[pyo3(signature = (heads = 4, audio_mode = "focused", label = 0, clips = 4, seed = 0))]
fn gradcheck(py: Python<'_>, heads: usize, audio_mode: &str, label: u8, clips: usize, seed: u64) -> PyResult<f64> {
    let model = trainer::toy_model_config(heads, parse(audio_mode, "audio mode")?, seed);
    let loss = LossConfig {
        alpha: 2,
        ..LossConfig::default()
    };
    let r = py
        .detach(|| trainer::check_model_gradients(&model, &loss, clips, label, seed))
        .map_err(to_py)?;
    Ok(r.max_rel_error)
}

#[pymodule]
fn avaca_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(kmax_select, m)?)?;
    m.add_function(wrap_pyfunction!(dmil_loss, m)?)?;
    m.add_function(wrap_pyfunction!(center_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyModel>()?;
    m.add(
        "AUDIO_MODES",
        AudioMode::ALL.iter().map(|a| a.to_string()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
