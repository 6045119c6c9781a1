//! Deterministic training loop with validation-based model selection.

mod adam;
mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointConfig, CHECKPOINT_MAGIC,
};

use crate::datahub::{Manifest, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::eval::clip_auc_of;
use crate::model::{forward_on_tape, AvacaConfig, BoundParameters, FeatureSequence, ModelParameters};
use crate::numerics::{finite_diff_check_with, Array, GradCheckReport, Stencil, Tape};
use crate::objectives::{total_loss_on_tape, LossBreakdown, LossConfig};

pub const BEST_CHECKPOINT_FILE: &str = "best.avck";
pub const HISTORY_CSV_FILE: &str = "history.csv";

fn default_clip_norm() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub model: AvacaConfig,
    pub batch_videos: usize,
    /// Drives the order in which training videos are visited.
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Global gradient-norm ceiling applied before every optimizer step.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-5,
            loss: LossConfig::default(),
            model: AvacaConfig::default(),
            batch_videos: 8,
            seed: 0,
            checkpoint_dir: None,
            clip_norm: default_clip_norm(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if self.batch_videos < 1 {
            return Err(Error::Parameter("batch_videos must be at least 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Parameter("clip_norm must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Sets both the model initialisation seed and the shuffling seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn checkpoint_config(&self) -> CheckpointConfig {
        CheckpointConfig {
            model: self.model.clone(),
            loss: self.loss.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dmil: f64,
    pub center: f64,
    pub total: f64,
    pub val_auc: f64,
    pub seconds: f64,
    /// Optimizer steps whose gradient was rescaled to `clip_norm`.
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best_val_auc(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_auc).reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,dmil,center,total,val_auc,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                e.epoch, e.dmil, e.center, e.total, e.val_auc, e.seconds
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// Video loaded for training or scoring.
pub type LoadedVideo = (VideoRecord, FeatureSequence);

fn check_widths(videos: &[LoadedVideo], model: &AvacaConfig) -> Result<()> {
    for (r, f) in videos {
        if f.visual.cols() != model.d_visual || f.audio.cols() != model.d_audio {
            return Err(Error::Config(format!(
                "video {} has widths visual {} / audio {}, model expects {} / {}",
                r.video_id,
                f.visual.cols(),
                f.audio.cols(),
                model.d_visual,
                model.d_audio
            )));
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one video.
pub fn video_gradients(
    features: &FeatureSequence,
    label: u8,
    params: &ModelParameters,
    model: &AvacaConfig,
    loss: &LossConfig,
) -> Result<(LossBreakdown, ModelParameters)> {
    let mut tape = Tape::new();
    let bound = BoundParameters::bind(&mut tape, params);
    let scores = forward_on_tape(&mut tape, features, model, &bound)?;
    let (root, breakdown) = total_loss_on_tape(&mut tape, scores, label, loss)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss of video {}", features.video_id)));
    }
    let grads = tape.backward(root)?;
    let mut out = ModelParameters::default();
    for (name, var) in bound.iter() {
        out.insert(name.clone(), grads.wrt(&tape, *var));
    }
    Ok((breakdown, out))
}

fn accumulate(into: &mut ModelParameters, grads: &ModelParameters) {
    for (name, g) in grads.iter() {
        match into.get_mut(name) {
            Some(acc) => acc.add_assign(g),
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
}

fn scale_all(grads: &mut ModelParameters, factor: f64) {
    let names: Vec<String> = grads.names().cloned().collect();
    for name in names {
        if let Some(g) = grads.get_mut(&name) {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

fn global_norm(grads: &ModelParameters) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Trains on pre-loaded videos. `train` needs at least one normal and one
/// anomalous video; `val` needs both classes so its AUC is defined.
pub fn train_on(train: &[LoadedVideo], val: &[LoadedVideo], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("train and val splits must both be non-empty".into()));
    }
    if !train.iter().any(|(r, _)| r.label == 0) || !train.iter().any(|(r, _)| r.label == 1) {
        return Err(Error::Contract(
            "training split needs at least one normal and one anomalous video".into(),
        ));
    }
    if !val.iter().any(|(r, _)| r.label == 0) || !val.iter().any(|(r, _)| r.label == 1) {
        return Err(Error::Contract("validation split needs both normal and anomalous videos".into()));
    }
    check_widths(train, &config.model)?;
    check_widths(val, &config.model)?;

    let mut params = crate::model::init_parameters(&config.model)?;
    let mut state = AdamState::new();
    let adam = AdamConfig::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, ModelParameters)> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut dmil, mut center, mut total) = (0.0, 0.0, 0.0);
        let mut clipped_steps = 0;
        for group in order.chunks(config.batch_videos) {
            let mut grads = ModelParameters::default();
            for &i in group {
                let (record, features) = &train[i];
                let (b, g) = video_gradients(features, record.label, &params, &config.model, &config.loss)
                    .map_err(|e| match e {
                        Error::NonFinite(_) => Error::NonFinite(format!(
                            "loss of video {} in epoch {epoch}",
                            record.video_id
                        )),
                        other => other,
                    })?;
                dmil += b.dmil;
                center += b.center;
                total += b.total;
                accumulate(&mut grads, &g);
            }
            scale_all(&mut grads, 1.0 / group.len() as f64);
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm in epoch {epoch}")));
            }
            if norm > config.clip_norm {
                scale_all(&mut grads, config.clip_norm / norm);
                clipped_steps += 1;
            }
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }

        let val_auc = clip_auc_of(val, &config.model, &params)?;
        let n = train.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            dmil: dmil / n,
            center: center / n,
            total: total / n,
            val_auc,
            seconds: started.elapsed().as_secs_f64(),
            clipped_steps,
        });
        if best.as_ref().is_none_or(|(auc, _, _)| val_auc > *auc) {
            best = Some((val_auc, epoch, params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let outcome = TrainOutcome {
        best: Checkpoint {
            config: config.checkpoint_config(),
            params: best_params,
        },
        best_epoch,
        history,
    };
    if let Some(dir) = &config.checkpoint_dir {
        write_outputs(&outcome, dir)?;
    }
    Ok(outcome)
}

/// Loads the train and val splits of `manifest` and trains.
pub fn train(manifest: &Manifest, config: &TrainConfig) -> Result<TrainOutcome> {
    let train_set = manifest.load_split(Split::Train)?;
    let val_set = manifest.load_split(Split::Val)?;
    train_on(&train_set, &val_set, config)
}

/// Default training config with feature widths taken from the first video
/// of `manifest`.
pub fn config_for_manifest(manifest: &Manifest) -> Result<TrainConfig> {
    let first = manifest
        .records
        .first()
        .ok_or_else(|| Error::Contract("manifest has no records".into()))?;
    let features = manifest.load(first)?;
    let mut config = TrainConfig::default();
    config.model.d_visual = features.visual.cols();
    config.model.d_audio = features.audio.cols();
    Ok(config)
}

/// Writes `best.avck`, `history.csv` and `history.json` under `dir`.
pub fn write_outputs(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&outcome.best.params, &outcome.best.config, &dir.join(BEST_CHECKPOINT_FILE))?;
    let csv = dir.join(HISTORY_CSV_FILE);
    fs::write(&csv, outcome.history.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("history.json");
    fs::write(&json, serde_json::to_string_pretty(&outcome.history)?).map_err(|e| Error::io(&json, e))
}

/// Where and how [`check_model_gradients`] probes the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelGradCheck {
    /// Parameters are drawn as N(0, (scale / sqrt(fan_in))^2), biases included.
    pub scale: f64,
    pub eps: f64,
    pub stencil: Stencil,
}

impl Default for ModelGradCheck {
    fn default() -> Self {
        Self {
            scale: 1.0,
            eps: 1e-3,
            stencil: Stencil::FivePoint,
        }
    }
}

/// Small architecture used for gradient checks.
pub fn toy_model_config(heads: usize, mode: crate::model::AudioMode, seed: u64) -> AvacaConfig {
    AvacaConfig {
        d_visual: 6,
        d_audio: 3,
        d_model: 8,
        heads,
        audio_mode: mode,
        seed,
        visual_channels: 2,
    }
}

/// Finite-difference check of the full forward pass plus total loss with
/// respect to every model parameter, on Gaussian toy features of `t` clips.
pub fn check_model_gradients(
    model: &AvacaConfig,
    loss: &LossConfig,
    t: usize,
    label: u8,
    seed: u64,
) -> Result<GradCheckReport> {
    check_model_gradients_with(model, loss, t, label, seed, &ModelGradCheck::default())
}

/// [`check_model_gradients`] with explicit probe settings.
pub fn check_model_gradients_with(
    model: &AvacaConfig,
    loss: &LossConfig,
    t: usize,
    label: u8,
    seed: u64,
    probe: &ModelGradCheck,
) -> Result<GradCheckReport> {
    use rand_distr::{Distribution, StandardNormal};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Array::matrix(rows, cols, data)
    };
    let features = FeatureSequence::new("gradcheck", gaussian(t, model.d_visual)?, gaussian(t, model.d_audio)?)?;
    // A generic point rather than the initializer: zero biases put ReLUs
    // exactly on their kink, and small weights leave attention so flat that
    // query/key gradients drop below the round-off floor of the check.
    let mut names = Vec::new();
    let mut point = Vec::new();
    for (name, shape, fan_in) in model.parameter_layout() {
        let n: usize = shape.iter().product();
        let sd = probe.scale / (fan_in.max(1) as f64).sqrt();
        let data = (0..n).map(|_| { let g: f64 = StandardNormal.sample(&mut rng); sd * g }).collect();
        point.push(Array::new(shape, data)?);
        names.push(name);
    }

    finite_diff_check_with(
        |tape, vars| {
            let bound = BoundParameters::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let scores = forward_on_tape(tape, &features, model, &bound)?;
            Ok(total_loss_on_tape(tape, scores, label, loss)?.0)
        },
        &point,
        probe.eps,
        probe.stencil,
    )
}
