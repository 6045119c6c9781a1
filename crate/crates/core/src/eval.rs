//! ROC-AUC, test-set evaluation and the repeated-split experiment runner.

use serde::{Deserialize, Serialize};

use crate::datahub::{stratified_split, Manifest, Split, VideoRecord, DEFAULT_RATIOS};
use crate::error::{Error, Result};
use crate::model::{forward, AudioMode, AvacaConfig, ModelParameters};
use crate::objectives::kmax_select;
use crate::trainer::{train, Checkpoint, LoadedVideo, TrainConfig, TrainHistory};

/// Area under the ROC curve via the Mann–Whitney rank statistic. Tied
/// scores share their mean rank, so a tied positive/negative pair counts ½.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "roc_auc",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Contract(format!("label must be 0 or 1, got {bad}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{positives} positives and {negatives} negatives; both classes are required"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        let tied_positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        positive_rank_sum += midrank * tied_positives as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Sample mean and standard deviation (n − 1 denominator; 0 when n = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScoreSummary {
    pub video_id: String,
    pub label: u8,
    pub clips: usize,
    pub mean: f64,
    pub max: f64,
    /// Mean of the k-max scores; the video-level score.
    pub kmax_mean: f64,
    pub repeat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub clip_auc: f64,
    pub video_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub manifest_id: String,
    pub split: Split,
    pub audio_mode: AudioMode,
    /// Headline clip-level AUC; the mean across repeats.
    pub clip_auc: f64,
    pub video_auc: f64,
    pub clip_auc_std: f64,
    pub video_auc_std: f64,
    pub seeds: Vec<u64>,
    pub repeats: Vec<RepeatResult>,
    pub videos: Vec<VideoScoreSummary>,
}

impl EvalReport {
    /// Formats an AUC as `mean ± std%`.
    pub fn clip_auc_percent(&self) -> String {
        format!("{:.2} ± {:.2}%", 100.0 * self.clip_auc, 100.0 * self.clip_auc_std)
    }
}

/// Scored videos sorted by id.
pub type ScoredVideos = Vec<(VideoRecord, Vec<f64>)>;

pub fn score_videos(videos: &[LoadedVideo], model: &AvacaConfig, params: &ModelParameters) -> Result<ScoredVideos> {
    let mut out = Vec::with_capacity(videos.len());
    for (record, features) in videos {
        if features.visual.cols() != model.d_visual || features.audio.cols() != model.d_audio {
            return Err(Error::Config(format!(
                "video {} has widths {} / {}, checkpoint expects {} / {}",
                record.video_id,
                features.visual.cols(),
                features.audio.cols(),
                model.d_visual,
                model.d_audio
            )));
        }
        let s = forward(features, model, params)?;
        out.push((record.clone(), s));
    }
    out.sort_by(|a, b| a.0.video_id.cmp(&b.0.video_id));
    Ok(out)
}

/// Clip-level AUC pooling every clip with its video's weak label.
pub fn clip_auc_from(scored: &[(u8, &[f64])]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (label, s) in scored {
        scores.extend_from_slice(s);
        labels.extend(std::iter::repeat_n(*label, s.len()));
    }
    roc_auc(&scores, &labels)
}

/// Video-level AUC on the mean of each video's k-max scores.
pub fn video_auc_from(scored: &[(u8, &[f64])], alpha: usize) -> Result<f64> {
    let mut scores = Vec::with_capacity(scored.len());
    let mut labels = Vec::with_capacity(scored.len());
    for (label, s) in scored {
        let top = kmax_select(s, alpha)?;
        scores.push(top.iter().sum::<f64>() / top.len() as f64);
        labels.push(*label);
    }
    roc_auc(&scores, &labels)
}

pub(crate) fn clip_auc_of(videos: &[LoadedVideo], model: &AvacaConfig, params: &ModelParameters) -> Result<f64> {
    let scored = score_videos(videos, model, params)?;
    let view: Vec<(u8, &[f64])> = scored.iter().map(|(r, s)| (r.label, s.as_slice())).collect();
    clip_auc_from(&view)
}

/// Per-video summaries and both AUCs from (video id, label, scores).
pub fn summarize(
    scored: &[(String, u8, Vec<f64>)],
    alpha: usize,
    repeat: usize,
) -> Result<(f64, f64, Vec<VideoScoreSummary>)> {
    let view: Vec<(u8, &[f64])> = scored.iter().map(|(_, y, s)| (*y, s.as_slice())).collect();
    let clip_auc = clip_auc_from(&view)?;
    let video_auc = video_auc_from(&view, alpha)?;
    let mut videos = Vec::with_capacity(scored.len());
    for (id, label, s) in scored {
        let top = kmax_select(s, alpha)?;
        videos.push(VideoScoreSummary {
            video_id: id.clone(),
            label: *label,
            clips: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            kmax_mean: top.iter().sum::<f64>() / top.len() as f64,
            repeat,
        });
    }
    Ok((clip_auc, video_auc, videos))
}

/// Scores already-loaded videos with a checkpoint under `audio_mode`.
pub fn evaluate_loaded(
    checkpoint: &Checkpoint,
    videos: &[LoadedVideo],
    split: Split,
    audio_mode: AudioMode,
    manifest_id: &str,
) -> Result<EvalReport> {
    let model = AvacaConfig {
        audio_mode,
        ..checkpoint.config.model.clone()
    };
    let scored = score_videos(videos, &model, &checkpoint.params)?;
    let flat: Vec<(String, u8, Vec<f64>)> = scored
        .into_iter()
        .map(|(r, s)| (r.video_id, r.label, s))
        .collect();
    let (clip_auc, video_auc, summaries) = summarize(&flat, checkpoint.config.loss.alpha, 0)?;
    let seed = checkpoint.config.model.seed;
    Ok(EvalReport {
        manifest_id: manifest_id.to_string(),
        split,
        audio_mode,
        clip_auc,
        video_auc,
        clip_auc_std: 0.0,
        video_auc_std: 0.0,
        seeds: vec![seed],
        repeats: vec![RepeatResult {
            repeat: 0,
            seed,
            clip_auc,
            video_auc,
        }],
        videos: summaries,
    })
}

pub fn manifest_id(manifest: &Manifest) -> String {
    manifest.scenes().into_iter().collect::<Vec<_>>().join("+")
}

/// Scores `split` of `manifest` with a checkpoint under `audio_mode`.
pub fn evaluate(checkpoint: &Checkpoint, manifest: &Manifest, split: Split, audio_mode: AudioMode) -> Result<EvalReport> {
    let videos = manifest.load_split(split)?;
    if videos.is_empty() {
        return Err(Error::Contract(format!("split {split} is empty")));
    }
    evaluate_loaded(checkpoint, &videos, split, audio_mode, &manifest_id(manifest))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub checkpoints: Vec<Checkpoint>,
    pub histories: Vec<TrainHistory>,
}

/// Repeats split → train → test evaluation with seeds `seed + r` and
/// aggregates mean ± sample standard deviation. The audio mode comes from
/// `config.model.audio_mode`.
pub fn run_experiment(manifest: &Manifest, config: &TrainConfig, repeats: usize) -> Result<ExperimentOutcome> {
    if repeats < 1 {
        return Err(Error::Parameter("repeats must be at least 1".into()));
    }
    let mode = config.model.audio_mode;
    let mut results = Vec::with_capacity(repeats);
    let mut videos = Vec::new();
    let mut checkpoints = Vec::with_capacity(repeats);
    let mut histories = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let seed = config.seed.wrapping_add(r as u64);
        let split = stratified_split(manifest, DEFAULT_RATIOS, seed)?;
        let mut run_config = config.clone().with_seed(seed);
        run_config.checkpoint_dir = config
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("{mode}-repeat{r}")));
        let outcome = train(&split, &run_config)?;
        let mut report = evaluate(&outcome.best, &split, Split::Test, mode)?;
        for v in &mut report.videos {
            v.repeat = r;
        }
        results.push(RepeatResult {
            repeat: r,
            seed,
            clip_auc: report.clip_auc,
            video_auc: report.video_auc,
        });
        videos.extend(report.videos);
        checkpoints.push(outcome.best);
        histories.push(outcome.history);
    }
    let clip: Vec<f64> = results.iter().map(|r| r.clip_auc).collect();
    let video: Vec<f64> = results.iter().map(|r| r.video_auc).collect();
    let (clip_auc, clip_auc_std) = mean_std(&clip);
    let (video_auc, video_auc_std) = mean_std(&video);
    let report = EvalReport {
        manifest_id: manifest_id(manifest),
        split: Split::Test,
        audio_mode: mode,
        clip_auc,
        video_auc,
        clip_auc_std,
        video_auc_std,
        seeds: results.iter().map(|r| r.seed).collect(),
        repeats: results,
        videos,
    };
    Ok(ExperimentOutcome {
        report,
        checkpoints,
        histories,
    })
}
