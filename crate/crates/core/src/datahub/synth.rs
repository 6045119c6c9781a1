//! Seeded synthetic audio-visual feature datasets.
//!
//! Every video carries a smooth low-rank background in both modalities plus
//! unit Gaussian noise. Anomalous videos additionally receive a class-specific
//! signature over a contiguous window covering at least nine tenths of
//! their clips. The signature's per-clip strength along a unit direction is
//! `anomaly_strength * share`, where the audio share is
//! `audio_informativeness` and the visual share is the remainder. Its
//! amplitude jitters from clip to clip, so it also shows up in successive
//! audio differences.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::write_feature_file_f32;
use super::manifest::{write_manifest, Manifest, VideoRecord, NORMAL_CLASS};
use crate::error::{Error, Result};

const BACKGROUND_RANK: usize = 4;
pub const MANIFEST_FILE: &str = "manifest.csv";

fn default_classes() -> BTreeMap<String, usize> {
    BTreeMap::from([
        (NORMAL_CLASS.to_string(), 50),
        ("pedestrians".to_string(), 25),
        ("bus".to_string(), 25),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Class name to number of videos.
    pub classes: BTreeMap<String, usize>,
    pub t_min: usize,
    pub t_max: usize,
    pub d_visual: usize,
    pub d_audio: usize,
    pub anomaly_strength: f64,
    /// Fraction of the anomaly signature placed in the audio modality.
    pub audio_informativeness: f64,
    pub seed: u64,
    pub scene: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            t_min: 8,
            t_max: 16,
            d_visual: 128,
            d_audio: 32,
            anomaly_strength: 4.0,
            audio_informativeness: 0.7,
            seed: 42,
            scene: "synthetic".into(),
        }
    }
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.values().all(|&n| n == 0) {
            return Err(Error::Parameter("synthetic spec has no videos".into()));
        }
        if self.t_min < 2 || self.t_max < self.t_min {
            return Err(Error::Parameter(format!(
                "clip range [{}, {}] must satisfy 2 <= t_min <= t_max",
                self.t_min, self.t_max
            )));
        }
        if self.d_visual == 0 || self.d_audio == 0 {
            return Err(Error::Parameter("feature widths must be at least 1".into()));
        }
        if !(self.anomaly_strength >= 0.0 && self.anomaly_strength.is_finite()) {
            return Err(Error::Parameter("anomaly_strength must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.audio_informativeness) {
            return Err(Error::Parameter("audio_informativeness must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// In-memory synthetic video: row-major clip matrices.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub record: VideoRecord,
    pub clips: usize,
    pub visual: Vec<f32>,
    pub audio: Vec<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

struct Background {
    basis: Vec<Vec<f64>>,
}

impl Background {
    fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let scale = 1.0 / (BACKGROUND_RANK as f64).sqrt();
        let basis = (0..BACKGROUND_RANK)
            .map(|_| (0..d).map(|_| gaussian(rng) * scale).collect())
            .collect();
        Self { basis }
    }

    /// t×d smooth background plus unit noise.
    fn sample(&self, rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
        let d = self.basis[0].len();
        let waves: Vec<(f64, f64, f64)> = (0..BACKGROUND_RANK)
            .map(|_| {
                (
                    rng.random_range(0.5..1.5),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        let mut out = Vec::with_capacity(t * d);
        for j in 0..t {
            let coeffs: Vec<f64> = waves
                .iter()
                .map(|(amp, freq, phase)| amp * (freq * j as f64 + phase).sin())
                .collect();
            for c in 0..d {
                let smooth: f64 = coeffs.iter().zip(&self.basis).map(|(z, b)| z * b[c]).sum();
                out.push(smooth + gaussian(rng));
            }
        }
        out
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

/// Generates all videos in memory. Classes are visited in name order.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let visual_bg = Background::new(&mut rng, spec.d_visual);
    let audio_bg = Background::new(&mut rng, spec.d_audio);
    let signatures: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = spec
        .classes
        .keys()
        .filter(|c| c.as_str() != NORMAL_CLASS)
        .map(|c| {
            let v = unit_vector(&mut rng, spec.d_visual);
            let a = unit_vector(&mut rng, spec.d_audio);
            (c.as_str(), (v, a))
        })
        .collect();

    let audio_gain = spec.anomaly_strength * spec.audio_informativeness;
    let visual_gain = spec.anomaly_strength * (1.0 - spec.audio_informativeness);

    let mut videos = Vec::new();
    for (class, &count) in &spec.classes {
        let label = u8::from(class != NORMAL_CLASS);
        for i in 0..count {
            let t = rng.random_range(spec.t_min..=spec.t_max);
            let mut visual = visual_bg.sample(&mut rng, t);
            let mut audio = audio_bg.sample(&mut rng, t);
            if let Some((dir_v, dir_a)) = signatures.get(class.as_str()) {
                let min_len = (9 * t).div_ceil(10);
                let len = rng.random_range(min_len..=t);
                let start = rng.random_range(0..=t - len);
                for j in start..start + len {
                    let amp = 1.0 + 0.5 * gaussian(&mut rng);
                    for (x, d) in visual[j * spec.d_visual..(j + 1) * spec.d_visual].iter_mut().zip(dir_v) {
                        *x += visual_gain * amp * d;
                    }
                    for (x, d) in audio[j * spec.d_audio..(j + 1) * spec.d_audio].iter_mut().zip(dir_a) {
                        *x += audio_gain * amp * d;
                    }
                }
            }
            let id = format!("{}_{i:04}", slug(class));
            videos.push(SyntheticVideo {
                record: VideoRecord {
                    visual_path: PathBuf::from(format!("features/{id}_visual.avf")),
                    audio_path: PathBuf::from(format!("features/{id}_audio.avf")),
                    video_id: id,
                    scene: spec.scene.clone(),
                    class_name: class.clone(),
                    label,
                    split: None,
                },
                clips: t,
                visual: visual.into_iter().map(|v| v as f32).collect(),
                audio: audio.into_iter().map(|v| v as f32).collect(),
            });
        }
    }
    Ok(videos)
}

/// Writes feature files and `manifest.csv` under `output_dir`.
pub fn synthesize_dataset(spec: &SynthSpec, output_dir: &Path) -> Result<Manifest> {
    let videos = generate(spec)?;
    fs::create_dir_all(output_dir.join("features")).map_err(|e| Error::io(output_dir, e))?;
    let mut records = Vec::with_capacity(videos.len());
    for v in videos {
        write_feature_file_f32(&output_dir.join(&v.record.visual_path), v.clips, spec.d_visual, &v.visual)?;
        write_feature_file_f32(&output_dir.join(&v.record.audio_path), v.clips, spec.d_audio, &v.audio)?;
        records.push(v.record);
    }
    let mut manifest = Manifest::new(records)?;
    manifest.base_dir = Some(output_dir.to_path_buf());
    manifest.seed = Some(spec.seed);
    write_manifest(&manifest, &output_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
