//! The audio-visual cross-attention fusion network.
//!
//! ```text
//! visual V (t×D_v) ─ conv2d ─ relu ─ proj ─ V' ─┬─────────── KV ─┐
//!                                               └─ Q ─┐          │
//! audio  P (t×D_a) ─ conv1d ─ relu ─ conv1d ─ P' ─┬───┼─── Q ─ VAT ─ stage2 ─┐
//!                                     U = ΔP' ────┴ KV┴─ AVT ─ stage2 ───────┴─ concat ─ fc ─ σ ─ s
//! ```
//!
//! VAT queries with the audio sequence over visual keys and values. AVT
//! queries with the visual sequence over the difference sequence `U`
//! (focused mode) or `P'` itself (plain and zeroed modes). The sequence axis
//! is always clips, so both transformer outputs have one row per clip.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Tape, Var};

/// One anomaly score in `[0, 1]` per clip.
pub type AnomalyScoreVector = Vec<f64>;

const CONV1D_WIDTH: usize = 3;
const CONV2D_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum AudioMode {
    /// AVT keys and values are the audio difference sequence.
    Focused,
    /// AVT keys and values are the stage-1 audio sequence.
    Plain,
    /// Audio input replaced by zeros, then run as `Plain`.
    Zeroed,
}

impl AudioMode {
    pub const ALL: [AudioMode; 3] = [AudioMode::Focused, AudioMode::Plain, AudioMode::Zeroed];

    pub fn as_str(self) -> &'static str {
        match self {
            AudioMode::Focused => "focused",
            AudioMode::Plain => "plain",
            AudioMode::Zeroed => "zeroed",
        }
    }
}

impl fmt::Display for AudioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AudioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focused" => Ok(AudioMode::Focused),
            "plain" => Ok(AudioMode::Plain),
            "zeroed" => Ok(AudioMode::Zeroed),
            other => Err(Error::Parameter(format!(
                "unknown audio mode {other:?} (expected focused, plain or zeroed)"
            ))),
        }
    }
}

fn default_visual_channels() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvacaConfig {
    pub d_visual: usize,
    pub d_audio: usize,
    pub d_model: usize,
    pub heads: usize,
    pub audio_mode: AudioMode,
    pub seed: u64,
    /// Output channels of the visual 3×3 convolution before they are mixed
    /// back to one channel.
    #[serde(default = "default_visual_channels")]
    pub visual_channels: usize,
}

impl Default for AvacaConfig {
    fn default() -> Self {
        Self {
            d_visual: 2304,
            d_audio: 128,
            d_model: 128,
            heads: 4,
            audio_mode: AudioMode::Focused,
            seed: 0,
            visual_channels: default_visual_channels(),
        }
    }
}

impl AvacaConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("d_visual", self.d_visual),
            ("d_audio", self.d_audio),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("visual_channels", self.visual_channels),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Every learnable array in a fixed order: (name, shape, fan-in).
    /// Names ending in `.bias` are zero-initialised.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (dv, da, dm, c) = (self.d_visual, self.d_audio, self.d_model, self.visual_channels);
        let (k1, k2) = (CONV1D_WIDTH, CONV2D_SIZE);
        let mut out: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, fan_in: usize| {
            out.push((name.to_string(), shape, fan_in));
        };

        push("stage1.visual.conv0.kernel", vec![k2, k2, c], k2 * k2);
        push("stage1.visual.conv0.bias", vec![c], 0);
        push("stage1.visual.mix.weight", vec![c, 1], c);
        push("stage1.visual.mix.bias", vec![1], 0);
        push("stage1.visual.proj.weight", vec![dv, dm], dv);
        push("stage1.visual.proj.bias", vec![dm], 0);
        push("stage1.audio.conv0.kernel", vec![k1, da, dm], k1 * da);
        push("stage1.audio.conv0.bias", vec![dm], 0);
        push("stage1.audio.conv1.kernel", vec![k1, dm, dm], k1 * dm);
        push("stage1.audio.conv1.bias", vec![dm], 0);
        for block in ["vat", "avt"] {
            for proj in ["query", "key", "value", "output"] {
                push(&format!("{block}.{proj}.weight"), vec![dm, dm], dm);
                push(&format!("{block}.{proj}.bias"), vec![dm], 0);
            }
        }
        for branch in ["vat", "avt"] {
            for layer in ["conv0", "conv1"] {
                push(&format!("stage2.{branch}.{layer}.kernel"), vec![k1, dm, dm], k1 * dm);
                push(&format!("stage2.{branch}.{layer}.bias"), vec![dm], 0);
            }
        }
        push("head.weight", vec![2 * dm, 1], 2 * dm);
        push("head.bias", vec![1], 0);
        out
    }
}

/// All learnable arrays, addressed by dotted path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParameters {
    arrays: BTreeMap<String, Array>,
}

impl ModelParameters {
    pub fn from_map(arrays: BTreeMap<String, Array>) -> Self {
        Self { arrays }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.arrays.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Option<Array> {
        self.arrays.insert(name.into(), value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn check_layout(&self, config: &AvacaConfig) -> Result<()> {
        let layout = config.parameter_layout();
        for (name, shape, _) in &layout {
            match self.arrays.get(name) {
                None => return Err(Error::Config(format!("missing parameter {name}"))),
                Some(a) if a.shape() != shape.as_slice() => {
                    return Err(Error::Dimension {
                        op: "parameter layout",
                        left: a.shape().to_vec(),
                        right: shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if self.arrays.len() != layout.len() {
            let known: Vec<&String> = layout.iter().map(|(n, _, _)| n).collect();
            let extra = self.arrays.keys().find(|k| !known.contains(k));
            return Err(Error::Config(format!("unknown parameter {extra:?}")));
        }
        Ok(())
    }
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases, deterministic in the seed.
pub fn init_parameters(config: &AvacaConfig) -> Result<ModelParameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParameters::default();
    for (name, shape, fan_in) in config.parameter_layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        params.insert(name, Array::new(shape, data)?);
    }
    Ok(params)
}

/// Per-video model input: one visual and one audio row per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub visual: Array,
    pub audio: Array,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, visual: Array, audio: Array) -> Result<Self> {
        if visual.shape().len() != 2 || audio.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "FeatureSequence",
                left: visual.shape().to_vec(),
                right: audio.shape().to_vec(),
            });
        }
        if visual.rows() != audio.rows() {
            return Err(Error::Alignment {
                visual: visual.rows(),
                audio: audio.rows(),
            });
        }
        if visual.rows() == 0 {
            return Err(Error::SequenceTooShort { needed: 1, got: 0 });
        }
        Ok(Self {
            video_id: video_id.into(),
            visual,
            audio,
        })
    }

    pub fn clips(&self) -> usize {
        self.visual.rows()
    }
}

/// Parameters registered as leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundParameters {
    vars: BTreeMap<String, Var>,
}

impl BoundParameters {
    pub fn bind(tape: &mut Tape, params: &ModelParameters) -> Self {
        let vars = params
            .iter()
            .map(|(name, a)| (name.clone(), tape.leaf(a.clone())))
            .collect();
        Self { vars }
    }

    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn check_widths(features: &FeatureSequence, config: &AvacaConfig) -> Result<()> {
    if features.visual.cols() != config.d_visual {
        return Err(Error::Dimension {
            op: "visual features",
            left: features.visual.shape().to_vec(),
            right: vec![features.clips(), config.d_visual],
        });
    }
    if features.audio.cols() != config.d_audio {
        return Err(Error::Dimension {
            op: "audio features",
            left: features.audio.shape().to_vec(),
            right: vec![features.clips(), config.d_audio],
        });
    }
    Ok(())
}

fn conv1d_layer(tape: &mut Tape, p: &BoundParameters, x: Var, prefix: &str) -> Result<Var> {
    let k = p.var(&format!("{prefix}.kernel"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.conv1d(x, k, b)
}

fn linear_layer(tape: &mut Tape, p: &BoundParameters, x: Var, prefix: &str) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.linear(x, w, b)
}

/// Stage 1 on tape variables. Returns `(V', P')`, both t×d_model.
pub fn stage1_on_tape(
    tape: &mut Tape,
    visual: Var,
    audio: Var,
    config: &AvacaConfig,
    p: &BoundParameters,
) -> Result<(Var, Var)> {
    let t = tape.value(visual).rows();
    let (dv, c) = (config.d_visual, config.visual_channels);

    let k = p.var("stage1.visual.conv0.kernel")?;
    let b = p.var("stage1.visual.conv0.bias")?;
    let maps = tape.conv2d(visual, k, b)?;
    let flat = tape.reshape(maps, &[t * dv, c])?;
    let mixed = linear_layer(tape, p, flat, "stage1.visual.mix")?;
    let mixed = tape.reshape(mixed, &[t, dv])?;
    let hidden = tape.relu(mixed);
    let v_prime = linear_layer(tape, p, hidden, "stage1.visual.proj")?;

    let a0 = conv1d_layer(tape, p, audio, "stage1.audio.conv0")?;
    let a0 = tape.relu(a0);
    let p_prime = conv1d_layer(tape, p, a0, "stage1.audio.conv1")?;
    Ok((v_prime, p_prime))
}

/// Runs stage 1 on plain arrays.
pub fn stage1(
    features: &FeatureSequence,
    config: &AvacaConfig,
    params: &ModelParameters,
) -> Result<(Array, Array)> {
    check_widths(features, config)?;
    let mut tape = Tape::new();
    let bound = BoundParameters::bind(&mut tape, params);
    let v = tape.leaf(features.visual.clone());
    let a = tape.leaf(features.audio.clone());
    let (vp, pp) = stage1_on_tape(&mut tape, v, a, config, &bound)?;
    Ok((tape.value(vp).clone(), tape.value(pp).clone()))
}

/// `U[i] = P'[i+1] - P'[i]`.
pub fn audio_difference(p_prime: &Array) -> Result<Array> {
    let mut tape = Tape::new();
    let v = tape.leaf(p_prime.clone());
    let u = tape.row_diff(v)?;
    Ok(tape.value(u).clone())
}

/// Intermediate values of one cross-attention block.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Output after the final fully connected projection.
    pub tau: Var,
    /// Concatenated per-head outputs before the projection.
    pub pre_projection: Var,
    /// Projected values, `kv·W_v + b_v`.
    pub values: Var,
    /// One q×k weight matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention with queries from `query_src` and
/// keys/values from `kv_src`, followed by an output projection. Parameters
/// are looked up under `{prefix}.{query,key,value,output}`.
pub fn cross_attention_on_tape(
    tape: &mut Tape,
    query_src: Var,
    kv_src: Var,
    heads: usize,
    p: &BoundParameters,
    prefix: &str,
) -> Result<AttentionOutput> {
    let d_model = tape.value(query_src).cols();
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Parameter(format!(
            "d_model {d_model} is not divisible by {heads} heads"
        )));
    }
    if tape.value(kv_src).cols() != d_model {
        return Err(Error::Dimension {
            op: "cross_attention",
            left: tape.value(query_src).shape().to_vec(),
            right: tape.value(kv_src).shape().to_vec(),
        });
    }
    let dh = d_model / heads;
    let scale = (dh as f64).sqrt();

    let q = linear_layer(tape, p, query_src, &format!("{prefix}.query"))?;
    let k = linear_layer(tape, p, kv_src, &format!("{prefix}.key"))?;
    let v = linear_layer(tape, p, kv_src, &format!("{prefix}.value"))?;

    let mut weights = Vec::with_capacity(heads);
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let attn = tape.softmax_rows(logits, scale)?;
        outputs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let pre_projection = if heads == 1 { outputs[0] } else { tape.concat_cols(&outputs)? };
    let tau = linear_layer(tape, p, pre_projection, &format!("{prefix}.output"))?;
    Ok(AttentionOutput {
        tau,
        pre_projection,
        values: v,
        weights,
    })
}

/// Cross-attention on plain arrays; returns `τ`.
pub fn cross_attention(
    query_src: &Array,
    kv_src: &Array,
    heads: usize,
    params: &ModelParameters,
    prefix: &str,
) -> Result<Array> {
    let mut tape = Tape::new();
    let bound = BoundParameters::bind(&mut tape, params);
    let q = tape.leaf(query_src.clone());
    let kv = tape.leaf(kv_src.clone());
    let out = cross_attention_on_tape(&mut tape, q, kv, heads, &bound, prefix)?;
    Ok(tape.value(out.tau).clone())
}

/// Full forward pass on a tape. Returns the length-t score vector.
pub fn forward_on_tape(
    tape: &mut Tape,
    features: &FeatureSequence,
    config: &AvacaConfig,
    p: &BoundParameters,
) -> Result<Var> {
    check_widths(features, config)?;
    let t = features.clips();
    let visual = tape.leaf(features.visual.clone());
    let audio = match config.audio_mode {
        AudioMode::Zeroed => tape.leaf(Array::zeros(features.audio.shape())),
        _ => tape.leaf(features.audio.clone()),
    };
    let (v_prime, p_prime) = stage1_on_tape(tape, visual, audio, config, p)?;

    let avt_kv = match config.audio_mode {
        AudioMode::Focused => tape.row_diff(p_prime)?,
        AudioMode::Plain | AudioMode::Zeroed => p_prime,
    };
    let vat = cross_attention_on_tape(tape, p_prime, v_prime, config.heads, p, "vat")?;
    let avt = cross_attention_on_tape(tape, v_prime, avt_kv, config.heads, p, "avt")?;

    let mut branches = Vec::with_capacity(2);
    for (name, tau) in [("vat", vat.tau), ("avt", avt.tau)] {
        let h = conv1d_layer(tape, p, tau, &format!("stage2.{name}.conv0"))?;
        let h = tape.relu(h);
        branches.push(conv1d_layer(tape, p, h, &format!("stage2.{name}.conv1"))?);
    }
    let joined = tape.concat_cols(&branches)?;
    let logits = linear_layer(tape, p, joined, "head")?;
    let scores = tape.sigmoid(logits);
    tape.reshape(scores, &[t])
}

/// Clip anomaly scores for one video.
pub fn forward(
    features: &FeatureSequence,
    config: &AvacaConfig,
    params: &ModelParameters,
) -> Result<AnomalyScoreVector> {
    let mut tape = Tape::new();
    let bound = BoundParameters::bind(&mut tape, params);
    let s = forward_on_tape(&mut tape, features, config, &bound)?;
    Ok(tape.value(s).data().to_vec())
}
