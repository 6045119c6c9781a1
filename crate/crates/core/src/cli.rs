//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on contract, format or I/O errors, 2 on
//! usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datahub::{read_manifest, stratified_split, synthesize_dataset, write_manifest, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, run_experiment, EvalReport};
use crate::model::AudioMode;
use crate::objectives::LossConfig;
use crate::trainer::{check_model_gradients, config_for_manifest, load_checkpoint, toy_model_config, train, write_outputs, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "avaca", version, about = "Audio-visual cross-attention anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    Synth(SynthArgs),
    /// Assign stratified train/val/test splits to a manifest.
    Split(SplitArgs),
    /// Train a model and write the best checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Repeated split/train/test runs for one or more audio modes.
    Experiment(ExperimentArgs),
    /// Finite-difference check of the full model gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON spec; built-in defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest with train and val splits assigned.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training config JSON. Feature widths are taken from the data when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for best.avck and history files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub audio_mode: Option<AudioMode>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "focused")]
    pub audio_mode: AudioMode,
    /// Report JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Manifest; existing split assignments are ignored.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, value_delimiter = ',', default_values_t = AudioMode::ALL.to_vec())]
    pub audio_modes: Vec<AudioMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON summary path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl clap::ValueEnum for AudioMode {
    fn value_variants<'a>() -> &'a [Self] {
        &AudioMode::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

impl clap::ValueEnum for Split {
    fn value_variants<'a>() -> &'a [Self] {
        &Split::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_train_config(path: Option<&Path>) -> Result<Option<TrainConfig>> {
    path.map(|p| {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let config: TrainConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    })
    .transpose()
}

/// Config from file, or defaults with feature widths read from the first video.
fn resolve_train_config(
    path: Option<&Path>,
    manifest: &crate::datahub::Manifest,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut config = match read_train_config(path)? {
        Some(c) => c,
        None => config_for_manifest(manifest)?,
    };
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(s) = seed {
        config = config.with_seed(s);
    }
    Ok(config)
}

fn report_line(report: &EvalReport) -> String {
    format!(
        "{} {}: clip AUC {:.4} ± {:.4}, video AUC {:.4} ± {:.4}",
        report.manifest_id, report.audio_mode, report.clip_auc, report.clip_auc_std, report.video_auc, report.video_auc_std
    )
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => {
            let mut spec = match &args.spec {
                Some(p) => SynthSpec::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            let manifest = synthesize_dataset(&spec, &args.out)?;
            println!("wrote {} videos to {}", manifest.len(), args.out.display());
        }
        Command::Split(args) => {
            let manifest = read_manifest(&args.manifest)?;
            let ratios = [args.ratios[0], args.ratios[1], args.ratios[2]];
            let mut split = stratified_split(&manifest, ratios, args.seed)?;
            // Keep feature paths valid relative to the new location.
            if let Some(base) = &manifest.base_dir {
                let base = fs::canonicalize(if base.as_os_str().is_empty() { Path::new(".") } else { base })
                    .map_err(|e| Error::io(base, e))?;
                for r in &mut split.records {
                    r.visual_path = base.join(&r.visual_path);
                    r.audio_path = base.join(&r.audio_path);
                }
            }
            write_manifest(&split, &args.out)?;
            for s in Split::ALL {
                println!("{s}: {}", split.in_split(s).count());
            }
        }
        Command::Train(args) => {
            let manifest = read_manifest(&args.manifest)?;
            let mut config = resolve_train_config(args.config.as_deref(), &manifest, args.epochs, args.seed)?;
            if let Some(mode) = args.audio_mode {
                config.model.audio_mode = mode;
            }
            let outcome = train(&manifest, &config)?;
            write_outputs(&outcome, &args.out)?;
            let best = outcome.history.best_val_auc().unwrap_or(f64::NAN);
            println!(
                "best epoch {} (val AUC {best:.4}), checkpoint in {}",
                outcome.best_epoch,
                args.out.display()
            );
        }
        Command::Eval(args) => {
            let checkpoint = load_checkpoint(&args.checkpoint)?;
            let manifest = read_manifest(&args.manifest)?;
            let report = evaluate(&checkpoint, &manifest, args.split, args.audio_mode)?;
            if let Some(out) = &args.out {
                write_text(out, &serde_json::to_string_pretty(&report)?)?;
            }
            println!("{}", report_line(&report));
        }
        Command::Experiment(args) => {
            let manifest = read_manifest(&args.manifest)?;
            let base = resolve_train_config(args.config.as_deref(), &manifest, args.epochs, args.seed)?;
            let mut summary = String::from("audio_mode,clip_auc,clip_auc_std,video_auc,video_auc_std\n");
            for mode in &args.audio_modes {
                let mut config = base.clone();
                config.model.audio_mode = *mode;
                config.checkpoint_dir = Some(args.out.clone());
                let outcome = run_experiment(&manifest, &config, args.repeats)?;
                let r = &outcome.report;
                write_text(
                    &args.out.join(format!("report-{mode}.json")),
                    &serde_json::to_string_pretty(r)?,
                )?;
                summary.push_str(&format!(
                    "{mode},{},{},{},{}\n",
                    r.clip_auc, r.clip_auc_std, r.video_auc, r.video_auc_std
                ));
                println!("{}", report_line(r));
            }
            write_text(&args.out.join("summary.csv"), &summary)?;
        }
        Command::Gradcheck(args) => {
            let loss = LossConfig { alpha: 2, ..LossConfig::default() };
            let mut worst = 0.0f64;
            let mut rows = Vec::new();
            for heads in [1, 4] {
                for mode in AudioMode::ALL {
                    for label in [0u8, 1] {
                        let model = toy_model_config(heads, mode, args.seed);
                        let r = check_model_gradients(&model, &loss, args.clips, label, args.seed)?;
                        println!(
                            "heads={heads} mode={mode} y={label}: max relative error {:.3e} over {} coordinates",
                            r.max_rel_error, r.coordinates
                        );
                        worst = worst.max(r.max_rel_error);
                        rows.push(serde_json::json!({
                            "heads": heads, "audio_mode": mode, "label": label,
                            "max_rel_error": r.max_rel_error, "coordinates": r.coordinates,
                        }));
                    }
                }
            }
            println!("max relative error {worst:.3e}");
            if let Some(out) = &args.out {
                let doc = serde_json::json!({ "max_rel_error": worst, "checks": rows });
                write_text(out, &serde_json::to_string_pretty(&doc)?)?;
            }
            if worst >= 1e-3 {
                return Err(Error::Contract(format!("gradient check failed: {worst:.3e} >= 1e-3")));
            }
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run_command(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
