//! Acceptance criteria, run sequentially so wall-clock limits are measured
//! without other tests competing for the CPU. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avaca::datahub::{
    decode_feature_file, encode_feature_file, read_feature_file, stratified_split, synthesize_dataset,
    write_feature_file, write_feature_file_f32, Manifest, Split, SynthSpec, VideoRecord, DEFAULT_RATIOS,
    MAVAD_CENSUS, NORMAL_CLASS,
};
use avaca::eval::{evaluate, roc_auc, run_experiment, score_videos};
use avaca::model::{init_parameters, AudioMode, AvacaConfig};
use avaca::objectives::{center_loss, dmil_loss, kmax_select, LossConfig};
use avaca::trainer::{
    check_model_gradients, config_for_manifest, decode_checkpoint, load_checkpoint, save_checkpoint,
    toy_model_config, CheckpointConfig,
};
use avaca::Error;

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// 1. Full-model gradient check.
fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let loss = LossConfig {
        alpha: 2,
        ..LossConfig::default()
    };
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for heads in [1, 4] {
        for mode in AudioMode::ALL {
            for label in [0u8, 1] {
                let model = toy_model_config(heads, mode, 5);
                assert!(model.d_model <= 8);
                let r = match check_model_gradients(&model, &loss, 4, label, 17) {
                    Ok(r) => r,
                    Err(e) => return verdict(false, format!("heads={heads} {mode} y={label}: {e}")),
                };
                checks += 1;
                if r.max_rel_error >= worst.0 {
                    worst = (r.max_rel_error, format!("heads={heads} {mode} y={label}, kinked={}", r.kinked));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.0 < 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "{checks} checks at t=4, d_model=8; max relative error {:.2e} ({}) < 1e-3; {:.1}s < 60s",
            worst.0,
            worst.1,
            secs(elapsed)
        ),
    )
}

fn bce_oracle(s: f64, y: f64, eps: f64) -> f64 {
    let c = s.clamp(eps, 1.0 - eps);
    -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
}

fn random_scores(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    let ties = rng.random_bool(0.3);
    (0..t)
        .map(|_| {
            let v: f64 = rng.random();
            if ties {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        })
        .collect()
}

// 2. Loss oracles.
fn loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = LossConfig::default().epsilon;
    let mut worst_dmil = 0.0f64;
    let mut worst_center = 0.0f64;
    for case in 0..1000 {
        let t = rng.random_range(1..=12);
        let alpha = if case % 4 == 0 { 16 } else { rng.random_range(1..=6) };
        let y: u8 = rng.random_range(0..=1);
        let s = random_scores(&mut rng, t);

        let mut sorted = s.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = (t / alpha).max(1);
        let top = &sorted[..k];
        match kmax_select(&s, alpha) {
            Ok(sel) if sel == top => {}
            other => return verdict(false, format!("case {case}: kmax_select {other:?} vs {top:?}")),
        }
        let oracle = top.iter().map(|&v| bce_oracle(v, f64::from(y), eps)).sum::<f64>() / k as f64;
        let got = dmil_loss(&s, y, alpha, eps).unwrap();
        worst_dmil = worst_dmil.max((got - oracle).abs());

        let mean = s.iter().sum::<f64>() / t as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let expected = if y == 0 { var } else { 0.0 };
        let c = center_loss(&s, y).unwrap();
        if y == 1 && c != 0.0 {
            return verdict(false, format!("case {case}: center loss {c} for an anomalous video"));
        }
        worst_center = worst_center.max((c - expected).abs());
    }
    verdict(
        worst_dmil <= 1e-12 && worst_center <= 1e-12,
        format!("1000 vectors, t<=12: max |dmil - oracle| {worst_dmil:.1e}, max |center - variance| {worst_center:.1e}, tol 1e-12"),
    )
}

// 3. AUC oracle.
fn auc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let scores = random_scores(&mut rng, n);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (sp, _) in scores.iter().zip(&labels).filter(|(_, &l)| l == 1) {
            for (sn, _) in scores.iter().zip(&labels).filter(|(_, &l)| l == 0) {
                pairs += 1.0;
                wins += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let got = roc_auc(&scores, &labels).unwrap();
        worst = worst.max((got - wins / pairs).abs());
    }
    verdict(
        worst <= 1e-12,
        format!("1000 instances, n<=200: max |auc - all-pairs| {worst:.1e}, tol 1e-12"),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_avaca"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            (rel, fs::read(e.path()).unwrap())
        })
        .collect()
}

// 4. Determinism of the experiment command.
fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = d.join("spec.json");
    fs::write(
        &spec,
        r#"{"classes": {"normal": 10, "bus": 5, "horse": 5}, "t_min": 5, "t_max": 8, "d_visual": 16, "d_audio": 6}"#,
    )
    .unwrap();
    let config = d.join("config.json");
    fs::write(
        &config,
        r#"{"epochs": 3, "batch_videos": 4, "model": {"d_visual": 16, "d_audio": 6, "d_model": 8, "heads": 4,
            "audio_mode": "focused", "seed": 0, "visual_channels": 2}}"#,
    )
    .unwrap();
    let data = d.join("data");
    if let Err(e) = run_cli(&["synth", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]) {
        return verdict(false, format!("synth failed: {e}"));
    }
    let manifest = data.join("manifest.csv");
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = d.join(run);
        if let Err(e) = run_cli(&[
            "experiment",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--repeats",
            "3",
            "--audio-modes",
            "focused,zeroed",
            "--seed",
            "11",
        ]) {
            return verdict(false, format!("experiment run {run} failed: {e}"));
        }
        runs.push(files_under(&out));
    }
    // Histories carry wall-clock seconds, so only weights and reports are compared.
    let keep = |files: &BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
        files
            .iter()
            .filter(|(k, _)| k.ends_with(".avck") || k.ends_with(".json") && !k.ends_with("history.json") || k.ends_with("summary.csv"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    let (a, b) = (keep(&runs[0]), keep(&runs[1]));
    let checkpoints = a.keys().filter(|k| k.ends_with(".avck")).count();
    let reports = a.keys().filter(|k| k.starts_with("report-")).count();
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    verdict(
        a.keys().eq(b.keys()) && differing.is_empty() && checkpoints == 6 && reports == 2,
        format!(
            "two 3-repeat runs (focused, zeroed): {checkpoints} checkpoints and {reports} reports compared, {} differ",
            differing.len()
        ),
    )
}

// 5. Audio helps on synthetic data with a planted audio-dominant signal.
fn synthetic_reproduction() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        seed: 42,
        audio_informativeness: 0.7,
        ..SynthSpec::default()
    };
    let manifest = match synthesize_dataset(&spec, dir.path()) {
        Ok(m) => m,
        Err(e) => return verdict(false, format!("synthesis failed: {e}")),
    };
    let n = manifest.len();
    let mut base = config_for_manifest(&manifest).unwrap().with_seed(42);
    base.checkpoint_dir = None;
    let mut auc = BTreeMap::new();
    for mode in [AudioMode::Focused, AudioMode::Zeroed] {
        let mut cfg = base.clone();
        cfg.model.audio_mode = mode;
        match run_experiment(&manifest, &cfg, 3) {
            Ok(o) => {
                let per_repeat: Vec<String> = o.report.repeats.iter().map(|r| format!("{:.3}", r.clip_auc)).collect();
                auc.insert(mode.as_str(), (o.report.clip_auc, per_repeat.join("/")));
            }
            Err(e) => return verdict(false, format!("{mode} experiment failed: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let (focused, zeroed) = (&auc["focused"], &auc["zeroed"]);
    let gain = focused.0 - zeroed.0;
    verdict(
        n == 100 && focused.0 >= 0.90 && gain >= 0.03 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "{n} videos, {} epochs x 3 repeats: focused clip AUC {:.4} [{}] >= 0.90; zeroed {:.4} [{}]; gain {:+.4} >= 0.03; {:.0}s < 900s",
            base.epochs,
            focused.0,
            focused.1,
            zeroed.0,
            zeroed.1,
            gain,
            secs(elapsed)
        ),
    )
}

// 6. Zeroed mode ignores audio file contents.
fn zeroed_invariance() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        classes: BTreeMap::from([(NORMAL_CLASS.to_string(), 10), ("bus".to_string(), 10)]),
        t_min: 4,
        t_max: 9,
        d_visual: 12,
        d_audio: 5,
        seed: 6,
        ..SynthSpec::default()
    };
    let manifest = stratified_split(&synthesize_dataset(&spec, dir.path()).unwrap(), DEFAULT_RATIOS, 6).unwrap();
    let config = CheckpointConfig {
        model: AvacaConfig {
            d_visual: 12,
            d_audio: 5,
            d_model: 8,
            heads: 4,
            audio_mode: AudioMode::Zeroed,
            seed: 3,
            visual_channels: 2,
        },
        loss: LossConfig::default(),
    };
    let ckpt_path = dir.path().join("zeroed.avck");
    save_checkpoint(&init_parameters(&config.model).unwrap(), &config, &ckpt_path).unwrap();
    let checkpoint = load_checkpoint(&ckpt_path).unwrap();

    let snapshot = |m: &Manifest| -> (String, Vec<Vec<u64>>) {
        let report = evaluate(&checkpoint, m, Split::Test, AudioMode::Zeroed).unwrap();
        let all: Vec<_> = m.records.iter().map(|r| (r.clone(), m.load(r).unwrap())).collect();
        let scores = score_videos(&all, &checkpoint.config.model, &checkpoint.params).unwrap();
        let bits = scores.iter().map(|(_, s)| s.iter().map(|v| v.to_bits()).collect()).collect();
        (serde_json::to_string(&report).unwrap(), bits)
    };
    let before = snapshot(&manifest);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for r in &manifest.records {
        let path = manifest.resolve(&r.audio_path);
        let old = read_feature_file(&path).unwrap();
        let junk: Vec<f32> = (0..old.len()).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        write_feature_file_f32(&path, old.rows(), old.cols(), &junk).unwrap();
    }
    let after = snapshot(&manifest);
    let clips: usize = before.1.iter().map(Vec::len).sum();
    verdict(
        before == after,
        format!(
            "{} videos / {clips} clip scores and the test report bitwise identical after replacing every audio file",
            manifest.len()
        ),
    )
}

// 7. Split fidelity on the Mgarr census.
fn split_fidelity() -> Verdict {
    let mut records = Vec::new();
    for (class, counts) in MAVAD_CENSUS {
        for i in 0..counts[0] {
            let id = format!("{}-{i:03}", class.replace(' ', "_"));
            records.push(VideoRecord {
                visual_path: format!("{id}_v.avf").into(),
                audio_path: format!("{id}_a.avf").into(),
                video_id: id,
                scene: "mgarr".into(),
                class_name: class.into(),
                label: u8::from(class != NORMAL_CLASS),
                split: None,
            });
        }
    }
    let manifest = Manifest::new(records).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let split = stratified_split(&manifest, DEFAULT_RATIOS, seed).unwrap();
        let ids: BTreeSet<&str> = split.records.iter().map(|r| r.video_id.as_str()).collect();
        let original: BTreeSet<&str> = manifest.records.iter().map(|r| r.video_id.as_str()).collect();
        if split.len() != 346 || ids != original || split.records.iter().any(|r| r.split.is_none()) {
            return verdict(false, format!("seed {seed}: not a partition of the 346 records"));
        }
        let mut per_class: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
        for r in &split.records {
            let slot = Split::ALL.iter().position(|s| Some(*s) == r.split).unwrap();
            per_class.entry(r.class_name.as_str()).or_default()[slot] += 1;
        }
        for (class, got) in per_class {
            let m: usize = got.iter().sum();
            if m < 5 {
                continue;
            }
            for (g, ratio) in got.iter().zip(DEFAULT_RATIOS) {
                let dev = (*g as f64 - ratio * m as f64).abs();
                if dev > 1.0 {
                    return verdict(false, format!("seed {seed}: class {class} got {got:?} of {m}"));
                }
                worst = worst.max(dev);
            }
        }
    }
    verdict(
        true,
        format!("346 records, 20 seeds: partitions exact; max deviation from 60/20/20 quota {worst:.2} <= 1 item"),
    )
}

// 8. Binary format round trips and corruption errors.
fn format_round_trips() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut values: Vec<f32> = (0..7 * 5).map(|_| rng.random_range(-1e6f32..1e6)).collect();
    values[..5].copy_from_slice(&[-0.0, f32::MIN_POSITIVE / 4.0, f32::MAX, f32::MIN, 1e-30]);
    let avf = dir.path().join("x.avf");
    write_feature_file_f32(&avf, 7, 5, &values).unwrap();
    let back = read_feature_file(&avf).unwrap();
    let bits_in: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
    let bits_out: Vec<u32> = back.data().iter().map(|&v| (v as f32).to_bits()).collect();
    if back.shape() != [7, 5] || bits_in != bits_out {
        problems.push("AVF1 values changed".to_string());
    }
    let widened = dir.path().join("y.avf");
    write_feature_file(&widened, &back).unwrap();
    if fs::read(&widened).unwrap() != fs::read(&avf).unwrap() {
        problems.push("AVF1 rewrite not byte-identical".into());
    }
    let bytes = encode_feature_file(7, 5, &values).unwrap();
    let p = Path::new("x.avf");
    let mut bad_magic = bytes.clone();
    bad_magic[3] = b'2';
    if !matches!(decode_feature_file(p, &bad_magic), Err(Error::Format { .. })) {
        problems.push("AVF1 bad magic not a format error".into());
    }
    for cut in [0, 3, 11, bytes.len() - 1] {
        if !matches!(decode_feature_file(p, &bytes[..cut]), Err(Error::Truncated { .. })) {
            problems.push(format!("AVF1 truncated at {cut} not a truncation error"));
        }
    }

    let config = CheckpointConfig {
        model: toy_model_config(4, AudioMode::Focused, 8),
        loss: LossConfig::default(),
    };
    let params = init_parameters(&config.model).unwrap();
    let ck = dir.path().join("c.avck");
    save_checkpoint(&params, &config, &ck).unwrap();
    let loaded = load_checkpoint(&ck).unwrap();
    let same = loaded.config == config
        && params.iter().zip(loaded.params.iter()).all(|((n1, a), (n2, b))| {
            n1 == n2
                && a.shape() == b.shape()
                && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && params.len() == loaded.params.len();
    if !same {
        problems.push("AVCK round trip not bitwise".into());
    }
    let raw = fs::read(&ck).unwrap();
    let mut bad_magic = raw.clone();
    bad_magic[0] = b'X';
    if !matches!(decode_checkpoint(&ck, &bad_magic), Err(Error::Format { .. })) {
        problems.push("AVCK bad magic not a format error".into());
    }
    for cut in [0, 6, raw.len() / 3, raw.len() - 8] {
        if !matches!(decode_checkpoint(&ck, &raw[..cut]), Err(Error::Truncated { .. })) {
            problems.push(format!("AVCK truncated at {cut} not a truncation error"));
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("AVF1 7x5 and AVCK ({} tensors) bitwise; bad magic and truncation rejected", params.len())
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a filter
    // argument selects criteria by number or name substring.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 8] = [
        ("gradient integrity", gradient_integrity),
        ("loss oracles", loss_oracles),
        ("auc oracle", auc_oracle),
        ("determinism", determinism),
        ("synthetic audio gain", synthetic_reproduction),
        ("zeroed-audio invariance", zeroed_invariance),
        ("split fidelity", split_fidelity),
        ("format round trips", format_round_trips),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = (i + 1).to_string();
        if !filters.is_empty() && !filters.iter().any(|f| *f == number || name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let v = check();
        println!("criterion {number} {name}: {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
