use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::features::load_features;
use crate::error::{Error, Result};
use crate::model::FeatureSequence;

pub const MANIFEST_HEADER: [&str; 7] = [
    "video_id",
    "scene",
    "class_name",
    "label",
    "visual_path",
    "audio_path",
    "split",
];

pub const NORMAL_CLASS: &str = "normal";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoRecord {
    pub video_id: String,
    pub scene: String,
    pub class_name: String,
    /// 0 for the normal class, 1 otherwise.
    pub label: u8,
    pub visual_path: PathBuf,
    pub audio_path: PathBuf,
    pub split: Option<Split>,
}

impl VideoRecord {
    pub fn is_anomalous(&self) -> bool {
        self.label == 1
    }
}

/// Ordered video records plus where they were read from.
///
/// Relative feature paths resolve against `base_dir`, normally the directory
/// holding the manifest file.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<VideoRecord>,
    pub base_dir: Option<PathBuf>,
    /// Seed that created this manifest, when known. Not persisted.
    pub seed: Option<u64>,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl Manifest {
    pub fn new(records: Vec<VideoRecord>) -> Result<Self> {
        let manifest = Self {
            records,
            base_dir: None,
            seed: None,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            if !seen.insert(r.video_id.as_str()) {
                return Err(self.err(line, format!("duplicate video_id {:?}", r.video_id)));
            }
            check_label(&r.class_name, r.label).map_err(|m| self.err(line, m))?;
        }
        Ok(())
    }

    fn err(&self, line: usize, message: String) -> Error {
        Error::Manifest {
            path: self.base_dir.clone().unwrap_or_default(),
            line,
            message,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scenes(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.scene.as_str()).collect()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn load(&self, record: &VideoRecord) -> Result<FeatureSequence> {
        load_features(
            record.video_id.clone(),
            &self.resolve(&record.visual_path),
            &self.resolve(&record.audio_path),
        )
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<(VideoRecord, FeatureSequence)>> {
        self.in_split(split)
            .map(|r| Ok((r.clone(), self.load(r)?)))
            .collect()
    }
}

fn check_label(class_name: &str, label: u8) -> std::result::Result<(), String> {
    let expected = u8::from(class_name != NORMAL_CLASS);
    if label > 1 {
        return Err(format!("label must be 0 or 1, got {label}"));
    }
    if label != expected {
        return Err(format!(
            "label {label} inconsistent with class {class_name:?} (expected {expected})"
        ));
    }
    Ok(())
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Manifest> {
    let err = |line: usize, message: String| Error::Manifest {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let mut columns = [0usize; 7];
    for (slot, name) in columns.iter_mut().zip(MANIFEST_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| err(1, format!("missing column {name:?}")))?;
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| row.get(columns[i]).unwrap_or("").trim();

        let video_id = field(0).to_string();
        if video_id.is_empty() {
            return Err(err(line, "empty video_id".into()));
        }
        if !seen.insert(video_id.clone()) {
            return Err(err(line, format!("duplicate video_id {video_id:?}")));
        }
        let class_name = field(2).to_string();
        let label: u8 = field(3)
            .parse()
            .map_err(|_| err(line, format!("label {:?} is not 0 or 1", field(3))))?;
        check_label(&class_name, label).map_err(|m| err(line, m))?;
        let split = match field(6) {
            "" => None,
            s => Some(s.parse::<Split>().map_err(|e| err(line, e.to_string()))?),
        };
        records.push(VideoRecord {
            video_id,
            scene: field(1).to_string(),
            class_name,
            label,
            visual_path: PathBuf::from(field(4)),
            audio_path: PathBuf::from(field(5)),
            split,
        });
    }
    Ok(Manifest {
        records,
        base_dir: origin.parent().map(Path::to_path_buf),
        seed: None,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn manifest_to_csv(manifest: &Manifest) -> Result<String> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("manifest serialisation: {e}"));
    writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in &manifest.records {
        let label = r.label.to_string();
        let visual = r.visual_path.to_string_lossy();
        let audio = r.audio_path.to_string_lossy();
        writer
            .write_record([
                r.video_id.as_str(),
                r.scene.as_str(),
                r.class_name.as_str(),
                label.as_str(),
                visual.as_ref(),
                audio.as_ref(),
                r.split.map_or("", Split::as_str),
            ])
            .map_err(csv_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Config(format!("manifest serialisation: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = manifest_to_csv(manifest)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
