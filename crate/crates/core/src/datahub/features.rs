//! AVF1 feature files: `b"AVF1"`, rows (u32 LE), cols (u32 LE), then
//! `rows * cols` little-endian f32 values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::FeatureSequence;
use crate::numerics::Array;

pub const FEATURE_MAGIC: &[u8; 4] = b"AVF1";
const HEADER_LEN: usize = 12;

pub fn encode_feature_file(rows: usize, cols: usize, values: &[f32]) -> Result<Vec<u8>> {
    if rows * cols != values.len() {
        return Err(Error::Dimension {
            op: "encode_feature_file",
            left: vec![rows, cols],
            right: vec![values.len()],
        });
    }
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Parameter(format!("dimension {v} exceeds u32")))
    };
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&to_u32(rows)?.to_le_bytes());
    bytes.extend_from_slice(&to_u32(cols)?.to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Parses an AVF1 image into (rows, cols, values).
pub fn decode_feature_file(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} bytes is shorter than the 12-byte header", bytes.len()),
        });
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected: "AVF1".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = HEADER_LEN as u64 + 4 * rows as u64 * cols as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header {rows}x{cols} needs {expected} bytes, file has {}", bytes.len()),
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, values))
}

pub fn write_feature_file_f32(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    let bytes = encode_feature_file(rows, cols, values)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a 2-D array, narrowing each value to f32.
pub fn write_feature_file(path: &Path, matrix: &Array) -> Result<()> {
    if matrix.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "write_feature_file",
            left: matrix.shape().to_vec(),
            right: vec![],
        });
    }
    let values: Vec<f32> = matrix.data().iter().map(|&v| v as f32).collect();
    write_feature_file_f32(path, matrix.rows(), matrix.cols(), &values)
}

/// Reads an AVF1 file and widens it to f64.
pub fn read_feature_file(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (rows, cols, values) = decode_feature_file(path, &bytes)?;
    Array::matrix(rows, cols, values.into_iter().map(f64::from).collect()).map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{}: {what}", path.display())),
        other => other,
    })
}

pub fn load_features(
    video_id: impl Into<String>,
    visual_path: &Path,
    audio_path: &Path,
) -> Result<FeatureSequence> {
    let visual = read_feature_file(visual_path)?;
    let audio = read_feature_file(audio_path)?;
    FeatureSequence::new(video_id, visual, audio)
}

/// Same visual matrix, audio replaced by zeros of identical shape.
pub fn zero_audio(features: &FeatureSequence) -> FeatureSequence {
    FeatureSequence {
        video_id: features.video_id.clone(),
        visual: features.visual.clone(),
        audio: Array::zeros(features.audio.shape()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_hand_built_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avf");
        let mut bytes = b"AVF1".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for v in 1..=6 {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let m = read_feature_file(&path).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.avf");
        let mut bytes = encode_feature_file(1, 2, &[1.0, 2.0]).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::Format { .. })));

        let good = encode_feature_file(2, 2, &[1.0; 4]).unwrap();
        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::Truncated { .. })));
        fs::write(&path, &good[..7]).unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::Truncated { .. })));

        let nan = encode_feature_file(1, 1, &[f32::NAN]).unwrap();
        fs::write(&path, nan).unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::NonFinite(_))));

        assert!(matches!(
            read_feature_file(&dir.path().join("missing.avf")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn modalities_must_align() {
        let dir = tempfile::tempdir().unwrap();
        let (v, a) = (dir.path().join("v.avf"), dir.path().join("a.avf"));
        write_feature_file(&v, &Array::zeros(&[10, 4])).unwrap();
        write_feature_file(&a, &Array::zeros(&[9, 2])).unwrap();
        assert!(matches!(
            load_features("x", &v, &a),
            Err(Error::Alignment { visual: 10, audio: 9 })
        ));
    }

    #[test]
    fn zero_audio_properties() {
        let visual = Array::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        let audio = Array::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let f = FeatureSequence::new("v", visual.clone(), audio).unwrap();
        let z = zero_audio(&f);
        assert_eq!(z.audio.shape(), &[2, 1]);
        assert_eq!(z.audio.max_abs(), 0.0);
        assert_eq!(z.visual, visual);
        assert_eq!(zero_audio(&z), z);
    }
}
