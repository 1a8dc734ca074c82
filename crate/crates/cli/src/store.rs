//! On-disk synthetic dataset: `spec.json`, one label CSV per split and one
//! packed 8-bit face file per split (64×64 bytes per sample, label order).

use std::path::{Path, PathBuf};

use attend_core::datasetio::{load_labels, write_labels, ClipRecord, FrameSample, Split, SyntheticDataset, SyntheticSpec};
use attend_core::facegate::{PreprocessedFace, FACE_SIDE};
use sha2::{Digest, Sha256};

use crate::CliError;

const SPEC_FILE: &str = "spec.json";
const FACE_BYTES: usize = FACE_SIDE * FACE_SIDE;

pub fn labels_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}Labels.csv", split.dir_name()))
}

pub fn faces_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.faces", split.dir_name()))
}

/// Writes the dataset and returns the written file names in digest order.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset, spec: &SyntheticSpec) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::data)?;
    let mut files = vec![dir.join(SPEC_FILE)];
    std::fs::write(&files[0], serde_json::to_string_pretty(spec).expect("spec serializes")).map_err(CliError::data)?;
    for split in Split::ALL {
        let samples = ds.split(split);
        if samples.is_empty() {
            continue;
        }
        let records: Vec<ClipRecord> = samples
            .iter()
            .map(|s| ClipRecord {
                clip_id: s.clip_id.clone(),
                split,
                labels: s.labels,
            })
            .collect();
        let labels = labels_path(dir, split);
        std::fs::write(&labels, write_labels(&records)).map_err(CliError::data)?;
        let faces = faces_path(dir, split);
        let bytes: Vec<u8> = samples.iter().flat_map(|s| s.face.as_slice().iter().map(|&v| quantize(v))).collect();
        std::fs::write(&faces, bytes).map_err(CliError::data)?;
        files.push(labels);
        files.push(faces);
    }
    Ok(files)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<FrameSample>, CliError> {
    let labels = load_labels(&labels_path(dir, split), split).map_err(CliError::data)?;
    let faces_file = faces_path(dir, split);
    let bytes = std::fs::read(&faces_file).map_err(|e| CliError::Data(format!("{}: {e}", faces_file.display())))?;
    if bytes.len() != labels.len() * FACE_BYTES {
        return Err(CliError::Data(format!(
            "{} holds {} bytes, expected {} faces of {FACE_BYTES}",
            faces_file.display(),
            bytes.len(),
            labels.len()
        )));
    }
    labels
        .into_iter()
        .zip(bytes.chunks_exact(FACE_BYTES))
        .map(|(rec, px)| {
            let face = PreprocessedFace::new(px.iter().map(|&p| p as f64 / 255.0).collect()).map_err(CliError::data)?;
            Ok(FrameSample {
                face,
                labels: rec.labels,
                clip_id: rec.clip_id,
            })
        })
        .collect()
}

/// SHA-256 over each file's name and contents, in the given order.
pub fn digest(files: &[PathBuf]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update(name.as_bytes());
        h.update([0]);
        h.update(std::fs::read(f).map_err(CliError::data)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
