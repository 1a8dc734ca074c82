//! Labeled clip datasets on disk, frame sampling, split accounting and the
//! synthetic quadrant-pattern generator.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/<Split>/<clip>/frame_0000.pgm
//! <root>/<Split>/<clip>/frame_0001.pgm
//! ```
//!
//! where `<Split>` is `Train`, `Validation` or `Test` and `<clip>` is the clip
//! id without any video extension.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affectmodel::{AffectiveLevels, AffectiveState, LEVELS, STATES};
use crate::facegate::{gate_frame, Cascade, DetectParams, Gate, PreprocessedFace, FACE_SIDE};
use crate::image::GrayImage;
use crate::par::Exec;
use crate::tensornet::{Dataset, Sample};

pub const LABEL_HEADER: [&str; 5] = ["ClipID", "Boredom", "Engagement", "Confusion", "Frustration"];
pub const DEFAULT_EVERY_K: usize = 30;
pub const FRAMES_PER_CLIP: usize = 300;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {msg}")]
    Csv { path: String, msg: String },
    #[error("{path}: clip {clip_id}: {msg}")]
    Row { path: String, clip_id: String, msg: String },
    #[error("duplicate clip id {0}")]
    Duplicate(String),
    #[error("clip directory missing: {0}")]
    MissingClip(PathBuf),
    #[error("clip {0} has no frames")]
    EmptyClip(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "Train",
            Split::Validation => "Validation",
            Split::Test => "Test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub split: Split,
    pub labels: AffectiveLevels,
}

impl ClipRecord {
    /// Directory name of the clip: the id with a trailing video extension removed.
    pub fn dir_name(&self) -> &str {
        let id = self.clip_id.as_str();
        match id.rsplit_once('.') {
            Some((stem, ext)) if matches!(ext.to_ascii_lowercase().as_str(), "avi" | "mp4") => stem,
            _ => id,
        }
    }
}

/// Parses a label CSV (`ClipID,Boredom,Engagement,Confusion,Frustration`).
pub fn load_labels(path: &Path, split: Split) -> Result<Vec<ClipRecord>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    parse_labels(&text, split, &path.display().to_string())
}

pub fn parse_labels(text: &str, split: Split, source: &str) -> Result<Vec<ClipRecord>, DatasetError> {
    let csv_err = |msg: String| DatasetError::Csv { path: source.into(), msg };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 5 || cols[..5] != LABEL_HEADER {
        return Err(csv_err(format!("expected header {}, got {}", LABEL_HEADER.join(","), cols.join(","))));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(e.to_string()))?;
        let clip_id = row.get(0).unwrap_or_default().to_string();
        let row_err = |msg: String| DatasetError::Row {
            path: source.into(),
            clip_id: clip_id.clone(),
            msg,
        };
        if clip_id.is_empty() {
            return Err(csv_err("empty clip id".into()));
        }
        let mut levels = [0u8; STATES];
        for (i, lvl) in levels.iter_mut().enumerate() {
            let raw = row.get(i + 1).ok_or_else(|| row_err("missing column".into()))?;
            let v: u8 = raw.parse().map_err(|_| row_err(format!("{} = {raw:?} is not a level", LABEL_HEADER[i + 1])))?;
            if v as usize >= LEVELS {
                return Err(row_err(format!("{} = {v} outside 0..=3", LABEL_HEADER[i + 1])));
            }
            *lvl = v;
        }
        if !seen.insert(clip_id.clone()) {
            return Err(DatasetError::Duplicate(clip_id));
        }
        out.push(ClipRecord {
            clip_id,
            split,
            labels: AffectiveLevels::new(levels).expect("levels checked"),
        });
    }
    Ok(out)
}

pub fn write_labels(records: &[ClipRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LABEL_HEADER).expect("in-memory write");
    for r in records {
        let l = r.labels.as_array();
        w.write_record([r.clip_id.clone(), l[0].to_string(), l[1].to_string(), l[2].to_string(), l[3].to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub clips: Vec<ClipRecord>,
    pub frames_per_clip: usize,
}

impl DatasetManifest {
    /// Builds a manifest, checking that every clip directory exists and that
    /// ids are unique within each split.
    pub fn new(root: impl Into<PathBuf>, clips: Vec<ClipRecord>) -> Result<Self, DatasetError> {
        let m = Self {
            root: root.into(),
            clips,
            frames_per_clip: FRAMES_PER_CLIP,
        };
        let mut seen = HashSet::new();
        for c in &m.clips {
            if !seen.insert((c.split, c.clip_id.as_str())) {
                return Err(DatasetError::Duplicate(c.clip_id.clone()));
            }
            let dir = m.clip_dir(c);
            if !dir.is_dir() {
                return Err(DatasetError::MissingClip(dir));
            }
        }
        Ok(m)
    }

    /// A manifest without a frame directory (labels only).
    pub fn labels_only(clips: Vec<ClipRecord>) -> Self {
        Self {
            root: PathBuf::new(),
            clips,
            frames_per_clip: FRAMES_PER_CLIP,
        }
    }

    pub fn clip_dir(&self, clip: &ClipRecord) -> PathBuf {
        self.root.join(clip.split.dir_name()).join(clip.dir_name())
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.pgm")
}

fn is_frame_name(name: &str) -> bool {
    name.strip_prefix("frame_")
        .and_then(|r| r.strip_suffix(".pgm"))
        .is_some_and(|d| d.len() >= 4 && d.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    pub face: PreprocessedFace,
    pub labels: AffectiveLevels,
    pub clip_id: String,
}

/// Outcome of sampling one clip. A clip with no valid frames is unusable.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSampling {
    pub clip_id: String,
    pub frames_considered: usize,
    pub samples: Vec<FrameSample>,
}

impl ClipSampling {
    pub fn is_unusable(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn invalid_frames(&self) -> usize {
        self.frames_considered - self.samples.len()
    }
}

/// Gates every `every_k`-th frame of a clip; frames without a face are skipped.
pub fn sample_frames(
    manifest: &DatasetManifest,
    clip: &ClipRecord,
    every_k: usize,
    cascade: &Cascade,
    params: &DetectParams,
) -> Result<ClipSampling, DatasetError> {
    let every_k = every_k.max(1);
    let dir = manifest.clip_dir(clip);
    let mut frames: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|_| DatasetError::MissingClip(dir.clone()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_str().is_some_and(is_frame_name))
        .map(|e| e.path())
        .collect();
    if frames.is_empty() {
        return Err(DatasetError::EmptyClip(clip.clip_id.clone()));
    }
    frames.sort();
    let mut samples = Vec::new();
    let mut considered = 0;
    for path in frames.iter().step_by(every_k) {
        considered += 1;
        let Ok(img) = GrayImage::read_file(path) else {
            continue;
        };
        if let Gate::Face { face, .. } = gate_frame(cascade, &img, params) {
            samples.push(FrameSample {
                face,
                labels: clip.labels,
                clip_id: clip.clip_id.clone(),
            });
        }
    }
    Ok(ClipSampling {
        clip_id: clip.clip_id.clone(),
        frames_considered: considered,
        samples,
    })
}

/// Samples every clip of a manifest; clips are processed concurrently.
pub fn sample_manifest(
    manifest: &DatasetManifest,
    every_k: usize,
    cascade: &Cascade,
    params: &DetectParams,
    exec: Exec,
) -> Result<Vec<ClipSampling>, DatasetError> {
    exec.map_slice(&manifest.clips, |c| sample_frames(manifest, c, every_k, cascade, params))
        .into_iter()
        .collect()
}

/// Count table `[state][level]` for one split.
pub type LevelCounts = [[usize; LEVELS]; STATES];

/// Per-split level counts of a manifest.
pub fn split_summary(manifest: &DatasetManifest) -> BTreeMap<Split, LevelCounts> {
    let mut table: BTreeMap<Split, LevelCounts> = Split::ALL.iter().map(|&s| (s, [[0; LEVELS]; STATES])).collect();
    for c in &manifest.clips {
        let t = table.get_mut(&c.split).expect("all splits present");
        for s in AffectiveState::ALL {
            t[s.index()][c.labels.get(s) as usize] += 1;
        }
    }
    table
}

/// Training-split level counts of the reference clip dataset.
pub const REFERENCE_TRAIN_COUNTS: LevelCounts = [
    [2433, 1696, 1073, 156],
    [34, 213, 2617, 2494],
    [3616, 1245, 431, 66],
    [4183, 941, 191, 43],
];
pub const REFERENCE_VALIDATION_COUNTS: LevelCounts = [
    [446, 376, 475, 132],
    [23, 143, 813, 450],
    [942, 322, 153, 12],
    [1058, 271, 81, 19],
];
pub const REFERENCE_TEST_COUNTS: LevelCounts = [
    [823, 584, 338, 39],
    [4, 84, 882, 814],
    [1200, 427, 136, 21],
    [1388, 316, 57, 23],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples_per_split: BTreeMap<Split, usize>,
    /// Relative level frequencies `[state][level]`, rescaled to each split size.
    pub counts: LevelCounts,
    pub noise_std_dev: f64,
    pub rng_seed: u64,
}

impl SyntheticSpec {
    pub fn new(train: usize, validation: usize, test: usize) -> Self {
        Self {
            samples_per_split: [(Split::Train, train), (Split::Validation, validation), (Split::Test, test)]
                .into_iter()
                .filter(|&(_, n)| n > 0)
                .collect(),
            counts: REFERENCE_TRAIN_COUNTS,
            noise_std_dev: 0.15,
            rng_seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (s, row) in self.counts.iter().enumerate() {
            if row.iter().all(|&c| c == 0) {
                return Err(DatasetError::Spec(format!("state {s} has no positive count")));
            }
        }
        if !(self.noise_std_dev >= 0.0 && self.noise_std_dev.is_finite()) {
            return Err(DatasetError::Spec(format!("noise std dev {}", self.noise_std_dev)));
        }
        Ok(())
    }
}

/// Largest-remainder rescaling of `weights` to integers summing to `total`.
/// Ties in the remainder go to the lower index.
pub fn rescale_counts(weights: &[usize; LEVELS], total: usize) -> [usize; LEVELS] {
    let sum: usize = weights.iter().sum();
    let mut out = [0usize; LEVELS];
    if sum == 0 {
        return out;
    }
    let mut rems = Vec::with_capacity(LEVELS);
    for (i, &w) in weights.iter().enumerate() {
        let num = w as u128 * total as u128;
        out[i] = (num / sum as u128) as usize;
        rems.push((num % sum as u128, i));
    }
    let short = total - out.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Top-left corner of the quadrant carrying a state's signal.
pub fn quadrant_origin(state: AffectiveState) -> (usize, usize) {
    let half = FACE_SIDE / 2;
    match state {
        AffectiveState::Boredom => (0, 0),
        AffectiveState::Engagement => (half, 0),
        AffectiveState::Confusion => (0, half),
        AffectiveState::Frustration => (half, half),
    }
}

pub const PATCH_SIDE: usize = 16;
const PATCH_OFFSET: usize = 8;
const STRIPE_PERIOD: usize = 4;

/// Noise-free stripe value at patch coordinate `(u, v)` for a level:
/// horizontal, vertical, diagonal, anti-diagonal.
fn stripe(level: u8, u: usize, v: usize) -> f64 {
    let phase = match level {
        0 => v,
        1 => u,
        2 => u + v,
        _ => u + (PATCH_SIDE - 1 - v),
    };
    if phase % STRIPE_PERIOD < STRIPE_PERIOD / 2 {
        0.85
    } else {
        0.15
    }
}

const BACKGROUND: f64 = 0.5;

/// Renders the noise-free synthetic image for a label vector.
pub fn render_pattern(labels: AffectiveLevels) -> Vec<f64> {
    let mut img = vec![BACKGROUND; FACE_SIDE * FACE_SIDE];
    for s in AffectiveState::ALL {
        let (qx, qy) = quadrant_origin(s);
        let level = labels.get(s);
        for v in 0..PATCH_SIDE {
            for u in 0..PATCH_SIDE {
                let (x, y) = (qx + PATCH_OFFSET + u, qy + PATCH_OFFSET + v);
                img[y * FACE_SIDE + x] = stripe(level, u, v);
            }
        }
    }
    img
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub splits: BTreeMap<Split, Vec<FrameSample>>,
}

impl SyntheticDataset {
    pub fn split(&self, s: Split) -> &[FrameSample] {
        self.splits.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn level_counts(&self, s: Split) -> LevelCounts {
        level_counts(self.split(s))
    }

    /// Labels-only manifest of the generated clips.
    pub fn manifest(&self) -> DatasetManifest {
        let clips = self
            .splits
            .iter()
            .flat_map(|(&split, samples)| {
                samples.iter().map(move |f| ClipRecord {
                    clip_id: f.clip_id.clone(),
                    split,
                    labels: f.labels,
                })
            })
            .collect();
        DatasetManifest::labels_only(clips)
    }
}

pub fn level_counts(samples: &[FrameSample]) -> LevelCounts {
    let mut t = [[0; LEVELS]; STATES];
    for f in samples {
        for s in AffectiveState::ALL {
            t[s.index()][f.labels.get(s) as usize] += 1;
        }
    }
    t
}

/// Generates the synthetic quadrant dataset. Every split's empirical level
/// counts equal the reference level table rescaled to the split size.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let noise = Normal::new(0.0, spec.noise_std_dev).map_err(|e| DatasetError::Spec(e.to_string()))?;
    let mut out = SyntheticDataset::default();
    for (&split, &n) in &spec.samples_per_split {
        let columns: Vec<Vec<u8>> = spec
            .counts
            .iter()
            .map(|row| {
                let mut col: Vec<u8> = rescale_counts(row, n)
                    .iter()
                    .enumerate()
                    .flat_map(|(l, &c)| std::iter::repeat_n(l as u8, c))
                    .collect();
                col.shuffle(&mut rng);
                col
            })
            .collect();
        let mut samples = Vec::with_capacity(n);
        let rows: Vec<[u8; STATES]> = (0..n).map(|i| std::array::from_fn(|s| columns[s][i])).collect();
        for (i, row) in rows.into_iter().enumerate() {
            let labels = AffectiveLevels::new(row).expect("levels < 4");
            let mut img = render_pattern(labels);
            if spec.noise_std_dev > 0.0 {
                for p in img.iter_mut() {
                    *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            samples.push(FrameSample {
                face: PreprocessedFace::new(img).expect("clamped to [0,1]"),
                labels,
                clip_id: format!("synth-{}-{i:05}", split.dir_name().to_ascii_lowercase()),
            });
        }
        out.splits.insert(split, samples);
    }
    Ok(out)
}

/// Converts frame samples into a trainer dataset (one head per state).
pub fn to_training_set(samples: &[FrameSample]) -> Dataset {
    Dataset::new(
        samples
            .iter()
            .map(|f| Sample {
                input: f.face.as_slice().to_vec(),
                labels: f.labels.as_usize(),
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows() {
        let recs = parse_labels("ClipID,Boredom,Engagement,Confusion,Frustration\nc1,0,3,1,0\n", Split::Train, "t").unwrap();
        assert_eq!(recs[0].labels.as_array(), [0, 3, 1, 0]);
        assert_eq!(recs[0].clip_id, "c1");
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        let bad = parse_labels("ClipID,Boredom,Engagement,Confusion,Frustration\nc9,0,4,1,0\n", Split::Train, "t");
        match bad {
            Err(DatasetError::Row { clip_id, .. }) => assert_eq!(clip_id, "c9"),
            other => panic!("{other:?}"),
        }
        let dup = parse_labels("ClipID,Boredom,Engagement,Confusion,Frustration\na,0,0,0,0\na,1,1,1,1\n", Split::Test, "t");
        assert!(matches!(dup, Err(DatasetError::Duplicate(_))));
    }

    #[test]
    fn trailing_header_whitespace_is_tolerated() {
        let recs = parse_labels("ClipID,Boredom,Engagement,Confusion,Frustration \n1100011002.avi,0,2,0,0\n", Split::Train, "t").unwrap();
        assert_eq!(recs[0].dir_name(), "1100011002");
    }

    #[test]
    fn rescale_is_exact() {
        assert_eq!(rescale_counts(&[34, 213, 2617, 2494], 5358), [34, 213, 2617, 2494]);
        let r = rescale_counts(&[34, 213, 2617, 2494], 2000);
        assert_eq!(r.iter().sum::<usize>(), 2000);
        assert_eq!(r, [13, 79, 977, 931]);
    }

    #[test]
    fn empty_manifest_summary_is_zero() {
        let t = split_summary(&DatasetManifest::labels_only(vec![]));
        assert!(t.values().all(|c| c.iter().flatten().all(|&v| v == 0)));
    }

    #[test]
    fn frame_names() {
        assert!(is_frame_name("frame_0012.pgm"));
        assert!(!is_frame_name("frame_12.pgm"));
        assert!(!is_frame_name("thumb.pgm"));
        assert_eq!(frame_file_name(7), "frame_0007.pgm");
    }
}
