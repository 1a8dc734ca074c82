//! The attentiveness index: a weighted sum of the four state intensities,
//! its display normalization, and a least-squares re-fit of the weights from
//! instructor annotations.
//!
//! ```
//! use attend_core::affectmodel::AffectiveIntensities;
//! use attend_core::attnindex::{default_paper_weights, evaluate_index};
//!
//! let x = AffectiveIntensities::new([1.0, 2.0, 1.0, 0.0]).unwrap();
//! assert!((evaluate_index(&x, &default_paper_weights()) - 2.814).abs() < 1e-12);
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affectmodel::{AffectiveIntensities, STATES};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("design matrix is rank-deficient (rank {rank}) along direction (B, E, C, F) = {direction:?}")]
    Singular { rank: usize, direction: [f64; STATES] },
    #[error("invalid record {clip_id}: {msg}")]
    Record { clip_id: String, msg: String },
    #[error("invalid index config: {0}")]
    Config(String),
    #[error("{path}: line {line}: {msg}")]
    Csv { path: String, line: u64, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Weights of boredom, engagement, confusion and frustration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub boredom: f64,
    pub engagement: f64,
    pub confusion: f64,
    pub frustration: f64,
}

impl AttentionWeights {
    pub fn new(w: [f64; STATES]) -> Result<Self, IndexError> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::Config(format!("non-finite weight in {w:?}")));
        }
        Ok(Self::from_array(w))
    }

    fn from_array(w: [f64; STATES]) -> Self {
        Self {
            boredom: w[0],
            engagement: w[1],
            confusion: w[2],
            frustration: w[3],
        }
    }

    pub fn as_array(&self) -> [f64; STATES] {
        [self.boredom, self.engagement, self.confusion, self.frustration]
    }

    /// Smallest and largest index attainable over intensities in `[0, 3]^4`.
    pub fn range(&self) -> (f64, f64) {
        let w = self.as_array();
        let lo: f64 = w.iter().map(|&v| 3.0 * v.min(0.0)).sum();
        let hi: f64 = w.iter().map(|&v| 3.0 * v.max(0.0)).sum();
        (lo, hi)
    }
}

impl Default for AttentionWeights {
    fn default() -> Self {
        default_paper_weights()
    }
}

/// The published coefficients: −0.598 B + 1.539 E + 0.334 C − 0.085 F.
pub fn default_paper_weights() -> AttentionWeights {
    AttentionWeights {
        boredom: -0.598,
        engagement: 1.539,
        confusion: 0.334,
        frustration: -0.085,
    }
}

/// Raw index: the weighted sum, evaluated left to right.
pub fn evaluate_index(x: &AffectiveIntensities, w: &AttentionWeights) -> f64 {
    w.boredom * x.0[0] + w.engagement * x.0[1] + w.confusion * x.0[2] + w.frustration * x.0[3]
}

pub const DEFAULT_RAW_MIN: f64 = -2.049;
pub const DEFAULT_RAW_MAX: f64 = 5.619;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub weights: AttentionWeights,
    pub raw_min: f64,
    pub raw_max: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            weights: default_paper_weights(),
            raw_min: DEFAULT_RAW_MIN,
            raw_max: DEFAULT_RAW_MAX,
        }
    }
}

impl IndexConfig {
    /// Uses the analytic range of `weights` as normalization bounds.
    pub fn for_weights(weights: AttentionWeights) -> Result<Self, IndexError> {
        let (raw_min, raw_max) = weights.range();
        let cfg = Self { weights, raw_min, raw_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if !self.raw_min.is_finite() || !self.raw_max.is_finite() || self.raw_min >= self.raw_max {
            return Err(IndexError::Config(format!("raw_min {} must be below raw_max {}", self.raw_min, self.raw_max)));
        }
        AttentionWeights::new(self.weights.as_array()).map(|_| ())
    }

    pub fn raw(&self, x: &AffectiveIntensities) -> f64 {
        evaluate_index(x, &self.weights)
    }

    pub fn normalized(&self, x: &AffectiveIntensities) -> f64 {
        normalize_index(self.raw(x), self)
    }
}

/// Maps a raw index into `[0, 1]` by the configured bounds, clamping.
pub fn normalize_index(raw: f64, cfg: &IndexConfig) -> f64 {
    ((raw - cfg.raw_min) / (cfg.raw_max - cfg.raw_min)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensitySource {
    GroundTruth,
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub clip_id: String,
    pub intensities: AffectiveIntensities,
    pub scores: Vec<f64>,
    pub mean_score: f64,
    pub source: IntensitySource,
}

impl AnnotationRecord {
    /// Validates scores (non-empty, each in `[1, 10]`) and computes their mean.
    pub fn new(
        clip_id: impl Into<String>,
        intensities: AffectiveIntensities,
        scores: Vec<f64>,
        source: IntensitySource,
    ) -> Result<Self, IndexError> {
        let clip_id = clip_id.into();
        let err = |msg: String| IndexError::Record {
            clip_id: clip_id.clone(),
            msg,
        };
        if scores.is_empty() {
            return Err(err("no scores".into()));
        }
        if let Some(s) = scores.iter().find(|s| !(1.0..=10.0).contains(*s)) {
            return Err(err(format!("score {s} outside [1, 10]")));
        }
        let mean_score = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok(Self {
            clip_id,
            intensities,
            scores,
            mean_score,
            source,
        })
    }
}

/// Parses `clipId,B,E,C,F,score1..scoreK` rows (header required, K ≥ 1 and
/// may vary per row).
pub fn parse_annotations(text: &str, source: IntensitySource, origin: &str) -> Result<Vec<AnnotationRecord>, IndexError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| IndexError::Csv {
            path: origin.into(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let csv_err = |msg: String| IndexError::Csv {
            path: origin.into(),
            line,
            msg,
        };
        if row.len() < 6 {
            return Err(csv_err(format!("expected at least 6 columns, got {}", row.len())));
        }
        let nums: Vec<f64> = row
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map_err(|_| csv_err(format!("{f:?} is not a number"))))
            .collect::<Result<_, _>>()?;
        let x = AffectiveIntensities::new([nums[0], nums[1], nums[2], nums[3]]).map_err(|e| csv_err(e.to_string()))?;
        out.push(AnnotationRecord::new(&row[0], x, nums[4..].to_vec(), source)?);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path, source: IntensitySource) -> Result<Vec<AnnotationRecord>, IndexError> {
    parse_annotations(&std::fs::read_to_string(path)?, source, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub records: usize,
    pub residual_norm: f64,
    pub r_squared: f64,
    pub condition_number: f64,
    pub singular_values: [f64; STATES],
}

/// Fitted weights and diagnostics, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub weights: AttentionWeights,
    pub report: FitReport,
}

/// Relative singular-value cutoff below which the design counts as rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Least-squares fit of mean scores on intensities, without an intercept.
pub fn fit_weights(records: &[AnnotationRecord]) -> Result<(AttentionWeights, FitReport), IndexError> {
    let xs: Vec<[f64; STATES]> = records.iter().map(|r| r.intensities.0).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.mean_score).collect();
    fit_observations(&xs, &ys)
}

/// Least squares of `ys` on the rows of `xs` through the origin, solved by
/// Householder QR after an SVD rank check.
pub fn fit_observations(xs: &[[f64; STATES]], ys: &[f64]) -> Result<(AttentionWeights, FitReport), IndexError> {
    assert_eq!(xs.len(), ys.len(), "one target per observation");
    let n = xs.len();
    if n < STATES {
        return Err(IndexError::TooFewRecords { needed: STATES, got: n });
    }
    if xs.iter().flatten().chain(ys).any(|v| !v.is_finite()) {
        return Err(IndexError::Config("non-finite observation".into()));
    }
    let a = DMatrix::from_fn(n, STATES, |i, j| xs[i][j]);
    let y = DVector::from_column_slice(ys);

    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..STATES).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: [f64; STATES] = std::array::from_fn(|k| svd.singular_values[order[k]]);
    let rank = sv.iter().filter(|&&s| s > RANK_TOLERANCE * sv[0]).count();
    if rank < STATES || sv[0] == 0.0 {
        let weakest = order[STATES - 1];
        let mut direction: [f64; STATES] = std::array::from_fn(|j| v_t[(weakest, j)]);
        // sign convention: largest component positive
        let lead = direction.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            direction.iter_mut().for_each(|v| *v = -*v);
        }
        return Err(IndexError::Singular { rank, direction });
    }

    let qr = a.clone().qr();
    let qty = qr.q().transpose() * &y;
    let w = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or(IndexError::Singular { rank, direction: [0.0; STATES] })?;
    let weights = AttentionWeights::from_array([w[0], w[1], w[2], w[3]]);

    let resid = &y - &a * &w;
    let ss_res = resid.norm_squared();
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    Ok((
        weights,
        FitReport {
            records: n,
            residual_norm: ss_res.sqrt(),
            r_squared,
            condition_number: sv[0] / sv[STATES - 1],
            singular_values: sv,
        },
    ))
}
