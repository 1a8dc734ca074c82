//! The four-branch affective-state classifier and prediction utilities.
//!
//! Each branch maps a 64×64 face to a distribution over four intensity levels
//! of one affective state; stacking the branch outputs gives a 4×4
//! row-stochastic matrix in [`AffectiveState::ALL`] order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::facegate::{PreprocessedFace, FACE_SIDE};
use crate::tensornet::{self, Head, LayerSpec, Manifest, MultiHeadNet, NetError, ParameterSet};

pub const STATES: usize = 4;
pub const LEVELS: usize = 4;

/// Name recorded in weight manifests for [`branch_topology`].
pub const ARCHITECTURE: &str = "affect-4branch-cnn-v1";

#[derive(Debug, Error)]
pub enum AffectError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("input error: {0}")]
    Input(String),
    #[error("invalid probability matrix: {0}")]
    Probs(String),
    #[error("model mismatch: {0}")]
    Model(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffectiveState {
    Boredom,
    Engagement,
    Confusion,
    Frustration,
}

impl AffectiveState {
    pub const ALL: [AffectiveState; STATES] = [
        AffectiveState::Boredom,
        AffectiveState::Engagement,
        AffectiveState::Confusion,
        AffectiveState::Frustration,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AffectiveState::Boredom => "boredom",
            AffectiveState::Engagement => "engagement",
            AffectiveState::Confusion => "confusion",
            AffectiveState::Frustration => "frustration",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            AffectiveState::Boredom => "Boredom",
            AffectiveState::Engagement => "Engagement",
            AffectiveState::Confusion => "Confusion",
            AffectiveState::Frustration => "Frustration",
        }
    }
}

pub fn state_names() -> [&'static str; STATES] {
    AffectiveState::ALL.map(AffectiveState::name)
}

/// Per-state intensity distributions; row `i` is state `i` over levels 0..3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; LEVELS]; STATES]", into = "[[f64; LEVELS]; STATES]")]
pub struct AffectiveStateProbs([[f64; LEVELS]; STATES]);

impl AffectiveStateProbs {
    /// Accepts a matrix whose rows are non-negative and sum to 1 within `tol`.
    pub fn with_tolerance(rows: [[f64; LEVELS]; STATES], tol: f64) -> Result<Self, AffectError> {
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(AffectError::Probs(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(AffectError::Probs(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self(rows))
    }

    pub fn new(rows: [[f64; LEVELS]; STATES]) -> Result<Self, AffectError> {
        Self::with_tolerance(rows, 1e-6)
    }

    pub fn rows(&self) -> &[[f64; LEVELS]; STATES] {
        &self.0
    }

    pub fn row(&self, s: AffectiveState) -> &[f64; LEVELS] {
        &self.0[s.index()]
    }

    /// Element-wise mean of several matrices (clip-level aggregation).
    pub fn mean(items: &[AffectiveStateProbs]) -> Option<AffectiveStateProbs> {
        if items.is_empty() {
            return None;
        }
        let mut acc = [[0.0; LEVELS]; STATES];
        for p in items {
            for (a, r) in acc.iter_mut().zip(&p.0) {
                for (x, y) in a.iter_mut().zip(r) {
                    *x += y;
                }
            }
        }
        let k = items.len() as f64;
        acc.iter_mut().flatten().for_each(|v| *v /= k);
        Some(Self(acc))
    }

    /// A matrix with every row one-hot at the given levels.
    pub fn one_hot(levels: AffectiveLevels) -> Self {
        let mut rows = [[0.0; LEVELS]; STATES];
        for (row, &l) in rows.iter_mut().zip(levels.0.iter()) {
            row[l as usize] = 1.0;
        }
        Self(rows)
    }
}

impl TryFrom<[[f64; LEVELS]; STATES]> for AffectiveStateProbs {
    type Error = AffectError;
    fn try_from(rows: [[f64; LEVELS]; STATES]) -> Result<Self, Self::Error> {
        Self::with_tolerance(rows, 1e-4)
    }
}

impl From<AffectiveStateProbs> for [[f64; LEVELS]; STATES] {
    fn from(p: AffectiveStateProbs) -> Self {
        p.0
    }
}

/// Discrete level (0 = very low … 3 = very high) for each state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; STATES]", into = "[u8; STATES]")]
pub struct AffectiveLevels([u8; STATES]);

impl AffectiveLevels {
    pub fn new(levels: [u8; STATES]) -> Result<Self, AffectError> {
        if let Some(l) = levels.iter().find(|&&l| l as usize >= LEVELS) {
            return Err(AffectError::Input(format!("level {l} outside 0..=3")));
        }
        Ok(Self(levels))
    }

    pub fn get(&self, s: AffectiveState) -> u8 {
        self.0[s.index()]
    }

    pub fn as_array(&self) -> [u8; STATES] {
        self.0
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.0.iter().map(|&l| l as usize).collect()
    }
}

impl TryFrom<[u8; STATES]> for AffectiveLevels {
    type Error = AffectError;
    fn try_from(v: [u8; STATES]) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<AffectiveLevels> for [u8; STATES] {
    fn from(l: AffectiveLevels) -> Self {
        l.0
    }
}

/// Expected intensity per state, each in `[0, 3]`: (B, E, C, F).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffectiveIntensities(pub [f64; STATES]);

impl AffectiveIntensities {
    pub fn new(values: [f64; STATES]) -> Result<Self, AffectError> {
        if values.iter().any(|v| !(0.0..=3.0).contains(v)) {
            return Err(AffectError::Input(format!("intensities {values:?} outside [0,3]")));
        }
        Ok(Self(values))
    }

    pub fn get(&self, s: AffectiveState) -> f64 {
        self.0[s.index()]
    }
}

impl From<AffectiveLevels> for AffectiveIntensities {
    fn from(l: AffectiveLevels) -> Self {
        Self(l.0.map(f64::from))
    }
}

/// Per-row argmax; ties resolve to the lower level.
pub fn probs_to_levels(p: &AffectiveStateProbs) -> AffectiveLevels {
    AffectiveLevels(p.0.map(|row| tensornet::argmax(&row) as u8))
}

/// How frame predictions combine into one clip prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipAggregation {
    /// Argmax of the mean probability matrix.
    #[default]
    MeanProbs,
    /// Most frequent per-frame level; ties resolve to the lower level.
    Majority,
}

/// Clip-level prediction from its frames; `None` for an empty clip.
pub fn aggregate_clip(frames: &[AffectiveStateProbs], how: ClipAggregation) -> Option<AffectiveLevels> {
    if frames.is_empty() {
        return None;
    }
    let n = frames.len() as f64;
    let rows = std::array::from_fn(|s| match how {
        ClipAggregation::MeanProbs => {
            let mean: Vec<f64> = (0..LEVELS).map(|l| frames.iter().map(|f| f.0[s][l]).sum::<f64>() / n).collect();
            tensornet::argmax(&mean) as u8
        }
        ClipAggregation::Majority => {
            let mut votes = [0.0; LEVELS];
            for f in frames {
                votes[tensornet::argmax(&f.0[s])] += 1.0;
            }
            tensornet::argmax(&votes) as u8
        }
    });
    Some(AffectiveLevels(rows))
}

/// Probability-weighted level of each row.
pub fn probs_to_intensities(p: &AffectiveStateProbs) -> AffectiveIntensities {
    AffectiveIntensities(p.0.map(|row| row.iter().enumerate().map(|(l, &q)| l as f64 * q).sum::<f64>().clamp(0.0, 3.0)))
}

/// Layer chain of one branch: three conv/ReLU/pool stages, then two dense layers.
pub fn branch_topology() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(1, 8, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::conv(8, 16, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::conv(16, 32, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::Flatten,
        LayerSpec::dense(32 * 8 * 8, 56),
        LayerSpec::Relu,
        LayerSpec::dense(56, LEVELS),
        LayerSpec::Softmax,
    ]
}

/// The classifier: a [`MultiHeadNet`] with one branch per affective state.
#[derive(Clone, Debug, PartialEq)]
pub struct AffectModel {
    net: MultiHeadNet,
}

impl AffectModel {
    pub fn input_shape() -> Vec<usize> {
        vec![1, FACE_SIDE, FACE_SIDE]
    }

    /// Builds the model with He-uniform weights drawn from `seed`.
    pub fn build(seed: u64) -> Self {
        Self::build_with(&branch_topology(), seed).expect("built-in topology is valid")
    }

    /// Builds four branches of an arbitrary topology (for alternates and tests).
    pub fn build_with(topology: &[LayerSpec], seed: u64) -> Result<Self, AffectError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = (0..STATES)
            .map(|_| Head {
                specs: topology.to_vec(),
                params: ParameterSet::he_uniform(topology, &mut rng),
            })
            .collect();
        Self::from_net(MultiHeadNet::new(Self::input_shape(), heads)?)
    }

    pub fn from_net(net: MultiHeadNet) -> Result<Self, AffectError> {
        if net.input_shape != Self::input_shape() {
            return Err(AffectError::Model(format!("input shape {:?}", net.input_shape)));
        }
        if net.heads.len() != STATES || (0..STATES).any(|h| net.classes(h) != LEVELS) {
            return Err(AffectError::Model("expected 4 heads of 4 classes".into()));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &MultiHeadNet {
        &self.net
    }

    pub fn into_net(self) -> MultiHeadNet {
        self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn predict(&self, face: &PreprocessedFace) -> Result<AffectiveStateProbs, AffectError> {
        self.predict_raw(face.as_slice())
    }

    /// Predicts from a flat 64×64 input; rejects non-finite values.
    pub fn predict_raw(&self, input: &[f64]) -> Result<AffectiveStateProbs, AffectError> {
        if input.len() != FACE_SIDE * FACE_SIDE {
            return Err(AffectError::Input(format!("expected {} values, got {}", FACE_SIDE * FACE_SIDE, input.len())));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(AffectError::Input("non-finite pixel".into()));
        }
        let outs = self.net.predict(input)?;
        let mut rows = [[0.0; LEVELS]; STATES];
        for (row, out) in rows.iter_mut().zip(outs) {
            row.copy_from_slice(&out);
        }
        AffectiveStateProbs::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<(), AffectError> {
        tensornet::save_weights(&self.net, ARCHITECTURE, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Manifest, Self), AffectError> {
        let (manifest, net) = tensornet::load_weights(path)?;
        Ok((manifest, Self::from_net(net)?))
    }
}

pub fn build_model(seed: u64) -> AffectModel {
    AffectModel::build(seed)
}

pub fn save_weights(model: &AffectModel, path: &Path) -> Result<(), AffectError> {
    model.save(path)
}

pub fn load_weights(path: &Path) -> Result<AffectModel, AffectError> {
    AffectModel::load(path).map(|(_, m)| m)
}

/// Metadata written next to trained weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub architecture: String,
    pub seed: u64,
    pub parameter_count: usize,
    /// FNV-1a of the training config JSON, as 16 hex digits.
    pub training_config_digest: String,
    pub best_epoch: usize,
    pub validation_accuracy: std::collections::BTreeMap<String, f64>,
}

/// 64-bit FNV-1a, used for short config digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
