//! Multi-head networks and the mini-batch trainer.
//!
//! Every head is an independent layer chain over the same input and ends in
//! a softmax. The training loss of a sample is the sum of the per-head focal
//! losses; gradients are averaged over the batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::layers::{backward_accumulate, forward, logits_end, validate_specs, LayerSpec, ParameterSet};
use super::loss::{focal_loss, inverse_frequency_alpha, FocalConfig};
use super::{NetError, Tensor};
use crate::par::Exec;

/// Samples per gradient-accumulation chunk. Chunks are the unit of parallel
/// work and are reduced in index order, so results do not depend on the
/// number of worker threads.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub specs: Vec<LayerSpec>,
    pub params: ParameterSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadNet {
    pub input_shape: Vec<usize>,
    pub heads: Vec<Head>,
}

impl MultiHeadNet {
    pub fn new(input_shape: Vec<usize>, heads: Vec<Head>) -> Result<Self, NetError> {
        for head in &heads {
            let out = validate_specs(&head.specs, &input_shape)?;
            if out.len() != 1 {
                return Err(NetError::Shape(format!("head output must be a vector, got {out:?}")));
            }
            if head.specs.last() != Some(&LayerSpec::Softmax) {
                return Err(NetError::Shape("every head must end in softmax".into()));
            }
            head.params.check(&head.specs)?;
        }
        Ok(Self { input_shape, heads })
    }

    pub fn classes(&self, head: usize) -> usize {
        match self.heads[head].specs.iter().rev().find_map(|s| match s {
            LayerSpec::Dense { out_dim, .. } => Some(*out_dim),
            _ => None,
        }) {
            Some(n) => n,
            None => validate_specs(&self.heads[head].specs, &self.input_shape).map(|s| s[0]).unwrap_or(0),
        }
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(|h| h.params.count()).sum()
    }

    fn input_tensor(&self, input: &[f64]) -> Result<Tensor, NetError> {
        Tensor::new(self.input_shape.clone(), input.to_vec())
    }

    /// Softmax output of every head.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<Vec<f64>>, NetError> {
        let x = self.input_tensor(input)?;
        self.heads
            .iter()
            .map(|h| forward(&h.specs, &h.params, &x).map(|(y, _)| y.into_data()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    /// One class index per head.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-head class counts.
    pub fn class_counts(&self, heads: usize, classes: usize) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0usize; classes]; heads];
        for s in &self.samples {
            for (h, &l) in s.labels.iter().enumerate().take(heads) {
                if l < classes {
                    counts[h][l] += 1;
                }
            }
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSpec {
    Uniform,
    InverseFrequency,
    /// One weight vector per head.
    Explicit(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub gamma: f64,
    pub alpha: AlphaSpec,
}

impl LossSettings {
    pub fn focal_default() -> Self {
        Self {
            gamma: 2.0,
            alpha: AlphaSpec::InverseFrequency,
        }
    }

    pub fn cross_entropy() -> Self {
        Self {
            gamma: 0.0,
            alpha: AlphaSpec::Uniform,
        }
    }

    /// Resolves one focal configuration per head against training labels.
    pub fn resolve(&self, net: &MultiHeadNet, train: &Dataset) -> Result<Vec<FocalConfig>, NetError> {
        let cfgs: Vec<FocalConfig> = (0..net.heads.len())
            .map(|h| {
                let classes = net.classes(h);
                let alpha = match &self.alpha {
                    AlphaSpec::Uniform => vec![1.0; classes],
                    AlphaSpec::InverseFrequency => inverse_frequency_alpha(&train.class_counts(net.heads.len(), classes)[h]),
                    AlphaSpec::Explicit(v) => v.get(h).cloned().unwrap_or_default(),
                };
                FocalConfig {
                    gamma: self.gamma,
                    alpha,
                }
            })
            .collect();
        for (h, c) in cfgs.iter().enumerate() {
            c.validate()?;
            if c.alpha.len() != net.classes(h) {
                return Err(NetError::Config(format!("head {h}: alpha length {} != classes", c.alpha.len())));
            }
        }
        Ok(cfgs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    /// Validation loss must drop by more than this to count as improvement.
    pub min_delta: f64,
    /// Stop as soon as every head's validation accuracy reaches this value.
    #[serde(default)]
    pub stop_at_accuracy: Option<f64>,
    pub rng_seed: u64,
    pub loss: LossSettings,
    pub adam: AdamConfig,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 64,
            early_stop_patience: 5,
            min_delta: 0.0,
            stop_at_accuracy: None,
            rng_seed: 42,
            loss: LossSettings::focal_default(),
            adam: AdamConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(NetError::Config("epochs, batch size and patience must be positive".into()));
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(NetError::Config(format!(
                "patience {} exceeds max epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        if self.adam.learning_rate.is_nan() || self.adam.learning_rate <= 0.0 || self.min_delta.is_nan() || self.min_delta < 0.0 {
            return Err(NetError::Config("learning rate must be > 0 and min_delta >= 0".into()));
        }
        if self.stop_at_accuracy.is_some_and(|t| !(t > 0.0 && t <= 1.0)) {
            return Err(NetError::Config("stop_at_accuracy must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub head_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// CSV with columns `epoch,trainLoss,valLoss,acc_<head>...`.
    pub fn to_csv(&self, head_names: &[&str]) -> String {
        let mut out = String::from("epoch,trainLoss,valLoss");
        for name in head_names {
            out.push_str(",acc_");
            out.push_str(name);
        }
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!("{},{},{}", r.epoch, r.train_loss, r.val_loss));
            for a in &r.head_accuracy {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Loss and accuracy of a network over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_loss: f64,
    pub head_accuracy: Vec<f64>,
    /// `confusion[head][true][predicted]`.
    pub confusion: Vec<Vec<Vec<usize>>>,
}

impl Evaluation {
    /// Recall of the given classes pooled together, or `None` without support.
    pub fn pooled_recall(&self, head: usize, classes: &[usize]) -> Option<f64> {
        let m = &self.confusion[head];
        let support: usize = classes.iter().map(|&c| m[c].iter().sum::<usize>()).sum();
        let hit: usize = classes.iter().map(|&c| m[c][c]).sum();
        (support > 0).then(|| hit as f64 / support as f64)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(net: &MultiHeadNet, data: &Dataset, losses: &[FocalConfig], exec: Exec) -> Result<Evaluation, NetError> {
    let n_heads = net.heads.len();
    let per_sample = exec.map_slice(&data.samples, |s| -> Result<(f64, Vec<usize>), NetError> {
        let probs = net.predict(&s.input)?;
        let mut loss = 0.0;
        let mut preds = Vec::with_capacity(n_heads);
        for (h, p) in probs.iter().enumerate() {
            loss += focal_loss(p, s.labels[h], &losses[h])?.0;
            preds.push(argmax(p));
        }
        Ok((loss, preds))
    });
    let mut confusion: Vec<Vec<Vec<usize>>> = (0..n_heads).map(|h| vec![vec![0; net.classes(h)]; net.classes(h)]).collect();
    let mut total = 0.0;
    for (s, r) in data.samples.iter().zip(per_sample) {
        let (loss, preds) = r?;
        total += loss;
        for h in 0..n_heads {
            confusion[h][s.labels[h]][preds[h]] += 1;
        }
    }
    let n = data.len().max(1) as f64;
    let head_accuracy = confusion
        .iter()
        .map(|m| (0..m.len()).map(|c| m[c][c]).sum::<usize>() as f64 / n)
        .collect();
    Ok(Evaluation {
        mean_loss: total / n,
        head_accuracy,
        confusion,
    })
}

/// Summed loss and accumulated gradients of a run of samples.
fn chunk_gradients(
    net: &MultiHeadNet,
    samples: &[&Sample],
    losses: &[FocalConfig],
) -> Result<(f64, Vec<ParameterSet>), NetError> {
    let mut grads: Vec<ParameterSet> = net.heads.iter().map(|h| ParameterSet::zeros(&h.specs)).collect();
    let mut total = 0.0;
    for s in samples {
        let x = net.input_tensor(&s.input)?;
        for (h, head) in net.heads.iter().enumerate() {
            let (probs, cache) = forward(&head.specs, &head.params, &x)?;
            let (loss, g_logits) = focal_loss(probs.data(), s.labels[h], &losses[h])?;
            total += loss;
            backward_accumulate(&head.specs, &head.params, &cache, logits_end(&head.specs), &g_logits, &mut grads[h])?;
        }
    }
    Ok((total, grads))
}

/// Mean loss over a batch and the batch-averaged gradient per head.
pub fn batch_gradients(
    net: &MultiHeadNet,
    batch: &[&Sample],
    losses: &[FocalConfig],
    exec: Exec,
) -> Result<(f64, Vec<ParameterSet>), NetError> {
    let chunks: Vec<&[&Sample]> = batch.chunks(CHUNK).collect();
    let results = exec.map_slice(&chunks, |c| chunk_gradients(net, c, losses));
    let mut iter = results.into_iter();
    let (mut total, mut grads) = match iter.next() {
        Some(r) => r?,
        None => return Err(NetError::Config("empty batch".into())),
    };
    for r in iter {
        let (l, g) = r?;
        total += l;
        for (acc, gh) in grads.iter_mut().zip(&g) {
            acc.add_assign(gh);
        }
    }
    let k = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|g| g.scale(k));
    Ok((total * k, grads))
}

fn check_labels(net: &MultiHeadNet, data: &Dataset, name: &str) -> Result<(), NetError> {
    let len: usize = net.input_shape.iter().product();
    for (i, s) in data.samples.iter().enumerate() {
        if s.input.len() != len {
            return Err(NetError::Input(format!("{name} sample {i}: input has {} values, expected {len}", s.input.len())));
        }
        if s.labels.len() != net.heads.len() {
            return Err(NetError::Input(format!("{name} sample {i}: {} labels for {} heads", s.labels.len(), net.heads.len())));
        }
        for (h, &l) in s.labels.iter().enumerate() {
            if l >= net.classes(h) {
                return Err(NetError::Input(format!("{name} sample {i}: label {l} out of range for head {h}")));
            }
        }
    }
    Ok(())
}

/// Trains with Adam and early stopping on validation loss; returns the
/// network from the best epoch.
///
/// `on_epoch` observes each finished epoch (progress reporting).
pub fn train_with(
    net: &MultiHeadNet,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MultiHeadNet, TrainHistory), NetError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(NetError::Config("training and validation sets must be non-empty".into()));
    }
    check_labels(net, train, "train")?;
    check_labels(net, val, "validation")?;
    let losses = cfg.loss.resolve(net, train)?;

    let mut current = net.clone();
    let mut opt: Vec<AdamState> = net.heads.iter().map(|h| AdamState::new(&h.specs, cfg.adam)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = current.clone();
    let mut best_loss = f64::INFINITY;
    let mut history = TrainHistory::default();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let (loss, grads) = batch_gradients(&current, &batch, &losses, cfg.exec)?;
            epoch_loss += loss * batch.len() as f64;
            for ((head, g), st) in current.heads.iter_mut().zip(&grads).zip(opt.iter_mut()) {
                adam_step(&mut head.params, g, st);
            }
        }
        let eval = evaluate(&current, val, &losses, cfg.exec)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss: eval.mean_loss,
            head_accuracy: eval.head_accuracy,
        };
        on_epoch(&record);
        let improved = record.val_loss < best_loss - cfg.min_delta;
        let target_met = cfg
            .stop_at_accuracy
            .is_some_and(|t| record.head_accuracy.iter().all(|&a| a >= t));
        history.epochs.push(record);
        if target_met {
            best = current.clone();
            history.best_epoch = epoch;
            history.stopped_early = epoch < cfg.max_epochs;
            break;
        }
        if improved {
            best_loss = history.epochs.last().map(|r| r.val_loss).unwrap_or(best_loss);
            best = current.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                history.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    if history.best_epoch == 0 {
        // validation loss was never finite; fall back to the last weights
        best = current;
        history.best_epoch = history.epochs.len();
    }
    Ok((best, history))
}

pub fn train(net: &MultiHeadNet, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(MultiHeadNet, TrainHistory), NetError> {
    train_with(net, train, val, cfg, |_| {})
}
