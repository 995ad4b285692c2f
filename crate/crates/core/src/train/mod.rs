//! Mini-batch training with validation-loss checkpointing, cross-validation
//! and metrics.

mod cv;
mod metrics;
pub mod slices;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{softmax, softmax_cross_entropy, Dims, InputBatch, Mode, ModelConfig, ModelError, NetworkParameters};
use crate::splits::{LeakageReport, SplitError};
use crate::types::{Modality, ModalityStack};

pub use cv::{
    cross_validate, cross_validate_with_plan, evaluate_fold, predictions_csv, write_curves_csv, CvConfig, CvOutcome,
    EvaluationReport, FoldResult, MetricSummary, Prediction,
};
pub use metrics::{aggregate_folds, compute_metrics, roc_auc, MetricError, Metrics, Summary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set has a single class ({0}); at least two are required")]
    SingleClass(usize),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("sample {id} has {got} values, expected {expected}")]
    SampleShape { id: String, got: usize, expected: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("leakage audit failed with {} violation(s); no model was trained", .0.violations.len())]
    Leakage(LeakageReport),
    #[error("subject {0} is referenced by the plan but has no data")]
    MissingSubject(String),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            max_epochs: 60,
            early_stop_patience: 10,
            class_weighting: ClassWeighting::None,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.early_stop_patience >= self.max_epochs {
            return bad(format!(
                "early_stop_patience ({}) must be below max_epochs ({})",
                self.early_stop_patience, self.max_epochs
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// One training example: `channels x volume(dims)` values, row-major per
/// channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub data: Vec<f32>,
}

impl Sample {
    /// Channels of `stack` in `modalities` order.
    pub fn from_stack(stack: &ModalityStack, modalities: &[Modality], label: usize) -> Sample {
        let data = modalities.iter().flat_map(|&m| stack.channel(m).voxels().iter().copied()).collect();
        Sample { id: stack.subject_id().to_string(), label, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub dims: Dims,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(channels: usize, dims: Dims, samples: Vec<Sample>) -> Result<Self, TrainError> {
        let expected = channels * dims.iter().product::<usize>();
        for s in &samples {
            if s.data.len() != expected {
                return Err(TrainError::SampleShape { id: s.id.clone(), got: s.data.len(), expected });
            }
        }
        Ok(Dataset { channels, dims, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Subset in the order of `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { channels: self.channels, dims: self.dims, samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.samples.first().map_or(0, |s| s.data.len()));
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i].data);
            labels.push(self.samples[i].label);
        }
        (data, labels)
    }

    fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &NetworkParameters<f32>, cfg: &TrainingConfig) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| if t.trainable() { vec![0.0; t.len()] } else { Vec::new() }).collect();
        Adam { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut NetworkParameters<f32>, grads: &[Vec<f32>]) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((t, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if !t.trainable() {
                continue;
            }
            for (((w, &g), m), v) in t.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurves {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Select the checkpoint epoch from validation losses: the minimum, ties
/// to the earlier epoch. Returns `(best_epoch_1_based, stop_after_epoch)`
/// given the patience rule.
pub fn select_checkpoint(val_loss: &[f64], patience: usize) -> (usize, usize) {
    let mut best = 0;
    for (e, &l) in val_loss.iter().enumerate() {
        if l < val_loss[best] {
            best = e;
        }
        if e - best >= patience {
            return (best + 1, e + 1);
        }
    }
    (best + 1, val_loss.len())
}

fn class_weights(counts: &[usize], weighting: ClassWeighting) -> Option<Vec<f64>> {
    match weighting {
        ClassWeighting::None => None,
        ClassWeighting::InverseFrequency => {
            let total: usize = counts.iter().sum();
            let present = counts.iter().filter(|&&c| c > 0).count() as f64;
            Some(counts.iter().map(|&c| if c == 0 { 0.0 } else { total as f64 / (present * c as f64) }).collect())
        }
    }
}

/// Eval-mode class probabilities, row-major `len x n_classes`.
pub fn predict(params: &NetworkParameters<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(data.len() * params.config().n_classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.gather(chunk);
        let trace = params.infer(&InputBatch::new(&x, chunk.len(), data.channels, data.dims))?;
        out.extend(softmax(&trace.logits, trace.n_classes).into_iter().map(f64::from));
    }
    Ok(out)
}

/// Mean unweighted cross-entropy in eval mode.
pub fn evaluate_loss(params: &NetworkParameters<f32>, data: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.gather(chunk);
        let trace = params.infer(&InputBatch::new(&x, chunk.len(), data.channels, data.dims))?;
        let (loss, _) = softmax_cross_entropy(&trace.logits, trace.n_classes, &y, None);
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: NetworkParameters<f32>,
    pub curves: TrainingCurves,
}

/// Train a fresh model, keeping the parameters of the epoch with minimum
/// validation loss. Stops once `early_stop_patience` epochs pass without
/// improvement. Deterministic in `train_cfg.seed`: initialization, epoch
/// shuffles and dropout each draw from their own seeded stream.
pub fn train_fold(train: &Dataset, val: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainingConfig) -> Result<TrainedModel, TrainError> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let classes = model_cfg.n_classes;
    for s in train.samples.iter().chain(&val.samples) {
        if s.label >= classes {
            return Err(TrainError::Config(format!("sample {} has label {} but the model has {classes} classes", s.id, s.label)));
        }
    }
    let counts = train.class_counts(classes);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(TrainError::SingleClass(counts.iter().position(|&c| c > 0).unwrap_or(0)));
    }
    let weights = class_weights(&counts, train_cfg.class_weighting);

    let mut params = NetworkParameters::<f32>::build(model_cfg, train_cfg.seed)?;
    let mut adam = Adam::new(&params, train_cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    dropout_rng.set_stream(2);

    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut curves = TrainingCurves { train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: 0, stopped_early: false };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=train_cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let (x, y) = train.gather(chunk);
            let input = InputBatch::new(&x, chunk.len(), train.channels, train.dims);
            let (trace, cache) = params.forward(&input, Mode::Train(&mut dropout_rng))?;
            let (loss, dlogits) = softmax_cross_entropy(&trace.logits, classes, &y, weights.as_deref());
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss });
            }
            let grads = params.backward(&cache, &dlogits, false);
            if !grads.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss: f64::NAN });
            }
            params.update_running_stats(&cache);
            adam.step(&mut params, &grads.params);
            epoch_loss += loss * chunk.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = evaluate_loss(&params, val, train_cfg.batch_size.max(8))?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, batch: usize::MAX, loss: val_loss });
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        curves.train_loss.push(train_loss);
        curves.val_loss.push(val_loss);
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = params.clone();
        }
        if epoch - best_epoch >= train_cfg.early_stop_patience {
            curves.stopped_early = epoch < train_cfg.max_epochs;
            break;
        }
    }
    curves.best_epoch = best_epoch;
    best.check_finite()?;
    Ok(TrainedModel { params: best, curves })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_rule_prefers_earlier_ties_and_honours_patience() {
        // minimum at epoch 3, then monotonically increasing
        let losses: Vec<f64> = (1..=30).map(|e| if e <= 3 { 10.0 - e as f64 } else { 7.0 + e as f64 }).collect();
        assert_eq!(select_checkpoint(&losses, 10), (3, 13));
        assert_eq!(select_checkpoint(&[1.0, 1.0, 1.0], 5), (1, 3));
        assert_eq!(select_checkpoint(&[3.0, 2.0, 2.0, 2.5], 2), (2, 4));
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = TrainingConfig { early_stop_patience: 60, ..TrainingConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = TrainingConfig { batch_size: 0, ..TrainingConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn inverse_frequency_weights() {
        assert_eq!(class_weights(&[3, 1], ClassWeighting::InverseFrequency), Some(vec![4.0 / 6.0, 2.0]));
        assert_eq!(class_weights(&[3, 1], ClassWeighting::None), None);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = ModelConfig { encoder_channels: vec![1, 1, 1], embedding_dim: 1, fused_dim: 4, head_hidden: 2, ..ModelConfig::default() };
        let mut p = NetworkParameters::<f32>::build(&cfg, 0).unwrap();
        let before = p.clone();
        let tc = TrainingConfig { learning_rate: 0.01, ..TrainingConfig::default() };
        let mut adam = Adam::new(&p, &tc);
        let grads: Vec<Vec<f32>> = p.tensors().iter().map(|t| if t.trainable() { vec![0.5; t.len()] } else { Vec::new() }).collect();
        adam.step(&mut p, &grads);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let expected = if a.trainable() { 0.01 } else { 0.0 };
                assert!(((y - x) - expected).abs() < 1e-6);
            }
        }
    }
}
