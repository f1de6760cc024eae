//! Minibatch Adam training with a stepped learning-rate schedule.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{shift_labels, split_episodes, Dataset, WindowSet};
use super::history::Normalizer;
use super::model::{batch_loss, DropoutMasks, ModelConfig, Parameters, RewardModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `lr_step_epochs` epochs.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Ticks by which labels are moved back in time.
    pub label_shift: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            lr_step_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            label_shift: 2,
            seed: 0,
            validation_fraction: 0.2,
            target_accuracy: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.lr_decay > 0.0
            && self.lr_step_epochs > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && (0.0..1.0).contains(&self.validation_fraction);
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid training configuration: {self:?}")));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (zero based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// Accuracy of the training forward passes, dropout included.
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub train_windows: usize,
    pub val_windows: usize,
    pub train_episodes: Vec<u64>,
    pub val_episodes: Vec<u64>,
}

impl TrainReport {
    pub fn best_val_accuracy(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub windows: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[label][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Adam state for one parameter set.
pub struct Adam {
    m: Parameters,
    v: Parameters,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(shape: &ModelConfig, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: Parameters::zeros(shape), v: Parameters::zeros(shape), t: 0, beta1, beta2, eps }
    }

    pub fn step(&mut self, params: &mut Parameters, grad: &Parameters, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let grads = grad.tensors();
        for (((mut p, mut m), mut v), (_, g)) in
            params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut()).zip(grads)
        {
            ndarray::Zip::from(&mut p).and(&mut m).and(&mut v).and(&g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Loss and argmax accuracy of `model` in evaluation mode. Raw windows are
/// standardized with the model's normalizer first.
pub fn evaluate(model: &RewardModel, windows: &WindowSet) -> Result<EvalMetrics> {
    let prepared;
    let windows = match (&model.normalizer, windows.is_normalized()) {
        (Some(n), false) => {
            let mut w = windows.clone();
            w.normalize(n)?;
            prepared = w;
            &prepared
        }
        _ => windows,
    };
    let m_k = model.config.outputs;
    let mut confusion = vec![vec![0; m_k]; m_k];
    let mut total_loss = 0.0;
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(256) {
        let (batch, labels) = windows.gather(chunk);
        let logits = model.logits(&batch, None)?;
        total_loss += batch_loss(&logits, &labels, model.config.logits_mode).0 * chunk.len() as f64;
        for (row, &label) in logits.rows().into_iter().zip(&labels) {
            confusion[label][argmax(row)] += 1;
        }
    }
    let n = windows.len();
    let correct: usize = (0..m_k).map(|k| confusion[k][k]).sum();
    Ok(EvalMetrics {
        windows: n,
        loss: if n > 0 { total_loss / n as f64 } else { f64::NAN },
        accuracy: if n > 0 { correct as f64 / n as f64 } else { f64::NAN },
        confusion,
    })
}

/// Train a reward model; `on_epoch` observes each epoch's metrics.
pub fn train_with(
    d: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(RewardModel, TrainReport)> {
    cfg.validate()?;
    d.validate()?;
    let model_cfg = ModelConfig { outputs: d.m_k, ..cfg.model.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let shifted = shift_labels(d, cfg.label_shift);
    let (train_ids, val_ids) = split_episodes(&shifted, cfg.validation_fraction, &mut rng);
    let train_set: HashSet<u64> = train_ids.iter().copied().collect();
    let val_set: HashSet<u64> = val_ids.iter().copied().collect();

    let normalizer = Normalizer::fit(shifted.rows.iter().filter(|r| train_set.contains(&r.episode)).map(|r| &r.gamma))?;
    let mut train_w = WindowSet::build(&shifted, model_cfg.steps, Some(&train_set));
    let mut val_w = WindowSet::build(&shifted, model_cfg.steps, Some(&val_set));
    if train_w.is_empty() {
        return Err(Error::Dataset(format!("no training windows of length {}", model_cfg.steps)));
    }
    train_w.normalize(&normalizer)?;
    val_w.normalize(&normalizer)?;

    let mut model = RewardModel::new(model_cfg.clone(), &mut rng)?;
    model.normalizer = Some(normalizer);
    let mut adam = Adam::new(&model_cfg, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut report = TrainReport {
        epochs: Vec::new(),
        train_windows: train_w.len(),
        val_windows: val_w.len(),
        train_episodes: train_ids,
        val_episodes: val_ids,
    };

    let mut order: Vec<usize> = (0..train_w.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, labels) = train_w.gather(chunk);
            let masks = DropoutMasks::sample(&model_cfg, chunk.len(), &mut rng);
            let (loss, grad, logits) = model.gradients_with_logits(&batch, &labels, Some(&masks)).map_err(|_| Error::Diverged {
                epoch,
                batch: bi,
                loss: f64::NAN,
            })?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, loss });
            }
            adam.step(&mut model.params, &grad, lr);
            loss_sum += loss * chunk.len() as f64;
            correct += logits.rows().into_iter().zip(&labels).filter(|(r, &l)| argmax(r.view()) == l).count();
        }
        let val = if val_w.is_empty() { None } else { Some(evaluate(&model, &val_w)?) };
        let metrics = EpochMetrics {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / train_w.len() as f64,
            train_accuracy: correct as f64 / train_w.len() as f64,
            val_loss: val.as_ref().map_or(f64::NAN, |v| v.loss),
            val_accuracy: val.as_ref().map_or(f64::NAN, |v| v.accuracy),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            metrics.train_loss,
            metrics.train_accuracy,
            metrics.val_loss,
            metrics.val_accuracy
        );
        on_epoch(&metrics);
        let reached = cfg.target_accuracy.is_some_and(|t| metrics.val_accuracy >= t);
        report.epochs.push(metrics);
        if reached {
            break;
        }
    }
    Ok((model, report))
}

pub fn train(d: &Dataset, cfg: &TrainConfig) -> Result<(RewardModel, TrainReport)> {
    train_with(d, cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::dataset::DatasetRow;
    use crate::intent::features::{FeatureVector, FEATURE_COUNT};

    fn toy_dataset() -> Dataset {
        let mut rows = Vec::new();
        for ep in 0..20u64 {
            let label = (ep % 2) as usize;
            for tick in 0..20u64 {
                let mut g = [0.0; FEATURE_COUNT];
                g[0] = if label == 0 { -1.0 } else { 1.0 };
                g[5] = 0.01 * tick as f64;
                rows.push(DatasetRow { episode: ep, tick, gamma: FeatureVector(g), label, active: 0 });
            }
        }
        Dataset::new(2, rows).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-2,
            label_shift: 0,
            model: ModelConfig { hidden: 8, decoder: vec![6], steps: 4, ..ModelConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let (_, report) = train(&toy_dataset(), &small_config()).unwrap();
        assert_eq!(report.epochs.len(), 5);
        assert_eq!(report.epochs.last().unwrap().val_accuracy, 1.0);
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let cfg = TrainConfig { epochs: 2, ..small_config() };
        let (a, ra) = train(&toy_dataset(), &cfg).unwrap();
        let (b, rb) = train(&toy_dataset(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn target_accuracy_stops_early() {
        let cfg = TrainConfig { epochs: 20, target_accuracy: Some(1.0), ..small_config() };
        let (_, report) = train(&toy_dataset(), &cfg).unwrap();
        assert!(report.epochs.len() < 20);
    }

    #[test]
    fn stepped_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 1e-3);
        assert_eq!(cfg.learning_rate_at(9), 1e-3);
        assert_eq!(cfg.learning_rate_at(10), 5e-4);
        assert_eq!(cfg.learning_rate_at(25), 2.5e-4);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = ModelConfig { hidden: 2, decoder: vec![], outputs: 1, input: 1, layers: 1, ..ModelConfig::default() };
        let mut p = Parameters::zeros(&cfg);
        let mut g = Parameters::zeros(&cfg);
        g.dense[0].b[0] = 3.0;
        let mut adam = Adam::new(&cfg, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &g, 0.1);
        assert!((p.dense[0].b[0] + 0.1).abs() < 1e-8);
        assert_eq!(p.dense[0].w[[0, 0]], 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig { learning_rate: f64::MAX, epochs: 3, ..small_config() };
        match train(&toy_dataset(), &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r)),
        }
    }
}
