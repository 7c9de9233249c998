//! Mini-batch training with early stopping on validation accuracy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::{Dataset, Dims, FeatureRecord, Split};
use crate::model::{Batch, LossWeights, ModelConfig, ModelError, TriSPrompt};
use crate::objective::LossBreakdown;
use crate::optim::{AdamConfig, AdamState, OptimError};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("dataset widths {found:?} do not match the model ({expected:?})")]
    DimMismatch { expected: Dims, found: Dims },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let w = LossWeights::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 64,
            max_epochs: 100,
            patience: Some(10),
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    /// The model config with mode and input widths taken from `dims`.
    pub fn model_for(&self, dims: &Dims) -> ModelConfig {
        let mut m = self.model.clone();
        m.mode = dims.mode();
        m.inputs = [dims.text, dims.image, dims.comment.unwrap_or(0)];
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_acc: f64,
    pub val_loss: f64,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: TriSPrompt<f32>,
    pub adam: AdamState<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Accuracy and mean classification loss at evaluation time.
pub fn evaluate(model: &TriSPrompt<f32>, data: &Dataset, weights: LossWeights) -> (f64, f64) {
    let mut hits = 0usize;
    let mut ce = 0.0;
    for chunk in data.records().chunks(256) {
        let refs: Vec<&FeatureRecord> = chunk.iter().collect();
        let batch = Batch::from_records(&refs, &model.config);
        let (loss, probs) = model.evaluate(&batch, weights);
        ce += loss.cls * chunk.len() as f64;
        hits += probs
            .iter()
            .zip(chunk)
            .filter(|(&p, r)| u8::from(p >= 0.5) == r.label)
            .count();
    }
    let n = data.len() as f64;
    (hits as f64 / n, ce / n)
}

pub fn fit(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    if train.dims != val.dims {
        return Err(TrainError::DimMismatch {
            expected: train.dims,
            found: val.dims,
        });
    }
    let mc = cfg.model_for(&train.dims);
    let mut model: TriSPrompt<f32> = TriSPrompt::new(mc, seed::derive(cfg.seed, seed::STREAM_INIT))?;
    let mut adam = AdamState::new(&model.store);
    let adam_cfg = cfg.adam();
    let weights = cfg.weights();
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::STREAM_TRAIN));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let records = train.records();
    let batch_size = cfg.batch_size.max(1);

    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, TriSPrompt<f32>, AdamState<f32>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for (b, idx) in order.chunks(batch_size).enumerate() {
            let refs: Vec<&FeatureRecord> = idx.iter().map(|&i| &records[i]).collect();
            let batch = Batch::from_records(&refs, &model.config);
            let noise = batch.sample_noise(model.config.latent_dim, &mut rng);
            let tape = Tape::new();
            let pv = model.store.leaves(&tape);
            let fwd = model.forward(&tape, &pv, &batch, Some(&noise), weights);
            let loss = fwd.breakdown(&tape, weights);
            if !loss.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("cls {} kl {} rec {}", loss.cls, loss.kl, loss.rec),
                });
            }
            let mut grads = tape.backward(fwd.total);
            let grads = model.store.collect_grads(&pv, &mut grads);
            adam.step(&mut model.store, &grads, &adam_cfg)?;
            let rows = idx.len() as f64;
            sums[0] += loss.cls * rows;
            sums[1] += loss.kl * rows;
            sums[2] += loss.rec * rows;
        }
        if !model.store.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: order.len().div_ceil(batch_size) - 1,
                detail: "parameters became non-finite".into(),
            });
        }
        let n = train.len() as f64;
        let train_loss = crate::objective::total_loss(sums[0] / n, sums[1] / n, sums[2] / n, weights.lambda1, weights.lambda2);
        let (val_acc, val_loss) = evaluate(&model, val, weights);
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: 0,
                detail: "validation loss".into(),
            });
        }
        log::debug!("epoch {epoch}: loss {:.4} val acc {val_acc:.4}", train_loss.total);
        history.push(EpochRecord {
            epoch,
            train: train_loss,
            val_acc,
            val_loss,
        });
        let improved = match &best {
            None => true,
            Some((acc, ce, ..)) => val_acc > *acc || (val_acc == *acc && val_loss < *ce),
        };
        if improved {
            best = Some((val_acc, val_loss, epoch, model.clone(), adam.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let (_, _, best_epoch, model, adam) = best.ok_or(TrainError::EmptyDataset("epoch budget"))?;
    Ok(TrainOutcome {
        model,
        adam,
        best_epoch,
        history,
    })
}

/// Stratified `70/10/20` partition by label.
pub fn stratified_split(data: &Dataset, split_seed: u64) -> (Dataset, Dataset, Dataset) {
    let mut rng = seed::rng(split_seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.records()[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (n as f64 * 0.7).round() as usize;
        let n_val = (n as f64 * 0.1).round() as usize;
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    (
        data.select(&parts[0], Some(Split::Train)),
        data.select(&parts[1], Some(Split::Val)),
        data.select(&parts[2], Some(Split::Test)),
    )
}

/// Rumor probability for every record.
pub fn predict(model: &TriSPrompt<f32>, data: &Dataset) -> Vec<f64> {
    model.predict(data.records())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mode;
    use crate::synth::{generate, SynthConfig};

    fn tiny_config() -> TrainConfig {
        let mut model = ModelConfig::toy(Mode::Three);
        model.inputs = [768, 512, 768];
        TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            model,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_follow_the_paper() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.epsilon), (0.002, 0.99, 0.999, 1e-8));
        assert_eq!((c.batch_size, c.max_epochs, c.patience), (64, 100, Some(10)));
        assert_eq!((c.lambda1, c.lambda2), (0.1, 0.001));
        assert_eq!(c.model.levels, 3);
        assert_eq!(c.model.aware_len, 32);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let data = generate(&SynthConfig {
            n: 200,
            ..Default::default()
        });
        let (tr, va, te) = stratified_split(&data, 1);
        assert_eq!(tr.len() + va.len() + te.len(), 200);
        let mut ids: Vec<&str> = tr.records().iter().chain(va.records()).chain(te.records()).map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 200);
        let pos = |d: &Dataset| d.records().iter().filter(|r| r.label == 1).count() as f64 / d.len() as f64;
        let all = pos(&data);
        assert!((pos(&tr) - all).abs() < 0.02);
        assert!((pos(&te) - all).abs() < 0.03);
        assert_eq!(tr.split, Some(Split::Train));
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate(&SynthConfig {
            n: 48,
            ..Default::default()
        });
        let cfg = tiny_config();
        let a = fit(&data, &data, &cfg).unwrap();
        let b = fit(&data, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        for id in a.model.store.ids() {
            assert_eq!(a.model.store.get(id), b.model.store.get(id));
        }
    }

    #[test]
    fn huge_learning_rate_aborts() {
        let data = generate(&SynthConfig {
            n: 48,
            ..Default::default()
        });
        let cfg = TrainConfig {
            lr: 1e6,
            max_epochs: 20,
            ..tiny_config()
        };
        assert!(matches!(fit(&data, &data, &cfg), Err(TrainError::NonFiniteLoss { .. })));
    }

    #[test]
    fn empty_sets_rejected() {
        let data = generate(&SynthConfig {
            n: 8,
            ..Default::default()
        });
        let empty = data.select(&[], None);
        assert!(matches!(fit(&empty, &data, &tiny_config()), Err(TrainError::EmptyDataset(_))));
        assert!(matches!(fit(&data, &empty, &tiny_config()), Err(TrainError::EmptyDataset(_))));
    }
}
