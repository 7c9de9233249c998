//! Central-difference verification of the analytic gradients.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::{FeatureRecord, Mode, PresenceMask};
use crate::model::{Ablation, Batch, LossWeights, ModelConfig, TriSPrompt};
use crate::params::ParamStore;
use crate::protocol::enumerate_cases;
use crate::seed;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub mode: Mode,
    pub ablation: Ablation,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Rows per missing case.
    pub repeats: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Three,
            ablation: Ablation::Full,
            h: 1e-4,
            tolerance: 1e-4,
            seed: 0,
            repeats: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    /// `|a - n| / max(|a| + |n|, floor)` over the flattened tensor.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

// Groups whose gradient vanishes structurally (the attention key bias) are
// judged on absolute error below this norm.
const NORM_FLOOR: f64 = 1e-6;

/// A batch covering every missing case, with fixed reparameterization noise.
pub fn toy_batch(config: &ModelConfig, repeats: usize, seed: u64) -> (Batch<f64>, Vec<Array2<f64>>) {
    let mut rng = seed::rng(seed);
    let mut records = Vec::new();
    for r in 0..repeats {
        for case in enumerate_cases(config.mode) {
            let mask: PresenceMask = case.mask(config.mode);
            let mut feature = |kind: crate::data::ModalityKind| {
                mask.is_present(kind).then(|| {
                    (0..config.inputs[kind.index()])
                        .map(|_| rng.random_range(-1.0f32..1.0))
                        .collect::<Vec<f32>>()
                })
            };
            let text = feature(crate::data::ModalityKind::Text);
            let image = feature(crate::data::ModalityKind::Image);
            let comment = feature(crate::data::ModalityKind::Comment);
            let label = rng.random_range(0..2u8);
            records.push(FeatureRecord::new(format!("g{r}-{}", case.id), label, mask, text, image, comment));
        }
    }
    let refs: Vec<&FeatureRecord> = records.iter().collect();
    let batch = Batch::from_records(&refs, config);
    let noise = batch.sample_noise(config.latent_dim, &mut rng);
    (batch, noise)
}

/// Reverse-mode gradient of `scale * L_total`.
pub fn analytic_gradients(
    model: &TriSPrompt<f64>,
    batch: &Batch<f64>,
    noise: &[Array2<f64>],
    weights: LossWeights,
    scale: f64,
) -> ParamStore<f64> {
    let tape = Tape::new();
    let pv = model.store.leaves(&tape);
    let fwd = model.forward(&tape, &pv, batch, Some(noise), weights);
    let out = tape.scale(fwd.total, scale);
    let mut grads = tape.backward(out);
    model.store.collect_grads(&pv, &mut grads)
}

fn loss(model: &TriSPrompt<f64>, batch: &Batch<f64>, noise: &[Array2<f64>], weights: LossWeights) -> f64 {
    let tape = Tape::new();
    let pv = model.store.constants(&tape);
    let fwd = model.forward(&tape, &pv, batch, Some(noise), weights);
    tape.scalar(fwd.total)
}

/// Compares every analytic gradient entry against `(f(θ+h) − f(θ−h)) / 2h`.
pub fn grad_check(cfg: &GradcheckConfig) -> GradcheckReport {
    let mut mc = ModelConfig::toy(cfg.mode);
    mc.ablation = cfg.ablation;
    let mut model: TriSPrompt<f64> = TriSPrompt::new(mc, seed::derive(cfg.seed, seed::STREAM_INIT)).expect("toy config is valid");
    let (batch, noise) = toy_batch(&model.config, cfg.repeats, seed::derive(cfg.seed, seed::STREAM_TRAIN));
    let weights = LossWeights::default();
    let analytic = analytic_gradients(&model, &batch, &noise, weights, 1.0);

    let mut groups = Vec::new();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let a = analytic.get(id).clone();
        let mut numeric = a.clone();
        for idx in 0..a.len() {
            let orig = model.store.get(id).as_slice().expect("standard layout")[idx];
            model.store.get_mut(id).as_slice_mut().expect("standard layout")[idx] = orig + cfg.h;
            let plus = loss(&model, &batch, &noise, weights);
            model.store.get_mut(id).as_slice_mut().expect("standard layout")[idx] = orig - cfg.h;
            let minus = loss(&model, &batch, &noise, weights);
            model.store.get_mut(id).as_slice_mut().expect("standard layout")[idx] = orig;
            numeric.as_slice_mut().expect("standard layout")[idx] = (plus - minus) / (2.0 * cfg.h);
        }
        let diff = (&a - &numeric).mapv(|v| v * v).sum().sqrt();
        let an = a.mapv(|v| v * v).sum().sqrt();
        let nn = numeric.mapv(|v| v * v).sum().sqrt();
        groups.push(GroupError {
            name: model.store.name(id).to_string(),
            rel_error: diff / (an + nn).max(NORM_FLOOR),
            analytic_norm: an,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    GradcheckReport {
        groups,
        max_rel_error,
        tolerance: cfg.tolerance,
    }
}

/// Parameters whose gradient is identically zero on `batch`.
pub fn dead_parameters(model: &TriSPrompt<f64>, batch: &Batch<f64>, noise: &[Array2<f64>]) -> Vec<String> {
    let grads = analytic_gradients(model, batch, noise, LossWeights::default(), 1.0);
    grads
        .ids()
        .filter(|&id| grads.get(id).iter().all(|&g| g == 0.0))
        .map(|id| grads.name(id).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(ablation: Ablation) -> TriSPrompt<f64> {
        let mut c = ModelConfig::toy(Mode::Three);
        c.ablation = ablation;
        TriSPrompt::new(c, 9).unwrap()
    }

    #[test]
    fn scaling_the_loss_scales_gradients() {
        let model = toy_model(Ablation::Full);
        let (batch, noise) = toy_batch(&model.config, 1, 1);
        let g1 = analytic_gradients(&model, &batch, &noise, LossWeights::default(), 1.0);
        let g2 = analytic_gradients(&model, &batch, &noise, LossWeights::default(), 2.0);
        for id in g1.ids() {
            assert_eq!(&g1.get(id).mapv(|v| 2.0 * v), g2.get(id), "{}", g1.name(id));
        }
    }

    #[test]
    fn frozen_prompts_get_exactly_zero_gradient() {
        for ab in [Ablation::NoMa, Ablation::NoMm, Ablation::NoMam, Ablation::NoMv] {
            let model = toy_model(ab);
            let (batch, noise) = toy_batch(&model.config, 1, 2);
            let dead = dead_parameters(&model, &batch, &noise);
            let frozen: Vec<String> = model
                .store
                .names()
                .iter()
                .filter(|n| ab.frozen_prefixes().iter().any(|p| n.starts_with(p)))
                .cloned()
                .collect();
            assert!(!frozen.is_empty());
            assert_eq!(dead, frozen, "{ab}");
        }
    }

    #[test]
    fn no_dead_parameters_in_full_model() {
        let model = toy_model(Ablation::Full);
        let (batch, noise) = toy_batch(&model.config, 1, 3);
        assert_eq!(dead_parameters(&model, &batch, &noise), Vec::<String>::new());
    }

    #[test]
    fn two_modality_gradients_match() {
        let report = grad_check(&GradcheckConfig {
            mode: Mode::Two,
            ..Default::default()
        });
        assert!(report.passed(), "{:?}", report.worst());
    }
}
