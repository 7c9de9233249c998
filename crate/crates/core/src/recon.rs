//! Cross-modal reconstruction quality in latent space.

use ndarray::{Array1, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{ModelError, TriSPrompt};
use crate::protocol::enumerate_cases;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("reconstruction evaluation needs a fully observed dataset")]
    NotFullyObserved,
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseCosine {
    /// `available,missing` label, e.g. `T&I,C`.
    pub case: String,
    /// Number of (record, missing modality) pairs averaged.
    pub n: usize,
    pub recon: f64,
    pub random: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub cases: Vec<CaseCosine>,
}

impl ReconReport {
    pub fn case(&self, label: &str) -> Option<&CaseCosine> {
        self.cases.iter().find(|c| c.case == label)
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// For every partial case, hides the missing modalities of each record,
/// recovers them from the encoder means of the rest and compares against the
/// encoder mean of the hidden modality. The baseline draws seeded
/// standard-normal vectors in place of the reconstruction.
pub fn recon_cosine_eval<T: Scalar>(model: &TriSPrompt<T>, data: &Dataset, seed: u64) -> Result<ReconReport, ReconError> {
    if data.is_empty() {
        return Err(ReconError::Empty);
    }
    if !data.is_fully_observed() {
        return Err(ReconError::NotFullyObserved);
    }
    let mode = model.mode();
    let d = model.config.latent_dim;
    let truth: Vec<Vec<Option<Array1<T>>>> = data
        .records()
        .iter()
        .map(|r| {
            model
                .latents(r)
                .map(|b| b.gaussians.into_iter().map(|g| g.map(|g| g.mu)).collect())
        })
        .collect::<Result<_, _>>()?;

    let mut rng = seed::rng(seed::derive(seed, seed::STREAM_RECON));
    let mut cases = Vec::new();
    for case in enumerate_cases(mode).into_iter().filter(|c| !c.missing.is_empty()) {
        let mask = case.mask(mode);
        let (mut recon, mut random, mut n) = (0.0, 0.0, 0usize);
        for gt in &truth {
            let observed: Vec<Option<Array1<T>>> = mode
                .modalities()
                .iter()
                .map(|&k| if mask.is_present(k) { gt[k.index()].clone() } else { None })
                .collect();
            let bundle = model.recover(&mask, &observed)?;
            for &kind in &case.missing {
                let target = gt[kind.index()].as_ref().expect("fully observed");
                recon += cosine(bundle.latent(kind).view(), target.view());
                let noise: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
                let target64 = target.mapv(|v| v.to_f64_lossy());
                random += cosine(noise.view(), target64.view());
                n += 1;
            }
        }
        cases.push(CaseCosine {
            case: case.label(mode),
            n,
            recon: recon / n as f64,
            random: random / n as f64,
        });
    }
    Ok(ReconReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ModalityKind, Mode};
    use crate::model::ModelConfig;
    use crate::protocol::apply_missing;
    use crate::synth::{generate, SynthConfig};
    use ndarray::array;

    fn missing_of(label: &str) -> Vec<ModalityKind> {
        let Some((_, miss)) = label.split_once(',') else {
            return Vec::new();
        };
        ModalityKind::ALL
            .into_iter()
            .filter(|k| miss.contains(k.letter()))
            .collect()
    }

    fn toy_model() -> TriSPrompt<f64> {
        let mut c = ModelConfig::toy(Mode::Three);
        c.inputs = [768, 512, 768];
        TriSPrompt::new(c, 5).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = array![1.0, 2.0, -1.0];
        assert!((cosine(a.view(), a.view()) - 1.0).abs() < 1e-15);
        assert!((cosine(a.view(), (-&a).view()) + 1.0).abs() < 1e-15);
        assert_eq!(cosine(array![1.0, 0.0].view(), array![0.0, 3.0].view()), 0.0);
        assert_eq!(cosine(array![0.0, 0.0].view(), array![1.0, 3.0].view()), 0.0);
    }

    #[test]
    fn six_cases_with_bounded_cosines() {
        let data = generate(&SynthConfig {
            n: 20,
            ..Default::default()
        });
        let report = recon_cosine_eval(&toy_model(), &data, 0).unwrap();
        let labels: Vec<&str> = report.cases.iter().map(|c| c.case.as_str()).collect();
        assert_eq!(labels, ["I&C,T", "T&C,I", "T&I,C", "T,I&C", "I,T&C", "C,T&I"]);
        for c in &report.cases {
            assert!(c.recon.abs() <= 1.0 && c.random.abs() <= 1.0);
            assert_eq!(c.n, 20 * missing_of(&c.case).len());
        }
        assert_eq!(report, recon_cosine_eval(&toy_model(), &data, 0).unwrap());
    }

    #[test]
    fn random_baseline_concentrates_near_zero() {
        let data = generate(&SynthConfig {
            n: 1000,
            ..Default::default()
        });
        let mut c = ModelConfig::toy(Mode::Three);
        c.inputs = [768, 512, 768];
        c.latent_dim = 240;
        let model: TriSPrompt<f32> = TriSPrompt::new(c, 5).unwrap();
        let report = recon_cosine_eval(&model, &data, 1).unwrap();
        for case in &report.cases {
            assert!(case.random.abs() <= 0.05, "{}: {}", case.case, case.random);
        }
    }

    #[test]
    fn masked_data_rejected() {
        let data = generate(&SynthConfig {
            n: 20,
            ..Default::default()
        });
        let masked = apply_missing(&data, 0.5, 1).unwrap();
        assert!(matches!(recon_cosine_eval(&toy_model(), &masked, 0), Err(ReconError::NotFullyObserved)));
    }
}
