//! Modality-aware recovery.
//!
//! Every observed modality is encoded into a diagonal Gaussian latent. A
//! missing modality `m` is recovered by decoding the mean of the observed
//! latents together with the learnable aware prompt of `m`. Observed
//! modalities are reconstructed the same way from the mean of the *other*
//! observed latents, which supplies the reconstruction loss.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::data::{ModalityKind, Mode, PresenceMask};
use crate::layers::Linear;
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MaError {
    #[error("{kind} input has width {found}, expected {expected}")]
    DimMismatch {
        kind: ModalityKind,
        expected: usize,
        found: usize,
    },
    #[error("no observed modality")]
    AllMissing,
    #[error("empty set of latents")]
    EmptySet,
}

/// Diagonal Gaussian with natural-log variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian<T> {
    pub mu: Array1<T>,
    pub logvar: Array1<T>,
}

impl<T: Scalar> LatentGaussian<T> {
    pub fn width(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Observed,
    Recovered,
}

impl Origin {
    pub fn index(self) -> usize {
        match self {
            Origin::Observed => 0,
            Origin::Recovered => 1,
        }
    }
}

/// One latent per modality after recovery.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle<T> {
    pub latents: Vec<Array1<T>>,
    pub origins: Vec<Origin>,
    /// Encoder Gaussians of the observed modalities.
    pub gaussians: Vec<Option<LatentGaussian<T>>>,
}

impl<T: Scalar> LatentBundle<T> {
    pub fn latent(&self, kind: ModalityKind) -> &Array1<T> {
        &self.latents[kind.index()]
    }

    pub fn origin(&self, kind: ModalityKind) -> Origin {
        self.origins[kind.index()]
    }
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize<T: Scalar>(g: &LatentGaussian<T>, noise: ArrayView1<T>) -> Array1<T> {
    let half = T::c(0.5);
    let mut z = g.mu.clone();
    ndarray::Zip::from(&mut z)
        .and(&g.logvar)
        .and(noise)
        .for_each(|z, &lv, &e| *z += (lv * half).exp() * e);
    z
}

/// `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn kl_divergence<T: Scalar>(g: &LatentGaussian<T>) -> T {
    let half = T::c(0.5);
    g.mu
        .iter()
        .zip(&g.logvar)
        .map(|(&m, &lv)| (lv.exp() + m * m - lv - T::one()) * half)
        .sum()
}

/// Mean KL over the observed modalities.
pub fn kl_loss<T: Scalar>(observed: &[LatentGaussian<T>]) -> Result<T, MaError> {
    if observed.is_empty() {
        return Err(MaError::EmptySet);
    }
    let total: T = observed.iter().map(kl_divergence).sum();
    Ok(total / T::c(observed.len() as f64))
}

/// Elementwise mean of the available latents.
pub fn homogeneous_feature<T: Scalar>(latents: &[ArrayView1<T>]) -> Result<Array1<T>, MaError> {
    let first = latents.first().ok_or(MaError::EmptySet)?;
    let mut acc = first.to_owned();
    for z in &latents[1..] {
        acc += z;
    }
    Ok(acc / T::c(latents.len() as f64))
}

/// Mean squared error between two latents.
pub fn mse<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    let n = T::c(a.len() as f64);
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n
}

/// Fills every missing modality with `decode(mean of observed latents, kind)`.
/// Observed latents pass through unchanged.
pub fn recover_with<T: Scalar>(
    mask: &PresenceMask,
    latents: &[Option<Array1<T>>],
    mut decode: impl FnMut(ArrayView1<T>, ModalityKind) -> Array1<T>,
) -> Result<LatentBundle<T>, MaError> {
    let observed: Vec<ArrayView1<T>> = mask
        .observed()
        .map(|k| latents[k.index()].as_ref().map(|z| z.view()).ok_or(MaError::AllMissing))
        .collect::<Result<_, _>>()?;
    if observed.is_empty() {
        return Err(MaError::AllMissing);
    }
    let mut source = None;
    let mut out = Vec::new();
    let mut origins = Vec::new();
    for &kind in mask.mode().modalities() {
        if mask.is_present(kind) {
            out.push(observed_latent(latents, kind)?);
            origins.push(Origin::Observed);
        } else {
            if source.is_none() {
                source = Some(homogeneous_feature(&observed)?);
            }
            out.push(decode(source.as_ref().expect("set").view(), kind));
            origins.push(Origin::Recovered);
        }
    }
    Ok(LatentBundle {
        latents: out,
        origins,
        gaussians: vec![None; mask.mode().modality_count()],
    })
}

fn observed_latent<T: Scalar>(latents: &[Option<Array1<T>>], kind: ModalityKind) -> Result<Array1<T>, MaError> {
    latents[kind.index()].clone().ok_or(MaError::AllMissing)
}

/// Mean over observed `x` with at least one other observed modality of
/// `MSE(decode(mean of the other observed latents, x), z_x)`; zero when no
/// term exists.
pub fn reconstruction_loss_with<T: Scalar>(
    mask: &PresenceMask,
    latents: &[Option<Array1<T>>],
    mut decode: impl FnMut(ArrayView1<T>, ModalityKind) -> Array1<T>,
) -> Result<T, MaError> {
    let observed: Vec<ModalityKind> = mask.observed().collect();
    if observed.len() < 2 {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for &x in &observed {
        let others: Vec<ArrayView1<T>> = observed
            .iter()
            .filter(|&&k| k != x)
            .map(|&k| latents[k.index()].as_ref().map(|z| z.view()).ok_or(MaError::AllMissing))
            .collect::<Result<_, _>>()?;
        let source = homogeneous_feature(&others)?;
        let target = observed_latent(latents, x)?;
        let zhat = decode(source.view(), x);
        total += mse(zhat.view(), target.view());
    }
    Ok(total / T::c(observed.len() as f64))
}

/// Two-layer variational encoder: `input -> hidden -> (mu, logvar)`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub hidden: Linear,
    pub mu: Linear,
    pub logvar: Linear,
    pub input: usize,
}

/// Two-layer decoder: `(latent ++ aware prompt) -> hidden -> latent`.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct MaModule {
    pub encoders: Vec<Encoder>,
    pub decoders: Vec<Decoder>,
    pub aware: Vec<ParamId>,
    pub latent_dim: usize,
    pub aware_len: usize,
    pub logvar_clamp: f64,
}

pub struct MaShape {
    pub mode: Mode,
    pub inputs: [usize; 3],
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub latent_dim: usize,
    pub aware_len: usize,
    pub logvar_clamp: f64,
}

impl MaModule {
    pub fn new<T: Scalar, R: Rng>(shape: &MaShape, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let d = shape.latent_dim;
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        let mut aware = Vec::new();
        for &kind in shape.mode.modalities() {
            let input = shape.inputs[kind.index()];
            let k = kind.key();
            encoders.push(Encoder {
                hidden: Linear::new(store, &format!("enc.{k}.hidden"), input, shape.enc_hidden, rng),
                mu: Linear::new(store, &format!("enc.{k}.mu"), shape.enc_hidden, d, rng),
                logvar: Linear::new(store, &format!("enc.{k}.logvar"), shape.enc_hidden, d, rng),
                input,
            });
        }
        for &kind in shape.mode.modalities() {
            let k = kind.key();
            decoders.push(Decoder {
                hidden: Linear::new(store, &format!("dec.{k}.hidden"), d + shape.aware_len, shape.dec_hidden, rng),
                out: Linear::new(store, &format!("dec.{k}.out"), shape.dec_hidden, d, rng),
            });
        }
        for &kind in shape.mode.modalities() {
            aware.push(store.add(
                format!("prompt.aware.{}", kind.key()),
                &[shape.aware_len],
                Init::Normal { std: 0.02 },
                rng,
            ));
        }
        Self {
            encoders,
            decoders,
            aware,
            latent_dim: d,
            aware_len: shape.aware_len,
            logvar_clamp: shape.logvar_clamp,
        }
    }

    /// `[batch, input] -> (mu, logvar)`, each `[batch, d]`.
    pub fn encode_fwd<T: Scalar>(&self, tape: &Tape<T>, pv: &ParamVars, kind: ModalityKind, x: Var) -> (Var, Var) {
        let enc = &self.encoders[kind.index()];
        let h = enc.hidden.forward(tape, pv, x);
        let h = tape.relu(h);
        let mu = enc.mu.forward(tape, pv, h);
        let lv = enc.logvar.forward(tape, pv, h);
        let c = T::c(self.logvar_clamp);
        (mu, tape.clamp(lv, -c, c))
    }

    /// `[batch, d] -> [batch, d]` through the decoder of `kind`. With
    /// `use_prompt == false` the aware prompt is replaced by a frozen zero
    /// vector of the same length.
    pub fn decode_fwd<T: Scalar>(
        &self,
        tape: &Tape<T>,
        pv: &ParamVars,
        kind: ModalityKind,
        source: Var,
        use_prompt: bool,
    ) -> Var {
        let rows = tape.shape(source)[0];
        let prompt = if use_prompt {
            tape.tile_rows(pv.get(self.aware[kind.index()]), rows)
        } else {
            tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[rows, self.aware_len])))
        };
        let input = tape.concat_last(&[source, prompt]);
        let dec = &self.decoders[kind.index()];
        let h = dec.hidden.forward(tape, pv, input);
        let h = tape.relu(h);
        dec.out.forward(tape, pv, h)
    }
}
