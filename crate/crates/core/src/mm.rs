//! Modality-missing prompts.
//!
//! Each latent is extended with a learnable indicator vector chosen by its
//! modality and by whether it was observed or recovered, so downstream layers
//! can tell original features from reconstructions.

use ndarray::{concatenate, Array1, ArrayD, ArrayView1, Axis, IxDyn};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{ModalityKind, Mode};
use crate::ma::Origin;
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;

/// Handles of the `modality x {observed, recovered}` indicator vectors.
#[derive(Debug, Clone)]
pub struct MissPromptBank {
    prompts: Vec<[ParamId; 2]>,
    pub len: usize,
}

impl MissPromptBank {
    pub fn new<T: Scalar, R: Rng>(mode: Mode, len: usize, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let prompts = mode
            .modalities()
            .iter()
            .map(|k| {
                [Origin::Observed, Origin::Recovered].map(|o| {
                    let state = match o {
                        Origin::Observed => "observed",
                        Origin::Recovered => "recovered",
                    };
                    store.add(
                        format!("prompt.miss.{}.{state}", k.key()),
                        &[len],
                        Init::Normal { std: 0.02 },
                        rng,
                    )
                })
            })
            .collect();
        Self { prompts, len }
    }

    pub fn id(&self, kind: ModalityKind, origin: Origin) -> ParamId {
        self.prompts[kind.index()][origin.index()]
    }

    pub fn count(&self) -> usize {
        self.prompts.len() * 2
    }

    /// Single-latent tagging: `z ++ bank[kind][origin]`.
    pub fn tag<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z: ArrayView1<T>,
        kind: ModalityKind,
        origin: Origin,
        enabled: bool,
    ) -> Array1<T> {
        let suffix: Array1<T> = if enabled {
            store
                .get(self.id(kind, origin))
                .view()
                .into_dimensionality()
                .expect("prompt is 1-d")
                .to_owned()
        } else {
            Array1::zeros(self.len)
        };
        concatenate(Axis(0), &[z, suffix.view()]).expect("1-d concat")
    }

    /// Batched tagging. `observed` is the `[batch]` 0/1 column of the mask.
    pub fn tag_fwd<T: Scalar>(
        &self,
        tape: &Tape<T>,
        pv: &ParamVars,
        kind: ModalityKind,
        z: Var,
        observed: &Array1<T>,
        enabled: bool,
    ) -> Var {
        let rows = observed.len();
        let suffix = if enabled {
            let obs = tape.tile_rows(pv.get(self.id(kind, Origin::Observed)), rows);
            let rec = tape.tile_rows(pv.get(self.id(kind, Origin::Recovered)), rows);
            let m = row_broadcast(observed, self.len);
            let inv = m.mapv(|v| T::one() - v);
            let a = tape.mul_const(obs, std::sync::Arc::new(m));
            let b = tape.mul_const(rec, std::sync::Arc::new(inv));
            tape.add(a, b)
        } else {
            tape.constant(ArrayD::zeros(IxDyn(&[rows, self.len])))
        };
        tape.concat_last(&[z, suffix])
    }
}

/// `[batch]` column repeated across `width` columns.
pub fn row_broadcast<T: Scalar>(col: &Array1<T>, width: usize) -> ArrayD<T> {
    col.view()
        .insert_axis(Axis(1))
        .broadcast((col.len(), width))
        .expect("broadcast")
        .to_owned()
        .into_dyn()
}
