//! Random missing protocol.
//!
//! A global missing rate `R_m` on the tabulated grid selects the fraction of
//! posts losing exactly one modality (`R_o`) and exactly two (`R_t`). Group
//! sizes are rounded with largest remainders, the groups are drawn by a seeded
//! shuffle and the dropped subset is chosen uniformly among the applicable
//! cases.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, ModalityKind, Mode, PresenceMask};
use crate::seed;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("missing rate {rate} is not on the {mode:?}-modality grid")]
    RateOffGrid { rate: f64, mode: Mode },
    #[error("dataset is not fully observed")]
    NotFullyObserved,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One of the missing-modality cases, numbered from 1 in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingCase {
    pub id: usize,
    pub missing: Vec<ModalityKind>,
}

impl MissingCase {
    pub fn mask(&self, mode: Mode) -> PresenceMask {
        PresenceMask::full(mode)
            .without(&self.missing)
            .expect("enumerated cases keep one modality")
    }

    /// `(available, missing)` label in the `T&C,I` style.
    pub fn label(&self, mode: Mode) -> String {
        let avail: Vec<String> = mode
            .modalities()
            .iter()
            .filter(|k| !self.missing.contains(k))
            .map(|k| k.letter().to_string())
            .collect();
        let miss: Vec<String> = self.missing.iter().map(|k| k.letter().to_string()).collect();
        if miss.is_empty() {
            avail.join("&")
        } else {
            format!("{},{}", avail.join("&"), miss.join("&"))
        }
    }
}

/// All non-empty presence patterns: full first, then one missing (T, I, C
/// order), then two missing ordered by the single remaining modality.
pub fn enumerate_cases(mode: Mode) -> Vec<MissingCase> {
    let kinds = mode.modalities();
    let mut cases = vec![MissingCase {
        id: 1,
        missing: vec![],
    }];
    for &k in kinds {
        cases.push(MissingCase {
            id: cases.len() + 1,
            missing: vec![k],
        });
    }
    if kinds.len() == 3 {
        for &keep in kinds {
            cases.push(MissingCase {
                id: cases.len() + 1,
                missing: kinds.iter().copied().filter(|&k| k != keep).collect(),
            });
        }
    }
    cases
}

/// Case id of a mask under [`enumerate_cases`] numbering.
pub fn case_of(mask: &PresenceMask) -> usize {
    let missing: Vec<ModalityKind> = mask.missing().collect();
    enumerate_cases(mask.mode())
        .into_iter()
        .find(|c| c.missing == missing)
        .map(|c| c.id)
        .expect("every valid mask is an enumerated case")
}

// R_m grid index -> (R_o, R_t); three-modality rows in tenths.
const THREE_MODALITY_TABLE: [(u8, u8); 8] = [(0, 0), (1, 1), (2, 2), (3, 3), (2, 5), (1, 7), (0, 9), (0, 10)];
const TWO_MODALITY_TABLE: [u8; 6] = [0, 2, 4, 6, 8, 10];

fn grid_index(r_m: f64, rows: usize) -> Option<usize> {
    let scaled = r_m * 10.0;
    let k = scaled.round();
    if (scaled - k).abs() > 1e-9 || k < 0.0 || k as usize >= rows {
        return None;
    }
    Some(k as usize)
}

/// Fractions `(r_o, r_t)` of posts losing one and two modalities at `r_m`.
pub fn schedule_lookup(r_m: f64, mode: Mode) -> Result<(f64, f64), ProtocolError> {
    let off = || ProtocolError::RateOffGrid { rate: r_m, mode };
    match mode {
        Mode::Three => {
            let k = grid_index(r_m, THREE_MODALITY_TABLE.len()).ok_or_else(off)?;
            let (o, t) = THREE_MODALITY_TABLE[k];
            Ok((o as f64 / 10.0, t as f64 / 10.0))
        }
        Mode::Two => {
            let k = grid_index(r_m, TWO_MODALITY_TABLE.len()).ok_or_else(off)?;
            Ok((TWO_MODALITY_TABLE[k] as f64 / 10.0, 0.0))
        }
    }
}

/// Tabulated grid values of `r_m` for a mode.
pub fn grid(mode: Mode) -> Vec<f64> {
    let rows = match mode {
        Mode::Three => THREE_MODALITY_TABLE.len(),
        Mode::Two => TWO_MODALITY_TABLE.len(),
    };
    (0..rows).map(|k| k as f64 / 10.0).collect()
}

/// Splits `total` items across `fractions` (summing to 1) with
/// largest-remainder rounding; ties go to the earlier group.
pub fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Applies the random missing protocol to a fully observed dataset.
pub fn apply_missing(dataset: &Dataset, r_m: f64, seed: u64) -> Result<Dataset, ProtocolError> {
    let mode = dataset.mode();
    let (r_o, r_t) = schedule_lookup(r_m, mode)?;
    if !dataset.is_fully_observed() {
        return Err(ProtocolError::NotFullyObserved);
    }
    let n = dataset.len();
    let counts = largest_remainder(n, &[(1.0 - r_o - r_t).max(0.0), r_o, r_t]);
    let (n_one, n_two) = (counts[1], counts[2]);

    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let cases = enumerate_cases(mode);
    let one_missing: Vec<&MissingCase> = cases.iter().filter(|c| c.missing.len() == 1).collect();
    let two_missing: Vec<&MissingCase> = cases.iter().filter(|c| c.missing.len() == 2).collect();

    let mut drops: Vec<Option<&MissingCase>> = vec![None; n];
    for (pos, &idx) in order.iter().enumerate() {
        if pos < n_one {
            drops[idx] = Some(one_missing[rng.random_range(0..one_missing.len())]);
        } else if pos < n_one + n_two {
            drops[idx] = Some(two_missing[rng.random_range(0..two_missing.len())]);
        }
    }

    let records = dataset
        .records()
        .iter()
        .zip(&drops)
        .map(|(rec, drop)| match drop {
            Some(case) => rec.drop_modalities(&case.missing),
            None => Ok(rec.clone()),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::from_validated(dataset.dims, dataset.split, records))
}

/// `1 - (sum of available modalities) / (L * M)`.
pub fn empirical_missing_rate(dataset: &Dataset) -> Result<f64, ProtocolError> {
    if dataset.is_empty() {
        return Err(ProtocolError::EmptyDataset);
    }
    let m = dataset.mode().modality_count();
    let available: usize = dataset.records().iter().map(|r| r.mask.available()).sum();
    Ok(1.0 - available as f64 / (dataset.len() * m) as f64)
}

/// Number of records per case id.
pub fn case_histogram(dataset: &Dataset) -> Vec<(MissingCase, usize)> {
    let mut out: Vec<(MissingCase, usize)> =
        enumerate_cases(dataset.mode()).into_iter().map(|c| (c, 0)).collect();
    for rec in dataset.records() {
        out[case_of(&rec.mask) - 1].1 += 1;
    }
    out
}
