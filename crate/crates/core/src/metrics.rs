//! Binary classification metrics and multi-run aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Mode, PresenceMask};
use crate::protocol::{case_of, enumerate_cases};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("predictions and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("AUC needs both classes")]
    SingleClass,
    #[error("aggregation needs at least two runs, got {0}")]
    TooFewRuns(usize),
}

fn check(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64, MetricError> {
    check(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// F1 of the rumor class; 0 when precision and recall are both 0.
pub fn f1(preds: &[u8], labels: &[u8]) -> Result<f64, MetricError> {
    check(preds.len(), labels.len())?;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fne += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fne) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mann–Whitney statistic via mid-ranks; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetric {
    pub n: usize,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
    /// Accuracy per missing case, keyed by the `available,missing` label.
    pub per_case: BTreeMap<String, CaseMetric>,
    pub n: usize,
}

/// Metrics at threshold 0.5 on the rumor probability.
pub fn report(scores: &[f64], labels: &[u8], masks: &[PresenceMask], mode: Mode) -> Result<MetricReport, MetricError> {
    check(scores.len(), labels.len())?;
    check(masks.len(), labels.len())?;
    let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
    let cases = enumerate_cases(mode);
    let mut per_case = BTreeMap::new();
    for case in &cases {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| case_of(&masks[i]) == case.id).collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<u8> = idx.iter().map(|&i| preds[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        per_case.insert(
            case.label(mode),
            CaseMetric {
                n: idx.len(),
                acc: accuracy(&p, &l)?,
            },
        );
    }
    Ok(MetricReport {
        acc: accuracy(&preds, labels)?,
        f1: f1(&preds, labels)?,
        auc: auc(scores, labels)?,
        per_case,
        n: labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub acc: MeanStd,
    pub f1: MeanStd,
    pub auc: MeanStd,
}

pub fn aggregate_runs(reports: &[MetricReport]) -> Result<AggregateReport, MetricError> {
    if reports.len() < 2 {
        return Err(MetricError::TooFewRuns(reports.len()));
    }
    let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        runs: reports.len(),
        acc: col(|r| r.acc),
        f1: col(|r| r.f1),
        auc: col(|r| r.auc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct pair count.
    fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    credit += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        credit / pairs
    }

    fn simple(acc: f64) -> MetricReport {
        MetricReport {
            acc,
            f1: 0.5,
            auc: 0.7,
            per_case: BTreeMap::new(),
            n: 10,
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0], &[1, 0]), Err(MetricError::LengthMismatch(1, 2)));
        assert_eq!(accuracy(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn f1_examples() {
        assert!((f1(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(f1(&[0, 0, 0], &[1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.2], &[1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.7], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), Err(MetricError::SingleClass));
    }

    #[test]
    fn aggregate_examples() {
        let same = vec![simple(0.8); 5];
        let agg = aggregate_runs(&same).unwrap();
        assert_eq!(agg.acc, MeanStd { mean: 0.8, std: 0.0 });
        let agg = aggregate_runs(&[simple(0.8), simple(0.9)]).unwrap();
        assert!((agg.acc.mean - 0.85).abs() < 1e-15);
        assert!((agg.acc.std - 0.0707107).abs() < 1e-6);
        assert_eq!(aggregate_runs(&[simple(0.8)]), Err(MetricError::TooFewRuns(1)));
    }

    #[test]
    fn report_groups_cases() {
        let full = PresenceMask::full(Mode::Three);
        let no_image = PresenceMask::new(&[true, false, true]).unwrap();
        let r = report(&[0.9, 0.2, 0.8, 0.6], &[1, 0, 0, 1], &[full, full, no_image, no_image], Mode::Three).unwrap();
        assert_eq!(r.n, 4);
        assert_eq!(r.acc, 0.75);
        assert_eq!(r.per_case["T&I&C"], CaseMetric { n: 2, acc: 1.0 });
        assert_eq!(r.per_case["T&C,I"], CaseMetric { n: 2, acc: 0.5 });
        let json = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["acc", "auc", "f1", "n", "per_case"]);
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        prop::collection::vec((-3.0f64..3.0, 0u8..2), 2..40)
            .prop_map(|v| {
                let (mut s, mut l): (Vec<f64>, Vec<u8>) = v.into_iter().unzip();
                // coarse grid so ties occur
                s.iter_mut().for_each(|x| *x = (*x * 2.0).round() / 2.0);
                l[0] = 1;
                l[1] = 0;
                (s, l)
            })
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count((s, l) in scored()) {
            prop_assert!((auc(&s, &l).unwrap() - auc_pairs(&s, &l)).abs() < 1e-12);
        }

        #[test]
        fn auc_monotone_invariant((s, l) in scored(), a in 0.1f64..5.0, b in -5.0f64..5.0) {
            let t: Vec<f64> = s.iter().map(|&x| (a * x + b).exp()).collect();
            prop_assert!((auc(&s, &l).unwrap() - auc(&t, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn metrics_permutation_invariant(
            (s, l) in scored(),
            perm in any::<u64>(),
        ) {
            let preds: Vec<u8> = s.iter().map(|&x| u8::from(x >= 0.0)).collect();
            let mut idx: Vec<usize> = (0..l.len()).collect();
            let mut state = perm;
            for i in (1..idx.len()).rev() {
                state = crate::seed::splitmix64(state);
                idx.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let p2: Vec<u8> = idx.iter().map(|&i| preds[i]).collect();
            let l2: Vec<u8> = idx.iter().map(|&i| l[i]).collect();
            prop_assert_eq!(accuracy(&preds, &l).unwrap(), accuracy(&p2, &l2).unwrap());
            prop_assert_eq!(f1(&preds, &l).unwrap(), f1(&p2, &l2).unwrap());
        }
    }
}
