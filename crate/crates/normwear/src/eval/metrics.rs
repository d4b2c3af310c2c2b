//! Classification and regression metrics plus the paired permutation test.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Rank-statistic AUC; tied scores contribute one half through average
/// ranks. Labels are 0/1 and both classes must be present.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::DegenerateInput("misaligned AUC inputs".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC requires both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tie groups (1-based ranks).
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    Ok((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Average precision (step-interpolated area under the PR curve).
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::UndefinedMetric(
            "average precision requires both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            let precision = tp as f64 / (k + 1) as f64;
            ap += precision / n_pos as f64;
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl BinaryCounts {
    pub fn from_predictions(pred: &[u8], labels: &[u8]) -> Self {
        let mut c = BinaryCounts::default();
        for (&p, &y) in pred.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                _ => c.fn_ += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Range-normalized complement of mean absolute error, clipped to [0, 1].
pub fn relative_accuracy(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::DegenerateInput("misaligned regression inputs".into()));
    }
    let lo = truth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::UndefinedMetric(
            "relative accuracy undefined for constant targets".into(),
        ));
    }
    let mae: f64 =
        pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64;
    Ok((1.0 - mae / (hi - lo)).clamp(0.0, 1.0))
}

/// One-sided paired permutation test for mean(a) > mean(b): sign-flip the
/// per-pair differences. p = (1 + #{permuted stat >= observed}) / (1 + n).
pub fn permutation_test(a: &[f64], b: &[f64], n_perm: usize, rng: &mut Rng) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DegenerateInput("misaligned permutation inputs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let mut at_least = 0usize;
    for _ in 0..n_perm {
        let mut stat = 0.0;
        for &d in &diffs {
            stat += if rng.below(2) == 1 { d } else { -d };
        }
        stat /= diffs.len() as f64;
        if stat >= observed {
            at_least += 1;
        }
    }
    Ok((1 + at_least) as f64 / (1 + n_perm) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_perfect_and_all_ties() {
        let labels = [0u8, 0, 1, 1];
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
        assert!(auc_roc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..30).map(|_| (rng.below(10)) as f64 / 10.0).collect();
            let labels: Vec<u8> = (0..30).map(|_| rng.below(2) as u8).collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            let fast = auc_roc(&scores, &labels).unwrap();
            // O(n^2) comparison count, ties worth one half.
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..30 {
                for j in 0..30 {
                    if labels[i] == 1 && labels[j] == 0 {
                        den += 1.0;
                        if scores[i] > scores[j] {
                            num += 1.0;
                        } else if scores[i] == scores[j] {
                            num += 0.5;
                        }
                    }
                }
            }
            assert!((fast - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = Rng::new(2);
        let scores: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let labels: Vec<u8> = (0..40).map(|_| rng.below(2) as u8).collect();
        let base = auc_roc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (0.3 * s).tanh() * 7.0 + 2.0).collect();
        assert!((auc_roc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn average_precision_known_case() {
        // Ranked: pos, neg, pos -> AP = (1/1 + 2/3) / 2.
        let scores = [0.9, 0.8, 0.7];
        let labels = [1u8, 0, 1];
        let ap = auc_pr(&scores, &labels).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn relative_accuracy_cases() {
        assert_eq!(
            relative_accuracy(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            1.0
        );
        // Shift by the full range: clipped to zero.
        assert_eq!(
            relative_accuracy(&[3.0, 4.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(),
            0.0
        );
        // Worked case: range 4, MAE 2/3 -> 1 - (2/3)/4 = 0.8333...
        let ra = relative_accuracy(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap();
        assert!((ra - 0.8333333333).abs() < 1e-9);
        assert!(relative_accuracy(&[1.0, 2.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn permutation_exchangeable_p_is_uniformish() {
        let mut rng = Rng::new(3);
        let mut mean_p = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let a: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
            mean_p += permutation_test(&a, &b, 200, &mut rng).unwrap();
        }
        mean_p /= trials as f64;
        assert!((mean_p - 0.5).abs() < 0.05, "mean p {mean_p}");
    }

    #[test]
    fn permutation_detects_separation() {
        let mut rng = Rng::new(4);
        let b: Vec<f64> = (0..40).map(|_| 0.01 * rng.normal()).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 10.0).collect();
        let p = permutation_test(&a, &b, 10_000, &mut rng).unwrap();
        assert!(p <= 0.001, "p = {p}");
    }

    #[test]
    fn permutation_matches_exhaustive_enumeration() {
        // n = 5: enumerate all 32 sign assignments exactly.
        let a = [1.0, 2.0, 0.5, 1.5, 0.2];
        let b = [0.8, 1.1, 0.9, 0.7, 0.4];
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let observed: f64 = diffs.iter().sum::<f64>() / 5.0;
        let mut at_least = 0;
        for mask in 0..32u32 {
            let stat: f64 = diffs
                .iter()
                .enumerate()
                .map(|(i, &d)| if mask >> i & 1 == 1 { d } else { -d })
                .sum::<f64>()
                / 5.0;
            if stat >= observed {
                at_least += 1;
            }
        }
        let exact = at_least as f64 / 32.0;
        // Monte-Carlo with many draws converges to the exact value.
        let mut rng = Rng::new(5);
        let p = permutation_test(&a, &b, 200_000, &mut rng).unwrap();
        assert!((p - exact).abs() < 0.01, "{p} vs exact {exact}");
    }
}
