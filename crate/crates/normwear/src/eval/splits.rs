//! Subject-stratified splits, partial-shot subsampling, and subject-level
//! k-fold assignment. All functions operate on aligned label/subject
//! slices and return segment indices.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Majority label per subject, subjects in first-appearance order.
fn subjects_by_class(labels: &[String], subjects: &[String]) -> Vec<(String, String)> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (l, s) in labels.iter().zip(subjects) {
        if !counts.contains_key(s) {
            order.push(s.clone());
        }
        *counts
            .entry(s.clone())
            .or_default()
            .entry(l.clone())
            .or_default() += 1;
    }
    order
        .into_iter()
        .map(|s| {
            let class = counts[&s]
                .iter()
                .max_by_key(|(_, &n)| n)
                .map(|(c, _)| c.clone())
                .unwrap();
            (s, class)
        })
        .collect()
}

pub struct SplitOutcome {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// True when subject-level stratification was impossible and the split
    /// fell back to segment level.
    pub segment_fallback: bool,
}

/// 80/20 subject-level split, class proportions preserved to within one
/// subject per class. No subject appears on both sides. Classes with fewer
/// than two subjects force a segment-level fallback (flagged).
pub fn split_stratified(
    labels: &[String],
    subjects: &[String],
    train_fraction: f64,
    rng: &mut Rng,
) -> Result<SplitOutcome> {
    if labels.len() != subjects.len() || labels.is_empty() {
        return Err(Error::DegenerateInput("empty or misaligned split input".into()));
    }
    if !(0.0..1.0).contains(&(1.0 - train_fraction)) || train_fraction <= 0.0 {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} out of range"
        )));
    }
    let subj_class = subjects_by_class(labels, subjects);
    let mut by_class: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (s, c) in &subj_class {
        by_class.entry(c.clone()).or_default().push(s.clone());
    }
    let degenerate = by_class.values().any(|subs| subs.len() < 2);
    if degenerate {
        // Segment-level stratified fallback.
        let mut by_class_seg: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            by_class_seg.entry(l).or_default().push(i);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for idxs in by_class_seg.values() {
            let mut shuffled: Vec<usize> =
                rng.permutation(idxs.len()).iter().map(|&p| idxs[p]).collect();
            let n_test = ((1.0 - train_fraction) * idxs.len() as f64).round() as usize;
            let n_test = n_test.clamp(usize::from(idxs.len() > 1), idxs.len() - 1);
            test.extend(shuffled.drain(..n_test));
            train.extend(shuffled);
        }
        train.sort_unstable();
        test.sort_unstable();
        return Ok(SplitOutcome {
            train,
            test,
            segment_fallback: true,
        });
    }

    let mut test_subjects: Vec<String> = Vec::new();
    for subs in by_class.values() {
        let shuffled: Vec<&String> = rng.permutation(subs.len()).iter().map(|&p| &subs[p]).collect();
        let n_test = ((1.0 - train_fraction) * subs.len() as f64)
            .round()
            .max(1.0) as usize;
        let n_test = n_test.min(subs.len() - 1);
        test_subjects.extend(shuffled[..n_test].iter().map(|s| s.to_string()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        if test_subjects.contains(s) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    Ok(SplitOutcome {
        train,
        test,
        segment_fallback: false,
    })
}

/// Per-class proportional subsample of `indices`, at least one per class.
pub fn subsample_partial(
    labels: &[String],
    indices: &[usize],
    fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::Config(format!("fraction {fraction} out of (0, 1]")));
    }
    let mut by_class: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(&labels[i]).or_default().push(i);
    }
    if by_class.is_empty() {
        return Err(Error::DegenerateInput("empty class in subsample".into()));
    }
    let mut out = Vec::new();
    for idxs in by_class.values() {
        let take = ((fraction * idxs.len() as f64).round() as usize).clamp(1, idxs.len());
        let picks = rng.sample_distinct(idxs.len(), take);
        out.extend(picks.into_iter().map(|p| idxs[p]));
    }
    out.sort_unstable();
    Ok(out)
}

/// Subject-level k folds, stratified by class: per-class subjects are
/// dealt round-robin so fold class balance stays within one subject of the
/// global proportions. Returns test-segment indices per fold.
pub fn kfold_subject(
    labels: &[String],
    subjects: &[String],
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let subj_class = subjects_by_class(labels, subjects);
    if subj_class.len() < k {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {k} folds",
            subj_class.len()
        )));
    }
    let mut by_class: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (s, c) in &subj_class {
        by_class.entry(c.clone()).or_default().push(s.clone());
    }
    let mut fold_of: BTreeMap<String, usize> = BTreeMap::new();
    let mut next = 0usize;
    for subs in by_class.values() {
        let shuffled: Vec<&String> = rng.permutation(subs.len()).iter().map(|&p| &subs[p]).collect();
        for s in shuffled {
            fold_of.insert(s.clone(), next % k);
            next += 1;
        }
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in subjects.iter().enumerate() {
        folds[fold_of[s]].push(i);
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n_subjects: usize, per_subject: usize) -> (Vec<String>, Vec<String>) {
        let mut labels = Vec::new();
        let mut subjects = Vec::new();
        for s in 0..n_subjects {
            for _ in 0..per_subject {
                labels.push(if s % 2 == 0 { "a" } else { "b" }.to_string());
                subjects.push(format!("s{s:02}"));
            }
        }
        (labels, subjects)
    }

    #[test]
    fn split_ten_subjects_eight_two() {
        let (labels, subjects) = balanced(10, 3);
        let out = split_stratified(&labels, &subjects, 0.8, &mut Rng::new(1)).unwrap();
        assert!(!out.segment_fallback);
        let test_subj: std::collections::BTreeSet<&String> =
            out.test.iter().map(|&i| &subjects[i]).collect();
        let train_subj: std::collections::BTreeSet<&String> =
            out.train.iter().map(|&i| &subjects[i]).collect();
        assert_eq!(test_subj.len(), 2);
        assert_eq!(train_subj.len(), 8);
        assert!(test_subj.is_disjoint(&train_subj));
        // One test subject per class.
        let test_classes: Vec<&String> = out.test.iter().map(|&i| &labels[i]).collect();
        assert!(test_classes.iter().any(|c| *c == "a"));
        assert!(test_classes.iter().any(|c| *c == "b"));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let (labels, subjects) = balanced(10, 2);
        let a = split_stratified(&labels, &subjects, 0.8, &mut Rng::new(7)).unwrap();
        let b = split_stratified(&labels, &subjects, 0.8, &mut Rng::new(7)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn split_no_subject_overlap_many_seeds() {
        let (labels, subjects) = balanced(9, 4);
        for seed in 0..20 {
            let out = split_stratified(&labels, &subjects, 0.8, &mut Rng::new(seed)).unwrap();
            let test_subj: std::collections::BTreeSet<&String> =
                out.test.iter().map(|&i| &subjects[i]).collect();
            for &i in &out.train {
                assert!(!test_subj.contains(&subjects[i]));
            }
            assert_eq!(out.train.len() + out.test.len(), labels.len());
        }
    }

    #[test]
    fn split_falls_back_when_class_has_one_subject() {
        let labels: Vec<String> = ["a", "a", "a", "a", "b", "b", "b", "b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        // Class b confined to a single subject.
        let subjects: Vec<String> = ["s0", "s1", "s2", "s3", "s4", "s4", "s4", "s4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let out = split_stratified(&labels, &subjects, 0.8, &mut Rng::new(3)).unwrap();
        assert!(out.segment_fallback);
        assert!(!out.test.is_empty());
    }

    #[test]
    fn subsample_identity_and_counts() {
        let (labels, _) = balanced(10, 10);
        let all: Vec<usize> = (0..100).collect();
        let full = subsample_partial(&labels, &all, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(full, all);
        let ten = subsample_partial(&labels, &all, 0.10, &mut Rng::new(2)).unwrap();
        assert_eq!(ten.len(), 10);
        let a_count = ten.iter().filter(|&&i| labels[i] == "a").count();
        assert_eq!(a_count, 5);
    }

    #[test]
    fn subsample_distribution_chi_square() {
        // 3 classes, 60/30/10: the proportional subsample never deviates
        // enough to reject equality at p = 0.01 (chi-square df 2 < 9.21).
        let mut labels = Vec::new();
        for i in 0..100 {
            labels.push(if i < 60 {
                "x"
            } else if i < 90 {
                "y"
            } else {
                "z"
            }
            .to_string());
        }
        let all: Vec<usize> = (0..100).collect();
        for seed in 0..100 {
            let sub = subsample_partial(&labels, &all, 0.10, &mut Rng::new(seed)).unwrap();
            let n = sub.len() as f64;
            let mut chi2 = 0.0;
            for (class, frac) in [("x", 0.6), ("y", 0.3), ("z", 0.1)] {
                let obs = sub.iter().filter(|&&i| labels[i] == class).count() as f64;
                let exp = n * frac;
                chi2 += (obs - exp) * (obs - exp) / exp;
            }
            assert!(chi2 < 9.21, "seed {seed}: chi2 {chi2}");
        }
    }

    #[test]
    fn kfold_ten_subjects_five_folds() {
        let (labels, subjects) = balanced(10, 3);
        let folds = kfold_subject(&labels, &subjects, 5, &mut Rng::new(5)).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen: std::collections::BTreeSet<String> = Default::default();
        for fold in &folds {
            let subj: std::collections::BTreeSet<String> =
                fold.iter().map(|&i| subjects[i].clone()).collect();
            assert_eq!(subj.len(), 2, "each fold tests exactly 2 subjects");
            // Class balance within one subject of global (1 per class here).
            for class in ["a", "b"] {
                let n = fold
                    .iter()
                    .map(|&i| &subjects[i])
                    .collect::<std::collections::BTreeSet<_>>()
                    .iter()
                    .filter(|s| {
                        let idx = subjects.iter().position(|x| &x == *s).unwrap();
                        labels[idx] == class
                    })
                    .count();
                assert!(n <= 2);
            }
            for s in subj {
                assert!(seen.insert(s), "subject in two folds");
            }
        }
        assert_eq!(seen.len(), 10);
        let total: usize = folds.iter().map(Vec::len).sum();
        assert_eq!(total, labels.len());
    }

    #[test]
    fn kfold_rejects_too_few_subjects() {
        let (labels, subjects) = balanced(4, 2);
        assert!(kfold_subject(&labels, &subjects, 5, &mut Rng::new(1)).is_err());
    }
}
