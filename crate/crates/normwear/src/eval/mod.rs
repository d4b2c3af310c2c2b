//! Linear-probing evaluation harness: frozen-feature extraction, subject-
//! stratified splits, deterministic solvers, and the metric bundle.

pub mod metrics;
pub mod solvers;
pub mod splits;

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{encode_segment, Model};
use crate::msitf::{column_indices, embed_sample, MsitfModel};
use crate::rng::Rng;
use crate::scalogram::tokenize;
use crate::signal::{Dataset, Label, TaskKind};
use crate::tensor::Tensor;

pub use metrics::{auc_pr, auc_roc, permutation_test, relative_accuracy, BinaryCounts};
pub use solvers::{logistic_newton_cg, ridge_cholesky, ridge_predict, LogisticFit};
pub use splits::{kfold_subject, split_stratified, subsample_partial, SplitOutcome};

/// Frozen features with aligned targets and subject ids.
pub struct FeatureMatrix {
    pub x: Tensor<f64>,
    pub labels: Vec<String>,
    pub numeric_targets: Vec<f64>,
    pub subjects: Vec<String>,
    pub task_kind: TaskKind,
}

impl FeatureMatrix {
    pub fn class_names(&self) -> Vec<String> {
        let mut names = self.labels.clone();
        names.sort();
        names.dedup();
        names
    }
}

/// Which frozen representation the probe consumes.
pub enum FeatureSource<'a> {
    /// Concatenated per-channel [CLS] vectors (C*E features).
    ClsConcat,
    /// Aligned temporal-fusion vector under the given query text.
    Msitf {
        msitf: &'a MsitfModel<f32>,
        query: Vec<f64>,
    },
}

/// Run the frozen backbone over every segment of a canonical dataset.
pub fn extract_features(
    model: &Model<f32>,
    dataset: &Dataset,
    source: &FeatureSource,
) -> Result<FeatureMatrix> {
    if dataset.segments.is_empty() {
        return Err(Error::DegenerateInput("empty dataset".into()));
    }
    let rows: Vec<Result<Vec<f64>>> = dataset
        .segments
        .par_iter()
        .map(|seg| {
            let stacks = tokenize(seg)?;
            let state = encode_segment(model, &stacks)?;
            let feat: Vec<f64> = match source {
                FeatureSource::ClsConcat => {
                    state.cls_concat().iter().map(|&v| v as f64).collect()
                }
                FeatureSource::Msitf { msitf, query } => {
                    let h = Arc::new(state.patch_matrix());
                    let cols = column_indices(
                        state.channels(),
                        model.cfg.grid_rows(),
                        model.cfg.grid_cols(),
                    );
                    embed_sample(msitf, &h, &cols, query)?
                        .iter()
                        .map(|&v| v as f64)
                        .collect()
                }
            };
            Ok(feat)
        })
        .collect();
    let mut data = Vec::new();
    let mut width = 0;
    for row in rows {
        let row = row?;
        width = row.len();
        data.extend(row);
    }
    let x = Tensor::from_vec(dataset.segments.len(), width, data);
    x.check_finite("probe features")?;
    let mut labels = Vec::new();
    let mut numeric = Vec::new();
    let mut subjects = Vec::new();
    for seg in &dataset.segments {
        match &seg.label {
            Some(Label::Class(c)) => {
                labels.push(c.clone());
                numeric.push(f64::NAN);
            }
            Some(Label::Value(v)) => {
                labels.push(format!("{v}"));
                numeric.push(*v);
            }
            None => {
                return Err(Error::DegenerateInput(
                    "probing requires labeled segments".into(),
                ))
            }
        }
        subjects.push(seg.subject_id.clone());
    }
    Ok(FeatureMatrix {
        x,
        labels,
        numeric_targets: numeric,
        subjects,
        task_kind: dataset.task_kind,
    })
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metric bundle for one probing run. All metrics lie in [0, 1].
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct ProbeReport {
    pub task: String,
    pub n_train: usize,
    pub n_test: usize,
    pub solver_converged: bool,
    pub segment_fallback: bool,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub relative_accuracy: Option<f64>,
    pub per_class: Vec<(String, ClassMetrics)>,
}

impl ProbeReport {
    /// Flat key-value JSON document.
    pub fn to_flat_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        {
            let mut num = |k: &str, v: Option<f64>| {
                if let Some(v) = v {
                    map.insert(k.to_string(), serde_json::json!(v));
                }
            };
            num("auc_roc", self.auc_roc);
            num("auc_pr", self.auc_pr);
            num("accuracy", self.accuracy);
            num("precision", self.precision);
            num("recall", self.recall);
            num("f1", self.f1);
            num("relative_accuracy", self.relative_accuracy);
        }
        map.insert("task".into(), serde_json::json!(self.task));
        map.insert("n_train".into(), serde_json::json!(self.n_train));
        map.insert("n_test".into(), serde_json::json!(self.n_test));
        map.insert(
            "solver_converged".into(),
            serde_json::json!(self.solver_converged),
        );
        map.insert(
            "segment_fallback".into(),
            serde_json::json!(self.segment_fallback),
        );
        for (name, m) in &self.per_class {
            map.insert(format!("class_{name}_precision"), serde_json::json!(m.precision));
            map.insert(format!("class_{name}_recall"), serde_json::json!(m.recall));
            map.insert(format!("class_{name}_f1"), serde_json::json!(m.f1));
        }
        serde_json::Value::Object(map)
    }
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    /// Stratified subsample of the training split (partial-shot).
    pub partial: Option<f64>,
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_fraction: 0.8,
            partial: None,
            l2: 1.0,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

fn gather_rows(x: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let mut out = Tensor::zeros(idx.len(), x.cols);
    for (j, &i) in idx.iter().enumerate() {
        out.row_mut(j).copy_from_slice(x.row(i));
    }
    out
}

/// Fit and score on given train/test index sets.
fn probe_indices(
    features: &FeatureMatrix,
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let x_train = gather_rows(&features.x, train_idx);
    let x_test = gather_rows(&features.x, test_idx);
    let mut report = ProbeReport {
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        solver_converged: true,
        ..ProbeReport::default()
    };
    match features.task_kind {
        TaskKind::Regression => {
            report.task = "regression".into();
            let y_train: Vec<f64> = train_idx
                .iter()
                .map(|&i| features.numeric_targets[i])
                .collect();
            let y_test: Vec<f64> = test_idx
                .iter()
                .map(|&i| features.numeric_targets[i])
                .collect();
            let w = ridge_cholesky(&x_train, &y_train, cfg.l2.max(1e-12))?;
            let pred: Vec<f64> = (0..x_test.rows)
                .map(|i| ridge_predict(&w, x_test.row(i)))
                .collect();
            report.relative_accuracy = Some(relative_accuracy(&pred, &y_test)?);
        }
        TaskKind::Classification => {
            report.task = "classification".into();
            let classes = features.class_names();
            if classes.len() < 2 {
                return Err(Error::UndefinedMetric(
                    "classification probe needs at least 2 classes".into(),
                ));
            }
            // One-vs-rest fits; binary tasks reduce to the positive class.
            let fit_classes: Vec<&String> = if classes.len() == 2 {
                vec![&classes[1]]
            } else {
                classes.iter().collect()
            };
            let mut score_cols: Vec<Vec<f64>> = Vec::new();
            for class in &fit_classes {
                let y: Vec<f64> = train_idx
                    .iter()
                    .map(|&i| f64::from(&features.labels[i] == *class))
                    .collect();
                let fit = logistic_newton_cg(&x_train, &y, cfg.l2, cfg.max_iter, cfg.tol)?;
                report.solver_converged &= fit.converged;
                score_cols.push((0..x_test.rows).map(|i| fit.prob(x_test.row(i))).collect());
            }
            let y_test_names: Vec<&String> =
                test_idx.iter().map(|&i| &features.labels[i]).collect();

            if classes.len() == 2 {
                let scores = &score_cols[0];
                let labels: Vec<u8> = y_test_names
                    .iter()
                    .map(|n| u8::from(*n == &classes[1]))
                    .collect();
                report.auc_roc = Some(auc_roc(scores, &labels)?);
                report.auc_pr = Some(auc_pr(scores, &labels)?);
                let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
                let acc = pred
                    .iter()
                    .zip(&labels)
                    .filter(|(p, y)| p == y)
                    .count() as f64
                    / labels.len() as f64;
                report.accuracy = Some(acc);
                let c = BinaryCounts::from_predictions(&pred, &labels);
                report.precision = Some(c.precision());
                report.recall = Some(c.recall());
                report.f1 = Some(c.f1());
                // Per-class view: negatives measured with flipped roles.
                let flipped: Vec<u8> = pred.iter().map(|&p| 1 - p).collect();
                let neg_labels: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
                let cn = BinaryCounts::from_predictions(&flipped, &neg_labels);
                report.per_class = vec![
                    (
                        classes[0].clone(),
                        ClassMetrics {
                            precision: cn.precision(),
                            recall: cn.recall(),
                            f1: cn.f1(),
                        },
                    ),
                    (
                        classes[1].clone(),
                        ClassMetrics {
                            precision: c.precision(),
                            recall: c.recall(),
                            f1: c.f1(),
                        },
                    ),
                ];
            } else {
                // Macro-averaged one-vs-rest.
                let mut aucs = Vec::new();
                let mut aps = Vec::new();
                let mut per_class = Vec::new();
                let pred_idx: Vec<usize> = (0..x_test.rows)
                    .map(|i| {
                        let mut best = 0;
                        for k in 1..score_cols.len() {
                            if score_cols[k][i] > score_cols[best][i] {
                                best = k;
                            }
                        }
                        best
                    })
                    .collect();
                for (k, class) in classes.iter().enumerate() {
                    let labels: Vec<u8> = y_test_names
                        .iter()
                        .map(|n| u8::from(*n == class))
                        .collect();
                    aucs.push(auc_roc(&score_cols[k], &labels)?);
                    aps.push(auc_pr(&score_cols[k], &labels)?);
                    let pred: Vec<u8> = pred_idx.iter().map(|&p| u8::from(p == k)).collect();
                    let c = BinaryCounts::from_predictions(&pred, &labels);
                    per_class.push((
                        class.clone(),
                        ClassMetrics {
                            precision: c.precision(),
                            recall: c.recall(),
                            f1: c.f1(),
                        },
                    ));
                }
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                report.auc_roc = Some(mean(&aucs));
                report.auc_pr = Some(mean(&aps));
                let correct = pred_idx
                    .iter()
                    .zip(&y_test_names)
                    .filter(|(&p, n)| &classes[p] == **n)
                    .count();
                report.accuracy = Some(correct as f64 / pred_idx.len() as f64);
                report.precision =
                    Some(mean(&per_class.iter().map(|c| c.1.precision).collect::<Vec<_>>()));
                report.recall =
                    Some(mean(&per_class.iter().map(|c| c.1.recall).collect::<Vec<_>>()));
                report.f1 = Some(mean(&per_class.iter().map(|c| c.1.f1).collect::<Vec<_>>()));
                report.per_class = per_class;
            }
        }
    }
    Ok(report)
}

/// Full probing protocol: 80/20 subject-stratified split, optional
/// partial-shot subsampling of the training side, solver fit, metrics.
pub fn probe(features: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let mut rng = Rng::derive(cfg.seed, &[0x70726f6265]);
    // Regression targets carry no classes; stratify on subjects alone.
    let strat_labels: Vec<String> = match features.task_kind {
        TaskKind::Classification => features.labels.clone(),
        TaskKind::Regression => vec!["_".to_string(); features.labels.len()],
    };
    let split = split_stratified(
        &strat_labels,
        &features.subjects,
        cfg.train_fraction,
        &mut rng,
    )?;
    let mut train_idx = split.train;
    if let Some(fraction) = cfg.partial {
        train_idx = subsample_partial(&strat_labels, &train_idx, fraction, &mut rng)?;
    }
    let mut report = probe_indices(features, &train_idx, &split.test, cfg)?;
    report.segment_fallback = split.segment_fallback;
    Ok(report)
}

/// Subject-stratified k-fold probing; metrics are averaged over folds.
pub fn probe_kfold(features: &FeatureMatrix, k: usize, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let mut rng = Rng::derive(cfg.seed, &[0x6b666f6c64]);
    let strat_labels: Vec<String> = match features.task_kind {
        TaskKind::Classification => features.labels.clone(),
        TaskKind::Regression => vec!["_".to_string(); features.labels.len()],
    };
    let folds = kfold_subject(&strat_labels, &features.subjects, k, &mut rng)?;
    let all: Vec<usize> = (0..features.labels.len()).collect();
    let mut reports = Vec::new();
    for fold in &folds {
        let test: Vec<usize> = fold.clone();
        let train: Vec<usize> = all.iter().copied().filter(|i| !test.contains(i)).collect();
        reports.push(probe_indices(features, &train, &test, cfg)?);
    }
    let mean_opt = |f: fn(&ProbeReport) -> Option<f64>| {
        let vals: Vec<f64> = reports.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(ProbeReport {
        task: reports[0].task.clone(),
        n_train: reports.iter().map(|r| r.n_train).sum::<usize>() / k,
        n_test: reports.iter().map(|r| r.n_test).sum::<usize>() / k,
        solver_converged: reports.iter().all(|r| r.solver_converged),
        segment_fallback: false,
        auc_roc: mean_opt(|r| r.auc_roc),
        auc_pr: mean_opt(|r| r.auc_pr),
        accuracy: mean_opt(|r| r.accuracy),
        precision: mean_opt(|r| r.precision),
        recall: mean_opt(|r| r.recall),
        f1: mean_opt(|r| r.f1),
        relative_accuracy: mean_opt(|r| r.relative_accuracy),
        per_class: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_features(n: usize, seed: u64) -> FeatureMatrix {
        // Two linearly separable blobs with subject structure.
        let mut rng = Rng::new(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut subjects = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { -2.0 } else { 2.0 };
            data.push(center + 0.5 * rng.normal());
            data.push(-center + 0.5 * rng.normal());
            data.push(rng.normal());
            labels.push(if class == 0 { "neg" } else { "pos" }.to_string());
            subjects.push(format!("s{:02}", i % 10));
        }
        FeatureMatrix {
            x: Tensor::from_vec(n, 3, data),
            labels,
            numeric_targets: vec![f64::NAN; n],
            subjects,
            task_kind: TaskKind::Classification,
        }
    }

    #[test]
    fn probe_separable_binary_task() {
        let features = synthetic_features(100, 1);
        let report = probe(&features, &ProbeConfig::default()).unwrap();
        assert!(report.auc_roc.unwrap() > 0.95);
        assert!(report.accuracy.unwrap() > 0.9);
        assert!(report.solver_converged);
        assert_eq!(report.per_class.len(), 2);
        let json = report.to_flat_json();
        assert!(json.get("auc_roc").is_some());
        assert!(json.get("class_pos_f1").is_some());
    }

    #[test]
    fn probe_is_deterministic() {
        let features = synthetic_features(60, 2);
        let a = probe(&features, &ProbeConfig::default()).unwrap();
        let b = probe(&features, &ProbeConfig::default()).unwrap();
        assert_eq!(a.auc_roc, b.auc_roc);
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.n_train, b.n_train);
    }

    #[test]
    fn probe_partial_shot_shrinks_training() {
        let features = synthetic_features(100, 3);
        let full = probe(&features, &ProbeConfig::default()).unwrap();
        let partial = probe(
            &features,
            &ProbeConfig {
                partial: Some(0.10),
                ..ProbeConfig::default()
            },
        )
        .unwrap();
        assert!(partial.n_train * 8 <= full.n_train);
        assert!(partial.auc_roc.unwrap() > 0.5);
    }

    #[test]
    fn probe_regression_path() {
        let mut rng = Rng::new(4);
        let n = 80;
        let mut data = Vec::new();
        let mut numeric = Vec::new();
        let mut subjects = Vec::new();
        for i in 0..n {
            let x0 = rng.normal();
            let x1 = rng.normal();
            data.push(x0);
            data.push(x1);
            numeric.push(3.0 * x0 - x1 + 0.05 * rng.normal());
            subjects.push(format!("s{:02}", i % 8));
        }
        let features = FeatureMatrix {
            x: Tensor::from_vec(n, 2, data),
            labels: numeric.iter().map(|v| format!("{v}")).collect(),
            numeric_targets: numeric,
            subjects,
            task_kind: TaskKind::Regression,
        };
        let report = probe(&features, &ProbeConfig::default()).unwrap();
        assert!(report.relative_accuracy.unwrap() > 0.9);
    }

    #[test]
    fn probe_multiclass_macro_metrics() {
        let mut rng = Rng::new(5);
        let n = 120;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut subjects = Vec::new();
        for i in 0..n {
            let class = i % 3;
            let (cx, cy) = [(2.0, 0.0), (-2.0, 2.0), (0.0, -2.0)][class];
            data.push(cx + 0.4 * rng.normal());
            data.push(cy + 0.4 * rng.normal());
            labels.push(format!("c{class}"));
            subjects.push(format!("s{:02}", i % 12));
        }
        let features = FeatureMatrix {
            x: Tensor::from_vec(n, 2, data),
            labels,
            numeric_targets: vec![f64::NAN; n],
            subjects,
            task_kind: TaskKind::Classification,
        };
        let report = probe(&features, &ProbeConfig::default()).unwrap();
        assert!(report.auc_roc.unwrap() > 0.95);
        assert_eq!(report.per_class.len(), 3);
        let kf = probe_kfold(&features, 4, &ProbeConfig::default()).unwrap();
        assert!(kf.auc_roc.unwrap() > 0.9);
    }
}
