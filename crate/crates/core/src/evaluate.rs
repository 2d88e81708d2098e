//! Probabilities, soft voting and the ACC / AUROC metrics.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::preprocess::CaseBundle;
use crate::training::{bundle_labels, Task, TrainingError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction sets to combine")]
    Empty,
    #[error("prediction sets cover different cases")]
    CaseMismatch,
    #[error("prediction sets disagree on the number of classes")]
    ClassCountMismatch,
    #[error("labels are required")]
    MissingLabels,
    #[error("both classes must be present to compute AUROC")]
    SingleClassOnly,
    #[error("invalid probabilities: {0}")]
    InvalidProbabilities(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-case class probabilities from one model (or an ensemble).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub model_id: String,
    pub case_ids: Vec<String>,
    pub probs: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl PredictionSet {
    pub fn num_classes(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.case_ids.len() != self.probs.len() {
            return Err(EvalError::InvalidProbabilities("one row per case required".into()));
        }
        let k = self.num_classes();
        for (id, row) in self.case_ids.iter().zip(&self.probs) {
            if row.len() != k {
                return Err(EvalError::ClassCountMismatch);
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(EvalError::InvalidProbabilities(format!("row for {id} is not a distribution")));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.probs.len() {
                return Err(EvalError::InvalidProbabilities("one label per case required".into()));
            }
        }
        Ok(())
    }
}

/// Unweighted mean of the members' probabilities.
pub fn soft_vote(sets: &[PredictionSet]) -> Result<PredictionSet, EvalError> {
    let first = sets.first().ok_or(EvalError::Empty)?;
    for s in sets {
        if s.case_ids != first.case_ids {
            return Err(EvalError::CaseMismatch);
        }
        if s.probs.iter().any(|r| r.len() != first.num_classes()) {
            return Err(EvalError::ClassCountMismatch);
        }
    }
    let probs = (0..first.probs.len())
        .map(|i| (0..first.num_classes()).map(|c| mean_of(sets.iter().map(|s| s.probs[i][c]))).collect())
        .collect();
    Ok(PredictionSet {
        model_id: format!("ensemble({})", sets.iter().map(|s| s.model_id.as_str()).collect::<Vec<_>>().join(",")),
        case_ids: first.case_ids.clone(),
        probs,
        labels: first.labels.clone(),
    })
}

/// Running mean over the values in ascending order. The result depends only
/// on the multiset of inputs, and `k` equal inputs give that value exactly.
fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let mut m = 0.0;
    for (i, x) in v.iter().enumerate() {
        m += (x - m) / (i + 1) as f64;
    }
    m
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &PredictionSet) -> Result<f64, EvalError> {
    let labels = preds.labels.as_ref().ok_or(EvalError::MissingLabels)?;
    if labels.is_empty() {
        return Err(EvalError::MissingLabels);
    }
    let correct = preds.probs.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Pair-count AUROC: `(#{pos > neg} + 0.5 #{pos == neg}) / (n_pos n_neg)`.
/// Sort-based, O(n log n).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::InvalidProbabilities("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassOnly);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the number of winning pairs, so ties add exactly 1.
    let mut twice = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&t| labels[t]).count() as u128;
        let neg = (j - i) as u128 - pos;
        twice += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUROC averaged over the classes that have both positives
/// and negatives.
pub fn auroc_ovr_macro(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    let k = probs.first().map_or(0, Vec::len);
    let per: Vec<f64> = (0..k)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
            let truth: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auroc(&scores, &truth).ok()
        })
        .collect();
    if per.is_empty() {
        return Err(EvalError::SingleClassOnly);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Inference-mode probabilities of one model over `bundles`.
pub fn predict(model: &Model, bundles: &[CaseBundle], model_id: &str, task: Option<Task>) -> Result<PredictionSet, EvalError> {
    let probs = bundles.par_iter().map(|b| model.predict_proba(b)).collect::<Result<Vec<_>, _>>()?;
    let labels = match task {
        Some(t) if bundles.iter().all(|b| b.stage.is_some()) => Some(bundle_labels(bundles, t)?),
        _ => None,
    };
    Ok(PredictionSet {
        model_id: model_id.to_string(),
        case_ids: bundles.iter().map(|b| b.case_id.clone()).collect(),
        probs,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    pub label: usize,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub n: usize,
    pub accuracy: f64,
    /// Binary tasks: AUROC of the positive class. Four-class: one-vs-rest
    /// macro average. `None` when only one class is present.
    pub auroc: Option<f64>,
    pub auroc_kind: String,
    pub ensemble_size: usize,
    pub per_case: Vec<CaseResult>,
}

/// Scores a soft-voted ensemble on labeled bundles.
pub fn evaluate_task(models: &[Model], bundles: &[CaseBundle], task: Task) -> Result<(EvalReport, PredictionSet), EvalError> {
    for (i, m) in models.iter().enumerate() {
        if m.config.num_classes != task.num_classes() {
            return Err(EvalError::IncompatibleCheckpoint(format!(
                "member {i} predicts {} classes, task {task} needs {}",
                m.config.num_classes,
                task.num_classes()
            )));
        }
    }
    let sets = models
        .iter()
        .enumerate()
        .map(|(i, m)| predict(m, bundles, &format!("member{i}"), Some(task)))
        .collect::<Result<Vec<_>, _>>()?;
    let votes = soft_vote(&sets)?;
    let labels = votes.labels.clone().ok_or(EvalError::MissingLabels)?;
    let acc = accuracy(&votes)?;
    let (auc, kind) = match task {
        Task::FourClass => (auroc_ovr_macro(&votes.probs, &labels).ok(), "one_vs_rest_macro"),
        _ => {
            let scores: Vec<f64> = votes.probs.iter().map(|r| r[1]).collect();
            let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            (auroc(&scores, &truth).ok(), "binary_positive_class")
        }
    };
    let per_case = votes
        .case_ids
        .iter()
        .zip(&votes.probs)
        .zip(&labels)
        .map(|((id, p), &l)| CaseResult {
            case_id: id.clone(),
            probabilities: p.clone(),
            predicted: argmax(p),
            label: l,
            correct: argmax(p) == l,
        })
        .collect();
    let report = EvalReport {
        task,
        n: bundles.len(),
        accuracy: acc,
        auroc: auc,
        auroc_kind: kind.to_string(),
        ensemble_size: models.len(),
        per_case,
    };
    Ok((report, votes))
}

/// CSV with header `case_id,p_0,...,p_{K-1}`; probabilities printed with
/// round-trip precision.
pub fn write_probabilities_csv(path: &Path, preds: &PredictionSet) -> Result<(), EvalError> {
    let mut out = String::from("case_id");
    for c in 0..preds.num_classes() {
        out.push_str(&format!(",p_{c}"));
    }
    out.push('\n');
    for (id, row) in preds.case_ids.iter().zip(&preds.probs) {
        out.push_str(id);
        for p in row {
            out.push_str(&format!(",{p:?}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &str, probs: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> PredictionSet {
        PredictionSet {
            model_id: id.into(),
            case_ids: (0..probs.len()).map(|i| format!("c{i}")).collect(),
            probs,
            labels,
        }
    }

    #[test]
    fn vote_arithmetic() {
        let a = set("a", vec![vec![0.8, 0.2]], None);
        let b = set("b", vec![vec![0.6, 0.4]], None);
        let v = soft_vote(&[a.clone(), b]).unwrap();
        assert!((v.probs[0][0] - 0.7).abs() < 1e-12 && (v.probs[0][1] - 0.3).abs() < 1e-12);
        assert_eq!(soft_vote(&[a.clone(), a.clone(), a.clone()]).unwrap().probs, a.probs);
    }

    #[test]
    fn vote_errors() {
        let a = set("a", vec![vec![0.8, 0.2]], None);
        let mut b = a.clone();
        b.case_ids[0] = "other".into();
        assert!(matches!(soft_vote(&[a.clone(), b]), Err(EvalError::CaseMismatch)));
        let c = set("c", vec![vec![0.5, 0.25, 0.25]], None);
        assert!(matches!(soft_vote(&[a, c]), Err(EvalError::ClassCountMismatch)));
        assert!(matches!(soft_vote(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn accuracy_rules() {
        let p = set("a", vec![vec![0.5, 0.5]], Some(vec![1]));
        assert_eq!(accuracy(&p).unwrap(), 0.0);
        let p = set(
            "a",
            vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]],
            Some(vec![0, 1, 1, 1]),
        );
        assert_eq!(accuracy(&p).unwrap(), 0.75);
        assert!(matches!(accuracy(&set("a", vec![vec![1.0, 0.0]], None)), Err(EvalError::MissingLabels)));
    }

    #[test]
    fn auroc_examples() {
        let l = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClassOnly)));
    }
}
