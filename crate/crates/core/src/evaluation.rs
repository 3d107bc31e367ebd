//! Tweet-level metrics and user-level aggregation.
//!
//! Metrics are reported on a 0-100 scale. Macro-F1 averages over the full
//! declared class set, so classes never predicted (or never observed) pull
//! the average down rather than silently vanishing.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("y_true has {0} items but y_pred has {1}")]
    LengthMismatch(usize, usize),
    #[error("label {0:?} not in the declared class set")]
    UnknownLabel(String),
    #[error("empty input")]
    EmptyInput,
}

type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// `confusion[true][pred]` over the declared class order.
    pub confusion: Vec<Vec<usize>>,
    pub classes: Vec<String>,
    pub n: usize,
}

/// Accuracy, per-class precision/recall/F1, and macro-F1 over `classes`.
/// Degenerate 0/0 ratios are defined as 0.
pub fn compute_metrics(y_true: &[String], y_pred: &[String], classes: &[String]) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (t, p) in y_true.iter().zip(y_pred.iter()) {
        let ti = *index
            .get(t.as_str())
            .ok_or_else(|| EvalError::UnknownLabel(t.clone()))?;
        let pi = *index
            .get(p.as_str())
            .ok_or_else(|| EvalError::UnknownLabel(p.clone()))?;
        confusion[ti][pi] += 1;
        if ti == pi {
            correct += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut per_class = BTreeMap::new();
    let mut f1_sum = 0.0;
    for (i, class) in classes.iter().enumerate() {
        let tp = confusion[i][i];
        let support: usize = confusion[i].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[i]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.insert(
            class.clone(),
            ClassMetrics {
                precision: 100.0 * precision,
                recall: 100.0 * recall,
                f1: 100.0 * f1,
                support,
            },
        );
    }
    Ok(Metrics {
        accuracy: 100.0 * correct as f64 / y_true.len() as f64,
        macro_f1: 100.0 * f1_sum / k as f64,
        per_class,
        confusion,
        classes: classes.to_vec(),
        n: y_true.len(),
    })
}

/// Most frequent label; ties resolve to the lexicographically smallest.
pub fn majority_baseline(labels: &[String]) -> Result<String> {
    if labels.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    // BTreeMap iterates lexicographically, so a strict `>` keeps the
    // smallest label on ties.
    let mut best = ("", 0usize);
    for (label, count) in counts {
        if count > best.1 {
            best = (label, count);
        }
    }
    Ok(best.0.to_string())
}

/// One tweet-level prediction attributed to a user.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TweetPrediction {
    pub label: String,
    /// Probability of the predicted class.
    pub confidence: f64,
}

/// Aggregate a user's first `n` tweet predictions into one label.
///
/// Tweets with confidence below `threshold` are excluded from the vote;
/// if every tweet falls below it, the vote falls back to all `n`. Ties
/// break by higher summed confidence, then by lexicographic label.
pub fn user_level_predict(
    predictions: &[TweetPrediction],
    n: usize,
    threshold: f64,
) -> Result<String> {
    if predictions.is_empty() || n == 0 {
        return Err(EvalError::EmptyInput);
    }
    let window = &predictions[..n.min(predictions.len())];
    let survivors: Vec<&TweetPrediction> = window
        .iter()
        .filter(|p| p.confidence >= threshold)
        .collect();
    let voters: Vec<&TweetPrediction> = if survivors.is_empty() {
        window.iter().collect()
    } else {
        survivors
    };
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for p in &voters {
        let e = tally.entry(p.label.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += p.confidence;
    }
    let mut best: Option<(&str, usize, f64)> = None;
    for (label, (count, conf)) in tally {
        let better = match best {
            None => true,
            Some((_, bc, bconf)) => count > bc || (count == bc && conf > bconf),
        };
        if better {
            best = Some((label, count, conf));
        }
    }
    Ok(best.expect("non-empty voters").0.to_string())
}

/// User-level accuracy over a set of users at one (n, threshold) setting.
pub fn user_level_accuracy(
    users: &[(String, Vec<TweetPrediction>)],
    truth: &BTreeMap<String, String>,
    n: usize,
    threshold: f64,
) -> Result<f64> {
    if users.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut correct = 0usize;
    for (user_id, preds) in users {
        let predicted = user_level_predict(preds, n, threshold)?;
        if truth.get(user_id) == Some(&predicted) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / users.len() as f64)
}

/// One row of the user-level sweep report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserEvalRow {
    pub n: usize,
    pub acc: f64,
    pub thresh: f64,
}

/// Render `metrics` as the standard JSON report document.
pub fn metrics_to_json(metrics: &BTreeMap<String, Metrics>) -> String {
    serde_json::to_string_pretty(metrics).expect("metrics serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(items: &[&str]) -> Vec<String> {
        items.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn worked_example() {
        let m = compute_metrics(
            &s(&["a", "a", "b", "c"]),
            &s(&["a", "b", "b", "b"]),
            &s(&["a", "b", "c"]),
        )
        .unwrap();
        assert!((m.accuracy - 50.0).abs() < 1e-9);
        assert!((m.macro_f1 - 38.888888888888886).abs() < 1e-9);
        assert_eq!(m.per_class["a"].support, 2);
        assert!((m.per_class["a"].precision - 100.0).abs() < 1e-9);
        assert!((m.per_class["b"].recall - 100.0).abs() < 1e-9);
        assert_eq!(m.per_class["c"].f1, 0.0);
    }

    #[test]
    fn perfect_and_confusion() {
        let m = compute_metrics(&s(&["x", "y"]), &s(&["x", "y"]), &s(&["x", "y"])).unwrap();
        assert_eq!(m.accuracy, 100.0);
        assert_eq!(m.macro_f1, 100.0);
        assert_eq!(m.confusion, vec![vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn never_predicted_class_counts_in_macro() {
        // class z appears in the class set but never in the data
        let m = compute_metrics(&s(&["x", "x"]), &s(&["x", "x"]), &s(&["x", "z"])).unwrap();
        assert_eq!(m.accuracy, 100.0);
        assert!((m.macro_f1 - 50.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            compute_metrics(&s(&["a"]), &s(&[]), &s(&["a"])),
            Err(EvalError::LengthMismatch(1, 0))
        ));
        assert!(matches!(
            compute_metrics(&s(&["q"]), &s(&["q"]), &s(&["a"])),
            Err(EvalError::UnknownLabel(_))
        ));
        assert!(matches!(
            compute_metrics(&[], &[], &s(&["a"])),
            Err(EvalError::EmptyInput)
        ));
        assert!(matches!(majority_baseline(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn majority_ties_lexicographic() {
        assert_eq!(majority_baseline(&s(&["b", "a", "b", "a"])).unwrap(), "a");
        assert_eq!(majority_baseline(&s(&["b", "a", "b"])).unwrap(), "b");
    }

    fn preds(items: &[(&str, f64)]) -> Vec<TweetPrediction> {
        items
            .iter()
            .map(|(l, c)| TweetPrediction { label: l.to_string(), confidence: *c })
            .collect()
    }

    #[test]
    fn user_vote_basic_majority() {
        let p = preds(&[("eg", 0.9), ("sa", 0.8), ("eg", 0.7)]);
        assert_eq!(user_level_predict(&p, 3, 0.0).unwrap(), "eg");
    }

    #[test]
    fn user_vote_threshold_filters() {
        // below-threshold votes drop out, flipping the winner
        let p = preds(&[("eg", 0.3), ("eg", 0.3), ("sa", 0.95)]);
        assert_eq!(user_level_predict(&p, 3, 0.0).unwrap(), "eg");
        assert_eq!(user_level_predict(&p, 3, 0.92).unwrap(), "sa");
    }

    #[test]
    fn user_vote_fallback_when_all_filtered() {
        let p = preds(&[("eg", 0.3), ("eg", 0.2), ("sa", 0.4)]);
        assert_eq!(user_level_predict(&p, 3, 0.99).unwrap(), "eg");
    }

    #[test]
    fn user_vote_first_n_only() {
        let p = preds(&[("sa", 0.9), ("eg", 0.9), ("eg", 0.9)]);
        assert_eq!(user_level_predict(&p, 1, 0.0).unwrap(), "sa");
        assert_eq!(user_level_predict(&p, 3, 0.0).unwrap(), "eg");
    }

    #[test]
    fn user_vote_tie_by_confidence_then_label() {
        let p = preds(&[("eg", 0.5), ("sa", 0.9)]);
        assert_eq!(user_level_predict(&p, 2, 0.0).unwrap(), "sa");
        let even = preds(&[("eg", 0.7), ("sa", 0.7)]);
        assert_eq!(user_level_predict(&even, 2, 0.0).unwrap(), "eg");
    }

    #[test]
    fn user_accuracy_perfect() {
        let users = vec![
            ("u1".to_string(), preds(&[("eg", 0.9), ("eg", 0.8)])),
            ("u2".to_string(), preds(&[("sa", 0.9), ("sa", 0.8)])),
        ];
        let truth: BTreeMap<String, String> = [
            ("u1".to_string(), "eg".to_string()),
            ("u2".to_string(), "sa".to_string()),
        ]
        .into();
        assert_eq!(user_level_accuracy(&users, &truth, 2, 0.0).unwrap(), 100.0);
    }
}
