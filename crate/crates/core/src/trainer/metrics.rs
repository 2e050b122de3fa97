use std::collections::BTreeMap;

use serde::Serialize;

/// Window-level classification quality.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    #[serde(rename = "acc")]
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

/// Per-class F1 from a confusion matrix; a class with no predictions or
/// no instances scores 0.
pub fn per_class_f1(confusion: &[Vec<usize>]) -> Vec<f64> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let actual: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            if actual == 0 || predicted == 0 {
                return 0.0;
            }
            let (p, r) = (tp / predicted as f64, tp / actual as f64);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect()
}

pub fn evaluate_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Evaluation {
    assert_eq!(truth.len(), predicted.len(), "prediction count mismatch");
    let confusion = confusion_matrix(truth, predicted, classes);
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };
    let f1 = per_class_f1(&confusion);
    let macro_f1 = if classes == 0 {
        0.0
    } else {
        f1.iter().sum::<f64>() / classes as f64
    };
    Evaluation {
        accuracy,
        macro_f1,
        confusion,
    }
}

/// Majority vote of window predictions per clip (ties to the lower class).
/// Returns (truth, prediction) per clip in clip-id order.
pub fn clip_votes(
    clip_ids: &[usize],
    truth: &[usize],
    predicted: &[usize],
    classes: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut tallies: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
    for ((&clip, &t), &p) in clip_ids.iter().zip(truth).zip(predicted) {
        let entry = tallies.entry(clip).or_insert_with(|| (t, vec![0; classes]));
        entry.1[p] += 1;
    }
    tallies
        .into_values()
        .map(|(t, votes)| {
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            (t, best)
        })
        .unzip()
}
