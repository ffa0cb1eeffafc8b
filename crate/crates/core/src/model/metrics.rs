use serde::{Deserialize, Serialize};

/// Classification metrics; `confusion[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Returns `None` when the matrix holds no samples.
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Option<Self> {
        let c = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return None;
        }
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let mut precision = 0.0;
        let mut recall = 0.0;
        let mut weighted_f1 = 0.0;
        for k in 0..c {
            let tp = confusion[k][k];
            let predicted: usize = (0..c).map(|i| confusion[i][k]).sum();
            let support: usize = confusion[k].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, support);
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            precision += p;
            recall += r;
            weighted_f1 += f1 * support as f64 / total as f64;
        }
        Some(Self {
            accuracy: ratio(correct, total),
            macro_precision: precision / c as f64,
            macro_recall: recall / c as f64,
            weighted_f1,
            confusion,
        })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Option<Self> {
        let mut confusion = vec![vec![0; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}
