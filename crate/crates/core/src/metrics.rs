//! Micro-averaged F1 with the TACRED treatment of the no-relation class.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("class {class} out of range for {num_classes} classes")]
    OutOfRange { class: usize, num_classes: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub counts: ClassCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub total: ClassCounts,
    pub per_class: Vec<ClassReport>,
    /// Class whose true positives were not counted, if any.
    pub excluded: Option<usize>,
    pub n: usize,
}

/// Scores `(gold, predicted)` pairs. With `excluded = Some(c)`, a correct
/// prediction of `c` is not a true positive, predicting `c` is not a false
/// positive and gold `c` is not a false negative; errors between `c` and
/// any other class still count against that other class.
pub fn evaluate(pairs: &[(usize, usize)], num_classes: usize, excluded: Option<usize>) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = vec![ClassCounts::default(); num_classes];
    for &(gold, pred) in pairs {
        for class in [gold, pred] {
            if class >= num_classes {
                return Err(EvalError::OutOfRange { class, num_classes });
            }
        }
        let scored = |c: usize| Some(c) != excluded;
        if gold == pred {
            if scored(gold) {
                counts[gold].tp += 1;
            }
        } else {
            if scored(pred) {
                counts[pred].fp += 1;
            }
            if scored(gold) {
                counts[gold].fn_ += 1;
            }
        }
    }
    let total = counts.iter().fold(ClassCounts::default(), |a, c| ClassCounts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let per_class = counts
        .iter()
        .enumerate()
        .map(|(class, c)| ClassReport { class, counts: *c, precision: c.precision(), recall: c.recall(), f1: c.f1() })
        .collect();
    Ok(EvalReport {
        micro_f1: total.f1(),
        micro_precision: total.precision(),
        micro_recall: total.recall(),
        total,
        per_class,
        excluded,
        n: pairs.len(),
    })
}
