//! Pixel confusion counts (changed is the positive class) and the five
//! indicators derived from them. Counts are aggregated over a whole split
//! before any ratio is taken.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Add the per-pixel outcomes of one prediction to `counts`.
pub fn accumulate(pred: &BinaryMask, gt: &BinaryMask, counts: ConfusionCounts) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut c = counts;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
    pub iou: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "split,precision,recall,f1,oa,iou";

    pub fn csv_row(&self, split: &str) -> String {
        format!(
            "{split},{},{},{},{},{}",
            self.precision, self.recall, self.f1, self.oa, self.iou
        )
    }

    pub fn all_in_unit_range(&self) -> bool {
        [self.precision, self.recall, self.f1, self.oa, self.iou]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }
}

/// `num / den`, with 0/0 read as 1 when no positives were predicted or present.
fn ratio(num: u64, den: u64, empty_agreement: bool) -> f64 {
    if den == 0 {
        if empty_agreement {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn finalize(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyCounts);
    }
    let empty = c.tp == 0 && c.fp == 0 && c.fn_ == 0;
    Ok(Metrics {
        precision: ratio(c.tp, c.tp + c.fp, empty),
        recall: ratio(c.tp, c.tp + c.fn_, empty),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, empty),
        oa: ratio(c.tp + c.tn, total, empty),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, empty),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn accumulate_examples() {
        let pred = BinaryMask::from_vec(2, 2, vec![1, 1, 0, 0]).unwrap();
        let gt = BinaryMask::from_vec(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(accumulate(&pred, &gt, Default::default()).unwrap(), counts(1, 1, 0, 2));
        let c = accumulate(&BinaryMask::ones(2, 2), &BinaryMask::zeros(2, 2), Default::default()).unwrap();
        assert_eq!(c.fp, 4);
        assert!(accumulate(&pred, &BinaryMask::zeros(2, 3), Default::default()).is_err());
    }

    #[test]
    fn finalize_examples() {
        let m = finalize(&counts(1, 1, 0, 2)).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.oa, 0.75);
        assert_eq!(m.iou, 0.5);
        let empty = finalize(&counts(0, 0, 0, 16)).unwrap();
        assert_eq!(
            [empty.precision, empty.recall, empty.f1, empty.oa, empty.iou],
            [1.0; 5]
        );
        assert!(matches!(finalize(&counts(0, 0, 0, 0)), Err(Error::EmptyCounts)));
        let miss = finalize(&counts(0, 0, 5, 5)).unwrap();
        assert_eq!(miss.precision, 0.0);
        assert_eq!(miss.recall, 0.0);
    }

    #[test]
    fn json_uses_fn_key() {
        let s = serde_json::to_string(&counts(1, 2, 3, 4)).unwrap();
        assert_eq!(s, r#"{"tp":1,"fp":2,"fn":3,"tn":4}"#);
    }
}
