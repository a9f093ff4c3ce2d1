//! Pixel-count F-measure evaluation. Counts are micro-aggregated: TP/FP/FN
//! pixels are pooled over the image set and the class set first, then
//! precision, recall, and F are computed from the pooled sums. Background
//! (class 0) is excluded from the "overall" row.

use crate::error::{Error, Result};
use crate::pipeline::{
    CLASS_INNER_MOUTH, CLASS_LEFT_EYE, CLASS_LEFT_EYEBROW, CLASS_LOWER_LIP, CLASS_NOSE,
    CLASS_RIGHT_EYE, CLASS_RIGHT_EYEBROW, CLASS_UPPER_LIP,
};
use crate::tensor::LabelMap;

/// Per-class pixel counts accumulated over an image set. Merging is
/// associative and commutative, so parallel accumulation with a final
/// merge gives identical results.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    num_classes: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            num_classes,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self, class: u8) -> (u64, u64, u64) {
        let c = class as usize;
        (self.tp[c], self.fp[c], self.fn_[c])
    }

    /// Add one image's pixel counts.
    pub fn accumulate(&mut self, predicted: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (predicted.height(), predicted.width()) != (truth.height(), truth.width()) {
            return Err(Error::Data(format!(
                "confusion: predicted {}x{} vs truth {}x{}",
                predicted.height(),
                predicted.width(),
                truth.height(),
                truth.width()
            )));
        }
        if predicted.num_classes() as usize > self.num_classes
            || truth.num_classes() as usize > self.num_classes
        {
            return Err(Error::Data(format!(
                "confusion: palette {}/{} exceeds {} classes",
                predicted.num_classes(),
                truth.num_classes(),
                self.num_classes
            )));
        }
        for (&p, &t) in predicted.data().iter().zip(truth.data()) {
            if p == t {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[t as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        debug_assert_eq!(self.num_classes, other.num_classes);
        for c in 0..self.num_classes {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    /// Micro-aggregated F over `class_set`: pool TP/FP/FN sums, then
    /// `F = 2PR / (P + R)`, defined as 0 when `P + R = 0`.
    pub fn f_measure(&self, class_set: &[u8]) -> Result<f64> {
        if class_set.is_empty() {
            return Err(Error::Config("f_measure: empty class set".into()));
        }
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for &c in class_set {
            let c = c as usize;
            if c >= self.num_classes {
                return Err(Error::Config(format!("f_measure: class {c} out of range")));
            }
            tp += self.tp[c];
            fp += self.fp[c];
            fn_ += self.fn_[c];
        }
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        if p + r == 0.0 {
            return Ok(0.0);
        }
        Ok(2.0 * p * r / (p + r))
    }
}

/// One row of the evaluation report.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub name: &'static str,
    pub classes: Vec<u8>,
    pub f: f64,
}

/// The standard report rows: left+right pairs pooled, the three mouth
/// classes pooled for "mouth_all", and all foreground classes for
/// "overall".
pub fn report(counts: &ConfusionCounts) -> Result<Vec<ReportRow>> {
    let rows: [(&'static str, Vec<u8>); 8] = [
        ("eye", vec![CLASS_LEFT_EYE, CLASS_RIGHT_EYE]),
        ("eyebrow", vec![CLASS_LEFT_EYEBROW, CLASS_RIGHT_EYEBROW]),
        ("nose", vec![CLASS_NOSE]),
        ("in_mouth", vec![CLASS_INNER_MOUTH]),
        ("upper_lip", vec![CLASS_UPPER_LIP]),
        ("lower_lip", vec![CLASS_LOWER_LIP]),
        ("mouth_all", vec![CLASS_UPPER_LIP, CLASS_INNER_MOUTH, CLASS_LOWER_LIP]),
        ("overall", (1..=8).collect()),
    ];
    let mut out = Vec::with_capacity(rows.len());
    for (name, classes) in rows {
        let f = counts.f_measure(&classes)?;
        out.push(ReportRow { name, classes, f });
    }
    Ok(out)
}

/// Aligned text table of the report rows (micro-aggregated F).
pub fn format_report(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(8).max(9);
    let mut s = format!("{:<width$}  F (micro)\n", "row");
    for row in rows {
        s.push_str(&format!("{:<width$}  {:.4}\n", row.name, row.f));
    }
    s
}

/// Machine-readable report: per-class counts and F, then the pooled rows.
/// Tab-separated: `row, TP, FP, FN, F`.
pub fn format_report_tsv(counts: &ConfusionCounts, rows: &[ReportRow]) -> String {
    let mut s = String::from("row\ttp\tfp\tfn\tf\n");
    for c in 1..counts.num_classes() as u8 {
        let (tp, fp, fn_) = counts.class_counts(c);
        let f = counts.f_measure(&[c]).expect("single class");
        s.push_str(&format!("{}\t{tp}\t{fp}\t{fn_}\t{f:.6}\n", crate::pipeline::PALETTE[c as usize]));
    }
    for row in rows {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for &c in &row.classes {
            let (a, b, d) = counts.class_counts(c);
            tp += a;
            fp += b;
            fn_ += d;
        }
        s.push_str(&format!("{}\t{tp}\t{fp}\t{fn_}\t{:.6}\n", row.name, row.f));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lbl(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, 9, data).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let truth = lbl(2, 2, vec![0, 2, 5, 8]);
        let mut counts = ConfusionCounts::new(9);
        counts.accumulate(&truth, &truth).unwrap();
        for c in 1..9u8 {
            let (_, fp, fn_) = counts.class_counts(c);
            assert_eq!((fp, fn_), (0, 0));
        }
        assert_eq!(counts.f_measure(&[2]).unwrap(), 1.0);
        let rows = report(&counts).unwrap();
        assert!((rows.last().unwrap().f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_background_prediction_counts_false_negatives() {
        let truth = lbl(2, 2, vec![5, 5, 5, 0]);
        let pred = lbl(2, 2, vec![0, 0, 0, 0]);
        let mut counts = ConfusionCounts::new(9);
        counts.accumulate(&pred, &truth).unwrap();
        let (tp, fp, fn_) = counts.class_counts(5);
        assert_eq!((tp, fp, fn_), (0, 0, 3));
        assert_eq!(counts.f_measure(&[5]).unwrap(), 0.0);
    }

    #[test]
    fn partial_overlap_enumeration() {
        // pred [c, bg], truth [c, c]
        let pred = lbl(2, 1, vec![5, 0]);
        let truth = lbl(2, 1, vec![5, 5]);
        let mut counts = ConfusionCounts::new(9);
        counts.accumulate(&pred, &truth).unwrap();
        let (tp, fp, fn_) = counts.class_counts(5);
        assert_eq!((tp, fp, fn_), (1, 0, 1));
    }

    #[test]
    fn f_of_balanced_counts_is_half() {
        let mut counts = ConfusionCounts::new(9);
        // TP=1, FP=1, FN=1 for class 5
        let pred = lbl(1, 3, vec![5, 5, 0]);
        let truth = lbl(1, 3, vec![5, 0, 5]);
        counts.accumulate(&pred, &truth).unwrap();
        assert_eq!(counts.f_measure(&[5]).unwrap(), 0.5);
    }

    #[test]
    fn empty_class_set_is_rejected() {
        let counts = ConfusionCounts::new(9);
        assert!(matches!(counts.f_measure(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn accumulate_is_order_independent() {
        let a = (lbl(1, 4, vec![1, 2, 0, 5]), lbl(1, 4, vec![1, 0, 2, 5]));
        let b = (lbl(1, 4, vec![8, 8, 0, 0]), lbl(1, 4, vec![8, 0, 8, 0]));
        let mut ab = ConfusionCounts::new(9);
        ab.accumulate(&a.0, &a.1).unwrap();
        ab.accumulate(&b.0, &b.1).unwrap();
        let mut ba = ConfusionCounts::new(9);
        ba.accumulate(&b.0, &b.1).unwrap();
        ba.accumulate(&a.0, &a.1).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn upscaling_both_maps_preserves_f() {
        let pred = lbl(2, 2, vec![2, 0, 5, 5]);
        let truth = lbl(2, 2, vec![2, 5, 5, 0]);
        let scale = |m: &LabelMap| {
            let mut out = LabelMap::background(4, 4, 9);
            for r in 0..4 {
                for c in 0..4 {
                    out.set(r, c, m.get(r / 2, c / 2));
                }
            }
            out
        };
        let mut small = ConfusionCounts::new(9);
        small.accumulate(&pred, &truth).unwrap();
        let mut big = ConfusionCounts::new(9);
        big.accumulate(&scale(&pred), &scale(&truth)).unwrap();
        let all: Vec<u8> = (1..9).collect();
        assert_eq!(small.f_measure(&all).unwrap(), big.f_measure(&all).unwrap());
    }

    #[test]
    fn left_right_swap_leaves_report_unchanged() {
        let pred = lbl(1, 4, vec![2, 4, 1, 3]);
        let truth = lbl(1, 4, vec![2, 2, 3, 3]);
        let swap = |m: &LabelMap| {
            let data = m
                .data()
                .iter()
                .map(|&v| match v {
                    1 => 3,
                    3 => 1,
                    2 => 4,
                    4 => 2,
                    other => other,
                })
                .collect();
            lbl(1, 4, data)
        };
        let mut counts = ConfusionCounts::new(9);
        counts.accumulate(&pred, &truth).unwrap();
        let mut swapped = ConfusionCounts::new(9);
        swapped.accumulate(&swap(&pred), &swap(&truth)).unwrap();
        let rows = report(&counts).unwrap();
        let rows_swapped = report(&swapped).unwrap();
        for (a, b) in rows.iter().zip(&rows_swapped) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.f, b.f);
        }
    }

    #[test]
    fn zero_counts_give_zero_f() {
        let counts = ConfusionCounts::new(9);
        for row in report(&counts).unwrap() {
            assert_eq!(row.f, 0.0);
        }
    }

    #[test]
    fn dim_mismatch_is_a_data_error() {
        let mut counts = ConfusionCounts::new(9);
        let a = lbl(2, 2, vec![0; 4]);
        let b = lbl(2, 3, vec![0; 6]);
        assert!(matches!(counts.accumulate(&a, &b), Err(Error::Data(_))));
    }

    #[test]
    fn merge_matches_sequential_accumulation() {
        let x = (lbl(1, 3, vec![1, 0, 2]), lbl(1, 3, vec![1, 2, 2]));
        let y = (lbl(1, 3, vec![5, 5, 0]), lbl(1, 3, vec![5, 0, 5]));
        let mut seq = ConfusionCounts::new(9);
        seq.accumulate(&x.0, &x.1).unwrap();
        seq.accumulate(&y.0, &y.1).unwrap();
        let mut a = ConfusionCounts::new(9);
        a.accumulate(&x.0, &x.1).unwrap();
        let mut b = ConfusionCounts::new(9);
        b.accumulate(&y.0, &y.1).unwrap();
        a.merge(&b);
        assert_eq!(a, seq);
    }
}
