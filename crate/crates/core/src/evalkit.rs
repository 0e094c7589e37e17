//! Precision / recall / F1 for sentence classification and exact-match span
//! extraction, plus cross-validation aggregation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::heads::Span;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} gold items")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            degenerate: tp + fp == 0 || tp + fn_ == 0,
        }
    }
}

/// Simile is the positive class.
pub fn score_classification(preds: &[Label], golds: &[Label]) -> Result<Prf, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        match (p, g) {
            (Label::Simile, Label::Simile) => tp += 1,
            (Label::Simile, Label::Literal) => fp += 1,
            (Label::Literal, Label::Simile) => fn_ += 1,
            _ => {}
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Micro-averaged exact (start, end, role) matching, per sentence.
pub fn score_extraction(preds: &[Vec<Span>], golds: &[Vec<Span>]) -> Result<Prf, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let p: BTreeSet<&Span> = p.iter().collect();
        let g: BTreeSet<&Span> = g.iter().collect();
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

pub fn aggregate_folds(folds: &[Prf]) -> Result<FoldSummary, EvalError> {
    if folds.len() < 2 {
        return Err(EvalError::TooFewFolds(folds.len()));
    }
    let pick = |f: fn(&Prf) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
    Ok(FoldSummary {
        precision: pick(|p| p.precision),
        recall: pick(|p| p.recall),
        f1: pick(|p| p.f1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classification: Prf,
    pub extraction: Prf,
}

impl Report {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}",
            "task", "precision", "recall", "f1", "tp", "fp", "fn"
        );
        for (name, p) in [("classification", &self.classification), ("extraction", &self.extraction)] {
            let _ = writeln!(
                out,
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}{}",
                name,
                p.precision,
                p.recall,
                p.f1,
                p.tp,
                p.fp,
                p.fn_,
                if p.degenerate { "  (degenerate)" } else { "" }
            );
        }
        out
    }
}

pub fn summary_table(classification: &FoldSummary, extraction: &FoldSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>17} {:>17} {:>17}",
        "task", "precision", "recall", "f1"
    );
    for (name, s) in [("classification", classification), ("extraction", extraction)] {
        let _ = writeln!(
            out,
            "{:<16} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            name, s.precision.mean, s.precision.std, s.recall.mean, s.recall.std, s.f1.mean, s.f1.std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::Role;
    use proptest::prelude::*;

    fn sp(start: usize, end: usize, role: Role) -> Span {
        Span { start, end, role }
    }

    #[test]
    fn classification_cases() {
        let all = vec![Label::Simile; 4];
        let p = score_classification(&all, &all).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));

        let preds = vec![Label::Literal; 4];
        let golds = vec![Label::Simile, Label::Literal, Label::Simile, Label::Literal];
        let p = score_classification(&preds, &golds).unwrap();
        assert_eq!((p.recall, p.f1), (0.0, 0.0));

        assert!(score_classification(&preds, &golds[..2]).is_err());
    }

    #[test]
    fn count_formula() {
        let p = Prf::from_counts(8, 2, 2);
        assert!((p.precision - 0.8).abs() < 1e-12);
        assert!((p.recall - 0.8).abs() < 1e-12);
        assert!((p.f1 - 0.8).abs() < 1e-12);
        assert!(!p.degenerate);
    }

    #[test]
    fn extraction_cases() {
        let gold = vec![vec![sp(2, 3, Role::Tenor), sp(5, 5, Role::Vehicle)]];
        let pred = vec![vec![sp(2, 3, Role::Tenor)]];
        let p = score_extraction(&pred, &gold).unwrap();
        assert_eq!((p.precision, p.recall), (1.0, 0.5));
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);

        let off = vec![vec![sp(2, 4, Role::Tenor), sp(5, 5, Role::Vehicle)]];
        let p = score_extraction(&off, &gold).unwrap();
        assert_eq!((p.tp, p.fp, p.fn_), (1, 1, 1));

        let empty: Vec<Vec<Span>> = vec![vec![], vec![]];
        let p = score_extraction(&empty, &empty).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert!(p.degenerate);
    }

    #[test]
    fn no_simile_gold_is_flagged() {
        let p = score_classification(&[Label::Literal, Label::Simile], &[Label::Literal; 2]).unwrap();
        assert_eq!(p.recall, 0.0);
        assert!(p.degenerate);
    }

    #[test]
    fn fold_aggregation() {
        let a = Prf::from_counts(8, 2, 2);
        let s = aggregate_folds(&[a, a, a]).unwrap();
        assert_eq!(s.f1.std, 0.0);

        let mut lo = a;
        lo.f1 = 0.8;
        let mut hi = a;
        hi.f1 = 1.0;
        let s = aggregate_folds(&[lo, hi]).unwrap();
        assert!((s.f1.mean - 0.9).abs() < 1e-12);
        assert!((s.f1.std - 0.1).abs() < 1e-12);

        assert_eq!(aggregate_folds(&[a]).unwrap_err(), EvalError::TooFewFolds(1));
    }

    #[test]
    fn table_mentions_both_tasks() {
        let r = Report { classification: Prf::from_counts(1, 0, 0), extraction: Prf::from_counts(0, 0, 0) };
        let t = r.to_table();
        assert!(t.contains("classification") && t.contains("extraction") && t.contains("degenerate"));
    }

    fn arb_spans() -> impl Strategy<Value = Vec<Vec<Span>>> {
        let span = (1usize..10, 0usize..3, prop::bool::ANY)
            .prop_map(|(s, len, t)| sp(s, s + len, if t { Role::Tenor } else { Role::Vehicle }));
        proptest::collection::vec(proptest::collection::vec(span, 0..4), 1..8)
    }

    proptest! {
        #[test]
        fn extraction_properties(preds in arb_spans(), golds in arb_spans()) {
            let n = preds.len().min(golds.len());
            let (preds, golds) = (&preds[..n], &golds[..n]);
            let total = score_extraction(preds, golds).unwrap();
            let mut rev_p = preds.to_vec();
            let mut rev_g = golds.to_vec();
            rev_p.reverse();
            rev_g.reverse();
            prop_assert_eq!(total, score_extraction(&rev_p, &rev_g).unwrap());
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for i in 0..n {
                let one = score_extraction(&preds[i..=i], &golds[i..=i]).unwrap();
                tp += one.tp;
                fp += one.fp;
                fn_ += one.fn_;
            }
            prop_assert_eq!((tp, fp, fn_), (total.tp, total.fp, total.fn_));
            let unique: Vec<Vec<Span>> = golds.iter().map(|v| {
                let mut v = v.clone();
                v.sort();
                v.dedup();
                v
            }).collect();
            let selfscore = score_extraction(&unique, &unique).unwrap();
            prop_assert_eq!(selfscore.fp + selfscore.fn_, 0);
            if selfscore.tp > 0 {
                prop_assert_eq!(selfscore.f1, 1.0);
            }
        }

        #[test]
        fn fold_mean_is_bounded(f1s in proptest::collection::vec(0.0f64..1.0, 5)) {
            let folds: Vec<Prf> = f1s.iter().map(|f| { let mut p = Prf::from_counts(1, 1, 1); p.f1 = *f; p }).collect();
            let s = aggregate_folds(&folds).unwrap();
            let lo = f1s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.f1.mean >= lo - 1e-12 && s.f1.mean <= hi + 1e-12);
        }
    }
}
