//! Rationale overlap and task metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Token-level overlap between predicted and gold rationales, in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RationaleScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean over instances of the selected share of non-pad tokens.
    pub selection_pct: f64,
}

/// Running token counts for micro-averaged overlap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlapCounts {
    pub hit: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl OverlapCounts {
    /// Adds one instance; `keep[i] == false` marks padding.
    pub fn add(&mut self, pred: &[bool], gold: &[bool], keep: &[bool]) -> Result<()> {
        if pred.len() != gold.len() || pred.len() != keep.len() {
            return Err(Error::contract(format!(
                "mask lengths differ: pred {}, gold {}, tokens {}",
                pred.len(),
                gold.len(),
                keep.len()
            )));
        }
        for ((&p, &g), &k) in pred.iter().zip(gold).zip(keep) {
            if k {
                self.hit += usize::from(p && g);
                self.predicted += usize::from(p);
                self.gold += usize::from(g);
            }
        }
        Ok(())
    }

    pub fn score(&self) -> (f64, f64, f64) {
        let precision = ratio(self.hit, self.predicted);
        let recall = ratio(self.hit, self.gold);
        (precision, recall, f1(precision, recall))
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Selected share of the non-pad positions of one instance.
pub fn selection_fraction(pred: &[bool], keep: &[bool]) -> f64 {
    let total = keep.iter().filter(|&&k| k).count();
    let chosen = pred.iter().zip(keep).filter(|(&p, &k)| p && k).count();
    ratio(chosen, total)
}

/// One instance: `(pred, gold, keep)`.
pub type MaskTriple<'a> = (&'a [bool], &'a [bool], &'a [bool]);

/// Micro-averaged overlap over a corpus.
pub fn rationale_prf<'a>(items: impl IntoIterator<Item = MaskTriple<'a>>) -> Result<RationaleScore> {
    let mut counts = OverlapCounts::default();
    let mut sel = 0.0;
    let mut n = 0usize;
    for (pred, gold, keep) in items {
        counts.add(pred, gold, keep)?;
        sel += selection_fraction(pred, keep);
        n += 1;
    }
    let (precision, recall, f1) = counts.score();
    Ok(RationaleScore {
        precision,
        recall,
        f1,
        selection_pct: if n == 0 { 0.0 } else { sel / n as f64 },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskScore {
    Classification {
        accuracy: f64,
        macro_precision: f64,
        macro_recall: f64,
        macro_f1: f64,
    },
    Regression {
        mse: f64,
    },
}

impl TaskScore {
    pub fn accuracy(&self) -> Option<f64> {
        match *self {
            TaskScore::Classification { accuracy, .. } => Some(accuracy),
            TaskScore::Regression { .. } => None,
        }
    }
}

/// Accuracy and per-class averages (over classes that occur as gold or
/// prediction), or mean squared error for scores.
pub fn task_metrics(preds: &[Label], golds: &[Label]) -> Result<TaskScore> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::contract("no predictions to score"));
    }
    let pairs: Vec<(Label, Label)> = preds.iter().copied().zip(golds.iter().copied()).collect();
    match pairs[0] {
        (Label::Class(_), Label::Class(_)) => {
            let mut cls = Vec::with_capacity(pairs.len());
            for (p, g) in pairs {
                match (p, g) {
                    (Label::Class(p), Label::Class(g)) => cls.push((p, g)),
                    _ => return Err(Error::contract("mixed label kinds")),
                }
            }
            Ok(classification(&cls))
        }
        (Label::Score(_), Label::Score(_)) => {
            let mut se = 0.0;
            for (p, g) in &pairs {
                match (p, g) {
                    (Label::Score(p), Label::Score(g)) => se += (p - g).powi(2),
                    _ => return Err(Error::contract("mixed label kinds")),
                }
            }
            Ok(TaskScore::Regression {
                mse: se / pairs.len() as f64,
            })
        }
        _ => Err(Error::contract("prediction and gold label kinds differ")),
    }
}

fn classification(pairs: &[(usize, usize)]) -> TaskScore {
    let correct = pairs.iter().filter(|(p, g)| p == g).count();
    let classes: BTreeSet<usize> = pairs.iter().flat_map(|&(p, g)| [p, g]).collect();
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let tp = pairs.iter().filter(|&&(p, g)| p == c && g == c).count();
        let predicted = pairs.iter().filter(|&&(p, _)| p == c).count();
        let gold = pairs.iter().filter(|&&(_, g)| g == c).count();
        let (p, r) = (ratio(tp, predicted), ratio(tp, gold));
        mp += p;
        mr += r;
        mf += f1(p, r);
    }
    let k = classes.len() as f64;
    TaskScore::Classification {
        accuracy: correct as f64 / pairs.len() as f64,
        macro_precision: mp / k,
        macro_recall: mr / k,
        macro_f1: mf / k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prf(pred: &[u8], gold: &[u8]) -> RationaleScore {
        let p: Vec<bool> = pred.iter().map(|&b| b == 1).collect();
        let g: Vec<bool> = gold.iter().map(|&b| b == 1).collect();
        let keep = vec![true; p.len()];
        rationale_prf([(&p[..], &g[..], &keep[..])]).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let s = prf(&[0, 1, 1, 0], &[0, 1, 1, 0]);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = prf(&[1, 0, 0, 0], &[0, 1, 1, 0]);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = prf(&[1, 1, 0, 0, 1, 1, 0, 0], &[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!(s.selection_pct, 0.5);
        let s = prf(&[0, 0], &[0, 1]);
        assert_eq!(s.precision, 0.0);
    }

    #[test]
    fn pad_positions_ignored() {
        let pred = [true, true, true];
        let gold = [true, false, false];
        let keep = [true, false, false];
        let s = rationale_prf([(&pred[..], &gold[..], &keep[..])]).unwrap();
        assert_eq!((s.precision, s.recall, s.selection_pct), (1.0, 1.0, 1.0));
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = [true];
        let b = [true, false];
        assert!(rationale_prf([(&a[..], &b[..], &b[..])]).is_err());
    }

    #[test]
    fn micro_not_macro() {
        let (p1, g1, k1) = ([true; 4], [true, false, false, false], [true; 4]);
        let (p2, g2, k2) = ([true], [true], [true]);
        let s = rationale_prf([(&p1[..], &g1[..], &k1[..]), (&p2[..], &g2[..], &k2[..])]).unwrap();
        assert_eq!(s.precision, 2.0 / 5.0);
        assert_eq!(s.selection_pct, 1.0);
    }

    #[test]
    fn classification_examples() {
        let golds: Vec<Label> = (0..9).map(|i| Label::Class(i % 3)).collect();
        let TaskScore::Classification { accuracy, macro_f1, .. } = task_metrics(&golds, &golds).unwrap() else {
            panic!()
        };
        assert_eq!((accuracy, macro_f1), (1.0, 1.0));

        let golds: Vec<Label> = (0..8).map(|i| Label::Class(i % 4)).collect();
        let preds = vec![Label::Class(1); 8];
        let TaskScore::Classification {
            accuracy,
            macro_recall,
            macro_precision,
            ..
        } = task_metrics(&preds, &golds).unwrap()
        else {
            panic!()
        };
        assert_eq!(accuracy, 0.25);
        assert_eq!(macro_recall, 0.25);
        assert_eq!(macro_precision, 0.25 / 4.0);
    }

    #[test]
    fn regression_and_errors() {
        let g = [Label::Score(0.2), Label::Score(0.7)];
        assert_eq!(task_metrics(&g, &g).unwrap(), TaskScore::Regression { mse: 0.0 });
        let p = [Label::Score(0.4), Label::Score(0.7)];
        let TaskScore::Regression { mse } = task_metrics(&p, &g).unwrap() else { panic!() };
        assert!((mse - 0.02).abs() < 1e-15);
        assert!(task_metrics(&[], &[]).is_err());
        assert!(task_metrics(&[Label::Class(0)], &[Label::Score(0.0)]).is_err());
        assert!(task_metrics(&[Label::Class(0)], &[]).is_err());
    }
}
