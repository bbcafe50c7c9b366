//! IoU, recall curves and Average Recall over phrase subsets.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::Mask;
use crate::error::{Error, Result};

/// Number of IoU thresholds: `0.01, 0.02, ..., 1.00`.
pub const NUM_THRESHOLDS: usize = 100;

/// The `k`-th threshold (`k` in `0..NUM_THRESHOLDS`).
pub fn threshold(k: usize) -> f64 {
    (k + 1) as f64 / NUM_THRESHOLDS as f64
}

pub fn thresholds() -> Vec<f64> {
    (0..NUM_THRESHOLDS).map(threshold).collect()
}

fn check_len(op: &str, a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!("{op}: mask lengths differ ({} vs {})", a.len(), b.len())));
    }
    Ok(())
}

fn counts(pred: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    let (mut inter, mut p, mut t) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    (inter, p, t)
}

/// `|pred ∩ gt| / |pred ∪ gt|`, or 1 when both masks are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len("iou", pred, gt)?;
    let (inter, p, t) = counts(pred, gt);
    let union = p + t - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Hard Dice coefficient `2|pred ∩ gt| / (|pred| + |gt|)`, or 1 when both are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len("dice", pred, gt)?;
    let (inter, p, t) = counts(pred, gt);
    Ok(if p + t == 0 { 1.0 } else { 2.0 * inter as f64 / (p + t) as f64 })
}

/// Pixelwise union of the masks of a plural phrase's instances.
pub fn merge_plural(masks: &[Mask]) -> Result<Mask> {
    let (first, rest) = masks.split_first().ok_or_else(|| Error::Validation("merge_plural needs at least one mask".into()))?;
    let mut out = first.clone();
    for m in rest {
        if (m.height, m.width) != (out.height, out.width) {
            return Err(Error::Validation(format!(
                "merge_plural: mask {}x{} does not match {}x{}",
                m.height, m.width, out.height, out.width
            )));
        }
        out = out.union(m);
    }
    Ok(out)
}

/// IoU of one evaluated phrase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub sample: usize,
    pub phrase: usize,
    pub iou: f64,
    pub is_thing: bool,
    pub is_plural: bool,
}

impl EvalRecord {
    pub fn new(sample: usize, phrase: usize, iou: f64, is_thing: bool, is_plural: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&iou) {
            return Err(Error::Validation(format!("IoU {iou} of sample {sample} phrase {phrase} outside [0, 1]")));
        }
        Ok(Self { sample, phrase, iou, is_thing, is_plural })
    }

    fn key(&self) -> (usize, usize) {
        (self.sample, self.phrase)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Overall,
    Things,
    Stuff,
    Singulars,
    Plurals,
}

impl Subset {
    pub const ALL: [Subset; 5] = [Subset::Overall, Subset::Things, Subset::Stuff, Subset::Singulars, Subset::Plurals];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Overall => "overall",
            Subset::Things => "things",
            Subset::Stuff => "stuff",
            Subset::Singulars => "singulars",
            Subset::Plurals => "plurals",
        }
    }

    pub fn contains(self, r: &EvalRecord) -> bool {
        match self {
            Subset::Overall => true,
            Subset::Things => r.is_thing,
            Subset::Stuff => !r.is_thing,
            Subset::Singulars => !r.is_plural,
            Subset::Plurals => r.is_plural,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallCurve {
    pub thresholds: Vec<f64>,
    pub recalls: Vec<f64>,
    pub average_recall: f64,
    pub count: usize,
}

/// AR of one subset; `Empty` when no record falls into it.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SubsetAr {
    Empty,
    Curve(RecallCurve),
}

impl SubsetAr {
    pub fn ar(&self) -> Option<f64> {
        match self {
            SubsetAr::Empty => None,
            SubsetAr::Curve(c) => Some(c.average_recall),
        }
    }
}

/// Recall at each threshold (`iou >= t`) over the records in `subset`.
pub fn average_recall(records: &[EvalRecord], subset: Subset) -> SubsetAr {
    let ious: Vec<f64> = records.iter().filter(|r| subset.contains(r)).map(|r| r.iou).collect();
    if ious.is_empty() {
        return SubsetAr::Empty;
    }
    let n = ious.len();
    let hits: Vec<usize> = (0..NUM_THRESHOLDS).map(|k| ious.iter().filter(|&&v| v >= threshold(k)).count()).collect();
    let recalls = hits.iter().map(|&h| h as f64 / n as f64).collect();
    let total: usize = hits.iter().sum();
    SubsetAr::Curve(RecallCurve {
        thresholds: thresholds(),
        recalls,
        average_recall: total as f64 / (n * NUM_THRESHOLDS) as f64,
        count: n,
    })
}

/// Verifies that things/stuff and singulars/plurals each split the record
/// set into disjoint parts covering it, and that record keys are unique.
pub fn check_partitions(records: &[EvalRecord]) -> Result<()> {
    let all: BTreeSet<_> = records.iter().map(EvalRecord::key).collect();
    if all.len() != records.len() {
        return Err(Error::Validation("duplicate (sample, phrase) in evaluation records".into()));
    }
    for (a, b) in [(Subset::Things, Subset::Stuff), (Subset::Singulars, Subset::Plurals)] {
        let sa: BTreeSet<_> = records.iter().filter(|r| a.contains(r)).map(EvalRecord::key).collect();
        let sb: BTreeSet<_> = records.iter().filter(|r| b.contains(r)).map(EvalRecord::key).collect();
        if !sa.is_disjoint(&sb) {
            return Err(Error::Validation(format!("{} and {} overlap", a.name(), b.name())));
        }
        if sa.union(&sb).count() != all.len() {
            return Err(Error::Validation(format!("{} and {} do not cover every record", a.name(), b.name())));
        }
    }
    Ok(())
}

/// AR for every subset of one record set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub records: usize,
    pub subsets: Vec<(Subset, SubsetAr)>,
}

impl Evaluation {
    /// Checks the partitions and computes every subset's curve.
    pub fn new(records: &[EvalRecord]) -> Result<Self> {
        check_partitions(records)?;
        let subsets = Subset::ALL.iter().map(|&s| (s, average_recall(records, s))).collect();
        Ok(Self { records: records.len(), subsets })
    }

    pub fn get(&self, subset: Subset) -> &SubsetAr {
        &self.subsets.iter().find(|(s, _)| *s == subset).expect("every subset is evaluated").1
    }

    pub fn overall(&self) -> Option<f64> {
        self.get(Subset::Overall).ar()
    }

    /// `subset,kind,threshold,value` rows: one `recall` row per threshold
    /// followed by an `ar` summary row, or a single `empty` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,kind,threshold,value\n");
        for (s, ar) in &self.subsets {
            match ar {
                SubsetAr::Empty => writeln!(out, "{},empty,,", s.name()).unwrap(),
                SubsetAr::Curve(c) => {
                    for (t, r) in c.thresholds.iter().zip(&c.recalls) {
                        writeln!(out, "{},recall,{t:.2},{r}", s.name()).unwrap();
                    }
                    writeln!(out, "{},ar,,{}", s.name(), c.average_recall).unwrap();
                }
            }
        }
        out
    }

    /// One line per subset, for logs.
    pub fn summary(&self) -> String {
        self.subsets
            .iter()
            .map(|(s, ar)| match ar.ar() {
                Some(v) => format!("{}={:.4}", s.name(), v),
                None => format!("{}=empty", s.name()),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, iou: f64, thing: bool, plural: bool) -> EvalRecord {
        EvalRecord::new(0, i, iou, thing, plural).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = [true, true, false, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(iou(&a, &[false, true, true, false]).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(iou(&a, &[true]).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = [true, true, false, false];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&a, &[false, true, true, false]).unwrap(), 0.5);
    }

    #[test]
    fn merge_examples() {
        let m = Mask { height: 1, width: 3, bits: vec![true, false, true] };
        assert_eq!(merge_plural(std::slice::from_ref(&m)).unwrap(), m);
        let c = Mask { height: 1, width: 3, bits: vec![false, true, false] };
        assert!(merge_plural(&[m, c]).unwrap().bits.iter().all(|&b| b));
        assert!(merge_plural(&[]).is_err());
    }

    #[test]
    fn worked_example_ar() {
        let r = [rec(0, 1.0, true, false), rec(1, 0.5, true, false), rec(2, 0.0, false, false)];
        let SubsetAr::Curve(c) = average_recall(&r, Subset::Overall) else { panic!("empty") };
        assert_eq!(c.average_recall, 0.5);
        assert_eq!(c.recalls[49], 2.0 / 3.0);
        assert_eq!(c.recalls[50], 1.0 / 3.0);
    }

    #[test]
    fn extremes_and_empty() {
        let ones = [rec(0, 1.0, true, false), rec(1, 1.0, false, false)];
        assert_eq!(average_recall(&ones, Subset::Overall).ar(), Some(1.0));
        let zeros = [rec(0, 0.0, true, false)];
        assert_eq!(average_recall(&zeros, Subset::Overall).ar(), Some(0.0));
        assert_eq!(average_recall(&ones, Subset::Plurals), SubsetAr::Empty);
    }

    #[test]
    fn threshold_grid() {
        let t = thresholds();
        assert_eq!(t.len(), 100);
        assert_eq!(t[0], 0.01);
        assert_eq!(t[49], 0.5);
        assert_eq!(t[99], 1.0);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let r = [rec(0, 1.0, true, false), rec(0, 0.5, true, false)];
        assert!(check_partitions(&r).is_err());
        assert!(EvalRecord::new(0, 0, 1.5, true, false).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = [rec(0, 1.0, true, false)];
        let csv = Evaluation::new(&r).unwrap().to_csv();
        assert!(csv.starts_with("subset,kind,threshold,value\noverall,recall,0.01,1\n"));
        assert!(csv.contains("overall,ar,,1\n"));
        assert!(csv.contains("stuff,empty,,\n"));
        assert!(csv.contains("plurals,empty,,\n"));
    }
}
