//! Time-aware precision/recall (eTaP, eTaR), TaF1 and point-wise scores.
//!
//! Each segment is scored by a detection term (does it touch the other side
//! at all) and a portion term (what fraction of it is covered), mixed by
//! `theta`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THETA: f64 = 0.5;

/// Inclusive interval `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "segment start {start} after end {end}");
        Self { start, end }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn intersection(&self, other: &Segment) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if lo <= hi {
            hi - lo + 1
        } else {
            0
        }
    }
}

/// Sorted, disjoint intervals.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSegments {
    segments: Vec<Segment>,
}

impl LabelSegments {
    /// Checks ordering and disjointness. Touching intervals are allowed.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for w in segments.windows(2) {
            if w[1].start <= w[0].end {
                return Err(Error::Input(format!(
                    "segments {:?} and {:?} overlap or are out of order",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Segment> {
        self.segments.iter()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn as_slice(&self) -> &[Segment] {
        &self.segments
    }

    /// Number of points of `seg` covered by these segments.
    fn covered(&self, seg: &Segment) -> usize {
        // Segments are sorted, so skip those ending before `seg`.
        let first = self.segments.partition_point(|s| s.end < seg.start);
        self.segments[first..]
            .iter()
            .take_while(|s| s.start <= seg.end)
            .map(|s| s.intersection(seg))
            .sum()
    }
}

impl<'a> IntoIterator for &'a LabelSegments {
    type Item = &'a Segment;
    type IntoIter = std::slice::Iter<'a, Segment>;
    fn into_iter(self) -> Self::IntoIter {
        self.segments.iter()
    }
}

/// Maximal runs of `true`.
pub fn segments_from_pointwise(flags: &[bool]) -> LabelSegments {
    let mut segments = Vec::new();
    let mut start = None;
    for (t, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                segments.push(Segment::new(s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segments.push(Segment::new(s, flags.len() - 1));
    }
    LabelSegments { segments }
}

fn segment_score(seg: &Segment, other: &LabelSegments, theta: f64) -> f64 {
    let covered = other.covered(seg);
    let detected = if covered > 0 { 1.0 } else { 0.0 };
    theta * detected + (1.0 - theta) * covered as f64 / seg.len() as f64
}

pub fn etap_with(pred: &LabelSegments, truth: &LabelSegments, theta: f64) -> f64 {
    if pred.is_empty() {
        return if truth.is_empty() { 1.0 } else { 0.0 };
    }
    pred.iter().map(|p| segment_score(p, truth, theta)).sum::<f64>() / pred.len() as f64
}

pub fn etar_with(pred: &LabelSegments, truth: &LabelSegments, theta: f64) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    truth.iter().map(|g| segment_score(g, pred, theta)).sum::<f64>() / truth.len() as f64
}

pub fn etap(pred: &LabelSegments, truth: &LabelSegments) -> f64 {
    etap_with(pred, truth, DEFAULT_THETA)
}

pub fn etar(pred: &LabelSegments, truth: &LabelSegments) -> f64 {
    etar_with(pred, truth, DEFAULT_THETA)
}

pub fn taf1(etap: f64, etar: f64) -> f64 {
    if etap + etar == 0.0 {
        0.0
    } else {
        2.0 * etap * etar / (etap + etar)
    }
}

/// Point-wise `(precision, recall, f1)`; each is 0 when its denominator is 0.
pub fn point_prf(flags: &[bool], labels: &[bool]) -> Result<(f64, f64, f64)> {
    if flags.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            flags.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&f, &l) in flags.iter().zip(labels) {
        match (f, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub etap: f64,
    pub etar: f64,
    pub taf1: f64,
    pub point_precision: f64,
    pub point_recall: f64,
    pub point_f1: f64,
}

pub const REPORT_FIELDS: [&str; 6] = [
    "etap",
    "etar",
    "taf1",
    "point_precision",
    "point_recall",
    "point_f1",
];

impl MetricReport {
    pub fn compute(flags: &[bool], labels: &[bool], theta: f64) -> Result<Self> {
        let (point_precision, point_recall, point_f1) = point_prf(flags, labels)?;
        let pred = segments_from_pointwise(flags);
        let truth = segments_from_pointwise(labels);
        let etap = etap_with(&pred, &truth, theta);
        let etar = etar_with(&pred, &truth, theta);
        Ok(Self {
            etap,
            etar,
            taf1: taf1(etap, etar),
            point_precision,
            point_recall,
            point_f1,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.etap,
            self.etar,
            self.taf1,
            self.point_precision,
            self.point_recall,
            self.point_f1,
        ]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat struct of floats serializes")
    }

    pub fn write_toml(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Header plus one data row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let row: Vec<String> = self.values().iter().map(|v| format!("{v}")).collect();
        let text = format!("{}\n{}\n", REPORT_FIELDS.join(","), row.join(","));
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Rows in the order TaF1, eTaP, eTaR, then point-wise scores.
    pub fn table(&self) -> String {
        format!(
            "{:<10} {:>8} {:>8} {:>8}\n{:<10} {:>8.4} {:>8.4} {:>8.4}\n\
             {:<10} {:>8} {:>8} {:>8}\n{:<10} {:>8.4} {:>8.4} {:>8.4}\n",
            "", "TaF1", "eTaP", "eTaR", "time-aware", self.taf1, self.etap, self.etar,
            "", "F1", "P", "R", "point", self.point_f1, self.point_precision, self.point_recall,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segs(v: &[(usize, usize)]) -> LabelSegments {
        LabelSegments::new(v.iter().map(|&(a, b)| Segment::new(a, b)).collect()).unwrap()
    }

    fn bits(pattern: u32, len: usize) -> Vec<bool> {
        (0..len).map(|i| pattern >> i & 1 == 1).collect()
    }

    #[test]
    fn segmentation() {
        let f = [false, true, true, false, true];
        assert_eq!(segments_from_pointwise(&f), segs(&[(1, 2), (4, 4)]));
        assert!(segments_from_pointwise(&[false; 4]).is_empty());
        assert_eq!(segments_from_pointwise(&[true; 5]), segs(&[(0, 4)]));
        assert!(LabelSegments::new(vec![Segment::new(3, 5), Segment::new(5, 6)]).is_err());
    }

    #[test]
    fn hand_evaluated_examples() {
        let truth = segs(&[(0, 9)]);
        assert_eq!(etap(&truth, &truth), 1.0);
        assert_eq!(etap(&segs(&[(20, 25)]), &truth), 0.0);
        assert_eq!(etap(&segs(&[(5, 14)]), &truth), 0.75);

        assert_eq!(etar(&truth, &truth), 1.0);
        assert_eq!(etar(&segs(&[]), &truth), 0.0);
        let long = segs(&[(0, 99)]);
        assert!((etar(&segs(&[(10, 39)]), &long) - 0.65).abs() < 1e-15);

        assert_eq!(etap(&segs(&[]), &segs(&[])), 1.0);
        assert_eq!(etar(&segs(&[]), &segs(&[])), 1.0);
    }

    #[test]
    fn harmonic_mean() {
        assert!((taf1(0.93, 0.85) - 0.8882).abs() < 5e-4);
        assert!((taf1(0.85, 0.63) - 0.7236).abs() < 5e-4);
        assert!((taf1(0.4, 0.4) - 0.4).abs() < 1e-15);
        assert_eq!(taf1(0.0, 0.0), 0.0);
    }

    #[test]
    fn point_scores() {
        let l = [true, true, false, false, true, true];
        assert_eq!(point_prf(&l, &l).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(point_prf(&[false; 6], &l).unwrap(), (0.0, 0.0, 0.0));
        let labels = [true, true, true, true, false, false];
        let flags = [true, true, false, false, true, true];
        assert_eq!(point_prf(&flags, &labels).unwrap(), (0.5, 0.5, 0.5));
        assert!(point_prf(&flags, &labels[..3]).is_err());
    }

    #[test]
    fn bounds_and_harmonic_identity_exhaustive() {
        let truths = [0b0000_1110u32, 0b1100_0011, 0b0001_0000, 0, 0b1111_1111];
        for &t in &truths {
            let truth = bits(t, 8);
            for p in 0..256u32 {
                let r = MetricReport::compute(&bits(p, 8), &truth, DEFAULT_THETA).unwrap();
                assert!(r.values().iter().all(|v| (0.0..=1.0).contains(v)));
                if r.etap > 0.0 && r.etar > 0.0 {
                    let lo = r.etap.min(r.etar);
                    let hi = r.etap.max(r.etar);
                    assert!(r.taf1 >= lo - 1e-12 && r.taf1 <= hi + 1e-12);
                    let h = 2.0 * r.etap * r.etar / (r.etap + r.etar);
                    assert!((r.taf1 - h).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn recall_is_precision_with_roles_swapped() {
        for t in 0..256u32 {
            let truth = segments_from_pointwise(&bits(t, 8));
            for p in 0..256u32 {
                let pred = segments_from_pointwise(&bits(p, 8));
                // An empty truth scores recall 1 but the swapped precision 0.
                if truth.is_empty() && !pred.is_empty() {
                    continue;
                }
                assert_eq!(etar(&pred, &truth), etap(&truth, &pred), "{p:08b} {t:08b}");
            }
        }
    }

    #[test]
    fn splitting_a_prediction_keeps_recall() {
        // Recall only depends on which points are covered.
        let truth = segs(&[(2, 6), (9, 12)]);
        let whole = segs(&[(0, 10)]);
        let split = segs(&[(0, 4), (5, 10)]);
        assert_eq!(etar(&whole, &truth), etar(&split, &truth));
    }

    #[test]
    fn merging_touching_predictions_can_lower_precision() {
        // Pinned counterexample: a fully covered piece next to a mostly
        // uncovered one scores higher apart than merged.
        let truth = segs(&[(0, 2)]);
        let split = segs(&[(0, 1), (2, 9)]);
        let merged = segs(&[(0, 9)]);
        assert!((etap(&split, &truth) - 0.78125).abs() < 1e-15);
        assert!((etap(&merged, &truth) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn report_serializations() {
        let r = MetricReport::compute(&[true, false], &[true, false], 0.5).unwrap();
        let back: MetricReport = toml::from_str(&r.to_toml()).unwrap();
        assert_eq!(back, r);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("etap,etar,taf1,point_precision,point_recall,point_f1\n"));
        assert!(r.table().contains("TaF1"));
    }
}
