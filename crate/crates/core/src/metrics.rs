//! Segmentation metrics: frame accuracy, segmental edit score and
//! segmental mAP at IoU thresholds.

use std::fmt::Write as _;

use crate::data::LabelSequence;
use crate::error::{Result, TcnError};
use crate::network::{predict_labels, ProbabilitySequence};

/// IoU thresholds reported by default.
pub const MAP_THRESHOLDS: [f64; 2] = [0.1, 0.5];

/// A maximal run of one class, frames `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
    pub confidence: Option<f64>,
}

impl Segment {
    pub fn new(class_id: usize, start: usize, end: usize) -> Self {
        Self {
            class_id,
            start,
            end,
            confidence: None,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Intersection over union of the two frame intervals.
    pub fn iou(&self, other: &Segment) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        let inter = if hi >= lo { hi + 1 - lo } else { 0 };
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

pub type SegmentList = Vec<Segment>;

/// Run-length collapse: `AAABBA` becomes segments `A[0,2] B[3,4] A[5,5]`.
pub fn collapse(labels: &[usize]) -> SegmentList {
    let mut segments: SegmentList = Vec::new();
    for (t, &label) in labels.iter().enumerate() {
        match segments.last_mut() {
            Some(seg) if seg.class_id == label => seg.end = t,
            _ => segments.push(Segment::new(label, t, t)),
        }
    }
    segments
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 * (1 - lev / max(|P|, |Y|))` over the collapsed class strings.
pub fn edit_score(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(TcnError::Invalid("edit score on an empty labeling".into()));
    }
    let p: Vec<usize> = collapse(pred).iter().map(|s| s.class_id).collect();
    let y: Vec<usize> = collapse(truth).iter().map(|s| s.class_id).collect();
    let dist = levenshtein(&p, &y);
    Ok(100.0 * (1.0 - dist as f64 / p.len().max(y.len()) as f64))
}

/// Percent of correctly labelled frames among those the mask keeps.
pub fn frame_accuracy(pred: &[usize], truth: &[usize], mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(TcnError::shape("frame accuracy lengths", truth.len(), pred.len()));
    }
    if let Some(m) = mask {
        if m.len() != truth.len() {
            return Err(TcnError::shape("frame accuracy mask", truth.len(), m.len()));
        }
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for t in 0..truth.len() {
        if mask.is_none_or(|m| m[t]) {
            total += 1;
            correct += usize::from(pred[t] == truth[t]);
        }
    }
    if total == 0 {
        return Err(TcnError::Invalid("frame accuracy over zero frames".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Average precision for one class from its confidence-ranked predictions
/// (non-interpolated area under the precision-recall curve).
fn class_average_precision(preds: &mut [&Segment], truth: &[&Segment], threshold: f64) -> f64 {
    preds.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.start.cmp(&b.start))
    });
    let mut matched = vec![false; truth.len()];
    let mut tp = 0usize;
    let mut area = 0.0;
    for (rank, p) in preds.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in truth.iter().enumerate() {
            if matched[j] {
                continue;
            }
            let iou = p.iou(g);
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, j));
            }
        }
        if let Some((iou, j)) = best {
            if iou >= threshold {
                matched[j] = true;
                tp += 1;
                area += tp as f64 / (rank + 1) as f64;
            }
        }
    }
    area / truth.len() as f64
}

/// Segmental mAP at one IoU threshold, averaged over classes present in
/// `truth`. Every predicted segment must carry a confidence.
pub fn segmental_map(pred: &[Segment], truth: &[Segment], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TcnError::Invalid(format!(
            "IoU threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if pred.iter().any(|s| s.confidence.is_none()) {
        return Err(TcnError::Invalid("predicted segment without confidence".into()));
    }
    let mut classes: Vec<usize> = truth.iter().map(|s| s.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(TcnError::Invalid("mAP with no ground-truth segments".into()));
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let mut p: Vec<&Segment> = pred.iter().filter(|s| s.class_id == c).collect();
            let g: Vec<&Segment> = truth.iter().filter(|s| s.class_id == c).collect();
            class_average_precision(&mut p, &g, threshold)
        })
        .sum();
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frame_accuracy: f64,
    pub edit_score: f64,
    /// `(IoU threshold, mAP)` pairs in ascending threshold order.
    pub map_at: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn map(&self, threshold: f64) -> Option<f64> {
        self.map_at
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, m)| m)
    }

    /// Field-wise mean; all reports must share thresholds.
    pub fn mean(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| TcnError::Invalid("mean of zero reports".into()))?;
        let n = reports.len() as f64;
        let mut map_at = first.map_at.clone();
        for (i, (t, m)) in map_at.iter_mut().enumerate() {
            *m = 0.0;
            for r in reports {
                let (rt, rm) = r
                    .map_at
                    .get(i)
                    .ok_or_else(|| TcnError::Invalid("reports with different thresholds".into()))?;
                if (rt - *t).abs() > 1e-12 {
                    return Err(TcnError::Invalid("reports with different thresholds".into()));
                }
                *m += rm;
            }
            *m /= n;
        }
        Ok(EvalReport {
            frame_accuracy: reports.iter().map(|r| r.frame_accuracy).sum::<f64>() / n,
            edit_score: reports.iter().map(|r| r.edit_score).sum::<f64>() / n,
            map_at,
        })
    }

    /// `key=value` lines, e.g. `map@0.1=0.83`.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frame_accuracy={}", self.frame_accuracy);
        let _ = writeln!(s, "edit_score={}", self.edit_score);
        for (t, m) in &self.map_at {
            let _ = writeln!(s, "map@{t}={m}");
        }
        s
    }

    pub fn csv_header(&self) -> String {
        let mut s = String::from("name,frame_accuracy,edit_score");
        for (t, _) in &self.map_at {
            let _ = write!(s, ",map@{t}");
        }
        s
    }

    pub fn csv_row(&self, name: &str) -> String {
        let mut s = format!("{name},{},{}", self.frame_accuracy, self.edit_score);
        for (_, m) in &self.map_at {
            let _ = write!(s, ",{m}");
        }
        s
    }
}

/// Attaches the mean probability of each segment's class over its frames.
pub fn score_segments(segments: &mut [Segment], probs: &ProbabilitySequence) {
    for seg in segments {
        let row = probs.probs.row(seg.class_id - 1);
        let sum: f64 = row[seg.start..=seg.end].iter().sum();
        seg.confidence = Some(sum / seg.len() as f64);
    }
}

/// Frame accuracy, edit score and mAP at `thresholds` for one sequence.
pub fn evaluate(probs: &ProbabilitySequence, truth: &LabelSequence, thresholds: &[f64]) -> Result<EvalReport> {
    if probs.len() != truth.len() {
        return Err(TcnError::shape("evaluate frame count", truth.len(), probs.len()));
    }
    let pred = predict_labels(probs, truth.len());
    let frame_accuracy = frame_accuracy(&pred.labels, &truth.labels, truth.mask.as_deref())?;
    let edit_score = edit_score(&pred.labels, &truth.labels)?;
    let mut pred_segments = collapse(&pred.labels);
    score_segments(&mut pred_segments, probs);
    let truth_segments = collapse(&truth.labels);
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let map_at = sorted
        .into_iter()
        .map(|t| Ok((t, segmental_map(&pred_segments, &truth_segments, t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        frame_accuracy,
        edit_score,
        map_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn s(text: &str) -> Vec<usize> {
        text.bytes().map(|b| (b - b'A' + 1) as usize).collect()
    }

    fn seg(c: usize, a: usize, b: usize, conf: f64) -> Segment {
        Segment::new(c, a, b).with_confidence(conf)
    }

    #[test]
    fn collapse_examples() {
        let segs = collapse(&s("AAABBA"));
        let spans: Vec<_> = segs.iter().map(|g| (g.class_id, g.start, g.end)).collect();
        assert_eq!(spans, vec![(1, 0, 2), (2, 3, 4), (1, 5, 5)]);
        assert_eq!(collapse(&s("CCCCC")).len(), 1);
        assert_eq!(collapse(&s("ABAB")).len(), 4);
        assert!(collapse(&[]).is_empty());
    }

    #[test]
    fn edit_score_examples() {
        assert_eq!(edit_score(&s("AABBC"), &s("AABBC")).unwrap(), 100.0);
        let v = edit_score(&s("AABA"), &s("AABBB")).unwrap();
        assert!((v - 100.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(edit_score(&s("ABAB"), &s("CDCD")).unwrap(), 0.0);
        assert!(edit_score(&[], &s("A")).is_err());
    }

    #[test]
    fn edit_is_duration_blind() {
        assert_eq!(edit_score(&s("ABBBBBC"), &s("AAAAABC")).unwrap(), 100.0);
    }

    #[test]
    fn levenshtein_classics() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"", b"abc"), 3);
        assert_eq!(levenshtein(b"flaw", b"lawn"), 2);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(frame_accuracy(&s("ABC"), &s("ABC"), None).unwrap(), 100.0);
        assert_eq!(frame_accuracy(&s("BAB"), &s("ABA"), None).unwrap(), 0.0);
        assert_eq!(frame_accuracy(&s("AABB"), &s("AAAA"), None).unwrap(), 50.0);
        let mask = [true, true, false, false];
        assert_eq!(frame_accuracy(&s("AABB"), &s("AAAA"), Some(&mask)).unwrap(), 100.0);
        assert!(frame_accuracy(&s("A"), &s("AB"), None).is_err());
        assert!(frame_accuracy(&s("A"), &s("A"), Some(&[false])).is_err());
    }

    #[test]
    fn map_perfect_and_missing_class() {
        let truth = vec![seg(1, 0, 4, 1.0), seg(2, 5, 9, 1.0), seg(1, 10, 12, 1.0)];
        for t in [0.1, 0.5, 0.99] {
            assert_eq!(segmental_map(&truth, &truth, t).unwrap(), 1.0);
        }
        let only_one = vec![seg(1, 0, 4, 0.9), seg(1, 10, 12, 0.8)];
        assert_eq!(segmental_map(&only_one, &truth, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn map_half_overlap_threshold() {
        // prediction A[0,1] covers half of truth A[0,3]: IoU 0.5
        let truth = vec![Segment::new(1, 0, 3), Segment::new(2, 4, 7)];
        let pred = vec![seg(1, 0, 1, 0.7), seg(2, 4, 7, 0.6)];
        assert!((pred[0].iou(&truth[0]) - 0.5).abs() < 1e-15);
        assert_eq!(segmental_map(&pred, &truth, 0.5).unwrap(), 1.0);
        // at 0.6 class 1 has a false positive only: AP 0, class 2 AP 1
        assert_eq!(segmental_map(&pred, &truth, 0.6).unwrap(), 0.5);
    }

    #[test]
    fn map_pr_curve_by_hand() {
        // class 1 with two truth segments; ranked predictions FP, TP, TP
        // precision at the two TPs: 1/2 and 2/3 -> AP = (1/2 + 2/3)/2 = 7/12
        let truth = vec![Segment::new(1, 0, 4), Segment::new(1, 10, 14)];
        let pred = vec![seg(1, 20, 24, 0.9), seg(1, 0, 4, 0.8), seg(1, 10, 14, 0.7)];
        let ap = segmental_map(&pred, &truth, 0.5).unwrap();
        assert!((ap - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn map_rejects_bad_input() {
        let truth = vec![Segment::new(1, 0, 3)];
        assert!(segmental_map(&[Segment::new(1, 0, 3)], &truth, 0.5).is_err());
        assert!(segmental_map(&[], &truth, 1.0).is_err());
        assert!(segmental_map(&[], &truth, 0.0).is_err());
        assert!(segmental_map(&[], &[], 0.5).is_err());
    }

    #[test]
    fn evaluate_perfect_onehot() {
        let labels = s("AABBBCA");
        let probs = Matrix::from_fn(3, labels.len(), |c, t| f64::from(labels[t] == c + 1));
        let report = evaluate(
            &ProbabilitySequence { probs },
            &LabelSequence::new(labels),
            &MAP_THRESHOLDS,
        )
        .unwrap();
        assert_eq!(report.frame_accuracy, 100.0);
        assert_eq!(report.edit_score, 100.0);
        assert_eq!(report.map(0.1), Some(1.0));
        assert_eq!(report.map(0.5), Some(1.0));
    }

    #[test]
    fn report_mean_and_serialization() {
        let a = EvalReport {
            frame_accuracy: 80.0,
            edit_score: 60.0,
            map_at: vec![(0.1, 0.5), (0.5, 0.25)],
        };
        let b = EvalReport {
            frame_accuracy: 90.0,
            edit_score: 70.0,
            map_at: vec![(0.1, 0.7), (0.5, 0.45)],
        };
        let m = EvalReport::mean(&[a.clone(), b]).unwrap();
        assert_eq!(m.frame_accuracy, 85.0);
        assert!((m.map(0.5).unwrap() - 0.35).abs() < 1e-12);
        assert_eq!(a.csv_header(), "name,frame_accuracy,edit_score,map@0.1,map@0.5");
        assert_eq!(a.csv_row("x"), "x,80,60,0.5,0.25");
        assert!(a.to_key_value().contains("map@0.5=0.25\n"));
    }
}
