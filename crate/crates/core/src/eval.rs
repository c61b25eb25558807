//! Single-class detection evaluation: greedy matching, precision/recall,
//! 101-point interpolated average precision.
//!
//! Predictions from all images are ranked globally by confidence. Predictions
//! sharing a confidence value form one operating point, so AP depends only on
//! the ranking and not on how ties happen to be ordered.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, BoundingBox};
use crate::ids::ImageId;
use crate::scoring::{Detection, PredictionRecord};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

const RECALL_POINTS: u64 = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub matched_ground_truths: usize,
    pub missed_ground_truths: usize,
}

/// Outcome for one prediction after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionMatch {
    /// Index into the original prediction slice.
    pub index: usize,
    pub confidence: f64,
    /// Ground-truth index this prediction claimed, if any.
    pub matched_gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatches {
    pub predictions: Vec<PredictionMatch>,
    pub num_ground_truths: usize,
}

impl ImageMatches {
    pub fn counts(&self) -> MatchCounts {
        let tp = self.predictions.iter().filter(|p| p.matched_gt.is_some()).count();
        MatchCounts {
            true_positives: tp,
            false_positives: self.predictions.len() - tp,
            matched_ground_truths: tp,
            missed_ground_truths: self.num_ground_truths - tp,
        }
    }
}

/// Greedy one-to-one matching. Predictions are visited by descending
/// confidence (ties by index); each claims the still-unmatched ground truth
/// with the highest IoU, provided that IoU is at least `iou_thresh`.
pub fn match_detections(preds: &[Detection], gts: &[BoundingBox], iou_thresh: f64) -> ImageMatches {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let predictions = order
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = box_iou(&preds[i].bbox, gt);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            PredictionMatch {
                index: i,
                confidence: preds[i].confidence,
                matched_gt: best.map(|(g, _)| g),
            }
        })
        .collect();
    ImageMatches {
        predictions,
        num_ground_truths: gts.len(),
    }
}

/// One operating point of the precision/recall curve, kept as integer counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrPoint {
    pub true_positives: u64,
    pub false_positives: u64,
}

/// Cumulative counts at each distinct confidence value, highest first.
pub fn pr_curve(images: &[ImageMatches]) -> Vec<PrPoint> {
    let mut all: Vec<(f64, bool)> = images
        .iter()
        .flat_map(|im| im.predictions.iter().map(|p| (p.confidence, p.matched_gt.is_some())))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (i, &(conf, hit)) in all.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = all.get(i + 1).is_none_or(|next| next.0 != conf);
        if last_of_group {
            points.push(PrPoint {
                true_positives: tp,
                false_positives: fp,
            });
        }
    }
    points
}

/// 101-point interpolated AP over PR points against `num_gt` ground truths.
///
/// Interpolated precision at recall level `r/100` is the best precision among
/// points with recall `>= r/100`; recall comparisons are done on integers.
pub fn interpolated_ap(points: &[PrPoint], num_gt: u64) -> f64 {
    if num_gt == 0 {
        return if points.is_empty() { 1.0 } else { 0.0 };
    }
    // Precision envelope from the right.
    let mut envelope = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for (i, p) in points.iter().enumerate().rev() {
        let prec = p.true_positives as f64 / (p.true_positives + p.false_positives) as f64;
        best = best.max(prec);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..RECALL_POINTS {
        // recall_j >= r/100  <=>  100 * tp_j >= r * num_gt
        while j < points.len() && 100 * points[j].true_positives < r * num_gt {
            j += 1;
        }
        if j == points.len() {
            break;
        }
        sum += envelope[j];
    }
    sum / RECALL_POINTS as f64
}

pub fn average_precision(images: &[ImageMatches]) -> f64 {
    let num_gt: u64 = images.iter().map(|im| im.num_ground_truths as u64).sum();
    interpolated_ap(&pr_curve(images), num_gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_50: f64,
    pub map_coco: f64,
    pub ap_per_threshold: Vec<ThresholdAp>,
    /// Matching counts at IoU 0.5.
    pub counts: MatchCounts,
}

impl EvalReport {
    pub fn ap_at(&self, iou: f64) -> Option<f64> {
        self.ap_per_threshold
            .iter()
            .find(|t| (t.iou - iou).abs() < 1e-12)
            .map(|t| t.ap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Thresholds reported in `ap_per_threshold`. `map_50` and `map_coco`
    /// are always computed regardless.
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_thresholds(),
        }
    }
}

fn ap_at_threshold(pairs: &[(&[Detection], &[BoundingBox])], thresh: f64) -> (f64, MatchCounts) {
    let matches: Vec<ImageMatches> = pairs
        .iter()
        .map(|(p, g)| match_detections(p, g, thresh))
        .collect();
    let counts = matches.iter().fold(MatchCounts::default(), |acc, m| {
        let c = m.counts();
        MatchCounts {
            true_positives: acc.true_positives + c.true_positives,
            false_positives: acc.false_positives + c.false_positives,
            matched_ground_truths: acc.matched_ground_truths + c.matched_ground_truths,
            missed_ground_truths: acc.missed_ground_truths + c.missed_ground_truths,
        }
    });
    (average_precision(&matches), counts)
}

/// Evaluates predictions against ground truth. Every image in `gt` is
/// evaluated; images without a prediction record count as predicting nothing.
pub fn evaluate(
    preds: &[PredictionRecord],
    gt: &HashMap<ImageId, Vec<BoundingBox>>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut by_id: HashMap<&ImageId, &PredictionRecord> = HashMap::with_capacity(preds.len());
    for p in preds {
        if !gt.contains_key(&p.image_id) {
            return Err(Error::MissingGroundTruth(p.image_id.to_string()));
        }
        if by_id.insert(&p.image_id, p).is_some() {
            return Err(Error::DuplicateId(p.image_id.to_string()));
        }
    }
    if config.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::config("IoU thresholds must lie in [0, 1]"));
    }
    let mut ids: Vec<&ImageId> = gt.keys().collect();
    ids.sort();
    let pairs: Vec<(&[Detection], &[BoundingBox])> = ids
        .iter()
        .map(|id| {
            let dets = by_id.get(id).map_or(&[][..], |p| &p.detections[..]);
            (dets, &gt[*id][..])
        })
        .collect();

    let coco: Vec<(f64, f64)> = coco_thresholds()
        .into_iter()
        .map(|t| (t, ap_at_threshold(&pairs, t).0))
        .collect();
    let (map_50, counts) = ap_at_threshold(&pairs, 0.5);
    let map_coco = coco.iter().map(|(_, ap)| ap).sum::<f64>() / coco.len() as f64;
    let ap_per_threshold = config
        .iou_thresholds
        .iter()
        .map(|&t| {
            let ap = coco
                .iter()
                .find(|(c, _)| *c == t)
                .map_or_else(|| ap_at_threshold(&pairs, t).0, |(_, ap)| *ap);
            ThresholdAp { iou: t, ap }
        })
        .collect();
    Ok(EvalReport {
        map_50,
        map_coco,
        ap_per_threshold,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn det(b: BoundingBox, c: f64) -> Detection {
        Detection::new(b, c).unwrap()
    }

    /// Exhaustive threshold sweep: for every distinct confidence cut, re-match
    /// only the predictions at or above the cut and read off precision/recall.
    pub(crate) fn sweep_oracle_ap(images: &[(Vec<Detection>, Vec<BoundingBox>)], thresh: f64) -> f64 {
        let num_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
        let mut cuts: Vec<f64> = images
            .iter()
            .flat_map(|(p, _)| p.iter().map(|d| d.confidence))
            .collect();
        if num_gt == 0 {
            return if cuts.is_empty() { 1.0 } else { 0.0 };
        }
        cuts.sort_by(|a, b| b.total_cmp(a));
        cuts.dedup();
        let mut pr = Vec::new();
        for &cut in &cuts {
            let (mut tp, mut n) = (0usize, 0usize);
            for (p, g) in images {
                let kept: Vec<Detection> = p.iter().copied().filter(|d| d.confidence >= cut).collect();
                n += kept.len();
                tp += match_detections(&kept, g, thresh).counts().true_positives;
            }
            pr.push((tp as f64 / num_gt as f64, tp as f64 / n as f64));
        }
        let mut total = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let best = pr
                .iter()
                .filter(|(rec, _)| *rec >= level - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            total += best;
        }
        total / 101.0
    }

    #[test]
    fn matching_examples() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        // IoU 0.9: 9x10 box inside the GT.
        let m = match_detections(&[det(bx(0.0, 0.0, 9.0, 10.0), 0.8)], &[gt], 0.5);
        assert_eq!(
            m.counts(),
            MatchCounts { true_positives: 1, false_positives: 0, matched_ground_truths: 1, missed_ground_truths: 0 }
        );
        // IoU 0.4.
        let m = match_detections(&[det(bx(0.0, 0.0, 4.0, 10.0), 0.8)], &[gt], 0.5);
        assert_eq!(
            m.counts(),
            MatchCounts { true_positives: 0, false_positives: 1, matched_ground_truths: 0, missed_ground_truths: 1 }
        );
    }

    #[test]
    fn higher_confidence_wins_contested_gt() {
        let gt = [bx(0.0, 0.0, 10.0, 10.0)];
        let a = det(bx(0.0, 0.0, 10.0, 9.0), 0.6);
        let b = det(bx(0.0, 0.0, 10.0, 8.0), 0.9);
        for preds in [[a, b], [b, a]] {
            let m = match_detections(&preds, &gt, 0.5);
            let winner = m.predictions.iter().find(|p| p.matched_gt.is_some()).unwrap();
            assert_eq!(winner.confidence, 0.9);
            assert_eq!(m.counts().false_positives, 1);
        }
    }

    #[test]
    fn ap_trivial_cases() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 0.0, 30.0, 10.0)];
        let perfect = vec![det(gt[0], 0.9), det(gt[1], 0.8)];
        let m = match_detections(&perfect, &gt, 0.5);
        assert_eq!(average_precision(&[m]), 1.0);

        let miss = vec![det(bx(50.0, 50.0, 60.0, 60.0), 0.9)];
        assert_eq!(average_precision(&[match_detections(&miss, &gt, 0.5)]), 0.0);
        assert_eq!(average_precision(&[match_detections(&[], &gt, 0.5)]), 0.0);

        assert_eq!(average_precision(&[match_detections(&[], &[], 0.5)]), 1.0);
        assert_eq!(average_precision(&[match_detections(&miss, &[], 0.5)]), 0.0);
    }

    #[test]
    fn two_gt_three_pred_fixture() {
        let gts = vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 0.0, 30.0, 10.0)];
        let preds = vec![
            det(gts[0], 0.9),
            det(bx(50.0, 50.0, 60.0, 60.0), 0.8),
            det(gts[1], 0.7),
        ];
        let oracle = sweep_oracle_ap(&[(preds.clone(), gts.clone())], 0.5);
        // 51 recall levels in [0, 0.5] at precision 1, 50 levels in (0.5, 1] at 2/3.
        let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((oracle - expected).abs() < 1e-12);
        let ap = average_precision(&[match_detections(&preds, &gts, 0.5)]);
        assert!((ap - oracle).abs() < 1e-9, "{ap} vs {oracle}");
    }

    #[test]
    fn evaluate_examples() {
        let mut gt = HashMap::new();
        gt.insert(ImageId::from("a"), vec![bx(0.0, 0.0, 10.0, 10.0)]);
        gt.insert(ImageId::from("b"), vec![bx(5.0, 5.0, 20.0, 30.0), bx(40.0, 40.0, 60.0, 70.0)]);
        let perfect: Vec<PredictionRecord> = gt
            .iter()
            .map(|(id, boxes)| {
                PredictionRecord::new(id.clone(), 100, 100)
                    .with_detections(boxes.iter().map(|&b| det(b, 1.0)).collect())
            })
            .collect();
        let report = evaluate(&perfect, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(report.map_50, 1.0);
        assert_eq!(report.map_coco, 1.0);
        assert!(report.ap_per_threshold.iter().all(|t| t.ap == 1.0));
        assert_eq!(report.ap_per_threshold.len(), 10);

        let empty = evaluate(&[], &gt, &EvalConfig::default()).unwrap();
        assert_eq!(empty.map_50, 0.0);
        assert!(empty.ap_per_threshold.iter().all(|t| t.ap == 0.0));
        assert_eq!(empty.counts.missed_ground_truths, 3);

        let stray = vec![PredictionRecord::new("zzz", 10, 10)];
        assert!(matches!(
            evaluate(&stray, &gt, &EvalConfig::default()),
            Err(Error::MissingGroundTruth(id)) if id == "zzz"
        ));
    }

    #[test]
    fn coco_threshold_grid() {
        let t = coco_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
    }

    type Fixture = Vec<(Vec<Detection>, Vec<BoundingBox>)>;

    fn arb_fixture() -> impl Strategy<Value = Fixture> {
        let b = (0u32..8, 0u32..8, 1u32..5, 1u32..5).prop_map(|(x, y, w, h)| {
            bx(x as f64 * 4.0, y as f64 * 4.0, (x + w) as f64 * 4.0, (y + h) as f64 * 4.0)
        });
        let d = (b.clone(), 0u32..20).prop_map(|(bb, c)| det(bb, c as f64 / 20.0));
        prop::collection::vec(
            (prop::collection::vec(d, 0..5), prop::collection::vec(b, 0..4)),
            1..=5,
        )
    }

    fn ap_of(fx: &Fixture, thresh: f64) -> f64 {
        let m: Vec<_> = fx.iter().map(|(p, g)| match_detections(p, g, thresh)).collect();
        average_precision(&m)
    }

    fn report_of(fx: &Fixture) -> EvalReport {
        let mut gt = HashMap::new();
        let mut preds = Vec::new();
        for (i, (p, g)) in fx.iter().enumerate() {
            let id = ImageId::new(format!("im{i}"));
            gt.insert(id.clone(), g.clone());
            preds.push(PredictionRecord::new(id, 64, 64).with_detections(p.clone()));
        }
        evaluate(&preds, &gt, &EvalConfig::default()).unwrap()
    }

    proptest! {
        #[test]
        fn matches_sweep_oracle(fx in arb_fixture(), t in prop::sample::select(vec![0.3, 0.5, 0.75])) {
            let ap = ap_of(&fx, t);
            prop_assert!((ap - sweep_oracle_ap(&fx, t)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn rank_preserving_rescale_invariant(fx in arb_fixture()) {
            let rescaled: Fixture = fx.iter().map(|(p, g)| {
                (p.iter().map(|d| det(d.bbox, d.confidence * d.confidence * 0.5)).collect(), g.clone())
            }).collect();
            prop_assert_eq!(ap_of(&fx, 0.5), ap_of(&rescaled, 0.5));
        }

        #[test]
        fn low_false_positive_never_helps(fx in arb_fixture()) {
            let min_conf = fx.iter().flat_map(|(p, _)| p.iter().map(|d| d.confidence)).fold(1.0, f64::min);
            let mut more = fx.clone();
            more[0].0.push(det(bx(1000.0, 1000.0, 1001.0, 1001.0), min_conf * 0.5));
            prop_assert!(ap_of(&more, 0.5) <= ap_of(&fx, 0.5) + 1e-15);
        }

        #[test]
        fn duplication_invariant(fx in arb_fixture()) {
            let mut doubled = fx.clone();
            doubled.extend(fx.iter().cloned());
            prop_assert!((ap_of(&doubled, 0.5) - ap_of(&fx, 0.5)).abs() < 1e-12);
        }

        #[test]
        fn coco_not_above_ap50(fx in arb_fixture()) {
            let r = report_of(&fx);
            prop_assert!(r.map_coco <= r.map_50 + 1e-12);
            let mean = r.ap_per_threshold.iter().map(|t| t.ap).sum::<f64>() / 10.0;
            prop_assert!((mean - r.map_coco).abs() < 1e-12);
        }
    }
}
