//! Detection metrics: greedy-matched per-class average precision at a fixed
//! IoU threshold, the class-mean mAP, and pseudo-label quality against
//! ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, BoxCxcywh};
use crate::detector::boxes::iou;
use crate::error::{Error, Result};
use crate::mean_teacher::PseudoLabelSet;

pub use crate::detector::boxes::giou;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub image_id: i64,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BoxCxcywh,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP@iou per class id; `None` when the class has no ground truth.
    pub per_class_ap: BTreeMap<usize, Option<f64>>,
    /// Mean over classes with at least one ground-truth instance.
    pub map: f64,
    pub iou_thresh: f64,
    pub per_class_gt: BTreeMap<usize, usize>,
    pub n_detections: usize,
}

/// Greedy matching in descending score order (ties broken by insertion
/// index): a detection claims the highest-IoU unmatched same-class GT with
/// IoU >= thresh. Returns the TP/FP flag sequence in rank order plus the
/// total GT count for the class.
fn rank_and_match(
    detections: &[DetectionRecord],
    ground_truth: &[AnnotationSet],
    class_id: usize,
    iou_thresh: f64,
) -> Result<(Vec<bool>, usize)> {
    let mut gt_boxes: BTreeMap<i64, Vec<BoxCxcywh>> = BTreeMap::new();
    for set in ground_truth {
        let boxes: Vec<BoxCxcywh> = set
            .boxes
            .iter()
            .zip(&set.class_ids)
            .filter(|(_, &c)| c == class_id)
            .map(|(&b, _)| b)
            .collect();
        if !boxes.is_empty() {
            gt_boxes.entry(set.image_id).or_default().extend(boxes);
        }
    }
    let n_gt: usize = gt_boxes.values().map(|v| v.len()).sum();

    let mut ranked: Vec<(usize, &DetectionRecord)> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class_id == class_id)
        .collect();
    ranked.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });

    let mut used: BTreeMap<i64, Vec<bool>> = gt_boxes
        .iter()
        .map(|(&id, v)| (id, vec![false; v.len()]))
        .collect();
    let mut flags = Vec::with_capacity(ranked.len());
    for (_, det) in ranked {
        let mut best: Option<(usize, f64)> = None;
        if let Some(boxes) = gt_boxes.get(&det.image_id) {
            let used_flags = used.get(&det.image_id).unwrap();
            for (k, &gb) in boxes.iter().enumerate() {
                if used_flags[k] {
                    continue;
                }
                let v = iou(det.bbox, gb)?;
                if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
        }
        match best {
            Some((k, _)) => {
                used.get_mut(&det.image_id).unwrap()[k] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    Ok((flags, n_gt))
}

/// All-point interpolated AP (precision envelope over the PR curve).
/// `None` when the class has no ground-truth instance.
pub fn average_precision(
    detections: &[DetectionRecord],
    ground_truth: &[AnnotationSet],
    class_id: usize,
    iou_thresh: f64,
) -> Result<Option<f64>> {
    let (flags, n_gt) = rank_and_match(detections, ground_truth, class_id, iou_thresh)?;
    if n_gt == 0 {
        return Ok(None);
    }
    if flags.is_empty() {
        return Ok(Some(0.0));
    }
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: p_env(r) = max over points with recall >= r
    let mut envelope = precisions.clone();
    for k in (0..envelope.len() - 1).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..envelope.len() {
        let dr = recalls[k] - prev_recall;
        if dr > 0.0 {
            ap += dr * envelope[k];
            prev_recall = recalls[k];
        }
    }
    Ok(Some(ap))
}

/// Mean AP at the given IoU threshold over classes with ground truth.
pub fn map_at(
    detections: &[DetectionRecord],
    ground_truth: &[AnnotationSet],
    class_ids: &[usize],
    iou_thresh: f64,
) -> Result<EvalResult> {
    let mut per_class_ap = BTreeMap::new();
    let mut per_class_gt = BTreeMap::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in class_ids {
        let gt_count: usize = ground_truth
            .iter()
            .map(|s| s.class_ids.iter().filter(|&&x| x == c).count())
            .sum();
        per_class_gt.insert(c, gt_count);
        let ap = average_precision(detections, ground_truth, c, iou_thresh)?;
        if let Some(v) = ap {
            sum += v;
            n += 1;
        }
        per_class_ap.insert(c, ap);
    }
    if n == 0 {
        return Err(Error::Eval("no class has any ground-truth instance".into()));
    }
    Ok(EvalResult {
        per_class_ap,
        map: sum / n as f64,
        iou_thresh,
        per_class_gt,
        n_detections: detections.len(),
    })
}

/// mAP@0.5, the headline benchmark metric.
pub fn map50(
    detections: &[DetectionRecord],
    ground_truth: &[AnnotationSet],
    class_ids: &[usize],
) -> Result<EvalResult> {
    map_at(detections, ground_truth, class_ids, 0.5)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PseudoQuality {
    /// Matched pseudo / total pseudo; absent when there are no pseudo labels.
    pub precision: Option<f64>,
    /// Matched GT / total GT.
    pub recall: f64,
    /// Mean IoU of matched pairs; absent when nothing matched.
    pub mean_iou: Option<f64>,
    pub n_pseudo: usize,
    pub n_gt: usize,
}

/// Class-aware greedy IoU-0.5 matching of pseudo labels against ground truth.
pub fn pseudo_label_quality(
    pseudo: &[PseudoLabelSet],
    ground_truth: &[AnnotationSet],
) -> Result<PseudoQuality> {
    let detections: Vec<DetectionRecord> = pseudo
        .iter()
        .flat_map(|set| {
            set.boxes
                .iter()
                .zip(&set.class_ids)
                .zip(&set.scores)
                .map(|((&bbox, &class_id), &score)| DetectionRecord {
                    image_id: set.source_image_id,
                    class_id,
                    score,
                    bbox,
                })
        })
        .collect();
    let n_gt: usize = ground_truth.iter().map(|s| s.len()).sum();
    let n_pseudo = detections.len();
    if n_pseudo == 0 {
        return Ok(PseudoQuality {
            precision: None,
            recall: 0.0,
            mean_iou: None,
            n_pseudo,
            n_gt,
        });
    }
    let classes: std::collections::BTreeSet<usize> =
        detections.iter().map(|d| d.class_id).collect();
    let mut matched = 0usize;
    let mut iou_sum = 0.0;
    for &c in &classes {
        // reuse the greedy matcher and accumulate matched IoUs
        let mut gt_boxes: BTreeMap<i64, Vec<BoxCxcywh>> = BTreeMap::new();
        for set in ground_truth {
            let boxes: Vec<BoxCxcywh> = set
                .boxes
                .iter()
                .zip(&set.class_ids)
                .filter(|(_, &cc)| cc == c)
                .map(|(&b, _)| b)
                .collect();
            if !boxes.is_empty() {
                gt_boxes.entry(set.image_id).or_default().extend(boxes);
            }
        }
        let mut used: BTreeMap<i64, Vec<bool>> = gt_boxes
            .iter()
            .map(|(&id, v)| (id, vec![false; v.len()]))
            .collect();
        let mut ranked: Vec<&DetectionRecord> =
            detections.iter().filter(|d| d.class_id == c).collect();
        ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        for det in ranked {
            let Some(boxes) = gt_boxes.get(&det.image_id) else { continue };
            let used_flags = used.get_mut(&det.image_id).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (k, &gb) in boxes.iter().enumerate() {
                if used_flags[k] {
                    continue;
                }
                let v = iou(det.bbox, gb)?;
                if v >= 0.5 && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            if let Some((k, v)) = best {
                used_flags[k] = true;
                matched += 1;
                iou_sum += v;
            }
        }
    }
    Ok(PseudoQuality {
        precision: Some(matched as f64 / n_pseudo as f64),
        recall: if n_gt == 0 { 0.0 } else { matched as f64 / n_gt as f64 },
        mean_iou: (matched > 0).then(|| iou_sum / matched as f64),
        n_pseudo,
        n_gt,
    })
}

/// Turn raw per-query predictions into detection records (arg-max foreground
/// class with its softmax probability as the score).
pub fn predictions_to_records(
    prediction: &crate::mean_teacher::Prediction,
    image_ids: &[i64],
    n_classes: usize,
) -> Vec<DetectionRecord> {
    let (bs, nq, nc) = {
        let s = prediction.class_logits.shape();
        (s[0], s[1], s[2])
    };
    assert_eq!(nc, n_classes + 1);
    let mut out = Vec::with_capacity(bs * nq);
    for i in 0..bs {
        for q in 0..nq {
            let row: Vec<f64> = (0..nc)
                .map(|c| prediction.class_logits[(i, q, c)] as f64)
                .collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let (mut best_c, mut best_p) = (0usize, f64::NEG_INFINITY);
            for c in 0..n_classes {
                let p = exps[c] / denom;
                if p > best_p {
                    best_p = p;
                    best_c = c;
                }
            }
            out.push(DetectionRecord {
                image_id: image_ids[i],
                class_id: best_c,
                score: best_p,
                bbox: BoxCxcywh::new(
                    prediction.box_preds[(i, q, 0)],
                    prediction.box_preds[(i, q, 1)],
                    prediction.box_preds[(i, q, 2)],
                    prediction.box_preds[(i, q, 3)],
                ),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image_id: i64, entries: &[(usize, BoxCxcywh)]) -> AnnotationSet {
        AnnotationSet {
            image_id,
            boxes: entries.iter().map(|e| e.1).collect(),
            class_ids: entries.iter().map(|e| e.0).collect(),
        }
    }

    fn det(image_id: i64, class_id: usize, score: f64, bbox: BoxCxcywh) -> DetectionRecord {
        DetectionRecord { image_id, class_id, score, bbox }
    }

    #[test]
    fn perfect_single_detection() {
        let b = BoxCxcywh::new(0.5, 0.5, 0.2, 0.2);
        let gts = vec![gt(0, &[(1, b)])];
        let dets = vec![det(0, 1, 0.9, b)];
        let ap = average_precision(&dets, &gts, 1, 0.5).unwrap().unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn below_threshold_is_zero() {
        let b = BoxCxcywh::new(0.5, 0.5, 0.2, 0.2);
        // shifted so IoU ~ 0.4
        let shifted = BoxCxcywh::new(0.56, 0.53, 0.2, 0.2);
        assert!(iou(b, shifted).unwrap() < 0.5);
        let gts = vec![gt(0, &[(1, b)])];
        let dets = vec![det(0, 1, 0.9, shifted)];
        let ap = average_precision(&dets, &gts, 1, 0.5).unwrap().unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn hand_built_tp_fp_tp_curve() {
        // two GT, ranked detections (TP, FP, TP):
        // precisions (1, 1/2, 2/3), recalls (1/2, 1/2, 1); AP = 1/2 + 1/2 * 2/3 = 5/6
        let b1 = BoxCxcywh::new(0.25, 0.25, 0.2, 0.2);
        let b2 = BoxCxcywh::new(0.75, 0.75, 0.2, 0.2);
        let far = BoxCxcywh::new(0.25, 0.75, 0.2, 0.2);
        let gts = vec![gt(0, &[(0, b1), (0, b2)])];
        let dets = vec![det(0, 0, 0.9, b1), det(0, 0, 0.8, far), det(0, 0, 0.7, b2)];
        let ap = average_precision(&dets, &gts, 0, 0.5).unwrap().unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn map_means_over_present_classes() {
        let b = BoxCxcywh::new(0.5, 0.5, 0.2, 0.2);
        let b2 = BoxCxcywh::new(0.2, 0.2, 0.2, 0.2);
        let gts = vec![gt(0, &[(0, b), (1, b2)])];
        // class 0 perfect, class 1 missed entirely, class 2 absent from GT
        let dets = vec![det(0, 0, 0.9, b)];
        let res = map_at(&dets, &gts, &[0, 1, 2], 0.5).unwrap();
        assert_eq!(res.per_class_ap[&0], Some(1.0));
        assert_eq!(res.per_class_ap[&1], Some(0.0));
        assert_eq!(res.per_class_ap[&2], None);
        assert!((res.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_gt_is_eval_error() {
        let dets = vec![];
        let gts = vec![gt(0, &[])];
        assert!(matches!(
            map50(&dets, &gts, &[0, 1]),
            Err(Error::Eval(_))
        ));
    }

    #[test]
    fn empty_detections_give_zero_map() {
        let b = BoxCxcywh::new(0.5, 0.5, 0.2, 0.2);
        let gts = vec![gt(0, &[(0, b)])];
        let res = map50(&[], &gts, &[0]).unwrap();
        assert_eq!(res.map, 0.0);
    }

    #[test]
    fn map_invariant_to_class_relabeling() {
        let b1 = BoxCxcywh::new(0.3, 0.3, 0.2, 0.2);
        let b2 = BoxCxcywh::new(0.7, 0.7, 0.2, 0.2);
        let near_b2 = BoxCxcywh::new(0.71, 0.7, 0.2, 0.2);
        let gts = vec![gt(0, &[(0, b1), (1, b2)])];
        let dets = vec![det(0, 0, 0.9, b1), det(0, 1, 0.8, near_b2), det(0, 1, 0.7, b1)];
        let res = map50(&dets, &gts, &[0, 1]).unwrap();
        // swap class ids 0 <-> 1 everywhere
        let gts2 = vec![gt(0, &[(1, b1), (0, b2)])];
        let dets2 = vec![det(0, 1, 0.9, b1), det(0, 0, 0.8, near_b2), det(0, 0, 0.7, b1)];
        let res2 = map50(&dets2, &gts2, &[0, 1]).unwrap();
        assert!((res.map - res2.map).abs() < 1e-12);
    }

    #[test]
    fn pseudo_quality_identity_and_spurious() {
        let b = BoxCxcywh::new(0.5, 0.5, 0.2, 0.2);
        let gts = vec![gt(7, &[(2, b)])];
        let exact = PseudoLabelSet {
            boxes: vec![b],
            class_ids: vec![2],
            scores: vec![0.9],
            source_image_id: 7,
            threshold_used: 0.5,
        };
        let q = pseudo_label_quality(&[exact.clone()], &gts).unwrap();
        assert_eq!(q.precision, Some(1.0));
        assert_eq!(q.recall, 1.0);
        assert_eq!(q.mean_iou, Some(1.0));

        let mut with_spurious = exact;
        with_spurious.boxes.push(BoxCxcywh::new(0.1, 0.1, 0.1, 0.1));
        with_spurious.class_ids.push(2);
        with_spurious.scores.push(0.8);
        let q = pseudo_label_quality(&[with_spurious], &gts).unwrap();
        assert_eq!(q.precision, Some(0.5));
        assert_eq!(q.recall, 1.0);

        let q = pseudo_label_quality(&[], &gts).unwrap();
        assert_eq!(q.precision, None);
        assert_eq!(q.recall, 0.0);
    }
}
