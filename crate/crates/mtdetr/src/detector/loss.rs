//! Set-based detection loss: Hungarian matching, then weighted
//! cross-entropy over all queries plus L1 and GIoU terms over matched pairs.

use ndarray::{Array2, ArrayD, IxDyn};
use tapegrad::{Element, Graph, TensorId};

use super::boxes::{giou_pairs, giou_unchecked};
use super::matcher::{hungarian_min_cost, MatchResult};
use super::DetectorConfig;
use crate::data::{AnnotationSet, BoxCxcywh};
use crate::error::{Error, Result};

/// Matching cost weights (classification, L1, GIoU).
#[derive(Clone, Copy, Debug)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { cls: 2.0, l1: 5.0, giou: 2.0 }
    }
}

/// Down-weight applied to the background class in the CE term.
pub const BACKGROUND_WEIGHT: f64 = 0.1;

pub struct DetectionLoss {
    /// 2*cls + 5*l1 + 2*giou
    pub total: TensorId,
    pub cls: TensorId,
    pub l1: Option<TensorId>,
    pub giou: Option<TensorId>,
    pub matches: Vec<MatchResult>,
}

/// Pair cost matrix (queries x targets) for one image.
pub fn pair_costs(
    probs: &Array2<f64>,
    boxes: &[BoxCxcywh],
    targets: &AnnotationSet,
    w: CostWeights,
) -> Array2<f64> {
    let nq = probs.nrows();
    let nt = targets.len();
    Array2::from_shape_fn((nq, nt), |(q, t)| {
        let cls_cost = -probs[(q, targets.class_ids[t])];
        let bq = boxes[q];
        let bt = targets.boxes[t];
        let l1 = (bq.cx - bt.cx).abs() as f64
            + (bq.cy - bt.cy).abs() as f64
            + (bq.w - bt.w).abs() as f64
            + (bq.h - bt.h).abs() as f64;
        let gi = giou_unchecked(bq, bt);
        w.cls * cls_cost + w.l1 * l1 + w.giou * (1.0 - gi)
    })
}

/// Run Hungarian matching per image from the current prediction values.
pub fn match_batch<F: Element>(
    g: &Graph<F>,
    cfg: &DetectorConfig,
    class_logits: TensorId,
    box_preds: TensorId,
    targets: &[AnnotationSet],
    weights: CostWeights,
) -> Result<Vec<MatchResult>> {
    let logits = g.value(class_logits);
    let boxes = g.value(box_preds);
    let (bs, nq, nc) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    assert_eq!(bs, targets.len(), "batch/targets length mismatch");
    assert_eq!(nc, cfg.n_classes + 1);
    let mut out = Vec::with_capacity(bs);
    for (i, tset) in targets.iter().enumerate() {
        if tset.is_empty() {
            out.push(MatchResult { pairs: Vec::new() });
            continue;
        }
        if tset.len() > nq {
            return Err(Error::Capacity(format!(
                "image {}: {} targets exceed {} queries",
                tset.image_id,
                tset.len(),
                nq
            )));
        }
        // softmax probabilities in f64
        let mut probs = Array2::<f64>::zeros((nq, nc));
        for q in 0..nq {
            let row: Vec<f64> = (0..nc).map(|c| logits[[i, q, c]].as_f64()).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..nc {
                probs[(q, c)] = exps[c] / denom;
            }
        }
        let pred_boxes: Vec<BoxCxcywh> = (0..nq)
            .map(|q| {
                BoxCxcywh::new(
                    boxes[[i, q, 0]].as_f64() as f32,
                    boxes[[i, q, 1]].as_f64() as f32,
                    boxes[[i, q, 2]].as_f64() as f32,
                    boxes[[i, q, 3]].as_f64() as f32,
                )
            })
            .collect();
        let cost = pair_costs(&probs, &pred_boxes, tset, weights);
        out.push(hungarian_min_cost(&cost)?);
    }
    Ok(out)
}

/// Build the differentiable loss given predictions and targets.
pub fn detection_loss<F: Element>(
    g: &mut Graph<F>,
    cfg: &DetectorConfig,
    class_logits: TensorId,
    box_preds: TensorId,
    targets: &[AnnotationSet],
) -> Result<DetectionLoss> {
    for t in targets {
        t.validate().map_err(|e| Error::Domain(format!("invalid targets: {e}")))?;
    }
    let matches = match_batch(g, cfg, class_logits, box_preds, targets, CostWeights::default())?;

    let (bs, nq, nc) = {
        let s = g.shape(class_logits);
        (s[0], s[1], s[2])
    };
    let background = cfg.background_class();

    // classification over all queries, matched queries labeled with their
    // target class, background down-weighted
    let mut ce_targets = vec![background; bs * nq];
    let mut ce_weights = vec![F::from_f64(BACKGROUND_WEIGHT); bs * nq];
    let mut matched_rows: Vec<usize> = Vec::new();
    let mut matched_boxes: Vec<BoxCxcywh> = Vec::new();
    for (i, m) in matches.iter().enumerate() {
        for &(q, t) in &m.pairs {
            ce_targets[i * nq + q] = targets[i].class_ids[t];
            ce_weights[i * nq + q] = F::one();
            matched_rows.push(i * nq + q);
            matched_boxes.push(targets[i].boxes[t]);
        }
    }
    let flat_logits = g.reshape(class_logits, &[bs * nq, nc]);
    let ce = g.softmax_cross_entropy(flat_logits, &ce_targets);
    let wconst = g.constant(ArrayD::from_shape_vec(IxDyn(&[bs * nq]), ce_weights).unwrap());
    let weighted = g.mul(ce, wconst);
    let cls = g.mean_all(weighted);

    let w = CostWeights::default();
    let (l1, giou_loss, total) = if matched_rows.is_empty() {
        (None, None, g.scale(cls, w.cls))
    } else {
        let nm = matched_rows.len();
        let flat_boxes = g.reshape(box_preds, &[bs * nq, 4]);
        let pred = g.index_select(flat_boxes, 0, &matched_rows);
        let tgt_vals: Vec<F> = matched_boxes
            .iter()
            .flat_map(|b| [b.cx, b.cy, b.w, b.h])
            .map(|v| F::from_f64(v as f64))
            .collect();
        let tgt = g.constant(ArrayD::from_shape_vec(IxDyn(&[nm, 4]), tgt_vals).unwrap());

        let diff = g.sub(pred, tgt);
        let absdiff = g.abs(diff);
        let l1_sum = g.sum_all(absdiff);
        let l1 = g.scale(l1_sum, 1.0 / nm as f64);

        let gi = giou_pairs(g, pred, tgt); // (nm, 1)
        let ones = g.constant(ArrayD::from_elem(IxDyn(&[nm, 1]), F::one()));
        let gap = g.sub(ones, gi);
        let gsum = g.sum_all(gap);
        let gl = g.scale(gsum, 1.0 / nm as f64);

        let t1 = g.scale(cls, w.cls);
        let t2 = g.scale(l1, w.l1);
        let t3 = g.scale(gl, w.giou);
        let t12 = g.add(t1, t2);
        let total = g.add(t12, t3);
        (Some(l1), Some(gl), total)
    };

    Ok(DetectionLoss { total, cls, l1, giou: giou_loss, matches })
}
