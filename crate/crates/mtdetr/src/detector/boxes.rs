//! Box overlap measures: scalar IoU / GIoU for matching and evaluation,
//! plus a differentiable GIoU built from graph primitives for the loss.

use tapegrad::{Element, Graph, TensorId};

use crate::data::BoxCxcywh;
use crate::error::{Error, Result};

fn to_xyxy_f64(b: BoxCxcywh) -> [f64; 4] {
    let [x1, y1, x2, y2] = b.to_xyxy();
    [x1 as f64, y1 as f64, x2 as f64, y2 as f64]
}

fn check_box(b: BoxCxcywh) -> Result<()> {
    if b.w <= 0.0 || b.h <= 0.0 || !b.w.is_finite() || !b.h.is_finite() {
        return Err(Error::Domain(format!("degenerate box {b:?}")));
    }
    Ok(())
}

/// Intersection-over-union of two center-format boxes.
pub fn iou(a: BoxCxcywh, b: BoxCxcywh) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    let [ax1, ay1, ax2, ay2] = to_xyxy_f64(a);
    let [bx1, by1, bx2, by2] = to_xyxy_f64(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    inter / union
}

/// Generalized IoU: `IoU - (enclosing - union) / enclosing`, in [-1, 1].
pub fn giou(a: BoxCxcywh, b: BoxCxcywh) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    Ok(giou_unchecked(a, b))
}

pub(crate) fn giou_unchecked(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    let [ax1, ay1, ax2, ay2] = to_xyxy_f64(a);
    let [bx1, by1, bx2, by2] = to_xyxy_f64(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enclosing = ew * eh;
    inter / union - (enclosing - union) / enclosing
}

/// Split an (N,4) cxcywh tensor into xyxy corner columns, each (N,1).
fn corners<F: Element>(g: &mut Graph<F>, boxes: TensorId) -> [TensorId; 4] {
    let cx = g.narrow(boxes, 1, 0, 1);
    let cy = g.narrow(boxes, 1, 1, 1);
    let w = g.narrow(boxes, 1, 2, 1);
    let h = g.narrow(boxes, 1, 3, 1);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let x1 = g.sub(cx, hw);
    let x2 = g.add(cx, hw);
    let y1 = g.sub(cy, hh);
    let y2 = g.add(cy, hh);
    [x1, y1, x2, y2]
}

/// Differentiable GIoU between paired (N,4) cxcywh boxes; returns (N,1).
pub fn giou_pairs<F: Element>(g: &mut Graph<F>, a: TensorId, b: TensorId) -> TensorId {
    let [ax1, ay1, ax2, ay2] = corners(g, a);
    let [bx1, by1, bx2, by2] = corners(g, b);

    let ix1 = g.maximum(ax1, bx1);
    let iy1 = g.maximum(ay1, by1);
    let ix2 = g.minimum(ax2, bx2);
    let iy2 = g.minimum(ay2, by2);
    let iw = {
        let d = g.sub(ix2, ix1);
        g.relu(d)
    };
    let ih = {
        let d = g.sub(iy2, iy1);
        g.relu(d)
    };
    let inter = g.mul(iw, ih);

    let wa = {
        let d = g.sub(ax2, ax1);
        d
    };
    let ha = g.sub(ay2, ay1);
    let wb = g.sub(bx2, bx1);
    let hb = g.sub(by2, by1);
    let area_a = g.mul(wa, ha);
    let area_b = g.mul(wb, hb);
    let union = {
        let s = g.add(area_a, area_b);
        g.sub(s, inter)
    };

    let ex1 = g.minimum(ax1, bx1);
    let ey1 = g.minimum(ay1, by1);
    let ex2 = g.maximum(ax2, bx2);
    let ey2 = g.maximum(ay2, by2);
    let ew = g.sub(ex2, ex1);
    let eh = g.sub(ey2, ey1);
    let enclosing = g.mul(ew, eh);

    let iou = g.div(inter, union);
    let gap = g.sub(enclosing, union);
    let penalty = g.div(gap, enclosing);
    g.sub(iou, penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes() {
        let b = BoxCxcywh::new(0.4, 0.6, 0.2, 0.3);
        assert_eq!(iou(b, b).unwrap(), 1.0);
        assert_eq!(giou(b, b).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_touching_quadrants() {
        // xyxy [0,0,.5,.5] vs [.5,.5,1,1]: IoU 0, enclosing 1, union 0.5 -> -0.5
        let a = BoxCxcywh::new(0.25, 0.25, 0.5, 0.5);
        let b = BoxCxcywh::new(0.75, 0.75, 0.5, 0.5);
        assert_eq!(iou(a, b).unwrap(), 0.0);
        assert!((giou(a, b).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn hand_iou_third() {
        // xyxy [0,0,2,2] vs [1,0,3,2] scaled by 1/3: inter 2, union 6
        let s = 1.0 / 3.0f32;
        let a = BoxCxcywh::from_xyxy(0.0, 0.0, 2.0 * s, 2.0 * s);
        let b = BoxCxcywh::from_xyxy(s, 0.0, 3.0 * s, 2.0 * s);
        assert!((iou(a, b).unwrap() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_box_rejected() {
        let a = BoxCxcywh::new(0.5, 0.5, 0.0, 0.1);
        let b = BoxCxcywh::new(0.5, 0.5, 0.1, 0.1);
        assert!(matches!(iou(a, b), Err(crate::error::Error::Domain(_))));
        assert!(matches!(giou(a, b), Err(crate::error::Error::Domain(_))));
    }

    #[test]
    fn symmetry_and_range() {
        let mut rng = crate::data::stream_rng(&[5]);
        use rand::Rng;
        for _ in 0..200 {
            let rb = |rng: &mut rand_chacha::ChaCha8Rng| {
                let w = rng.gen_range(0.05..0.5f32);
                let h = rng.gen_range(0.05..0.5f32);
                BoxCxcywh::new(
                    rng.gen_range(w / 2.0..1.0 - w / 2.0),
                    rng.gen_range(h / 2.0..1.0 - h / 2.0),
                    w,
                    h,
                )
            };
            let (a, b) = (rb(&mut rng), rb(&mut rng));
            let i = iou(a, b).unwrap();
            let gi = giou(a, b).unwrap();
            assert!((0.0..=1.0).contains(&i));
            assert!((-1.0..=1.0).contains(&gi));
            assert!((iou(b, a).unwrap() - i).abs() < 1e-12);
            assert!((giou(b, a).unwrap() - gi).abs() < 1e-12);
            assert!(gi <= i + 1e-12);
        }
    }

    #[test]
    fn graph_giou_matches_scalar() {
        use ndarray::IxDyn;
        let a = BoxCxcywh::new(0.3, 0.4, 0.2, 0.25);
        let b = BoxCxcywh::new(0.5, 0.45, 0.3, 0.2);
        let mut g = Graph::<f64>::new();
        let ta = g.constant(
            ndarray::ArrayD::from_shape_vec(
                IxDyn(&[1, 4]),
                vec![a.cx as f64, a.cy as f64, a.w as f64, a.h as f64],
            )
            .unwrap(),
        );
        let tb = g.constant(
            ndarray::ArrayD::from_shape_vec(
                IxDyn(&[1, 4]),
                vec![b.cx as f64, b.cy as f64, b.w as f64, b.h as f64],
            )
            .unwrap(),
        );
        let gi = giou_pairs(&mut g, ta, tb);
        let got = g.value(gi)[[0, 0]];
        assert!((got - giou(a, b).unwrap()).abs() < 1e-6);
    }
}
