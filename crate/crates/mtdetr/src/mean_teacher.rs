//! Teacher-student wrapper: EMA parameter tracking, shared object queries,
//! and pseudo-label generation from thresholded teacher predictions.

use ndarray::{Array3, Array4, ArrayD};
use tapegrad::{Binder, Element, Graph, ParamMap, ParamSource};

use crate::data::{AnnotationSet, BoxCxcywh, Domain, ImageBatch};
use crate::detector::{Detector, ForwardOpts, QUERY_PARAM};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.999;
pub const DEFAULT_TAU: f64 = 0.5;

/// EMA update: `teacher <- alpha * teacher + (1 - alpha) * student` for
/// every parameter, with the names in `copy_verbatim` copied bit-exactly
/// from the student instead.
pub fn ema_update_maps<F: Element>(
    teacher: &mut ParamMap<F>,
    student: &ParamMap<F>,
    alpha: f64,
    copy_verbatim: &[&str],
) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::State(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let a = F::from_f64(alpha);
    let one = F::one();
    for (name, tv) in teacher.iter_mut() {
        let sv = student
            .get(name)
            .ok_or_else(|| Error::State(format!("parameter {name} missing from student")))?;
        if sv.shape() != tv.shape() {
            return Err(Error::State(format!(
                "parameter {name}: teacher shape {:?} vs student {:?}",
                tv.shape(),
                sv.shape()
            )));
        }
        if copy_verbatim.iter().any(|v| v == name) {
            tv.assign(sv);
        } else {
            ndarray::Zip::from(tv).and(sv).for_each(|t, &s| {
                *t = a * *t + (one - a) * s;
            });
        }
    }
    Ok(())
}

/// Student parameters plus an EMA teacher. With `share_queries` the object
/// query embedding is one shared tensor: the teacher always reads the
/// student's current queries, and its own entry is refreshed verbatim on
/// every EMA update. Without sharing the queries follow the plain EMA rule.
#[derive(Clone, Debug)]
pub struct MeanTeacherPair {
    pub student: ParamMap<f32>,
    teacher: ParamMap<f32>,
    pub alpha: f64,
    pub share_queries: bool,
}

impl MeanTeacherPair {
    /// Teacher starts as a deep copy of the student.
    pub fn init(student: ParamMap<f32>, alpha: f64, share_queries: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
        }
        let teacher = student.clone();
        Ok(Self { student, teacher, alpha, share_queries })
    }

    /// Rebuild a pair from checkpointed maps.
    pub fn from_maps(
        student: ParamMap<f32>,
        teacher: ParamMap<f32>,
        alpha: f64,
        share_queries: bool,
    ) -> Result<Self> {
        if student.len() != teacher.len() || student.names().ne(teacher.names()) {
            return Err(Error::State("student/teacher parameter names differ".into()));
        }
        Ok(Self { student, teacher, alpha, share_queries })
    }

    pub fn ema_update(&mut self) -> Result<()> {
        let verbatim: &[&str] = if self.share_queries { &[QUERY_PARAM] } else { &[] };
        ema_update_maps(&mut self.teacher, &self.student, self.alpha, verbatim)
    }

    /// Parameter view the teacher forward pass runs against.
    pub fn teacher_params(&self) -> TeacherParams<'_> {
        TeacherParams { pair: self }
    }

    /// Materialized teacher map (what gets checkpointed): with sharing, the
    /// query entry reflects the student's current embedding.
    pub fn teacher_snapshot(&self) -> ParamMap<f32> {
        let mut snap = self.teacher.clone();
        if self.share_queries {
            snap.set(QUERY_PARAM, self.student.get(QUERY_PARAM).unwrap().clone());
        }
        snap
    }

    /// Raw teacher entry, ignoring sharing (for invariant tests).
    pub fn teacher_entry(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.teacher.get(name)
    }

    /// Bit-equality of teacher and student query embeddings as currently
    /// observed by the teacher forward pass.
    pub fn queries_bitequal(&self) -> bool {
        let s = self.student.get(QUERY_PARAM).unwrap();
        let t = self.teacher_params().fetch(QUERY_PARAM).unwrap().clone();
        s.iter().zip(t.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Teacher-side [`ParamSource`]: resolves the query embedding to the
/// student's tensor when sharing is on.
pub struct TeacherParams<'a> {
    pair: &'a MeanTeacherPair,
}

impl ParamSource<f32> for TeacherParams<'_> {
    fn fetch(&self, name: &str) -> Option<&ArrayD<f32>> {
        if self.pair.share_queries && name == QUERY_PARAM {
            self.pair.student.get(name)
        } else {
            self.pair.teacher.get(name)
        }
    }
}

/// Raw per-query predictions from an inference pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// (B, Q, K+1)
    pub class_logits: Array3<f32>,
    /// (B, Q, 4) cxcywh
    pub box_preds: Array3<f32>,
}

/// Forward a batch in inference mode (no tape, no alignment tokens).
pub fn predict(
    detector: &Detector,
    params: &dyn ParamSource<f32>,
    pixels: &Array4<f32>,
) -> Result<Prediction> {
    let mut g = Graph::<f32>::inference();
    let mut binder = Binder::new(params);
    let fwd = detector.forward(&mut g, &mut binder, pixels, ForwardOpts::default())?;
    let class_logits = g
        .value(fwd.class_logits)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("logits rank");
    let box_preds = g
        .value(fwd.box_preds)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("boxes rank");
    Ok(Prediction { class_logits, box_preds })
}

/// Teacher inference on a weakly augmented target batch.
pub fn teacher_predict(
    pair: &MeanTeacherPair,
    detector: &Detector,
    weak_images: &ImageBatch,
) -> Result<Prediction> {
    if weak_images.domain == Domain::Source {
        return Err(Error::Usage(
            "teacher_predict labels only the target domain".into(),
        ));
    }
    predict(detector, &pair.teacher_params(), &weak_images.pixels)
}

/// Teacher detections kept as training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub boxes: Vec<BoxCxcywh>,
    pub class_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub source_image_id: i64,
    pub threshold_used: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn to_annotations(&self) -> AnnotationSet {
        AnnotationSet {
            image_id: self.source_image_id,
            boxes: self.boxes.clone(),
            class_ids: self.class_ids.clone(),
        }
    }
}

/// Keep every query whose maximal foreground softmax probability reaches
/// `tau`; background never becomes a pseudo label.
pub fn generate_pseudo_labels(
    prediction: &Prediction,
    batch_index: usize,
    n_classes: usize,
    tau: f64,
    image_id: i64,
) -> Result<PseudoLabelSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau {tau} outside (0,1)")));
    }
    let logits = prediction.class_logits.index_axis(ndarray::Axis(0), batch_index);
    let boxes = prediction.box_preds.index_axis(ndarray::Axis(0), batch_index);
    let nq = logits.shape()[0];
    let nc = logits.shape()[1];
    assert_eq!(nc, n_classes + 1);
    let mut out = PseudoLabelSet {
        boxes: Vec::new(),
        class_ids: Vec::new(),
        scores: Vec::new(),
        source_image_id: image_id,
        threshold_used: tau,
    };
    for q in 0..nq {
        let row: Vec<f64> = (0..nc).map(|c| logits[(q, c)] as f64).collect();
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
        if best_p >= tau {
            out.boxes.push(BoxCxcywh::new(
                boxes[(q, 0)],
                boxes[(q, 1)],
                boxes[(q, 2)],
                boxes[(q, 3)],
            ));
            out.class_ids.push(best_c);
            out.scores.push(best_p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn logits_from_fg_scores(scores: &[f64], n_classes: usize) -> Prediction {
        // craft logits whose softmax max-foreground prob equals the given score:
        // put the rest of the mass on background
        let nq = scores.len();
        let mut logits = Array3::<f32>::zeros((1, nq, n_classes + 1));
        for (q, &p) in scores.iter().enumerate() {
            // two-way split between class 0 and background
            let l = (p / (1.0 - p)).ln() as f32;
            logits[(0, q, 0)] = l;
            for c in 1..n_classes {
                logits[(0, q, c)] = -30.0;
            }
            logits[(0, q, n_classes)] = 0.0;
        }
        let boxes = Array3::from_elem((1, nq, 4), 0.5f32);
        Prediction { class_logits: logits, box_preds: boxes }
    }

    #[test]
    fn threshold_keeps_expected_queries() {
        let pred = logits_from_fg_scores(&[0.7, 0.4, 0.55], 3);
        let set = generate_pseudo_labels(&pred, 0, 3, 0.5, 42).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.scores.iter().all(|&s| s >= 0.5));
        assert_eq!(set.source_image_id, 42);
        assert_eq!(set.threshold_used, 0.5);
    }

    #[test]
    fn background_dominated_yields_empty_set() {
        let mut logits = Array3::<f32>::zeros((1, 4, 6));
        for q in 0..4 {
            logits[(0, q, 5)] = 10.0;
        }
        let pred = Prediction {
            class_logits: logits,
            box_preds: Array3::from_elem((1, 4, 4), 0.5f32),
        };
        let set = generate_pseudo_labels(&pred, 0, 5, 0.5, 0).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn invalid_tau_rejected() {
        let pred = logits_from_fg_scores(&[0.7], 2);
        assert!(generate_pseudo_labels(&pred, 0, 2, 0.0, 0).is_err());
        assert!(generate_pseudo_labels(&pred, 0, 2, 1.0, 0).is_err());
    }

    #[test]
    fn threshold_monotone_subsets() {
        let pred = logits_from_fg_scores(&[0.9, 0.62, 0.5001, 0.31, 0.77], 4);
        let taus = [0.1, 0.3, 0.5, 0.7, 0.9];
        for w in taus.windows(2) {
            let lo = generate_pseudo_labels(&pred, 0, 4, w[0], 0).unwrap();
            let hi = generate_pseudo_labels(&pred, 0, 4, w[1], 0).unwrap();
            for (b, c) in hi.boxes.iter().zip(&hi.class_ids) {
                assert!(
                    lo.boxes
                        .iter()
                        .zip(&lo.class_ids)
                        .any(|(b2, c2)| b2 == b && c2 == c),
                    "tau={} set not a subset of tau={}",
                    w[1],
                    w[0]
                );
            }
        }
    }

    #[test]
    fn ema_closed_form_and_endpoints() {
        use tapegrad::init;
        let mut rng = crate::data::stream_rng(&[3]);
        let mut student = ParamMap::<f64>::new();
        student.insert("a", init::normal(&mut rng, &[4, 3], 0.0, 1.0));
        student.insert("b", init::normal(&mut rng, &[7], 0.0, 1.0));
        let teacher0 = {
            let mut t = ParamMap::<f64>::new();
            t.insert("a", init::normal(&mut rng, &[4, 3], 0.0, 1.0));
            t.insert("b", init::normal(&mut rng, &[7], 0.0, 1.0));
            t
        };
        for alpha in [0.0, 0.5, 0.999, 1.0] {
            let mut teacher = teacher0.clone();
            let k = 50;
            for _ in 0..k {
                ema_update_maps(&mut teacher, &student, alpha, &[]).unwrap();
            }
            let ak = alpha.powi(k);
            for (name, tv) in teacher.iter() {
                let t0 = teacher0.get(name).unwrap();
                let sv = student.get(name).unwrap();
                for ((&t, &t0), &s) in tv.iter().zip(t0.iter()).zip(sv.iter()) {
                    let expect = ak * t0 + (1.0 - ak) * s;
                    assert!((t - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn scalar_ema_hand_value() {
        let mut teacher = ParamMap::<f64>::new();
        teacher.insert("p", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), 2.0));
        let mut student = ParamMap::<f64>::new();
        student.insert("p", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0));
        ema_update_maps(&mut teacher, &student, 0.9, &[]).unwrap();
        assert!((teacher.get("p").unwrap()[[0]] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn mismatched_maps_are_state_errors() {
        let mut teacher = ParamMap::<f32>::new();
        teacher.insert("p", ndarray::ArrayD::zeros(ndarray::IxDyn(&[2])));
        let mut student = ParamMap::<f32>::new();
        student.insert("p", ndarray::ArrayD::zeros(ndarray::IxDyn(&[3])));
        assert!(matches!(
            ema_update_maps(&mut teacher, &student, 0.5, &[]),
            Err(Error::State(_))
        ));
    }
}
