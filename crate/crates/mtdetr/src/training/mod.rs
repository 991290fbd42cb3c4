//! Two-step progressive training: supervised burn-in with adversarial
//! alignment, then alternating source/target transfer epochs with pseudo
//! labels from the EMA teacher.

pub mod ablate;
pub mod report;

pub use report::{EpochRecord, TrainReport};

use std::time::Instant;

use ndarray::{Array3, Array4};
use rand_chacha::ChaCha8Rng;
use tapegrad::optim::{clip_global_norm, Adam};
use tapegrad::{Binder, Graph, ParamMap, ParamSource, TensorId};

use crate::alignment::{self, AlignmentWeights};
use crate::config::{Components, TrainConfig, GRAD_CLIP_NORM};
use crate::data::{
    mix_seed, stream_rng, AnnotationSet, Dataset, Domain, ImageBatch, StrongExtras, WeakAug,
};
use crate::detector::loss::detection_loss;
use crate::detector::{Detector, DetectorForward, ForwardOpts};
use crate::error::{Error, Result};
use crate::eval::{predictions_to_records, pseudo_label_quality, EvalResult};
use crate::mean_teacher::{
    generate_pseudo_labels, predict, teacher_predict, MeanTeacherPair, PseudoLabelSet,
};

pub const PHASE_BURN_IN: u64 = 1;
pub const PHASE_TRANSFER: u64 = 2;
const STREAM_MODEL_INIT: u64 = 17;
const STREAM_SHUFFLE_SRC: u64 = 1;
const STREAM_SHUFFLE_TGT: u64 = 2;
const STREAM_AUG: u64 = 3;
const STREAM_ADV_SRC: u64 = 4;

const EVAL_BATCH: usize = 8;

/// Everything a training phase needs to run.
pub struct TrainContext<'a> {
    pub detector: &'a Detector,
    pub config: &'a TrainConfig,
    pub components: Components,
    pub source: &'a Dataset,
    pub target: &'a Dataset,
    /// Target-domain validation split for per-epoch mAP records.
    pub val: Option<&'a Dataset>,
}

impl TrainContext<'_> {
    fn opts(&self) -> ForwardOpts {
        ForwardOpts {
            enc_domain_query: self.components.dqfa_enc,
            dec_domain_query: self.components.dqfa_dec,
        }
    }

    fn weights(&self) -> AlignmentWeights {
        self.components.effective_weights(self.config.alignment_weights())
    }

    fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::Config("source and target datasets must be non-empty".into()));
        }
        if self.source.n_classes() != self.detector.cfg.n_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model expects {}",
                self.source.n_classes(),
                self.detector.cfg.n_classes
            )));
        }
        self.config.validate()
    }
}

/// Eq.-style bookkeeping total: source detection + target detection minus
/// the adversarial log-likelihood. The optimizer never consumes this value;
/// the reversal layer realizes the inner maximization.
pub fn objective_report(det_src: f64, det_tgt: f64, adv: f64) -> f64 {
    det_src + det_tgt - adv
}

// ---------------------------------------------------------------------------
// step machinery
// ---------------------------------------------------------------------------

struct HeadTerms {
    enc_dqfa: Option<TensorId>,
    dec_dqfa: Option<TensorId>,
    bgpa: Option<TensorId>,
    tifa: Option<TensorId>,
}

fn alignment_terms(
    g: &mut Graph<f32>,
    binder: &mut Binder<'_, f32>,
    fwd: &DetectorForward,
    domain: Domain,
    components: Components,
    n_prototypes: usize,
    grl: f64,
) -> HeadTerms {
    let enc_dqfa = if components.dqfa_enc {
        let token = fwd.enc_domain_token.expect("enc domain token requested");
        Some(alignment::domain_adv_loss(g, binder, "align.disc_enc_dqfa", token, domain, grl))
    } else {
        None
    };
    let dec_dqfa = if components.dqfa_dec {
        let token = fwd.dec_domain_token.expect("dec domain token requested");
        Some(alignment::domain_adv_loss(g, binder, "align.disc_dec_dqfa", token, domain, grl))
    } else {
        None
    };
    let bgpa = components
        .bgpa
        .then(|| alignment::bgpa_loss(g, binder, fwd.decoder_features, n_prototypes, domain, grl));
    let tifa = components
        .tifa
        .then(|| alignment::tifa_loss(g, binder, fwd.encoder_tokens, domain, grl));
    HeadTerms { enc_dqfa, dec_dqfa, bgpa, tifa }
}

fn merge_term(g: &mut Graph<f32>, a: Option<TensorId>, b: Option<TensorId>) -> Option<TensorId> {
    match (a, b) {
        (Some(x), Some(y)) => Some(g.add(x, y)),
        (Some(x), None) => Some(x),
        (None, y) => y,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub det: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub head_enc_dqfa: Option<f64>,
    pub head_dec_dqfa: Option<f64>,
    pub head_bgpa: Option<f64>,
    pub head_tifa: Option<f64>,
    pub adv: f64,
    pub pre_clip_grad_norm: f64,
}

/// One optimizer step minimizing det_loss - adv. The labeled batch drives
/// the detection term; the opposite-domain batch exists purely for the
/// adversarial expectations.
#[allow(clippy::too_many_arguments)]
fn train_step(
    ctx: &TrainContext<'_>,
    params: &mut ParamMap<f32>,
    adam: &mut Adam<f32>,
    labeled_pixels: &Array4<f32>,
    labeled_annots: &[AnnotationSet],
    labeled_domain: Domain,
    use_det: bool,
    other_domain_pixels: Option<&Array4<f32>>,
) -> Result<StepStats> {
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::new(params);
    let opts = ctx.opts();
    let comp = ctx.components;
    let grl = ctx.config.lambda_grl;
    let m = ctx.detector.cfg.n_prototypes;

    let fwd_main = ctx.detector.forward(&mut g, &mut binder, labeled_pixels, opts)?;
    let det = if use_det {
        Some(detection_loss(
            &mut g,
            &ctx.detector.cfg,
            fwd_main.class_logits,
            fwd_main.box_preds,
            labeled_annots,
        )?)
    } else {
        None
    };

    let (src_terms, tgt_terms) = if comp.any_alignment() {
        let main_terms = alignment_terms(&mut g, &mut binder, &fwd_main, labeled_domain, comp, m, grl);
        let other_terms = match other_domain_pixels {
            Some(px) => {
                let fwd_other = ctx.detector.forward(&mut g, &mut binder, px, opts)?;
                let other_domain = match labeled_domain {
                    Domain::Source => Domain::Target,
                    Domain::Target => Domain::Source,
                };
                Some(alignment_terms(&mut g, &mut binder, &fwd_other, other_domain, comp, m, grl))
            }
            None => None,
        };
        match labeled_domain {
            Domain::Source => (Some(main_terms), other_terms),
            Domain::Target => (other_terms, Some(main_terms)),
        }
    } else {
        (None, None)
    };

    // per-head loss = source term + target term (Eq. 5 has both expectations)
    let pick = |t: &Option<HeadTerms>, f: fn(&HeadTerms) -> Option<TensorId>| {
        t.as_ref().and_then(f)
    };
    let enc = merge_term(&mut g, pick(&src_terms, |t| t.enc_dqfa), pick(&tgt_terms, |t| t.enc_dqfa));
    let dec = merge_term(&mut g, pick(&src_terms, |t| t.dec_dqfa), pick(&tgt_terms, |t| t.dec_dqfa));
    let bgp = merge_term(&mut g, pick(&src_terms, |t| t.bgpa), pick(&tgt_terms, |t| t.bgpa));
    let tif = merge_term(&mut g, pick(&src_terms, |t| t.tifa), pick(&tgt_terms, |t| t.tifa));

    let w = ctx.weights();
    let adv = alignment::adv_total(
        &mut g,
        &[
            (enc, w.enc_dqfa),
            (dec, w.dec_dqfa),
            (bgp, w.bgpa),
            (tif, w.tifa),
        ],
    );

    let total = match &det {
        Some(d) => g.sub(d.total, adv),
        None => g.neg(adv),
    };

    let stats = StepStats {
        det: det.as_ref().map_or(0.0, |d| g.scalar(d.total) as f64),
        cls: det.as_ref().map_or(0.0, |d| g.scalar(d.cls) as f64),
        l1: det
            .as_ref()
            .and_then(|d| d.l1)
            .map_or(0.0, |id| g.scalar(id) as f64),
        giou: det
            .as_ref()
            .and_then(|d| d.giou)
            .map_or(0.0, |id| g.scalar(id) as f64),
        head_enc_dqfa: enc.map(|id| g.scalar(id) as f64),
        head_dec_dqfa: dec.map(|id| g.scalar(id) as f64),
        head_bgpa: bgp.map(|id| g.scalar(id) as f64),
        head_tifa: tif.map(|id| g.scalar(id) as f64),
        adv: g.scalar(adv) as f64,
        pre_clip_grad_norm: 0.0,
    };

    let grads = g.backward(total);
    let mut grad_map = grads.param_grads(&g);
    let norm = clip_global_norm(&mut grad_map, GRAD_CLIP_NORM);
    adam.step(params, &grad_map);

    Ok(StepStats { pre_clip_grad_norm: norm, ..stats })
}

/// Weak-augment a batch of dataset images (one sampled policy per image).
fn weak_batch(
    dataset: &Dataset,
    idxs: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Array4<f32>, Vec<AnnotationSet>, Vec<Array3<f32>>, Vec<WeakAug>) {
    let mut images = Vec::with_capacity(idxs.len());
    let mut annots = Vec::with_capacity(idxs.len());
    let mut augs = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let aug = WeakAug::sample(rng);
        let (img, ann) = aug.apply(dataset.image(i), dataset.annotations(i));
        images.push(img);
        annots.push(ann);
        augs.push(aug);
    }
    let ids: Vec<i64> = annots.iter().map(|a| a.image_id).collect();
    let pixels = Dataset::batch_from_images(&images, &ids, dataset.domain).pixels;
    (pixels, annots, images, augs)
}

fn stack_images(images: &[Array3<f32>], ids: &[i64], domain: Domain) -> ImageBatch {
    Dataset::batch_from_images(images, ids, domain)
}

// ---------------------------------------------------------------------------
// burn-in
// ---------------------------------------------------------------------------

pub struct BurnInState {
    pub params: ParamMap<f32>,
    pub adam: Adam<f32>,
    /// 1-based epoch the next `burn_in_run` call starts at.
    pub next_epoch: usize,
}

/// Fresh model + optimizer from the configured seed.
pub fn burn_in_init(ctx: &TrainContext<'_>) -> Result<BurnInState> {
    ctx.validate()?;
    let mut rng = stream_rng(&[ctx.config.seed, STREAM_MODEL_INIT]);
    let params = ctx.detector.init_params(&mut rng);
    Ok(BurnInState {
        params,
        adam: Adam::new(ctx.config.lr_burn_in),
        next_epoch: 1,
    })
}

/// Run burn-in epochs up to and including `until_epoch`. Resumable at epoch
/// granularity: all randomness is derived from (seed, phase, epoch).
pub fn burn_in_run(
    ctx: &TrainContext<'_>,
    state: &mut BurnInState,
    until_epoch: usize,
    report: &mut TrainReport,
) -> Result<()> {
    ctx.validate()?;
    let cfg = ctx.config;
    let any_align = ctx.components.any_alignment();
    while state.next_epoch <= until_epoch {
        let epoch = state.next_epoch;
        let t0 = Instant::now();
        let lr = cfg.lr_at(cfg.lr_burn_in, cfg.lr_decay_epoch_burn_in, epoch);
        state.adam.lr = lr;

        let src_batches = ctx.source.batch_indices(
            cfg.batch_size_burn_in,
            mix_seed(&[cfg.seed, PHASE_BURN_IN, epoch as u64, STREAM_SHUFFLE_SRC]),
        );
        let tgt_batches = if any_align {
            ctx.target.batch_indices(
                cfg.batch_size_burn_in,
                mix_seed(&[cfg.seed, PHASE_BURN_IN, epoch as u64, STREAM_SHUFFLE_TGT]),
            )
        } else {
            Vec::new()
        };
        let mut aug_rng = stream_rng(&[cfg.seed, PHASE_BURN_IN, epoch as u64, STREAM_AUG]);

        let mut acc = EpochAccumulator::default();
        for (k, batch) in src_batches.iter().enumerate() {
            let (src_px, src_annots, _, _) = weak_batch(ctx.source, batch, &mut aug_rng);
            let tgt_px = if any_align {
                let idxs = &tgt_batches[k % tgt_batches.len()];
                Some(weak_batch(ctx.target, idxs, &mut aug_rng).0)
            } else {
                None
            };
            let stats = train_step(
                ctx,
                &mut state.params,
                &mut state.adam,
                &src_px,
                &src_annots,
                Domain::Source,
                true,
                tgt_px.as_ref(),
            )?;
            acc.add(&stats);
        }

        let map_student = match ctx.val {
            Some(val) => Some(evaluate_map50(ctx.detector, &state.params, val)?.map),
            None => None,
        };
        report.push(EpochRecord {
            epoch,
            phase: "burn-in".into(),
            domain: "source".into(),
            det_loss: acc.mean_det(),
            cls_loss: acc.mean_cls(),
            l1_loss: acc.mean_l1(),
            giou_loss: acc.mean_giou(),
            adv_enc_dqfa: acc.mean_head(0),
            adv_dec_dqfa: acc.mean_head(1),
            adv_bgpa: acc.mean_head(2),
            adv_tifa: acc.mean_head(3),
            adv_total: acc.mean_adv(),
            objective_total: objective_report(acc.mean_det(), 0.0, acc.mean_adv()),
            lr,
            pseudo_count: None,
            pseudo_mean_score: None,
            pseudo_empty_epoch: None,
            teacher_pseudo_precision: None,
            student_pseudo_precision: None,
            map50_student_val: map_student,
            map50_teacher_val: None,
            queries_bitequal: None,
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
        state.next_epoch = epoch + 1;
    }
    Ok(())
}

/// Full burn-in per the config.
pub fn burn_in(ctx: &TrainContext<'_>) -> Result<(BurnInState, TrainReport)> {
    let mut state = burn_in_init(ctx)?;
    let mut report = TrainReport::default();
    burn_in_run(ctx, &mut state, ctx.config.burn_in_epochs, &mut report)?;
    Ok((state, report))
}

// ---------------------------------------------------------------------------
// transfer
// ---------------------------------------------------------------------------

pub struct TransferState {
    pub pair: MeanTeacherPair,
    pub adam: Adam<f32>,
    pub next_epoch: usize,
}

/// Teacher and student both start from the burn-in model.
pub fn init_transfer(ctx: &TrainContext<'_>, student: ParamMap<f32>) -> Result<TransferState> {
    ctx.validate()?;
    let pair = MeanTeacherPair::init(
        student,
        ctx.config.alpha,
        ctx.components.shared_queries,
    )?;
    Ok(TransferState {
        pair,
        adam: Adam::new(ctx.config.lr_transfer),
        next_epoch: 1,
    })
}

/// The target epoch at which pseudo-label precision is measured: the first
/// target (even) epoch at or past the midpoint.
pub fn midpoint_target_epoch(transfer_epochs: usize) -> usize {
    let mut e = transfer_epochs / 2;
    if e % 2 == 1 {
        e += 1;
    }
    e.clamp(2, transfer_epochs)
}

/// Run transfer epochs (source/target alternation, EMA after source epochs)
/// up to and including `until_epoch`.
pub fn transfer_run(
    ctx: &TrainContext<'_>,
    state: &mut TransferState,
    until_epoch: usize,
    report: &mut TrainReport,
) -> Result<()> {
    ctx.validate()?;
    let cfg = ctx.config;
    let any_align = ctx.components.any_alignment();
    let midpoint = midpoint_target_epoch(cfg.transfer_epochs);
    while state.next_epoch <= until_epoch {
        let epoch = state.next_epoch;
        let t0 = Instant::now();
        let lr = cfg.lr_at(cfg.lr_transfer, cfg.lr_decay_epoch_transfer, epoch);
        state.adam.lr = lr;
        let domain = if epoch % 2 == 1 { Domain::Source } else { Domain::Target };
        let mut aug_rng = stream_rng(&[cfg.seed, PHASE_TRANSFER, epoch as u64, STREAM_AUG]);
        let mut acc = EpochAccumulator::default();
        let mut pseudo_count = 0usize;
        let mut pseudo_score_sum = 0.0f64;
        let mut teacher_sets: Vec<PseudoLabelSet> = Vec::new();
        let mut student_sets: Vec<PseudoLabelSet> = Vec::new();
        let mut weak_gt: Vec<AnnotationSet> = Vec::new();

        match domain {
            Domain::Source => {
                let src_batches = ctx.source.batch_indices(
                    cfg.batch_size_transfer,
                    mix_seed(&[cfg.seed, PHASE_TRANSFER, epoch as u64, STREAM_SHUFFLE_SRC]),
                );
                let tgt_batches = if any_align {
                    ctx.target.batch_indices(
                        cfg.batch_size_transfer,
                        mix_seed(&[cfg.seed, PHASE_TRANSFER, epoch as u64, STREAM_SHUFFLE_TGT]),
                    )
                } else {
                    Vec::new()
                };
                for (k, batch) in src_batches.iter().enumerate() {
                    let (src_px, src_annots, _, _) = weak_batch(ctx.source, batch, &mut aug_rng);
                    let tgt_px = if any_align {
                        let idxs = &tgt_batches[k % tgt_batches.len()];
                        Some(weak_batch(ctx.target, idxs, &mut aug_rng).0)
                    } else {
                        None
                    };
                    let stats = train_step(
                        ctx,
                        &mut state.pair.student,
                        &mut state.adam,
                        &src_px,
                        &src_annots,
                        Domain::Source,
                        true,
                        tgt_px.as_ref(),
                    )?;
                    acc.add(&stats);
                }
                // the teacher follows the student after each source epoch
                state.pair.ema_update()?;
            }
            Domain::Target => {
                let tgt_batches = ctx.target.batch_indices(
                    cfg.batch_size_transfer,
                    mix_seed(&[cfg.seed, PHASE_TRANSFER, epoch as u64, STREAM_SHUFFLE_TGT]),
                );
                let src_batches = if any_align {
                    ctx.source.batch_indices(
                        cfg.batch_size_transfer,
                        mix_seed(&[cfg.seed, PHASE_TRANSFER, epoch as u64, STREAM_ADV_SRC]),
                    )
                } else {
                    Vec::new()
                };
                let measure_precision = epoch == midpoint;
                for (k, batch) in tgt_batches.iter().enumerate() {
                    // one weak geometry per image, shared by teacher and student
                    let mut weak_imgs = Vec::with_capacity(batch.len());
                    let mut weak_annots = Vec::with_capacity(batch.len());
                    let mut strong_imgs = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let aug = WeakAug::sample(&mut aug_rng);
                        let (wimg, wann) =
                            aug.apply(ctx.target.image(i), ctx.target.annotations(i));
                        let extras = StrongExtras::sample(&mut aug_rng);
                        strong_imgs.push(extras.apply(&wimg));
                        weak_imgs.push(wimg);
                        weak_annots.push(wann);
                    }
                    let ids: Vec<i64> = weak_annots.iter().map(|a| a.image_id).collect();
                    let weak = stack_images(&weak_imgs, &ids, Domain::Target);
                    let teacher_pred = teacher_predict(&state.pair, ctx.detector, &weak)?;
                    let mut pseudo_annots = Vec::with_capacity(batch.len());
                    let mut any_pseudo = false;
                    for (bi, &id) in ids.iter().enumerate() {
                        let set = generate_pseudo_labels(
                            &teacher_pred,
                            bi,
                            ctx.detector.cfg.n_classes,
                            cfg.tau,
                            id,
                        )?;
                        pseudo_count += set.len();
                        pseudo_score_sum += set.scores.iter().sum::<f64>();
                        any_pseudo |= !set.is_empty();
                        pseudo_annots.push(set.to_annotations());
                        if measure_precision {
                            teacher_sets.push(set);
                        }
                    }
                    let strong = stack_images(&strong_imgs, &ids, Domain::Target);
                    if measure_precision {
                        // the student's own thresholded detections on its
                        // training view, for the pseudo-label quality claim
                        let student_pred = predict(ctx.detector, &state.pair.student, &strong.pixels)?;
                        for (bi, &id) in ids.iter().enumerate() {
                            student_sets.push(generate_pseudo_labels(
                                &student_pred,
                                bi,
                                ctx.detector.cfg.n_classes,
                                cfg.tau,
                                id,
                            )?);
                        }
                        weak_gt.extend(weak_annots.iter().cloned());
                    }
                    let src_px = if any_align {
                        let idxs = &src_batches[k % src_batches.len()];
                        Some(weak_batch(ctx.source, idxs, &mut aug_rng).0)
                    } else {
                        None
                    };
                    let stats = train_step(
                        ctx,
                        &mut state.pair.student,
                        &mut state.adam,
                        &strong.pixels,
                        &pseudo_annots,
                        Domain::Target,
                        any_pseudo,
                        src_px.as_ref(),
                    )?;
                    acc.add(&stats);
                }
            }
        }

        let (map_student, map_teacher) = match ctx.val {
            Some(val) => {
                let s = evaluate_map50(ctx.detector, &state.pair.student, val)?.map;
                let t = evaluate_map50(ctx.detector, &state.pair.teacher_params(), val)?.map;
                (Some(s), Some(t))
            }
            None => (None, None),
        };

        let is_target = domain == Domain::Target;
        let pseudo_empty = is_target && pseudo_count == 0;
        if pseudo_empty {
            report.warn(format!(
                "epoch {epoch}: teacher produced zero pseudo labels; trained on adversarial terms only"
            ));
        }
        let (teacher_prec, student_prec) = if epoch == midpoint && is_target {
            let tq = pseudo_label_quality(&teacher_sets, &weak_gt)?;
            let sq = pseudo_label_quality(&student_sets, &weak_gt)?;
            (tq.precision, sq.precision)
        } else {
            (None, None)
        };
        let (det_src, det_tgt) = match domain {
            Domain::Source => (acc.mean_det(), 0.0),
            Domain::Target => (0.0, acc.mean_det()),
        };
        report.push(EpochRecord {
            epoch,
            phase: "transfer".into(),
            domain: domain.to_string(),
            det_loss: acc.mean_det(),
            cls_loss: acc.mean_cls(),
            l1_loss: acc.mean_l1(),
            giou_loss: acc.mean_giou(),
            adv_enc_dqfa: acc.mean_head(0),
            adv_dec_dqfa: acc.mean_head(1),
            adv_bgpa: acc.mean_head(2),
            adv_tifa: acc.mean_head(3),
            adv_total: acc.mean_adv(),
            objective_total: objective_report(det_src, det_tgt, acc.mean_adv()),
            lr,
            pseudo_count: is_target.then_some(pseudo_count),
            pseudo_mean_score: (is_target && pseudo_count > 0)
                .then(|| pseudo_score_sum / pseudo_count as f64),
            pseudo_empty_epoch: is_target.then_some(pseudo_empty),
            teacher_pseudo_precision: teacher_prec,
            student_pseudo_precision: student_prec,
            map50_student_val: map_student,
            map50_teacher_val: map_teacher,
            queries_bitequal: Some(state.pair.queries_bitequal()),
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
        state.next_epoch = epoch + 1;
    }
    Ok(())
}

/// Full transfer per the config.
pub fn transfer_train(
    ctx: &TrainContext<'_>,
    state: &mut TransferState,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    let until = ctx.config.transfer_epochs;
    transfer_run(ctx, state, until, &mut report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Inference over a full split, mAP@0.5 against its ground truth.
pub fn evaluate_map50(
    detector: &Detector,
    params: &dyn ParamSource<f32>,
    dataset: &Dataset,
) -> Result<EvalResult> {
    evaluate_map_at(detector, params, dataset, 0.5)
}

pub fn evaluate_map_at(
    detector: &Detector,
    params: &dyn ParamSource<f32>,
    dataset: &Dataset,
    iou_thresh: f64,
) -> Result<EvalResult> {
    let mut detections = Vec::new();
    let idxs: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idxs.chunks(EVAL_BATCH) {
        let (batch, _) = dataset.make_batch(chunk);
        let pred = predict(detector, params, &batch.pixels)?;
        detections.extend(predictions_to_records(
            &pred,
            &batch.image_ids,
            detector.cfg.n_classes,
        ));
    }
    let class_ids: Vec<usize> = dataset.manifest.categories.iter().map(|c| c.id).collect();
    crate::eval::map_at(&detections, dataset.annotation_sets(), &class_ids, iou_thresh)
}

#[derive(Default)]
struct EpochAccumulator {
    n: usize,
    det: f64,
    cls: f64,
    l1: f64,
    giou: f64,
    heads: [Option<f64>; 4],
    adv: f64,
}

impl EpochAccumulator {
    fn add(&mut self, s: &StepStats) {
        self.n += 1;
        self.det += s.det;
        self.cls += s.cls;
        self.l1 += s.l1;
        self.giou += s.giou;
        self.adv += s.adv;
        for (slot, v) in self.heads.iter_mut().zip([
            s.head_enc_dqfa,
            s.head_dec_dqfa,
            s.head_bgpa,
            s.head_tifa,
        ]) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
    }

    fn mean(&self, x: f64) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            x / self.n as f64
        }
    }

    fn mean_det(&self) -> f64 {
        self.mean(self.det)
    }
    fn mean_cls(&self) -> f64 {
        self.mean(self.cls)
    }
    fn mean_l1(&self) -> f64 {
        self.mean(self.l1)
    }
    fn mean_giou(&self) -> f64 {
        self.mean(self.giou)
    }
    fn mean_adv(&self) -> f64 {
        self.mean(self.adv)
    }
    fn mean_head(&self, i: usize) -> Option<f64> {
        self.heads[i].map(|v| self.mean(v))
    }
}
