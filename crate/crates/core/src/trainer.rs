//! SGD training loops: plain detection training, teacher-guided training
//! with feature distillation, and the loss-function ablation grid. One step
//! is assign → forward → loss (+ distillation terms) → backward → SGD with
//! momentum; the model kept at the end is the epoch with the best
//! validation mAP + F1 sum. Everything is single-threaded and seeded, so a
//! run is reproducible bit for bit.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::{dist_and_grad, Detector, DetectorSpec};
use crate::distill::{build_masks, Distiller, KdConfig};
use crate::eval::{evaluate, ApInterp, EvalReport, ImageEval, DEFAULT_IOU_THRESHOLD};
use crate::geometry::RegLossKind;
use crate::losses::{detection_loss_grad, ClsLossKind, LossBreakdown, WceConfig};
use crate::nn::{sigmoid, Mode, Param, ParamKind};
use crate::rng::seed_rng;
use crate::targets::{assign_with, decode, infer, GtBox};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One training sample: a `[3, h, w]` image and its boxes.
pub type Sample = (Tensor, Vec<GtBox>);

/// The WCE thresholds swept by the ablation grid.
pub const MU_SWEEP: [f64; 5] = [0.4, 0.5, 0.6, 0.7, 0.8];

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Optimization hyperparameters. The learning rate starts at `lr_initial`
/// and is cut by the same factor at each drop point so that it ends at
/// `lr_final`; drops are placed at fractions of the total step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Step-count fractions at which the rate drops.
    pub lr_drops: [f64; 2],
    pub momentum: f64,
    pub weight_decay: f64,
    /// Center-sampling radius in strides; `None` keeps every location
    /// inside a box positive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_radius: Option<f64>,
    pub reg_kind: RegLossKind,
    pub seed: u64,
    /// Where the frozen teacher comes from; used by the command-line
    /// plumbing, ignored by the in-memory entry points.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    pub cls_kind: ClsLossKind,
    /// Present only for teacher-guided training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<KdConfig>,
}

impl TrainConfig {
    /// CPU-minutes profile: small batches, few epochs, a hotter rate than
    /// the full-scale run (short schedules never reach the asymptote a
    /// lower rate needs), drops at 60% / 85%.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr_initial: 1e-2,
            lr_final: 1e-4,
            lr_drops: [0.6, 0.85],
            momentum: 0.9,
            weight_decay: 1e-4,
            center_radius: Some(1.5),
            reg_kind: RegLossKind::Ciou,
            seed: 0,
            teacher_checkpoint: None,
            cls_kind: ClsLossKind::Wce(WceConfig::default()),
            kd: None,
        }
    }

    /// Full-scale profile: 2e-3 → 2e-5 with drops at iterations 24k and 28k
    /// of a 30k-iteration run (fractions 0.8 and 0.9333…).
    pub fn paper() -> TrainConfig {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            lr_initial: 2e-3,
            lr_final: 2e-5,
            lr_drops: [0.8, 28.0 / 30.0],
            // The original all-inside-box rule, as published.
            center_radius: None,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::invalid("initial learning rate must be non-negative"));
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_initial) {
            return Err(Error::invalid("final learning rate must be in [0, initial]"));
        }
        let [a, b] = self.lr_drops;
        if !(0.0 < a && a < b && b <= 1.0) {
            return Err(Error::invalid("lr drop fractions must satisfy 0 < first < second <= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if let Some(r) = self.center_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::invalid("center-sampling radius must be positive and finite"));
            }
        }
        if let Some(kd) = &self.kd {
            kd.validate()?;
        }
        Ok(())
    }

    /// Per-drop decay factor implied by the endpoint rates.
    pub fn lr_drop_factor(&self) -> f64 {
        if self.lr_initial == 0.0 {
            return 0.0;
        }
        (self.lr_final / self.lr_initial).sqrt()
    }

    /// Learning rate for a 0-based step index out of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let factor = self.lr_drop_factor();
        let mut lr = self.lr_initial;
        for frac in self.lr_drops {
            let at = (frac * total_steps as f64).ceil() as usize;
            if step >= at {
                lr *= factor;
            }
        }
        lr
    }
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// One SGD-with-momentum update of a single parameter. Weight decay applies
/// to convolution weights only — never to biases, normalization parameters
/// or the regression scales.
pub fn sgd_update(p: &mut Param, velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    let decay = if p.kind == ParamKind::Weight { weight_decay } else { 0.0 };
    let grad = p.grad.data();
    let value = p.value.data_mut();
    for k in 0..velocity.len() {
        let g = grad[k] + decay * value[k];
        velocity[k] = momentum * velocity[k] + g;
        value[k] -= lr * velocity[k];
    }
}

/// Momentum buffers indexed by visit order, which is stable per network.
struct Velocities(Vec<Vec<f64>>);

impl Velocities {
    fn new() -> Velocities {
        Velocities(Vec::new())
    }

    fn step(&mut self, idx: usize, p: &mut Param, lr: f64, momentum: f64, weight_decay: f64) {
        if idx == self.0.len() {
            self.0.push(vec![0.0; p.value.len()]);
        }
        sgd_update(p, &mut self.0[idx], lr, momentum, weight_decay);
    }
}

// ---------------------------------------------------------------------------
// Logs and outcomes
// ---------------------------------------------------------------------------

/// One metrics-log record; serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: usize,
    /// 1-based epoch.
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Positive locations in the batch (the loss normalizer, before the
    /// floor at one).
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub map: f64,
    /// Macro-averaged F1 over the classes.
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    pub val: Vec<ValRecord>,
    /// Epoch whose weights the network was left holding.
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &ValRecord {
        &self.val[self.best_epoch - 1]
    }

    pub fn metrics_jsonl(&self) -> Result<String> {
        metrics_to_jsonl(&self.steps)
    }
}

pub fn metrics_to_jsonl(steps: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for s in steps {
        out.push_str(
            &serde_json::to_string(s).map_err(|e| Error::invalid(format!("encode metrics: {e}")))?,
        );
        out.push('\n');
    }
    Ok(out)
}

/// Parse a metrics log, re-checking that every recorded total re-sums from
/// its components.
pub fn metrics_from_jsonl(text: &str) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let rec: StepRecord = serde_json::from_str(line)
            .map_err(|e| Error::invalid(format!("metrics line {}: {e}", ln + 1)))?;
        rec.loss.check_consistent()?;
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation plumbing
// ---------------------------------------------------------------------------

/// Run inference over a dataset and score it at the standard 0.5 IoU gate.
pub fn evaluate_detector(det: &mut Detector, data: &[Sample], interp: ApInterp) -> Result<EvalReport> {
    let mut images = Vec::with_capacity(data.len());
    for (img, gts) in data {
        images.push(ImageEval { dets: infer(det, img)?, gts: gts.clone() });
    }
    evaluate(&images, DEFAULT_IOU_THRESHOLD, interp)
}

/// (mAP, macro-F1) of a report; an undefined mAP counts as zero.
pub fn selection_scores(report: &EvalReport) -> (f64, f64) {
    let map = report.map.unwrap_or(0.0);
    let f1 = report.classes.iter().map(|c| c.f1).sum::<f64>() / report.classes.len() as f64;
    (map, f1)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct Snapshot {
    params: Vec<Vec<f64>>,
    buffers: Vec<Vec<f64>>,
}

fn snapshot(det: &mut Detector) -> Snapshot {
    let mut params = Vec::new();
    det.visit_params(&mut |_, p| params.push(p.value.data().to_vec()));
    let mut buffers = Vec::new();
    det.visit_buffers(&mut |_, b| buffers.push(b.clone()));
    Snapshot { params, buffers }
}

fn restore(det: &mut Detector, snap: &Snapshot) {
    let mut i = 0;
    det.visit_params(&mut |_, p| {
        p.value.data_mut().copy_from_slice(&snap.params[i]);
        i += 1;
    });
    let mut j = 0;
    det.visit_buffers(&mut |_, b| {
        b.copy_from_slice(&snap.buffers[j]);
        j += 1;
    });
}

fn check_dataset(name: &str, data: &[Sample], spec: &DetectorSpec) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid(format!("{name} dataset is empty")));
    }
    let (h, w) = spec.input_hw;
    for (i, (img, _)) in data.iter().enumerate() {
        if img.shape() != [3, h, w] {
            return Err(Error::shape(format!(
                "{name} image {i} has shape {:?}, detector wants [3, {h}, {w}]",
                img.shape()
            )));
        }
    }
    Ok(())
}

/// Train a detector from its current weights; on return it holds the
/// weights of the best validation epoch.
pub fn train(
    student: &mut Detector,
    cfg: &TrainConfig,
    train_data: &[Sample],
    val_data: &[Sample],
) -> Result<TrainOutcome> {
    if cfg.kd.is_some() {
        return Err(Error::invalid("config carries KD terms; use the teacher-guided entry point"));
    }
    train_impl(student, None, cfg, train_data, val_data)
}

/// Teacher-guided training: the frozen teacher's neck features supervise
/// the student's through the distillation terms.
pub fn train_kd(
    student: &mut Detector,
    teacher: &mut Detector,
    cfg: &TrainConfig,
    train_data: &[Sample],
    val_data: &[Sample],
) -> Result<TrainOutcome> {
    if cfg.kd.is_none() {
        return Err(Error::invalid("teacher-guided training needs KD terms in the config"));
    }
    let s = student.spec();
    let t = teacher.spec();
    if s.input_hw != t.input_hw || s.strides != t.strides {
        return Err(Error::shape(format!(
            "teacher geometry (input {:?}, strides {:?}) does not match student (input {:?}, strides {:?}); \
             an adapter only bridges channel counts",
            t.input_hw, t.strides, s.input_hw, s.strides
        )));
    }
    // The teacher must actually know something: it has to beat the
    // untrained student on the validation split.
    let (t_map, _) = selection_scores(&evaluate_detector(teacher, val_data, ApInterp::AllPoint)?);
    let (s_map, _) = selection_scores(&evaluate_detector(student, val_data, ApInterp::AllPoint)?);
    if t_map <= s_map {
        return Err(Error::invalid(format!(
            "teacher validation mAP {t_map:.4} does not beat the untrained student's {s_map:.4}"
        )));
    }
    train_impl(student, Some(teacher), cfg, train_data, val_data)
}

fn train_impl(
    student: &mut Detector,
    mut teacher: Option<&mut Detector>,
    cfg: &TrainConfig,
    train_data: &[Sample],
    val_data: &[Sample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = student.spec().clone();
    check_dataset("train", train_data, &spec)?;
    check_dataset("val", val_data, &spec)?;

    let mut distiller = match (&teacher, &cfg.kd) {
        (Some(t), Some(kd)) => Some(Distiller::new(
            *kd,
            spec.fpn_channels,
            t.spec().fpn_channels,
            cfg.seed,
        )?),
        (None, None) => None,
        _ => unreachable!("entry points pair the teacher with the KD config"),
    };

    let n = train_data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut shuffle_rng = seed_rng(cfg.seed, "train/shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut vel_student = Velocities::new();
    let mut vel_kd = Velocities::new();
    let mut steps = Vec::with_capacity(total_steps);
    let mut val = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut gstep = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cfg.lr_at(gstep, total_steps);
            gstep += 1;
            let (loss, positives) = train_step(
                student,
                teacher.as_deref_mut(),
                distiller.as_mut(),
                cfg,
                train_data,
                chunk,
                lr,
                &mut vel_student,
                &mut vel_kd,
                epoch,
                gstep,
            )?;
            steps.push(StepRecord { step: gstep, epoch, lr, loss, positives });
        }

        let report = evaluate_detector(student, val_data, ApInterp::AllPoint)?;
        let (map, f1) = selection_scores(&report);
        val.push(ValRecord { epoch, map, f1 });
        let score = map + f1;
        if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
            best = Some((score, epoch, snapshot(student)));
        }
    }

    let (_, best_epoch, snap) = best.expect("at least one epoch ran");
    restore(student, &snap);
    Ok(TrainOutcome { steps, val, best_epoch })
}

fn batch_dump(chunk: &[usize], data: &[Sample]) -> String {
    let gt_counts: Vec<usize> = chunk.iter().map(|&i| data[i].1.len()).collect();
    format!("batch image indices {chunk:?}, gt counts {gt_counts:?}")
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    student: &mut Detector,
    teacher: Option<&mut Detector>,
    distiller: Option<&mut Distiller>,
    cfg: &TrainConfig,
    data: &[Sample],
    chunk: &[usize],
    lr: f64,
    vel_student: &mut Velocities,
    vel_kd: &mut Velocities,
    epoch: usize,
    step: usize,
) -> Result<(LossBreakdown, usize)> {
    let spec = student.spec().clone();
    let (ih, iw) = spec.input_hw;
    let nb = chunk.len();

    // Stack the batch and assign targets per image.
    let mut x = Tensor::zeros(&[nb, 3, ih, iw]);
    {
        let vol = 3 * ih * iw;
        let xd = x.data_mut();
        for (bi, &di) in chunk.iter().enumerate() {
            xd[bi * vol..(bi + 1) * vol].copy_from_slice(data[di].0.data());
        }
    }
    let targets: Vec<_> = chunk
        .iter()
        .map(|&di| assign_with(&data[di].1, &spec, cfg.center_radius))
        .collect::<Result<_>>()?;
    let positives: usize = targets.iter().map(|t| t.pos_count).sum();

    student.zero_grads();
    let out = student.forward(&x, Mode::Train)?;
    if out.cls.iter().chain(&out.reg_raw).any(|t| !t.all_finite()) {
        return Err(Error::numerical(format!(
            "epoch {epoch} step {step}: non-finite network outputs; {}",
            batch_dump(chunk, data)
        )));
    }

    // Classification terms over every location, in a fixed walk order
    // (level, image, class, cell); probabilities are kept for the
    // logit-space chain rule on the way back.
    let mut cls_terms: Vec<(f64, bool)> = Vec::new();
    for li in 0..3 {
        let (lh, lw) = spec.level_hw(li);
        let hw = lh * lw;
        let logits = out.cls[li].data();
        for bi in 0..nb {
            let tl = &targets[bi].levels[li];
            for c in 0..2 {
                let base = (bi * 2 + c) * hw;
                for idx in 0..hw {
                    let p = sigmoid(logits[base + idx]);
                    cls_terms.push((p, tl.cls[c * hw + idx] == 1.0));
                }
            }
        }
    }

    // Regression terms at positive locations: raw map → scaled exponential
    // distances → decoded box, keeping the transform partials.
    struct RegMeta {
        li: usize,
        bi: usize,
        idx: usize,
        draw: [f64; 4],
        dscale: [f64; 4],
    }
    let mut reg_terms: Vec<(crate::geometry::BBox, crate::geometry::BBox)> = Vec::new();
    let mut reg_meta: Vec<RegMeta> = Vec::new();
    for li in 0..3 {
        let (lh, lw) = spec.level_hw(li);
        let hw = lh * lw;
        let scale = student.scale(li);
        let stride = spec.strides[li] as f64;
        let raws = out.reg_raw[li].data();
        for bi in 0..nb {
            let tl = &targets[bi].levels[li];
            for i in 0..lh {
                for j in 0..lw {
                    let idx = i * lw + j;
                    if !tl.pos[idx] {
                        continue;
                    }
                    let loc = spec.location(li, i, j);
                    let mut d = [0.0; 4];
                    let mut draw = [0.0; 4];
                    let mut dscale = [0.0; 4];
                    for s in 0..4 {
                        let raw = raws[(bi * 4 + s) * hw + idx];
                        let (dv, dr, ds) = dist_and_grad(scale, raw);
                        d[s] = stride * dv;
                        draw[s] = stride * dr;
                        dscale[s] = stride * ds;
                    }
                    let pred = decode(loc, d)?;
                    let gt = decode(
                        loc,
                        [tl.reg[idx], tl.reg[hw + idx], tl.reg[2 * hw + idx], tl.reg[3 * hw + idx]],
                    )?;
                    reg_terms.push((pred, gt));
                    reg_meta.push(RegMeta { li, bi, idx, draw, dscale });
                }
            }
        }
    }

    let (det_loss, cls_grads, reg_grads) =
        detection_loss_grad(&cls_terms, &reg_terms, cfg.cls_kind, cfg.reg_kind, positives)
            .map_err(|e| {
                Error::numerical(format!(
                    "epoch {epoch} step {step}: {e}; {}",
                    batch_dump(chunk, data)
                ))
            })?;

    // Logit gradients, re-walking the classification order.
    let mut grad_cls: Vec<Tensor> = Vec::with_capacity(3);
    {
        let mut k = 0;
        for li in 0..3 {
            let (lh, lw) = spec.level_hw(li);
            let hw = lh * lw;
            let mut g = Tensor::zeros(&[nb, 2, lh, lw]);
            let gd = g.data_mut();
            for bi in 0..nb {
                for c in 0..2 {
                    let base = (bi * 2 + c) * hw;
                    for idx in 0..hw {
                        let p = cls_terms[k].0;
                        gd[base + idx] = cls_grads[k] * p * (1.0 - p);
                        k += 1;
                    }
                }
            }
            grad_cls.push(g);
        }
    }

    // Raw-map and scale gradients from the corner gradients: the decoded
    // corners are x1 = x − l, y1 = y − t, x2 = x + r, y2 = y + b.
    let mut grad_reg: Vec<Tensor> = (0..3)
        .map(|li| {
            let (lh, lw) = spec.level_hw(li);
            Tensor::zeros(&[nb, 4, lh, lw])
        })
        .collect();
    for (m, g) in reg_meta.iter().zip(&reg_grads) {
        let side_g = [-g[0], -g[1], g[2], g[3]];
        let hw = grad_reg[m.li].len() / (nb * 4);
        let gd = grad_reg[m.li].data_mut();
        for s in 0..4 {
            gd[(m.bi * 4 + s) * hw + m.idx] += side_g[s] * m.draw[s];
            student.add_scale_grad(m.li, side_g[s] * m.dscale[s]);
        }
    }

    // Distillation terms: the frozen teacher's neck features guide the
    // student's, one image at a time so each image gets its own masks.
    let mut focal_distill = 0.0;
    let mut global_distill = 0.0;
    let mut grad_fpn: Option<Vec<Tensor>> = None;
    let mut kd = match (teacher, distiller) {
        (Some(t), Some(d)) => Some((t, d)),
        _ => None,
    };
    if let Some((teacher, distiller)) = kd.as_mut() {
        distiller.zero_grads();
        let t_out = teacher.forward(&x, Mode::Eval)?;
        let mut acc: Vec<Tensor> = out.fpn.iter().map(|f| Tensor::zeros(f.shape())).collect();
        let inv = 1.0 / nb as f64;
        for (bi, &di) in chunk.iter().enumerate() {
            let masks = build_masks(&data[di].1, &spec)?;
            let s_slice: Vec<Tensor> = out.fpn.iter().map(|f| image_slice(f, bi)).collect();
            let t_slice: Vec<Tensor> = t_out.fpn.iter().map(|f| image_slice(f, bi)).collect();
            let (f, g, grads) = distiller.losses_and_grads(&s_slice, &t_slice, &masks)?;
            focal_distill += f * inv;
            global_distill += g * inv;
            for (li, g) in grads.iter().enumerate() {
                let vol = g.len();
                let ad = acc[li].data_mut();
                for (k, &v) in g.data().iter().enumerate() {
                    ad[bi * vol + k] += v * inv;
                }
            }
        }
        // The per-image calls accumulated unscaled parameter gradients;
        // bring them onto the same batch-mean convention.
        distiller.visit_params(&mut |_, p| p.grad.scale(inv));
        grad_fpn = Some(acc);
    }

    let loss = LossBreakdown {
        cls: det_loss.cls,
        reg: det_loss.reg,
        focal_distill,
        global_distill,
        total: det_loss.cls + det_loss.reg + focal_distill + global_distill,
    };
    if !loss.total.is_finite() {
        return Err(Error::numerical(format!(
            "epoch {epoch} step {step}: non-finite loss {loss:?}; {}",
            batch_dump(chunk, data)
        )));
    }

    student.backward(&grad_cls, &grad_reg, grad_fpn.as_deref())?;
    let mut i = 0;
    student.visit_params(&mut |_, p| {
        vel_student.step(i, p, lr, cfg.momentum, cfg.weight_decay);
        i += 1;
    });
    if let Some((_, distiller)) = kd.as_mut() {
        let mut j = 0;
        distiller.visit_params(&mut |_, p| {
            vel_kd.step(j, p, lr, cfg.momentum, cfg.weight_decay);
            j += 1;
        });
    }
    Ok((loss, positives))
}

/// Copy image `bi` out of a batched `[n, c, h, w]` tensor.
fn image_slice(t: &Tensor, bi: usize) -> Tensor {
    let s = t.shape();
    let vol = s[1] * s[2] * s[3];
    Tensor::from_vec(&[1, s[1], s[2], s[3]], t.data()[bi * vol..(bi + 1) * vol].to_vec())
        .expect("slice volume matches")
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

/// One trained cell of the loss-function grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub cls_loss: String,
    pub reg_loss: String,
    pub map: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub error: Option<String>,
}

/// One point of the WCE threshold sweep.
#[derive(Debug, Clone, Serialize)]
pub struct MuCell {
    pub mu: f64,
    pub map: Option<f64>,
    pub f1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    pub mu_sweep: Vec<MuCell>,
}

fn opt_col(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AblationTable {
    /// The 3×4 grid as CSV, one row per (classification, regression) pair.
    pub fn grid_csv(&self) -> String {
        let mut out = String::from("cls_loss,reg_loss,map,precision,recall,f1,error\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.cls_loss,
                c.reg_loss,
                opt_col(c.map),
                opt_col(c.precision),
                opt_col(c.recall),
                opt_col(c.f1),
                c.error.as_deref().unwrap_or(""),
            ));
        }
        out
    }

    /// The WCE threshold sweep as CSV.
    pub fn mu_csv(&self) -> String {
        let mut out = String::from("mu,map,f1,error\n");
        for c in &self.mu_sweep {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.mu,
                opt_col(c.map),
                opt_col(c.f1),
                c.error.as_deref().unwrap_or(""),
            ));
        }
        out
    }

    /// Look up a grid cell by loss names, e.g. `("WCE", "CIoU")`.
    pub fn cell(&self, cls: &str, reg: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.cls_loss == cls && c.reg_loss == reg)
    }
}

fn run_cell(
    base: &TrainConfig,
    spec: &DetectorSpec,
    cls_kind: ClsLossKind,
    reg_kind: RegLossKind,
    train_data: &[Sample],
    val_data: &[Sample],
) -> Result<EvalReport> {
    let cfg = TrainConfig { cls_kind, reg_kind, kd: None, ..base.clone() };
    let mut student = crate::detector::build_student(spec, cfg.seed)?;
    train(&mut student, &cfg, train_data, val_data)?;
    evaluate_detector(&mut student, val_data, ApInterp::AllPoint)
}

/// Train every {FL, BCE, WCE} × {IoU, GIoU, DIoU, CIoU} pair from the same
/// initialization, seed and budget, then sweep the WCE threshold. Per-cell
/// failures land in the cell's `error` column; the grid keeps going.
pub fn run_ablation_grid(
    base: &TrainConfig,
    spec: &DetectorSpec,
    train_data: &[Sample],
    val_data: &[Sample],
) -> Result<AblationTable> {
    base.validate()?;
    spec.validate()?;
    let cls_kinds = [
        ClsLossKind::Focal(Default::default()),
        ClsLossKind::Bce,
        ClsLossKind::Wce(WceConfig::default()),
    ];
    let mut cells = Vec::with_capacity(12);
    for cls in cls_kinds {
        for reg in RegLossKind::ALL {
            let mut cell = AblationCell {
                cls_loss: cls.name().to_string(),
                reg_loss: reg.name().to_string(),
                map: None,
                precision: None,
                recall: None,
                f1: None,
                error: None,
            };
            match run_cell(base, spec, cls, reg, train_data, val_data) {
                Ok(report) => {
                    let (map, f1) = selection_scores(&report);
                    let nc = report.classes.len() as f64;
                    cell.map = Some(map);
                    cell.f1 = Some(f1);
                    cell.precision =
                        Some(report.classes.iter().map(|c| c.precision).sum::<f64>() / nc);
                    cell.recall = Some(report.classes.iter().map(|c| c.recall).sum::<f64>() / nc);
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cells.push(cell);
        }
    }

    let mut mu_sweep = Vec::with_capacity(MU_SWEEP.len());
    for mu in MU_SWEEP {
        let mut cell = MuCell { mu, map: None, f1: None, error: None };
        match WceConfig::new(mu)
            .and_then(|w| run_cell(base, spec, ClsLossKind::Wce(w), base.reg_kind, train_data, val_data))
        {
            Ok(report) => {
                let (map, f1) = selection_scores(&report);
                cell.map = Some(map);
                cell.f1 = Some(f1);
            }
            Err(e) => cell.error = Some(e.to_string()),
        }
        mu_sweep.push(cell);
    }
    Ok(AblationTable { cells, mu_sweep })
}
