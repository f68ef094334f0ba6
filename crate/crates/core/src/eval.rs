//! Detection evaluation: score-ranked greedy matching against ground truth,
//! precision/recall/F1/specificity, interpolated average precision, per-class
//! precision-recall curves and a three-way confusion matrix (both classes
//! plus background).

use serde::{Deserialize, Serialize};

use crate::geometry::iou;
use crate::targets::{Detection, GtBox};
use crate::{Error, Result, NUM_CLASSES};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["healthy", "sick"];
/// Confusion-matrix index of the implicit background class.
pub const BACKGROUND: usize = NUM_CLASSES;

/// Fate of a single detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetFlag {
    Tp,
    Fp,
}

/// Outcome of matching one image's detections against its ground truth.
/// `flags` and `matched_gt` are indexed like the input detections; `gt_match`
/// like the input ground-truth boxes.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub flags: Vec<DetFlag>,
    pub matched_gt: Vec<Option<usize>>,
    pub gt_match: Vec<Option<usize>>,
    pub tp: [usize; NUM_CLASSES],
    pub fp: [usize; NUM_CLASSES],
    pub missed: [usize; NUM_CLASSES],
}

/// Content-based ranking key: descending score, ties broken by geometry so
/// the result never depends on input order.
fn rank_key(d: &Detection) -> (f64, f64, f64, f64, f64, usize) {
    (-d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.class_id)
}

fn validate_inputs(dets: &[Detection], gts: &[GtBox], iou_threshold: f64) -> Result<()> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    for d in dets {
        d.bbox.validate()?;
        if d.class_id >= NUM_CLASSES {
            return Err(Error::invalid(format!("detection class {} out of range", d.class_id)));
        }
        if !d.score.is_finite() || d.score < 0.0 {
            return Err(Error::invalid(format!("detection score {} must be finite and >= 0", d.score)));
        }
    }
    for g in gts {
        g.bbox.validate()?;
        if g.class_id >= NUM_CLASSES {
            return Err(Error::invalid(format!("gt class {} out of range", g.class_id)));
        }
    }
    Ok(())
}

/// Greedy matching in descending score order: a detection is a true positive
/// iff some not-yet-matched ground-truth box of the same class overlaps it
/// with IoU at or above the threshold; among candidates the highest IoU wins.
/// Unmatched ground truth is counted as missed (false negatives).
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_threshold: f64) -> Result<MatchResult> {
    validate_inputs(dets, gts, iou_threshold)?;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank_key(&dets[a]).partial_cmp(&rank_key(&dets[b])).unwrap());

    let mut flags = vec![DetFlag::Fp; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    let mut gt_match = vec![None; gts.len()];
    let mut tp = [0; NUM_CLASSES];
    let mut fp = [0; NUM_CLASSES];
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.class_id != d.class_id || gt_match[gi].is_some() {
                continue;
            }
            let ov = iou(&d.bbox, &g.bbox);
            if ov >= iou_threshold && best.map_or(true, |(b, _)| ov > b) {
                best = Some((ov, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                flags[di] = DetFlag::Tp;
                matched_gt[di] = Some(gi);
                gt_match[gi] = Some(di);
                tp[d.class_id] += 1;
            }
            None => fp[d.class_id] += 1,
        }
    }
    let mut missed = [0; NUM_CLASSES];
    for (gi, g) in gts.iter().enumerate() {
        if gt_match[gi].is_none() {
            missed[g.class_id] += 1;
        }
    }
    Ok(MatchResult { flags, matched_gt, gt_match, tp, fp, missed })
}

/// Per-class tallies. `missed` is the false-negative count; `tn` counts
/// (image, class) pairs where the class appears in neither ground truth nor
/// predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub missed: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

/// Precision TP/(TP+FP), recall TP/(TP+FN), their harmonic mean, and
/// specificity TN/(TN+FP); every 0/0 resolves to 0.
pub fn pr_metrics(c: Counts) -> PrMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.missed);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let specificity = ratio(c.tn, c.tn + c.fp);
    PrMetrics { precision, recall, f1, specificity }
}

/// How the area under the precision-recall curve is interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApInterp {
    /// Exact area under the precision envelope (the default).
    AllPoint,
    /// Mean of the envelope sampled at recalls 0.0, 0.1, …, 1.0.
    ElevenPoint,
}

/// Average precision over a flag sequence in descending score order.
/// Returns `None` when there is no ground truth to recall (also when there
/// are spurious detections of a class that never occurs: the curve is
/// undefined, not zero).
pub fn average_precision(flags: &[DetFlag], n_gt: usize, interp: ApInterp) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for f in flags {
        match f {
            DetFlag::Tp => tp += 1,
            DetFlag::Fp => fp += 1,
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope from the right: env[i] = max precision at any rank >= i.
    let mut env = precisions.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    match interp {
        ApInterp::AllPoint => {
            // Recall only moves at true positives, by exactly 1/n_gt each.
            let sum: f64 = flags
                .iter()
                .enumerate()
                .filter(|(_, f)| **f == DetFlag::Tp)
                .map(|(i, _)| env[i])
                .sum();
            Some(sum / n_gt as f64)
        }
        ApInterp::ElevenPoint => {
            let mut total = 0.0;
            for k in 0..=10 {
                let r = k as f64 / 10.0;
                let best = recalls
                    .iter()
                    .zip(&env)
                    .filter(|(rec, _)| **rec >= r - 1e-12)
                    .map(|(_, e)| *e)
                    .fold(0.0, f64::max);
                total += best;
            }
            Some(total / 11.0)
        }
    }
}

// ---------------------------------------------------------------------------
// Whole-dataset evaluation
// ---------------------------------------------------------------------------

/// One image's predictions and ground truth, already decoded and suppressed.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub dets: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub counts: Counts,
}

/// One point on a class's precision-recall curve, at a given score cut.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub iou_threshold: f64,
    pub n_images: usize,
    pub classes: Vec<ClassReport>,
    /// Mean of the defined per-class APs; absent if no class has one.
    pub map: Option<f64>,
    /// Rows are ground truth {healthy, sick, background}, columns predicted.
    /// Off-diagonal class cells are wrong-class localizations; background
    /// cells hold unmatched detections and missed boxes. The background row
    /// and column never meet (no true-negative census per location).
    pub confusion: [[usize; 3]; 3],
    /// Per-class cumulative (score, recall, precision) in rank order.
    pub pr_curves: Vec<Vec<PrPoint>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("serialize report: {e}")))
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        let r: EvalReport =
            serde_json::from_str(s).map_err(|e| Error::invalid(format!("parse report: {e}")))?;
        if r.schema != 1 {
            return Err(Error::invalid(format!("unsupported report schema {}", r.schema)));
        }
        Ok(r)
    }

    /// PR curves as CSV: one row per rank per class.
    pub fn pr_curve_csv(&self) -> String {
        let mut out = String::from("class,rank,score,recall,precision\n");
        for (ci, curve) in self.pr_curves.iter().enumerate() {
            let name = &self.classes[ci].name;
            for (rank, p) in curve.iter().enumerate() {
                out.push_str(&format!(
                    "{name},{},{},{},{}\n",
                    rank + 1,
                    p.score,
                    p.recall,
                    p.precision
                ));
            }
        }
        out
    }
}

/// Evaluate a whole dataset of per-image detections against ground truth.
pub fn evaluate(images: &[ImageEval], iou_threshold: f64, interp: ApInterp) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut counts = [Counts::default(); NUM_CLASSES];
    let mut confusion = [[0usize; 3]; 3];
    // Pooled (key, flag) per class for global ranking across images.
    let mut pooled: Vec<Vec<((f64, f64, f64, f64, f64, usize, usize), DetFlag)>> =
        vec![Vec::new(); NUM_CLASSES];
    let mut n_gt = [0usize; NUM_CLASSES];

    for (img_idx, img) in images.iter().enumerate() {
        let m = match_detections(&img.dets, &img.gts, iou_threshold)?;
        for c in 0..NUM_CLASSES {
            counts[c].tp += m.tp[c];
            counts[c].fp += m.fp[c];
            counts[c].missed += m.missed[c];
            let in_gt = img.gts.iter().any(|g| g.class_id == c);
            let in_det = img.dets.iter().any(|d| d.class_id == c);
            if !in_gt && !in_det {
                counts[c].tn += 1;
            }
            confusion[c][c] += m.tp[c];
        }
        for g in &img.gts {
            n_gt[g.class_id] += 1;
        }
        for (di, d) in img.dets.iter().enumerate() {
            let k = rank_key(d);
            pooled[d.class_id].push(((k.0, k.1, k.2, k.3, k.4, k.5, img_idx), m.flags[di]));
        }

        // Second, class-blind pass over the leftovers: a false positive that
        // still localizes an unmatched box is a wrong-class call, not
        // background. (Same-class pairs cannot appear here: greedy matching
        // would already have taken them.)
        let mut leftover_dets: Vec<usize> = (0..img.dets.len())
            .filter(|&di| m.flags[di] == DetFlag::Fp)
            .collect();
        leftover_dets.sort_by(|&a, &b| {
            rank_key(&img.dets[a]).partial_cmp(&rank_key(&img.dets[b])).unwrap()
        });
        let mut gt_taken: Vec<bool> = m.gt_match.iter().map(|g| g.is_some()).collect();
        for &di in &leftover_dets {
            let d = &img.dets[di];
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in img.gts.iter().enumerate() {
                if gt_taken[gi] {
                    continue;
                }
                let ov = iou(&d.bbox, &g.bbox);
                if ov >= iou_threshold && best.map_or(true, |(b, _)| ov > b) {
                    best = Some((ov, gi));
                }
            }
            match best {
                Some((_, gi)) => {
                    gt_taken[gi] = true;
                    confusion[img.gts[gi].class_id][d.class_id] += 1;
                }
                None => confusion[BACKGROUND][d.class_id] += 1,
            }
        }
        for (gi, g) in img.gts.iter().enumerate() {
            if !gt_taken[gi] {
                confusion[g.class_id][BACKGROUND] += 1;
            }
        }
    }

    let mut classes = Vec::with_capacity(NUM_CLASSES);
    let mut pr_curves = Vec::with_capacity(NUM_CLASSES);
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for c in 0..NUM_CLASSES {
        pooled[c].sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let flags: Vec<DetFlag> = pooled[c].iter().map(|(_, f)| *f).collect();
        let ap = average_precision(&flags, n_gt[c], interp);
        if let Some(a) = ap {
            ap_sum += a;
            ap_n += 1;
        }
        let mut curve = Vec::with_capacity(flags.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for (key, f) in &pooled[c] {
            match f {
                DetFlag::Tp => tp += 1,
                DetFlag::Fp => fp += 1,
            }
            curve.push(PrPoint {
                score: -key.0,
                recall: if n_gt[c] == 0 { 0.0 } else { tp as f64 / n_gt[c] as f64 },
                precision: tp as f64 / (tp + fp) as f64,
            });
        }
        let pm = pr_metrics(counts[c]);
        classes.push(ClassReport {
            name: CLASS_NAMES[c].to_string(),
            ap,
            precision: pm.precision,
            recall: pm.recall,
            f1: pm.f1,
            specificity: pm.specificity,
            counts: counts[c],
        });
        pr_curves.push(curve);
    }
    let map = if ap_n > 0 { Some(ap_sum / ap_n as f64) } else { None };
    Ok(EvalReport {
        schema: 1,
        iou_threshold,
        n_images: images.len(),
        classes,
        map,
        confusion,
        pr_curves,
    })
}
