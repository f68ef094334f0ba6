//! Anchor-free training-target machinery: mapping ground-truth boxes onto
//! per-level feature locations, the (l,t,r,b) distance encoding, greedy NMS
//! and end-to-end inference.

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorSpec};
use crate::geometry::{iou, BBox};
use crate::tensor::Tensor;
use crate::{Error, Result, NUM_CLASSES};

/// Ground-truth object: a box plus its class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

/// One scored detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Per-level assignment results for one image.
#[derive(Debug, Clone)]
pub struct LevelTargets {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// One-hot class targets, layout `[class][y][x]`, length 2·h·w.
    pub cls: Vec<f64>,
    /// (l,t,r,b) distances in pixels, layout `[side][y][x]`, length 4·h·w;
    /// zero at negative locations.
    pub reg: Vec<f64>,
    /// Positive-location mask, length h·w.
    pub pos: Vec<bool>,
}

/// Assignment output over all pyramid levels.
#[derive(Debug, Clone)]
pub struct TargetMap {
    pub levels: Vec<LevelTargets>,
    pub pos_count: usize,
}

/// Map ground-truth boxes to per-location targets.
///
/// A location is positive when its image point falls strictly inside a box
/// whose longest (l,t,r,b) distance lies in the level's designated range;
/// a point inside several such boxes belongs to the smallest-area one.
pub fn assign(gts: &[GtBox], spec: &DetectorSpec) -> Result<TargetMap> {
    assign_with(gts, spec, None)
}

/// [`assign`] with optional center sampling: given a radius `r`, a location
/// qualifies only when it also lies within `r * stride` of the box center
/// along both axes. Concentrating positives near centers couples score rank
/// to box quality, standing in for the center-ness branch this detector
/// family drops. Regression targets still span the full box.
pub fn assign_with(
    gts: &[GtBox],
    spec: &DetectorSpec,
    center_radius: Option<f64>,
) -> Result<TargetMap> {
    if let Some(r) = center_radius {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!(
                "center-sampling radius must be positive and finite, got {r}"
            )));
        }
    }
    let (img_h, img_w) = spec.input_hw;
    for gt in gts {
        gt.bbox.validate()?;
        if gt.class_id >= NUM_CLASSES {
            return Err(Error::invalid(format!("class id {} out of range", gt.class_id)));
        }
        if gt.bbox.x1 < 0.0 || gt.bbox.y1 < 0.0 || gt.bbox.x2 > img_w as f64 || gt.bbox.y2 > img_h as f64 {
            return Err(Error::invalid(format!(
                "gt box {:?} outside {img_w}x{img_h} image",
                gt.bbox
            )));
        }
    }

    let ranges = spec.level_ranges();
    let mut levels = Vec::with_capacity(3);
    let mut pos_count = 0;
    for (li, &stride) in spec.strides.iter().enumerate() {
        let (h, w) = spec.level_hw(li);
        let (lo, hi) = ranges[li];
        let mut cls = vec![0.0; NUM_CLASSES * h * w];
        let mut reg = vec![0.0; 4 * h * w];
        let mut pos = vec![false; h * w];
        for i in 0..h {
            for j in 0..w {
                let (x, y) = spec.location(li, i, j);
                let mut best: Option<(f64, usize)> = None; // (area, gt index)
                for (gi, gt) in gts.iter().enumerate() {
                    if !gt.bbox.contains(x, y) {
                        continue;
                    }
                    if let Some(r) = center_radius {
                        let cx = 0.5 * (gt.bbox.x1 + gt.bbox.x2);
                        let cy = 0.5 * (gt.bbox.y1 + gt.bbox.y2);
                        let win = r * stride as f64;
                        if (x - cx).abs() > win || (y - cy).abs() > win {
                            continue;
                        }
                    }
                    let l = x - gt.bbox.x1;
                    let t = y - gt.bbox.y1;
                    let r = gt.bbox.x2 - x;
                    let b = gt.bbox.y2 - y;
                    let m = l.max(t).max(r).max(b);
                    if m <= lo || m > hi {
                        continue;
                    }
                    let area = gt.bbox.area();
                    if best.map_or(true, |(ba, _)| area < ba) {
                        best = Some((area, gi));
                    }
                }
                if let Some((_, gi)) = best {
                    let gt = &gts[gi];
                    let idx = i * w + j;
                    pos[idx] = true;
                    pos_count += 1;
                    cls[gt.class_id * h * w + idx] = 1.0;
                    reg[idx] = x - gt.bbox.x1;
                    reg[h * w + idx] = y - gt.bbox.y1;
                    reg[2 * h * w + idx] = gt.bbox.x2 - x;
                    reg[3 * h * w + idx] = gt.bbox.y2 - y;
                }
            }
        }
        levels.push(LevelTargets { stride, h, w, cls, reg, pos });
    }
    Ok(TargetMap { levels, pos_count })
}

/// Box from a location and its four edge distances.
pub fn decode(location: (f64, f64), reg: [f64; 4]) -> Result<BBox> {
    let [l, t, r, b] = reg;
    if l <= 0.0 || t <= 0.0 || r <= 0.0 || b <= 0.0 {
        return Err(Error::invalid(format!("non-positive edge distance ({l},{t},{r},{b})")));
    }
    let (x, y) = location;
    BBox::new(x - l, y - t, x + r, y + b)
}

/// Edge distances of a box from an interior point (inverse of [`decode`]).
pub fn encode(bbox: &BBox, location: (f64, f64)) -> Result<[f64; 4]> {
    let (x, y) = location;
    if !bbox.contains(x, y) {
        return Err(Error::invalid(format!("location ({x},{y}) not inside {bbox:?}")));
    }
    Ok([x - bbox.x1, y - bbox.y1, bbox.x2 - x, bbox.y2 - y])
}

/// Greedy per-class non-maximum suppression.
///
/// Detections below `score_threshold` are dropped; the rest are visited in
/// descending score (ties broken by class then corner coordinates) and a
/// detection is suppressed when it overlaps an already-kept detection of
/// the same class with IoU strictly above `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64, score_threshold: f64) -> Result<Vec<Detection>> {
    for (name, t) in [("iou", iou_threshold), ("score", score_threshold)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("{name} threshold {t} outside [0,1]")));
        }
    }
    let mut sorted: Vec<&Detection> =
        dets.iter().filter(|d| d.score >= score_threshold).collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap())
            .then(a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap())
            .then(a.bbox.x2.partial_cmp(&b.bbox.x2).unwrap())
            .then(a.bbox.y2.partial_cmp(&b.bbox.y2).unwrap())
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    Ok(kept)
}

/// Pre-NMS score floor and detection cap used by [`infer`].
pub const SCORE_THRESHOLD: f64 = 0.05;
pub const MAX_DETECTIONS: usize = 100;
pub const NMS_IOU: f64 = 0.6;

/// End-to-end single-image inference: forward, decode every location above
/// the score floor, cap to the top [`MAX_DETECTIONS`], then NMS.
pub fn infer(network: &mut Detector, image: &Tensor) -> Result<Vec<Detection>> {
    let preds = network.predict(image)?;
    let spec = network.spec().clone();
    let (img_h, img_w) = (spec.input_hw.0 as f64, spec.input_hw.1 as f64);
    let mut candidates = Vec::new();
    for (li, p) in preds.iter().enumerate() {
        let hw = p.h * p.w;
        for i in 0..p.h {
            for j in 0..p.w {
                let idx = i * p.w + j;
                let (x, y) = spec.location(li, i, j);
                for class_id in 0..NUM_CLASSES {
                    let score = crate::nn::sigmoid(p.cls_logits[class_id * hw + idx]);
                    if score < SCORE_THRESHOLD {
                        continue;
                    }
                    let mut bbox = decode(
                        (x, y),
                        [
                            p.dists[idx],
                            p.dists[hw + idx],
                            p.dists[2 * hw + idx],
                            p.dists[3 * hw + idx],
                        ],
                    )?;
                    bbox.x1 = bbox.x1.clamp(0.0, img_w);
                    bbox.y1 = bbox.y1.clamp(0.0, img_h);
                    bbox.x2 = bbox.x2.clamp(0.0, img_w);
                    bbox.y2 = bbox.y2.clamp(0.0, img_h);
                    if bbox.x2 - bbox.x1 < 1e-3 || bbox.y2 - bbox.y1 < 1e-3 {
                        continue;
                    }
                    candidates.push(Detection { bbox, class_id, score });
                }
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap())
            .then(a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap())
    });
    candidates.truncate(MAX_DETECTIONS);
    nms(&candidates, NMS_IOU, SCORE_THRESHOLD)
}
