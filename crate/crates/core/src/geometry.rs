//! Axis-aligned boxes and the IoU family of overlap losses (IoU, GIoU,
//! DIoU, CIoU) with analytic gradients w.r.t. the predicted box corners.
//!
//! All losses here are functions of two corner-coded boxes. The (l,t,r,b)
//! distance encoding used by the detector lives in [`crate::targets`] and
//! converts to corners losslessly before calling in.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validated constructor: corners finite, strictly positive extent.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("box has non-finite coordinates: {self:?}")));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::invalid(format!("degenerate box (non-positive extent): {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// True when the point lies strictly inside the box.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox { x1: self.x1 * s, y1: self.y1 * s, x2: self.x2 * s, y2: self.y2 * s }
    }
}

/// Quantities shared by the distance-aware overlap losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapResult {
    pub iou: f64,
    /// Squared diagonal of the smallest box enclosing both inputs.
    pub enclosing_diag_sq: f64,
    /// Squared distance between the two box centers.
    pub center_dist_sq: f64,
}

/// Intersection area over union area; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    debug_assert!(a.validate().is_ok() && b.validate().is_ok());
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// IoU together with the center-distance and enclosing-diagonal terms.
pub fn overlap(a: &BBox, b: &BBox) -> OverlapResult {
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    OverlapResult {
        iou: iou(a, b),
        enclosing_diag_sq: cw * cw + ch * ch,
        center_dist_sq: (acx - bcx).powi(2) + (acy - bcy).powi(2),
    }
}

/// Which overlap loss the regression branch trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RegLossKind {
    Iou,
    Giou,
    Diou,
    Ciou,
}

impl RegLossKind {
    pub const ALL: [RegLossKind; 4] = [RegLossKind::Iou, RegLossKind::Giou, RegLossKind::Diou, RegLossKind::Ciou];

    pub fn name(&self) -> &'static str {
        match self {
            RegLossKind::Iou => "IoU",
            RegLossKind::Giou => "GIoU",
            RegLossKind::Diou => "DIoU",
            RegLossKind::Ciou => "CIoU",
        }
    }
}

impl std::str::FromStr for RegLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<RegLossKind> {
        match s.to_ascii_lowercase().as_str() {
            "iou" => Ok(RegLossKind::Iou),
            "giou" => Ok(RegLossKind::Giou),
            "diou" => Ok(RegLossKind::Diou),
            "ciou" => Ok(RegLossKind::Ciou),
            other => Err(Error::invalid(format!(
                "unknown regression loss '{other}' (expected iou|giou|diou|ciou)"
            ))),
        }
    }
}

pub fn iou_loss(pred: &BBox, gt: &BBox) -> f64 {
    1.0 - iou(pred, gt)
}

/// 1 − IoU + (C − U)/C, C the enclosing-hull area, U the union area.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let g = Geo::new(pred, gt);
    1.0 - g.iou + (g.hull_area - g.union) / g.hull_area
}

/// 1 − IoU + ρ²/c².
pub fn diou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let g = Geo::new(pred, gt);
    1.0 - g.iou + g.rho2 / g.c2
}

/// 1 − IoU + ρ²/c² + αυ, with υ the aspect-ratio consistency term and the
/// trade-off α = υ/((1−IoU)+υ) treated as a constant under differentiation.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let g = Geo::new(pred, gt);
    1.0 - g.iou + g.rho2 / g.c2 + g.alpha() * g.v
}

pub fn reg_loss(kind: RegLossKind, pred: &BBox, gt: &BBox) -> f64 {
    match kind {
        RegLossKind::Iou => iou_loss(pred, gt),
        RegLossKind::Giou => giou_loss(pred, gt),
        RegLossKind::Diou => diou_loss(pred, gt),
        RegLossKind::Ciou => ciou_loss(pred, gt),
    }
}

/// Loss value plus its gradient w.r.t. the predicted corners
/// `[x1, y1, x2, y2]` (the target box is a constant).
pub fn reg_loss_grad(kind: RegLossKind, pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let g = Geo::new(pred, gt);
    let diou_grad = g.iou_grad();
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = -diou_grad[i];
    }
    let mut loss = 1.0 - g.iou;
    match kind {
        RegLossKind::Iou => {}
        RegLossKind::Giou => {
            loss += (g.hull_area - g.union) / g.hull_area;
            // d[(C−U)/C] = d[1 − U/C] = −(U'C − UC')/C².
            let dc = g.hull_area_grad();
            let du = g.union_grad();
            for i in 0..4 {
                grad[i] -= (du[i] * g.hull_area - g.union * dc[i]) / (g.hull_area * g.hull_area);
            }
        }
        RegLossKind::Diou | RegLossKind::Ciou => {
            loss += g.rho2 / g.c2;
            let dr = g.rho2_grad();
            let dc2 = g.c2_grad();
            for i in 0..4 {
                grad[i] += (dr[i] * g.c2 - g.rho2 * dc2[i]) / (g.c2 * g.c2);
            }
            if kind == RegLossKind::Ciou {
                let alpha = g.alpha();
                loss += alpha * g.v;
                let dv = g.v_grad();
                for i in 0..4 {
                    grad[i] += alpha * dv[i];
                }
            }
        }
    }
    (loss, grad)
}

/// Shared intermediates for the loss family and their partial derivatives
/// w.r.t. the predicted corners.
struct Geo {
    px1: f64,
    py1: f64,
    px2: f64,
    py2: f64,
    gx1: f64,
    gy1: f64,
    gx2: f64,
    gy2: f64,
    iw: f64,
    ih: f64,
    inter: f64,
    union: f64,
    iou: f64,
    hull_area: f64,
    rho2: f64,
    c2: f64,
    v: f64,
}

impl Geo {
    fn new(p: &BBox, g: &BBox) -> Geo {
        debug_assert!(p.validate().is_ok() && g.validate().is_ok());
        let iw = (p.x2.min(g.x2) - p.x1.max(g.x1)).max(0.0);
        let ih = (p.y2.min(g.y2) - p.y1.max(g.y1)).max(0.0);
        let inter = iw * ih;
        let union = p.area() + g.area() - inter;
        let cw = p.x2.max(g.x2) - p.x1.min(g.x1);
        let ch = p.y2.max(g.y2) - p.y1.min(g.y1);
        let (pcx, pcy) = p.center();
        let (gcx, gcy) = g.center();
        let q = (g.width() / g.height()).atan() - (p.width() / p.height()).atan();
        Geo {
            px1: p.x1,
            py1: p.y1,
            px2: p.x2,
            py2: p.y2,
            gx1: g.x1,
            gy1: g.y1,
            gx2: g.x2,
            gy2: g.y2,
            iw,
            ih,
            inter,
            union,
            iou: inter / union,
            hull_area: cw * ch,
            rho2: (pcx - gcx).powi(2) + (pcy - gcy).powi(2),
            c2: cw * cw + ch * ch,
            v: 4.0 / (std::f64::consts::PI * std::f64::consts::PI) * q * q,
        }
    }

    fn alpha(&self) -> f64 {
        let denom = (1.0 - self.iou) + self.v;
        if denom > 0.0 {
            self.v / denom
        } else {
            0.0
        }
    }

    /// d inter / d pred corners (sub-gradient at shared edges).
    fn inter_grad(&self) -> [f64; 4] {
        if self.inter == 0.0 {
            return [0.0; 4];
        }
        [
            if self.px1 > self.gx1 { -self.ih } else { 0.0 },
            if self.py1 > self.gy1 { -self.iw } else { 0.0 },
            if self.px2 < self.gx2 { self.ih } else { 0.0 },
            if self.py2 < self.gy2 { self.iw } else { 0.0 },
        ]
    }

    fn union_grad(&self) -> [f64; 4] {
        let w = self.px2 - self.px1;
        let h = self.py2 - self.py1;
        let di = self.inter_grad();
        [-h - di[0], -w - di[1], h - di[2], w - di[3]]
    }

    fn iou_grad(&self) -> [f64; 4] {
        let di = self.inter_grad();
        let du = self.union_grad();
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = (di[i] * self.union - self.inter * du[i]) / (self.union * self.union);
        }
        out
    }

    fn hull_area_grad(&self) -> [f64; 4] {
        let cw = self.px2.max(self.gx2) - self.px1.min(self.gx1);
        let ch = self.py2.max(self.gy2) - self.py1.min(self.gy1);
        [
            if self.px1 < self.gx1 { -ch } else { 0.0 },
            if self.py1 < self.gy1 { -cw } else { 0.0 },
            if self.px2 > self.gx2 { ch } else { 0.0 },
            if self.py2 > self.gy2 { cw } else { 0.0 },
        ]
    }

    fn rho2_grad(&self) -> [f64; 4] {
        let dx = (self.px1 + self.px2) / 2.0 - (self.gx1 + self.gx2) / 2.0;
        let dy = (self.py1 + self.py2) / 2.0 - (self.gy1 + self.gy2) / 2.0;
        [dx, dy, dx, dy]
    }

    fn c2_grad(&self) -> [f64; 4] {
        let cw = self.px2.max(self.gx2) - self.px1.min(self.gx1);
        let ch = self.py2.max(self.gy2) - self.py1.min(self.gy1);
        [
            if self.px1 < self.gx1 { -2.0 * cw } else { 0.0 },
            if self.py1 < self.gy1 { -2.0 * ch } else { 0.0 },
            if self.px2 > self.gx2 { 2.0 * cw } else { 0.0 },
            if self.py2 > self.gy2 { 2.0 * ch } else { 0.0 },
        ]
    }

    fn v_grad(&self) -> [f64; 4] {
        let w = self.px2 - self.px1;
        let h = self.py2 - self.py1;
        let q = (self.gx2 - self.gx1).atan2(self.gy2 - self.gy1) - w.atan2(h);
        // atan2(w, h) == atan(w/h) for w, h > 0, so q matches the forward term.
        let k = 8.0 / (std::f64::consts::PI * std::f64::consts::PI) * q;
        let denom = w * w + h * h;
        let datan_dw = h / denom;
        let datan_dh = -w / denom;
        // dv/dcorner = −k · datan(w/h)/dcorner
        [
            -k * datan_dw * -1.0,
            -k * datan_dh * -1.0,
            -k * datan_dw,
            -k * datan_dh,
        ]
    }
}
