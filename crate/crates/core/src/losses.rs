//! Classification losses — plain binary cross entropy, focal loss, and the
//! gradient-norm-weighted cross entropy — plus the combined detection loss
//! and the weight/loss curve tables used to visualize their behavior.
//!
//! All probability inputs are clamped to [1e-7, 1−1e-7] before any log, and
//! labels are `bool`, so the binary-label precondition holds by construction.
//! Gradients returned by the `*_grad` functions are with respect to the
//! probability; callers chain through their own sigmoid.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{reg_loss, reg_loss_grad, BBox, RegLossKind};
use crate::{Error, Result};

const P_EPS: f64 = 1e-7;

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(P_EPS, 1.0 - P_EPS)
}

/// Configuration of the gradient-weighted cross entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WceConfig {
    /// Gradient-norm threshold separating inliers (up-weighted with e^g)
    /// from outliers (damped with |2e^mu − e^g|).
    pub mu: f64,
    /// When true the weight factor participates in differentiation instead
    /// of being treated as a detached per-sample constant.
    #[serde(default)]
    pub differentiate_weight: bool,
}

impl WceConfig {
    pub fn new(mu: f64) -> Result<WceConfig> {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(Error::invalid(format!("wce threshold mu must be in (0,1), got {mu}")));
        }
        Ok(WceConfig { mu, differentiate_weight: false })
    }
}

impl Default for WceConfig {
    fn default() -> WceConfig {
        WceConfig { mu: 0.7, differentiate_weight: false }
    }
}

/// Focal-loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha_t: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> FocalConfig {
        FocalConfig { alpha_t: 0.4, gamma: 1.2 }
    }
}

/// Named scalar loss terms for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub focal_distill: f64,
    pub global_distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Detection-only breakdown (no distillation terms).
    pub fn det(cls: f64, reg: f64) -> LossBreakdown {
        LossBreakdown { cls, reg, focal_distill: 0.0, global_distill: 0.0, total: cls + reg }
    }

    /// Confirm the recorded total re-sums from its components.
    pub fn check_consistent(&self) -> Result<()> {
        let sum = self.cls + self.reg + self.focal_distill + self.global_distill;
        if !self.total.is_finite() {
            return Err(Error::numerical(format!("non-finite loss total: {self:?}")));
        }
        if (sum - self.total).abs() > 1e-9 {
            return Err(Error::numerical(format!(
                "loss components sum to {sum}, recorded total {}",
                self.total
            )));
        }
        Ok(())
    }
}

/// −log p for a positive label, −log(1−p) for a negative one.
pub fn bce(p: f64, label: bool) -> f64 {
    let pt = if label { clamp_p(p) } else { 1.0 - clamp_p(p) };
    -pt.ln()
}

/// BCE value and d/dp. The clamp is treated as value substitution only, so
/// the gradient never vanishes at saturated probabilities.
pub fn bce_grad(p: f64, label: bool) -> (f64, f64) {
    let pc = clamp_p(p);
    if label {
        (-pc.ln(), -1.0 / pc)
    } else {
        (-(1.0 - pc).ln(), 1.0 / (1.0 - pc))
    }
}

/// |p − p*|: the magnitude of the BCE gradient w.r.t. the probability,
/// used as the per-sample difficulty measure.
pub fn gradient_norm(p: f64, label: bool) -> f64 {
    (p - if label { 1.0 } else { 0.0 }).abs()
}

/// Per-sample weight: e^g below the threshold, |2e^mu − e^g| at or above it.
pub fn wce_weight(g: f64, cfg: &WceConfig) -> f64 {
    if g < cfg.mu {
        g.exp()
    } else {
        (2.0 * cfg.mu.exp() - g.exp()).abs()
    }
}

fn wce_weight_grad(g: f64, cfg: &WceConfig) -> f64 {
    if g < cfg.mu {
        g.exp()
    } else {
        -g.exp() * (2.0 * cfg.mu.exp() - g.exp()).signum()
    }
}

/// Weighted cross entropy: wce_weight(|p−p*|) × bce(p).
pub fn wce(p: f64, label: bool, cfg: &WceConfig) -> f64 {
    wce_weight(gradient_norm(p, label), cfg) * bce(p, label)
}

/// WCE value and d/dp. By default the weight is a detached constant and
/// only the BCE factor is differentiated; `differentiate_weight` opts into
/// the full product rule.
pub fn wce_grad(p: f64, label: bool, cfg: &WceConfig) -> (f64, f64) {
    let g = gradient_norm(p, label);
    let w = wce_weight(g, cfg);
    let (l, dl) = bce_grad(p, label);
    let mut grad = w * dl;
    if cfg.differentiate_weight {
        let dg_dp = if label { -1.0 } else { 1.0 };
        grad += wce_weight_grad(g, cfg) * dg_dp * l;
    }
    (w * l, grad)
}

/// −alpha_t (1−p_t)^gamma log p_t.
pub fn focal(p: f64, label: bool, cfg: &FocalConfig) -> f64 {
    let pt = if label { clamp_p(p) } else { 1.0 - clamp_p(p) };
    -cfg.alpha_t * (1.0 - pt).powf(cfg.gamma) * pt.ln()
}

/// Focal value and d/dp.
pub fn focal_grad(p: f64, label: bool, cfg: &FocalConfig) -> (f64, f64) {
    let pc = clamp_p(p);
    let pt = if label { pc } else { 1.0 - pc };
    let one_m = 1.0 - pt;
    let loss = -cfg.alpha_t * one_m.powf(cfg.gamma) * pt.ln();
    let dl_dpt = cfg.alpha_t * cfg.gamma * one_m.powf(cfg.gamma - 1.0) * pt.ln()
        - cfg.alpha_t * one_m.powf(cfg.gamma) / pt;
    (loss, if label { dl_dpt } else { -dl_dpt })
}

/// Which classification loss the detector trains with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClsLossKind {
    Bce,
    Wce(WceConfig),
    Focal(FocalConfig),
}

impl ClsLossKind {
    pub fn loss(&self, p: f64, label: bool) -> f64 {
        match self {
            ClsLossKind::Bce => bce(p, label),
            ClsLossKind::Wce(cfg) => wce(p, label, cfg),
            ClsLossKind::Focal(cfg) => focal(p, label, cfg),
        }
    }

    pub fn loss_grad(&self, p: f64, label: bool) -> (f64, f64) {
        match self {
            ClsLossKind::Bce => bce_grad(p, label),
            ClsLossKind::Wce(cfg) => wce_grad(p, label, cfg),
            ClsLossKind::Focal(cfg) => focal_grad(p, label, cfg),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ClsLossKind::Bce => "BCE",
            ClsLossKind::Wce(_) => "WCE",
            ClsLossKind::Focal(_) => "FL",
        }
    }
}

impl std::str::FromStr for ClsLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ClsLossKind> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(ClsLossKind::Bce),
            "wce" => Ok(ClsLossKind::Wce(WceConfig::default())),
            "fl" | "focal" => Ok(ClsLossKind::Focal(FocalConfig::default())),
            other => Err(Error::invalid(format!(
                "unknown classification loss '{other}' (expected bce|wce|fl)"
            ))),
        }
    }
}

/// Combined detection loss over one batch: classification term summed over
/// every location, regression term over positive locations, both divided by
/// `normalizer` (the positive count, floored at 1).
pub fn detection_loss(
    cls_terms: &[(f64, bool)],
    reg_terms: &[(BBox, BBox)],
    cls_kind: ClsLossKind,
    reg_kind: RegLossKind,
    normalizer: usize,
) -> Result<LossBreakdown> {
    if cls_terms.is_empty() {
        return Err(Error::invalid("detection loss needs at least one classification term"));
    }
    let norm = normalizer.max(1) as f64;
    let cls: f64 = cls_terms.iter().map(|&(p, y)| cls_kind.loss(p, y)).sum::<f64>() / norm;
    let reg: f64 =
        reg_terms.iter().map(|(p, g)| reg_loss(reg_kind, p, g)).sum::<f64>() / norm;
    let out = LossBreakdown::det(cls, reg);
    out.check_consistent()?;
    Ok(out)
}

/// Same reduction returning per-term probability gradients (classification)
/// and per-corner gradients (regression), already divided by the normalizer.
pub fn detection_loss_grad(
    cls_terms: &[(f64, bool)],
    reg_terms: &[(BBox, BBox)],
    cls_kind: ClsLossKind,
    reg_kind: RegLossKind,
    normalizer: usize,
) -> Result<(LossBreakdown, Vec<f64>, Vec<[f64; 4]>)> {
    if cls_terms.is_empty() {
        return Err(Error::invalid("detection loss needs at least one classification term"));
    }
    let norm = normalizer.max(1) as f64;
    let mut cls = 0.0;
    let mut cls_grads = Vec::with_capacity(cls_terms.len());
    for &(p, y) in cls_terms {
        let (l, d) = cls_kind.loss_grad(p, y);
        cls += l;
        cls_grads.push(d / norm);
    }
    let mut reg = 0.0;
    let mut reg_grads = Vec::with_capacity(reg_terms.len());
    for (p, g) in reg_terms {
        let (l, d) = reg_loss_grad(reg_kind, p, g);
        reg += l;
        reg_grads.push([d[0] / norm, d[1] / norm, d[2] / norm, d[3] / norm]);
    }
    let out = LossBreakdown::det(cls / norm, reg / norm);
    out.check_consistent()?;
    Ok((out, cls_grads, reg_grads))
}

/// In-memory form of the weight/loss curve table: `xs` sweeps (0,1) at step
/// 0.001; loss curves are for a positive label and normalized by their own
/// value at p = 0.5.
#[derive(Debug, Clone)]
pub struct LossCurves {
    pub mu_values: Vec<f64>,
    pub xs: Vec<f64>,
    /// weights\[k\]\[i\] = wce_weight(xs\[i\], mu_values\[k\])
    pub weights: Vec<Vec<f64>>,
    pub bce_norm: Vec<f64>,
    pub fl_norm: Vec<f64>,
    /// wce_norm\[k\]\[i\] = wce(xs\[i\], mu_k) / wce(0.5, mu_k)
    pub wce_norm: Vec<Vec<f64>>,
}

pub fn loss_curves(mu_values: &[f64]) -> Result<LossCurves> {
    if mu_values.is_empty() {
        return Err(Error::invalid("need at least one mu value for the loss curves"));
    }
    let cfgs: Vec<WceConfig> =
        mu_values.iter().map(|&m| WceConfig::new(m)).collect::<Result<_>>()?;
    let fl_cfg = FocalConfig::default();
    let bce05 = bce(0.5, true);
    let fl05 = focal(0.5, true, &fl_cfg);
    let xs: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
    let weights = cfgs
        .iter()
        .map(|cfg| xs.iter().map(|&g| wce_weight(g, cfg)).collect())
        .collect();
    let bce_norm = xs.iter().map(|&p| bce(p, true) / bce05).collect();
    let fl_norm = xs.iter().map(|&p| focal(p, true, &fl_cfg) / fl05).collect();
    let wce_norm = cfgs
        .iter()
        .map(|cfg| {
            let w05 = wce(0.5, true, cfg);
            xs.iter().map(|&p| wce(p, true, cfg) / w05).collect()
        })
        .collect();
    Ok(LossCurves { mu_values: mu_values.to_vec(), xs, weights, bce_norm, fl_norm, wce_norm })
}

/// Write the curve table as CSV with columns
/// `x, weight_mu_<v>..., bce_norm, fl_norm, wce_norm_mu_<v>...`.
pub fn emit_loss_curves(mu_values: &[f64], out_path: &Path) -> Result<()> {
    let curves = loss_curves(mu_values)?;
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?,
    );
    let mut write = || -> std::io::Result<()> {
        write!(f, "x")?;
        for mu in &curves.mu_values {
            write!(f, ",weight_mu_{mu}")?;
        }
        write!(f, ",bce_norm,fl_norm")?;
        for mu in &curves.mu_values {
            write!(f, ",wce_norm_mu_{mu}")?;
        }
        writeln!(f)?;
        for (i, &x) in curves.xs.iter().enumerate() {
            write!(f, "{x}")?;
            for w in &curves.weights {
                write!(f, ",{}", w[i])?;
            }
            write!(f, ",{},{}", curves.bce_norm[i], curves.fl_norm[i])?;
            for w in &curves.wce_norm {
                write!(f, ",{}", w[i])?;
            }
            writeln!(f)?;
        }
        f.flush()
    };
    write().map_err(|e| Error::io(out_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::numeric_grad;
    use rand::Rng;

    const TOL: f64 = 1e-6;

    #[test]
    fn bce_oracles() {
        assert!(bce(1.0 - 1e-9, true) < 1e-5);
        assert!((bce(0.5, true) - 0.6931471805599453).abs() < TOL);
        assert!((bce(0.5, false) - 0.6931471805599453).abs() < TOL);
        assert!((bce(0.1, true) - 2.3025850929940455).abs() < TOL);
    }

    #[test]
    fn gradient_norm_definition() {
        assert_eq!(gradient_norm(1.0, true), 0.0);
        assert_eq!(gradient_norm(0.3, true), 0.7);
        assert_eq!(gradient_norm(0.3, false), 0.3);
    }

    #[test]
    fn wce_weight_oracles() {
        let cfg = WceConfig::new(0.7).unwrap();
        assert_eq!(wce_weight(0.0, &cfg), 1.0);
        assert!((wce_weight(0.5, &cfg) - 1.6487212707001282).abs() < TOL);
        assert!((wce_weight(0.9, &cfg) - 1.5679023037840034).abs() < TOL);
    }

    #[test]
    fn wce_oracles() {
        let cfg = WceConfig::new(0.7).unwrap();
        assert!(wce(1.0, true, &cfg) < 1e-5);
        assert!((wce(0.5, true, &cfg) - 1.142806500315004).abs() < TOL);
        assert!((wce(0.1, true, &cfg) - 3.6102284719640676).abs() < TOL);
    }

    #[test]
    fn focal_oracles() {
        let cfg = FocalConfig::default();
        assert!(focal(1.0 - 1e-9, true, &cfg) < 1e-6);
        assert!((focal(0.5, true, &cfg) - 0.12068393369671612).abs() < TOL);
        // Degenerate parameters reduce focal to plain BCE.
        let plain = FocalConfig { alpha_t: 1.0, gamma: 0.0 };
        let mut rng = crate::rng::seed_rng(31, "focal-degenerate");
        for _ in 0..100 {
            let p: f64 = rng.gen_range(0.01..0.99);
            let y = rng.gen_bool(0.5);
            assert!((focal(p, y, &plain) - bce(p, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn wce_config_validation() {
        assert!(WceConfig::new(0.0).is_err());
        assert!(WceConfig::new(1.0).is_err());
        assert!(WceConfig::new(0.5).is_ok());
    }

    #[test]
    fn wce_weight_shape() {
        // Strictly increasing below mu, continuous at mu, non-increasing
        // after it for mu >= 0.31.
        for mu in [0.4, 0.5, 0.6, 0.7, 0.8] {
            let cfg = WceConfig::new(mu).unwrap();
            let mut prev = wce_weight(0.0, &cfg);
            let mut g = 0.001;
            while g < mu - 1e-12 {
                let w = wce_weight(g, &cfg);
                assert!(w > prev, "mu {mu}: not increasing at g {g}");
                prev = w;
                g += 0.001;
            }
            let left = wce_weight(mu - 1e-9, &cfg);
            let right = wce_weight(mu, &cfg);
            assert!((left - right).abs() < 1e-6, "discontinuity at mu {mu}");
            assert!((right - mu.exp()).abs() < 1e-9);
            let mut prev = right;
            let mut g = mu;
            while g <= 1.0 {
                let w = wce_weight(g, &cfg);
                assert!(w <= prev + 1e-12, "mu {mu}: increased at g {g}");
                prev = w;
                g += 0.001;
            }
        }
        // Below mu ~ 0.3069 the damped branch crosses zero and re-ascends.
        let cfg = WceConfig::new(0.2).unwrap();
        let floor = wce_weight(0.2f64 + 2.0f64.ln(), &cfg);
        assert!(floor < 1e-9);
        assert!(wce_weight(0.99, &cfg) > wce_weight(0.2 + 2.0f64.ln(), &cfg));
    }

    #[test]
    fn wce_zero_iff_bce_zero() {
        let mut rng = crate::rng::seed_rng(32, "wce-zero");
        for _ in 0..200 {
            let mu = rng.gen_range(0.4..0.9);
            let cfg = WceConfig::new(mu).unwrap();
            let p: f64 = rng.gen_range(0.001..0.999);
            let y = rng.gen_bool(0.5);
            let w = wce(p, y, &cfg);
            assert!(w >= 0.0);
            assert_eq!(w == 0.0, bce(p, y) == 0.0);
        }
    }

    #[test]
    fn focal_below_bce_when_confident() {
        let cfg = FocalConfig::default();
        let mut p = 0.501;
        while p < 0.999 {
            assert!(focal(p, true, &cfg) < bce(p, true), "p = {p}");
            p += 0.001;
        }
    }

    #[test]
    fn cls_gradients_match_finite_differences() {
        let mut rng = crate::rng::seed_rng(33, "cls-grad");
        for _ in 0..1000 {
            let p: f64 = rng.gen_range(0.01..0.99);
            let y = rng.gen_bool(0.5);
            let mu = rng.gen_range(0.35..0.9);
            // Keep clear of the weight kink at g = mu.
            if (gradient_norm(p, y) - mu).abs() < 1e-3 {
                continue;
            }
            let check = |analytic: f64, f: &mut dyn FnMut(f64) -> f64| {
                let num = numeric_grad(&[p], 1e-6, |v| f(v[0]))[0];
                let scale = analytic.abs().max(num.abs()).max(1e-3);
                assert!(
                    (analytic - num).abs() / scale < 1e-4,
                    "p {p} y {y} mu {mu}: analytic {analytic} vs numeric {num}"
                );
            };

            let (_, d) = bce_grad(p, y);
            check(d, &mut |v| bce(v, y));

            let fcfg = FocalConfig::default();
            let (_, d) = focal_grad(p, y, &fcfg);
            check(d, &mut |v| focal(v, y, &fcfg));

            // Detached weight: differentiate only the BCE factor, weight
            // frozen at the evaluation point.
            let wcfg = WceConfig::new(mu).unwrap();
            let w0 = wce_weight(gradient_norm(p, y), &wcfg);
            let (_, d) = wce_grad(p, y, &wcfg);
            check(d, &mut |v| w0 * bce(v, y));

            // Full product rule when the weight participates.
            let wcfg_full = WceConfig { mu, differentiate_weight: true };
            let (_, d) = wce_grad(p, y, &wcfg_full);
            check(d, &mut |v| wce(v, y, &wcfg_full));
        }
    }

    #[test]
    fn detection_loss_oracles() {
        let unit = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(detection_loss(&[], &[], ClsLossKind::Bce, RegLossKind::Iou, 0).is_err());

        // All-correct negatives, no positives.
        let cls: Vec<(f64, bool)> = vec![(0.0, false); 10];
        let out =
            detection_loss(&cls, &[], ClsLossKind::Bce, RegLossKind::Ciou, 0).unwrap();
        assert!(out.total < 1e-5);

        // One exact positive.
        let cls = vec![(1.0, true), (0.0, false), (0.0, false)];
        let regs = vec![(unit, unit)];
        let out =
            detection_loss(&cls, &regs, ClsLossKind::Bce, RegLossKind::Ciou, 1).unwrap();
        assert!(out.total < 1e-4);

        // Hand-composed values: WCE(mu 0.7) cls terms (0.5,+) and (0.1,+),
        // one CIoU pair, normalizer 1 then 2.
        let cls = vec![(0.5, true), (0.1, true)];
        let pred = BBox::new(0.0, 0.0, 2.0, 1.0).unwrap();
        let gt = BBox::new(0.0, 0.0, 1.0, 2.0).unwrap();
        let kind = ClsLossKind::Wce(WceConfig::new(0.7).unwrap());
        let out = detection_loss(&cls, &[(pred, gt)], kind, RegLossKind::Ciou, 1).unwrap();
        assert!((out.total - 5.515953307356419).abs() < TOL);
        let out = detection_loss(&cls, &[(pred, gt)], kind, RegLossKind::Ciou, 2).unwrap();
        assert!((out.total - 2.7579766536782095).abs() < TOL);
        assert!((out.cls + out.reg - out.total).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_grad_matches_value() {
        let mut rng = crate::rng::seed_rng(34, "det-grad");
        for _ in 0..20 {
            let cls: Vec<(f64, bool)> =
                (0..6).map(|_| (rng.gen_range(0.05..0.95), rng.gen_bool(0.5))).collect();
            let pred = BBox::new(1.0, 2.0, 7.0, 9.0).unwrap();
            let gt = BBox::new(2.0, 1.0, 6.5, 8.0).unwrap();
            let kind = ClsLossKind::Focal(FocalConfig::default());
            let (bd, cg, rg) =
                detection_loss_grad(&cls, &[(pred, gt)], kind, RegLossKind::Giou, 3).unwrap();
            let plain = detection_loss(&cls, &[(pred, gt)], kind, RegLossKind::Giou, 3).unwrap();
            assert!((bd.total - plain.total).abs() < 1e-12);
            assert_eq!(cg.len(), 6);
            assert_eq!(rg.len(), 1);
            // Spot-check one classification gradient against the scalar op.
            let (_, d) = kind.loss_grad(cls[0].0, cls[0].1);
            assert!((cg[0] - d / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_table_properties() {
        let curves = loss_curves(&[0.4, 0.7]).unwrap();
        assert_eq!(curves.xs.len(), 999);
        let mid = curves.xs.iter().position(|&x| x == 0.5).unwrap();
        assert_eq!(curves.bce_norm[mid], 1.0);
        assert_eq!(curves.fl_norm[mid], 1.0);
        for w in &curves.wce_norm {
            assert_eq!(w[mid], 1.0);
        }
        // Weight curve peaks exactly at g = mu on the sweep grid.
        for (k, &mu) in curves.mu_values.iter().enumerate() {
            let argmax = curves.weights[k]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!((curves.xs[argmax] - mu).abs() < 1e-12, "peak off mu for {mu}");
        }
        // Focal always undercuts plain BCE on the well-classified side.
        for (i, &x) in curves.xs.iter().enumerate() {
            if x > 0.5 {
                assert!(curves.fl_norm[i] < curves.bce_norm[i], "fl >= bce at p {x}");
            }
        }
        // With the peak at or past g = 0.5, the anchor sits on the rising
        // branch and the classic easy-side ordering FL < WCE < BCE holds.
        for (k, &mu) in curves.mu_values.iter().enumerate() {
            if mu < 0.5 {
                continue;
            }
            for (i, &x) in curves.xs.iter().enumerate() {
                if x <= 0.5 {
                    continue;
                }
                assert!(curves.wce_norm[k][i] < curves.bce_norm[i], "wce >= bce at p {x}");
                assert!(curves.fl_norm[i] < curves.wce_norm[k][i], "fl >= wce at p {x}");
            }
        }
        // Every weight row rises monotonically to its peak at mu (emphasis
        // on moderately hard examples) and falls beyond it (outlier damping).
        for (k, &mu) in curves.mu_values.iter().enumerate() {
            let w = &curves.weights[k];
            for i in 1..curves.xs.len() {
                if curves.xs[i] <= mu {
                    assert!(w[i] > w[i - 1], "weight not rising at g {}", curves.xs[i]);
                } else if curves.xs[i - 1] >= mu {
                    assert!(w[i] < w[i - 1], "weight not falling at g {}", curves.xs[i]);
                }
            }
        }
    }

    #[test]
    fn curve_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        emit_loss_curves(&[0.4, 0.6, 0.8], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "x,weight_mu_0.4,weight_mu_0.6,weight_mu_0.8,bce_norm,fl_norm,\
             wce_norm_mu_0.4,wce_norm_mu_0.6,wce_norm_mu_0.8"
        );
        assert_eq!(lines.count(), 999);
        // Spot-check a row against the scalar oracles.
        let row = text.lines().find(|l| l.starts_with("0.25,")).unwrap();
        let cols: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        let cfg = WceConfig::new(0.4).unwrap();
        assert!((cols[1] - wce_weight(0.25, &cfg)).abs() < 1e-12);
        assert!((cols[4] - bce(0.25, true) / bce(0.5, true)).abs() < 1e-12);
    }
}
