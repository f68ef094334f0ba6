//! Feature-imitation distillation between the teacher's and student's neck
//! outputs: foreground/background masks split the imitation spatially, the
//! teacher's attention re-weights it, an attention-matching term aligns the
//! two networks' saliency, and a shared global-context block matches
//! long-range structure.  Everything returns analytic gradients w.r.t. the
//! student features; the teacher is always a constant.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorSpec;
use crate::nn::{Activation, Conv2d, Layer, LayerNorm, Mode, Param};
use crate::rng::seed_rng;
use crate::targets::GtBox;
use crate::tensor::Tensor;
use crate::{Error, Result, NUM_CLASSES};

/// Distillation coefficients: `sigma` scales foreground imitation, `beta`
/// background imitation, `gamma` the attention-matching term and `lambda`
/// the global-context term; `temperature` softens the attention softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub sigma: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> KdConfig {
        KdConfig { sigma: 1.6e-3, beta: 8.0e-4, gamma: 8.0e-4, lambda: 8.0e-6, temperature: 0.8 }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("sigma", self.sigma), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// A configuration whose every term vanishes; distilled training with it
    /// must match plain training exactly.
    pub fn disabled() -> KdConfig {
        KdConfig { sigma: 0.0, beta: 0.0, gamma: 0.0, lambda: 0.0, ..KdConfig::default() }
    }
}

// ---------------------------------------------------------------------------
// Foreground / background masks
// ---------------------------------------------------------------------------

/// Per-level imitation masks.  `fg` is 1 where the location's image point
/// falls inside a box; `scale_fg` is 1/(cells owned by that box), so each
/// box contributes equally regardless of its area; `scale_bg` is 1/(number
/// of background cells), zero on foreground.
#[derive(Debug, Clone)]
pub struct LevelMasks {
    pub h: usize,
    pub w: usize,
    pub fg: Vec<f64>,
    pub scale_fg: Vec<f64>,
    pub scale_bg: Vec<f64>,
}

/// Build imitation masks for every pyramid level.  Unlike training-target
/// assignment there is no per-level size gate: a box marks its interior as
/// foreground on every level it is visible at, with ties between
/// overlapping boxes going to the smaller one.
pub fn build_masks(gts: &[GtBox], spec: &DetectorSpec) -> Result<Vec<LevelMasks>> {
    let (img_h, img_w) = spec.input_hw;
    for gt in gts {
        gt.bbox.validate()?;
        if gt.class_id >= NUM_CLASSES {
            return Err(Error::invalid(format!("class id {} out of range", gt.class_id)));
        }
        if gt.bbox.x1 < 0.0 || gt.bbox.y1 < 0.0 || gt.bbox.x2 > img_w as f64 || gt.bbox.y2 > img_h as f64 {
            return Err(Error::invalid(format!("gt box {:?} outside {img_w}x{img_h} image", gt.bbox)));
        }
    }
    let mut levels = Vec::with_capacity(3);
    for li in 0..3 {
        let (h, w) = spec.level_hw(li);
        let mut owner = vec![usize::MAX; h * w];
        let mut owned_cells = vec![0usize; gts.len()];
        for i in 0..h {
            for j in 0..w {
                let (x, y) = spec.location(li, i, j);
                let mut best: Option<(f64, usize)> = None;
                for (gi, gt) in gts.iter().enumerate() {
                    if gt.bbox.contains(x, y) {
                        let area = gt.bbox.area();
                        if best.map_or(true, |(ba, _)| area < ba) {
                            best = Some((area, gi));
                        }
                    }
                }
                if let Some((_, gi)) = best {
                    owner[i * w + j] = gi;
                    owned_cells[gi] += 1;
                }
            }
        }
        let n_bg = owner.iter().filter(|&&o| o == usize::MAX).count();
        let bg_w = if n_bg > 0 { 1.0 / n_bg as f64 } else { 0.0 };
        let mut fg = vec![0.0; h * w];
        let mut scale_fg = vec![0.0; h * w];
        let mut scale_bg = vec![0.0; h * w];
        for (p, &o) in owner.iter().enumerate() {
            if o == usize::MAX {
                scale_bg[p] = bg_w;
            } else {
                fg[p] = 1.0;
                scale_fg[p] = 1.0 / owned_cells[o] as f64;
            }
        }
        levels.push(LevelMasks { h, w, fg, scale_fg, scale_bg });
    }
    Ok(levels)
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / s).collect()
}

/// Spatial and channel attention of a `[n, c, h, w]` feature map: the mean
/// absolute activation over channels (resp. positions), softened by the
/// temperature and rescaled so each map sums to `h*w` (resp. `c`).
pub fn attention(f: &Tensor, temperature: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("attention expects [n,c,h,w], got {s:?}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let (nb, c, hw) = (s[0], s[1], s[2] * s[3]);
    let fd = f.data();
    let mut spatial = Vec::with_capacity(nb);
    let mut channel = Vec::with_capacity(nb);
    for n in 0..nb {
        let base = n * c * hw;
        let mut u = vec![0.0; hw];
        let mut m = vec![0.0; c];
        for ch in 0..c {
            let cb = base + ch * hw;
            let mut acc = 0.0;
            for p in 0..hw {
                let a = fd[cb + p].abs();
                u[p] += a;
                acc += a;
            }
            m[ch] = acc / hw as f64;
        }
        u.iter_mut().for_each(|v| *v /= c as f64);
        let us: Vec<f64> = u.iter().map(|&v| v / temperature).collect();
        let ms: Vec<f64> = m.iter().map(|&v| v / temperature).collect();
        let mut a_s = softmax(&us);
        a_s.iter_mut().for_each(|v| *v *= hw as f64);
        let mut a_c = softmax(&ms);
        a_c.iter_mut().for_each(|v| *v *= c as f64);
        spatial.push(a_s);
        channel.push(a_c);
    }
    Ok((spatial, channel))
}

// ---------------------------------------------------------------------------
// Global-context block
// ---------------------------------------------------------------------------

/// Global-context block: a softmax-pooled context vector is pushed through
/// a bottleneck transform (1x1 conv, layer norm, ReLU, 1x1 conv) and added
/// back to every position.  The final conv starts at zero, so a fresh block
/// is the identity.
pub struct GcBlock {
    wk: Conv2d,
    w1: Conv2d,
    ln: LayerNorm,
    act: Activation,
    w2: Conv2d,
    channels: usize,
    /// (input, softmax pooling weights per batch item), LIFO.
    cache: Vec<(Tensor, Vec<Vec<f64>>)>,
}

impl GcBlock {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> GcBlock {
        let mid = (channels / 2).max(1);
        let mut w2 = Conv2d::new(mid, channels, 1, 1, 0, 1, true, rng);
        w2.zero_weights();
        GcBlock {
            wk: Conv2d::new(channels, 1, 1, 1, 0, 1, true, rng),
            w1: Conv2d::new(channels, mid, 1, 1, 0, 1, true, rng),
            ln: LayerNorm::new(&[mid, 1, 1]),
            act: Activation::relu(),
            w2,
            channels,
            cache: Vec::new(),
        }
    }

    fn pool_weights(&mut self, x: &Tensor, mode: Mode) -> Vec<Vec<f64>> {
        let s = x.shape();
        let (nb, hw) = (s[0], s[2] * s[3]);
        let a = self.wk.forward(x, mode);
        let ad = a.data();
        (0..nb).map(|n| softmax(&ad[n * hw..(n + 1) * hw])).collect()
    }
}

impl Layer for GcBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "gc block expects [n,c,h,w]");
        assert_eq!(s[1], self.channels, "gc block channel mismatch");
        let (nb, c, hw) = (s[0], s[1], s[2] * s[3]);
        let weights = self.pool_weights(x, mode);
        let xd = x.data();
        let mut ctx = Tensor::zeros(&[nb, c, 1, 1]);
        {
            let cd = ctx.data_mut();
            for n in 0..nb {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    let w = &weights[n];
                    let mut acc = 0.0;
                    for p in 0..hw {
                        acc += xd[base + p] * w[p];
                    }
                    cd[n * c + ch] = acc;
                }
            }
        }
        let q = self.w2.forward(
            &self.act.forward(&self.ln.forward(&self.w1.forward(&ctx, mode), mode), mode),
            mode,
        );
        let qd = q.data();
        let mut out = x.clone();
        {
            let od = out.data_mut();
            for n in 0..nb {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    let qv = qd[n * c + ch];
                    for p in 0..hw {
                        od[base + p] += qv;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache.push((x.clone(), weights));
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (x, weights) = self.cache.pop().expect("gc block backward without cached forward");
        let s = x.shape();
        let (nb, c, hw) = (s[0], s[1], s[2] * s[3]);
        let god = grad_out.data();
        // Broadcast-add backward: the transform branch sees the positional
        // sum of the incoming gradient.
        let mut g_q = Tensor::zeros(&[nb, c, 1, 1]);
        {
            let gq = g_q.data_mut();
            for n in 0..nb {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    gq[n * c + ch] = god[base..base + hw].iter().sum();
                }
            }
        }
        let g_ctx = self.w1.backward(&self.ln.backward(&self.act.backward(&self.w2.backward(&g_q))));
        let gcd = g_ctx.data();
        let xd = x.data();
        let mut grad_in = grad_out.clone();
        let mut g_a = Tensor::zeros(&[nb, 1, s[2], s[3]]);
        {
            let gid = grad_in.data_mut();
            let gad = g_a.data_mut();
            for n in 0..nb {
                let w = &weights[n];
                // Gradient into the pooling weights, then through the
                // softmax jacobian into the wk logits.
                let mut g_w = vec![0.0; hw];
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    let gc = gcd[n * c + ch];
                    for p in 0..hw {
                        gid[base + p] += gc * w[p];
                        g_w[p] += gc * xd[base + p];
                    }
                }
                let dot: f64 = w.iter().zip(&g_w).map(|(a, b)| a * b).sum();
                for p in 0..hw {
                    gad[n * hw + p] = w[p] * (g_w[p] - dot);
                }
            }
        }
        let g_x_wk = self.wk.backward(&g_a);
        grad_in.add_assign(&g_x_wk);
        grad_in
    }

    fn visit_params(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wk.visit_params(&format!("{path}.wk"), f);
        self.w1.visit_params(&format!("{path}.w1"), f);
        self.ln.visit_params(&format!("{path}.ln"), f);
        self.w2.visit_params(&format!("{path}.w2"), f);
    }

    fn clear_cache(&mut self) {
        self.wk.clear_cache();
        self.w1.clear_cache();
        self.ln.clear_cache();
        self.act.clear_cache();
        self.w2.clear_cache();
        self.cache.clear();
    }
}

// ---------------------------------------------------------------------------
// Distiller
// ---------------------------------------------------------------------------

/// Owns the trainable distillation machinery: optional per-level 1x1
/// adapters lifting student channels onto teacher channels, and one
/// global-context block shared by every level and by both networks.
pub struct Distiller {
    pub cfg: KdConfig,
    adapters: Option<Vec<Conv2d>>,
    gc: GcBlock,
    teacher_channels: usize,
}

impl Distiller {
    pub fn new(cfg: KdConfig, student_channels: usize, teacher_channels: usize, seed: u64) -> Result<Distiller> {
        cfg.validate()?;
        if student_channels == 0 || teacher_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        let rng = &mut seed_rng(seed, "kd/init");
        let adapters = (student_channels != teacher_channels).then(|| {
            (0..3)
                .map(|_| Conv2d::new(student_channels, teacher_channels, 1, 1, 0, 1, true, rng))
                .collect::<Vec<_>>()
        });
        Ok(Distiller { cfg, adapters, gc: GcBlock::new(teacher_channels, rng), teacher_channels })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(ads) = &mut self.adapters {
            for (i, a) in ads.iter_mut().enumerate() {
                a.visit_params(&format!("adapter{i}"), f);
            }
        }
        self.gc.visit_params("gc", f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Imitation + attention and global losses (no gradients, no caches).
    pub fn losses(
        &mut self,
        student_fpn: &[Tensor],
        teacher_fpn: &[Tensor],
        masks: &[LevelMasks],
    ) -> Result<(f64, f64)> {
        let (focal, global, _) = self.run(student_fpn, teacher_fpn, masks, false)?;
        Ok((focal, global))
    }

    /// Losses plus the gradient w.r.t. each raw student feature map.
    /// Adapter and context-block parameter gradients accumulate as a side
    /// effect; pair with [`Distiller::zero_grads`] per step.
    pub fn losses_and_grads(
        &mut self,
        student_fpn: &[Tensor],
        teacher_fpn: &[Tensor],
        masks: &[LevelMasks],
    ) -> Result<(f64, f64, Vec<Tensor>)> {
        let (focal, global, grads) = self.run(student_fpn, teacher_fpn, masks, true)?;
        Ok((focal, global, grads.expect("train mode returns gradients")))
    }

    fn check_shapes(
        &self,
        student_fpn: &[Tensor],
        teacher_fpn: &[Tensor],
        masks: &[LevelMasks],
    ) -> Result<()> {
        if student_fpn.len() != 3 || teacher_fpn.len() != 3 || masks.len() != 3 {
            return Err(Error::shape("expected 3 pyramid levels"));
        }
        for li in 0..3 {
            let ss = student_fpn[li].shape();
            let ts = teacher_fpn[li].shape();
            if ss.len() != 4 || ts.len() != 4 {
                return Err(Error::shape("feature maps must be [n,c,h,w]"));
            }
            if ts[1] != self.teacher_channels {
                return Err(Error::shape(format!(
                    "teacher level {li} has {} channels, distiller built for {}",
                    ts[1], self.teacher_channels
                )));
            }
            let expect_sc = match &self.adapters {
                Some(ads) => ads[li].in_channels(),
                None => self.teacher_channels,
            };
            if ss[1] != expect_sc {
                return Err(Error::shape(format!(
                    "student level {li} has {} channels, distiller built for {expect_sc}",
                    ss[1]
                )));
            }
            if ss[0] != ts[0] || ss[2] != ts[2] || ss[3] != ts[3] {
                return Err(Error::shape(format!(
                    "student/teacher level {li} shapes differ: {ss:?} vs {ts:?}"
                )));
            }
            if masks[li].h != ss[2] || masks[li].w != ss[3] {
                return Err(Error::shape(format!("mask level {li} does not match feature map")));
            }
        }
        Ok(())
    }

    fn run(
        &mut self,
        student_fpn: &[Tensor],
        teacher_fpn: &[Tensor],
        masks: &[LevelMasks],
        train: bool,
    ) -> Result<(f64, f64, Option<Vec<Tensor>>)> {
        self.check_shapes(student_fpn, teacher_fpn, masks)?;
        let mode = if train { Mode::Train } else { Mode::Eval };
        let nb = student_fpn[0].shape()[0] as f64;
        let cfg = self.cfg;

        // Lift student features into teacher channel space.
        let adapted: Vec<Tensor> = match &mut self.adapters {
            Some(ads) => student_fpn.iter().zip(ads.iter_mut()).map(|(f, a)| a.forward(f, mode)).collect(),
            None => student_fpn.to_vec(),
        };

        let mut focal_total = 0.0;
        let mut focal_grads: Vec<Tensor> = Vec::with_capacity(3);
        for li in 0..3 {
            let (l, g) = focal_level(&adapted[li], &teacher_fpn[li], &masks[li], &cfg, train)?;
            focal_total += l / nb;
            if train {
                let mut g = g.expect("focal gradients in train mode");
                g.scale(1.0 / nb);
                focal_grads.push(g);
            }
        }

        // Global term: the shared block sees teacher then student per level,
        // so its cache unwinds student-first within each level.
        let mut g_t = Vec::with_capacity(3);
        let mut g_s = Vec::with_capacity(3);
        for li in 0..3 {
            g_t.push(self.gc.forward(&teacher_fpn[li], mode));
            g_s.push(self.gc.forward(&adapted[li], mode));
        }
        let mut global_total = 0.0;
        for li in 0..3 {
            let dt = g_t[li].data();
            let ds = g_s[li].data();
            let sq: f64 = dt.iter().zip(ds).map(|(a, b)| (a - b) * (a - b)).sum();
            global_total += cfg.lambda * sq / nb;
        }

        if !train {
            return Ok((focal_total, global_total, None));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None, None, None];
        for li in (0..3).rev() {
            let dt = g_t[li].data();
            let ds = g_s[li].data();
            let scale = 2.0 * cfg.lambda / nb;
            let mk = |sign: f64| {
                let data: Vec<f64> = dt.iter().zip(ds).map(|(a, b)| sign * scale * (a - b)).collect();
                Tensor::from_vec(g_t[li].shape(), data).expect("same volume")
            };
            // d(global)/d(student branch) first: its forward came last.
            let mut g_adapted = self.gc.backward(&mk(-1.0));
            let _teacher_side = self.gc.backward(&mk(1.0));
            g_adapted.add_assign(&focal_grads[li]);
            grads[li] = Some(g_adapted);
        }
        let grads: Vec<Tensor> = match &mut self.adapters {
            Some(ads) => {
                // Each adapter ran forward exactly once, on its own level.
                let mut out = Vec::with_capacity(3);
                for (li, a) in ads.iter_mut().enumerate() {
                    out.push(a.backward(grads[li].as_ref().unwrap()));
                }
                out
            }
            None => grads.into_iter().map(|g| g.unwrap()).collect(),
        };
        Ok((focal_total, global_total, Some(grads)))
    }
}

/// Sign with the subgradient convention sgn(0) = 0 (f64::signum gives 1).
fn sgn0(x: f64) -> f64 {
    if x == 0.0 { 0.0 } else { x.signum() }
}

/// One level's imitation + attention loss and, in train mode, its gradient
/// w.r.t. the (adapted) student features.  Sums over the batch; the caller
/// divides by the batch size.
fn focal_level(
    student: &Tensor,
    teacher: &Tensor,
    masks: &LevelMasks,
    cfg: &KdConfig,
    train: bool,
) -> Result<(f64, Option<Tensor>)> {
    let s = student.shape();
    let (nb, c, hw) = (s[0], s[1], s[2] * s[3]);
    let sd = student.data();
    let td = teacher.data();
    let (as_s, ac_s) = attention(student, cfg.temperature)?;
    let (as_t, ac_t) = attention(teacher, cfg.temperature)?;

    let mut loss = 0.0;
    let mut grad = train.then(|| Tensor::zeros(s));
    for n in 0..nb {
        let nbase = n * c * hw;
        // Position weight: sigma on foreground, beta on background, both
        // area-balanced by the mask scales and teacher spatial attention.
        let pos_w: Vec<f64> = (0..hw)
            .map(|p| {
                (cfg.sigma * masks.fg[p] * masks.scale_fg[p]
                    + cfg.beta * masks.scale_bg[p])
                    * as_t[n][p]
            })
            .collect();
        for ch in 0..c {
            let base = nbase + ch * hw;
            let cw = ac_t[n][ch];
            for p in 0..hw {
                let d = td[base + p] - sd[base + p];
                let w = pos_w[p] * cw;
                loss += w * d * d;
                if let Some(g) = &mut grad {
                    g.data_mut()[base + p] = -2.0 * w * d;
                }
            }
        }
        // Attention matching, L1 over positions and channels.
        let mut r_s = vec![0.0; hw];
        for p in 0..hw {
            let diff = as_s[n][p] - as_t[n][p];
            loss += cfg.gamma * diff.abs();
            r_s[p] = cfg.gamma * sgn0(diff);
        }
        let mut r_c = vec![0.0; c];
        for ch in 0..c {
            let diff = ac_s[n][ch] - ac_t[n][ch];
            loss += cfg.gamma * diff.abs();
            r_c[ch] = cfg.gamma * sgn0(diff);
        }
        if let Some(g) = &mut grad {
            // Through the spatial softmax: A_s = HW * softmax(u / t) with
            // u the channel-mean absolute activation.
            let s_soft: Vec<f64> = as_s[n].iter().map(|&v| v / hw as f64).collect();
            let dot: f64 = r_s.iter().zip(&s_soft).map(|(r, s)| r * s).sum::<f64>() * hw as f64;
            let du: Vec<f64> = (0..hw)
                .map(|p| (hw as f64 / cfg.temperature) * s_soft[p] * (r_s[p] - dot / hw as f64))
                .collect();
            // Through the channel softmax likewise.
            let c_soft: Vec<f64> = ac_s[n].iter().map(|&v| v / c as f64).collect();
            let dotc: f64 = r_c.iter().zip(&c_soft).map(|(r, s)| r * s).sum::<f64>() * c as f64;
            let dm: Vec<f64> = (0..c)
                .map(|ch| (c as f64 / cfg.temperature) * c_soft[ch] * (r_c[ch] - dotc / c as f64))
                .collect();
            let gd = g.data_mut();
            for ch in 0..c {
                let base = nbase + ch * hw;
                for p in 0..hw {
                    let sgn = sgn0(sd[base + p]);
                    gd[base + p] += du[p] * sgn / c as f64 + dm[ch] * sgn / hw as f64;
                }
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::testutil::{assert_all_close, numeric_grad};
    use rand::Rng;

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> GtBox {
        GtBox { bbox: BBox::new(x1, y1, x2, y2).unwrap(), class_id }
    }

    fn random_features(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seed_rng(seed, "kd-test-feat");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn masks_partition_each_level() {
        let spec = DetectorSpec::desk();
        let gts = vec![gt(8.0, 8.0, 72.0, 72.0, 0), gt(40.0, 40.0, 120.0, 120.0, 1)];
        let masks = build_masks(&gts, &spec).unwrap();
        assert_eq!(masks.len(), 3);
        for m in &masks {
            assert_eq!(m.fg.len(), m.h * m.w);
            let n_fg = m.fg.iter().filter(|&&v| v == 1.0).count();
            let n_bg = m.fg.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(n_fg + n_bg, m.h * m.w);
            // Foreground scales sum to the number of boxes that own cells.
            let s_fg: f64 = m.scale_fg.iter().sum();
            assert!((s_fg - s_fg.round()).abs() < 1e-9, "per-box scales must sum to whole boxes");
            assert!(s_fg > 0.0 && s_fg <= gts.len() as f64 + 1e-9);
            // Background scales sum to one when any background exists.
            let s_bg: f64 = m.scale_bg.iter().sum();
            if n_bg > 0 {
                assert!((s_bg - 1.0).abs() < 1e-9);
            } else {
                assert_eq!(s_bg, 0.0);
            }
            // The two scale fields never overlap.
            for p in 0..m.h * m.w {
                assert!(m.scale_fg[p] == 0.0 || m.scale_bg[p] == 0.0);
                assert_eq!(m.scale_fg[p] > 0.0, m.fg[p] == 1.0);
            }
        }
        // The overlap region belongs to the smaller box.
        let m0 = &masks[0];
        let spec0 = DetectorSpec::desk();
        let (h, w) = spec0.level_hw(0);
        let smaller_area_cells: f64 = (0..h * w)
            .filter(|&p| {
                let (i, j) = (p / w, p % w);
                let (x, y) = spec0.location(0, i, j);
                gts[0].bbox.contains(x, y) && gts[1].bbox.contains(x, y)
            })
            .map(|p| m0.scale_fg[p])
            .sum();
        // Every contested cell carries the first (smaller) box's scale.
        let first_box_cells = m0
            .scale_fg
            .iter()
            .enumerate()
            .filter(|&(p, &s)| {
                let (i, j) = (p / w, p % w);
                let (x, y) = spec0.location(0, i, j);
                s > 0.0 && gts[0].bbox.contains(x, y)
            })
            .count();
        assert!(first_box_cells > 0);
        assert!(smaller_area_cells > 0.0);
    }

    #[test]
    fn no_boxes_means_all_background() {
        let spec = DetectorSpec::desk();
        let masks = build_masks(&[], &spec).unwrap();
        for m in &masks {
            assert!(m.fg.iter().all(|&v| v == 0.0));
            let s: f64 = m.scale_bg.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_maps_are_normalized() {
        let f = random_features(&[2, 5, 4, 6], 31);
        let (a_s, a_c) = attention(&f, 0.8).unwrap();
        for n in 0..2 {
            let ss: f64 = a_s[n].iter().sum();
            let sc: f64 = a_c[n].iter().sum();
            assert_all_close(&[ss, sc], &[24.0, 5.0], 1e-9, 1e-9);
            assert!(a_s[n].iter().all(|&v| v > 0.0));
            assert!(a_c[n].iter().all(|&v| v > 0.0));
        }
        // Hotter temperature flattens the map toward uniform.
        let (hot, _) = attention(&f, 100.0).unwrap();
        let spread = |v: &[f64]| {
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - v.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        assert!(spread(&hot[0]) < spread(&a_s[0]));
    }

    #[test]
    fn gc_block_starts_as_identity() {
        let mut rng = seed_rng(32, "gc-init");
        let mut gc = GcBlock::new(6, &mut rng);
        let x = random_features(&[2, 6, 3, 5], 33);
        let y = gc.forward(&x, Mode::Eval);
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn gc_block_gradients_match_finite_differences() {
        let mut rng = seed_rng(34, "gc-grad");
        let mut gc = GcBlock::new(4, &mut rng);
        // Move the zero-initialized final conv off zero so every path is live.
        gc.visit_params("gc", &mut |name, p| {
            if name.contains("w2") {
                let mut r = seed_rng(35, name);
                for v in p.value.data_mut() {
                    *v = r.gen_range(-0.5..0.5);
                }
            }
        });
        let x = random_features(&[2, 4, 3, 3], 36);
        // Loss: fixed random projection of the output.
        let w = random_features(&[2, 4, 3, 3], 37);
        let loss_of = |gc: &mut GcBlock, x: &Tensor| -> f64 {
            let y = gc.forward(x, Mode::Eval);
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let y = gc.forward(&x, Mode::Train);
        let _ = y;
        let g_in = gc.backward(&w);

        // Input gradient.
        let num = numeric_grad(x.data(), 1e-5, |xv| {
            let xt = Tensor::from_vec(&[2, 4, 3, 3], xv.to_vec()).unwrap();
            loss_of(&mut gc, &xt)
        });
        assert_all_close(g_in.data(), &num, 1e-4, 1e-7);

        // Parameter gradients, one probe per tensor.
        let names: Vec<String> = {
            let mut v = Vec::new();
            gc.visit_params("gc", &mut |n, _| v.push(n.to_string()));
            v
        };
        for name in names {
            let mut got = f64::NAN;
            gc.visit_params("gc", &mut |n, p| {
                if n == name {
                    got = p.grad.data()[0];
                }
            });
            let h = 1e-5;
            let mut at = |delta: f64, gc: &mut GcBlock| -> f64 {
                gc.visit_params("gc", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[0] += delta;
                    }
                });
                let l = loss_of(gc, &x);
                gc.visit_params("gc", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[0] -= delta;
                    }
                });
                l
            };
            let want = (at(h, &mut gc) - at(-h, &mut gc)) / (2.0 * h);
            assert_all_close(&[got], &[want], 1e-4, 1e-7);
        }
    }

    fn tiny_setup(
        student_c: usize,
        teacher_c: usize,
        seed: u64,
    ) -> (Distiller, Vec<Tensor>, Vec<Tensor>, Vec<LevelMasks>) {
        let spec = DetectorSpec::desk();
        let gts = vec![gt(8.0, 8.0, 72.0, 72.0, 0), gt(60.0, 20.0, 124.0, 116.0, 1)];
        let masks = build_masks(&gts, &spec).unwrap();
        let mut student = Vec::new();
        let mut teacher = Vec::new();
        for li in 0..3 {
            let (h, w) = spec.level_hw(li);
            student.push(random_features(&[2, student_c, h, w], seed + li as u64));
            teacher.push(random_features(&[2, teacher_c, h, w], seed + 10 + li as u64));
        }
        let mut kd = Distiller::new(KdConfig::default(), student_c, teacher_c, seed + 20).unwrap();
        // Wake the global term up: zero-init W2 would silence df/dparams of
        // everything upstream of it.
        kd.visit_params(&mut |name, p| {
            if name.contains("w2") {
                let mut r = seed_rng(seed + 30, name);
                for v in p.value.data_mut() {
                    *v = r.gen_range(-0.3..0.3);
                }
            }
        });
        (kd, student, teacher, masks)
    }

    #[test]
    fn identical_networks_have_nothing_to_distill() {
        let spec = DetectorSpec::desk();
        let masks = build_masks(&[gt(8.0, 8.0, 72.0, 72.0, 0)], &spec).unwrap();
        let mut feats = Vec::new();
        for li in 0..3 {
            let (h, w) = spec.level_hw(li);
            feats.push(random_features(&[1, 8, h, w], 40 + li as u64));
        }
        let mut kd = Distiller::new(KdConfig::default(), 8, 8, 41).unwrap();
        let (focal, global, grads) = kd.losses_and_grads(&feats, &feats, &masks).unwrap();
        assert_eq!(focal, 0.0);
        assert_eq!(global, 0.0);
        for g in grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn disabled_config_is_inert() {
        let (mut kd, student, teacher, masks) = tiny_setup(5, 7, 50);
        kd.cfg = KdConfig::disabled();
        let (focal, global, grads) = kd.losses_and_grads(&student, &teacher, &masks).unwrap();
        assert_eq!(focal, 0.0);
        assert_eq!(global, 0.0);
        for g in &grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn losses_match_between_eval_and_train() {
        let (mut kd, student, teacher, masks) = tiny_setup(5, 7, 60);
        let (f1, g1) = kd.losses(&student, &teacher, &masks).unwrap();
        let (f2, g2, _) = kd.losses_and_grads(&student, &teacher, &masks).unwrap();
        assert_all_close(&[f1, g1], &[f2, g2], 1e-12, 0.0);
        assert!(f1 > 0.0 && g1 > 0.0);
    }

    #[test]
    fn spatial_permutation_leaves_losses_unchanged() {
        let (mut kd, student, teacher, masks) = tiny_setup(6, 6, 70);
        let (f0, g0) = kd.losses(&student, &teacher, &masks).unwrap();

        // One fixed permutation of the positions of every level, applied to
        // both networks' features and to the masks.
        let mut rng = seed_rng(71, "kd-perm");
        let permute = |t: &Tensor, perm: &[usize]| -> Tensor {
            let s = t.shape();
            let (nb, c, hw) = (s[0], s[1], s[2] * s[3]);
            let mut out = Tensor::zeros(s);
            for n in 0..nb {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    for p in 0..hw {
                        out.data_mut()[base + p] = t.data()[base + perm[p]];
                    }
                }
            }
            out
        };
        let mut p_student = Vec::new();
        let mut p_teacher = Vec::new();
        let mut p_masks = Vec::new();
        for li in 0..3 {
            let hw = masks[li].h * masks[li].w;
            let mut perm: Vec<usize> = (0..hw).collect();
            for i in (1..hw).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            p_student.push(permute(&student[li], &perm));
            p_teacher.push(permute(&teacher[li], &perm));
            let m = &masks[li];
            p_masks.push(LevelMasks {
                h: m.h,
                w: m.w,
                fg: perm.iter().map(|&p| m.fg[p]).collect(),
                scale_fg: perm.iter().map(|&p| m.scale_fg[p]).collect(),
                scale_bg: perm.iter().map(|&p| m.scale_bg[p]).collect(),
            });
        }
        let (f1, g1) = kd.losses(&p_student, &p_teacher, &p_masks).unwrap();
        assert_all_close(&[f0, g0], &[f1, g1], 1e-9, 1e-12);
    }

    #[test]
    fn student_feature_gradients_match_finite_differences() {
        let (mut kd, student, teacher, masks) = tiny_setup(5, 7, 80);
        let (_, _, grads) = kd.losses_and_grads(&student, &teacher, &masks).unwrap();

        // Check a spread of entries on every level.
        let mut rng = seed_rng(81, "kd-grad-pick");
        for li in 0..3 {
            let n = student[li].len();
            for _ in 0..6 {
                let idx = rng.gen_range(0..n);
                let h = 1e-5;
                let mut probe = |delta: f64| -> f64 {
                    let mut s2: Vec<Tensor> = student.clone();
                    s2[li].data_mut()[idx] += delta;
                    let (f, g) = kd.losses(&s2, &teacher, &masks).unwrap();
                    f + g
                };
                let want = (probe(h) - probe(-h)) / (2.0 * h);
                let got = grads[li].data()[idx];
                assert_all_close(&[got], &[want], 1e-4, 1e-7);
            }
        }
    }

    #[test]
    fn distiller_parameter_gradients_match_finite_differences() {
        let (mut kd, student, teacher, masks) = tiny_setup(5, 7, 90);
        kd.zero_grads();
        let _ = kd.losses_and_grads(&student, &teacher, &masks).unwrap();
        let names: Vec<String> = {
            let mut v = Vec::new();
            kd.visit_params(&mut |n, _| v.push(n.to_string()));
            v
        };
        assert!(names.iter().any(|n| n.starts_with("adapter")));
        for name in names {
            let mut got = f64::NAN;
            kd.visit_params(&mut |n, p| {
                if n == name {
                    got = p.grad.data()[0];
                }
            });
            let h = 1e-5;
            let mut at = |delta: f64, kd: &mut Distiller| -> f64 {
                kd.visit_params(&mut |n, p| {
                    if n == name {
                        p.value.data_mut()[0] += delta;
                    }
                });
                let (f, g) = kd.losses(&student, &teacher, &masks).unwrap();
                kd.visit_params(&mut |n, p| {
                    if n == name {
                        p.value.data_mut()[0] -= delta;
                    }
                });
                f + g
            };
            let want = (at(h, &mut kd) - at(-h, &mut kd)) / (2.0 * h);
            assert_all_close(&[got], &[want], 1e-4, 1e-7);
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let (mut kd, student, teacher, masks) = tiny_setup(5, 7, 100);
        let mut bad_teacher = teacher.clone();
        bad_teacher[1] = random_features(&[2, 7, 4, 4], 101);
        assert!(kd.losses(&student, &bad_teacher, &masks).is_err());
        let mut bad_student = student.clone();
        bad_student[0] = random_features(&[2, 6, 16, 16], 102);
        assert!(kd.losses(&bad_student, &teacher, &masks).is_err());
        assert!(kd.losses(&student[..2].to_vec(), &teacher, &masks).is_err());
        assert!(KdConfig { temperature: 0.0, ..KdConfig::default() }.validate().is_err());
        assert!(KdConfig { sigma: -1.0, ..KdConfig::default() }.validate().is_err());
    }
}
