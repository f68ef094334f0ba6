//! The detector networks: a depthwise-separable student and a residual
//! teacher sharing one neck/head contract, plus parameter and FLOP audits
//! and a versioned binary checkpoint format.
//!
//! Both networks emit, per pyramid level, a feature map from the neck, a
//! 2-channel class-logit map and a 4-channel raw regression map.  The raw
//! regression values are turned into positive edge distances through
//! `exp(scale_l * raw)` with one learned scalar per level.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{
    Activation, BatchNorm2d, Conv2d, Layer, Mode, Param, ParamKind, QuantSlot, Sequential,
};
use crate::rng::seed_rng;
use crate::tensor::Tensor;
use crate::{Error, Result, NUM_CLASSES};

/// Deployment profile: `Desk` is a small, fast configuration used by the
/// test suite; `Paper` is the full-size configuration used for parameter
/// and FLOP audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

/// Structural contract shared by student and teacher: input size, pyramid
/// strides and the channel width of the neck outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub profile: Profile,
    /// Input image size as (height, width); both must divide by the
    /// largest stride.
    pub input_hw: (usize, usize),
    /// Channel count of every neck output level.
    pub fpn_channels: usize,
    /// Pyramid strides, finest first.
    pub strides: [usize; 3],
}

impl DetectorSpec {
    /// Small test-scale configuration: 128x128 input, 24-channel neck.
    pub fn desk() -> DetectorSpec {
        DetectorSpec { profile: Profile::Desk, input_hw: (128, 128), fpn_channels: 24, strides: [8, 16, 32] }
    }

    /// Full-scale student configuration: 320x320 input, 96-channel neck.
    pub fn paper() -> DetectorSpec {
        DetectorSpec { profile: Profile::Paper, input_hw: (320, 320), fpn_channels: 96, strides: [8, 16, 32] }
    }

    /// Full-scale teacher configuration (wider neck and heads).
    pub fn paper_teacher() -> DetectorSpec {
        DetectorSpec { fpn_channels: 384, ..DetectorSpec::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides != [8, 16, 32] {
            return Err(Error::invalid(format!(
                "strides must be [8, 16, 32], got {:?}",
                self.strides
            )));
        }
        if self.fpn_channels == 0 {
            return Err(Error::invalid("fpn_channels must be positive"));
        }
        let (h, w) = self.input_hw;
        let s = self.strides[2];
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} must be a positive multiple of the coarsest stride {s}"
            )));
        }
        Ok(())
    }

    /// Feature-map size of pyramid level `li`.
    pub fn level_hw(&self, li: usize) -> (usize, usize) {
        let s = self.strides[li];
        (self.input_hw.0 / s, self.input_hw.1 / s)
    }

    /// Per-level (lo, hi] bounds on the longest edge distance a location may
    /// regress; a box is assigned to the level whose interval contains its
    /// longest (l,t,r,b) distance.
    pub fn level_ranges(&self) -> [(f64, f64); 3] {
        [(0.0, 64.0), (64.0, 128.0), (128.0, f64::INFINITY)]
    }

    /// Image-plane point (x, y) of the feature cell at row `i`, column `j`
    /// of level `li`: cell centers offset by half a stride.
    pub fn location(&self, li: usize, i: usize, j: usize) -> (f64, f64) {
        let s = self.strides[li] as f64;
        (s / 2.0 + j as f64 * s, s / 2.0 + i as f64 * s)
    }
}

/// Which network a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchKind {
    Student,
    Teacher { depth: u32 },
}

// ---------------------------------------------------------------------------
// Composite blocks
// ---------------------------------------------------------------------------

/// Inverted residual block: optional 1x1 expansion, 3x3 depthwise, 1x1
/// projection, each followed by batch norm; ReLU6 after the first two.
/// A skip connection is added when the stride is 1 and channels match.
struct InvertedResidual {
    expand: Option<(Conv2d, BatchNorm2d, Activation)>,
    dw: Conv2d,
    dw_bn: BatchNorm2d,
    dw_act: Activation,
    proj: Conv2d,
    proj_bn: BatchNorm2d,
    use_res: bool,
}

impl InvertedResidual {
    fn new(c_in: usize, c_out: usize, expansion: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> InvertedResidual {
        let mid = c_in * expansion;
        let expand = (expansion != 1).then(|| {
            (
                Conv2d::new(c_in, mid, 1, 1, 0, 1, false, rng),
                BatchNorm2d::new(mid),
                Activation::relu6(),
            )
        });
        InvertedResidual {
            expand,
            dw: Conv2d::new(mid, mid, 3, stride, 1, mid, false, rng),
            dw_bn: BatchNorm2d::new(mid),
            dw_act: Activation::relu6(),
            proj: Conv2d::new(mid, c_out, 1, 1, 0, 1, false, rng),
            proj_bn: BatchNorm2d::new(c_out),
            use_res: stride == 1 && c_in == c_out,
        }
    }
}

impl Layer for InvertedResidual {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut h = if let Some((c, bn, act)) = &mut self.expand {
            act.forward(&bn.forward(&c.forward(x, mode), mode), mode)
        } else {
            x.clone()
        };
        h = self.dw_act.forward(&self.dw_bn.forward(&self.dw.forward(&h, mode), mode), mode);
        h = self.proj_bn.forward(&self.proj.forward(&h, mode), mode);
        if self.use_res {
            h.add_assign(x);
        }
        h
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.proj.backward(&self.proj_bn.backward(grad_out));
        let g = self.dw.backward(&self.dw_bn.backward(&self.dw_act.backward(&g)));
        let mut g_in = if let Some((c, bn, act)) = &mut self.expand {
            c.backward(&bn.backward(&act.backward(&g)))
        } else {
            g
        };
        if self.use_res {
            g_in.add_assign(grad_out);
        }
        g_in
    }

    fn visit_params(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some((c, bn, _)) = &mut self.expand {
            c.visit_params(&format!("{path}.exp"), f);
            bn.visit_params(&format!("{path}.exp_bn"), f);
        }
        self.dw.visit_params(&format!("{path}.dw"), f);
        self.dw_bn.visit_params(&format!("{path}.dw_bn"), f);
        self.proj.visit_params(&format!("{path}.proj"), f);
        self.proj_bn.visit_params(&format!("{path}.proj_bn"), f);
    }

    fn visit_buffers(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let Some((_, bn, _)) = &mut self.expand {
            bn.visit_buffers(&format!("{path}.exp_bn"), f);
        }
        self.dw_bn.visit_buffers(&format!("{path}.dw_bn"), f);
        self.proj_bn.visit_buffers(&format!("{path}.proj_bn"), f);
    }

    fn visit_quant(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut QuantSlot)) {
        if let Some((c, _, _)) = &mut self.expand {
            c.visit_quant(&format!("{path}.exp"), f);
        }
        self.dw.visit_quant(&format!("{path}.dw"), f);
        self.proj.visit_quant(&format!("{path}.proj"), f);
    }

    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut Conv2d)) {
        if let Some((c, _, _)) = &mut self.expand {
            f(c);
        }
        f(&mut self.dw);
        f(&mut self.proj);
    }

    fn clear_cache(&mut self) {
        if let Some((c, bn, act)) = &mut self.expand {
            c.clear_cache();
            bn.clear_cache();
            act.clear_cache();
        }
        self.dw.clear_cache();
        self.dw_bn.clear_cache();
        self.dw_act.clear_cache();
        self.proj.clear_cache();
        self.proj_bn.clear_cache();
    }
}

/// Residual block, either basic (two 3x3 convs) or bottleneck
/// (1x1 reduce, 3x3, 1x1 expand), with an optional projection shortcut.
struct ResidualBlock {
    /// (conv, bn) pairs of the main path, in forward order.
    path: Vec<(Conv2d, BatchNorm2d)>,
    /// ReLU after every main-path conv except the last.
    acts: Vec<Activation>,
    down: Option<(Conv2d, BatchNorm2d)>,
    act_out: Activation,
}

impl ResidualBlock {
    fn basic(c_in: usize, c_out: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ResidualBlock {
        let path = vec![
            (Conv2d::new(c_in, c_out, 3, stride, 1, 1, false, rng), BatchNorm2d::new(c_out)),
            (Conv2d::new(c_out, c_out, 3, 1, 1, 1, false, rng), BatchNorm2d::new(c_out)),
        ];
        ResidualBlock::finish(path, c_in, c_out, stride, rng)
    }

    fn bottleneck(c_in: usize, c_out: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ResidualBlock {
        let mid = c_out / 4;
        let path = vec![
            (Conv2d::new(c_in, mid, 1, 1, 0, 1, false, rng), BatchNorm2d::new(mid)),
            (Conv2d::new(mid, mid, 3, stride, 1, 1, false, rng), BatchNorm2d::new(mid)),
            (Conv2d::new(mid, c_out, 1, 1, 0, 1, false, rng), BatchNorm2d::new(c_out)),
        ];
        ResidualBlock::finish(path, c_in, c_out, stride, rng)
    }

    fn finish(
        path: Vec<(Conv2d, BatchNorm2d)>,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> ResidualBlock {
        let acts = (0..path.len() - 1).map(|_| Activation::relu()).collect();
        let down = (stride != 1 || c_in != c_out).then(|| {
            (Conv2d::new(c_in, c_out, 1, stride, 0, 1, false, rng), BatchNorm2d::new(c_out))
        });
        ResidualBlock { path, acts, down, act_out: Activation::relu() }
    }
}

impl Layer for ResidualBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let n = self.path.len();
        let mut h = x.clone();
        for (i, (c, bn)) in self.path.iter_mut().enumerate() {
            h = bn.forward(&c.forward(&h, mode), mode);
            if i + 1 < n {
                h = self.acts[i].forward(&h, mode);
            }
        }
        if let Some((c, bn)) = &mut self.down {
            h.add_assign(&bn.forward(&c.forward(x, mode), mode));
        } else {
            h.add_assign(x);
        }
        self.act_out.forward(&h, mode)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let n = self.path.len();
        let g_sum = self.act_out.backward(grad_out);
        let mut g = g_sum.clone();
        for (i, (c, bn)) in self.path.iter_mut().enumerate().rev() {
            if i + 1 < n {
                g = self.acts[i].backward(&g);
            }
            g = c.backward(&bn.backward(&g));
        }
        if let Some((c, bn)) = &mut self.down {
            g.add_assign(&c.backward(&bn.backward(&g_sum)));
        } else {
            g.add_assign(&g_sum);
        }
        g
    }

    fn visit_params(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, (c, bn)) in self.path.iter_mut().enumerate() {
            c.visit_params(&format!("{path}.c{i}"), f);
            bn.visit_params(&format!("{path}.bn{i}"), f);
        }
        if let Some((c, bn)) = &mut self.down {
            c.visit_params(&format!("{path}.down"), f);
            bn.visit_params(&format!("{path}.down_bn"), f);
        }
    }

    fn visit_buffers(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        for (i, (_, bn)) in self.path.iter_mut().enumerate() {
            bn.visit_buffers(&format!("{path}.bn{i}"), f);
        }
        if let Some((_, bn)) = &mut self.down {
            bn.visit_buffers(&format!("{path}.down_bn"), f);
        }
    }

    fn visit_quant(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut QuantSlot)) {
        for (i, (c, _)) in self.path.iter_mut().enumerate() {
            c.visit_quant(&format!("{path}.c{i}"), f);
        }
        if let Some((c, _)) = &mut self.down {
            c.visit_quant(&format!("{path}.down"), f);
        }
    }

    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut Conv2d)) {
        for (c, _) in &mut self.path {
            f(c);
        }
        if let Some((c, _)) = &mut self.down {
            f(c);
        }
    }

    fn clear_cache(&mut self) {
        for (c, bn) in &mut self.path {
            c.clear_cache();
            bn.clear_cache();
        }
        for a in &mut self.acts {
            a.clear_cache();
        }
        if let Some((c, bn)) = &mut self.down {
            c.clear_cache();
            bn.clear_cache();
        }
        self.act_out.clear_cache();
    }
}

// ---------------------------------------------------------------------------
// Upsample (nearest, 2x) — local to the neck so its cache stays per-slot
// ---------------------------------------------------------------------------

use crate::nn::Upsample2x;

// ---------------------------------------------------------------------------
// Detector
// ---------------------------------------------------------------------------

/// Per-level output of [`Detector::forward`].
pub struct ForwardOut {
    /// Neck feature maps, finest level first, each `[n, fpn_channels, h, w]`.
    pub fpn: Vec<Tensor>,
    /// Class logits per level, `[n, 2, h, w]`.
    pub cls: Vec<Tensor>,
    /// Raw (pre-exponential) regression maps per level, `[n, 4, h, w]`.
    pub reg_raw: Vec<Tensor>,
}

/// Per-level inference output of [`Detector::predict`]: flattened
/// single-image maps with the regression already mapped to edge distances.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Class logits, layout `[class][y][x]`, length 2*h*w.
    pub cls_logits: Vec<f64>,
    /// Edge distances (l,t,r,b) in pixels, layout `[side][y][x]`, length 4*h*w.
    pub dists: Vec<f64>,
}

/// Hard ceiling on `scale * raw` before exponentiation; keeps early-training
/// distances finite.  Beyond the ceiling the transform is flat, so its
/// gradient is zero there.
pub const DIST_EXP_CLAMP: f64 = 45.0;

/// Edge-distance transform `d = exp(scale * raw)` and its partials
/// `(d, dd/draw, dd/dscale)`.
pub fn dist_and_grad(scale: f64, raw: f64) -> (f64, f64, f64) {
    let z = scale * raw;
    if z > DIST_EXP_CLAMP {
        (DIST_EXP_CLAMP.exp(), 0.0, 0.0)
    } else {
        let d = z.exp();
        (d, d * scale, d * raw)
    }
}

/// A three-level anchor-free detector: backbone, top-down neck, and a pair
/// of heads shared across levels.
pub struct Detector {
    spec: DetectorSpec,
    arch: ArchKind,
    stem: Sequential,
    /// Backbone stages ending at strides 4, 8, 16, 32; the last three are
    /// the lateral tap points.
    stages: Vec<Sequential>,
    laterals: Vec<Conv2d>,
    /// `ups[0]` spreads the coarsest level onto the middle one, `ups[1]`
    /// the middle onto the finest.
    ups: Vec<Upsample2x>,
    cls_head: Sequential,
    reg_head: Sequential,
    /// One positive scalar per level multiplying the raw regression output
    /// before exponentiation. Edge distances are stride-normalized:
    /// `d = stride * exp(scale * raw)`, so an untrained head starts each
    /// level at its own stride instead of at one pixel.
    scales: Vec<Param>,
}

/// Probability a fresh network assigns to any class at any location; the
/// class-head bias starts at the matching logit so early training is not
/// swamped by easy negatives.
pub const PRIOR_PROB: f64 = 0.01;

fn head(fpn_c: usize, out_c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Sequential {
    Sequential::new(vec![
        Box::new(Conv2d::new(fpn_c, fpn_c, 3, 1, 1, 1, false, rng)),
        Box::new(BatchNorm2d::new(fpn_c)),
        Box::new(Activation::relu6()),
        Box::new(Conv2d::new(fpn_c, fpn_c, 1, 1, 0, 1, true, rng)),
        Box::new(Conv2d::new(fpn_c, out_c, 3, 1, 1, 1, true, rng)),
    ])
}

/// Build the compact student: inverted-residual backbone tapped at strides
/// 8/16/32, 1x1 lateral neck with top-down addition, shared heads.
pub fn build_student(spec: &DetectorSpec, seed: u64) -> Result<Detector> {
    spec.validate()?;
    let rng = &mut seed_rng(seed, "init/student");
    // (c_in, c_out, expansion, stride) per block, grouped into stages that
    // end at strides 4, 8, 16 and 32.
    let (stem_c, plan): (usize, Vec<Vec<(usize, usize, usize, usize)>>) = match spec.profile {
        Profile::Desk => (
            12,
            vec![
                vec![(12, 16, 2, 2)],
                vec![(16, 20, 2, 2), (20, 20, 2, 1)],
                vec![(20, 28, 2, 2), (28, 28, 2, 1)],
                vec![(28, 40, 2, 2)],
            ],
        ),
        Profile::Paper => (
            32,
            vec![
                vec![(32, 16, 1, 1), (16, 24, 6, 2), (24, 24, 6, 1)],
                vec![(24, 32, 6, 2), (32, 32, 6, 1), (32, 32, 6, 1)],
                vec![
                    (32, 64, 6, 2),
                    (64, 64, 6, 1),
                    (64, 64, 6, 1),
                    (64, 64, 6, 1),
                    (64, 96, 6, 1),
                    (96, 96, 6, 1),
                    (96, 96, 6, 1),
                ],
                vec![
                    (96, 160, 6, 2),
                    (160, 160, 6, 1),
                    (160, 160, 6, 1),
                    (160, 320, 6, 1),
                    (320, 320, 4, 1),
                ],
            ],
        ),
    };
    let stem = Sequential::new(vec![
        Box::new(Conv2d::new(3, stem_c, 3, 2, 1, 1, false, rng)),
        Box::new(BatchNorm2d::new(stem_c)),
        Box::new(Activation::relu6()),
    ]);
    let mut stages = Vec::new();
    let mut taps = [0usize; 3];
    for (si, stage_plan) in plan.iter().enumerate() {
        let blocks: Vec<Box<dyn Layer>> = stage_plan
            .iter()
            .map(|&(ci, co, t, s)| Box::new(InvertedResidual::new(ci, co, t, s, rng)) as Box<dyn Layer>)
            .collect();
        if si >= 1 {
            taps[si - 1] = stage_plan.last().unwrap().1;
        }
        stages.push(Sequential::new(blocks));
    }
    Detector::assemble(spec.clone(), ArchKind::Student, stem, stages, taps, rng)
}

/// Build the residual teacher at one of the supported depths.  The paper
/// profile mirrors the classic 34/50/101-layer residual stacks; the desk
/// profile is a width/depth-scaled stand-in keeping the same block type.
pub fn build_teacher(depth: u32, spec: &DetectorSpec, seed: u64) -> Result<Detector> {
    spec.validate()?;
    if !matches!(depth, 34 | 50 | 101) {
        return Err(Error::invalid(format!("unsupported teacher depth {depth} (expected 34, 50 or 101)")));
    }
    let rng = &mut seed_rng(seed, &format!("init/teacher{depth}"));
    let mut taps = [0usize; 3];
    let (stem, stages): (Sequential, Vec<Sequential>) = match spec.profile {
        Profile::Desk => {
            let blocks_per_stage = match depth {
                34 => 2,
                50 => 3,
                _ => 4,
            };
            let widths = [32usize, 48, 72, 96];
            let stem = Sequential::new(vec![
                Box::new(Conv2d::new(3, 24, 3, 2, 1, 1, false, rng)),
                Box::new(BatchNorm2d::new(24)),
                Box::new(Activation::relu()),
            ]);
            let mut c_in = 24;
            let mut stages = Vec::new();
            for (si, &w) in widths.iter().enumerate() {
                let mut blocks: Vec<Box<dyn Layer>> = Vec::new();
                for b in 0..blocks_per_stage {
                    let stride = if b == 0 { 2 } else { 1 };
                    blocks.push(Box::new(ResidualBlock::basic(c_in, w, stride, rng)));
                    c_in = w;
                }
                if si >= 1 {
                    taps[si - 1] = w;
                }
                stages.push(Sequential::new(blocks));
            }
            (stem, stages)
        }
        Profile::Paper => {
            let (counts, widths, bottleneck): (Vec<usize>, [usize; 4], bool) = match depth {
                34 => (vec![3, 4, 6, 3], [64, 128, 256, 512], false),
                50 => (vec![3, 4, 6, 3], [256, 512, 1024, 2048], true),
                _ => (vec![3, 4, 23, 3], [256, 512, 1024, 2048], true),
            };
            // 7x7/2 stem plus a stride-2 conv standing in for the usual
            // max-pool, so stage one starts at stride 4.
            let stem = Sequential::new(vec![
                Box::new(Conv2d::new(3, 64, 7, 2, 3, 1, false, rng)),
                Box::new(BatchNorm2d::new(64)),
                Box::new(Activation::relu()),
                Box::new(Conv2d::new(64, 64, 3, 2, 1, 1, false, rng)),
                Box::new(BatchNorm2d::new(64)),
                Box::new(Activation::relu()),
            ]);
            let mut c_in = 64;
            let mut stages = Vec::new();
            for (si, (&n, &w)) in counts.iter().zip(widths.iter()).enumerate() {
                let mut blocks: Vec<Box<dyn Layer>> = Vec::new();
                for b in 0..n {
                    let stride = if b == 0 && si > 0 { 2 } else { 1 };
                    let block = if bottleneck {
                        ResidualBlock::bottleneck(c_in, w, stride, rng)
                    } else {
                        ResidualBlock::basic(c_in, w, stride, rng)
                    };
                    blocks.push(Box::new(block));
                    c_in = w;
                }
                if si >= 1 {
                    taps[si - 1] = w;
                }
                stages.push(Sequential::new(blocks));
            }
            (stem, stages)
        }
    };
    Detector::assemble(spec.clone(), ArchKind::Teacher { depth }, stem, stages, taps, rng)
}

impl Detector {
    fn assemble(
        spec: DetectorSpec,
        arch: ArchKind,
        stem: Sequential,
        stages: Vec<Sequential>,
        taps: [usize; 3],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Detector> {
        let c = spec.fpn_channels;
        let laterals = taps.iter().map(|&t| Conv2d::new(t, c, 1, 1, 0, 1, true, rng)).collect();
        let mut cls_head = head(c, NUM_CLASSES, rng);
        let reg_head = head(c, 4, rng);
        // Start the class logits at the rare-positive prior.
        if let Some(last) = cls_head.layers.last_mut() {
            let mut set = false;
            last.visit_params("", &mut |name, p| {
                if name.ends_with("bias") {
                    p.value.data_mut().iter_mut().for_each(|v| *v = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
                    set = true;
                }
            });
            debug_assert!(set, "class head must end in a biased conv");
        }
        let scales = (0..3)
            .map(|_| Param::new(Tensor::full(&[1], 1.0), ParamKind::Scale))
            .collect();
        Ok(Detector {
            spec,
            arch,
            stem,
            stages,
            laterals,
            ups: vec![Upsample2x::new(), Upsample2x::new()],
            cls_head,
            reg_head,
            scales,
        })
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn arch(&self) -> ArchKind {
        self.arch
    }

    /// Learned regression scale of level `li`.
    pub fn scale(&self, li: usize) -> f64 {
        self.scales[li].value.data()[0]
    }

    /// Accumulate a gradient on the level-`li` regression scale.
    pub fn add_scale_grad(&mut self, li: usize, g: f64) {
        self.scales[li].grad.data_mut()[0] += g;
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let (h, w) = self.spec.input_hw;
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::shape(format!(
                "expected input [n, 3, {h}, {w}], got {s:?}"
            )));
        }
        Ok(())
    }

    /// Full forward pass.  In [`Mode::Train`] every layer caches what its
    /// backward pass needs; caches are consumed LIFO by [`Detector::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<ForwardOut> {
        self.forward_inner(x, mode, true)
    }

    fn forward_inner(&mut self, x: &Tensor, mode: Mode, top_down: bool) -> Result<ForwardOut> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x, mode);
        let mut c_feats = Vec::with_capacity(3);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            h = stage.forward(&h, mode);
            if si >= 1 {
                c_feats.push(h.clone());
            }
        }
        // Top-down neck: coarsest lateral first, then upsample-and-add.
        let p5 = self.laterals[2].forward(&c_feats[2], mode);
        let mut p4 = self.laterals[1].forward(&c_feats[1], mode);
        if top_down {
            p4.add_assign(&self.ups[0].forward(&p5, mode));
        }
        let mut p3 = self.laterals[0].forward(&c_feats[0], mode);
        if top_down {
            p3.add_assign(&self.ups[1].forward(&p4, mode));
        }
        let fpn = vec![p3, p4, p5];
        let mut cls = Vec::with_capacity(3);
        let mut reg_raw = Vec::with_capacity(3);
        for p in &fpn {
            cls.push(self.cls_head.forward(p, mode));
            reg_raw.push(self.reg_head.forward(p, mode));
        }
        Ok(ForwardOut { fpn, cls, reg_raw })
    }

    /// Backward pass matching one [`Mode::Train`] forward call.  Gradients
    /// arrive per level w.r.t. the class logits and raw regression maps;
    /// `grad_fpn` optionally adds gradients flowing directly into the neck
    /// outputs (feature-distillation terms).  Parameter gradients
    /// accumulate; call [`Detector::zero_grads`] between steps.
    pub fn backward(
        &mut self,
        grad_cls: &[Tensor],
        grad_reg_raw: &[Tensor],
        grad_fpn: Option<&[Tensor]>,
    ) -> Result<()> {
        if grad_cls.len() != 3 || grad_reg_raw.len() != 3 {
            return Err(Error::shape("expected gradients for exactly 3 levels"));
        }
        // Heads were run finest-level-first, so their caches pop coarsest
        // first.
        let mut g_fpn: Vec<Tensor> = Vec::with_capacity(3);
        for li in (0..3).rev() {
            let mut g = self.reg_head.backward(&grad_reg_raw[li]);
            g.add_assign(&self.cls_head.backward(&grad_cls[li]));
            if let Some(extra) = grad_fpn {
                g.add_assign(&extra[li]);
            }
            g_fpn.push(g);
        }
        g_fpn.reverse(); // finest first again
        let (g_p3, mut g_p4, mut g_p5) = {
            let g5 = g_fpn.pop().unwrap();
            let g4 = g_fpn.pop().unwrap();
            let g3 = g_fpn.pop().unwrap();
            (g3, g4, g5)
        };
        // Neck backward mirrors forward: p3 = lat0(c3) + up(p4), so the
        // upsample contribution feeds back into p4 before that level is
        // unwound.
        let g_c3 = self.laterals[0].backward(&g_p3);
        g_p4.add_assign(&self.ups[1].backward(&g_p3));
        let g_c4 = self.laterals[1].backward(&g_p4);
        g_p5.add_assign(&self.ups[0].backward(&g_p4));
        let g_c5 = self.laterals[2].backward(&g_p5);

        let mut g = self.stages[3].backward(&g_c5);
        g.add_assign(&g_c4);
        g = self.stages[2].backward(&g);
        g.add_assign(&g_c3);
        g = self.stages[1].backward(&g);
        g = self.stages[0].backward(&g);
        self.stem.backward(&g);
        Ok(())
    }

    /// Single-image inference outputs: class logits plus positive edge
    /// distances per level, batch-norm in running-statistics mode.
    pub fn predict(&mut self, image: &Tensor) -> Result<Vec<LevelPrediction>> {
        let batched;
        let x = if image.shape().len() == 3 {
            let s = image.shape().to_vec();
            batched = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
            &batched
        } else {
            image
        };
        let out = self.forward_inner(x, Mode::Eval, true)?;
        let mut preds = Vec::with_capacity(3);
        for (li, (cls_t, reg_t)) in out.cls.iter().zip(out.reg_raw.iter()).enumerate() {
            let (h, w) = self.spec.level_hw(li);
            let scale = self.scale(li);
            let stride = self.spec.strides[li] as f64;
            let dists =
                reg_t.data().iter().map(|&raw| stride * dist_and_grad(scale, raw).0).collect();
            preds.push(LevelPrediction {
                stride: self.spec.strides[li],
                h,
                w,
                cls_logits: cls_t.data().to_vec(),
                dists,
            });
        }
        Ok(preds)
    }

    /// Visit every learnable parameter under a stable, checkpoint-safe name.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params("stem", f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&format!("stage{i}"), f);
        }
        for (i, l) in self.laterals.iter_mut().enumerate() {
            l.visit_params(&format!("lateral{i}"), f);
        }
        self.cls_head.visit_params("cls_head", f);
        self.reg_head.visit_params("reg_head", f);
        for (i, s) in self.scales.iter_mut().enumerate() {
            f(&format!("scale{i}"), s);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.stem.visit_buffers("stem", f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers(&format!("stage{i}"), f);
        }
        self.cls_head.visit_buffers("cls_head", f);
        self.reg_head.visit_buffers("reg_head", f);
    }

    pub fn visit_quant(&mut self, f: &mut dyn FnMut(&str, &mut QuantSlot)) {
        self.stem.visit_quant("stem", f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_quant(&format!("stage{i}"), f);
        }
        for (i, l) in self.laterals.iter_mut().enumerate() {
            l.visit_quant(&format!("lateral{i}"), f);
        }
        self.cls_head.visit_quant("cls_head", f);
        self.reg_head.visit_quant("reg_head", f);
    }

    pub fn visit_convs(&mut self, f: &mut dyn FnMut(&mut Conv2d)) {
        self.stem.visit_convs(f);
        for s in &mut self.stages {
            s.visit_convs(f);
        }
        for l in &mut self.laterals {
            l.visit_convs(f);
        }
        self.cls_head.visit_convs(f);
        self.reg_head.visit_convs(f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn clear_caches(&mut self) {
        self.stem.clear_cache();
        for s in &mut self.stages {
            s.clear_cache();
        }
        for l in &mut self.laterals {
            l.clear_cache();
        }
        for u in &mut self.ups {
            u.clear_cache();
        }
        self.cls_head.clear_cache();
        self.reg_head.clear_cache();
    }

    /// Number of learnable scalars.
    pub fn count_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    /// FLOPs of one single-image forward pass at the spec input size:
    /// two per conv multiply-accumulate plus the bias adds; normalization,
    /// activations and upsampling are not counted.
    pub fn count_flops(&mut self) -> Result<u64> {
        let (h, w) = self.spec.input_hw;
        let x = Tensor::zeros(&[1, 3, h, w]);
        self.forward_inner(&x, Mode::Eval, true)?;
        let mut total = 0u64;
        self.visit_convs(&mut |c| total += c.last_flops());
        Ok(total)
    }

    // -- checkpointing ------------------------------------------------------

    /// Serialize the architecture manifest plus every parameter and buffer,
    /// bit-exact, into a versioned binary file.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        let manifest = Manifest { spec: self.spec.clone(), arch: self.arch };
        let mjson = serde_json::to_vec(&manifest)
            .map_err(|e| Error::integrity(format!("manifest encode: {e}")))?;
        buf.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
        buf.extend_from_slice(&mjson);

        let mut params: Vec<(String, ParamKind, Vec<usize>, Vec<f64>)> = Vec::new();
        self.visit_params(&mut |name, p| {
            params.push((name.to_string(), p.kind, p.value.shape().to_vec(), p.value.data().to_vec()));
        });
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, kind, shape, data) in &params {
            write_str(&mut buf, name);
            buf.push(kind_code(*kind));
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut buffers: Vec<(String, Vec<f64>)> = Vec::new();
        self.visit_buffers(&mut |name, b| buffers.push((name.to_string(), b.clone())));
        buf.extend_from_slice(&(buffers.len() as u32).to_le_bytes());
        for (name, data) in &buffers {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    /// Rebuild a detector from [`Detector::save`] output.  Every stored
    /// tensor must land on a parameter of the same name and shape, and
    /// every parameter must be covered.
    pub fn load(path: &Path) -> Result<Detector> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { b: &bytes, pos: 0 };
        let magic = cur.take(CKPT_MAGIC.len())?;
        if magic != CKPT_MAGIC {
            return Err(Error::integrity("not a detector checkpoint (bad magic)"));
        }
        let mlen = cur.u32()? as usize;
        let manifest: Manifest = serde_json::from_slice(cur.take(mlen)?)
            .map_err(|e| Error::integrity(format!("manifest decode: {e}")))?;
        let mut det = match manifest.arch {
            ArchKind::Student => build_student(&manifest.spec, 0)?,
            ArchKind::Teacher { depth } => build_teacher(depth, &manifest.spec, 0)?,
        };

        let n_params = cur.u32()? as usize;
        let mut stored: HashMap<String, (u8, Vec<usize>, Vec<f64>)> = HashMap::with_capacity(n_params);
        for _ in 0..n_params {
            let name = cur.string()?;
            let kind = cur.take(1)?[0];
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let data = cur.f64s(len)?;
            if stored.insert(name.clone(), (kind, shape, data)).is_some() {
                return Err(Error::integrity(format!("duplicate parameter {name}")));
            }
        }
        let mut missing = Vec::new();
        let mut err: Option<Error> = None;
        det.visit_params(&mut |name, p| {
            match stored.remove(name) {
                None => missing.push(name.to_string()),
                Some((kind, shape, data)) => {
                    if kind != kind_code(p.kind) || shape != p.value.shape() {
                        err.get_or_insert_with(|| {
                            Error::integrity(format!("parameter {name} does not match the architecture"))
                        });
                    } else {
                        p.value.data_mut().copy_from_slice(&data);
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(Error::integrity(format!("checkpoint is missing parameters: {missing:?}")));
        }
        if !stored.is_empty() {
            let extra: Vec<_> = stored.keys().cloned().collect();
            return Err(Error::integrity(format!("checkpoint has unknown parameters: {extra:?}")));
        }

        let n_buffers = cur.u32()? as usize;
        let mut stored_b: HashMap<String, Vec<f64>> = HashMap::with_capacity(n_buffers);
        for _ in 0..n_buffers {
            let name = cur.string()?;
            let len = cur.u32()? as usize;
            stored_b.insert(name, cur.f64s(len)?);
        }
        let mut missing_b = Vec::new();
        let mut err_b: Option<Error> = None;
        det.visit_buffers(&mut |name, b| match stored_b.remove(name) {
            None => missing_b.push(name.to_string()),
            Some(data) => {
                if data.len() != b.len() {
                    err_b.get_or_insert_with(|| {
                        Error::integrity(format!("buffer {name} does not match the architecture"))
                    });
                } else {
                    b.copy_from_slice(&data);
                }
            }
        });
        if let Some(e) = err_b {
            return Err(e);
        }
        if !missing_b.is_empty() || !stored_b.is_empty() {
            return Err(Error::integrity("checkpoint buffers do not cover the architecture"));
        }
        Ok(det)
    }
}

const CKPT_MAGIC: &[u8] = b"DETCKPT1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DetectorSpec,
    arch: ArchKind,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::BnGamma => 2,
        ParamKind::BnBeta => 3,
        ParamKind::Scale => 4,
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::integrity("truncated checkpoint"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| Error::integrity("non-UTF-8 name in checkpoint"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let s = self.take(8 * n)?;
        Ok(s.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::assert_all_close;

    #[test]
    fn spec_validation_rejects_bad_configs() {
        let mut s = DetectorSpec::desk();
        s.strides = [4, 8, 16];
        assert!(s.validate().is_err());
        let mut s = DetectorSpec::desk();
        s.input_hw = (100, 128);
        assert!(s.validate().is_err());
        let mut s = DetectorSpec::desk();
        s.fpn_channels = 0;
        assert!(s.validate().is_err());
        assert!(DetectorSpec::desk().validate().is_ok());
        assert!(DetectorSpec::paper().validate().is_ok());
        assert!(DetectorSpec::paper_teacher().validate().is_ok());
    }

    #[test]
    fn locations_sit_at_half_stride_offsets() {
        let s = DetectorSpec::desk();
        assert_eq!(s.location(0, 0, 0), (4.0, 4.0));
        assert_eq!(s.location(0, 2, 5), (4.0 + 5.0 * 8.0, 4.0 + 2.0 * 8.0));
        assert_eq!(s.location(2, 1, 1), (48.0, 48.0));
        assert_eq!(s.level_hw(0), (16, 16));
        assert_eq!(s.level_hw(1), (8, 8));
        assert_eq!(s.level_hw(2), (4, 4));
        let r = s.level_ranges();
        assert_eq!(r[0], (0.0, 64.0));
        assert_eq!(r[1], (64.0, 128.0));
        assert!(r[2].1.is_infinite());
    }

    #[test]
    fn rejects_unsupported_teacher_depth() {
        match build_teacher(77, &DetectorSpec::desk(), 0) {
            Err(e) => assert!(e.to_string().contains("77")),
            Ok(_) => panic!("depth 77 must be rejected"),
        }
    }

    fn random_image(spec: &DetectorSpec, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = seed_rng(seed, "detector-test-image");
        let (h, w) = spec.input_hw;
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[1, 3, h, w], data).unwrap()
    }

    #[test]
    fn student_and_teacher_levels_align() {
        let spec = DetectorSpec::desk();
        let mut student = build_student(&spec, 1).unwrap();
        let mut teacher = build_teacher(34, &spec, 2).unwrap();
        let x = random_image(&spec, 3);
        let so = student.forward(&x, Mode::Eval).unwrap();
        let to = teacher.forward(&x, Mode::Eval).unwrap();
        for li in 0..3 {
            let (h, w) = spec.level_hw(li);
            assert_eq!(so.fpn[li].shape(), &[1, spec.fpn_channels, h, w]);
            assert_eq!(so.fpn[li].shape(), to.fpn[li].shape());
            assert_eq!(so.cls[li].shape(), &[1, NUM_CLASSES, h, w]);
            assert_eq!(so.reg_raw[li].shape(), &[1, 4, h, w]);
            assert!(so.fpn[li].all_finite() && so.cls[li].all_finite() && so.reg_raw[li].all_finite());
            assert!(to.fpn[li].all_finite());
        }
    }

    #[test]
    fn fresh_class_head_starts_near_the_prior() {
        let spec = DetectorSpec::desk();
        let mut det = build_student(&spec, 5).unwrap();
        let mut bias = Vec::new();
        det.visit_params(&mut |name, p| {
            if name == "cls_head.4.bias" {
                bias = p.value.data().to_vec();
            }
        });
        let want = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        assert_eq!(bias.len(), NUM_CLASSES);
        for b in bias {
            assert!((b - want).abs() < 1e-12);
        }
        // With batch statistics active, a fresh network's scores sit near
        // the prior instead of flooding the image with positives.
        let out = det.forward(&random_image(&spec, 6), Mode::Train).unwrap();
        det.clear_caches();
        let (mut sum, mut n) = (0.0, 0);
        for t in &out.cls {
            for &l in t.data() {
                sum += crate::nn::sigmoid(l);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean < 0.15, "fresh mean score {mean}");
    }

    #[test]
    fn predict_emits_positive_finite_distances() {
        let spec = DetectorSpec::desk();
        let mut det = build_student(&spec, 7).unwrap();
        let preds = det.predict(&random_image(&spec, 8)).unwrap();
        assert_eq!(preds.len(), 3);
        for (li, p) in preds.iter().enumerate() {
            let (h, w) = spec.level_hw(li);
            assert_eq!((p.h, p.w, p.stride), (h, w, spec.strides[li]));
            assert_eq!(p.cls_logits.len(), NUM_CLASSES * h * w);
            assert_eq!(p.dists.len(), 4 * h * w);
            assert!(p.dists.iter().all(|&d| d > 0.0 && d.is_finite()));
        }
        // A rank-3 image must behave identically to its batched form.
        let img = random_image(&spec, 8);
        let flat = img.clone().reshape(&[3, 128, 128]).unwrap();
        let p2 = det.predict(&flat).unwrap();
        assert_eq!(preds[0].cls_logits, p2[0].cls_logits);
    }

    #[test]
    fn shared_heads_tie_all_levels_together() {
        let spec = DetectorSpec::desk();
        let mut det = build_student(&spec, 9).unwrap();
        let x = random_image(&spec, 10);
        let base = det.forward(&x, Mode::Eval).unwrap();
        // Each parameter name must appear exactly once even though the head
        // runs on three levels.
        let mut names = std::collections::HashSet::new();
        det.visit_params(&mut |name, _| {
            assert!(names.insert(name.to_string()), "duplicate param {name}");
        });
        // Nudging the shared head's output bias shifts every level: had the
        // levels owned separate head copies, two of them would be untouched.
        det.visit_params(&mut |name, p| {
            if name == "cls_head.4.bias" {
                p.value.data_mut().iter_mut().for_each(|v| *v += 0.5);
            }
        });
        let bumped = det.forward(&x, Mode::Eval).unwrap();
        for li in 0..3 {
            let a = base.cls[li].data();
            let b = bumped.cls[li].data();
            assert!(
                a.iter().zip(b).all(|(x, y)| (y - x - 0.5).abs() < 1e-9),
                "level {li} missed the shared bias shift"
            );
        }
    }

    #[test]
    fn top_down_pathway_feeds_the_finer_levels() {
        let spec = DetectorSpec::desk();
        let mut det = build_student(&spec, 11).unwrap();
        let x = random_image(&spec, 12);
        let with = det.forward_inner(&x, Mode::Eval, true).unwrap();
        let without = det.forward_inner(&x, Mode::Eval, false).unwrap();
        // The coarsest level has no top-down input, the finer two do.
        assert_eq!(with.fpn[2].data(), without.fpn[2].data());
        for li in 0..2 {
            let a = with.fpn[li].data();
            let b = without.fpn[li].data();
            assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
        }
    }

    #[test]
    fn dist_transform_clamps_and_differentiates() {
        let (d, dr, ds) = dist_and_grad(1.0, 0.0);
        assert_eq!(d, 1.0);
        assert_eq!(dr, 1.0);
        assert_eq!(ds, 0.0);
        let (d, dr, ds) = dist_and_grad(2.0, 100.0);
        assert_eq!(d, DIST_EXP_CLAMP.exp());
        assert_eq!((dr, ds), (0.0, 0.0));
        // Finite-difference check away from the clamp.
        let h = 1e-6;
        let (_, dr, ds) = dist_and_grad(1.3, 0.7);
        let nr = (dist_and_grad(1.3, 0.7 + h).0 - dist_and_grad(1.3, 0.7 - h).0) / (2.0 * h);
        let ns = (dist_and_grad(1.3 + h, 0.7).0 - dist_and_grad(1.3 - h, 0.7).0) / (2.0 * h);
        assert_all_close(&[dr, ds], &[nr, ns], 1e-6, 1e-9);
    }

    /// Loss = sum of fixed random weights times every output map; its
    /// gradient w.r.t. any parameter is checked by central differences.
    #[test]
    fn full_network_gradients_match_finite_differences() {
        use rand::Rng;
        let spec = DetectorSpec::desk();
        let mut det = build_student(&spec, 13).unwrap();
        let x = random_image(&spec, 14);
        let mut wrng = seed_rng(15, "detector-grad-weights");
        let mut make_weights = |shapes: &[Vec<usize>]| -> Vec<Tensor> {
            shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let d: Vec<f64> = (0..n).map(|_| wrng.gen_range(-1.0..1.0)).collect();
                    Tensor::from_vec(s, d).unwrap()
                })
                .collect()
        };
        let out = det.forward(&x, Mode::Train).unwrap();
        det.clear_caches();
        let w_cls = make_weights(&out.cls.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>());
        let w_reg = make_weights(&out.reg_raw.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>());
        let w_fpn = make_weights(&out.fpn.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>());

        let loss_of = |det: &mut Detector, x: &Tensor| -> f64 {
            let out = det.forward(x, Mode::Train).unwrap();
            det.clear_caches();
            let dot = |a: &Tensor, b: &Tensor| -> f64 {
                a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum()
            };
            let mut l = 0.0;
            for li in 0..3 {
                l += dot(&out.cls[li], &w_cls[li]);
                l += dot(&out.reg_raw[li], &w_reg[li]);
                l += dot(&out.fpn[li], &w_fpn[li]);
            }
            l
        };

        det.zero_grads();
        det.forward(&x, Mode::Train).unwrap();
        det.backward(&w_cls, &w_reg, Some(&w_fpn)).unwrap();

        // Sample a handful of parameters across the depth of the network.
        let picks = [
            "stem.0.weight",
            "stage0.0.dw.weight",
            "stage1.1.proj.weight",
            "stage2.0.exp.weight",
            "stage1.0.dw_bn.gamma",
            "stage3.0.proj_bn.beta",
            "lateral0.weight",
            "lateral2.bias",
            "cls_head.0.weight",
            "cls_head.3.bias",
            "reg_head.4.weight",
        ];
        for pick in picks {
            let mut got = f64::NAN;
            det.visit_params(&mut |name, p| {
                if name == pick {
                    got = p.grad.data()[0];
                }
            });
            assert!(got.is_finite(), "missing param {pick}");
            let h = 1e-4;
            let mut eval_at = |delta: f64, det: &mut Detector, x: &Tensor| -> f64 {
                det.visit_params(&mut |name, p| {
                    if name == pick {
                        p.value.data_mut()[0] += delta;
                    }
                });
                let l = loss_of(det, x);
                det.visit_params(&mut |name, p| {
                    if name == pick {
                        p.value.data_mut()[0] -= delta;
                    }
                });
                l
            };
            let up = eval_at(h, &mut det, &x);
            let dn = eval_at(-h, &mut det, &x);
            let want = (up - dn) / (2.0 * h);
            assert_all_close(&[got], &[want], 1e-3, 1e-6);
        }
    }

    #[test]
    fn desk_parameter_and_flop_budgets_hold() {
        let spec = DetectorSpec::desk();
        let mut student = build_student(&spec, 16).unwrap();
        let sp = student.count_params();
        assert!(sp < 500_000, "desk student has {sp} params");
        let sf = student.count_flops().unwrap();
        for depth in [34, 50, 101] {
            let mut teacher = build_teacher(depth, &spec, 17).unwrap();
            let tf = teacher.count_flops().unwrap();
            let tp = teacher.count_params();
            assert!(
                tf as f64 >= 4.0 * sf as f64,
                "teacher{depth} flops {tf} not 4x student {sf}"
            );
            assert!(tp >= 4 * sp, "teacher{depth} params {tp} not 4x student {sp}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = DetectorSpec::desk();
        let mut det = build_student(&spec, 18).unwrap();
        // Push the network away from init so buffers are non-trivial.
        let x = random_image(&spec, 19);
        let out = det.forward(&x, Mode::Train).unwrap();
        let g_cls: Vec<Tensor> = out.cls.iter().map(|t| Tensor::full(t.shape(), 0.01)).collect();
        let g_reg: Vec<Tensor> = out.reg_raw.iter().map(|t| Tensor::full(t.shape(), 0.01)).collect();
        det.backward(&g_cls, &g_reg, None).unwrap();
        det.visit_params(&mut |_, p| {
            let g = p.grad.data().to_vec();
            for (v, gi) in p.value.data_mut().iter_mut().zip(g) {
                *v -= 0.01 * gi;
            }
        });

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        det.save(&path).unwrap();
        let mut loaded = Detector::load(&path).unwrap();
        assert_eq!(loaded.arch(), det.arch());
        assert_eq!(loaded.spec(), det.spec());

        let mut want: Vec<(String, Vec<u64>)> = Vec::new();
        det.visit_params(&mut |n, p| {
            want.push((n.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect()));
        });
        let mut got: Vec<(String, Vec<u64>)> = Vec::new();
        loaded.visit_params(&mut |n, p| {
            got.push((n.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect()));
        });
        assert_eq!(want, got);
        let mut wb: Vec<(String, Vec<u64>)> = Vec::new();
        det.visit_buffers(&mut |n, b| wb.push((n.to_string(), b.iter().map(|v| v.to_bits()).collect())));
        let mut gb: Vec<(String, Vec<u64>)> = Vec::new();
        loaded.visit_buffers(&mut |n, b| gb.push((n.to_string(), b.iter().map(|v| v.to_bits()).collect())));
        assert_eq!(wb, gb);

        // Same input, same outputs, bit for bit.
        let a = det.predict(&x).unwrap();
        let b = loaded.predict(&x).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.cls_logits, pb.cls_logits);
            assert_eq!(pa.dists, pb.dists);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let spec = DetectorSpec::desk();
        let mut det = build_student(&spec, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        det.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad = dir.path().join("truncated.ckpt");
        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Detector::load(&bad).is_err());

        let bad2 = dir.path().join("magic.ckpt");
        let mut b2 = bytes.clone();
        b2[0] ^= 0xFF;
        std::fs::write(&bad2, &b2).unwrap();
        match Detector::load(&bad2) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("magic")),
            Err(e) => panic!("expected integrity error, got {e}"),
            Ok(_) => panic!("expected integrity error, got a detector"),
        }
    }
}
