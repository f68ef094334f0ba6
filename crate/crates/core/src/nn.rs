//! Hand-rolled layers with explicit forward caches and analytic backward
//! passes.
//!
//! There is no autograd tape. Each layer keeps a LIFO stack of per-call
//! caches, so a layer whose weights are shared across several forward calls
//! (the detection heads run once per pyramid level) is backpropagated by
//! calling `backward` once per forward call, in reverse order. Gradients
//! accumulate into each parameter's `grad` buffer until `zero_grads`.
//!
//! Convolutions carry an activation [`QuantSlot`] so post-training
//! quantization can observe and later fake-quantize every conv output
//! without touching the model definition.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Forward mode. `Train` caches activations for a later backward pass and
/// lets batch norm use (and update with) batch statistics; `Eval` caches
/// nothing and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a learnable tensor is, which decides its treatment outside the
/// layer: weight decay applies only to `Weight`; `Scale` marks the per-level
/// scalars of the regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    Scale,
}

/// A learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(value: Tensor, kind: ParamKind) -> Param {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, kind }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }
}

/// Activation quantization slot attached to every conv output (and the
/// network input). The quantizer drives the state machine; layers only
/// call [`QuantSlot::process`] on their output tensor.
#[derive(Debug, Clone, Default)]
pub struct QuantSlot {
    pub state: QuantState,
}

#[derive(Debug, Clone, Default)]
pub enum QuantState {
    /// Inert: training and plain float inference.
    #[default]
    Off,
    /// First calibration pass: track the observed value range.
    Range { lo: f64, hi: f64, count: u64 },
    /// Second calibration pass: histogram over the recorded range.
    Hist {
        lo: f64,
        hi: f64,
        bins: Vec<u64>,
        count: u64,
    },
    /// Fake-quantize activations with fixed affine parameters.
    Apply { scale: f64, zero_point: i32 },
}

impl QuantSlot {
    pub fn process(&mut self, t: &mut Tensor) {
        match &mut self.state {
            QuantState::Off => {}
            QuantState::Range { lo, hi, count } => {
                for &v in t.data() {
                    if v < *lo {
                        *lo = v;
                    }
                    if v > *hi {
                        *hi = v;
                    }
                }
                *count += t.len() as u64;
            }
            QuantState::Hist { lo, hi, bins, count } => {
                let n = bins.len();
                let width = (*hi - *lo).max(f64::MIN_POSITIVE);
                for &v in t.data() {
                    let idx = (((v - *lo) / width) * n as f64) as usize;
                    bins[idx.min(n - 1)] += 1;
                }
                *count += t.len() as u64;
            }
            QuantState::Apply { scale, zero_point } => {
                let (s, zp) = (*scale, *zero_point);
                for v in t.data_mut() {
                    *v = fake_quant(*v, s, zp);
                }
            }
        }
    }
}

/// Numerically plain logistic function; scores in this crate stay in f64 so
/// the naive form is accurate enough for logits produced by the heads.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Round-half-to-even affine int8 quantize-dequantize of one value.
#[inline]
pub fn fake_quant(v: f64, scale: f64, zero_point: i32) -> f64 {
    let q = (v / scale).round_ties_even() + zero_point as f64;
    let q = q.clamp(-128.0, 127.0);
    (q - zero_point as f64) * scale
}

/// Common layer interface. `backward` pops the most recent forward cache,
/// accumulates parameter gradients, and returns the gradient w.r.t. that
/// call's input.
pub trait Layer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor;
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;
    /// Visit every learnable parameter, depth first, under `path`.
    fn visit_params(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param));
    /// Visit non-learnable state that must survive a checkpoint round trip
    /// (batch-norm running statistics).
    fn visit_buffers(&mut self, _path: &str, _f: &mut dyn FnMut(&str, &mut Vec<f64>)) {}
    /// Visit activation quantization slots at conv boundaries.
    fn visit_quant(&mut self, _path: &str, _f: &mut dyn FnMut(&str, &mut QuantSlot)) {}
    /// Visit every convolution, depth first (FLOP audits, weight quantization).
    fn visit_convs(&mut self, _f: &mut dyn FnMut(&mut Conv2d)) {}
    /// Drop any cached activations from unfinished forward passes.
    fn clear_cache(&mut self) {}
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("volume matches by construction")
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution over NCHW input, square kernel, symmetric zero padding,
/// grouped channels (`groups == in_c == out_c` gives a depthwise conv).
#[derive(Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub quant: QuantSlot,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    cache: Vec<Tensor>,
    last_macs: u64,
    last_out_elems: u64,
}

impl Conv2d {
    /// Kaiming-initialized conv: weights ~ N(0, sqrt(2 / fan_in)).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        assert!(in_c % groups == 0 && out_c % groups == 0, "channels must divide groups");
        let fan_in = (in_c / groups) * k * k;
        let weight = normal_tensor(&[out_c, in_c / groups, k, k], (2.0 / fan_in as f64).sqrt(), rng);
        Conv2d {
            weight: Param::new(weight, ParamKind::Weight),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_c]), ParamKind::Bias)),
            quant: QuantSlot::default(),
            in_c,
            out_c,
            k,
            stride,
            pad,
            groups,
            cache: Vec::new(),
            last_macs: 0,
            last_out_elems: 0,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    /// Multiply-accumulate count for one forward pass over `h x w` output.
    pub fn macs_for_output(&self, out_h: usize, out_w: usize) -> u64 {
        (self.out_c * out_h * out_w * (self.in_c / self.groups) * self.k * self.k) as u64
    }

    pub fn out_hw(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        (
            (in_h + 2 * self.pad - self.k) / self.stride + 1,
            (in_w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Overwrite the bias with a constant (detection prior for the class
    /// logits).
    pub fn set_bias_constant(&mut self, v: f64) {
        let b = self.bias.as_mut().expect("conv has no bias");
        b.value.data_mut().iter_mut().for_each(|x| *x = v);
    }

    /// FLOPs of the most recent forward pass: two per multiply-accumulate
    /// plus one add per output element when a bias is present.
    pub fn last_flops(&self) -> u64 {
        2 * self.last_macs + if self.bias.is_some() { self.last_out_elems } else { 0 }
    }

    /// Zero all weights (identity-at-init residual branches).
    pub fn zero_weights(&mut self) {
        self.weight.value.fill_zero();
        if let Some(b) = &mut self.bias {
            b.value.fill_zero();
        }
    }

    fn forward_impl(&self, x: &Tensor) -> Tensor {
        let (nb, _, hin, win) = dims4(x);
        let (hout, wout) = self.out_hw(hin, win);
        let mut out = Tensor::zeros(&[nb, self.out_c, hout, wout]);
        if self.k == 3 && self.stride == 1 && self.pad == 1 {
            self.fwd_3x3_s1p1(x, &mut out);
        } else if self.k == 1 && self.stride == 1 && self.pad == 0 {
            self.fwd_1x1_s1(x, &mut out);
        } else {
            self.fwd_general(x, &mut out);
        }
        out
    }

    fn fwd_3x3_s1p1(&self, x: &Tensor, out: &mut Tensor) {
        let (nb, cin, h, w) = dims4(x);
        let icpg = cin / self.groups;
        let ocpg = self.out_c / self.groups;
        let xd = x.data();
        let wd = self.weight.value.data();
        let out_c = self.out_c;
        let od = out.data_mut();
        for n in 0..nb {
            for oc in 0..out_c {
                let g = oc / ocpg;
                let obase = (n * out_c + oc) * h * w;
                if let Some(b) = &self.bias {
                    let bv = b.value.data()[oc];
                    od[obase..obase + h * w].iter_mut().for_each(|v| *v = bv);
                }
                for icg in 0..icpg {
                    let ic = g * icpg + icg;
                    let ibase = (n * cin + ic) * h * w;
                    let wbase = ((oc * icpg) + icg) * 9;
                    for ky in 0..3usize {
                        let dy = ky as isize - 1;
                        let oy0 = (-dy).max(0) as usize;
                        let oy1 = ((h as isize - dy).min(h as isize)) as usize;
                        for kx in 0..3usize {
                            let dx = kx as isize - 1;
                            let wv = wd[wbase + ky * 3 + kx];
                            let ox0 = (-dx).max(0) as usize;
                            let ox1 = ((w as isize - dx).min(w as isize)) as usize;
                            let len = ox1 - ox0;
                            for oy in oy0..oy1 {
                                // Both row starts are non-negative: the
                                // (oy0, ox0) bounds keep oy+dy and ox0+dx
                                // inside the input plane.
                                let iy = (oy as isize + dy) as usize;
                                let orow = obase + oy * w + ox0;
                                let irow = ibase + iy * w + (ox0 as isize + dx) as usize;
                                for i in 0..len {
                                    od[orow + i] += wv * xd[irow + i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn fwd_1x1_s1(&self, x: &Tensor, out: &mut Tensor) {
        let (nb, cin, h, w) = dims4(x);
        let hw = h * w;
        let icpg = cin / self.groups;
        let ocpg = self.out_c / self.groups;
        let xd = x.data();
        let wd = self.weight.value.data();
        let out_c = self.out_c;
        let od = out.data_mut();
        for n in 0..nb {
            for oc in 0..out_c {
                let g = oc / ocpg;
                let obase = (n * out_c + oc) * hw;
                if let Some(b) = &self.bias {
                    let bv = b.value.data()[oc];
                    od[obase..obase + hw].iter_mut().for_each(|v| *v = bv);
                }
                for icg in 0..icpg {
                    let ic = g * icpg + icg;
                    let ibase = (n * cin + ic) * hw;
                    let wv = wd[oc * icpg + icg];
                    for i in 0..hw {
                        od[obase + i] += wv * xd[ibase + i];
                    }
                }
            }
        }
    }

    fn fwd_general(&self, x: &Tensor, out: &mut Tensor) {
        let (nb, cin, hin, win) = dims4(x);
        let (hout, wout) = self.out_hw(hin, win);
        let (k, s, p) = (self.k, self.stride, self.pad);
        let icpg = cin / self.groups;
        let ocpg = self.out_c / self.groups;
        let xd = x.data();
        let wd = self.weight.value.data();
        let out_c = self.out_c;
        let od = out.data_mut();
        for n in 0..nb {
            for oc in 0..out_c {
                let g = oc / ocpg;
                let bv = self.bias.as_ref().map_or(0.0, |b| b.value.data()[oc]);
                for oy in 0..hout {
                    for ox in 0..wout {
                        let mut acc = bv;
                        for icg in 0..icpg {
                            let ic = g * icpg + icg;
                            let wbase = (oc * icpg + icg) * k * k;
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= hin as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    acc += wd[wbase + ky * k + kx]
                                        * xd[((n * cin + ic) * hin + iy as usize) * win + ix as usize];
                                }
                            }
                        }
                        od[((n * out_c + oc) * hout + oy) * wout + ox] = acc;
                    }
                }
            }
        }
    }

    fn backward_impl(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        if self.k == 3 && self.stride == 1 && self.pad == 1 {
            self.bwd_3x3_s1p1(x, grad_out)
        } else {
            self.bwd_general(x, grad_out)
        }
    }

    fn bwd_3x3_s1p1(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        let (nb, cin, h, w) = dims4(x);
        let icpg = cin / self.groups;
        let ocpg = self.out_c / self.groups;
        let mut grad_in = Tensor::zeros(x.shape());
        let xd = x.data();
        let god = grad_out.data();
        let wd = self.weight.value.data();
        let gwd = self.weight.grad.data_mut();
        let gid = grad_in.data_mut();
        let out_c = self.out_c;
        for n in 0..nb {
            for oc in 0..out_c {
                let g = oc / ocpg;
                let obase = (n * out_c + oc) * h * w;
                if let Some(b) = &mut self.bias {
                    let gb: f64 = god[obase..obase + h * w].iter().sum();
                    b.grad.data_mut()[oc] += gb;
                }
                for icg in 0..icpg {
                    let ic = g * icpg + icg;
                    let ibase = (n * cin + ic) * h * w;
                    let wbase = (oc * icpg + icg) * 9;
                    for ky in 0..3usize {
                        let dy = ky as isize - 1;
                        let oy0 = (-dy).max(0) as usize;
                        let oy1 = ((h as isize - dy).min(h as isize)) as usize;
                        for kx in 0..3usize {
                            let dx = kx as isize - 1;
                            let wv = wd[wbase + ky * 3 + kx];
                            let ox0 = (-dx).max(0) as usize;
                            let ox1 = ((w as isize - dx).min(w as isize)) as usize;
                            let len = ox1 - ox0;
                            let mut gw = 0.0;
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + dy) as usize;
                                let orow = obase + oy * w + ox0;
                                let irow = ibase + iy * w + (ox0 as isize + dx) as usize;
                                for i in 0..len {
                                    let go = god[orow + i];
                                    gw += go * xd[irow + i];
                                    gid[irow + i] += go * wv;
                                }
                            }
                            gwd[wbase + ky * 3 + kx] += gw;
                        }
                    }
                }
            }
        }
        grad_in
    }

    fn bwd_general(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        let (nb, cin, hin, win) = dims4(x);
        let (_, _, hout, wout) = dims4(grad_out);
        let (k, s, p) = (self.k, self.stride, self.pad);
        let icpg = cin / self.groups;
        let ocpg = self.out_c / self.groups;
        let mut grad_in = Tensor::zeros(x.shape());
        let xd = x.data();
        let god = grad_out.data();
        let wd = self.weight.value.data();
        let gwd = self.weight.grad.data_mut();
        let gid = grad_in.data_mut();
        let out_c = self.out_c;
        for n in 0..nb {
            for oc in 0..out_c {
                let g = oc / ocpg;
                for oy in 0..hout {
                    for ox in 0..wout {
                        let go = god[((n * out_c + oc) * hout + oy) * wout + ox];
                        if let Some(b) = &mut self.bias {
                            b.grad.data_mut()[oc] += go;
                        }
                        for icg in 0..icpg {
                            let ic = g * icpg + icg;
                            let wbase = (oc * icpg + icg) * k * k;
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= hin as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    let xi = ((n * cin + ic) * hin + iy as usize) * win + ix as usize;
                                    gwd[wbase + ky * k + kx] += go * xd[xi];
                                    gid[xi] += go * wd[wbase + ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut out = self.forward_impl(x);
        let (nb, _, hout, wout) = dims4(&out);
        self.last_macs = nb as u64 * self.macs_for_output(hout, wout);
        self.last_out_elems = out.len() as u64;
        self.quant.process(&mut out);
        if mode == Mode::Train {
            self.cache.push(x.clone());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.cache.pop().expect("conv backward without cached forward");
        self.backward_impl(&x, grad_out)
    }

    fn visit_params(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{path}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{path}.bias"), b);
        }
    }

    fn visit_quant(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut QuantSlot)) {
        f(&format!("{path}.out"), &mut self.quant);
    }

    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut Conv2d)) {
        f(self);
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
    cache: Vec<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], 1.0), ParamKind::BnGamma),
            beta: Param::new(Tensor::zeros(&[channels]), ParamKind::BnBeta),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            channels,
            cache: Vec::new(),
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (nb, c, h, w) = dims4(x);
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let m = (nb * h * w) as f64;
        let hw = h * w;
        let xd = x.data();
        let mut out = Tensor::zeros(x.shape());

        if mode == Mode::Train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for n in 0..nb {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    let mut s = 0.0;
                    for &v in &xd[base..base + hw] {
                        s += v;
                    }
                    mean[ch] += s;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for n in 0..nb {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    let mu = mean[ch];
                    let mut s = 0.0;
                    for &v in &xd[base..base + hw] {
                        let d = v - mu;
                        s += d * d;
                    }
                    var[ch] += s;
                }
            }
            var.iter_mut().for_each(|v| *v /= m);

            // Running var uses the unbiased estimate, normalization the biased one.
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch]
                    + self.momentum * var[ch] * unbias;
            }

            let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
            let mut x_hat = Tensor::zeros(x.shape());
            {
                let xh = x_hat.data_mut();
                let od = out.data_mut();
                let gd = self.gamma.value.data();
                let bd = self.beta.value.data();
                for n in 0..nb {
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        let (mu, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                        for i in base..base + hw {
                            let xn = (xd[i] - mu) * is;
                            xh[i] = xn;
                            od[i] = g * xn + b;
                        }
                    }
                }
            }
            self.cache.push(BnCache { x_hat, inv_std });
        } else {
            let od = out.data_mut();
            let gd = self.gamma.value.data();
            let bd = self.beta.value.data();
            for n in 0..nb {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                    let (mu, g, b) = (self.running_mean[ch], gd[ch], bd[ch]);
                    for i in base..base + hw {
                        od[i] = g * (xd[i] - mu) * is + b;
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let BnCache { x_hat, inv_std } =
            self.cache.pop().expect("batch norm backward without cached forward");
        let (nb, c, h, w) = dims4(grad_out);
        let hw = h * w;
        let m = (nb * hw) as f64;
        let god = grad_out.data();
        let xh = x_hat.data();

        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                let (mut sg, mut sgx) = (0.0, 0.0);
                for i in base..base + hw {
                    sg += god[i];
                    sgx += god[i] * xh[i];
                }
                sum_g[ch] += sg;
                sum_gx[ch] += sgx;
            }
        }
        {
            let gg = self.gamma.grad.data_mut();
            let gb = self.beta.grad.data_mut();
            for ch in 0..c {
                gg[ch] += sum_gx[ch];
                gb[ch] += sum_g[ch];
            }
        }

        let mut grad_in = Tensor::zeros(grad_out.shape());
        let gid = grad_in.data_mut();
        let gd = self.gamma.value.data();
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                let coeff = gd[ch] * inv_std[ch];
                let mg = sum_g[ch] / m;
                let mgx = sum_gx[ch] / m;
                for i in base..base + hw {
                    gid[i] = coeff * (god[i] - mg - xh[i] * mgx);
                }
            }
        }
        grad_in
    }

    fn visit_params(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{path}.gamma"), &mut self.gamma);
        f(&format!("{path}.beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f(&format!("{path}.running_mean"), &mut self.running_mean);
        f(&format!("{path}.running_var"), &mut self.running_var);
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Relu6,
}

/// Elementwise ReLU / ReLU6.
pub struct Activation {
    kind: ActKind,
    cache: Vec<Tensor>,
}

impl Activation {
    pub fn relu() -> Activation {
        Activation { kind: ActKind::Relu, cache: Vec::new() }
    }

    pub fn relu6() -> Activation {
        Activation { kind: ActKind::Relu6, cache: Vec::new() }
    }
}

impl Layer for Activation {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let hi = match self.kind {
            ActKind::Relu => f64::INFINITY,
            ActKind::Relu6 => 6.0,
        };
        let mut out = x.clone();
        for v in out.data_mut() {
            *v = v.clamp(0.0, hi);
        }
        if mode == Mode::Train {
            self.cache.push(x.clone());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.cache.pop().expect("activation backward without cached forward");
        let hi = match self.kind {
            ActKind::Relu => f64::INFINITY,
            ActKind::Relu6 => 6.0,
        };
        let mut grad_in = grad_out.clone();
        for (g, &v) in grad_in.data_mut().iter_mut().zip(x.data()) {
            if v <= 0.0 || v >= hi {
                *g = 0.0;
            }
        }
        grad_in
    }

    fn visit_params(&mut self, _path: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsample
// ---------------------------------------------------------------------------

/// Nearest-neighbor upsampling by a factor of two (top-down pyramid path).
#[derive(Default)]
pub struct Upsample2x {
    cache: Vec<[usize; 4]>,
}

impl Upsample2x {
    pub fn new() -> Upsample2x {
        Upsample2x::default()
    }
}

impl Layer for Upsample2x {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (nb, c, h, w) = dims4(x);
        let mut out = Tensor::zeros(&[nb, c, 2 * h, 2 * w]);
        let xd = x.data();
        let od = out.data_mut();
        for nc in 0..nb * c {
            let ibase = nc * h * w;
            let obase = nc * 4 * h * w;
            for y in 0..h {
                for x_ in 0..w {
                    let v = xd[ibase + y * w + x_];
                    let o = obase + 2 * y * 2 * w + 2 * x_;
                    od[o] = v;
                    od[o + 1] = v;
                    od[o + 2 * w] = v;
                    od[o + 2 * w + 1] = v;
                }
            }
        }
        if mode == Mode::Train {
            self.cache.push([nb, c, h, w]);
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let [nb, c, h, w] = self.cache.pop().expect("upsample backward without cached forward");
        let mut grad_in = Tensor::zeros(&[nb, c, h, w]);
        let god = grad_out.data();
        let gid = grad_in.data_mut();
        for nc in 0..nb * c {
            let ibase = nc * h * w;
            let obase = nc * 4 * h * w;
            for y in 0..h {
                for x_ in 0..w {
                    let o = obase + 2 * y * 2 * w + 2 * x_;
                    gid[ibase + y * w + x_] =
                        god[o] + god[o + 1] + god[o + 2 * w] + god[o + 2 * w + 1];
                }
            }
        }
        grad_in
    }

    fn visit_params(&mut self, _path: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

struct LnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

/// Layer normalization over all non-batch dimensions with per-element affine
/// parameters (used inside the global-context transform).
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
    dim: usize,
    cache: Vec<LnCache>,
}

impl LayerNorm {
    /// `normalized_shape` is the full non-batch shape of the inputs.
    pub fn new(normalized_shape: &[usize]) -> LayerNorm {
        let dim = normalized_shape.iter().product();
        LayerNorm {
            gamma: Param::new(Tensor::full(normalized_shape, 1.0), ParamKind::BnGamma),
            beta: Param::new(Tensor::zeros(normalized_shape), ParamKind::BnBeta),
            eps: 1e-5,
            dim,
            cache: Vec::new(),
        }
    }
}

impl Layer for LayerNorm {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let d = self.dim;
        assert_eq!(x.len() % d, 0, "layer norm shape mismatch");
        let nb = x.len() / d;
        let xd = x.data();
        let mut out = Tensor::zeros(x.shape());
        let mut x_hat = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; nb];
        {
            let od = out.data_mut();
            let xh = x_hat.data_mut();
            let gd = self.gamma.value.data();
            let bd = self.beta.value.data();
            for n in 0..nb {
                let base = n * d;
                let mean: f64 = xd[base..base + d].iter().sum::<f64>() / d as f64;
                let var: f64 = xd[base..base + d]
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / d as f64;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std[n] = is;
                for i in 0..d {
                    let xn = (xd[base + i] - mean) * is;
                    xh[base + i] = xn;
                    od[base + i] = gd[i] * xn + bd[i];
                }
            }
        }
        if mode == Mode::Train {
            self.cache.push(LnCache { x_hat, inv_std });
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let LnCache { x_hat, inv_std } =
            self.cache.pop().expect("layer norm backward without cached forward");
        let d = self.dim;
        let nb = grad_out.len() / d;
        let god = grad_out.data();
        let xh = x_hat.data();
        let mut grad_in = Tensor::zeros(grad_out.shape());
        {
            let gg = self.gamma.grad.data_mut();
            let gb = self.beta.grad.data_mut();
            for n in 0..nb {
                let base = n * d;
                for i in 0..d {
                    gg[i] += god[base + i] * xh[base + i];
                    gb[i] += god[base + i];
                }
            }
        }
        let gid = grad_in.data_mut();
        let gd = self.gamma.value.data();
        for n in 0..nb {
            let base = n * d;
            let mut mg = 0.0;
            let mut mgx = 0.0;
            for i in 0..d {
                let g = god[base + i] * gd[i];
                mg += g;
                mgx += g * xh[base + i];
            }
            mg /= d as f64;
            mgx /= d as f64;
            for i in 0..d {
                let g = god[base + i] * gd[i];
                gid[base + i] = inv_std[n] * (g - mg - xh[base + i] * mgx);
            }
        }
        grad_in
    }

    fn visit_params(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{path}.gamma"), &mut self.gamma);
        f(&format!("{path}.beta"), &mut self.beta);
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

// ---------------------------------------------------------------------------
// Sequential
// ---------------------------------------------------------------------------

/// Ordered chain of layers.
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Sequential {
        Sequential { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode);
        }
        cur
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut cur = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

    fn visit_params(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{path}.{i}"), f);
        }
    }

    fn visit_buffers(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_buffers(&format!("{path}.{i}"), f);
        }
    }

    fn visit_quant(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut QuantSlot)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_quant(&format!("{path}.{i}"), f);
        }
    }

    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut Conv2d)) {
        for layer in &mut self.layers {
            layer.visit_convs(f);
        }
    }

    fn clear_cache(&mut self) {
        for layer in &mut self.layers {
            layer.clear_cache();
        }
    }
}

#[inline]
pub(crate) fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use crate::testutil::{assert_all_close, numeric_grad};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Brute-force conv used as an oracle for the specialized kernels.
    fn conv_reference(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, s: usize, p: usize, groups: usize) -> Tensor {
        let (nb, cin, hin, win) = dims4(x);
        let out_c = w.shape()[0];
        let k = w.shape()[2];
        let icpg = cin / groups;
        let ocpg = out_c / groups;
        let hout = (hin + 2 * p - k) / s + 1;
        let wout = (win + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[nb, out_c, hout, wout]);
        for n in 0..nb {
            for oc in 0..out_c {
                let g = oc / ocpg;
                for oy in 0..hout {
                    for ox in 0..wout {
                        let mut acc = bias.map_or(0.0, |b| b[oc]);
                        for icg in 0..icpg {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= hin as isize || ix >= win as isize {
                                        continue;
                                    }
                                    acc += w.at4(oc, icg, ky, kx)
                                        * x.at4(n, g * icpg + icg, iy as usize, ix as usize);
                                }
                            }
                        }
                        *out.at4_mut(n, oc, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_fast_paths_match_reference() {
        let mut rng = seed_rng(11, "conv-test");
        for &(k, s, p, groups, cin, cout) in
            &[(3usize, 1usize, 1usize, 1usize, 4usize, 5usize), (1, 1, 0, 1, 4, 6), (3, 1, 1, 2, 4, 6), (3, 1, 1, 4, 4, 4)]
        {
            let mut conv = Conv2d::new(cin, cout, k, s, p, groups, true, &mut rng);
            let x = rand_tensor(&[2, cin, 6, 7], &mut rng);
            let got = conv.forward(&x, Mode::Eval);
            let want = conv_reference(
                &x,
                &conv.weight.value,
                conv.bias.as_ref().map(|b| b.value.data()),
                s,
                p,
                groups,
            );
            assert_all_close(got.data(), want.data(), 1e-12, 1e-12);
        }
    }

    #[test]
    fn conv_strided_matches_reference() {
        let mut rng = seed_rng(12, "conv-test");
        let mut conv = Conv2d::new(3, 8, 3, 2, 1, 1, true, &mut rng);
        let x = rand_tensor(&[2, 3, 9, 8], &mut rng);
        let got = conv.forward(&x, Mode::Eval);
        let want = conv_reference(&x, &conv.weight.value, conv.bias.as_ref().map(|b| b.value.data()), 2, 1, 1);
        assert_eq!(got.shape(), &[2, 8, 5, 4]);
        assert_all_close(got.data(), want.data(), 1e-12, 1e-12);
    }

    /// Checks conv input/weight/bias gradients against central differences.
    fn conv_grad_case(k: usize, s: usize, p: usize, groups: usize, cin: usize, cout: usize) {
        let mut rng = seed_rng(13, "conv-grad");
        let mut conv = Conv2d::new(cin, cout, k, s, p, groups, true, &mut rng);
        let x = rand_tensor(&[2, cin, 5, 5], &mut rng);
        // Scalar objective: weighted sum of outputs, fixed random weights.
        let out_shape = {
            let o = conv.forward(&x, Mode::Eval);
            o.shape().to_vec()
        };
        let obj_w: Vec<f64> =
            (0..out_shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let out = conv.forward(&x, Mode::Train);
        let go = Tensor::from_vec(&out_shape, obj_w.clone()).unwrap();
        let gin = conv.backward(&go);
        let _ = out;

        // Input gradient.
        let num = numeric_grad(x.data(), 1e-5, |xv| {
            let xt = Tensor::from_vec(x.shape(), xv.to_vec()).unwrap();
            let o = conv.forward_impl(&xt);
            o.data().iter().zip(&obj_w).map(|(a, b)| a * b).sum()
        });
        assert_all_close(gin.data(), &num, 1e-6, 1e-8);

        // Weight gradient.
        let w0 = conv.weight.value.data().to_vec();
        let num_w = numeric_grad(&w0, 1e-5, |wv| {
            conv.weight.value.data_mut().copy_from_slice(wv);
            let o = conv.forward_impl(&x);
            o.data().iter().zip(&obj_w).map(|(a, b)| a * b).sum()
        });
        conv.weight.value.data_mut().copy_from_slice(&w0);
        assert_all_close(conv.weight.grad.data(), &num_w, 1e-6, 1e-8);

        // Bias gradient.
        let b0 = conv.bias.as_ref().unwrap().value.data().to_vec();
        let num_b = numeric_grad(&b0, 1e-5, |bv| {
            conv.bias.as_mut().unwrap().value.data_mut().copy_from_slice(bv);
            let o = conv.forward_impl(&x);
            o.data().iter().zip(&obj_w).map(|(a, b)| a * b).sum()
        });
        conv.bias.as_mut().unwrap().value.data_mut().copy_from_slice(&b0);
        assert_all_close(conv.bias.as_ref().unwrap().grad.data(), &num_b, 1e-6, 1e-8);
    }

    #[test]
    fn conv_gradients_match_numeric() {
        conv_grad_case(3, 1, 1, 1, 3, 4); // fast 3x3 path
        conv_grad_case(1, 1, 0, 1, 3, 4); // 1x1 path
        conv_grad_case(3, 2, 1, 1, 3, 4); // strided general path
        conv_grad_case(3, 1, 1, 3, 3, 3); // depthwise
    }

    #[test]
    fn batch_norm_normalizes_and_tracks_running_stats() {
        let mut rng = seed_rng(14, "bn-test");
        let mut bn = BatchNorm2d::new(3);
        let x = rand_tensor(&[4, 3, 5, 5], &mut rng);
        let y = bn.forward(&x, Mode::Train);
        // Per-channel output statistics are ~N(0, 1) with unit gamma.
        let hw = 25;
        for ch in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                for i in 0..hw {
                    vals.push(y.data()[(n * 3 + ch) * hw + i]);
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10, "channel mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "channel var {v}");
        }
        assert!(bn.running_mean.iter().any(|&v| v != 0.0));
        bn.clear_cache();

        // Eval mode reproduces the affine map from running statistics.
        let y_eval = bn.forward(&x, Mode::Eval);
        for (i, &v) in y_eval.data().iter().enumerate() {
            let ch = (i / hw) % 3;
            let want = (x.data()[i] - bn.running_mean[ch])
                / (bn.running_var[ch] + bn.eps).sqrt();
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_gradients_match_numeric() {
        let mut rng = seed_rng(15, "bn-grad");
        let x = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let obj_w: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut bn = BatchNorm2d::new(2);
        let gam0 = vec![1.3, 0.7];
        let bet0 = vec![0.2, -0.4];
        bn.gamma.value.data_mut().copy_from_slice(&gam0);
        bn.beta.value.data_mut().copy_from_slice(&bet0);

        let _ = bn.forward(&x, Mode::Train);
        let go = Tensor::from_vec(x.shape(), obj_w.clone()).unwrap();
        let gin = bn.backward(&go);

        let mut eval_with = |xv: &[f64], g: &[f64], b: &[f64]| -> f64 {
            let mut bn2 = BatchNorm2d::new(2);
            bn2.gamma.value.data_mut().copy_from_slice(g);
            bn2.beta.value.data_mut().copy_from_slice(b);
            let xt = Tensor::from_vec(x.shape(), xv.to_vec()).unwrap();
            let o = bn2.forward(&xt, Mode::Train);
            o.data().iter().zip(&obj_w).map(|(a, b)| a * b).sum()
        };
        let num_x = numeric_grad(x.data(), 1e-5, |xv| eval_with(xv, &gam0, &bet0));
        assert_all_close(gin.data(), &num_x, 1e-5, 1e-7);
        let num_g = numeric_grad(&gam0, 1e-5, |gv| eval_with(x.data(), gv, &bet0));
        assert_all_close(bn.gamma.grad.data(), &num_g, 1e-6, 1e-8);
        let num_b = numeric_grad(&bet0, 1e-5, |bv| eval_with(x.data(), &gam0, bv));
        assert_all_close(bn.beta.grad.data(), &num_b, 1e-6, 1e-8);
    }

    #[test]
    fn relu6_clamps_and_masks_gradient() {
        let mut act = Activation::relu6();
        let x = Tensor::from_vec(&[1, 1, 1, 5], vec![-1.0, 0.5, 3.0, 6.5, 7.0]).unwrap();
        let y = act.forward(&x, Mode::Train);
        assert_eq!(y.data(), &[0.0, 0.5, 3.0, 6.0, 6.0]);
        let g = act.backward(&Tensor::full(&[1, 1, 1, 5], 1.0));
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_forward_and_backward() {
        let mut up = Upsample2x::new();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = up.forward(&x, Mode::Train);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.at4(0, 0, 0, 0), 1.0);
        assert_eq!(y.at4(0, 0, 0, 1), 1.0);
        assert_eq!(y.at4(0, 0, 1, 1), 1.0);
        assert_eq!(y.at4(0, 0, 3, 3), 4.0);
        let g = up.backward(&Tensor::full(&[1, 1, 4, 4], 0.5));
        assert_eq!(g.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_gradients_match_numeric() {
        let mut rng = seed_rng(16, "ln-grad");
        let x = rand_tensor(&[3, 4, 1, 1], &mut rng);
        let obj_w: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ln = LayerNorm::new(&[4, 1, 1]);
        let g0 = vec![1.1, 0.9, 1.2, 0.8];
        ln.gamma.value.data_mut().copy_from_slice(&g0);

        let _ = ln.forward(&x, Mode::Train);
        let gin = ln.backward(&Tensor::from_vec(x.shape(), obj_w.clone()).unwrap());

        let num = numeric_grad(x.data(), 1e-5, |xv| {
            let mut ln2 = LayerNorm::new(&[4, 1, 1]);
            ln2.gamma.value.data_mut().copy_from_slice(&g0);
            let xt = Tensor::from_vec(x.shape(), xv.to_vec()).unwrap();
            let o = ln2.forward(&xt, Mode::Train);
            o.data().iter().zip(&obj_w).map(|(a, b)| a * b).sum()
        });
        assert_all_close(gin.data(), &num, 1e-5, 1e-7);
    }

    #[test]
    fn shared_layer_backward_is_lifo() {
        // Forward the same conv twice, backprop in reverse order; parameter
        // grads must equal the sum of two independent applications.
        let mut rng = seed_rng(17, "share");
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, 1, true, &mut rng);
        let a = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let b = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let ga = rand_tensor(&[1, 3, 4, 4], &mut rng);
        let gb = rand_tensor(&[1, 3, 4, 4], &mut rng);

        let _ = conv.forward(&a, Mode::Train);
        let _ = conv.forward(&b, Mode::Train);
        let gin_b = conv.backward(&gb);
        let gin_a = conv.backward(&ga);
        let shared_wgrad = conv.weight.grad.data().to_vec();

        conv.weight.zero_grad();
        if let Some(bias) = &mut conv.bias {
            bias.zero_grad();
        }
        let _ = conv.forward(&a, Mode::Train);
        let gin_a2 = conv.backward(&ga);
        let wg_a = conv.weight.grad.data().to_vec();
        conv.weight.zero_grad();
        let _ = conv.forward(&b, Mode::Train);
        let gin_b2 = conv.backward(&gb);
        let sum: Vec<f64> =
            wg_a.iter().zip(conv.weight.grad.data()).map(|(x, y)| x + y).collect();

        assert_all_close(&shared_wgrad, &sum, 1e-12, 1e-12);
        assert_all_close(gin_a.data(), gin_a2.data(), 1e-12, 1e-12);
        assert_all_close(gin_b.data(), gin_b2.data(), 1e-12, 1e-12);
    }

    #[test]
    fn fake_quant_rounds_half_to_even() {
        // scale 1, zp 0: 0.5 -> 0, 1.5 -> 2, 2.5 -> 2, -0.5 -> 0.
        assert_eq!(fake_quant(0.5, 1.0, 0), 0.0);
        assert_eq!(fake_quant(1.5, 1.0, 0), 2.0);
        assert_eq!(fake_quant(2.5, 1.0, 0), 2.0);
        assert_eq!(fake_quant(-0.5, 1.0, 0), 0.0);
        // Clamping at the int8 limits.
        assert_eq!(fake_quant(500.0, 1.0, 0), 127.0);
        assert_eq!(fake_quant(-500.0, 1.0, 0), -128.0);
    }

    #[test]
    fn quant_slot_observes_then_applies() {
        let mut slot = QuantSlot {
            state: QuantState::Range { lo: f64::INFINITY, hi: f64::NEG_INFINITY, count: 0 },
        };
        let mut t = Tensor::from_vec(&[1, 1, 1, 4], vec![-2.0, 0.0, 1.0, 6.0]).unwrap();
        slot.process(&mut t.clone());
        match slot.state {
            QuantState::Range { lo, hi, count } => {
                assert_eq!((lo, hi, count), (-2.0, 6.0, 4));
            }
            _ => panic!("state changed unexpectedly"),
        }
        slot.state = QuantState::Apply { scale: 0.5, zero_point: -10 };
        slot.process(&mut t);
        assert_eq!(t.data(), &[-2.0, 0.0, 1.0, 6.0]);
    }
}
