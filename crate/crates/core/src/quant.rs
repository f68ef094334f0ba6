//! Post-training int8 quantization, simulated in float: activation ranges
//! are calibrated from forward passes (optionally clipped at a percentile
//! of the observed distribution), weights are quantized symmetrically per
//! output channel, inference runs with quantize-dequantize at every conv
//! boundary, and a size audit checks the deployment budget.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::nn::{fake_quant, ParamKind, QuantState};
use crate::targets::{infer, Detection};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MIN_CALIBRATION_IMAGES: usize = 16;
pub const HIST_BINS: usize = 4096;
/// Smallest admissible quantization step, applied when a tensor's observed
/// range is degenerate (e.g. constant-zero activations).
pub const SCALE_FLOOR: f64 = 1e-8;
pub const DEFAULT_PERCENTILE: f64 = 0.999;
/// Deployment budget: 5 MiB.
pub const SIZE_BUDGET_BYTES: u64 = 5 * (1 << 20);

/// Affine int8 parameters for one activation tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub name: String,
    pub scale: f64,
    pub zero_point: i32,
}

/// Symmetric per-output-channel scales for one weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuant {
    pub name: String,
    pub scales: Vec<f64>,
}

/// Everything needed to reproduce a quantized run: per-activation affine
/// parameters and per-channel weight scales, keyed by visitor path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub schema: u32,
    /// The clipping quantile used during calibration, if any.
    pub percentile: Option<f64>,
    pub activations: Vec<ActQuant>,
    pub weights: Vec<WeightQuant>,
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema != 1 {
            return Err(Error::invalid(format!("unsupported quant spec schema {}", self.schema)));
        }
        let mut names: Vec<&str> = Vec::new();
        for a in &self.activations {
            if !(a.scale > 0.0) || !a.scale.is_finite() {
                return Err(Error::invalid(format!("{}: scale {} must be positive", a.name, a.scale)));
            }
            if !(-128..=127).contains(&a.zero_point) {
                return Err(Error::invalid(format!("{}: zero point {} outside int8", a.name, a.zero_point)));
            }
            names.push(&a.name);
        }
        for w in &self.weights {
            if w.scales.is_empty() || w.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid(format!("{}: bad channel scales", w.name)));
            }
            names.push(&w.name);
        }
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        if names.len() != n {
            return Err(Error::invalid("duplicate tensor names in quant spec"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("serialize quant spec: {e}")))
    }

    pub fn from_json(s: &str) -> Result<QuantSpec> {
        let spec: QuantSpec =
            serde_json::from_str(s).map_err(|e| Error::invalid(format!("parse quant spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Affine parameters for an observed range. The range is widened to include
/// zero so zero-padding and ReLU cut-offs stay exactly representable; a
/// degenerate range falls back to the scale floor with zero point 0.
fn affine_params(lo: f64, hi: f64) -> (f64, i32) {
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    if !(hi - lo).is_finite() || hi - lo < SCALE_FLOOR {
        return (SCALE_FLOOR, 0);
    }
    let scale = ((hi - lo) / 255.0).max(SCALE_FLOOR);
    let zp = (-128.0 - (lo / scale).round_ties_even()).clamp(-128.0, 127.0) as i32;
    (scale, zp)
}

/// Clip a histogrammed range to the `[1-q, q]` quantiles: the returned
/// bounds are the edges of the bins holding those quantiles, so a lone
/// outlier far from the bulk no longer stretches the range.
fn percentile_range(lo: f64, hi: f64, bins: &[u64], count: u64, q: f64) -> (f64, f64) {
    if count == 0 || bins.is_empty() {
        return (lo, hi);
    }
    let total = count as f64;
    let width = (hi - lo) / bins.len() as f64;
    let lo_target = (1.0 - q) * total;
    let hi_target = q * total;
    let mut cum = 0.0;
    let mut lo_idx = 0usize;
    let mut hi_idx = bins.len() - 1;
    let mut lo_found = false;
    for (i, &b) in bins.iter().enumerate() {
        cum += b as f64;
        if !lo_found && cum >= lo_target {
            lo_idx = i;
            lo_found = true;
        }
        if cum >= hi_target {
            hi_idx = i;
            break;
        }
    }
    (lo + lo_idx as f64 * width, lo + (hi_idx + 1) as f64 * width)
}

/// Observe activation ranges over a calibration set and derive the affine
/// parameters for every conv output, plus exact per-channel weight scales.
/// With `percentile` set, a second pass histograms each range and clips it
/// at that quantile. Batch norm runs on frozen running statistics
/// throughout; the network's slots are returned to the inert state.
pub fn calibrate(net: &mut Detector, images: &[Tensor], percentile: Option<f64>) -> Result<QuantSpec> {
    if images.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    if images.len() < MIN_CALIBRATION_IMAGES {
        return Err(Error::invalid(format!(
            "need at least {MIN_CALIBRATION_IMAGES} calibration images, got {}",
            images.len()
        )));
    }
    if let Some(q) = percentile {
        if !(q > 0.5 && q < 1.0) {
            return Err(Error::invalid(format!("clip percentile {q} outside (0.5, 1)")));
        }
    }

    net.visit_quant(&mut |_, s| {
        s.state = QuantState::Range { lo: f64::INFINITY, hi: f64::NEG_INFINITY, count: 0 };
    });
    for img in images {
        net.predict(img)?;
    }
    if percentile.is_some() {
        net.visit_quant(&mut |_, s| {
            if let QuantState::Range { lo, hi, .. } = s.state {
                s.state = QuantState::Hist { lo, hi, bins: vec![0; HIST_BINS], count: 0 };
            }
        });
        for img in images {
            net.predict(img)?;
        }
    }

    let mut activations = Vec::new();
    net.visit_quant(&mut |name, s| {
        let (lo, hi) = match &s.state {
            QuantState::Range { lo, hi, .. } => (*lo, *hi),
            QuantState::Hist { lo, hi, bins, count } => {
                percentile_range(*lo, *hi, bins, *count, percentile.unwrap_or(DEFAULT_PERCENTILE))
            }
            _ => (0.0, 0.0),
        };
        let (scale, zero_point) = affine_params(lo, hi);
        activations.push(ActQuant { name: name.to_string(), scale, zero_point });
        s.state = QuantState::Off;
    });

    let mut weights = Vec::new();
    net.visit_params(&mut |name, p| {
        if p.kind != ParamKind::Weight || p.value.shape().len() != 4 {
            return;
        }
        let s = p.value.shape();
        let per = s[1] * s[2] * s[3];
        let scales = (0..s[0])
            .map(|c| {
                let m = p.value.data()[c * per..(c + 1) * per]
                    .iter()
                    .fold(0.0f64, |m, &v| m.max(v.abs()));
                (m / 127.0).max(SCALE_FLOOR)
            })
            .collect();
        weights.push(WeightQuant { name: name.to_string(), scales });
    });

    Ok(QuantSpec { schema: 1, percentile, activations, weights })
}

/// Round-half-to-even affine quantize-dequantize of one activation value.
pub fn quantize_dequantize(x: f64, scale: f64, zero_point: i32) -> f64 {
    fake_quant(x, scale, zero_point)
}

/// Put the network into fake-quantized form: every conv weight snaps to its
/// per-channel grid (symmetric, int8 range ±127) and every activation slot
/// applies the spec's affine parameters on the forward pass. Idempotent.
/// There is no undo: reload a checkpoint to recover the float model.
pub fn apply_quantization(net: &mut Detector, spec: &QuantSpec) -> Result<()> {
    spec.validate()?;
    let act_map: HashMap<&str, &ActQuant> =
        spec.activations.iter().map(|a| (a.name.as_str(), a)).collect();
    let mut missing = Vec::new();
    let mut seen = 0usize;
    net.visit_quant(&mut |name, s| match act_map.get(name) {
        Some(a) => {
            s.state = QuantState::Apply { scale: a.scale, zero_point: a.zero_point };
            seen += 1;
        }
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::integrity(format!("no activation quant entry for {missing:?}")));
    }
    if seen != spec.activations.len() {
        return Err(Error::integrity(format!(
            "quant spec lists {} activation tensors, network has {seen}",
            spec.activations.len()
        )));
    }

    let w_map: HashMap<&str, &WeightQuant> =
        spec.weights.iter().map(|w| (w.name.as_str(), w)).collect();
    let mut w_missing = Vec::new();
    let mut w_seen = 0usize;
    let mut w_err: Option<Error> = None;
    net.visit_params(&mut |name, p| {
        if p.kind != ParamKind::Weight || p.value.shape().len() != 4 || w_err.is_some() {
            return;
        }
        let Some(w) = w_map.get(name) else {
            w_missing.push(name.to_string());
            return;
        };
        w_seen += 1;
        let s = p.value.shape();
        if w.scales.len() != s[0] {
            w_err = Some(Error::integrity(format!(
                "{name}: {} channel scales for {} output channels",
                w.scales.len(),
                s[0]
            )));
            return;
        }
        let per = s[1] * s[2] * s[3];
        let data = p.value.data_mut();
        for (c, &sc) in w.scales.iter().enumerate() {
            for v in &mut data[c * per..(c + 1) * per] {
                let q = (*v / sc).round_ties_even().clamp(-127.0, 127.0);
                *v = q * sc;
            }
        }
    });
    if let Some(e) = w_err {
        return Err(e);
    }
    if !w_missing.is_empty() {
        return Err(Error::integrity(format!("no weight quant entry for {w_missing:?}")));
    }
    if w_seen != spec.weights.len() {
        return Err(Error::integrity(format!(
            "quant spec lists {} weight tensors, network has {w_seen}",
            spec.weights.len()
        )));
    }
    Ok(())
}

/// Return every activation slot to the inert float path (weights keep
/// whatever values they currently hold).
pub fn clear_activation_quant(net: &mut Detector) {
    net.visit_quant(&mut |_, s| s.state = QuantState::Off);
}

/// Fake-quantized end-to-end inference: applies the spec (idempotent), then
/// runs the standard decode + NMS pipeline on the quantized forward pass.
pub fn quantized_inference(net: &mut Detector, spec: &QuantSpec, image: &Tensor) -> Result<Vec<Detection>> {
    apply_quantization(net, spec)?;
    infer(net, image)
}

// ---------------------------------------------------------------------------
// Size audit
// ---------------------------------------------------------------------------

const MANIFEST_HEADER_BYTES: u64 = 256;
const MANIFEST_ENTRY_BYTES: u64 = 16;

/// Estimated int8 deployment footprint versus the 5 MiB budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeAudit {
    /// One byte per parameter.
    pub param_bytes: u64,
    /// Quantization metadata (scale + zero point per tensor), float residue
    /// (batch-norm running statistics at 4 bytes), and a manifest estimate.
    pub overhead_bytes: u64,
    pub total_bytes: u64,
    pub budget_bytes: u64,
    pub pass: bool,
}

fn audit_from_counts(params: u64, param_tensors: u64, slots: u64, buffer_floats: u64) -> SizeAudit {
    let param_bytes = params;
    let overhead_bytes = 5 * (param_tensors + slots)
        + 4 * buffer_floats
        + MANIFEST_HEADER_BYTES
        + MANIFEST_ENTRY_BYTES * (param_tensors + slots);
    let total_bytes = param_bytes + overhead_bytes;
    SizeAudit {
        param_bytes,
        overhead_bytes,
        total_bytes,
        budget_bytes: SIZE_BUDGET_BYTES,
        pass: total_bytes <= SIZE_BUDGET_BYTES,
    }
}

/// Size the network as deployed: every parameter at one byte, plus
/// quantization metadata and the float residue that never quantizes.
pub fn size_audit(net: &mut Detector) -> SizeAudit {
    let mut params = 0u64;
    let mut param_tensors = 0u64;
    net.visit_params(&mut |_, p| {
        params += p.value.len() as u64;
        param_tensors += 1;
    });
    let mut slots = 0u64;
    net.visit_quant(&mut |_, _| slots += 1);
    let mut buffer_floats = 0u64;
    net.visit_buffers(&mut |_, b| buffer_floats += b.len() as u64);
    audit_from_counts(params, param_tensors, slots, buffer_floats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_student, DetectorSpec};
    use crate::nn::QuantSlot;
    use crate::rng::seed_rng;
    use rand::Rng;

    #[test]
    fn affine_params_match_closed_forms() {
        // Uniform [-1, 1]: step 2/255, zero point 0.
        let (s, zp) = affine_params(-1.0, 1.0);
        assert!((s - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(zp, 0);
        // One-sided ReLU-style range.
        let (s, zp) = affine_params(0.0, 6.0);
        assert!((s - 6.0 / 255.0).abs() < 1e-15);
        assert_eq!(zp, -128);
        // Degenerate (constant zero) range: floor scale, zero point 0.
        let (s, zp) = affine_params(0.0, 0.0);
        assert_eq!((s, zp), (SCALE_FLOOR, 0));
    }

    #[test]
    fn observed_uniform_range_gives_expected_scale() {
        let mut slot = QuantSlot {
            state: QuantState::Range { lo: f64::INFINITY, hi: f64::NEG_INFINITY, count: 0 },
        };
        let mut rng = seed_rng(3, "quant-uniform");
        for _ in 0..50 {
            let mut t = Tensor::zeros(&[2000]);
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            slot.process(&mut t);
        }
        let QuantState::Range { lo, hi, count } = slot.state else { panic!() };
        assert_eq!(count, 100_000);
        let (s, zp) = affine_params(lo, hi);
        assert!((s - 2.0 / 255.0).abs() < 1e-3 * 2.0 / 255.0, "scale {s}");
        assert_eq!(zp, 0);
    }

    #[test]
    fn percentile_clip_ignores_lone_outlier() {
        // Bulk uniform in [-1, 1], one sample at 100.
        let (lo, hi) = (-1.0, 100.0);
        let mut bins = vec![0u64; HIST_BINS];
        let width = (hi - lo) / HIST_BINS as f64;
        let mut rng = seed_rng(5, "quant-outlier");
        let mut count = 0u64;
        for _ in 0..100_000 {
            let v: f64 = rng.gen_range(-1.0..1.0);
            bins[(((v - lo) / width) as usize).min(HIST_BINS - 1)] += 1;
            count += 1;
        }
        bins[HIST_BINS - 1] += 1;
        count += 1;
        let (clo, chi) = percentile_range(lo, hi, &bins, count, 0.999);
        assert!(chi < 1.5, "clipped high bound {chi} should hug the bulk");
        assert!(clo >= -1.0 - width && clo < -0.9);
        // Without clipping the scale would span the outlier.
        let (s_clip, _) = affine_params(clo, chi);
        let (s_raw, _) = affine_params(lo, hi);
        assert!(s_clip < s_raw / 30.0);
    }

    #[test]
    fn quantize_dequantize_bounds_and_idempotence() {
        let (scale, zp) = (2.0 / 255.0, 0);
        // Exact at grid points.
        for q in [-128i32, -77, 0, 19, 127] {
            let x = (q - zp) as f64 * scale;
            assert_eq!(quantize_dequantize(x, scale, zp), x);
        }
        // Half-step error bound inside the representable range.
        assert!((quantize_dequantize(0.5, scale, zp) - 0.5).abs() <= 2.0 / 510.0);
        let mut rng = seed_rng(7, "quant-bound");
        for _ in 0..1000 {
            let x = rng.gen_range(-1.0..0.99);
            let y = quantize_dequantize(x, scale, zp);
            assert!((x - y).abs() <= scale / 2.0 + 1e-15, "x {x} y {y}");
            assert_eq!(quantize_dequantize(y, scale, zp), y, "idempotence at {x}");
        }
        // Clamped beyond the range edges.
        assert_eq!(quantize_dequantize(10.0, scale, zp), 127.0 * scale);
        assert_eq!(quantize_dequantize(-10.0, scale, zp), -128.0 * scale);
        // Tight range with tiny scale: the limit recovers the input.
        let fine = 2e-6 / 255.0;
        for x in [-9.3e-7, 0.0, 4.4e-7, 9.9e-7] {
            assert!((quantize_dequantize(x, fine, 0) - x).abs() <= fine / 2.0);
        }
    }

    #[test]
    fn quantize_dequantize_is_monotone() {
        let mut rng = seed_rng(9, "quant-monotone");
        let (scale, zp) = (0.013, 11);
        let mut xs: Vec<f64> = (0..500).map(|_| rng.gen_range(-3.0..3.0)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ys: Vec<f64> = xs.iter().map(|&x| quantize_dequantize(x, scale, zp)).collect();
        for w in ys.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    fn small_spec() -> DetectorSpec {
        let mut spec = DetectorSpec::desk();
        spec.input_hw = (64, 64);
        spec.validate().unwrap();
        spec
    }

    fn calib_images(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = seed_rng(seed, "quant-calib");
        (0..n)
            .map(|_| {
                let mut t = Tensor::zeros(&[3, 64, 64]);
                for v in t.data_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
                t
            })
            .collect()
    }

    #[test]
    fn calibration_requires_enough_images() {
        let mut net = build_student(&small_spec(), 21).unwrap();
        assert!(calibrate(&mut net, &[], None).is_err());
        let few = calib_images(3, 22);
        assert!(calibrate(&mut net, &few, None).is_err());
        let enough = calib_images(MIN_CALIBRATION_IMAGES, 23);
        assert!(calibrate(&mut net, &enough, Some(1.5)).is_err());
        assert!(calibrate(&mut net, &enough, None).is_ok());
    }

    #[test]
    fn calibration_covers_every_tensor_and_leaves_network_unchanged() {
        let mut net = build_student(&small_spec(), 25).unwrap();
        let images = calib_images(MIN_CALIBRATION_IMAGES, 26);
        let before = net.predict(&images[0]).unwrap();
        let spec = calibrate(&mut net, &images, Some(DEFAULT_PERCENTILE)).unwrap();
        spec.validate().unwrap();

        let mut n_slots = 0;
        net.visit_quant(&mut |name, s| {
            assert!(matches!(s.state, QuantState::Off), "slot {name} left active");
            assert!(spec.activations.iter().any(|a| a.name == name), "missing {name}");
            n_slots += 1;
        });
        assert_eq!(spec.activations.len(), n_slots);
        let mut n_weights = 0;
        net.visit_params(&mut |name, p| {
            if p.kind == ParamKind::Weight && p.value.shape().len() == 4 {
                let w = spec.weights.iter().find(|w| w.name == name).expect("weight entry");
                assert_eq!(w.scales.len(), p.value.shape()[0]);
                n_weights += 1;
            }
        });
        assert_eq!(spec.weights.len(), n_weights);

        // Calibration is observation only: the float pipeline is unchanged.
        let after = net.predict(&images[0]).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.cls_logits, b.cls_logits);
            assert_eq!(a.dists, b.dists);
        }
    }

    #[test]
    fn application_is_idempotent_and_bounded() {
        let mut net = build_student(&small_spec(), 27).unwrap();
        let images = calib_images(MIN_CALIBRATION_IMAGES, 28);
        let spec = calibrate(&mut net, &images, None).unwrap();

        let mut float_weights = Vec::new();
        net.visit_params(&mut |_, p| float_weights.push(p.value.data().to_vec()));
        apply_quantization(&mut net, &spec).unwrap();
        let mut once = Vec::new();
        net.visit_params(&mut |_, p| once.push(p.value.data().to_vec()));
        apply_quantization(&mut net, &spec).unwrap();
        let mut twice = Vec::new();
        net.visit_params(&mut |_, p| twice.push(p.value.data().to_vec()));
        assert_eq!(once, twice, "re-application must be a no-op");

        // Per-weight error bounded by half a channel step.
        let mut ti = 0;
        let mut max_rel = 0.0f64;
        net.visit_params(&mut |name, p| {
            if p.kind == ParamKind::Weight && p.value.shape().len() == 4 {
                let w = spec.weights.iter().find(|w| w.name == name).unwrap();
                let per: usize = p.value.shape()[1..].iter().product();
                for (i, (&q, &f)) in p.value.data().iter().zip(&float_weights[ti]).enumerate() {
                    let sc = w.scales[i / per];
                    assert!((q - f).abs() <= sc / 2.0 + 1e-12);
                    max_rel = max_rel.max((q - f).abs());
                }
            }
            ti += 1;
        });
        assert!(max_rel > 0.0, "quantization should actually move weights");
    }

    #[test]
    fn incomplete_specs_are_rejected() {
        let mut net = build_student(&small_spec(), 29).unwrap();
        let images = calib_images(MIN_CALIBRATION_IMAGES, 30);
        let spec = calibrate(&mut net, &images, None).unwrap();

        let mut missing_act = spec.clone();
        missing_act.activations.pop();
        assert!(apply_quantization(&mut net, &missing_act).is_err());

        let mut renamed = spec.clone();
        renamed.activations[0].name = "nonexistent.out".into();
        assert!(apply_quantization(&mut net, &renamed).is_err());

        let mut missing_w = spec.clone();
        missing_w.weights.pop();
        assert!(apply_quantization(&mut net, &missing_w).is_err());

        let mut bad_channels = spec.clone();
        bad_channels.weights[0].scales.pop();
        assert!(apply_quantization(&mut net, &bad_channels).is_err());

        let mut bad_scale = spec;
        bad_scale.activations[0].scale = -1.0;
        assert!(apply_quantization(&mut net, &bad_scale).is_err());
    }

    #[test]
    fn quantized_inference_is_deterministic() {
        let mut net = build_student(&small_spec(), 31).unwrap();
        let images = calib_images(MIN_CALIBRATION_IMAGES, 32);
        let spec = calibrate(&mut net, &images, Some(DEFAULT_PERCENTILE)).unwrap();
        let a = quantized_inference(&mut net, &spec, &images[0]).unwrap();
        let b = quantized_inference(&mut net, &spec, &images[0]).unwrap();
        assert_eq!(a, b);
        // And differs in general from the float path on a fresh network.
        clear_activation_quant(&mut net);
    }

    #[test]
    fn quant_spec_round_trips_through_json() {
        let mut net = build_student(&small_spec(), 33).unwrap();
        let images = calib_images(MIN_CALIBRATION_IMAGES, 34);
        let spec = calibrate(&mut net, &images, Some(DEFAULT_PERCENTILE)).unwrap();
        let js = spec.to_json().unwrap();
        assert!(js.contains("\"schema\": 1"));
        let back = QuantSpec::from_json(&js).unwrap();
        assert_eq!(back, spec);
        assert!(QuantSpec::from_json(&js.replace("\"schema\": 1", "\"schema\": 3")).is_err());
        assert!(QuantSpec::from_json("{").is_err());
    }

    #[test]
    fn size_audit_math_and_desk_budget() {
        // Totals are consistent and the pass flag flips at the budget.
        let tight = audit_from_counts(SIZE_BUDGET_BYTES - 1000, 10, 10, 100);
        assert_eq!(tight.total_bytes, tight.param_bytes + tight.overhead_bytes);
        assert!(!tight.pass);
        let small = audit_from_counts(1000, 2, 2, 0);
        assert!(small.pass);
        // A paper-scale teacher (28.4 M parameters) cannot fit.
        assert!(!audit_from_counts(28_400_000, 300, 120, 40_000).pass);

        let mut net = build_student(&DetectorSpec::desk(), 35).unwrap();
        let audit = size_audit(&mut net);
        assert_eq!(audit.param_bytes, net.count_params() as u64);
        assert!(audit.pass, "desk student must fit easily: {audit:?}");
        assert!(audit.total_bytes < SIZE_BUDGET_BYTES / 10);
        assert!(audit.overhead_bytes > 0);
    }
}
