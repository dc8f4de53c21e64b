//! Uniform symmetric per-tensor weight quantization.
//!
//! A `b`-bit quantizer with scale `s` maps every weight onto the grid
//! `s * {-2^(b-1), ..., 0, ..., 2^(b-1) - 1}`. Rounding is half-to-even so the
//! result does not depend on platform rounding quirks. Scales are calibrated
//! by minimizing the squared quantization error over a fixed candidate grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Widest bit-width accepted anywhere in the crate.
pub const MAX_BITS: u32 = 32;

/// Number of geometric candidates in the MSE scale search.
pub const SCALE_CANDIDATES: usize = 200;
const SCALE_FACTOR_MIN: f64 = 0.01;
const SCALE_FACTOR_MAX: f64 = 1.2;

/// A named, flattened weight tensor. This is the unit a bit-width is assigned to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    name: String,
    weights: Vec<f64>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, weights: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if weights.is_empty() {
            return invalid(format!("layer {name:?} has no weights"));
        }
        Ok(Self { name, weights })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of weight elements, `|w|`.
    pub fn count(&self) -> usize {
        self.weights.len()
    }
}

/// Integer grid representation of a quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedView {
    pub scale: f64,
    pub bits: u32,
    pub values: Vec<i64>,
}

impl QuantizedView {
    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&q| q as f64 * self.scale).collect()
    }
}

/// Signed integer range `[-2^(b-1), 2^(b-1) - 1]` as floats.
pub fn grid_range(bits: u32) -> (f64, f64) {
    let half = (1u64 << (bits - 1)) as f64;
    (-half, half - 1.0)
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=MAX_BITS).contains(&bits) {
        return invalid(format!("bit-width must lie in [2, {MAX_BITS}], got {bits}"));
    }
    Ok(())
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return invalid(format!("scale must be positive and finite, got {scale}"));
    }
    Ok(())
}

#[inline]
fn grid_point(x: f64, scale: f64, lo: f64, hi: f64) -> f64 {
    (x / scale).round_ties_even().clamp(lo, hi)
}

pub fn quantize_view(w: &[f64], bits: u32, scale: f64) -> Result<QuantizedView> {
    check_bits(bits)?;
    check_scale(scale)?;
    let (lo, hi) = grid_range(bits);
    let values = w
        .iter()
        .map(|&x| grid_point(x, scale, lo, hi) as i64)
        .collect();
    Ok(QuantizedView {
        scale,
        bits,
        values,
    })
}

/// `clip(round(w / s), -2^(b-1), 2^(b-1) - 1) * s`, element-wise.
pub fn quantize(w: &[f64], bits: u32, scale: f64) -> Result<Vec<f64>> {
    check_bits(bits)?;
    check_scale(scale)?;
    let (lo, hi) = grid_range(bits);
    Ok(w.iter()
        .map(|&x| grid_point(x, scale, lo, hi) * scale)
        .collect())
}

/// Squared error `||w - Q(w, b, s)||^2` without allocating the quantized copy.
pub fn quantization_sse(w: &[f64], bits: u32, scale: f64) -> f64 {
    let (lo, hi) = grid_range(bits);
    w.iter()
        .map(|&x| {
            let e = grid_point(x, scale, lo, hi) * scale - x;
            e * e
        })
        .sum()
}

/// Candidate scales searched by [`calibrate_scale_mse`], ascending.
///
/// The grid spans `[0.01, 1.2] * max|w| / 2^(b-1)` geometrically and also
/// contains the two min-max scales `max|w| / 2^(b-1)` and
/// `max|w| / (2^(b-1) - 1)`; the latter represents the extreme weight without
/// clipping.
pub fn scale_candidates(max_abs: f64, bits: u32) -> Vec<f64> {
    let half = (1u64 << (bits - 1)) as f64;
    let reference = max_abs / half;
    let ratio = SCALE_FACTOR_MAX / SCALE_FACTOR_MIN;
    let last = (SCALE_CANDIDATES - 1) as f64;
    let mut out: Vec<f64> = (0..SCALE_CANDIDATES)
        .map(|k| reference * SCALE_FACTOR_MIN * ratio.powf(k as f64 / last))
        .collect();
    out.push(reference);
    out.push(max_abs / (half - 1.0));
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// MSE-optimal scale over the fixed candidate grid. Ties go to the smaller scale.
///
/// An all-zero vector calibrates to `1.0`; its perturbation is zero at any scale.
pub fn calibrate_scale_mse(w: &[f64], bits: u32) -> Result<f64> {
    check_bits(bits)?;
    if w.is_empty() {
        return invalid("cannot calibrate an empty weight vector");
    }
    let mut max_abs = 0.0f64;
    for &x in w {
        if !x.is_finite() {
            return invalid("weights must be finite");
        }
        max_abs = max_abs.max(x.abs());
    }
    if max_abs == 0.0 {
        return Ok(1.0);
    }

    let mut best = (f64::INFINITY, 1.0);
    for s in scale_candidates(max_abs, bits) {
        let sse = quantization_sse(w, bits, s);
        if sse < best.0 {
            best = (sse, s);
        }
    }
    Ok(best.1)
}

/// `Q(w, b, s) - w` for an explicit scale.
pub fn perturbation_with_scale(w: &[f64], bits: u32, scale: f64) -> Result<Vec<f64>> {
    let q = quantize(w, bits, scale)?;
    Ok(q.iter().zip(w).map(|(q, x)| q - x).collect())
}

/// Quantization error of a layer at `bits`, using the MSE-calibrated scale.
pub fn perturbation(layer: &LayerSpec, bits: u32) -> Result<Vec<f64>> {
    let scale = calibrate_scale_mse(layer.weights(), bits)?;
    perturbation_with_scale(layer.weights(), bits, scale)
}
