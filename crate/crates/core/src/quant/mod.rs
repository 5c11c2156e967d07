//! Post-training int8 quantization: Max-Min calibration, the
//! quantize/dequantize arithmetic, two-stage node selection and
//! module-wise quantization plans.

mod calibrate;
mod plan;
mod select;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::IrError;

pub use calibrate::calibrate;
pub use plan::{apply_plan, plan, plan_with, QuantScheme, QuantizationPlan};
pub use select::{
    select_nodes, select_nodes_with, ExclusionReason, Selection, LONG_SEQUENCE_THRESHOLD,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("only 8-bit quantization is supported, got {0} bits")]
    UnsupportedBits(u32),
    #[error("invalid range for `{tensor}`: [{x_min}, {x_max}]")]
    InvalidRange {
        tensor: String,
        x_min: f64,
        x_max: f64,
    },
    #[error("no calibration range for tensor `{tensor}` (input of `{node}`)")]
    MissingRange { node: String, tensor: String },
    #[error("plan names unknown or unsupported node `{0}`")]
    UnknownNode(String),
    #[error("graph is already quantized (node `{0}`)")]
    AlreadyQuantized(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// Scale used when a tensor's calibrated range collapses to a single value.
pub const DEGENERATE_SCALE: f64 = 1.0 / (1u64 << 24) as f64;
pub const INT8_MIN: i64 = -128;
pub const INT8_MAX: i64 = 127;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRange {
    pub tensor: String,
    pub x_min: f64,
    pub x_max: f64,
}

impl TensorRange {
    pub fn new(tensor: impl Into<String>, x_min: f64, x_max: f64) -> Result<Self, QuantError> {
        let tensor = tensor.into();
        if !(x_min.is_finite() && x_max.is_finite() && x_min <= x_max) {
            return Err(QuantError::InvalidRange {
                tensor,
                x_min,
                x_max,
            });
        }
        Ok(Self {
            tensor,
            x_min,
            x_max,
        })
    }

    pub fn union(&self, other: &TensorRange) -> TensorRange {
        TensorRange {
            tensor: self.tensor.clone(),
            x_min: self.x_min.min(other.x_min),
            x_max: self.x_max.max(other.x_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
    pub q_min: i64,
    pub q_max: i64,
    /// Set when the calibrated range was a single point and `scale` is the floor.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl QuantParams {
    pub fn int8(scale: f64, zero_point: i64) -> Self {
        Self {
            scale,
            zero_point,
            q_min: INT8_MIN,
            q_max: INT8_MAX,
            degenerate: false,
        }
    }
}

/// How the zero point is chosen when computing parameters from a range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPointMode {
    /// Align `x_min` with `q_min`; yields zero for symmetric ranges.
    #[default]
    Affine,
    /// Always zero.
    Symmetric,
}

/// Round to nearest, ties away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// `q = clip(round(x / s) + z_p, q_min, q_max)`.
pub fn quantize_value(x: f64, p: &QuantParams) -> i64 {
    let q = round_half_away(x / p.scale) + p.zero_point as f64;
    q.clamp(p.q_min as f64, p.q_max as f64) as i64
}

/// `x_hat = s * (q - z_p)`.
pub fn dequantize_value(q: f64, p: &QuantParams) -> f64 {
    p.scale * (q - p.zero_point as f64)
}

/// Max-Min calibration scale `s = (x_max - x_min) / (q_max - q_min)`.
pub fn compute_scale(r: &TensorRange, bits: u32) -> Result<QuantParams, QuantError> {
    compute_scale_with(r, bits, ZeroPointMode::Affine)
}

pub fn compute_scale_with(
    r: &TensorRange,
    bits: u32,
    mode: ZeroPointMode,
) -> Result<QuantParams, QuantError> {
    if bits != 8 {
        return Err(QuantError::UnsupportedBits(bits));
    }
    let r = TensorRange::new(r.tensor.clone(), r.x_min, r.x_max)?;
    let (q_min, q_max) = (INT8_MIN, INT8_MAX);
    let span = r.x_max - r.x_min;
    let (scale, degenerate) = if span > 0.0 {
        (span / (q_max - q_min) as f64, false)
    } else {
        (DEGENERATE_SCALE, true)
    };
    let zero_point = match mode {
        ZeroPointMode::Symmetric => 0,
        ZeroPointMode::Affine => q_min - round_half_away(r.x_min / scale) as i64,
    };
    Ok(QuantParams {
        scale,
        zero_point,
        q_min,
        q_max,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s255() -> QuantParams {
        QuantParams::int8(2.0 / 255.0, 0)
    }

    #[test]
    fn quantize_examples() {
        // 0.13 / (2/255) = 16.575 -> 17
        assert_eq!(quantize_value(0.13, &s255()), 17);
        assert_eq!(quantize_value(0.0, &s255()), 0);
        assert_eq!(quantize_value(10.0, &s255()), 127);
        assert_eq!(quantize_value(-10.0, &s255()), -128);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let p = QuantParams::int8(1.0, 0);
        assert_eq!(quantize_value(2.5, &p), 3);
        assert_eq!(quantize_value(-2.5, &p), -3);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_value(0.0, &s255()), 0.0);
        assert!((dequantize_value(64.0, &s255()) - 128.0 / 255.0).abs() < 1e-15);
        let x = 0.5;
        let back = dequantize_value(quantize_value(x, &s255()) as f64, &s255());
        assert!((x - back).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn scale_examples() {
        let p = compute_scale(&TensorRange::new("t", -1.0, 1.0).unwrap(), 8).unwrap();
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-18);
        assert_eq!(p.zero_point, 0);
        let p = compute_scale(&TensorRange::new("t", 0.0, 255.0).unwrap(), 8).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, -128);
        let p = compute_scale(&TensorRange::new("t", 0.0, 0.0).unwrap(), 8).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.scale, DEGENERATE_SCALE);
        assert_eq!(dequantize_value(quantize_value(0.0, &p) as f64, &p), 0.0);
    }

    #[test]
    fn symmetric_mode_keeps_zero_point_zero() {
        let r = TensorRange::new("t", 0.0, 255.0).unwrap();
        let p = compute_scale_with(&r, 8, ZeroPointMode::Symmetric).unwrap();
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn rejects_other_bit_widths_and_bad_ranges() {
        let r = TensorRange::new("t", -1.0, 1.0).unwrap();
        assert_eq!(compute_scale(&r, 4), Err(QuantError::UnsupportedBits(4)));
        assert!(TensorRange::new("t", 1.0, -1.0).is_err());
        assert!(TensorRange::new("t", f64::NAN, 1.0).is_err());
    }

    #[test]
    fn saturation_lands_on_range_endpoints() {
        let r = TensorRange::new("t", -0.7, 2.3).unwrap();
        let p = compute_scale(&r, 8).unwrap();
        for (x, end) in [(50.0, 2.3), (-50.0, -0.7)] {
            let back = dequantize_value(quantize_value(x, &p) as f64, &p);
            assert!((back - end).abs() <= p.scale / 2.0, "{x} -> {back}");
        }
    }
}
