//! Affine per-tensor quantization.
//!
//! ```text
//! s = (t_max - t_min) / (q_max - q_min)
//! z = clamp(q_min - round(t_min / s), q_min, q_max)
//! q = clamp(round(t / s) + z, q_min, q_max)
//! t̂ = s · (q - z)
//! ```
//!
//! `round` is half-away-from-zero everywhere. A constant tensor
//! (`t_min == t_max`) gets `s = 1, z = 0`.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bits: u8,
    pub signed: bool,
}

pub fn q_bounds(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1i32 << (bits - 1)), (1i32 << (bits - 1)) - 1)
    } else {
        (0, (1i32 << bits) - 1)
    }
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32, bits: u8, signed: bool) -> Result<Self> {
        let p = QuantParams { scale, zero_point, bits, signed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::Param(format!("unsupported bit width {}", self.bits)));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Param(format!("scale must be positive and finite, got {}", self.scale)));
        }
        let (lo, hi) = self.bounds();
        if self.zero_point < lo || self.zero_point > hi {
            return Err(Error::Param(format!("zero point {} outside [{lo}, {hi}]", self.zero_point)));
        }
        Ok(())
    }

    pub fn q_min(&self) -> i32 {
        self.bounds().0
    }

    pub fn q_max(&self) -> i32 {
        self.bounds().1
    }

    pub fn bounds(&self) -> (i32, i32) {
        q_bounds(self.bits, self.signed)
    }

    /// Storage dtype for quantized payloads.
    pub fn storage(&self) -> DType {
        let (lo, hi) = self.bounds();
        DType::int_for_range(lo, hi)
    }

    /// Real interval that maps inside `[q_min, q_max]` without saturating.
    pub fn representable(&self) -> (f32, f32) {
        (self.dequantize_value(self.q_min()), self.dequantize_value(self.q_max()))
    }

    pub fn quantize_value(&self, t: f32) -> i32 {
        let (lo, hi) = self.bounds();
        // `as i64` saturates on overflow and maps NaN to 0
        let r = (t / self.scale).round() as i64;
        (r + self.zero_point as i64).clamp(lo as i64, hi as i64) as i32
    }

    pub fn dequantize_value(&self, q: i32) -> f32 {
        self.scale * (q - self.zero_point) as f32
    }

    pub fn fake_quant_value(&self, t: f32) -> f32 {
        self.dequantize_value(self.quantize_value(t))
    }

    pub fn in_range(&self, t: f32) -> bool {
        let (lo, hi) = self.representable();
        t >= lo && t <= hi
    }
}

/// Parameters covering `[t_min, t_max]` with `bits`-wide integers.
pub fn compute_quant_params(t_min: f32, t_max: f32, bits: u8, signed: bool) -> Result<QuantParams> {
    if !t_min.is_finite() || !t_max.is_finite() {
        return Err(Error::Range(format!("non-finite range [{t_min}, {t_max}]")));
    }
    if t_min > t_max {
        return Err(Error::Range(format!("t_min {t_min} > t_max {t_max}")));
    }
    if !(2..=16).contains(&bits) {
        return Err(Error::Param(format!("unsupported bit width {bits}")));
    }
    let (q_min, q_max) = q_bounds(bits, signed);
    let span = t_max as f64 - t_min as f64;
    let levels = (q_max - q_min) as f64;
    let scale = (span / levels) as f32;
    if t_min == t_max || !(scale > 0.0) {
        return QuantParams::new(1.0, 0.clamp(q_min, q_max), bits, signed);
    }
    // t_min / s with the unrounded scale, so symmetric ranges land on exact halves
    let offset = (t_min as f64 * levels / span).round() as i64;
    let zero_point = (q_min as i64 - offset).clamp(q_min as i64, q_max as i64) as i32;
    QuantParams::new(scale, zero_point, bits, signed)
}

pub fn quantize(t: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let q: Vec<i32> = t.as_f32()?.iter().map(|&v| p.quantize_value(v)).collect();
    Tensor::from_ints(p.storage(), t.shape().to_vec(), &q)
}

pub fn dequantize(q: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let (lo, hi) = p.bounds();
    let vals = q.to_i32_vec()?;
    if let Some(bad) = vals.iter().find(|&&v| v < lo || v > hi) {
        return Err(Error::Integrity(format!("{bad} outside [{lo}, {hi}]")));
    }
    Tensor::from_f32(q.shape().to_vec(), vals.iter().map(|&v| p.dequantize_value(v)).collect())
}

pub fn fake_quant(t: &Tensor, p: &QuantParams) -> Result<Tensor> {
    Tensor::from_f32(t.shape().to_vec(), t.as_f32()?.iter().map(|&v| p.fake_quant_value(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use proptest::prelude::*;

    #[test]
    fn symmetric_signed_range() {
        let p = compute_quant_params(-1.0, 1.0, 8, true).unwrap();
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-9);
        assert!((p.scale - 0.0078431).abs() < 1e-7);
        assert_eq!(p.zero_point, 0);
        assert_eq!((p.q_min(), p.q_max()), (-128, 127));
    }

    #[test]
    fn positive_range_pins_zero_to_q_min() {
        let p = compute_quant_params(0.0, 2.55, 8, true).unwrap();
        assert!((p.scale - 0.01).abs() < 1e-8);
        assert_eq!(p.zero_point, -128);
        assert_eq!(p.quantize_value(0.0), -128);
        assert_eq!(p.dequantize_value(-128), 0.0);
    }

    #[test]
    fn degenerate_range() {
        let p = compute_quant_params(0.0, 0.0, 8, true).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 0));
        assert_eq!(p.quantize_value(2.4), 2);
        assert_eq!(p.quantize_value(1000.0), 127);
        assert!(matches!(compute_quant_params(1.0, 0.0, 8, true), Err(Error::Range(_))));
    }

    #[test]
    fn quantize_examples() {
        let p = compute_quant_params(-1.0, 1.0, 8, true).unwrap();
        assert_eq!(p.quantize_value(0.0), 0);
        assert_eq!(p.quantize_value(3.0), 127);
        assert_eq!(p.quantize_value(0.5), 64);
        // direct formula oracle: 64 · 2/255 and 127 · 2/255
        assert!((p.dequantize_value(64) as f64 - 64.0 * 2.0 / 255.0).abs() < 1e-6);
        assert!((p.dequantize_value(64) - 0.50196).abs() < 1e-5);
        assert!((p.dequantize_value(127) - 0.99608).abs() < 1e-5);
        assert_eq!(p.dequantize_value(p.zero_point), 0.0);
    }

    #[test]
    fn dequantize_rejects_out_of_range_payload() {
        let p = compute_quant_params(-1.0, 1.0, 4, true).unwrap();
        let q = Tensor::from_ints(DType::I8, vec![2], &[7, 9]).unwrap();
        assert!(matches!(dequantize(&q, &p), Err(Error::Integrity(_))));
    }

    #[test]
    fn unsigned_storage_widens() {
        let p = compute_quant_params(0.0, 1.0, 8, false).unwrap();
        assert_eq!(p.zero_point, 0);
        assert_eq!(p.storage(), DType::I16);
        let q = quantize(&Tensor::from_f32(vec![2], vec![0.0, 1.0]).unwrap(), &p).unwrap();
        assert_eq!(q.to_i32_vec().unwrap(), vec![0, 255]);
    }

    #[test]
    fn round_trip_error_bound_seeded() {
        let mut r = Prng::new(77);
        for bits in [4u8, 8, 16] {
            let p = compute_quant_params(-3.0, 5.0, bits, true).unwrap();
            for _ in 0..2000 {
                let t = r.uniform_range(-3.0, 5.0);
                let err = (p.fake_quant_value(t) - t).abs();
                assert!(err <= p.scale / 2.0 + 1e-6, "bits {bits} t {t} err {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(lo in -10.0f32..0.0, span in 0.01f32..20.0, a in -40.0f32..40.0, b in -40.0f32..40.0) {
            let p = compute_quant_params(lo, lo + span, 8, true).unwrap();
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.quantize_value(x) <= p.quantize_value(y));
        }

        #[test]
        fn saturation_hits_bounds(lo in -10.0f32..-0.01, hi in 0.01f32..10.0, bits in prop::sample::select(vec![8u8, 16])) {
            let p = compute_quant_params(lo, hi, bits, true).unwrap();
            prop_assert_eq!(p.quantize_value(lo - 100.0), p.q_min());
            prop_assert_eq!(p.quantize_value(hi + 100.0), p.q_max());
        }

        #[test]
        fn zero_point_in_bounds(lo in -100.0f32..100.0, span in 0.0f32..50.0, signed in any::<bool>()) {
            let p = compute_quant_params(lo, lo + span, 8, signed).unwrap();
            prop_assert!(p.zero_point >= p.q_min() && p.zero_point <= p.q_max());
        }
    }
}
