//! Clipped uniform quantizer for parameter updates.

use crate::error::{Error, Result};

/// `N` equispaced bins of width `t` centred on `0, ±t, ±2t, …, ±clip_bound`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantGrid {
    step: f64,
    bins: usize,
}

impl QuantGrid {
    pub fn new(step: f64, bins: usize) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidPrior(format!("bin width {step} must be positive")));
        }
        if bins % 2 == 0 {
            return Err(Error::InvalidPrior(format!("bin count {bins} must be odd")));
        }
        Ok(Self { step, bins })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    fn half(&self) -> i64 {
        (self.bins / 2) as i64
    }

    /// `(N - 1) t / 2`
    pub fn clip_bound(&self) -> f64 {
        self.half() as f64 * self.step
    }

    /// Grid value of symbol `index`.
    pub fn value(&self, index: usize) -> f64 {
        (index as i64 - self.half()) as f64 * self.step
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins).map(|i| self.value(i)).collect()
    }

    /// Nearest symbol after clipping.
    pub fn nearest_index(&self, delta: f64) -> usize {
        let k = (delta / self.step).round();
        let h = self.half() as f64;
        let k = if k.is_nan() { 0.0 } else { k.clamp(-h, h) };
        (k as i64 + self.half()) as usize
    }

    /// `clip(round(delta / t) * t, ±clip_bound)`; rounding ties go away from zero.
    pub fn quantize(&self, delta: f64) -> f64 {
        self.value(self.nearest_index(delta))
    }

    pub fn quantize_all(&self, deltas: &[f64]) -> Vec<f64> {
        deltas.iter().map(|&d| self.quantize(d)).collect()
    }

    /// Symbol of an on-grid value: `round(v / t) + (N - 1) / 2`.
    pub fn bin_index(&self, value: f64) -> Result<usize> {
        let k = (value / self.step).round();
        let off = (value - k * self.step).abs() > 1e-6 * self.step;
        if off || !value.is_finite() || k.abs() > self.half() as f64 {
            return Err(Error::OffGrid {
                value,
                step: self.step,
            });
        }
        Ok((k as i64 + self.half()) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> QuantGrid {
        QuantGrid::new(0.005, 59).unwrap()
    }

    #[test]
    fn formula_examples() {
        let g = grid();
        assert_eq!(g.quantize(0.0), 0.0);
        assert_eq!(g.quantize(0.0074), 0.005);
        assert_eq!(g.quantize(-0.0026), -0.005);
        assert!((g.quantize(1.0) - 0.145).abs() < 1e-15);
        assert_eq!(g.quantize(1.0), g.clip_bound());
        assert_eq!(g.quantize(-1.0), -g.clip_bound());
    }

    #[test]
    fn ties_round_away_from_zero() {
        let g = QuantGrid::new(0.5, 9).unwrap();
        assert_eq!(g.quantize(0.25), 0.5);
        assert_eq!(g.quantize(-0.25), -0.5);
    }

    #[test]
    fn symbol_mapping() {
        let g = grid();
        assert_eq!(g.bin_index(0.0).unwrap(), 29);
        assert_eq!(g.bin_index(-g.clip_bound()).unwrap(), 0);
        assert_eq!(g.bin_index(g.clip_bound()).unwrap(), 58);
        for i in 0..59 {
            assert_eq!(g.bin_index(g.value(i)).unwrap(), i);
        }
    }

    #[test]
    fn off_grid_and_out_of_range_rejected() {
        let g = grid();
        assert!(matches!(g.bin_index(0.0012), Err(Error::OffGrid { .. })));
        assert!(g.bin_index(0.15).is_err());
        assert!(g.bin_index(f64::NAN).is_err());
    }

    #[test]
    fn even_bin_count_rejected() {
        assert!(QuantGrid::new(0.005, 58).is_err());
    }

    proptest! {
        #[test]
        fn idempotent_and_on_grid(d in -1.0f64..1.0) {
            let g = grid();
            let q = g.quantize(d);
            prop_assert_eq!(g.quantize(q), q);
            prop_assert!(g.bin_index(q).is_ok());
        }

        #[test]
        fn error_bounded_by_half_step_inside_clip_range(d in -0.1475f64..0.1475) {
            let g = grid();
            prop_assert!((d - g.quantize(d)).abs() <= g.step() / 2.0 + 1e-15);
        }
    }
}
