// SPDX-License-Identifier: MIT OR Apache-2.0

use std::f64::consts::PI;

use crate::error::{NumError, Result};

/// Linear warmup from zero to `base`, then cosine decay from `base` to
/// `floor` at `total` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_frac: f64,
    pub total: usize,
    pub floor: f64,
}

impl LrSchedule {
    pub const DEFAULT_BASE: f64 = 3e-5;
    pub const DEFAULT_WARMUP_FRAC: f64 = 0.1;

    pub fn new(base: f64, total: usize) -> Self {
        Self {
            base,
            warmup_frac: Self::DEFAULT_WARMUP_FRAC,
            total,
            floor: 0.0,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.total as f64) * self.warmup_frac.clamp(0.0, 1.0)).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total {
            return Err(NumError::StepOutOfRange {
                step,
                total: self.total,
            });
        }
        let warmup = self.warmup_steps();
        if step < warmup {
            return Ok(self.base * step as f64 / warmup as f64);
        }
        let decay = self.total - warmup;
        if decay == 0 {
            return Ok(if step == self.total && self.total > 0 { self.floor } else { self.base });
        }
        let progress = (step - warmup) as f64 / decay as f64;
        Ok(self.floor + (self.base - self.floor) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::new(Self::DEFAULT_BASE, 1000)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = LrSchedule::new(3e-5, 1000);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(s.warmup_steps()).unwrap(), 3e-5);
        assert!(s.lr_at(1000).unwrap().abs() < 1e-20);
    }

    #[test]
    fn out_of_range_rejected() {
        let s = LrSchedule::new(3e-5, 10);
        assert_eq!(
            s.lr_at(11).unwrap_err(),
            NumError::StepOutOfRange { step: 11, total: 10 }
        );
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = LrSchedule::new(3e-5, 100_000);
        let w = s.warmup_steps();
        let left = s.base * (w as f64 - 1e-9) / w as f64;
        assert!((s.lr_at(w).unwrap() - left).abs() < 1e-12);
        assert!((s.lr_at(w + 1).unwrap() - s.lr_at(w).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn never_negative() {
        let s = LrSchedule::new(3e-5, 937);
        for step in 0..=937 {
            assert!(s.lr_at(step).unwrap() >= 0.0);
        }
    }
}
