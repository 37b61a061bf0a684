//! Zero-mean Gaussian conditional with per-element scales.

use std::sync::{Arc, OnceLock};

use candle_core::Tensor;

use crate::error::Result;

use super::tables::{CdfTable, TableSet};
use super::{clamp_probability, RateEstimate};

pub const SCALE_MIN: f64 = 0.01;
pub const SCALE_MAX: f64 = 256.0;
pub const SCALE_LEVELS: usize = 64;
/// Table half-width in standard deviations.
const TAIL_SIGMAS: f64 = 6.0;

/// Standard normal CDF in double precision.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Mass of the unit bin around `v` under `N(0, sigma^2)`.
pub fn bin_mass(v: f64, sigma: f64) -> f64 {
    let a = v.abs();
    std_normal_cdf((0.5 - a) / sigma) - std_normal_cdf((-0.5 - a) / sigma)
}

#[derive(Debug)]
pub struct GaussianConditional {
    scales: Vec<f64>,
    tables: OnceLock<Arc<TableSet>>,
}

impl Default for GaussianConditional {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianConditional {
    pub fn new() -> Self {
        let step = (SCALE_MAX / SCALE_MIN).ln() / (SCALE_LEVELS - 1) as f64;
        let scales = (0..SCALE_LEVELS)
            .map(|i| (SCALE_MIN.ln() + step * i as f64).exp())
            .collect();
        Self {
            scales,
            tables: OnceLock::new(),
        }
    }

    pub fn scale_table(&self) -> &[f64] {
        &self.scales
    }

    /// Maps raw network output to a scale no smaller than `SCALE_MIN`.
    pub fn scales_from_raw(raw: &Tensor) -> Result<Tensor> {
        let sp = (raw.relu()? + (raw.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
        Ok((sp + SCALE_MIN)?)
    }

    /// Per-element unit-bin probability of `y` under `N(0, sigma^2)`.
    pub fn likelihood(y: &Tensor, sigma: &Tensor) -> Result<Tensor> {
        let a = y.abs()?;
        let inv = (sigma.recip()? * std::f64::consts::FRAC_1_SQRT_2)?;
        let upper = ((a.neg()? + 0.5)?.mul(&inv))?.erf()?;
        let lower = ((a.neg()? - 0.5)?.mul(&inv))?.erf()?;
        Ok(((upper - lower)? * 0.5)?)
    }

    pub fn estimate_bits(y: &Tensor, sigma: &Tensor) -> Result<RateEstimate> {
        clamp_probability(&Self::likelihood(y, sigma)?)
    }

    /// First table scale no smaller than `sigma`.
    pub fn index_for(&self, sigma: f64) -> usize {
        self.scales
            .partition_point(|&s| s < sigma)
            .min(self.scales.len() - 1)
    }

    pub fn indexes(&self, sigmas: &[f32]) -> Vec<usize> {
        sigmas.iter().map(|&s| self.index_for(s as f64)).collect()
    }

    pub fn tables(&self) -> Arc<TableSet> {
        self.tables
            .get_or_init(|| {
                let tables = self
                    .scales
                    .iter()
                    .map(|&s| {
                        let r = (TAIL_SIGMAS * s).ceil() as i32 + 1;
                        let pmf: Vec<f64> = (-r..=r).map(|v| bin_mass(v as f64, s)).collect();
                        CdfTable::from_pmf(-r, &pmf).expect("gaussian table fits the coder")
                    })
                    .collect();
                Arc::new(TableSet::new(tables))
            })
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_grid_is_log_spaced() {
        let g = GaussianConditional::new();
        let s = g.scale_table();
        assert_eq!(s.len(), SCALE_LEVELS);
        assert!((s[0] - SCALE_MIN).abs() < 1e-12);
        assert!((s[SCALE_LEVELS - 1] - SCALE_MAX).abs() < 1e-9);
        let r = s[1] / s[0];
        for w in s.windows(2) {
            assert!((w[1] / w[0] - r).abs() < 1e-9);
        }
        assert_eq!(g.index_for(0.0), 0);
        assert_eq!(g.index_for(1e9), SCALE_LEVELS - 1);
        assert!(s[g.index_for(1.0)] >= 1.0 && s[g.index_for(1.0) - 1] < 1.0);
    }
}
