//! Quantization, learned priors, rate estimation and range coding.

pub mod coder;
pub mod factorized;
pub mod gaussian;
pub mod tables;

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

pub use coder::{decode_symbols, encode_symbols};
pub use factorized::FactorizedPrior;
pub use gaussian::GaussianConditional;
pub use tables::{CdfTable, TableSet};

/// Smallest probability used inside a rate estimate.
pub const PROB_FLOOR: f64 = 2.328_306_436_538_696_3e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamId {
    Mvd,
    ResY,
    ResZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-0.5, 0.5)` noise, training only.
    Noise,
    /// Nearest integer, ties to even.
    Round,
}

pub fn round_ties_even(x: &Tensor) -> Result<Tensor> {
    let dt = x.dtype();
    let v = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let r: Vec<f64> = v.into_iter().map(f64::round_ties_even).collect();
    Ok(Tensor::from_vec(r, x.shape(), x.device())?.to_dtype(dt)?)
}

pub fn quantize(x: &Tensor, mode: QuantMode, rng: &mut impl Rng) -> Result<Tensor> {
    match mode {
        QuantMode::Round => round_ties_even(x),
        QuantMode::Noise => {
            let n = x.elem_count();
            let u: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let noise = Tensor::from_vec(u, x.shape(), x.device())?.to_dtype(x.dtype())?;
            Ok((x + noise)?)
        }
    }
}

/// Integer symbols of a rounded latent; rejects values outside the coder bound.
pub fn to_symbols(x: &Tensor) -> Result<Vec<i32>> {
    let v = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    v.into_iter()
        .map(|f| {
            if !f.is_finite() {
                return Err(Error::NonFinite("latent"));
            }
            if f.abs() > tables::ALPHABET_BOUND as f64 {
                return Err(Error::SymbolOutOfRange {
                    value: f as i64,
                    bound: tables::ALPHABET_BOUND,
                });
            }
            Ok(f as i32)
        })
        .collect()
}

/// Bits estimated from element likelihoods.
#[derive(Debug, Clone)]
pub struct RateEstimate {
    /// Scalar `Σ −log2 max(p, PROB_FLOOR)`.
    pub bits: Tensor,
    /// Elements whose probability fell below the floor.
    pub clamped: usize,
}

impl RateEstimate {
    pub fn value(&self) -> Result<f64> {
        Ok(self.bits.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

pub(crate) fn clamp_probability(p: &Tensor) -> Result<RateEstimate> {
    let clamped = p
        .lt(PROB_FLOOR)?
        .to_dtype(DType::F32)?
        .sum_all()?
        .to_scalar::<f32>()? as usize;
    if clamped > 0 {
        log::debug!("{clamped} likelihoods clamped to the probability floor");
    }
    let bits = (p.maximum(PROB_FLOOR)?.log()?.sum_all()? * (-1.0 / std::f64::consts::LN_2))?;
    Ok(RateEstimate { bits, clamped })
}
