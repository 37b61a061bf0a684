//! Per-channel learned monotone CDF, independent across positions.

use std::sync::{Arc, Mutex};

use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamStore};

use super::tables::{CdfTable, TableSet};
use super::{clamp_probability, RateEstimate};

/// Hidden widths between the scalar input and the scalar CDF logit.
pub const FILTERS: [usize; 3] = [3, 3, 3];
const INIT_SCALE: f64 = 10.0;
/// Tail mass left outside each channel's table range.
const TAIL_MASS: f64 = 1e-9;
/// Largest half-width of a channel's table.
const MAX_RANGE: i32 = 512;

struct Layer {
    matrix: Param,
    bias: Param,
    factor: Option<Param>,
}

/// Learned monotone CDF for each of `channels` latent channels.
pub struct FactorizedPrior {
    channels: usize,
    layers: Vec<Layer>,
    tables: Mutex<Option<([u8; 32], Arc<TableSet>)>>,
}

impl std::fmt::Debug for FactorizedPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FactorizedPrior").field("channels", &self.channels).finish()
    }
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

fn softplus64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Host copy of the parameters for exact table construction.
struct HostLayers {
    channels: usize,
    dims: Vec<(usize, usize)>,
    matrices: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    factors: Vec<Option<Vec<f64>>>,
}

impl HostLayers {
    fn logit(&self, c: usize, x: f64) -> f64 {
        let mut h = vec![x];
        for (k, &(dout, din)) in self.dims.iter().enumerate() {
            let m = &self.matrices[k][c * dout * din..(c + 1) * dout * din];
            let b = &self.biases[k][c * dout..(c + 1) * dout];
            let mut next: Vec<f64> = (0..dout)
                .map(|o| (0..din).map(|i| softplus64(m[o * din + i]) * h[i]).sum::<f64>() + b[o])
                .collect();
            if let Some(f) = &self.factors[k] {
                let f = &f[c * dout..(c + 1) * dout];
                for (o, v) in next.iter_mut().enumerate() {
                    *v += f[o].tanh() * v.tanh();
                }
            }
            h = next;
        }
        h[0]
    }

    fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid64(self.logit(c, x))
    }

    /// `P(v - 0.5 < X <= v + 0.5)` evaluated on the tail nearer to `v`.
    fn mass(&self, c: usize, v: f64) -> f64 {
        let lo = self.logit(c, v - 0.5);
        let hi = self.logit(c, v + 0.5);
        let s = if lo + hi > 0.0 { -1.0 } else { 1.0 };
        (sigmoid64(s * hi) - sigmoid64(s * lo)).abs()
    }
}

impl FactorizedPrior {
    pub fn new(ps: &mut ParamStore, key: &str, channels: usize) -> Result<Self> {
        let mut dims = vec![1];
        dims.extend_from_slice(&FILTERS);
        dims.push(1);
        let scale = INIT_SCALE.powf(1.0 / (dims.len() - 1) as f64);
        let mut layers = Vec::new();
        for k in 0..dims.len() - 1 {
            let (din, dout) = (dims[k], dims[k + 1]);
            let init = (1.0 / scale / dout as f64).exp_m1().ln() as f32;
            let matrix = ps.constant(&format!("{key}.matrix{k}"), &[channels, dout, din], init)?;
            let bias = ps.uniform(&format!("{key}.bias{k}"), &[channels, dout, 1], 0.5)?;
            let factor = if k + 2 < dims.len() {
                Some(ps.constant(&format!("{key}.factor{k}"), &[channels, dout, 1], 0.0)?)
            } else {
                None
            };
            layers.push(Layer {
                matrix,
                bias,
                factor,
            });
        }
        Ok(Self {
            channels,
            layers,
            tables: Mutex::new(None),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// CDF logits for `x` shaped `(C, 1, L)`.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let mut h = x.clone();
        for layer in &self.layers {
            let m = softplus(&layer.matrix.get().to_dtype(dt)?)?;
            h = m.matmul(&h)?.broadcast_add(&layer.bias.get().to_dtype(dt)?)?;
            if let Some(f) = &layer.factor {
                h = (&h + f.get().to_dtype(dt)?.tanh()?.broadcast_mul(&h.tanh()?)?)?;
            }
        }
        Ok(h)
    }

    /// Per-element probability of the unit bin around each value of `y` (`N, C, H, W`).
    pub fn likelihood(&self, y: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = y.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("prior for {} channels, latent has {c}", self.channels)));
        }
        let l = n * h * w;
        let flat = y.transpose(0, 1)?.contiguous()?.reshape((c, 1, l))?;
        let both = Tensor::cat(&[(&flat - 0.5)?, (&flat + 0.5)?], 2)?;
        let logits = self.logits(&both)?;
        let lower = logits.narrow(2, 0, l)?;
        let upper = logits.narrow(2, l, l)?;
        let sum = (&lower + &upper)?.detach();
        let sign = sum.gt(0.0)?.to_dtype(y.dtype())?.affine(-2.0, 1.0)?;
        let p = (candle_nn::ops::sigmoid(&(&sign * &upper)?)? - candle_nn::ops::sigmoid(&(&sign * &lower)?)?)?
            .abs()?;
        Ok(p.reshape((c, n, h, w))?.transpose(0, 1)?.contiguous()?)
    }

    /// Σ −log2 p over `y`; differentiable in both `y` and the prior parameters.
    pub fn estimate_bits(&self, y: &Tensor) -> Result<RateEstimate> {
        let p = self.likelihood(y)?;
        clamp_probability(&p)
    }

    fn host_layers(&self) -> Result<HostLayers> {
        let mut dims = Vec::new();
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        let host = |p: &Param| -> Result<Vec<f64>> {
            Ok(p.var().as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        };
        for layer in &self.layers {
            let (_, dout, din) = layer.matrix.var().as_tensor().dims3()?;
            dims.push((dout, din));
            matrices.push(host(&layer.matrix)?);
            biases.push(host(&layer.bias)?);
            factors.push(layer.factor.as_ref().map(host).transpose()?);
        }
        Ok(HostLayers {
            channels: self.channels,
            dims,
            matrices,
            biases,
            factors,
        })
    }

    fn fingerprint(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for p in [Some(&layer.matrix), Some(&layer.bias), layer.factor.as_ref()].into_iter().flatten() {
                for v in p.var().as_tensor().flatten_all()?.to_vec1::<f32>()? {
                    h.update(v.to_le_bytes());
                }
            }
        }
        Ok(h.finalize().into())
    }

    /// Frozen inference tables, rebuilt whenever the parameters have changed.
    pub fn tables(&self) -> Result<Arc<TableSet>> {
        let fp = self.fingerprint()?;
        let mut guard = self.tables.lock().expect("table cache poisoned");
        if let Some((cached, t)) = guard.as_ref() {
            if *cached == fp {
                return Ok(t.clone());
            }
        }
        let t = Arc::new(self.build_tables()?);
        *guard = Some((fp, t.clone()));
        Ok(t)
    }

    fn build_tables(&self) -> Result<TableSet> {
        let host = self.host_layers()?;
        let mut tables = Vec::with_capacity(self.channels);
        for c in 0..host.channels {
            let mut lo = -MAX_RANGE;
            while lo < 0 && host.cdf(c, lo as f64 + 0.5) < TAIL_MASS / 2.0 {
                lo += 1;
            }
            let mut hi = MAX_RANGE;
            while hi > lo && 1.0 - host.cdf(c, hi as f64 - 0.5) < TAIL_MASS / 2.0 {
                hi -= 1;
            }
            let pmf: Vec<f64> = (lo..=hi).map(|v| host.mass(c, v as f64)).collect();
            tables.push(CdfTable::from_pmf(lo, &pmf)?);
        }
        Ok(TableSet::new(tables))
    }

    /// Checks that every channel's CDF is nondecreasing on a dense grid.
    pub fn check_monotone(&self) -> Result<()> {
        let host = self.host_layers()?;
        for c in 0..host.channels {
            let mut prev = f64::NEG_INFINITY;
            for i in -4096..=4096 {
                let v = host.logit(c, i as f64 / 16.0);
                if !v.is_finite() || v < prev {
                    return Err(Error::NonFinite("factorized prior cdf is not monotone"));
                }
                prev = v;
            }
        }
        Ok(())
    }

    /// CDF of channel `c` at `x`, for diagnostics and tests.
    pub fn cdf(&self, c: usize, x: f64) -> Result<f64> {
        Ok(self.host_layers()?.cdf(c, x))
    }
}

/// Table index for every element of a `(N, C, H, W)` latent coded per channel.
pub fn channel_ids(n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        for ch in 0..c {
            ids.extend(std::iter::repeat_n(ch, h * w));
        }
    }
    ids
}
