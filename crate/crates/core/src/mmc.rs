//! Motion compensation from up to four reference frames.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, FeatureNet, Init, ParamStore, UNet};
use crate::warp::{bilinear_warp, warp_chain};

pub const MAX_REFERENCES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmcConfig {
    pub features: usize,
    /// U-Net widths per scale, finest first.
    pub unet: Vec<usize>,
}

impl Default for MmcConfig {
    fn default() -> Self {
        Self {
            features: 32,
            unet: vec![64, 64, 64],
        }
    }
}

/// Flows that carry each reference (newest first) onto the current frame:
/// `flows[0] = v̂_t`, `flows[i] = v̂_t + Σ_{k<=i} v̂^w_{t-k}`.
pub fn reference_flows(v_t: &Tensor, mv_history: &[Tensor]) -> Result<Vec<Tensor>> {
    Ok(warp_chain(v_t, mv_history)?.flows)
}

/// Warps per-reference features along `flows`, reusing the furthest of the
/// first `references` entries for the rest.
pub(crate) fn warp_references(features: &[Tensor], flows: &[Tensor], references: usize) -> Result<Vec<Tensor>> {
    if !(1..=features.len()).contains(&references) || flows.len() < features.len() {
        return Err(Error::Config(format!(
            "{references} references with {} frames and {} flows",
            features.len(),
            flows.len()
        )));
    }
    let mut out = Vec::with_capacity(features.len());
    for (f, v) in features.iter().zip(flows).take(references) {
        out.push(bilinear_warp(f, v)?);
    }
    let furthest = out.last().expect("at least one reference").clone();
    out.resize(features.len(), furthest);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct McOutput {
    /// `x̄_t`, not clamped.
    pub prediction: Tensor,
    /// `Warp(x̂_{t-1}, v̂_t)`.
    pub warped_prev: Tensor,
}

pub struct Mmc {
    config: MmcConfig,
    features: FeatureNet,
    unet: UNet,
    out: Conv2d,
}

impl Mmc {
    pub fn new(ps: &mut ParamStore, config: MmcConfig) -> Result<Self> {
        let features = FeatureNet::new(ps, "feat", 3, config.features)?;
        let unet = UNet::new(ps, "unet", MAX_REFERENCES * config.features + 3, &config.unet)?;
        let out = Conv2d::same3(ps, "out", unet.out_channels(), 3, Init::Zero)?;
        Ok(Self {
            config,
            features,
            unet,
            out,
        })
    }

    pub fn config(&self) -> &MmcConfig {
        &self.config
    }

    /// `frames` are `x̂_{t-1..t-4}` and `flows` come from [`reference_flows`].
    pub fn forward(&self, frames: &[Tensor; MAX_REFERENCES], flows: &[Tensor], references: usize) -> Result<McOutput> {
        let warped_prev = bilinear_warp(&frames[0], &flows[0])?;
        let feats = frames.iter().map(|f| self.features.forward(f)).collect::<Result<Vec<_>>>()?;
        let mut inputs = warp_references(&feats, flows, references)?;
        inputs.reverse();
        inputs.push(warped_prev.clone());
        let branch = self.out.forward(&self.unet.forward(&Tensor::cat(&inputs, 1)?)?)?;
        Ok(McOutput {
            prediction: (branch + &warped_prev)?,
            warped_prev,
        })
    }

    /// The learned branch alone, `x̄_t - Warp(x̂_{t-1}, v̂_t)`.
    pub fn branch(&self, frames: &[Tensor; MAX_REFERENCES], flows: &[Tensor], references: usize) -> Result<Tensor> {
        let out = self.forward(frames, flows, references)?;
        Ok((out.prediction - out.warped_prev)?)
    }
}
