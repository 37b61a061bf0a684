//! The assembled P-frame codec: module set, presets and the per-frame forward pass.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codecs::{MvdCodec, MvdCodecConfig, ResCodecConfig, ResidualCodec};
use crate::entropy::QuantMode;
use crate::error::{Error, Result, Stage, StageExt};
use crate::flow::{FlowConfig, FlowEstimatorHandle};
use crate::mamvp::{Mamvp, MamvpConfig};
use crate::mmc::{reference_flows, Mmc, MmcConfig, MAX_REFERENCES};
use crate::nn::ParamStore;
use crate::refine::{MvRefine, MvRefineConfig, ResRefine, ResRefineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleId {
    Me,
    Mmc,
    MvdCodec,
    ResCodec,
    Mamvp,
    MvRefine,
    ResRefine,
}

impl ModuleId {
    pub const ALL: [ModuleId; 7] = [
        ModuleId::Me,
        ModuleId::Mmc,
        ModuleId::MvdCodec,
        ModuleId::ResCodec,
        ModuleId::Mamvp,
        ModuleId::MvRefine,
        ModuleId::ResRefine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleId::Me => "me",
            ModuleId::Mmc => "mmc",
            ModuleId::MvdCodec => "mvd_codec",
            ModuleId::ResCodec => "res_codec",
            ModuleId::Mamvp => "mamvp",
            ModuleId::MvRefine => "mv_refine",
            ModuleId::ResRefine => "res_refine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for ModuleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub flow: FlowConfig,
    pub mamvp: MamvpConfig,
    pub mvd: MvdCodecConfig,
    pub res: ResCodecConfig,
    pub mmc: MmcConfig,
    pub mv_refine: MvRefineConfig,
    pub res_refine: ResRefineConfig,
    /// Reference frames used by motion compensation and residual refinement (1..=4).
    pub references: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-width configuration.
    pub fn full() -> Self {
        Self {
            flow: FlowConfig::default(),
            mamvp: MamvpConfig::default(),
            mvd: MvdCodecConfig::default(),
            res: ResCodecConfig::default(),
            mmc: MmcConfig::default(),
            mv_refine: MvRefineConfig::default(),
            res_refine: ResRefineConfig::default(),
            references: MAX_REFERENCES,
        }
    }

    /// Narrow configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            flow: FlowConfig {
                levels: 5,
                radius: 2,
                refine_channels: 8,
            },
            mamvp: MamvpConfig {
                channels: vec![8, 12, 12, 12],
                predictor_width: 16,
                predictor_depth: 3,
                predicted_features: 8,
            },
            mvd: MvdCodecConfig { hidden: 32, latent: 32 },
            res: ResCodecConfig {
                hidden: 48,
                latent: 64,
                hyper: 32,
            },
            mmc: MmcConfig {
                features: 8,
                unet: vec![16, 24, 32],
            },
            mv_refine: MvRefineConfig {
                features: 6,
                width: 16,
                dilations: vec![1, 2, 4, 8, 4, 2, 1, 1],
            },
            res_refine: ResRefineConfig {
                features: 8,
                unet: vec![16, 16, 16],
            },
            references: MAX_REFERENCES,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }
}

/// Which optional modules take part in coding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enabled {
    pub mamvp: bool,
    pub mv_refine: bool,
    pub res_refine: bool,
}

impl Enabled {
    pub const ALL: Enabled = Enabled {
        mamvp: true,
        mv_refine: true,
        res_refine: true,
    };
    pub const BASELINE: Enabled = Enabled {
        mamvp: false,
        mv_refine: false,
        res_refine: false,
    };

    pub fn bits(self) -> u8 {
        self.mamvp as u8 | (self.mv_refine as u8) << 1 | (self.res_refine as u8) << 2
    }

    pub fn from_bits(b: u8) -> Self {
        Self {
            mamvp: b & 1 != 0,
            mv_refine: b & 2 != 0,
            res_refine: b & 4 != 0,
        }
    }
}

/// Decoded state the current frame is predicted from, newest first.
#[derive(Debug, Clone)]
pub struct References {
    /// `x̂_{t-1}, …, x̂_{t-4}`, each `(N, 3, H, W)`.
    pub frames: [Tensor; MAX_REFERENCES],
    /// `v̂_{t-1}, v̂_{t-2}, v̂_{t-3}`, each `(N, 2, H, W)`.
    pub mvs: [Tensor; 3],
}

impl References {
    pub fn detach(&self) -> Self {
        Self {
            frames: self.frames.clone().map(|t| t.detach()),
            mvs: self.mvs.clone().map(|t| t.detach()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodingMode {
    /// Motion path only: the estimated flow stands in for the decoded MV and
    /// the prediction is the reconstruction.
    MotionOnly,
    /// Full MVD and residual coding.
    Full,
}

/// Everything the training loop and diagnostics need from one P-frame.
#[derive(Debug, Clone)]
pub struct PFrameOutput {
    pub recon: Tensor,
    pub prediction: Tensor,
    /// Estimated flow `v_t`.
    pub flow: Tensor,
    /// MAMVP prediction `v̄_t`.
    pub mv_pred: Tensor,
    /// Decoded MV `v̂_t`.
    pub mv: Tensor,
    pub bits_mvd: Tensor,
    pub bits_res: Tensor,
}

pub struct Model {
    pub config: ModelConfig,
    pub enabled: Enabled,
    pub me: FlowEstimatorHandle,
    pub mamvp: Mamvp,
    pub mvd: MvdCodec,
    pub mv_refine: MvRefine,
    pub mmc: Mmc,
    pub res: ResidualCodec,
    pub res_refine: ResRefine,
    stores: Vec<(ModuleId, ParamStore)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if !(1..=MAX_REFERENCES).contains(&config.references) {
            return Err(Error::Config(format!("{} references", config.references)));
        }
        let me = FlowEstimatorHandle::new(config.flow, seed)?;
        let store = |id: ModuleId| ParamStore::new(id.name(), seed);
        let (mut s_mamvp, mut s_mvd, mut s_mvr) = (store(ModuleId::Mamvp), store(ModuleId::MvdCodec), store(ModuleId::MvRefine));
        let (mut s_mmc, mut s_res, mut s_rr) = (store(ModuleId::Mmc), store(ModuleId::ResCodec), store(ModuleId::ResRefine));
        let model = Self {
            mamvp: Mamvp::new(&mut s_mamvp, config.mamvp.clone())?,
            mvd: MvdCodec::new(&mut s_mvd, config.mvd)?,
            mv_refine: MvRefine::new(&mut s_mvr, config.mv_refine.clone())?,
            mmc: Mmc::new(&mut s_mmc, config.mmc.clone())?,
            res: ResidualCodec::new(&mut s_res, config.res)?,
            res_refine: ResRefine::new(&mut s_rr, config.res_refine.clone())?,
            stores: vec![
                (ModuleId::Mmc, s_mmc),
                (ModuleId::MvdCodec, s_mvd),
                (ModuleId::ResCodec, s_res),
                (ModuleId::Mamvp, s_mamvp),
                (ModuleId::MvRefine, s_mvr),
                (ModuleId::ResRefine, s_rr),
            ],
            me,
            enabled: Enabled::ALL,
            config,
        };
        model.me.params().set_frozen(!model.me.trainable);
        Ok(model)
    }

    pub fn store(&self, id: ModuleId) -> &ParamStore {
        match id {
            ModuleId::Me => self.me.params(),
            _ => &self.stores.iter().find(|(m, _)| *m == id).expect("every module has a store").1,
        }
    }

    pub fn set_trainable(&self, trainable: &[ModuleId]) {
        for id in ModuleId::ALL {
            self.store(id).set_frozen(!trainable.contains(&id));
        }
    }

    /// Freezes every module until the guard drops, then restores the previous flags.
    pub fn inference_guard(&self) -> InferenceGuard<'_> {
        let saved = ModuleId::ALL.map(|id| self.store(id).is_frozen());
        for id in ModuleId::ALL {
            self.store(id).set_frozen(true);
        }
        InferenceGuard { model: self, saved }
    }

    /// 64-bit digest of the configuration and every module's weights.
    pub fn checksum(&self) -> Result<u64> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        for id in ModuleId::ALL {
            h.update(id.name());
            h.update(self.store(id).checksum()?);
        }
        let d = h.finalize();
        Ok(u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes")))
    }

    /// `v̄_t`, or zeros when MAMVP is disabled.
    pub fn predict_mv(&self, mvs: &[Tensor; 3]) -> Result<Tensor> {
        if self.enabled.mamvp {
            clamp_mv(&self.mamvp.forward(mvs)?.mv)
        } else {
            Ok(mvs[0].zeros_like()?)
        }
    }

    pub fn refine_mv(&self, v_prime: &Tensor, refs: &References) -> Result<Tensor> {
        if self.enabled.mv_refine {
            clamp_mv(&self.mv_refine.forward(v_prime, &refs.mvs, &refs.frames[0])?)
        } else {
            Ok(v_prime.clone())
        }
    }

    /// `(x̄_t, chain flows)` from the decoded MV.
    pub fn compensate(&self, mv: &Tensor, refs: &References) -> Result<(Tensor, Vec<Tensor>)> {
        let flows = reference_flows(mv, &refs.mvs)?;
        let out = self.mmc.forward(&refs.frames, &flows, self.config.references)?;
        Ok((out.prediction, flows))
    }

    pub fn refine_residual(&self, r_prime: &Tensor, prediction: &Tensor, flows: &[Tensor], refs: &References) -> Result<Tensor> {
        if self.enabled.res_refine {
            self.res_refine
                .forward(&refs.frames, flows, self.config.references, prediction, r_prime)
        } else {
            Ok(r_prime.clone())
        }
    }

    /// Differentiable P-frame pass with noisy (`Noise`) or rounded (`Round`) latents.
    pub fn forward(
        &self,
        x: &Tensor,
        refs: &References,
        mode: CodingMode,
        quant: QuantMode,
        rng: &mut impl Rng,
    ) -> Result<PFrameOutput> {
        let flow = self.me.estimate_flow(x, &refs.frames[0]).at_stage(Stage::MotionEstimation, 0)?;
        let zero = Tensor::zeros((), DType::F32, x.device())?;
        if mode == CodingMode::MotionOnly {
            let (prediction, _) = self.compensate(&flow, refs).at_stage(Stage::MotionCompensation, 0)?;
            return Ok(PFrameOutput {
                recon: prediction.clone(),
                prediction,
                mv_pred: flow.zeros_like()?,
                mv: flow.clone(),
                flow,
                bits_mvd: zero.clone(),
                bits_res: zero,
            });
        }
        let mv_pred = self.predict_mv(&refs.mvs).at_stage(Stage::MvPrediction, 0)?;
        let d = (&flow - &mv_pred)?;
        let mvd = match quant {
            QuantMode::Noise => self.mvd.forward_train(&d, rng),
            QuantMode::Round => self.mvd.forward_round(&d),
        }
        .at_stage(Stage::MvdCoding, 0)?;
        let v_prime = (&mv_pred + &mvd.recon)?;
        let mv = self.refine_mv(&v_prime, refs).at_stage(Stage::MvRefinement, 0)?;
        let (prediction, flows) = self.compensate(&mv, refs).at_stage(Stage::MotionCompensation, 0)?;
        let r = (x - &prediction)?;
        let res = match quant {
            QuantMode::Noise => self.res.forward_train(&r, rng),
            QuantMode::Round => self.res.forward_round(&r),
        }
        .at_stage(Stage::ResidualCoding, 0)?;
        let r_hat = self
            .refine_residual(&res.recon, &prediction, &flows, refs)
            .at_stage(Stage::ResidualRefinement, 0)?;
        let recon = (&prediction + r_hat)?;
        Ok(PFrameOutput {
            recon,
            prediction,
            flow,
            mv_pred,
            mv,
            bits_mvd: mvd.rate.bits,
            bits_res: res.rate.bits,
        })
    }
}

/// Limits a learned MV field to `±max(H, W)` pixels. Warping clamps sample
/// positions to the frame, so larger vectors carry no information, and the
/// bound keeps the MV buffer feedback loop finite.
fn clamp_mv(mv: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = mv.dims4()?;
    let limit = h.max(w) as f32;
    Ok(mv.clamp(-limit, limit)?)
}

pub struct InferenceGuard<'a> {
    model: &'a Model,
    saved: [bool; 7],
}

impl Drop for InferenceGuard<'_> {
    fn drop(&mut self) {
        for (id, frozen) in ModuleId::ALL.into_iter().zip(self.saved) {
            self.model.store(id).set_frozen(frozen);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_forward_shapes_and_freeze_scoping() {
        let model = Model::new(ModelConfig::desk(), 0).unwrap();
        let x = seeded_uniform(&[1, 3, 64, 64], 0.0, 1.0, 1).unwrap();
        let refs = References {
            frames: [2, 3, 4, 5].map(|s| seeded_uniform(&[1, 3, 64, 64], 0.0, 1.0, s).unwrap()),
            mvs: [6, 7, 8].map(|s| seeded_uniform(&[1, 2, 64, 64], -1.0, 1.0, s).unwrap()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&x, &refs, CodingMode::Full, QuantMode::Noise, &mut rng).unwrap();
        assert_eq!(out.recon.dims(), &[1, 3, 64, 64]);
        assert_eq!(out.mv.dims(), &[1, 2, 64, 64]);
        assert!(out.bits_res.to_scalar::<f32>().unwrap() > 0.0);
        model.set_trainable(&[ModuleId::Mamvp]);
        assert!(model.store(ModuleId::Mmc).is_frozen());
        assert!(!model.store(ModuleId::Mamvp).is_frozen());
        {
            let _g = model.inference_guard();
            assert!(ModuleId::ALL.iter().all(|&id| model.store(id).is_frozen()));
        }
        assert!(!model.store(ModuleId::Mamvp).is_frozen());
        let a = model.checksum().unwrap();
        assert_eq!(a, Model::new(ModelConfig::desk(), 0).unwrap().checksum().unwrap());
        assert_ne!(a, Model::new(ModelConfig::desk(), 1).unwrap().checksum().unwrap());
    }

    #[test]
    fn enabled_bits_round_trip() {
        for b in 0..8 {
            assert_eq!(Enabled::from_bits(b).bits(), b);
        }
    }
}
