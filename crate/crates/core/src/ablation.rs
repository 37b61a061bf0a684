//! Toy corpus and matched encode/eval comparisons between model variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_sequence, EvalReport};
use crate::media::{synth_motion_clip, Frame, SynthClip, SynthMotion};
use crate::metrics::ColorMode;
use crate::model::Model;
use crate::pipeline::EncodeOptions;
use crate::train::DISTORTION_SCALE_8BIT;

pub const TOY_FRAMES: usize = 16;
pub const TOY_SIZE: usize = 64;
/// MVD share of P-frame bits below which a report flags the rates as unbalanced.
pub const MVD_SHARE_FLOOR: f64 = 0.05;

/// The single clip the toy models are trained on.
pub fn toy_training_clip() -> SynthClip {
    let motion = SynthMotion {
        translation: (1.5, 0.5),
        rotation_deg: 1.0,
        zoom: 1.01,
        jitter: 0.0,
    };
    synth_motion_clip(motion, TOY_FRAMES, (TOY_SIZE, TOY_SIZE), 7)
}

/// The training clip plus two held-out clips with other textures and motion.
pub fn toy_corpus() -> Vec<(String, Vec<Frame>)> {
    let pan = SynthMotion {
        translation: (-1.0, 1.0),
        rotation_deg: -0.5,
        zoom: 1.0,
        jitter: 0.0,
    };
    let drift = SynthMotion {
        translation: (2.0, -0.5),
        rotation_deg: 0.0,
        zoom: 0.99,
        jitter: 0.25,
    };
    vec![
        ("train".to_string(), toy_training_clip().frames),
        ("pan".to_string(), synth_motion_clip(pan, TOY_FRAMES, (TOY_SIZE, TOY_SIZE), 11).frames),
        ("drift".to_string(), synth_motion_clip(drift, TOY_FRAMES, (TOY_SIZE, TOY_SIZE), 13).frames),
    ]
}

/// P-frame means pooled over every sequence of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub p_frames: usize,
    pub psnr: f64,
    pub bpp_mv: f64,
    pub bpp_res: f64,
    /// Whole P-frame units, overhead included.
    pub bpp: f64,
    /// Mean `255² · MSE + λ · bpp` per P-frame.
    pub rd_cost: f64,
    /// `bpp_mv / bpp`.
    pub mvd_share: f64,
}

pub fn score_corpus(model: &Model, corpus: &[(String, Vec<Frame>)], lambda: f64) -> Result<(CorpusScore, Vec<EvalReport>)> {
    let mut reports = Vec::with_capacity(corpus.len());
    for (name, frames) in corpus {
        reports.push(evaluate_sequence(model, name, lambda, frames, &EncodeOptions::default(), ColorMode::Rgb)?);
    }
    let p: Vec<_> = reports.iter().flat_map(|r| &r.records).filter(|r| r.kind == "P").collect();
    if p.is_empty() {
        return Err(Error::Config("corpus has no P-frames".into()));
    }
    let n = p.len() as f64;
    let mean = |f: &dyn Fn(&crate::eval::RdRecord) -> f64| p.iter().map(|r| f(r)).sum::<f64>() / n;
    let bpp_mv = mean(&|r| r.bpp_mv);
    let bpp = mean(&|r| r.bpp_total);
    let score = CorpusScore {
        p_frames: p.len(),
        psnr: mean(&|r| r.psnr),
        bpp_mv,
        bpp_res: mean(&|r| r.bpp_res),
        bpp,
        rd_cost: mean(&|r| DISTORTION_SCALE_8BIT * 10f64.powf(-r.psnr / 10.0) + lambda * r.bpp_total),
        mvd_share: if bpp > 0.0 { bpp_mv / bpp } else { 0.0 },
    };
    Ok((score, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Refs2,
    Refs3,
    Refs4,
    NoMamvp,
    NoMvrefine,
    NoResrefine,
    /// Compares against a separately trained from-scratch checkpoint.
    Scratch,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::Refs2,
        AblationMode::Refs3,
        AblationMode::Refs4,
        AblationMode::NoMamvp,
        AblationMode::NoMvrefine,
        AblationMode::NoResrefine,
        AblationMode::Scratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Refs2 => "refs_2",
            AblationMode::Refs3 => "refs_3",
            AblationMode::Refs4 => "refs_4",
            AblationMode::NoMamvp => "no_mamvp",
            AblationMode::NoMvrefine => "no_mvrefine",
            AblationMode::NoResrefine => "no_resrefine",
            AblationMode::Scratch => "scratch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode '{s}'")))
    }

    /// Whether the variant is the base model with a module or reference count switched off.
    pub fn is_inference_toggle(self) -> bool {
        self != AblationMode::Scratch
    }

    /// Turns a trained model into this variant in place.
    pub fn apply(self, model: &mut Model) -> Result<()> {
        match self {
            AblationMode::Refs2 => model.config.references = 2,
            AblationMode::Refs3 => model.config.references = 3,
            AblationMode::Refs4 => model.config.references = 4,
            AblationMode::NoMamvp => model.enabled.mamvp = false,
            AblationMode::NoMvrefine => model.enabled.mv_refine = false,
            AblationMode::NoResrefine => model.enabled.res_refine = false,
            AblationMode::Scratch => {
                return Err(Error::Config("scratch variants are trained, not toggled".into()));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mode: AblationMode,
    pub base: CorpusScore,
    pub variant: CorpusScore,
    /// `variant − base`.
    pub delta_bpp: f64,
    pub delta_bpp_mv: f64,
    pub delta_psnr: f64,
    /// The variant spends less than `MVD_SHARE_FLOOR` of its bits on MVD.
    pub rate_imbalance: bool,
}

impl Comparison {
    pub fn new(mode: AblationMode, base: CorpusScore, variant: CorpusScore) -> Self {
        Self {
            mode,
            delta_bpp: variant.bpp - base.bpp,
            delta_bpp_mv: variant.bpp_mv - base.bpp_mv,
            delta_psnr: variant.psnr - base.psnr,
            rate_imbalance: variant.mvd_share < MVD_SHARE_FLOOR,
            base,
            variant,
        }
    }

    pub fn to_text(&self) -> String {
        let row = |name: &str, s: &CorpusScore| {
            format!(
                "{name:<8} psnr {:>7.3} dB  bpp {:.5}  mv {:.5}  res {:.5}  mvd share {:>5.1}%  J {:.3}\n",
                s.psnr,
                s.bpp,
                s.bpp_mv,
                s.bpp_res,
                100.0 * s.mvd_share,
                s.rd_cost
            )
        };
        let mut out = format!("ablation {}\n", self.mode);
        out.push_str(&row("base", &self.base));
        out.push_str(&row("variant", &self.variant));
        out.push_str(&format!(
            "delta    psnr {:+.3} dB  bpp {:+.5}  mv {:+.5}\n",
            self.delta_psnr, self.delta_bpp, self.delta_bpp_mv
        ));
        if self.rate_imbalance {
            out.push_str(&format!(
                "rate imbalance: variant MVD share {:.2}% is below {:.0}%\n",
                100.0 * self.variant.mvd_share,
                100.0 * MVD_SHARE_FLOOR
            ));
        }
        out
    }
}

/// Scores `base` against `variant` on `corpus`. For toggle modes `variant`
/// should hold the same weights as `base`; the toggle is applied here.
pub fn compare(
    base: &Model,
    variant: &mut Model,
    mode: AblationMode,
    corpus: &[(String, Vec<Frame>)],
    lambda: f64,
) -> Result<Comparison> {
    if mode.is_inference_toggle() {
        mode.apply(variant)?;
    }
    let (b, _) = score_corpus(base, corpus, lambda)?;
    let (v, _) = score_corpus(variant, corpus, lambda)?;
    Ok(Comparison::new(mode, b, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn modes_round_trip_and_toggle() {
        for m in AblationMode::ALL {
            assert_eq!(AblationMode::parse(m.name()).unwrap(), m);
        }
        assert!(AblationMode::parse("refs_5").is_err());
        let mut model = Model::new(ModelConfig::desk(), 0).unwrap();
        AblationMode::Refs2.apply(&mut model).unwrap();
        AblationMode::NoMamvp.apply(&mut model).unwrap();
        assert_eq!(model.config.references, 2);
        assert!(!model.enabled.mamvp && model.enabled.mv_refine);
        assert!(AblationMode::Scratch.apply(&mut model).is_err());
    }

    #[test]
    fn corpus_shapes_and_flags() {
        let corpus = toy_corpus();
        assert_eq!(corpus.len(), 3);
        assert!(corpus.iter().all(|(_, f)| f.len() == TOY_FRAMES && f[0].size() == (TOY_SIZE, TOY_SIZE)));
        assert_ne!(corpus[0].1[1].pixels, corpus[1].1[1].pixels);
        let s = |share: f64| CorpusScore {
            p_frames: 1,
            psnr: 30.0,
            bpp_mv: share,
            bpp_res: 1.0 - share,
            bpp: 1.0,
            rd_cost: 0.0,
            mvd_share: share,
        };
        assert!(Comparison::new(AblationMode::Scratch, s(0.2), s(0.01)).rate_imbalance);
        assert!(!Comparison::new(AblationMode::Scratch, s(0.2), s(0.3)).rate_imbalance);
    }
}
