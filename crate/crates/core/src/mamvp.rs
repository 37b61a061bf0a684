//! Multi-scale MV prediction from the three most recent decoded MV fields.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, Init, ParamStore};
use crate::warp::{bilinear_warp, downsample_flow_tensor, resize, upsample_flow_tensor, warp_chain};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MamvpConfig {
    /// Feature channels per level, finest first; its length is the level count.
    pub channels: Vec<usize>,
    pub predictor_width: usize,
    /// Convolutions per level predictor, including the linear output layer.
    pub predictor_depth: usize,
    /// Feature channels passed from one level's predictor to the next finer one.
    pub predicted_features: usize,
}

impl Default for MamvpConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32, 32],
            predictor_width: 64,
            predictor_depth: 6,
            predicted_features: 16,
        }
    }
}

impl MamvpConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }
}

/// Features of one MV field, `levels[l]` at `1 / 2^l` resolution.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

struct LevelExtractor {
    a: Conv2d,
    b: Conv2d,
}

struct LevelPredictor {
    hidden: Vec<Conv2d>,
    out: Conv2d,
    /// Whether this level reads the upsampled output of the coarser one.
    conditioned: bool,
}

#[derive(Debug, Clone)]
pub struct MvPrediction {
    /// Level-0 prediction `(N, 2, H, W)`.
    pub mv: Tensor,
    /// Predictions at every level, finest first.
    pub per_level: Vec<Tensor>,
}

pub struct Mamvp {
    config: MamvpConfig,
    extract: Vec<LevelExtractor>,
    predict: Vec<LevelPredictor>,
}

impl Mamvp {
    pub fn new(ps: &mut ParamStore, config: MamvpConfig) -> Result<Self> {
        let levels = config.levels();
        if levels == 0 || config.predictor_depth == 0 {
            return Err(Error::Config("mamvp needs at least one level and one predictor layer".into()));
        }
        let mut extract = Vec::with_capacity(levels);
        let mut predict = Vec::with_capacity(levels);
        for l in 0..levels {
            let c = config.channels[l];
            let (cin, stride) = if l == 0 { (2, 1) } else { (config.channels[l - 1], 2) };
            extract.push(LevelExtractor {
                a: Conv2d::new(ps, &format!("mf.{l}.0"), cin, c, 3, stride, 1, Init::He)?,
                b: Conv2d::same3(ps, &format!("mf.{l}.1"), c, c, Init::He)?,
            });
            let conditioned = l + 1 < levels;
            let mut width = 3 * c + if conditioned { 2 + config.predicted_features } else { 0 };
            let mut hidden = Vec::new();
            for k in 0..config.predictor_depth - 1 {
                hidden.push(Conv2d::same3(ps, &format!("mvp.{l}.{k}"), width, config.predictor_width, Init::He)?);
                width = config.predictor_width;
            }
            let out = Conv2d::same3(ps, &format!("mvp.{l}.out"), width, 2 + config.predicted_features, Init::Zero)?;
            predict.push(LevelPredictor {
                hidden,
                out,
                conditioned,
            });
        }
        Ok(Self {
            config,
            extract,
            predict,
        })
    }

    pub fn config(&self) -> &MamvpConfig {
        &self.config
    }

    /// Whether the predictor at `level` consumes the coarser level's output.
    pub fn is_conditioned(&self, level: usize) -> bool {
        self.predict[level].conditioned
    }

    pub fn extract_mv_pyramid(&self, mv: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = mv.dims4()?;
        let unit = 1 << (self.config.levels() - 1);
        if c != 2 {
            return Err(Error::Shape(format!("mv field with {c} channels")));
        }
        if h < unit || w < unit || h % unit != 0 || w % unit != 0 {
            return Err(Error::TooSmall {
                height: h,
                width: w,
                reason: "mv pyramid needs a multiple of 2^(levels-1) in both dimensions",
            });
        }
        let mut levels = Vec::with_capacity(self.extract.len());
        let mut x = mv.clone();
        for e in &self.extract {
            x = leaky_relu(&e.b.forward(&leaky_relu(&e.a.forward(&x)?)?)?)?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    /// Predicts the current MV field from `[v̂_{t-1}, v̂_{t-2}, v̂_{t-3}]`.
    pub fn forward(&self, history: &[Tensor; 3]) -> Result<MvPrediction> {
        let [v1, v2, v3] = history;
        let f1 = self.extract_mv_pyramid(v1)?;
        let p2 = self.extract_mv_pyramid(v2)?;
        let p3 = self.extract_mv_pyramid(v3)?;
        let (a3, a2) = align_pyramids(&p3, &p2, v1, v2)?;
        self.predict_mv(&f1, &a2, &a3)
    }

    /// Coarse-to-fine recursion over the aligned pyramids.
    pub fn predict_mv(&self, f1: &FeaturePyramid, a2: &FeaturePyramid, a3: &FeaturePyramid) -> Result<MvPrediction> {
        let levels = self.config.levels();
        let mut per_level = vec![None; levels];
        let mut coarser: Option<(Tensor, Tensor)> = None;
        for l in (0..levels).rev() {
            let p = &self.predict[l];
            let mut inputs = vec![f1.levels[l].clone(), a2.levels[l].clone(), a3.levels[l].clone()];
            if p.conditioned {
                let (mv, feat) = coarser.as_ref().expect("coarser level ran first");
                let (_, _, h, w) = f1.levels[l].dims4()?;
                inputs.push(upsample_flow_tensor(mv)?);
                inputs.push(resize(feat, h, w)?);
            }
            let mut x = Tensor::cat(&inputs, 1)?;
            for conv in &p.hidden {
                x = leaky_relu(&conv.forward(&x)?)?;
            }
            let out = p.out.forward(&x)?;
            let mv = out.narrow(1, 0, 2)?;
            let feat = out.narrow(1, 2, self.config.predicted_features)?;
            per_level[l] = Some(mv.clone());
            coarser = Some((mv, feat));
        }
        let per_level: Vec<Tensor> = per_level.into_iter().map(|v| v.expect("every level predicted")).collect();
        Ok(MvPrediction {
            mv: per_level[0].clone(),
            per_level,
        })
    }
}

/// Warps the pyramids of `v̂_{t-3}` and `v̂_{t-2}` towards `v̂_{t-1}` at every level:
/// `p2` by `v1`, `p3` by `v1 + warp(v2, v1)`, with flows downsampled per level.
pub fn align_pyramids(
    p3: &FeaturePyramid,
    p2: &FeaturePyramid,
    v1: &Tensor,
    v2: &Tensor,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    if p3.levels.len() != p2.levels.len() {
        return Err(Error::Shape(format!(
            "pyramids with {} and {} levels",
            p3.levels.len(),
            p2.levels.len()
        )));
    }
    let mut v1l = v1.clone();
    let mut v2l = v2.clone();
    let mut out3 = Vec::with_capacity(p3.levels.len());
    let mut out2 = Vec::with_capacity(p2.levels.len());
    for l in 0..p3.levels.len() {
        if l > 0 {
            v1l = downsample_flow_tensor(&v1l)?;
            v2l = downsample_flow_tensor(&v2l)?;
        }
        let chain = warp_chain(&v1l, std::slice::from_ref(&v2l))?;
        out2.push(bilinear_warp(&p2.levels[l], &chain.flows[0])?);
        out3.push(bilinear_warp(&p3.levels[l], &chain.flows[1])?);
    }
    Ok((FeaturePyramid { levels: out3 }, FeaturePyramid { levels: out2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeros;

    fn small() -> MamvpConfig {
        MamvpConfig {
            channels: vec![4, 6, 6, 6],
            predictor_width: 8,
            predictor_depth: 3,
            predicted_features: 4,
        }
    }

    #[test]
    fn pyramid_sizes_and_channels() {
        let mut ps = ParamStore::new("mamvp", 0);
        let net = Mamvp::new(&mut ps, small()).unwrap();
        let mv = (zeros(&[1, 2, 64, 64]).unwrap() + 0.5).unwrap();
        let p = net.extract_mv_pyramid(&mv).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 4, 64, 64], vec![1, 6, 32, 32], vec![1, 6, 16, 16], vec![1, 6, 8, 8]]);
        assert!(net.extract_mv_pyramid(&zeros(&[1, 2, 4, 64]).unwrap()).is_err());
        assert!(!net.is_conditioned(3));
        assert!((0..3).all(|l| net.is_conditioned(l)));
    }

    #[test]
    fn zero_flows_leave_pyramids_unchanged() {
        let mut ps = ParamStore::new("mamvp", 1);
        let net = Mamvp::new(&mut ps, small()).unwrap();
        let mv = crate::nn::seeded_uniform(&[1, 2, 32, 32], -1.0, 1.0, 3).unwrap();
        let p = net.extract_mv_pyramid(&mv).unwrap();
        let z = zeros(&[1, 2, 32, 32]).unwrap();
        let (a3, a2) = align_pyramids(&p, &p, &z, &z).unwrap();
        for l in 0..4 {
            for a in [&a3, &a2] {
                let d = (&a.levels[l] - &p.levels[l]).unwrap().abs().unwrap().max_all().unwrap();
                assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn prediction_is_zero_at_init_with_every_level() {
        let mut ps = ParamStore::new("mamvp", 2);
        let net = Mamvp::new(&mut ps, small()).unwrap();
        let v = (zeros(&[1, 2, 32, 32]).unwrap() + 1.0).unwrap();
        let out = net.forward(&[v.clone(), v.clone(), v]).unwrap();
        assert_eq!(out.per_level.len(), 4);
        assert_eq!(out.mv.dims(), &[1, 2, 32, 32]);
        assert_eq!(out.mv.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }
}
