//! Post-decoding refinement of the MV field and of the residual.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmc::{warp_references, MAX_REFERENCES};
use crate::nn::{leaky_relu, Conv2d, FeatureNet, Init, ParamStore, UNet, LEAKY_SLOPE};
use crate::warp::warp_chain;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MvRefineConfig {
    pub features: usize,
    pub width: usize,
    pub dilations: Vec<usize>,
}

impl Default for MvRefineConfig {
    fn default() -> Self {
        Self {
            features: 32,
            width: 64,
            dilations: vec![1, 2, 4, 8, 4, 2, 1, 1],
        }
    }
}

/// `v̂_t = H_mvr(...) + v̂′_t` over chain-warped features of the MV history.
pub struct MvRefine {
    history: [FeatureNet; 3],
    current: FeatureNet,
    frame: FeatureNet,
    trunk: Vec<Conv2d>,
}

impl MvRefine {
    pub fn new(ps: &mut ParamStore, config: MvRefineConfig) -> Result<Self> {
        if config.dilations.is_empty() {
            return Err(Error::Config("mv refine needs at least one layer".into()));
        }
        let c = config.features;
        let history = [
            FeatureNet::new(ps, "hist1", 2, c)?,
            FeatureNet::new(ps, "hist2", 2, c)?,
            FeatureNet::new(ps, "hist3", 2, c)?,
        ];
        let current = FeatureNet::new(ps, "current", 2, c)?;
        let frame = FeatureNet::new(ps, "frame", 3, c)?;
        let mut trunk = Vec::new();
        let mut cin = 5 * c;
        let last = config.dilations.len() - 1;
        for (k, &d) in config.dilations.iter().enumerate() {
            let (cout, init) = if k == last { (2, Init::Zero) } else { (config.width, Init::He) };
            trunk.push(Conv2d::new(ps, &format!("trunk.{k}"), cin, cout, 3, 1, d, init)?);
            cin = cout;
        }
        Ok(Self {
            history,
            current,
            frame,
            trunk,
        })
    }

    /// `mv_history` is `[v̂_{t-1}, v̂_{t-2}, v̂_{t-3}]`.
    pub fn forward(&self, v_prime: &Tensor, mv_history: &[Tensor; 3], prev_frame: &Tensor) -> Result<Tensor> {
        let chain = warp_chain(v_prime, &mv_history[..2])?;
        let mut inputs = Vec::with_capacity(5);
        for i in (0..3).rev() {
            let f = self.history[i].forward(&mv_history[i])?;
            inputs.push(crate::warp::bilinear_warp(&f, &chain.flows[i])?);
        }
        inputs.push(self.current.forward(v_prime)?);
        inputs.push(self.frame.forward(prev_frame)?);
        let mut x = Tensor::cat(&inputs, 1)?;
        let last = self.trunk.len() - 1;
        for (k, conv) in self.trunk.iter().enumerate() {
            x = conv.forward(&x)?;
            if k != last {
                x = leaky_relu(&x)?;
            }
        }
        Ok((x + v_prime)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResRefineConfig {
    /// Feature channels per input; at least 6.
    pub features: usize,
    pub unet: Vec<usize>,
}

impl Default for ResRefineConfig {
    fn default() -> Self {
        Self {
            features: 32,
            unet: vec![48, 48, 48],
        }
    }
}

/// `r̂_t = H_res(f^w_{x̂_{t-4..t-1}}, f_{x̄_t}, f_{r̂′_t})` with no additive skip.
///
/// The output layer reads the U-Net trunk together with the residual features.
/// At initialization the residual features carry `±r̂′` through the identity
/// centre taps of their first six channels and the output layer recombines them,
/// so the untrained network returns `r̂′` up to rounding.
pub struct ResRefine {
    refs: FeatureNet,
    prediction: FeatureNet,
    residual: FeatureNet,
    unet: UNet,
    out: Conv2d,
}

fn set(p: &crate::nn::Param, data: Vec<f32>) -> Result<()> {
    let shape = p.var().as_tensor().shape().clone();
    p.var().set(&Tensor::from_vec(data, shape, &Device::Cpu)?)?;
    Ok(())
}

impl ResRefine {
    pub fn new(ps: &mut ParamStore, config: ResRefineConfig) -> Result<Self> {
        let c = config.features;
        if c < 6 {
            return Err(Error::Config("residual refine needs at least 6 feature channels".into()));
        }
        let refs = FeatureNet::new(ps, "refs", 3, c)?;
        let prediction = FeatureNet::new(ps, "prediction", 3, c)?;
        let residual = FeatureNet::new(ps, "residual", 3, c)?;
        let unet = UNet::new(ps, "unet", 6 * c, &config.unet)?;
        let trunk = unet.out_channels();
        let out = Conv2d::same3(ps, "out", trunk + c, 3, Init::Zero)?;
        let net = Self {
            refs,
            prediction,
            residual,
            unet,
            out,
        };
        net.init_pass_through()?;
        Ok(net)
    }

    fn init_pass_through(&self) -> Result<()> {
        let (a, b) = self.residual.layers();
        let centre = |cout: usize, cin: usize, taps: &[(usize, usize, f32)], w: &crate::nn::Param| -> Result<()> {
            let mut data = w.var().as_tensor().flatten_all()?.to_vec1::<f32>()?;
            for o in 0..6 {
                data[o * cin * 9..(o + 1) * cin * 9].fill(0.0);
            }
            for &(o, i, v) in taps {
                data[(o * cin + i) * 9 + 4] = v;
            }
            debug_assert_eq!(data.len(), cout * cin * 9);
            set(w, data)
        };
        let (ca, cb) = (a.out_channels(), b.out_channels());
        let first: Vec<_> = (0..3).flat_map(|ch| [(2 * ch, ch, 1.0), (2 * ch + 1, ch, -1.0)]).collect();
        centre(ca, 3, &first, a.weight())?;
        let second: Vec<_> = (0..6).map(|k| (k, k, 1.0)).collect();
        centre(cb, ca, &second, b.weight())?;
        for conv in [a, b] {
            let mut bias = conv.bias().var().as_tensor().to_vec1::<f32>()?;
            bias[..6].fill(0.0);
            set(conv.bias(), bias)?;
        }
        let cin = self.out.in_channels();
        let base = cin - ca;
        let gain = (1.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)) as f32;
        let mut w = vec![0f32; 3 * cin * 9];
        for ch in 0..3 {
            w[(ch * cin + base + 2 * ch) * 9 + 4] = gain;
            w[(ch * cin + base + 2 * ch + 1) * 9 + 4] = -gain;
        }
        set(self.out.weight(), w)
    }

    /// `frames` are `x̂_{t-1..t-4}`; `flows` are the motion-compensation chain flows.
    pub fn forward(
        &self,
        frames: &[Tensor; MAX_REFERENCES],
        flows: &[Tensor],
        references: usize,
        prediction: &Tensor,
        residual: &Tensor,
    ) -> Result<Tensor> {
        let feats = frames.iter().map(|f| self.refs.forward(f)).collect::<Result<Vec<_>>>()?;
        let mut inputs = warp_references(&feats, flows, references)?;
        inputs.reverse();
        inputs.push(self.prediction.forward(prediction)?);
        let fr = self.residual.forward(residual)?;
        inputs.push(fr.clone());
        let trunk = self.unet.forward(&Tensor::cat(&inputs, 1)?)?;
        self.out.forward(&Tensor::cat(&[&trunk, &fr], 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmc::reference_flows;

    fn rand(shape: &[usize], seed: u64, scale: f32) -> Tensor {
        crate::nn::seeded_uniform(shape, -scale, scale, seed).unwrap()
    }

    fn max_abs(t: &Tensor) -> f32 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn mv_refine_is_identity_at_init() {
        let mut ps = ParamStore::new("mvr", 0);
        let cfg = MvRefineConfig {
            features: 4,
            width: 8,
            dilations: vec![1, 2, 4, 1],
        };
        let net = MvRefine::new(&mut ps, cfg).unwrap();
        let v = rand(&[1, 2, 16, 16], 1, 4.0);
        let hist = [2, 3, 4].map(|s| rand(&[1, 2, 16, 16], s, 2.0));
        let out = net.forward(&v, &hist, &rand(&[1, 3, 16, 16], 5, 1.0)).unwrap();
        assert_eq!(max_abs(&(out - &v).unwrap()), 0.0);
    }

    fn inputs() -> ([Tensor; 4], Vec<Tensor>, Tensor, Tensor) {
        let frames = [0, 1, 2, 3].map(|s| rand(&[1, 3, 16, 16], s, 1.0));
        let v = rand(&[1, 2, 16, 16], 4, 2.0);
        let hist: Vec<_> = (5..8).map(|s| rand(&[1, 2, 16, 16], s, 2.0)).collect();
        let flows = reference_flows(&v, &hist).unwrap();
        (frames, flows, rand(&[1, 3, 16, 16], 8, 1.0), rand(&[1, 3, 16, 16], 9, 0.3))
    }

    #[test]
    fn residual_refine_passes_residual_through_at_init() {
        let mut ps = ParamStore::new("rr", 0);
        let cfg = ResRefineConfig {
            features: 8,
            unet: vec![8, 8, 8],
        };
        let net = ResRefine::new(&mut ps, cfg).unwrap();
        let (frames, flows, pred, r) = inputs();
        let out = net.forward(&frames, &flows, 4, &pred, &r).unwrap();
        assert_eq!(out.dims(), r.dims());
        assert!(max_abs(&(out - &r).unwrap()) < 1e-6);
    }

    #[test]
    fn residual_refine_has_no_additive_skip() {
        let mut ps = ParamStore::new("rr", 1);
        let cfg = ResRefineConfig {
            features: 8,
            unet: vec![8, 8],
        };
        let net = ResRefine::new(&mut ps, cfg).unwrap();
        for v in ps.vars() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let (frames, flows, pred, r) = inputs();
        let out = net.forward(&frames, &flows, 4, &pred, &r).unwrap();
        assert_eq!(max_abs(&out), 0.0);
    }
}
