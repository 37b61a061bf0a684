//! Motion estimation behind a pluggable handle, with a small built-in
//! coarse-to-fine matcher that can be pretrained on synthetic motion.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::media::{synth_motion_clip, SynthMotion};
use crate::nn::{leaky_relu, Conv2d, Init, Param, ParamStore};
use crate::warp::{bilinear_warp, upsample_flow_tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FlowConfig {
    pub levels: usize,
    /// Search radius in pixels at every level.
    pub radius: usize,
    pub refine_channels: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            radius: 2,
            refine_channels: 16,
        }
    }
}

impl FlowConfig {
    /// Largest displacement the pyramid can represent.
    pub fn max_displacement(&self) -> f32 {
        ((self.radius + 1) * ((1 << self.levels) - 1)) as f32
    }
}

struct LevelRefine {
    a: Conv2d,
    b: Conv2d,
}

/// Per level: warp the reference by the upsampled coarser flow, score a
/// `(2r+1)^2` window of integer displacements by box-filtered SSD, take the
/// soft-argmin, then add a bounded learned correction.
pub struct BuiltinFlow {
    config: FlowConfig,
    log_temperature: Vec<Param>,
    refine: Vec<LevelRefine>,
    offsets: Vec<(f32, f32)>,
}

fn box3(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let s = p.narrow(2, dy, h)?.narrow(3, dx, w)?;
            acc = Some(match acc {
                None => s,
                Some(a) => (a + s)?,
            });
        }
    }
    Ok((acc.expect("nine taps") / 9.0)?)
}

fn constant_flow(n: usize, h: usize, w: usize, d: (f32, f32)) -> Result<Tensor> {
    let mut v = vec![d.0; h * w];
    v.extend(std::iter::repeat_n(d.1, h * w));
    Ok(Tensor::from_vec(v, (1, 2, h, w), &Device::Cpu)?.repeat((n, 1, 1, 1))?)
}

impl BuiltinFlow {
    pub fn new(ps: &mut ParamStore, config: FlowConfig) -> Result<Self> {
        let r = config.radius as i32;
        let offsets: Vec<(f32, f32)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx as f32, dy as f32)))
            .collect();
        let k = offsets.len();
        let mut log_temperature = Vec::new();
        let mut refine = Vec::new();
        for l in 0..config.levels {
            log_temperature.push(ps.constant(&format!("level{l}.log_temperature"), &[1], (0.1f32).ln())?);
            refine.push(LevelRefine {
                a: Conv2d::same3(ps, &format!("level{l}.refine.0"), k + 2, config.refine_channels, Init::He)?,
                b: Conv2d::same3(ps, &format!("level{l}.refine.1"), config.refine_channels, 2, Init::Zero)?,
            });
        }
        Ok(Self {
            config,
            log_temperature,
            refine,
            offsets,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    /// Flows at every level, finest first; `flows[l]` is at `1 / 2^l` resolution.
    pub fn forward(&self, current: &Tensor, reference: &Tensor) -> Result<Vec<Tensor>> {
        let (n, c, h, w) = current.dims4()?;
        if reference.dims() != current.dims() || c != 3 {
            return Err(Error::Shape(format!(
                "flow inputs {:?} and {:?}",
                current.dims(),
                reference.dims()
            )));
        }
        let levels = self.config.levels;
        let unit = 1 << (levels - 1);
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not a multiple of {unit}")));
        }
        let mut cur_pyr = vec![current.clone()];
        let mut ref_pyr = vec![reference.clone()];
        for _ in 1..levels {
            let c = cur_pyr.last().expect("pyramid base").avg_pool2d(2)?;
            let r = ref_pyr.last().expect("pyramid base").avg_pool2d(2)?;
            cur_pyr.push(c);
            ref_pyr.push(r);
        }
        let mut flows = vec![None; levels];
        let mut flow: Option<Tensor> = None;
        for l in (0..levels).rev() {
            let (_, _, lh, lw) = cur_pyr[l].dims4()?;
            let base = match &flow {
                None => Tensor::zeros((n, 2, lh, lw), current.dtype(), &Device::Cpu)?,
                Some(f) => upsample_flow_tensor(f)?,
            };
            let warped = bilinear_warp(&ref_pyr[l], &base)?;
            let mut costs = Vec::with_capacity(self.offsets.len());
            for &d in &self.offsets {
                let shifted = bilinear_warp(&warped, &constant_flow(n, lh, lw, d)?.to_dtype(current.dtype())?)?;
                let ssd = (&cur_pyr[l] - shifted)?.sqr()?.sum_keepdim(1)?;
                costs.push(box3(&ssd)?);
            }
            let cost = Tensor::cat(&costs, 1)?;
            let norm = cost.mean_keepdim(1)?.affine(1.0, 1e-6)?;
            let cost = cost.broadcast_div(&norm)?;
            let t = self.log_temperature[l].get().to_dtype(current.dtype())?.exp()?.reshape((1, 1, 1, 1))?;
            let weights = candle_nn::ops::softmax(&cost.neg()?.broadcast_div(&t)?, 1)?;
            let dx: Vec<f32> = self.offsets.iter().map(|o| o.0).collect();
            let dy: Vec<f32> = self.offsets.iter().map(|o| o.1).collect();
            let k = self.offsets.len();
            let ox = Tensor::from_vec(dx, (1, k, 1, 1), &Device::Cpu)?.to_dtype(current.dtype())?;
            let oy = Tensor::from_vec(dy, (1, k, 1, 1), &Device::Cpu)?.to_dtype(current.dtype())?;
            let delta = Tensor::cat(
                &[weights.broadcast_mul(&ox)?.sum_keepdim(1)?, weights.broadcast_mul(&oy)?.sum_keepdim(1)?],
                1,
            )?;
            let est = (base + delta)?;
            let refine = &self.refine[l];
            let hidden = leaky_relu(&refine.a.forward(&Tensor::cat(&[&est, &cost], 1)?)?)?;
            let f = (est + refine.b.forward(&hidden)?.tanh()?)?;
            flows[l] = Some(f.clone());
            flow = Some(f);
        }
        Ok(flows.into_iter().map(|f| f.expect("every level visited")).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowBackend {
    /// The built-in matcher with its own (pretrained) weights.
    BuiltinPyramid,
    /// Built-in architecture with weights loaded from an external file.
    ExternalPretrained(PathBuf),
}

/// Motion estimator used by the codec.
pub struct FlowEstimatorHandle {
    pub backend: FlowBackend,
    pub trainable: bool,
    net: BuiltinFlow,
    params: ParamStore,
}

impl FlowEstimatorHandle {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new("me", seed);
        let net = BuiltinFlow::new(&mut params, config)?;
        Ok(Self {
            backend: FlowBackend::BuiltinPyramid,
            trainable: false,
            net,
            params,
        })
    }

    pub fn load_external(config: FlowConfig, path: PathBuf) -> Result<Self> {
        let mut h = Self::new(config, 0)?;
        if !path.exists() {
            return Err(Error::BackendUnavailable(format!("no flow weights at {}", path.display())));
        }
        h.params.load(&path)?;
        h.backend = FlowBackend::ExternalPretrained(path);
        Ok(h)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn net(&self) -> &BuiltinFlow {
        &self.net
    }

    /// Backward flow from `current` onto `reference` at full resolution.
    pub fn estimate_flow(&self, current: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let flows = self.net.forward(current, reference)?;
        let v = flows.into_iter().next().expect("at least one level");
        Ok(if self.trainable { v } else { v.detach() })
    }
}

/// Pairs of frames with known flow for pretraining.
pub struct FlowSample {
    pub current: Tensor,
    pub reference: Tensor,
    pub flow: Tensor,
}

/// Random translation/rotation/zoom pairs with magnitudes up to `max_shift`.
pub fn synthetic_flow_samples(count: usize, size: usize, max_shift: f64, seed: u64) -> Result<Vec<FlowSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let motion = SynthMotion {
                translation: (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift)),
                rotation_deg: rng.random_range(-1.5..=1.5),
                zoom: 1.0 + rng.random_range(-0.02..=0.02),
                jitter: 0.0,
            };
            let clip = synth_motion_clip(motion, 2, (size, size), seed.wrapping_mul(7919).wrapping_add(i as u64));
            let flow = clip.flows[1].as_ref().expect("second frame has flow");
            let mut clamped = flow.clone();
            let bound = max_shift as f32 * 1.5 + 2.0;
            for v in &mut clamped {
                *v = v.clamp(-bound, bound);
            }
            Ok(FlowSample {
                current: clip.frames[1].to_tensor()?,
                reference: clip.frames[0].to_tensor()?,
                flow: Tensor::from_vec(clamped, (1, 2, size, size), &Device::Cpu)?,
            })
        })
        .collect()
}

/// Mean endpoint error between two `(N, 2, H, W)` fields.
pub fn endpoint_error(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(((a - b)?.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Fits the built-in matcher on synthetic pairs with an endpoint-error loss.
pub fn pretrain_builtin(
    handle: &mut FlowEstimatorHandle,
    corpus: &[FlowSample],
    steps: usize,
    lr: f64,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::Config("empty flow pretraining corpus".into()));
    }
    handle.params.set_frozen(false);
    let mut opt = AdamW::new(
        handle.params.vars(),
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut smoothed = None;
    let mut initial = None;
    for step in 0..steps {
        let s = &corpus[step % corpus.len()];
        let flows = handle.net.forward(&s.current, &s.reference)?;
        let loss = endpoint_error(&flows[0], &s.flow)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                phase: "flow-pretrain".into(),
                step,
                reason: "non-finite endpoint error".into(),
            });
        }
        let sm = match smoothed {
            None => value,
            Some(p) => 0.9 * p + 0.1 * value,
        };
        smoothed = Some(sm);
        if step == corpus.len().min(steps) - 1 || initial.is_none() && step >= 10 {
            initial.get_or_insert(sm);
        }
        opt.backward_step(&loss)?;
    }
    handle.params.set_frozen(!handle.trainable);
    let final_loss = smoothed.unwrap_or(f64::NAN);
    let initial_loss = initial.unwrap_or(final_loss);
    if final_loss > 2.0 * initial_loss {
        return Err(Error::Divergence {
            phase: "flow-pretrain".into(),
            step: steps,
            reason: format!("smoothed loss rose from {initial_loss:.4} to {final_loss:.4}"),
        });
    }
    Ok(PretrainReport {
        initial_loss,
        final_loss,
        steps,
    })
}
