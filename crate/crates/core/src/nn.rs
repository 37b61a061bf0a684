//! Parameter storage and the small layer vocabulary shared by every network.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Named parameters of one network module.
///
/// Layers hold clones of the module's `Var`s plus a shared freeze flag. A frozen
/// module hands out detached tensors, so backprop neither tracks nor computes
/// gradients for its weights while gradients still flow through its activations.
pub struct ParamStore {
    name: String,
    vars: BTreeMap<String, Var>,
    frozen: Arc<AtomicBool>,
    rng: ChaCha8Rng,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("name", &self.name)
            .field("vars", &self.vars.len())
            .field("frozen", &self.is_frozen())
            .finish()
    }
}

/// Read access to a parameter honoring the module's freeze flag.
#[derive(Clone)]
pub struct Param {
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    pub fn get(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_detached_tensor()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }
}

impl ParamStore {
    pub fn new(name: &str, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(seed.to_le_bytes());
        let digest = h.finalize();
        let mut s = [0u8; 32];
        s.copy_from_slice(&digest);
        Self {
            name: name.to_string(),
            vars: BTreeMap::new(),
            frozen: Arc::new(AtomicBool::new(false)),
            rng: ChaCha8Rng::from_seed(s),
            device: Device::Cpu,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.store(frozen, Ordering::Relaxed);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn register(&mut self, key: &str, data: Vec<f32>, shape: &[usize]) -> Result<Param> {
        if self.vars.contains_key(key) {
            return Err(Error::Config(format!("duplicate parameter {}.{key}", self.name)));
        }
        let var = Var::from_vec(data, shape, &self.device)?;
        self.vars.insert(key.to_string(), var.clone());
        Ok(Param {
            var,
            frozen: self.frozen.clone(),
        })
    }

    pub fn uniform(&mut self, key: &str, shape: &[usize], bound: f64) -> Result<Param> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        self.register(key, data, shape)
    }

    pub fn constant(&mut self, key: &str, shape: &[usize], value: f32) -> Result<Param> {
        let n: usize = shape.iter().product();
        self.register(key, vec![value; n], shape)
    }

    pub fn from_values(&mut self, key: &str, shape: &[usize], data: Vec<f32>) -> Result<Param> {
        self.register(key, data, shape)
    }

    /// Raw little-endian bytes of every parameter in key order.
    pub fn snapshot(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (k, v) in &self.vars {
            out.extend_from_slice(k.as_bytes());
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn checksum(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        h.update(self.snapshot()?);
        Ok(h.finalize().into())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect();
        candle_core::safetensors::save(&map.into_iter().collect(), path)?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.assign(&tensors, &path.display().to_string())
    }

    pub fn assign(
        &self,
        tensors: &std::collections::HashMap<String, Tensor>,
        origin: &str,
    ) -> Result<()> {
        for (k, v) in &self.vars {
            let t = tensors.get(k).ok_or_else(|| {
                Error::ModelMismatch(format!("{origin}: missing parameter {}.{k}", self.name))
            })?;
            if t.dims() != v.dims() {
                return Err(Error::ModelMismatch(format!(
                    "{origin}: {}.{k} has shape {:?}, expected {:?}",
                    self.name,
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(DType::F32)?)?;
        }
        if tensors.len() != self.vars.len() {
            return Err(Error::ModelMismatch(format!(
                "{origin}: {} tensors for {} parameters of {}",
                tensors.len(),
                self.vars.len(),
                self.name
            )));
        }
        Ok(())
    }

    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let map = other
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect();
        self.assign(&map, other.name())
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::leaky_relu(x, LEAKY_SLOPE)?)
}

/// How a convolution's weights are initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-style uniform for layers followed by a (leaky) ReLU.
    He,
    /// Plain fan-in scaling for linear output layers.
    Linear,
    /// All-zero weights and bias.
    Zero,
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Param,
    in_ch: usize,
    out_ch: usize,
    geom: ConvGeometry,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        key: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        init: Init,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let shape = [out_ch, in_ch, kernel, kernel];
        let weight = match init {
            Init::He => ps.uniform(
                &format!("{key}.weight"),
                &shape,
                (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt(),
            )?,
            Init::Linear => ps.uniform(&format!("{key}.weight"), &shape, (1.0 / fan_in).sqrt())?,
            Init::Zero => ps.constant(&format!("{key}.weight"), &shape, 0.0)?,
        };
        let bias = ps.constant(&format!("{key}.bias"), &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            geom: ConvGeometry {
                kernel,
                stride,
                padding: dilation * (kernel - 1) / 2,
                dilation,
            },
        })
    }

    /// Stride-1, same-padded 3x3 convolution.
    pub fn same3(ps: &mut ParamStore, key: &str, i: usize, o: usize, init: Init) -> Result<Self> {
        Self::new(ps, key, i, o, 3, 1, 1, init)
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> &Param {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        Ok(kernels::conv2d(x, &self.weight.get(), &self.bias.get(), self.geom)?)
    }
}

/// Rearranges `(N, 4C, H, W)` into `(N, C, 2H, 2W)`.
pub fn depth_to_space2(x: &Tensor) -> Result<Tensor> {
    let (n, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    let x = x.reshape((n * c, 2, 2, h, w))?;
    let x = x.permute((0, 3, 1, 4, 2))?;
    Ok(x.contiguous()?.reshape((n, c, 2 * h, 2 * w))?)
}

/// Learned 2x upsampling: convolution at the coarse grid followed by pixel shuffle.
#[derive(Clone)]
pub struct UpConv {
    conv: Conv2d,
}

impl UpConv {
    pub fn new(
        ps: &mut ParamStore,
        key: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, key, in_ch, out_ch * 4, kernel, 1, 1, init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depth_to_space2(&self.conv.forward(x)?)
    }
}

/// Generalized divisive normalization and its inverse.
#[derive(Clone)]
pub struct Gdn {
    beta: Param,
    gamma: Param,
    channels: usize,
    inverse: bool,
}

const GDN_EPS: f64 = 1e-6;

impl Gdn {
    pub fn new(ps: &mut ParamStore, key: &str, channels: usize, inverse: bool) -> Result<Self> {
        let beta = ps.constant(&format!("{key}.beta"), &[channels], 1.0)?;
        let mut g = vec![1e-3f32; channels * channels];
        for i in 0..channels {
            g[i * channels + i] = 0.1f32.sqrt();
        }
        let gamma = ps.from_values(&format!("{key}.gamma"), &[channels, channels], g)?;
        Ok(Self {
            beta,
            gamma,
            channels,
            inverse,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("gdn expects {} channels, got {c}", self.channels)));
        }
        let beta = (self.beta.get().sqr()? + GDN_EPS)?.reshape((1, c, 1))?;
        let gamma = self.gamma.get().sqr()?;
        let flat = x.reshape((n, c, h * w))?;
        let norm = gamma.broadcast_matmul(&flat.sqr()?)?.broadcast_add(&beta)?.sqrt()?;
        let y = if self.inverse {
            (flat * norm)?
        } else {
            (flat / norm)?
        };
        Ok(y.reshape((n, c, h, w))?)
    }
}

/// Two 3x3 convolutions with a ReLU between them and an identity skip.
#[derive(Clone)]
pub struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, key: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::same3(ps, &format!("{key}.a"), ch, ch, Init::He)?,
            b: Conv2d::same3(ps, &format!("{key}.b"), ch, ch, Init::Linear)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.a.forward(x)?.relu()?;
        Ok((self.b.forward(&y)? + x)?)
    }
}

/// The two-layer feature extractor applied to frames, MV fields and residuals.
#[derive(Clone)]
pub struct FeatureNet {
    a: Conv2d,
    b: Conv2d,
}

impl FeatureNet {
    pub fn new(ps: &mut ParamStore, key: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::same3(ps, &format!("{key}.0"), in_ch, out_ch, Init::He)?,
            b: Conv2d::same3(ps, &format!("{key}.1"), out_ch, out_ch, Init::He)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        leaky_relu(&self.b.forward(&leaky_relu(&self.a.forward(x)?)?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.b.out_channels()
    }

    pub(crate) fn layers(&self) -> (&Conv2d, &Conv2d) {
        (&self.a, &self.b)
    }
}

/// Encoder/decoder with concatenation skips and residual blocks at every scale.
///
/// `widths[s]` is the channel count at scale `s` (scale 0 = full resolution);
/// the number of scales is `widths.len()`.
#[derive(Clone)]
pub struct UNet {
    enc_in: Vec<Conv2d>,
    enc_blocks: Vec<ResBlock>,
    dec_in: Vec<Conv2d>,
    dec_blocks: Vec<ResBlock>,
    widths: Vec<usize>,
}

impl UNet {
    pub fn new(ps: &mut ParamStore, key: &str, in_ch: usize, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("unet needs at least one scale".into()));
        }
        let mut enc_in = Vec::new();
        let mut enc_blocks = Vec::new();
        for (s, &wd) in widths.iter().enumerate() {
            let (cin, stride) = if s == 0 { (in_ch, 1) } else { (widths[s - 1], 2) };
            enc_in.push(Conv2d::new(ps, &format!("{key}.enc{s}"), cin, wd, 3, stride, 1, Init::He)?);
            enc_blocks.push(ResBlock::new(ps, &format!("{key}.enc{s}.res"), wd)?);
        }
        let mut dec_in = Vec::new();
        let mut dec_blocks = Vec::new();
        for s in (0..widths.len().saturating_sub(1)).rev() {
            let cin = widths[s + 1] + widths[s];
            dec_in.push(Conv2d::same3(ps, &format!("{key}.dec{s}"), cin, widths[s], Init::He)?);
            dec_blocks.push(ResBlock::new(ps, &format!("{key}.dec{s}.res"), widths[s])?);
        }
        Ok(Self {
            enc_in,
            enc_blocks,
            dec_in,
            dec_blocks,
            widths: widths.to_vec(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.widths[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.widths.len());
        let mut h = x.clone();
        for (conv, block) in self.enc_in.iter().zip(&self.enc_blocks) {
            h = block.forward(&leaky_relu(&conv.forward(&h)?)?)?;
            skips.push(h.clone());
        }
        skips.pop();
        for (conv, block) in self.dec_in.iter().zip(&self.dec_blocks) {
            let skip = skips.pop().expect("one skip per decoder stage");
            let (_, _, sh, sw) = skip.dims4()?;
            let up = kernels::resize_bilinear(&h, sh, sw)?;
            let cat = Tensor::cat(&[&up, &skip], 1)?;
            h = block.forward(&leaky_relu(&conv.forward(&cat)?)?)?;
        }
        Ok(h)
    }
}

pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, DType::F32, &Device::Cpu)?)
}

/// Uniform `[lo, hi)` tensor from a seeded generator.
pub fn seeded_uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

pub fn scalar_f32(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.sum_all()?.to_scalar::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn depth_to_space_places_subpixels() {
        // Channel k of the 4C input lands at offset (k / 2, k % 2) of each 2x2 cell.
        let x = Tensor::from_vec((0..16).map(|v| v as f32).collect::<Vec<_>>(), (1, 4, 2, 2), &Device::Cpu)
            .unwrap();
        let y = depth_to_space2(&x).unwrap();
        let rows = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(rows[0], vec![0.0, 4.0, 1.0, 5.0]);
        assert_eq!(rows[1], vec![8.0, 12.0, 9.0, 13.0]);
        assert_eq!(rows[2], vec![2.0, 6.0, 3.0, 7.0]);
    }

    #[test]
    fn igdn_inverts_gdn_at_init_for_small_inputs() {
        let mut ps = ParamStore::new("gdn", 0);
        let g = Gdn::new(&mut ps, "g", 4, false).unwrap();
        let ig = Gdn::new(&mut ps, "ig", 4, true).unwrap();
        let x = (ramp(&[1, 4, 5, 5]) * 0.6).unwrap();
        let back = ig.forward(&g.forward(&x).unwrap()).unwrap();
        let err = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(err < 1e-3, "max error {err}");
    }

    #[test]
    fn freeze_detaches_parameters() {
        let mut ps = ParamStore::new("f", 1);
        let conv = Conv2d::same3(&mut ps, "c", 2, 2, Init::He).unwrap();
        let x = ramp(&[1, 2, 4, 4]);
        let loss = conv.forward(&x).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(conv.weight().var().as_tensor()).is_some());
        ps.set_frozen(true);
        let loss = conv.forward(&x).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(conv.weight().var().as_tensor()).is_none());
    }

    #[test]
    fn unet_preserves_spatial_size() {
        let mut ps = ParamStore::new("u", 2);
        let net = UNet::new(&mut ps, "u", 3, &[4, 6, 8]).unwrap();
        let y = net.forward(&ramp(&[1, 3, 16, 12])).unwrap();
        assert_eq!(y.dims(), &[1, 4, 16, 12]);
    }
}
