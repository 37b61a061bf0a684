//! The MVD auto-encoder (factorized prior) and the residual auto-encoder (hyperprior).

use candle_core::{Device, Tensor};
use rand::Rng;

use crate::entropy::{
    self, factorized::channel_ids, FactorizedPrior, GaussianConditional, QuantMode,
    RateEstimate,
};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, Gdn, Init, ParamStore, UpConv};

/// Total spatial reduction of the main analysis transform.
pub const LATENT_STRIDE: usize = 16;
/// Extra reduction of the hyper-analysis transform.
pub const HYPER_STRIDE: usize = 4;

/// Four stride-2 5x5 stages with GDN between them.
struct Analysis {
    convs: Vec<Conv2d>,
    gdns: Vec<Gdn>,
}

impl Analysis {
    fn new(ps: &mut ParamStore, key: &str, input: usize, hidden: usize, latent: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut gdns = Vec::new();
        for s in 0..4 {
            let cin = if s == 0 { input } else { hidden };
            let cout = if s == 3 { latent } else { hidden };
            convs.push(Conv2d::new(ps, &format!("{key}.conv{s}"), cin, cout, 5, 2, 1, Init::Linear)?);
            if s < 3 {
                gdns.push(Gdn::new(ps, &format!("{key}.gdn{s}"), hidden, false)?);
            }
        }
        Ok(Self { convs, gdns })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (s, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if let Some(g) = self.gdns.get(s) {
                h = g.forward(&h)?;
            }
        }
        Ok(h)
    }
}

/// Four 2x sub-pixel upsampling stages with IGDN between them and a linear output.
struct Synthesis {
    ups: Vec<UpConv>,
    igdns: Vec<Gdn>,
}

impl Synthesis {
    fn new(ps: &mut ParamStore, key: &str, latent: usize, hidden: usize, output: usize) -> Result<Self> {
        let mut ups = Vec::new();
        let mut igdns = Vec::new();
        for s in 0..4 {
            let cin = if s == 0 { latent } else { hidden };
            let cout = if s == 3 { output } else { hidden };
            ups.push(UpConv::new(ps, &format!("{key}.up{s}"), cin, cout, 3, Init::Linear)?);
            if s < 3 {
                igdns.push(Gdn::new(ps, &format!("{key}.igdn{s}"), hidden, true)?);
            }
        }
        Ok(Self { ups, igdns })
    }

    fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let mut h = y.clone();
        for (s, up) in self.ups.iter().enumerate() {
            h = up.forward(&h)?;
            if let Some(g) = self.igdns.get(s) {
                h = g.forward(&h)?;
            }
        }
        Ok(h)
    }
}

fn check_divisible(x: &Tensor, by: usize) -> Result<(usize, usize, usize)> {
    let (n, _, h, w) = x.dims4()?;
    if h % by != 0 || w % by != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("{h}x{w} is not a multiple of {by}")));
    }
    Ok((n, h, w))
}

fn symbols_to_tensor(symbols: &[i32], shape: (usize, usize, usize, usize)) -> Result<Tensor> {
    let v: Vec<f32> = symbols.iter().map(|&s| s as f32).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Training-time codec output.
pub struct CodecTrainOutput {
    pub recon: Tensor,
    pub rate: RateEstimate,
}

/// Inference-time codec output with the real payloads.
pub struct CodecEncoded {
    pub recon: Tensor,
    pub payloads: Vec<Vec<u8>>,
    /// Ideal bits under the frozen tables.
    pub estimated_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MvdCodecConfig {
    pub hidden: usize,
    pub latent: usize,
}

impl Default for MvdCodecConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            latent: 128,
        }
    }
}

pub struct MvdCodec {
    analysis: Analysis,
    synthesis: Synthesis,
    prior: FactorizedPrior,
    config: MvdCodecConfig,
}

impl MvdCodec {
    pub fn new(ps: &mut ParamStore, config: MvdCodecConfig) -> Result<Self> {
        Ok(Self {
            analysis: Analysis::new(ps, "ga", 2, config.hidden, config.latent)?,
            synthesis: Synthesis::new(ps, "gs", config.latent, config.hidden, 2)?,
            prior: FactorizedPrior::new(ps, "prior", config.latent)?,
            config,
        })
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    pub fn forward_train(&self, d: &Tensor, rng: &mut impl Rng) -> Result<CodecTrainOutput> {
        check_divisible(d, LATENT_STRIDE)?;
        let m = self.analysis.forward(d)?;
        let m_tilde = entropy::quantize(&m, QuantMode::Noise, rng)?;
        Ok(CodecTrainOutput {
            recon: self.synthesis.forward(&m_tilde)?,
            rate: self.prior.estimate_bits(&m_tilde)?,
        })
    }

    /// Noise-free reconstruction through rounding, without producing a payload.
    pub fn forward_round(&self, d: &Tensor) -> Result<CodecTrainOutput> {
        check_divisible(d, LATENT_STRIDE)?;
        let m_hat = entropy::round_ties_even(&self.analysis.forward(d)?)?;
        Ok(CodecTrainOutput {
            recon: self.synthesis.forward(&m_hat)?,
            rate: self.prior.estimate_bits(&m_hat)?,
        })
    }

    pub fn encode(&self, d: &Tensor) -> Result<CodecEncoded> {
        check_divisible(d, LATENT_STRIDE)?;
        let m_hat = entropy::round_ties_even(&self.analysis.forward(d)?)?;
        let (n, c, h, w) = m_hat.dims4()?;
        let symbols = entropy::to_symbols(&m_hat)?;
        let ids = channel_ids(n, c, h, w);
        let tables = self.prior.tables()?;
        Ok(CodecEncoded {
            recon: self.decode_latent(&symbols, (n, c, h, w))?,
            payloads: vec![entropy::encode_symbols(&symbols, &ids, &tables)?],
            estimated_bits: tables.bits(&symbols, &ids)?,
        })
    }

    fn decode_latent(&self, symbols: &[i32], shape: (usize, usize, usize, usize)) -> Result<Tensor> {
        self.synthesis.forward(&symbols_to_tensor(symbols, shape)?)
    }

    /// Reconstructs the `(1, 2, height, width)` field from a payload.
    pub fn decode(&self, payload: &[u8], height: usize, width: usize) -> Result<Tensor> {
        let shape = (1, self.config.latent, height / LATENT_STRIDE, width / LATENT_STRIDE);
        let ids = channel_ids(shape.0, shape.1, shape.2, shape.3);
        let symbols = entropy::decode_symbols(payload, &ids, &*self.prior.tables()?)?;
        self.decode_latent(&symbols, shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ResCodecConfig {
    pub hidden: usize,
    pub latent: usize,
    pub hyper: usize,
}

impl Default for ResCodecConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            latent: 192,
            hyper: 128,
        }
    }
}

struct HyperAnalysis {
    a: Conv2d,
    b: Conv2d,
    c: Conv2d,
}

struct HyperSynthesis {
    a: UpConv,
    b: UpConv,
    c: Conv2d,
}

pub struct ResidualCodec {
    analysis: Analysis,
    synthesis: Synthesis,
    hyper_a: HyperAnalysis,
    hyper_s: HyperSynthesis,
    z_prior: FactorizedPrior,
    gaussian: GaussianConditional,
    config: ResCodecConfig,
}

impl ResidualCodec {
    pub fn new(ps: &mut ParamStore, config: ResCodecConfig) -> Result<Self> {
        let (n, m, z) = (config.hidden, config.latent, config.hyper);
        Ok(Self {
            analysis: Analysis::new(ps, "ga", 3, n, m)?,
            synthesis: Synthesis::new(ps, "gs", m, n, 3)?,
            hyper_a: HyperAnalysis {
                a: Conv2d::new(ps, "ha.0", m, n, 3, 1, 1, Init::He)?,
                b: Conv2d::new(ps, "ha.1", n, n, 5, 2, 1, Init::He)?,
                c: Conv2d::new(ps, "ha.2", n, z, 5, 2, 1, Init::Linear)?,
            },
            hyper_s: HyperSynthesis {
                a: UpConv::new(ps, "hs.0", z, n, 3, Init::He)?,
                b: UpConv::new(ps, "hs.1", n, n, 3, Init::He)?,
                c: Conv2d::new(ps, "hs.2", n, m, 3, 1, 1, Init::Linear)?,
            },
            z_prior: FactorizedPrior::new(ps, "prior_z", z)?,
            gaussian: GaussianConditional::new(),
            config,
        })
    }

    pub fn z_prior(&self) -> &FactorizedPrior {
        &self.z_prior
    }

    pub fn gaussian(&self) -> &GaussianConditional {
        &self.gaussian
    }

    fn hyper_analysis(&self, y: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.hyper_a.a.forward(&y.abs()?)?)?;
        let h = leaky_relu(&self.hyper_a.b.forward(&h)?)?;
        self.hyper_a.c.forward(&h)
    }

    /// Gaussian scales for the main latent, each at least the scale floor.
    pub fn scales(&self, z_hat: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.hyper_s.a.forward(z_hat)?)?;
        let h = leaky_relu(&self.hyper_s.b.forward(&h)?)?;
        GaussianConditional::scales_from_raw(&self.hyper_s.c.forward(&h)?)
    }

    pub fn forward_train(&self, r: &Tensor, rng: &mut impl Rng) -> Result<CodecTrainOutput> {
        check_divisible(r, LATENT_STRIDE * HYPER_STRIDE)?;
        let y = self.analysis.forward(r)?;
        let z = self.hyper_analysis(&y)?;
        let z_tilde = entropy::quantize(&z, QuantMode::Noise, rng)?;
        let sigma = self.scales(&z_tilde)?;
        let y_tilde = entropy::quantize(&y, QuantMode::Noise, rng)?;
        let ry = GaussianConditional::estimate_bits(&y_tilde, &sigma)?;
        let rz = self.z_prior.estimate_bits(&z_tilde)?;
        Ok(CodecTrainOutput {
            recon: self.synthesis.forward(&y_tilde)?,
            rate: RateEstimate {
                bits: (ry.bits + rz.bits)?,
                clamped: ry.clamped + rz.clamped,
            },
        })
    }

    pub fn forward_round(&self, r: &Tensor) -> Result<CodecTrainOutput> {
        check_divisible(r, LATENT_STRIDE * HYPER_STRIDE)?;
        let y = self.analysis.forward(r)?;
        let z_hat = entropy::round_ties_even(&self.hyper_analysis(&y)?)?;
        let sigma = self.scales(&z_hat)?;
        let y_hat = entropy::round_ties_even(&y)?;
        let ry = GaussianConditional::estimate_bits(&y_hat, &sigma)?;
        let rz = self.z_prior.estimate_bits(&z_hat)?;
        Ok(CodecTrainOutput {
            recon: self.synthesis.forward(&y_hat)?,
            rate: RateEstimate {
                bits: (ry.bits + rz.bits)?,
                clamped: ry.clamped + rz.clamped,
            },
        })
    }

    /// Payloads are `[y stream, z stream]`.
    pub fn encode(&self, r: &Tensor) -> Result<CodecEncoded> {
        check_divisible(r, LATENT_STRIDE * HYPER_STRIDE)?;
        let y = self.analysis.forward(r)?;
        let z_hat = entropy::round_ties_even(&self.hyper_analysis(&y)?)?;
        let (zn, zc, zh, zw) = z_hat.dims4()?;
        let z_symbols = entropy::to_symbols(&z_hat)?;
        let z_ids = channel_ids(zn, zc, zh, zw);
        let z_tables = self.z_prior.tables()?;
        let z_payload = entropy::encode_symbols(&z_symbols, &z_ids, &z_tables)?;

        let z_dec = symbols_to_tensor(&z_symbols, (zn, zc, zh, zw))?;
        let y_ids = self.y_table_ids(&z_dec)?;
        let y_hat = entropy::round_ties_even(&y)?;
        let y_symbols = entropy::to_symbols(&y_hat)?;
        let y_tables = self.gaussian.tables();
        let y_payload = entropy::encode_symbols(&y_symbols, &y_ids, &y_tables)?;
        let estimated_bits = y_tables.bits(&y_symbols, &y_ids)? + z_tables.bits(&z_symbols, &z_ids)?;
        Ok(CodecEncoded {
            recon: self.synthesis.forward(&symbols_to_tensor(&y_symbols, y_hat.dims4()?)?)?,
            payloads: vec![y_payload, z_payload],
            estimated_bits,
        })
    }

    fn y_table_ids(&self, z_hat: &Tensor) -> Result<Vec<usize>> {
        let sigma = self.scales(z_hat)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(self.gaussian.indexes(&sigma))
    }

    pub fn decode(&self, y_payload: &[u8], z_payload: &[u8], height: usize, width: usize) -> Result<Tensor> {
        let (yh, yw) = (height / LATENT_STRIDE, width / LATENT_STRIDE);
        let zshape = (1, self.config.hyper, yh / HYPER_STRIDE, yw / HYPER_STRIDE);
        let z_ids = channel_ids(zshape.0, zshape.1, zshape.2, zshape.3);
        let z_symbols = entropy::decode_symbols(z_payload, &z_ids, &*self.z_prior.tables()?)?;
        let y_ids = self.y_table_ids(&symbols_to_tensor(&z_symbols, zshape)?)?;
        let y_symbols = entropy::decode_symbols(y_payload, &y_ids, &self.gaussian.tables())?;
        self.synthesis
            .forward(&symbols_to_tensor(&y_symbols, (1, self.config.latent, yh, yw))?)
    }
}
