//! IPPP encode/decode sessions over the container format.
//!
//! Encoder and decoder run the same reconstruction path from the same decoded
//! symbols, so with the deterministic CPU kernels their buffers stay equal.

pub mod buffers;
pub mod container;
pub mod intra;

use std::time::{Duration, Instant};

use candle_core::Tensor;

use crate::error::{Error, Result, Stage, StageExt};
use crate::media::{pad_to_multiple, unpad, Frame, FrameKind, OriginalSize, PAD_MULTIPLE};
use crate::model::{Model, References};

pub use buffers::ReferenceBuffers;
pub use container::{Container, ContainerHeader, FrameUnit};
pub use intra::IntraPlugin;

/// Byte and timing accounting for one coded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStats {
    pub index: usize,
    pub kind: FrameKind,
    /// Serialized unit size, including the kind byte and length fields.
    pub unit_bytes: usize,
    pub mvd_bytes: usize,
    /// `res_y + res_z`.
    pub res_bytes: usize,
    pub intra_bytes: usize,
    pub timings: Vec<(Stage, Duration)>,
}

impl FrameStats {
    fn new(index: usize, unit: &FrameUnit) -> Self {
        let (kind, mvd_bytes, res_bytes, intra_bytes) = match unit {
            FrameUnit::Intra { blob, .. } => (FrameKind::I, 0, 0, blob.len()),
            FrameUnit::P { mvd, res_y, res_z } => (FrameKind::P, mvd.len(), res_y.len() + res_z.len(), 0),
        };
        Self {
            index,
            kind,
            unit_bytes: unit.byte_len(),
            mvd_bytes,
            res_bytes,
            intra_bytes,
            timings: Vec::new(),
        }
    }

    /// Bytes outside the payloads (kind byte and lengths).
    pub fn overhead_bytes(&self) -> usize {
        self.unit_bytes - self.mvd_bytes - self.res_bytes - self.intra_bytes
    }
}

#[derive(Default)]
struct Timer {
    laps: Vec<(Stage, Duration)>,
}

impl Timer {
    fn run<T>(&mut self, stage: Stage, index: usize, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().at_stage(stage, index)?;
        self.laps.push((stage, start.elapsed()));
        Ok(out)
    }
}

fn padded_tensor(frame: &Frame) -> Result<Tensor> {
    pad_to_multiple(frame, PAD_MULTIPLE).0.to_tensor()
}

fn check_size(frame: &Frame, size: OriginalSize) -> Result<()> {
    if frame.size() != (size.height, size.width) {
        return Err(Error::Shape(format!(
            "frame {} is {}x{}, sequence is {}x{}",
            frame.index, frame.height, frame.width, size.height, size.width
        )));
    }
    Ok(())
}

/// Decoder-side steps shared by both sessions: MV refinement, compensation,
/// residual refinement and the clamped reconstruction.
struct Reconstruction {
    mv: Tensor,
    recon: Tensor,
}

fn motion(model: &Model, refs: &References, mv_pred: &Tensor, d_hat: &Tensor, t: &mut Timer, index: usize) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
    let v_prime = (mv_pred + d_hat)?;
    let mv = t.run(Stage::MvRefinement, index, || model.refine_mv(&v_prime, refs))?;
    let (prediction, flows) = t.run(Stage::MotionCompensation, index, || model.compensate(&mv, refs))?;
    Ok((mv, prediction, flows))
}

fn finish(
    model: &Model,
    refs: &References,
    (mv, prediction, flows): (Tensor, Tensor, Vec<Tensor>),
    r_prime: &Tensor,
    t: &mut Timer,
    index: usize,
) -> Result<Reconstruction> {
    let r_hat = t.run(Stage::ResidualRefinement, index, || {
        model.refine_residual(r_prime, &prediction, &flows, refs)
    })?;
    let recon = (prediction + r_hat)?.clamp(0f32, 1f32)?;
    Ok(Reconstruction { mv, recon })
}

/// Output of coding one frame.
#[derive(Debug, Clone)]
pub struct EncodedFrame {
    pub unit: FrameUnit,
    /// `x̂_t` at the original size.
    pub recon: Frame,
    pub stats: FrameStats,
}

/// Stateful encoder for one sequence.
pub struct Encoder<'m> {
    model: &'m Model,
    plugin: IntraPlugin,
    intra_period: usize,
    buffers: ReferenceBuffers,
    size: Option<OriginalSize>,
    next: usize,
}

impl<'m> Encoder<'m> {
    /// `intra_period` of 0 means a single intra frame.
    pub fn new(model: &'m Model, plugin: IntraPlugin, intra_period: usize) -> Self {
        Self {
            model,
            plugin,
            intra_period: if intra_period == 0 { usize::MAX } else { intra_period },
            buffers: ReferenceBuffers::new(),
            size: None,
            next: 0,
        }
    }

    pub fn buffers(&self) -> &ReferenceBuffers {
        &self.buffers
    }

    pub fn encode_frame(&mut self, frame: &Frame) -> Result<EncodedFrame> {
        let index = self.next;
        let size = *self.size.get_or_insert(OriginalSize {
            height: frame.height,
            width: frame.width,
        });
        check_size(frame, size)?;
        let _guard = self.model.inference_guard();
        let out = if index % self.intra_period == 0 {
            self.encode_intra(frame, index)?
        } else {
            self.encode_p(frame, index, size)?
        };
        self.next += 1;
        Ok(out)
    }

    fn encode_intra(&mut self, frame: &Frame, index: usize) -> Result<EncodedFrame> {
        let mut t = Timer::default();
        let (blob, recon) = t.run(Stage::Intra, index, || self.plugin.encode(frame))?;
        let recon = recon.with_index(index, FrameKind::I);
        self.buffers.reset(padded_tensor(&recon)?);
        let unit = FrameUnit::Intra {
            kind: self.plugin.kind_byte(),
            blob,
        };
        let mut stats = FrameStats::new(index, &unit);
        stats.timings = t.laps;
        Ok(EncodedFrame { unit, recon, stats })
    }

    fn encode_p(&mut self, frame: &Frame, index: usize, size: OriginalSize) -> Result<EncodedFrame> {
        let model = self.model;
        let refs = self.buffers.references()?;
        let x = padded_tensor(frame)?;
        let mut t = Timer::default();
        let flow = t.run(Stage::MotionEstimation, index, || model.me.estimate_flow(&x, &refs.frames[0]))?;
        let mv_pred = t.run(Stage::MvPrediction, index, || model.predict_mv(&refs.mvs))?;
        let mvd = t.run(Stage::MvdCoding, index, || model.mvd.encode(&(&flow - &mv_pred)?))?;
        let m = motion(model, &refs, &mv_pred, &mvd.recon, &mut t, index)?;
        let res = t.run(Stage::ResidualCoding, index, || model.res.encode(&(&x - &m.1)?))?;
        let rec = finish(model, &refs, m, &res.recon, &mut t, index)?;
        let mut payloads = mvd.payloads.into_iter().chain(res.payloads);
        let unit = FrameUnit::P {
            mvd: payloads.next().expect("mvd payload"),
            res_y: payloads.next().expect("residual y payload"),
            res_z: payloads.next().expect("residual z payload"),
        };
        let recon = unpad(&Frame::from_tensor(&rec.recon, index, FrameKind::P)?, size);
        self.buffers.push(rec.recon, rec.mv);
        let mut stats = FrameStats::new(index, &unit);
        stats.timings = t.laps;
        Ok(EncodedFrame { unit, recon, stats })
    }
}

/// Stateful decoder for one sequence.
pub struct Decoder<'m> {
    model: &'m Model,
    plugin: IntraPlugin,
    buffers: ReferenceBuffers,
    size: OriginalSize,
    next: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model, plugin: IntraPlugin, size: OriginalSize) -> Self {
        Self {
            model,
            plugin,
            buffers: ReferenceBuffers::new(),
            size,
            next: 0,
        }
    }

    pub fn buffers(&self) -> &ReferenceBuffers {
        &self.buffers
    }

    pub fn decode_unit(&mut self, unit: &FrameUnit) -> Result<(Frame, FrameStats)> {
        let index = self.next;
        let _guard = self.model.inference_guard();
        let mut t = Timer::default();
        let frame = match unit {
            FrameUnit::Intra { kind, blob } => {
                if *kind != self.plugin.kind_byte() {
                    return Err(Error::External(format!(
                        "frame {index} needs intra plugin kind {kind}, decoder has {}",
                        self.plugin.kind_byte()
                    )));
                }
                let (h, w) = (self.size.height, self.size.width);
                let recon = t.run(Stage::Intra, index, || self.plugin.decode(blob, h, w, index))?;
                self.buffers.reset(padded_tensor(&recon)?);
                recon
            }
            FrameUnit::P { mvd, res_y, res_z } => {
                let model = self.model;
                let refs = self.buffers.references().at_stage(Stage::MvPrediction, index)?;
                let (ph, pw) = (self.padded(self.size.height), self.padded(self.size.width));
                let mv_pred = t.run(Stage::MvPrediction, index, || model.predict_mv(&refs.mvs))?;
                let d_hat = t.run(Stage::MvdCoding, index, || model.mvd.decode(mvd, ph, pw))?;
                let m = motion(model, &refs, &mv_pred, &d_hat, &mut t, index)?;
                let r_prime = t.run(Stage::ResidualCoding, index, || model.res.decode(res_y, res_z, ph, pw))?;
                let rec = finish(model, &refs, m, &r_prime, &mut t, index)?;
                let frame = unpad(&Frame::from_tensor(&rec.recon, index, FrameKind::P)?, self.size);
                self.buffers.push(rec.recon, rec.mv);
                frame
            }
        };
        self.next += 1;
        let mut stats = FrameStats::new(index, unit);
        stats.timings = t.laps;
        Ok((frame, stats))
    }

    fn padded(&self, n: usize) -> usize {
        crate::media::padded_len(n, PAD_MULTIPLE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Frames between intra frames; `None` codes a single intra frame.
    pub intra_period: Option<usize>,
    pub lambda_id: u8,
    pub plugin: IntraPlugin,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            intra_period: None,
            lambda_id: 0,
            plugin: IntraPlugin::LosslessStore,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub bytes: Vec<u8>,
    pub recons: Vec<Frame>,
    pub stats: Vec<FrameStats>,
}

#[derive(Debug, Clone)]
pub struct DecodedSequence {
    pub header: ContainerHeader,
    pub frames: Vec<Frame>,
    pub stats: Vec<FrameStats>,
}

pub fn encode_sequence(model: &Model, frames: &[Frame], opts: &EncodeOptions) -> Result<EncodedSequence> {
    let first = frames.first().ok_or_else(|| Error::Config("empty sequence".into()))?;
    let dim = |n: usize| u16::try_from(n).map_err(|_| Error::Config(format!("dimension {n} exceeds 65535")));
    let header = ContainerHeader {
        version: container::VERSION,
        width: dim(first.width)?,
        height: dim(first.height)?,
        frame_count: u32::try_from(frames.len()).map_err(|_| Error::Config("too many frames".into()))?,
        lambda_id: opts.lambda_id,
        model_checksum: model.checksum()?,
        tools: model.enabled.bits(),
    };
    let mut enc = Encoder::new(model, opts.plugin.clone(), opts.intra_period.unwrap_or(frames.len()));
    let (mut units, mut recons, mut stats) = (Vec::new(), Vec::new(), Vec::new());
    for f in frames {
        let out = enc.encode_frame(f)?;
        units.push(out.unit);
        recons.push(out.recon);
        stats.push(out.stats);
    }
    let bytes = Container { header, units }.to_bytes()?;
    Ok(EncodedSequence { bytes, recons, stats })
}

/// Checks that `header` was produced by `model`.
pub fn check_model(header: &ContainerHeader, model: &Model) -> Result<()> {
    let local = model.checksum()?;
    if header.model_checksum != local {
        return Err(Error::ModelMismatch(format!(
            "container model checksum {:#018x}, local {local:#018x}",
            header.model_checksum
        )));
    }
    if header.tools != model.enabled.bits() {
        return Err(Error::ModelMismatch(format!(
            "container tool set {:#04x}, local {:#04x}",
            header.tools,
            model.enabled.bits()
        )));
    }
    Ok(())
}

pub fn decode_sequence(model: &Model, bytes: &[u8], plugin: &IntraPlugin) -> Result<DecodedSequence> {
    let c = Container::from_bytes(bytes)?;
    check_model(&c.header, model)?;
    let size = OriginalSize {
        height: c.header.height as usize,
        width: c.header.width as usize,
    };
    let mut dec = Decoder::new(model, plugin.clone(), size);
    let (mut frames, mut stats) = (Vec::new(), Vec::new());
    for u in &c.units {
        let (f, s) = dec.decode_unit(u)?;
        frames.push(f);
        stats.push(s);
    }
    Ok(DecodedSequence {
        header: c.header,
        frames,
        stats,
    })
}

/// Bits per pixel of a whole container over `frames` pictures of `width x height`.
pub fn sequence_bpp(container_bytes: usize, width: usize, height: usize, frames: usize) -> f64 {
    8.0 * container_bytes as f64 / (width * height * frames) as f64
}

/// Bits per pixel of the P-frame units alone, or `None` without P-frames.
pub fn p_only_bpp(stats: &[FrameStats], width: usize, height: usize) -> Option<f64> {
    let p: Vec<_> = stats.iter().filter(|s| s.kind == FrameKind::P).collect();
    if p.is_empty() {
        return None;
    }
    let bytes: usize = p.iter().map(|s| s.unit_bytes).sum();
    Some(sequence_bpp(bytes, width, height, p.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{synth_motion_clip, SynthMotion};
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        let mut c = ModelConfig::desk();
        c.mvd = crate::codecs::MvdCodecConfig { hidden: 8, latent: 8 };
        c.res = crate::codecs::ResCodecConfig {
            hidden: 8,
            latent: 8,
            hyper: 4,
        };
        Model::new(c, 3).unwrap()
    }

    #[test]
    fn single_frame_sequence_is_one_intra_unit() {
        let model = tiny();
        let clip = synth_motion_clip(SynthMotion::shift(1.0, 0.0), 1, (40, 50), 0);
        let enc = encode_sequence(&model, &clip.frames, &EncodeOptions::default()).unwrap();
        let c = Container::from_bytes(&enc.bytes).unwrap();
        assert_eq!(c.units.len(), 1);
        assert!(matches!(c.units[0], FrameUnit::Intra { .. }));
        let dec = decode_sequence(&model, &enc.bytes, &IntraPlugin::LosslessStore).unwrap();
        assert_eq!(dec.frames[0].pixels, clip.frames[0].pixels);
    }

    #[test]
    fn round_trip_replays_encoder_state() {
        let model = tiny();
        let clip = synth_motion_clip(SynthMotion::shift(1.0, 0.5), 5, (48, 70), 1);
        let opts = EncodeOptions {
            intra_period: Some(4),
            lambda_id: 64,
            plugin: IntraPlugin::LosslessStore,
        };
        let mut enc = Encoder::new(&model, opts.plugin.clone(), 4);
        let mut dec = Decoder::new(&model, opts.plugin.clone(), OriginalSize { height: 48, width: 70 });
        for f in &clip.frames {
            let e = enc.encode_frame(f).unwrap();
            let (d, stats) = dec.decode_unit(&e.unit).unwrap();
            assert_eq!(d.pixels, e.recon.pixels);
            assert_eq!(enc.buffers().snapshot().unwrap(), dec.buffers().snapshot().unwrap());
            assert_eq!(stats.unit_bytes, e.stats.unit_bytes);
        }
        drop((enc, dec));
        assert!(!model.store(crate::model::ModuleId::Mmc).is_frozen());

        let seq = encode_sequence(&model, &clip.frames, &opts).unwrap();
        let kinds: Vec<_> = seq.stats.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, [FrameKind::I, FrameKind::P, FrameKind::P, FrameKind::P, FrameKind::I]);
        let total: usize = container::HEADER_LEN + seq.stats.iter().map(|s| s.unit_bytes).sum::<usize>();
        assert_eq!(total, seq.bytes.len());
        let dec = decode_sequence(&model, &seq.bytes, &opts.plugin).unwrap();
        assert_eq!(dec.frames.len(), 5);
        for (a, b) in dec.frames.iter().zip(&seq.recons) {
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let model = tiny();
        let clip = synth_motion_clip(SynthMotion::shift(1.0, 0.0), 2, (64, 64), 2);
        let seq = encode_sequence(&model, &clip.frames, &EncodeOptions::default()).unwrap();
        let mut other = tiny();
        other.enabled.mamvp = false;
        let err = decode_sequence(&other, &seq.bytes, &IntraPlugin::LosslessStore).unwrap_err();
        assert!(err.is_model_mismatch());
        let mut c = ModelConfig::desk();
        c.references = 2;
        let err = decode_sequence(&Model::new(c, 3).unwrap(), &seq.bytes, &IntraPlugin::LosslessStore).unwrap_err();
        assert!(err.is_model_mismatch());
    }

    #[test]
    fn truncated_container_is_rejected() {
        let model = tiny();
        let clip = synth_motion_clip(SynthMotion::shift(1.0, 0.0), 2, (64, 64), 4);
        let seq = encode_sequence(&model, &clip.frames, &EncodeOptions::default()).unwrap();
        let mut bad = seq.bytes.clone();
        bad.truncate(bad.len() - 1);
        assert!(decode_sequence(&model, &bad, &IntraPlugin::LosslessStore).is_err());
    }

    #[test]
    fn bpp_helpers() {
        assert_eq!(sequence_bpp(100, 10, 10, 2), 4.0);
        assert_eq!(p_only_bpp(&[], 4, 4), None);
    }
}
