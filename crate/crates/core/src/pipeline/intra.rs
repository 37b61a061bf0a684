//! Intra-frame plugins. The reconstruction handed to the reference buffers is
//! always the decoded blob, so encoder and decoder see the same `x̂_0`.

use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};
use crate::media::{Frame, FrameKind};

const TAG_U8: u8 = 0;
const TAG_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum IntraPlugin {
    /// Raw planar samples: 8-bit when every sample is exactly `k / 255`, f32 otherwise.
    #[default]
    LosslessStore,
    /// Shell commands with `{in}` and `{out}` placeholders. The encoder is given
    /// a PNG and must write the blob; the decoder is given the blob and must write a PNG.
    ExternalCommand { encode: String, decode: String },
}

impl IntraPlugin {
    /// Frame-unit kind byte for intra units made by this plugin.
    pub fn kind_byte(&self) -> u8 {
        match self {
            IntraPlugin::LosslessStore => 0,
            IntraPlugin::ExternalCommand { .. } => 1,
        }
    }

    /// Returns `(blob, x̂_0)`.
    pub fn encode(&self, frame: &Frame) -> Result<(Vec<u8>, Frame)> {
        let blob = match self {
            IntraPlugin::LosslessStore => store(frame),
            IntraPlugin::ExternalCommand { encode, .. } => {
                let dir = tempdir()?;
                let input = dir.path().join("in.png");
                let output = dir.path().join("out.bin");
                frame.to_rgb_image().save(&input)?;
                run(encode, &input, &output)?;
                std::fs::read(&output).map_err(|e| Error::io(&output, e))?
            }
        };
        let recon = self.decode(&blob, frame.height, frame.width, frame.index)?;
        Ok((blob, recon))
    }

    pub fn decode(&self, blob: &[u8], height: usize, width: usize, index: usize) -> Result<Frame> {
        match self {
            IntraPlugin::LosslessStore => load(blob, height, width, index),
            IntraPlugin::ExternalCommand { decode, .. } => {
                let dir = tempdir()?;
                let input = dir.path().join("in.bin");
                let output = dir.path().join("out.png");
                std::fs::write(&input, blob).map_err(|e| Error::io(&input, e))?;
                run(decode, &input, &output)?;
                let img = image::open(&output)?.to_rgb8();
                if (img.height() as usize, img.width() as usize) != (height, width) {
                    return Err(Error::External(format!(
                        "decoder produced {}x{}, expected {height}x{width}",
                        img.height(),
                        img.width()
                    )));
                }
                Ok(Frame::from_rgb_image(&img, index, FrameKind::I))
            }
        }
    }
}

fn store(frame: &Frame) -> Vec<u8> {
    match frame.to_u8_exact() {
        Some(bytes) => {
            let mut out = Vec::with_capacity(1 + bytes.len());
            out.push(TAG_U8);
            out.extend(bytes);
            out
        }
        None => {
            let mut out = Vec::with_capacity(1 + 4 * frame.pixels.len());
            out.push(TAG_F32);
            for v in &frame.pixels {
                out.extend(v.to_le_bytes());
            }
            out
        }
    }
}

fn load(blob: &[u8], height: usize, width: usize, index: usize) -> Result<Frame> {
    let n = 3 * height * width;
    let (&tag, body) = blob.split_first().ok_or(Error::Truncated("empty intra blob"))?;
    let frame = match tag {
        TAG_U8 if body.len() == n => Frame::from_u8(body, height, width, index, FrameKind::I)?,
        TAG_F32 if body.len() == 4 * n => {
            let pixels = body
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
                .collect();
            Frame::new(pixels, height, width, index, FrameKind::I)?
        }
        TAG_U8 | TAG_F32 => return Err(Error::Truncated("intra blob size does not match the frame")),
        t => return Err(Error::Header(format!("unknown intra storage tag {t}"))),
    };
    Ok(frame)
}

fn tempdir() -> Result<tempfile::TempDir> {
    tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))
}

fn run(template: &str, input: &Path, output: &Path) -> Result<()> {
    let cmd = template
        .replace("{in}", &input.display().to_string())
        .replace("{out}", &output.display().to_string());
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::External(format!("could not spawn `{cmd}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::External(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    if !output.exists() {
        return Err(Error::External(format!("`{cmd}` wrote no output")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{synth_clip, SynthPattern};

    #[test]
    fn lossless_store_is_exact_in_both_layouts() {
        let f = synth_clip(SynthPattern::Shift, 1, (8, 12), 0).frames.remove(0);
        let (blob, recon) = IntraPlugin::LosslessStore.encode(&f).unwrap();
        assert_eq!(recon.pixels, f.pixels);
        let eight_bit = Frame::from_u8(&f.to_u8(), 8, 12, 0, FrameKind::I).unwrap();
        let (small, recon8) = IntraPlugin::LosslessStore.encode(&eight_bit).unwrap();
        assert_eq!(recon8.pixels, eight_bit.pixels);
        assert_eq!(small.len(), 1 + 3 * 8 * 12);
        assert!(blob.len() >= small.len());
        let again = IntraPlugin::LosslessStore.decode(&small, 8, 12, 0).unwrap();
        assert_eq!(again, recon8);
        assert!(IntraPlugin::LosslessStore.decode(&small[..10], 8, 12, 0).is_err());
    }

    #[test]
    fn external_command_round_trip_via_cp() {
        let plugin = IntraPlugin::ExternalCommand {
            encode: "cp {in} {out}".into(),
            decode: "cp {in} {out}".into(),
        };
        let f = Frame::filled(16, 16, 0.5);
        let (blob, recon) = plugin.encode(&f).unwrap();
        assert!(!blob.is_empty());
        assert_eq!(recon.to_u8(), f.to_u8());
        assert_eq!(plugin.decode(&blob, 16, 16, 0).unwrap(), recon);
        let failing = IntraPlugin::ExternalCommand {
            encode: "false".into(),
            decode: "false".into(),
        };
        assert!(matches!(failing.encode(&f), Err(Error::External(_))));
    }
}
