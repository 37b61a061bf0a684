//! Frame ingest and emission, padding, training-clip extraction and synthetic clips.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    I,
    P,
}

/// One RGB picture with values in `[0, 1]`, stored planar (`3 x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub index: usize,
    pub kind: FrameKind,
}

impl Frame {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize, index: usize, kind: FrameKind) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{} samples for a {height}x{width} RGB frame",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            height,
            width,
            index,
            kind,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            pixels: vec![value; 3 * height * width],
            height,
            width,
            index: 0,
            kind: FrameKind::I,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.pixels, (1, 3, self.height, self.width), &Device::Cpu)?)
    }

    /// Builds a frame from a `(1, 3, H, W)` or `(3, H, W)` tensor without clamping.
    pub fn from_tensor(t: &Tensor, index: usize, kind: FrameKind) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("frame tensor of rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("frame tensor with {c} channels")));
        }
        let pixels = t.flatten_all()?.to_vec1::<f32>()?;
        Self::new(pixels, h, w, index, kind)
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Exact 8-bit values when every sample is `k / 255`.
    pub fn to_u8_exact(&self) -> Option<Vec<u8>> {
        self.pixels
            .iter()
            .map(|&v| {
                let q = denormalize(v);
                (normalize(q) == v).then_some(q)
            })
            .collect()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| denormalize(v)).collect()
    }

    pub fn from_u8(planar: &[u8], height: usize, width: usize, index: usize, kind: FrameKind) -> Result<Self> {
        Self::new(planar.iter().map(|&v| normalize(v)).collect(), height, width, index, kind)
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        let plane = self.height * self.width;
        let q = self.to_u8();
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb([q[i], q[plane + i], q[2 * plane + i]])
        })
    }

    pub fn from_rgb_image(img: &image::RgbImage, index: usize, kind: FrameKind) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut pixels = vec![0f32; 3 * plane];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                pixels[c * plane + i] = normalize(p.0[c]);
            }
        }
        Self {
            pixels,
            height: h,
            width: w,
            index,
            kind,
        }
    }

    pub fn with_index(mut self, index: usize, kind: FrameKind) -> Self {
        self.index = index;
        self.kind = kind;
        self
    }
}

pub fn normalize(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn denormalize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Where a sequence lives on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceSource {
    /// Directory of 8-bit image files, read in lexicographic filename order.
    ImageDir(PathBuf),
    /// Planar 8-bit YUV 4:2:0, BT.601 full range.
    Yuv420 {
        path: PathBuf,
        width: usize,
        height: usize,
    },
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

pub fn load_sequence(source: &SequenceSource, limit: Option<usize>) -> Result<Vec<Frame>> {
    let frames = match source {
        SequenceSource::ImageDir(dir) => load_image_dir(dir, limit)?,
        SequenceSource::Yuv420 {
            path,
            width,
            height,
        } => load_yuv420(path, *width, *height, limit)?,
    };
    Ok(frames)
}

fn load_image_dir(dir: &Path, limit: Option<usize>) -> Result<Vec<Frame>> {
    if !dir.exists() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if let Some(n) = limit {
        files.truncate(n);
    }
    if files.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut expected = None;
    for (i, f) in files.iter().enumerate() {
        let img = image::open(f)?.to_rgb8();
        let size = (img.height() as usize, img.width() as usize);
        match expected {
            None => expected = Some(size),
            Some(e) if e != size => {
                return Err(Error::InconsistentResolution {
                    expected: e,
                    found: size,
                    path: f.clone(),
                })
            }
            _ => {}
        }
        frames.push(Frame::from_rgb_image(&img, i, kind_for(i)));
    }
    Ok(frames)
}

fn kind_for(index: usize) -> FrameKind {
    if index == 0 {
        FrameKind::I
    } else {
        FrameKind::P
    }
}

fn load_yuv420(path: &Path, width: usize, height: usize, limit: Option<usize>) -> Result<Vec<Frame>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
        return Err(Error::Config(format!(
            "yuv420 needs positive even dimensions, got {width}x{height}"
        )));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let luma = width * height;
    let frame_bytes = luma + luma / 2;
    let mut count = bytes.len() / frame_bytes;
    if let Some(n) = limit {
        count = count.min(n);
    }
    if count == 0 {
        return Err(Error::NoFrames(path.to_path_buf()));
    }
    let cw = width / 2;
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let f = &bytes[i * frame_bytes..(i + 1) * frame_bytes];
        let (yp, rest) = f.split_at(luma);
        let (up, vp) = rest.split_at(luma / 4);
        let mut pixels = vec![0f32; 3 * luma];
        for y in 0..height {
            for x in 0..width {
                let ci = (y / 2) * cw + x / 2;
                let rgb = yuv_to_rgb(yp[y * width + x], up[ci], vp[ci]);
                for c in 0..3 {
                    pixels[c * luma + y * width + x] = rgb[c];
                }
            }
        }
        frames.push(Frame::new(pixels, height, width, i, kind_for(i))?);
    }
    Ok(frames)
}

/// BT.601 full-range YCbCr to normalized RGB.
pub fn yuv_to_rgb(y: u8, u: u8, v: u8) -> [f32; 3] {
    let y = y as f32;
    let cb = u as f32 - 128.0;
    let cr = v as f32 - 128.0;
    let r = y + 1.402 * cr;
    let g = y - 0.344136 * cb - 0.714136 * cr;
    let b = y + 1.772 * cb;
    [r, g, b].map(|c| (c / 255.0).clamp(0.0, 1.0))
}

/// BT.601 full-range luma of a normalized RGB sample.
pub fn rgb_to_luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn save_png_dir(frames: &[Frame], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in frames {
        let path = dir.join(format!("frame_{:05}.png", f.index));
        f.to_rgb_image().save(&path)?;
    }
    Ok(())
}

/// Geometry of a frame before padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OriginalSize {
    pub height: usize,
    pub width: usize,
}

pub const PAD_MULTIPLE: usize = 64;

pub fn padded_len(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Edge-replicates the frame up to the next multiple of `multiple` in both dimensions.
pub fn pad_to_multiple(frame: &Frame, multiple: usize) -> (Frame, OriginalSize) {
    let multiple = multiple.max(1);
    let (h, w) = frame.size();
    let (ph, pw) = (padded_len(h, multiple), padded_len(w, multiple));
    let mut pixels = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                pixels.push(frame.at(c, sy, x.min(w - 1)));
            }
        }
    }
    let padded = Frame {
        pixels,
        height: ph,
        width: pw,
        index: frame.index,
        kind: frame.kind,
    };
    (padded, OriginalSize { height: h, width: w })
}

pub fn unpad(frame: &Frame, size: OriginalSize) -> Frame {
    let mut pixels = Vec::with_capacity(3 * size.height * size.width);
    for c in 0..3 {
        for y in 0..size.height {
            for x in 0..size.width {
                pixels.push(frame.at(c, y, x));
            }
        }
    }
    Frame {
        pixels,
        height: size.height,
        width: size.width,
        index: frame.index,
        kind: frame.kind,
    }
}

/// Crop geometry and length of a training clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClipSpec {
    pub crop_h: usize,
    pub crop_w: usize,
    pub length: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            crop_h: 192,
            crop_w: 192,
            length: 16,
        }
    }
}

fn crop(frame: &Frame, top: usize, left: usize, h: usize, w: usize) -> Frame {
    let mut pixels = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in top..top + h {
            let row = (c * frame.height + y) * frame.width;
            pixels.extend_from_slice(&frame.pixels[row + left..row + left + w]);
        }
    }
    Frame {
        pixels,
        height: h,
        width: w,
        index: frame.index,
        kind: frame.kind,
    }
}

/// Cuts consecutive windows of `spec.length` frames every `stride` frames, each
/// with one random crop shared across the window.
pub fn extract_training_clips(
    sequence: &[Frame],
    spec: ClipSpec,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<Frame>>> {
    if sequence.len() < spec.length || spec.length == 0 {
        return Err(Error::SequenceTooShort {
            have: sequence.len(),
            need: spec.length,
        });
    }
    let (h, w) = sequence[0].size();
    if h < spec.crop_h || w < spec.crop_w {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            reason: "smaller than the training crop",
        });
    }
    let stride = stride.max(1);
    let mut clips = Vec::new();
    let mut start = 0;
    while start + spec.length <= sequence.len() {
        let top = rng.random_range(0..=h - spec.crop_h);
        let left = rng.random_range(0..=w - spec.crop_w);
        let clip = sequence[start..start + spec.length]
            .iter()
            .enumerate()
            .map(|(i, f)| crop(f, top, left, spec.crop_h, spec.crop_w).with_index(i, kind_for(i)))
            .collect();
        clips.push(clip);
        start += stride;
    }
    Ok(clips)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthPattern {
    Shift,
    Rotate,
    Noise,
}

/// Per-frame affine motion `frame_t(p) = texture(A_t p + b_t)`.
///
/// Each step composes `psi(p) = M (p - c) + c + s`, optionally perturbed by a
/// random translation, so the backward flow of a frame against its
/// predecessor is known in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthMotion {
    pub translation: (f64, f64),
    pub rotation_deg: f64,
    pub zoom: f64,
    pub jitter: f64,
}

impl SynthMotion {
    pub fn shift(dx: f64, dy: f64) -> Self {
        Self {
            translation: (dx, dy),
            rotation_deg: 0.0,
            zoom: 1.0,
            jitter: 0.0,
        }
    }

    pub fn rotate(deg: f64) -> Self {
        Self {
            translation: (0.0, 0.0),
            rotation_deg: deg,
            zoom: 1.0,
            jitter: 0.0,
        }
    }
}

/// A synthetic clip with the true backward flow of every P-frame.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub frames: Vec<Frame>,
    /// `flows[t]` is frame `t`'s backward flow onto frame `t - 1` as planar
    /// `(dx plane, dy plane)`; `None` for frame 0 and for noise clips.
    pub flows: Vec<Option<Vec<f32>>>,
}

/// Smooth periodic color texture defined on the whole plane.
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<[f64; 5]>,
}

impl Texture {
    pub fn random(rng: &mut impl Rng, size: usize) -> Self {
        let n = 6;
        let waves = (0..n)
            .map(|k| {
                let period = rng.random_range(6.0..(size as f64 / 2.0).max(12.0));
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let f = 2.0 * std::f64::consts::PI / period;
                [
                    f * angle.cos(),
                    f * angle.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    (k % 3) as f64,
                    rng.random_range(0.5..1.0),
                ]
            })
            .collect();
        Self { waves }
    }

    pub fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        let mut norm = 0.0;
        for w in &self.waves {
            let gain = if w[3] as usize == c { w[4] } else { 0.35 * w[4] };
            acc += gain * (w[0] * x + w[1] * y + w[2]).sin();
            norm += gain;
        }
        0.5 + 0.45 * acc / norm
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    m: [[f64; 2]; 2],
    b: [f64; 2],
}

impl Affine {
    const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0], [0.0, 1.0]],
        b: [0.0, 0.0],
    };

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.b[0],
            self.m[1][0] * x + self.m[1][1] * y + self.b[1],
        )
    }

    fn inverse_apply(&self, u: f64, v: f64) -> (f64, f64) {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        let (u, v) = (u - self.b[0], v - self.b[1]);
        (
            (self.m[1][1] * u - self.m[0][1] * v) / det,
            (-self.m[1][0] * u + self.m[0][0] * v) / det,
        )
    }

    /// `self ∘ step`, i.e. applies `step` first.
    fn then(&self, step: &Affine) -> Affine {
        let m = &self.m;
        let s = &step.m;
        Affine {
            m: [
                [m[0][0] * s[0][0] + m[0][1] * s[1][0], m[0][0] * s[0][1] + m[0][1] * s[1][1]],
                [m[1][0] * s[0][0] + m[1][1] * s[1][0], m[1][0] * s[0][1] + m[1][1] * s[1][1]],
            ],
            b: [
                m[0][0] * step.b[0] + m[0][1] * step.b[1] + self.b[0],
                m[1][0] * step.b[0] + m[1][1] * step.b[1] + self.b[1],
            ],
        }
    }
}

fn quantize8(v: f64) -> f32 {
    normalize((v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn render(texture: &Texture, map: &Affine, h: usize, w: usize, index: usize) -> Frame {
    let mut pixels = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = map.apply(x as f64, y as f64);
            for c in 0..3 {
                pixels[(c * h + y) * w + x] = quantize8(texture.sample(c, u, v));
            }
        }
    }
    Frame {
        pixels,
        height: h,
        width: w,
        index,
        kind: kind_for(index),
    }
}

/// Renders a clip whose frames follow `motion`; pixel values are 8-bit exact.
pub fn synth_motion_clip(motion: SynthMotion, length: usize, size: (usize, usize), seed: u64) -> SynthClip {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = Texture::random(&mut rng, h.max(w));
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let theta = motion.rotation_deg.to_radians();
    let (ct, st) = (theta.cos() * motion.zoom, theta.sin() * motion.zoom);
    let mut frames = Vec::with_capacity(length);
    let mut flows = Vec::with_capacity(length);
    let mut map = Affine::IDENTITY;
    let mut prev = map;
    for t in 0..length {
        if t > 0 {
            let (jx, jy) = if motion.jitter > 0.0 {
                (
                    rng.random_range(-motion.jitter..=motion.jitter),
                    rng.random_range(-motion.jitter..=motion.jitter),
                )
            } else {
                (0.0, 0.0)
            };
            let m = [[ct, -st], [st, ct]];
            let step = Affine {
                m,
                b: [
                    cx - (m[0][0] * cx + m[0][1] * cy) + motion.translation.0 + jx,
                    cy - (m[1][0] * cx + m[1][1] * cy) + motion.translation.1 + jy,
                ],
            };
            prev = map;
            map = map.then(&step);
        }
        frames.push(render(&texture, &map, h, w, t));
        if t == 0 {
            flows.push(None);
            continue;
        }
        // frame_t(p) = frame_{t-1}(p + v(p)) with p + v(p) = prev^{-1}(map(p)).
        let mut flow = vec![0f32; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = map.apply(x as f64, y as f64);
                let (px, py) = prev.inverse_apply(u, v);
                flow[y * w + x] = (px - x as f64) as f32;
                flow[h * w + y * w + x] = (py - y as f64) as f32;
            }
        }
        flows.push(Some(flow));
    }
    SynthClip { frames, flows }
}

/// Canonical synthetic clips: a one-pixel-per-frame shift, a one-degree
/// rotation about the center, or temporally independent noise.
pub fn synth_clip(pattern: SynthPattern, length: usize, size: (usize, usize), seed: u64) -> SynthClip {
    match pattern {
        SynthPattern::Shift => synth_motion_clip(SynthMotion::shift(1.0, 0.0), length, size, seed),
        SynthPattern::Rotate => synth_motion_clip(SynthMotion::rotate(1.0), length, size, seed),
        SynthPattern::Noise => {
            let (h, w) = size;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = (0..length)
                .map(|t| {
                    let pixels = (0..3 * h * w).map(|_| normalize(rng.random())).collect();
                    Frame {
                        pixels,
                        height: h,
                        width: w,
                        index: t,
                        kind: kind_for(t),
                    }
                })
                .collect();
            SynthClip {
                frames,
                flows: vec![None; length],
            }
        }
    }
}
