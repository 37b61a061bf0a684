//! PSNR and MS-SSIM on normalized frames.

use crate::error::{Error, Result};
use crate::media::{rgb_to_luma, Frame};

/// Reported PSNR for identical frames.
pub const PSNR_CAP: f64 = 99.0;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MSSSIM_MIN_SIDE: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColorMode {
    #[default]
    Rgb,
    /// BT.601 luma only.
    Y,
}

fn check_same(a: &Frame, b: &Frame) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!(
            "comparing {}x{} with {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Planes compared under `mode`, in f64.
fn planes(f: &Frame, mode: ColorMode) -> Vec<Vec<f64>> {
    let n = f.height * f.width;
    match mode {
        ColorMode::Rgb => (0..3)
            .map(|c| f.pixels[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect())
            .collect(),
        ColorMode::Y => vec![(0..n)
            .map(|i| rgb_to_luma(f.pixels[i], f.pixels[n + i], f.pixels[2 * n + i]) as f64)
            .collect()],
    }
}

pub fn mse(a: &Frame, b: &Frame, mode: ColorMode) -> Result<f64> {
    check_same(a, b)?;
    let (pa, pb) = (planes(a, mode), planes(b, mode));
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        sum += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        count += x.len();
    }
    Ok(sum / count as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Frame, b: &Frame, mode: ColorMode) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, mode)?))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|i| g[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one scale.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut size = h.min(w).min(11);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size, 1.5);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, _, _) = filter(a, h, w, &g);
    let (mu_b, _, _) = filter(b, h, w, &g);
    let (aa, _, _) = filter(&prod(a, a), h, w, &g);
    let (bb, _, _) = filter(&prod(b, b), h, w, &g);
    let (ab, _, _) = filter(&prod(a, b), h, w, &g);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        cs += c;
        ssim += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1) * c;
    }
    (ssim / n, cs / n)
}

fn avg_pool2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for xo in 0..ow {
            let i = 2 * y * w + 2 * xo;
            out.push(0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]));
        }
    }
    (out, oh, ow)
}

/// Five-scale MS-SSIM with an 11-tap Gaussian window (sigma 1.5), averaged over
/// planes. Negative per-scale terms are clamped to zero. The window shrinks
/// to the plane size at the coarsest scales.
pub fn msssim(a: &Frame, b: &Frame, mode: ColorMode) -> Result<f64> {
    check_same(a, b)?;
    if a.height.min(a.width) < MSSSIM_MIN_SIDE {
        return Err(Error::TooSmall {
            height: a.height,
            width: a.width,
            reason: "ms-ssim needs at least 160 pixels on the short side",
        });
    }
    let (pa, pb) = (planes(a, mode), planes(b, mode));
    let mut total = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        let (mut x, mut y) = (x.clone(), y.clone());
        let (mut h, mut w) = (a.height, a.width);
        let mut value = 1.0;
        for (s, &weight) in MSSSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&x, &y, h, w);
            let term = if s + 1 == MSSSIM_WEIGHTS.len() { ssim } else { cs };
            value *= term.max(0.0).powf(weight);
            if s + 1 < MSSSIM_WEIGHTS.len() {
                let (nx, nh, nw) = avg_pool2(&x, h, w);
                y = avg_pool2(&y, h, w).0;
                (x, h, w) = (nx, nh, nw);
            }
        }
        total += value;
    }
    Ok(total / pa.len() as f64)
}
