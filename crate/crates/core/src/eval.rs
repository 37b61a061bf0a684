//! Rate-distortion evaluation from real containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{Frame, FrameKind};
use crate::metrics::{msssim, psnr, ColorMode, MSSSIM_MIN_SIDE};
use crate::model::Model;
use crate::pipeline::{self, EncodeOptions, FrameStats};

/// Per-frame rates in bits per pixel, all derived from container bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdRecord {
    pub sequence: String,
    pub frame: usize,
    pub kind: String,
    pub bpp_mv: f64,
    pub bpp_res: f64,
    pub bpp_intra: f64,
    /// Kind byte and length fields of the frame unit.
    pub bpp_overhead: f64,
    pub bpp_total: f64,
    pub psnr: f64,
    /// `None` when the frame is too small for five scales.
    pub msssim: Option<f64>,
}

/// Sequence means plus the exact container rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub sequence: String,
    pub lambda: f64,
    pub frames: usize,
    pub container_bytes: usize,
    /// `8 · container_bytes / (W · H · N)`, header and intra frames included.
    pub bpp: f64,
    /// P-frame units only.
    pub bpp_p_only: Option<f64>,
    pub bpp_mv_p: Option<f64>,
    pub bpp_res_p: Option<f64>,
    pub psnr: f64,
    pub psnr_p: Option<f64>,
    pub msssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: SequenceSummary,
    pub records: Vec<RdRecord>,
}

fn bpp(bytes: usize, pixels: usize) -> f64 {
    8.0 * bytes as f64 / pixels as f64
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores decoded frames against originals with the per-frame byte counts.
pub fn score(
    sequence: &str,
    lambda: f64,
    container_bytes: usize,
    stats: &[FrameStats],
    decoded: &[Frame],
    originals: &[Frame],
    mode: ColorMode,
) -> Result<EvalReport> {
    if decoded.len() != originals.len() || stats.len() != decoded.len() || decoded.is_empty() {
        return Err(Error::Shape(format!(
            "{} decoded frames, {} originals, {} units",
            decoded.len(),
            originals.len(),
            stats.len()
        )));
    }
    let (h, w) = originals[0].size();
    let px = h * w;
    let with_msssim = h.min(w) >= MSSSIM_MIN_SIDE;
    let mut records = Vec::with_capacity(decoded.len());
    for ((s, d), o) in stats.iter().zip(decoded).zip(originals) {
        records.push(RdRecord {
            sequence: sequence.to_string(),
            frame: s.index,
            kind: match s.kind {
                FrameKind::I => "I".into(),
                FrameKind::P => "P".into(),
            },
            bpp_mv: bpp(s.mvd_bytes, px),
            bpp_res: bpp(s.res_bytes, px),
            bpp_intra: bpp(s.intra_bytes, px),
            bpp_overhead: bpp(s.overhead_bytes(), px),
            bpp_total: bpp(s.unit_bytes, px),
            psnr: psnr(d, o, mode)?,
            msssim: if with_msssim { Some(msssim(d, o, mode)?) } else { None },
        });
    }
    let p: Vec<&RdRecord> = records.iter().filter(|r| r.kind == "P").collect();
    let summary = SequenceSummary {
        sequence: sequence.to_string(),
        lambda,
        frames: records.len(),
        container_bytes,
        bpp: pipeline::sequence_bpp(container_bytes, w, h, records.len()),
        bpp_p_only: pipeline::p_only_bpp(stats, w, h),
        bpp_mv_p: mean(p.iter().map(|r| r.bpp_mv)),
        bpp_res_p: mean(p.iter().map(|r| r.bpp_res)),
        psnr: mean(records.iter().map(|r| r.psnr)).expect("non-empty"),
        psnr_p: mean(p.iter().map(|r| r.psnr)),
        msssim: if with_msssim { mean(records.iter().filter_map(|r| r.msssim)) } else { None },
    };
    Ok(EvalReport { summary, records })
}

/// Encodes, decodes and scores a sequence, checking the decoder reproduces
/// the encoder's reconstructions.
pub fn evaluate_sequence(
    model: &Model,
    sequence: &str,
    lambda: f64,
    frames: &[Frame],
    opts: &EncodeOptions,
    mode: ColorMode,
) -> Result<EvalReport> {
    let enc = pipeline::encode_sequence(model, frames, opts)?;
    let dec = pipeline::decode_sequence(model, &enc.bytes, &opts.plugin)?;
    if dec.frames.iter().zip(&enc.recons).any(|(a, b)| a.pixels != b.pixels) {
        return Err(Error::ModelMismatch("decoder output differs from the encoder reconstruction".into()));
    }
    score(sequence, lambda, enc.bytes.len(), &dec.stats, &dec.frames, frames, mode)
}

fn to_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// CSV of one row per sequence summary: `sequence,lambda,bpp,psnr,msssim`.
pub fn curve_csv(summaries: &[SequenceSummary]) -> String {
    to_csv(
        &["sequence", "lambda", "bpp", "psnr", "msssim"],
        summaries.iter().map(|s| {
            vec![s.sequence.clone(), s.lambda.to_string(), format!("{:.6}", s.bpp), format!("{:.4}", s.psnr), opt(s.msssim)]
        }),
    )
}

/// CSV of per-frame records.
pub fn records_csv(records: &[RdRecord]) -> String {
    to_csv(
        &["sequence", "frame", "kind", "bpp_mv", "bpp_res", "bpp_intra", "bpp_overhead", "bpp_total", "psnr", "msssim"],
        records.iter().map(|r| {
            let mut row = vec![r.sequence.clone(), r.frame.to_string(), r.kind.clone()];
            row.extend([r.bpp_mv, r.bpp_res, r.bpp_intra, r.bpp_overhead, r.bpp_total].map(|v| format!("{v:.6}")));
            row.extend([format!("{:.4}", r.psnr), opt(r.msssim)]);
            row
        }),
    )
}

/// Minimal SVG of bpp (x) against PSNR (y), one polyline per sequence.
pub fn curve_svg(summaries: &[SequenceSummary]) -> String {
    let (w, h, m) = (480.0, 320.0, 40.0);
    let xs: Vec<f64> = summaries.iter().map(|s| s.bpp).collect();
    let ys: Vec<f64> = summaries.iter().map(|s| s.psnr).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if (hi - lo).abs() < 1e-12 { (lo - 1.0, hi + 1.0) } else { (lo, hi) }
    };
    let ((x0, x1), (y0, y1)) = (range(&xs), range(&ys));
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut names: Vec<&str> = summaries.iter().map(|s| s.sequence.as_str()).collect();
    names.dedup();
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    svg.push_str(&format!(
        "<text x=\"{m}\" y=\"{}\" font-size=\"12\">bpp {x0:.3} to {x1:.3}, PSNR {y0:.2} to {y1:.2} dB</text>\n",
        h - 10.0
    ));
    for name in names {
        let mut pts: Vec<(f64, f64)> = summaries
            .iter()
            .filter(|s| s.sequence == name)
            .map(|s| (s.bpp, s.psnr))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let line: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"black\" points=\"{}\"><title>{name}</title></polyline>\n",
            line.join(" ")
        ));
        for (x, y) in pts {
            svg.push_str(&format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\"/>\n", px(x), py(y)));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
