//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlvc_core::ablation::{score_corpus, toy_corpus, toy_training_clip, CorpusScore};
use mlvc_core::entropy::factorized::channel_ids;
use mlvc_core::entropy::{decode_symbols, encode_symbols, CdfTable, FactorizedPrior, GaussianConditional, TableSet};
use mlvc_core::eval::evaluate_sequence;
use mlvc_core::mamvp::{align_pyramids, FeaturePyramid};
use mlvc_core::media::{synth_clip, synth_motion_clip, Frame, FrameKind, OriginalSize, SynthMotion, SynthPattern, Texture};
use mlvc_core::metrics::{msssim, psnr, ColorMode};
use mlvc_core::mmc::reference_flows;
use mlvc_core::model::{Model, ModelConfig, References};
use mlvc_core::nn::{seeded_uniform, ParamStore};
use mlvc_core::pipeline::{decode_sequence, encode_sequence, sequence_bpp, Decoder, EncodeOptions, Encoder, IntraPlugin};
use mlvc_core::train::{clip_tensors, progressive_schedule, run_phase, scratch_phase, Phase, TrainConfig};
use mlvc_core::warp::{bilinear_warp, warp_chain};
use mlvc_core::{registry, Result};

const LAMBDA: f64 = 64.0;

// Pinned tolerances.
const WARP_ORACLE_TOL: f64 = 1e-6;
const WARP_GRAD_REL_TOL: f64 = 1e-4;
const WARP_INSTANCES: usize = 200;
const WARP_GRAD_INSTANCES: usize = 20;
const WARP_RUNTIME_S: f64 = 60.0;
const CHAIN_TOL: f64 = 1e-6;
const CHAIN_INSTANCES: usize = 50;
const SHIFT_FLOW_TOL: f64 = 0.05;
const CODER_LATENTS: usize = 1000;
const CODER_EXHAUSTIVE_LEN: u32 = 6;
const CODER_REL_SLACK: f64 = 0.001;
const CODER_ABS_SLACK_BITS: f64 = 64.0;
const GAUSS_BITS_TARGET: f64 = 1.385;
const GAUSS_BITS_TOL: f64 = 1e-3;
const TRAIN_PSNR_TARGET: f64 = 30.0;
const TRAIN_BUDGET_S: f64 = 1800.0;
/// 8a: the MAMVP model may trail the control by at most this much PSNR.
const MATCHED_PSNR_TOL: f64 = 0.25;
const SCRATCH_SHARE_MAX: f64 = 0.05;
const PROGRESSIVE_SHARE_MIN: f64 = 0.10;
const PSNR_ORACLE_TOL: f64 = 1e-9;
const MSSSIM_SYM_TOL: f64 = 1e-9;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Per-pixel bilinear warp with sample positions clamped to the frame.
fn naive_warp(data: &[f64], flow: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let axis = |pos: f64, size: usize| -> (usize, usize, f64) {
        if size == 1 {
            return (0, 0, 0.0);
        }
        let p = pos.clamp(0.0, (size - 1) as f64);
        let i0 = (p.floor() as usize).min(size - 2);
        (i0, i0 + 1, p - i0 as f64)
    };
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let fx = flow[((b * 2) * h + y) * w + x];
                let fy = flow[((b * 2 + 1) * h + y) * w + x];
                let (x0, x1, ax) = axis(x as f64 + fx, w);
                let (y0, y1, ay) = axis(y as f64 + fy, h);
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| data[((b * c + ch) * h + yy) * w + xx];
                    out[((b * c + ch) * h + y) * w + x] = (1.0 - ax) * (1.0 - ay) * at(y0, x0)
                        + ax * (1.0 - ay) * at(y0, x1)
                        + (1.0 - ax) * ay * at(y1, x0)
                        + ax * ay * at(y1, x1);
                }
            }
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// 2x2 average of a flow field, magnitudes halved.
fn naive_half_flow(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; 2 * oh * ow];
    for c in 0..2 {
        for y in 0..oh {
            for x in 0..ow {
                let at = |yy: usize, xx: usize| v[(c * h + yy) * w + xx];
                let s = at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1);
                out[(c * oh + y) * ow + x] = 0.125 * s;
            }
        }
    }
    out
}

fn c1_warp_oracle() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0f64;
    for _ in 0..WARP_INSTANCES {
        let dims = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=12), rng.random_range(1..=12));
        let (n, c, h, w) = dims;
        let data = random_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let flow = random_vec(&mut rng, n * 2 * h * w, -4.0, 4.0);
        let got = values(&bilinear_warp(&tensor(data.clone(), &[n, c, h, w]), &tensor(flow.clone(), &[n, 2, h, w]))?);
        worst = worst.max(max_diff(&got, &naive_warp(&data, &flow, dims)));
    }

    // Sample positions stay inside the frame and away from cell edges, where
    // the warp is smooth in both data and flow.
    let mut worst_rel = 0f64;
    let eps = 1e-6;
    for _ in 0..WARP_GRAD_INSTANCES {
        let (n, c, h, w) = (1, 2, 6, 7);
        let data = random_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let weight = random_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let mut flow = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let tx = rng.random_range(0..w - 1) as f64 + rng.random_range(0.05..0.95);
                let ty = rng.random_range(0..h - 1) as f64 + rng.random_range(0.05..0.95);
                flow[y * w + x] = tx - x as f64;
                flow[h * w + y * w + x] = ty - y as f64;
            }
        }
        let loss = |d: &[f64], f: &[f64]| -> f64 {
            naive_warp(d, f, (n, c, h, w)).iter().zip(&weight).map(|(a, b)| a * b).sum()
        };
        let dv = Var::from_tensor(&tensor(data.clone(), &[n, c, h, w]))?;
        let fv = Var::from_tensor(&tensor(flow.clone(), &[n, 2, h, w]))?;
        let wt = tensor(weight.clone(), &[n, c, h, w]);
        let l = bilinear_warp(dv.as_tensor(), fv.as_tensor())?.mul(&wt)?.sum_all()?;
        let grads = l.backward()?;
        let gd = values(grads.get(dv.as_tensor()).expect("data gradient"));
        let gf = values(grads.get(fv.as_tensor()).expect("flow gradient"));
        let mut check = |analytic: &[f64], base: &[f64], is_flow: bool| {
            for i in 0..base.len() {
                let (mut hi, mut lo) = (base.to_vec(), base.to_vec());
                hi[i] += eps;
                lo[i] -= eps;
                let fd = if is_flow {
                    (loss(&data, &hi) - loss(&data, &lo)) / (2.0 * eps)
                } else {
                    (loss(&hi, &flow) - loss(&lo, &flow)) / (2.0 * eps)
                };
                let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-3);
                worst_rel = worst_rel.max(rel);
            }
        };
        check(&gd, &data, false);
        check(&gf, &flow, true);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= WARP_ORACLE_TOL && worst_rel <= WARP_GRAD_REL_TOL && secs < WARP_RUNTIME_S,
        format!(
            "max |warp - oracle| {worst:.2e} (tol {WARP_ORACLE_TOL:.0e}, {WARP_INSTANCES} instances); \
             max gradient rel err {worst_rel:.2e} (tol {WARP_GRAD_REL_TOL:.0e}); {secs:.1}s"
        ),
    )
}

fn c2_composition() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut mamvp_err, mut mmc_err, mut mvr_err) = (0f64, 0f64, 0f64);
    for _ in 0..CHAIN_INSTANCES {
        // Feature-pyramid alignment: p2 by v1, p3 by v1 + warp(v2, v1), per level.
        let (h, w, c, levels) = (16, 16, 3, 3);
        let v1 = random_vec(&mut rng, 2 * h * w, -2.0, 2.0);
        let v2 = random_vec(&mut rng, 2 * h * w, -2.0, 2.0);
        let mut p2 = Vec::new();
        let mut p3 = Vec::new();
        for l in 0..levels {
            let n = c * (h >> l) * (w >> l);
            p2.push(random_vec(&mut rng, n, -1.0, 1.0));
            p3.push(random_vec(&mut rng, n, -1.0, 1.0));
        }
        let pyr = |p: &[Vec<f64>]| FeaturePyramid {
            levels: p.iter().enumerate().map(|(l, v)| tensor(v.clone(), &[1, c, h >> l, w >> l])).collect(),
        };
        let (a3, a2) = align_pyramids(&pyr(&p3), &pyr(&p2), &tensor(v1.clone(), &[1, 2, h, w]), &tensor(v2.clone(), &[1, 2, h, w]))?;
        let (mut v1l, mut v2l) = (v1.clone(), v2.clone());
        for l in 0..levels {
            let (lh, lw) = (h >> l, w >> l);
            if l > 0 {
                v1l = naive_half_flow(&v1l, lh * 2, lw * 2);
                v2l = naive_half_flow(&v2l, lh * 2, lw * 2);
            }
            let dims = (1, c, lh, lw);
            let e2 = naive_warp(&p2[l], &v1l, dims);
            let chain = add(&v1l, &naive_warp(&v2l, &v1l, (1, 2, lh, lw)));
            let e3 = naive_warp(&p3[l], &chain, dims);
            mamvp_err = mamvp_err.max(max_diff(&values(&a2.levels[l]), &e2));
            mamvp_err = mamvp_err.max(max_diff(&values(&a3.levels[l]), &e3));
        }

        // Reference-flow chain over three buffered MVs.
        let (h, w) = (rng.random_range(4..=12), rng.random_range(4..=12));
        let v = random_vec(&mut rng, 2 * h * w, -3.0, 3.0);
        let hist: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 2 * h * w, -3.0, 3.0)).collect();
        let t = |x: &Vec<f64>| tensor(x.clone(), &[1, 2, h, w]);
        let flows = reference_flows(&t(&v), &hist.iter().map(t).collect::<Vec<_>>())?;
        let mut expect = vec![v.clone()];
        for m in &hist {
            let last = expect.last().unwrap().clone();
            expect.push(add(&last, &naive_warp(m, &last, (1, 2, h, w))));
        }
        for (f, e) in flows.iter().zip(&expect) {
            mmc_err = mmc_err.max(max_diff(&values(f), e));
        }

        // MV refinement chain: v̂_{t-1} warped by v̂′, v̂_{t-2} by v̂′ plus that result.
        let chain = warp_chain(&t(&v), &[t(&hist[0]), t(&hist[1])])?;
        let w1 = naive_warp(&hist[0], &v, (1, 2, h, w));
        let f1 = add(&v, &w1);
        let w2 = naive_warp(&hist[1], &f1, (1, 2, h, w));
        mvr_err = mvr_err.max(max_diff(&values(&chain.warped[0]), &w1));
        mvr_err = mvr_err.max(max_diff(&values(&chain.warped[1]), &w2));
        mvr_err = mvr_err.max(max_diff(&values(&chain.flows[2]), &add(&f1, &w2)));
    }

    // Unit shift: the accumulated flow to reference k is (k, 0) and carries it onto the current frame.
    let (h, w) = (32, 40);
    let clip = synth_clip(SynthPattern::Shift, 5, (h, w), 3);
    let f = |t: usize| Tensor::from_slice(clip.flows[t].as_ref().unwrap(), (1, 2, h, w), &Device::Cpu).unwrap();
    let flows = reference_flows(&f(4), &[f(3), f(2), f(1)])?;
    let margin = 6;
    let (mut shift_err, mut pixel_err) = (0f64, 0f64);
    for (k, fl) in flows.iter().enumerate() {
        let v = values(fl);
        let refk = clip.frames[4 - (k + 1)].to_tensor()?;
        let warped = values(&bilinear_warp(&refk, &fl.to_dtype(DType::F32)?)?);
        for y in margin..h - margin {
            for x in margin..w - margin {
                let (dx, dy) = (v[y * w + x], v[h * w + y * w + x]);
                shift_err = shift_err.max((dx - (k + 1) as f64).abs()).max(dy.abs());
                for c in 0..3 {
                    let i = (c * h + y) * w + x;
                    pixel_err = pixel_err.max((warped[i] - clip.frames[4].pixels[i] as f64).abs());
                }
            }
        }
    }
    let pass = mamvp_err <= CHAIN_TOL && mmc_err <= CHAIN_TOL && mvr_err <= CHAIN_TOL && shift_err <= SHIFT_FLOW_TOL;
    verdict(
        pass,
        format!(
            "pyramid alignment {mamvp_err:.2e}, reference chain {mmc_err:.2e}, mv-refine chain {mvr_err:.2e} \
             (tol {CHAIN_TOL:.0e}); shift-clip flow error {shift_err:.3} px (tol {SHIFT_FLOW_TOL}), \
             warped-reference pixel error {pixel_err:.1e}"
        ),
    )
}

fn sample(rng: &mut ChaCha8Rng, table: &CdfTable) -> i32 {
    let target = rng.random_range(0..1u32 << 16);
    let idx = table.lookup(target);
    if idx == table.escape_index() {
        let k = rng.random_range(1..2000);
        if rng.random() { table.offset() + table.len() as i32 - 1 + k } else { table.offset() - k }
    } else {
        table.offset() + idx as i32
    }
}

fn c3_entropy_coder() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut ps = ParamStore::new("acceptance", 4);
    let prior = FactorizedPrior::new(&mut ps, "prior", 8)?;
    let fact = prior.tables()?;
    let gauss = GaussianConditional::new().tables();

    let mut roundtrip_failures = 0;
    for i in 0..CODER_LATENTS {
        let len = rng.random_range(0..1500);
        let (tables, ids): (&TableSet, Vec<usize>) = if i % 2 == 0 {
            let (c, hw) = (fact.len(), len / fact.len() + 1);
            let ids = channel_ids(1, c, 1, hw);
            (&fact, ids[..len.min(ids.len())].to_vec())
        } else {
            (&gauss, (0..len).map(|_| rng.random_range(0..gauss.len())).collect())
        };
        let vals: Vec<i32> = ids
            .iter()
            .map(|&t| {
                if rng.random_range(0..200) == 0 {
                    rng.random_range(-32768..=32768)
                } else {
                    sample(&mut rng, tables.get(t).unwrap())
                }
            })
            .collect();
        let payload = encode_symbols(&vals, &ids, tables)?;
        if decode_symbols(&payload, &ids, tables)? != vals {
            roundtrip_failures += 1;
        }
    }

    let pmfs: [&[f64]; 4] = [
        &[0.25; 4],
        &[0.97, 0.01, 0.01, 0.01],
        &[0.5, 0.25, 0.125, 0.125],
        &[1.0 - 2e-6, 1e-6, 5e-7, 5e-7],
    ];
    let mut exhaustive = 0usize;
    for pmf in pmfs {
        let t = TableSet::new(vec![CdfTable::from_pmf(0, pmf)?]);
        for len in 1..=CODER_EXHAUSTIVE_LEN {
            for code in 0..4u32.pow(len) {
                let vals: Vec<i32> = (0..len).map(|k| ((code >> (2 * k)) & 3) as i32).collect();
                let ids = vec![0; vals.len()];
                if decode_symbols(&encode_symbols(&vals, &ids, &t)?, &ids, &t)? != vals {
                    roundtrip_failures += 1;
                }
                exhaustive += 1;
            }
        }
    }

    let mut worst_excess = f64::NEG_INFINITY;
    let mut streams = 0;
    for &n in &[10_000usize, 100_000] {
        for &scale_id in &[0usize, 10, 20, 30, 45, 63] {
            let ids = vec![scale_id; n];
            let vals: Vec<i32> = ids.iter().map(|&t| sample(&mut rng, gauss.get(t).unwrap())).collect();
            let est = gauss.bits(&vals, &ids)?;
            let bits = 8.0 * encode_symbols(&vals, &ids, &gauss)?.len() as f64;
            worst_excess = worst_excess.max(bits - (est * (1.0 + CODER_REL_SLACK) + CODER_ABS_SLACK_BITS));
            streams += 1;
        }
        let ids = channel_ids(1, fact.len(), 1, n / fact.len());
        let vals: Vec<i32> = ids.iter().map(|&t| sample(&mut rng, fact.get(t).unwrap())).collect();
        let est = fact.bits(&vals, &ids)?;
        let bits = 8.0 * encode_symbols(&vals, &ids, &fact)?.len() as f64;
        worst_excess = worst_excess.max(bits - (est * (1.0 + CODER_REL_SLACK) + CODER_ABS_SLACK_BITS));
        streams += 1;
    }

    let dev = &Device::Cpu;
    let p = GaussianConditional::likelihood(&Tensor::new(&[0f64], dev)?, &Tensor::new(&[1f64], dev)?)?;
    let gauss_bits = -values(&p)[0].log2();
    let pass = roundtrip_failures == 0 && worst_excess <= 0.0 && (gauss_bits - GAUSS_BITS_TARGET).abs() <= GAUSS_BITS_TOL;
    verdict(
        pass,
        format!(
            "{roundtrip_failures} round-trip failures over {CODER_LATENTS} latents and {exhaustive} exhaustive 4-symbol strings; \
             worst payload excess over entropy+0.1%+64b {worst_excess:.1} bits ({streams} streams); \
             N(0,1) symbol 0 costs {gauss_bits:.4} bits"
        ),
    )
}

fn random_refs(h: usize, w: usize, seed: u64) -> References {
    References {
        frames: [0, 1, 2, 3].map(|i| seeded_uniform(&[1, 3, h, w], 0.0, 1.0, seed + i).unwrap()),
        mvs: [4, 5, 6].map(|i| seeded_uniform(&[1, 2, h, w], -2.0, 2.0, seed + i).unwrap()),
    }
}

fn exact_diff(a: &Tensor, b: &Tensor) -> f64 {
    max_diff(&values(a), &values(b))
}

fn c4_structural_identities() -> Result<Verdict> {
    let (mut mc, mut mvr, mut full) = (0f64, 0f64, 0f64);
    for seed in 0..4u64 {
        let model = Model::new(ModelConfig::desk(), seed)?;
        let refs = random_refs(64, 64, 10 * seed);
        let v = seeded_uniform(&[1, 2, 64, 64], -3.0, 3.0, 100 + seed)?;
        let (prediction, _) = model.compensate(&v, &refs)?;
        mc = mc.max(exact_diff(&prediction, &bilinear_warp(&refs.frames[0], &v)?));
        mvr = mvr.max(exact_diff(&model.refine_mv(&v, &refs)?, &v));
        let x = seeded_uniform(&[1, 3, 64, 64], 0.0, 1.0, 200 + seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.forward(&x, &refs, mlvc_core::model::CodingMode::Full, mlvc_core::entropy::QuantMode::Round, &mut rng)?;
        full = full.max(exact_diff(&out.prediction, &bilinear_warp(&refs.frames[0], &out.mv)?));
    }
    verdict(
        mc == 0.0 && mvr == 0.0 && full == 0.0,
        format!("max |x̄ - warp(x̂, v̂)| {mc:e} (in full pass {full:e}); max |v̂ - v̂′| {mvr:e}; 4 seeds, exact equality required"),
    )
}

fn tiny_clip(frames: usize, size: (usize, usize), seed: u64) -> Vec<Frame> {
    synth_motion_clip(SynthMotion::shift(1.0, 0.5), frames, size, seed).frames
}

fn c5_buffers() -> Result<Verdict> {
    let model = Model::new(ModelConfig::desk(), 1)?;
    let frames = tiny_clip(10, (48, 56), 5);
    let plugin = IntraPlugin::LosslessStore;
    let mut enc = Encoder::new(&model, plugin.clone(), 0);
    let mut dec = Decoder::new(&model, plugin, OriginalSize { height: 48, width: 56 });
    let mut problems = Vec::new();
    for (t, f) in frames.iter().enumerate() {
        let e = enc.encode_frame(f)?;
        let (d, _) = dec.decode_unit(&e.unit)?;
        if d.pixels != e.recon.pixels {
            problems.push(format!("frame {t}: decoded pixels differ"));
        }
        if enc.buffers().snapshot()? != dec.buffers().snapshot()? {
            problems.push(format!("frame {t}: buffer snapshots differ"));
        }
        let refs = enc.buffers().references()?;
        if t == 0 {
            let i = values(&refs.frames[0]);
            if refs.frames.iter().any(|f| values(f) != i) {
                problems.push("after the I-frame the frame buffer is not [I, I, I, I]".into());
            }
            if refs.mvs.iter().any(|m| values(m).iter().any(|&v| v != 0.0)) {
                problems.push("MV buffer is not zero before the first P-frame".into());
            }
        }
        let distinct = enc.buffers().distinct_frames();
        if distinct != (t + 1).min(4) {
            problems.push(format!("frame {t}: {distinct} distinct references"));
        }
    }
    let ok = problems.is_empty();
    verdict(
        ok,
        if ok {
            "I-frame fills all four slots, MVs start at zero, encoder and decoder buffers equal after each of 10 frames".to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn c6_bitstream() -> Result<Verdict> {
    let model = Model::new(ModelConfig::desk(), 2)?;
    let (h, w, n) = (56, 72, 8);
    let frames = tiny_clip(n, (h, w), 6);
    let opts = EncodeOptions::default();
    let enc = encode_sequence(&model, &frames, &opts)?;
    let again = encode_sequence(&model, &frames, &opts)?;
    let dec = decode_sequence(&model, &enc.bytes, &opts.plugin)?;
    let exact = dec.frames.len() == n && dec.frames.iter().zip(&enc.recons).all(|(a, b)| a.pixels == b.pixels);
    let report = evaluate_sequence(&model, "c6", LAMBDA, &frames, &opts, ColorMode::Rgb)?;
    let oracle = (enc.bytes.len() * 8) as f64 / (w * h * n) as f64;
    let bpp_exact = report.summary.bpp == oracle && sequence_bpp(enc.bytes.len(), w, h, n) == oracle;
    let per_frame: f64 = report.records.iter().map(|r| r.bpp_total).sum::<f64>() / n as f64;
    verdict(
        exact && bpp_exact && enc.bytes == again.bytes,
        format!(
            "{n} frames {w}x{h}: decoder output equals encoder recon: {exact}; deterministic bytes: {}; \
             bpp {} vs bytes*8/pixels {oracle} (frame units {per_frame:.6} + header)",
            enc.bytes == again.bytes,
            report.summary.bpp
        ),
    )
}

fn c9_metrics() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let a: Vec<f32> = (0..3 * h * w).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..3 * h * w).map(|_| rng.random()).collect();
        let mut s = 0f64;
        for (x, y) in a.iter().zip(&b) {
            let d = *x as f64 - *y as f64;
            s += d * d;
        }
        let mse = s / a.len() as f64;
        let oracle = if mse == 0.0 { 99.0 } else { (10.0 * (1.0 / mse).log10()).min(99.0) };
        let fa = Frame::new(a, h, w, 0, FrameKind::P)?;
        let fb = Frame::new(b, h, w, 0, FrameKind::P)?;
        worst = worst.max((psnr(&fa, &fb, ColorMode::Rgb)? - oracle).abs());
    }
    let textured = |seed: u64, h: usize, w: usize| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = Texture::random(&mut r, 64);
        let mut px = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    px.push(t.sample(c, x as f64, y as f64).clamp(0.0, 1.0) as f32);
                }
            }
        }
        Frame::new(px, h, w, 0, FrameKind::P).unwrap()
    };
    let mut ident = 0f64;
    let mut asym = 0f64;
    for seed in 0..3 {
        let a = textured(seed, 160, 192);
        let b = textured(seed + 50, 160, 192);
        ident = ident.max((msssim(&a, &a, ColorMode::Rgb)? - 1.0).abs());
        asym = asym.max((msssim(&a, &b, ColorMode::Rgb)? - msssim(&b, &a, ColorMode::Rgb)?).abs());
    }
    verdict(
        worst <= PSNR_ORACLE_TOL && ident == 0.0 && asym <= MSSSIM_SYM_TOL,
        format!("PSNR vs scalar oracle {worst:.1e} (tol {PSNR_ORACLE_TOL:.0e}); MS-SSIM identity error {ident:e}, asymmetry {asym:.1e}"),
    )
}

/// Trained artifacts shared by criteria 7 and 8.
struct Trained {
    dir: tempfile::TempDir,
    seconds: f64,
    phases: Vec<(String, f64)>,
    freeze_violations: Vec<String>,
    error: Option<String>,
}

fn copy_model(dir: &std::path::Path) -> Result<Model> {
    Ok(registry::load_model(dir)?.0)
}

fn train_progressive(cfg: &TrainConfig, frames: &[Vec<Frame>]) -> Trained {
    let dir = tempfile::tempdir().expect("temp dir");
    let clips = clip_tensors(frames).expect("clip tensors");
    let mut model = Model::new(ModelConfig::desk(), cfg.seed).expect("model");
    let mut log = std::io::sink();
    let start = Instant::now();
    let mut t = Trained {
        dir,
        seconds: 0.0,
        phases: Vec::new(),
        freeze_violations: Vec::new(),
        error: None,
    };
    for phase in progressive_schedule(cfg) {
        let frozen = phase.frozen();
        let before: Vec<_> = frozen.iter().map(|&id| model.store(id).snapshot().unwrap()).collect();
        match run_phase(&mut model, &phase, cfg, &clips, &mut log) {
            Ok(r) => t.phases.push((r.id.clone(), r.final_loss)),
            Err(e) => {
                t.error = Some(format!("phase {}: {e}", phase.id));
                break;
            }
        }
        let after: Vec<_> = frozen.iter().map(|&id| model.store(id).snapshot().unwrap()).collect();
        for ((id, b), a) in frozen.iter().zip(&before).zip(&after) {
            if a != b {
                t.freeze_violations.push(format!("{id} in phase {}", phase.id));
            }
        }
        registry::save_model(&model, &t.dir.path().join(&phase.id), cfg.lambda, Some(&phase.id)).expect("checkpoint");
    }
    t.seconds = start.elapsed().as_secs_f64();
    t
}

fn c7_training(t: &Trained) -> Result<Verdict> {
    if let Some(e) = &t.error {
        return verdict(false, format!("training failed: {e}"));
    }
    let model = copy_model(&t.dir.path().join("6b"))?;
    let clip = toy_training_clip();
    let r = evaluate_sequence(&model, "train", LAMBDA, &clip.frames, &EncodeOptions::default(), ColorMode::Rgb)?;
    let psnr_p = r.summary.psnr_p.unwrap_or(0.0);
    let phases: Vec<String> = t.phases.iter().map(|(id, l)| format!("{id}:{l:.1}")).collect();
    verdict(
        psnr_p > TRAIN_PSNR_TARGET && t.seconds <= TRAIN_BUDGET_S && t.freeze_violations.is_empty(),
        format!(
            "P-frame PSNR {psnr_p:.2} dB (all frames {:.2} dB, target > {TRAIN_PSNR_TARGET}), P-only {:.4} bpp; \
             {:.0}s of {TRAIN_BUDGET_S:.0}s; {} phases, frozen modules unchanged: {}; final losses {}",
            r.summary.psnr,
            r.summary.bpp_p_only.unwrap_or(f64::NAN),
            t.seconds,
            t.phases.len(),
            if t.freeze_violations.is_empty() { "yes".to_string() } else { t.freeze_violations.join(", ") },
            phases.join(" ")
        ),
    )
}

fn line(name: &str, s: &CorpusScore) -> String {
    format!(
        "{name}: psnr {:.2} dB, bpp {:.4} (mv {:.4}, res {:.4}), mvd share {:.1}%, J {:.2}",
        s.psnr,
        s.bpp,
        s.bpp_mv,
        s.bpp_res,
        100.0 * s.mvd_share,
        s.rd_cost
    )
}

/// Models here are trained on the same toy corpus they are scored on.
fn c8_ablations(cfg: &TrainConfig) -> Result<Verdict> {
    let corpus = toy_corpus();
    let frames: Vec<Vec<Frame>> = corpus.iter().map(|(_, f)| f.clone()).collect();
    let t = train_progressive(cfg, &frames);
    if let Some(e) = &t.error {
        return verdict(false, format!("progressive training failed: {e}"));
    }
    let clips = clip_tensors(&frames)?;
    let mut notes = Vec::new();

    // (a) After the MAMVP phases versus the same stage-3 model trained jointly
    // for as many steps with MAMVP disabled.
    let with = copy_model(&t.dir.path().join("4b"))?;
    let mut control = copy_model(&t.dir.path().join("3"))?;
    let stage3 = progressive_schedule(cfg).into_iter().find(|p| p.id == "3").expect("phase 3");
    let ctrl = Phase {
        id: "4-control".into(),
        stage: 4,
        steps: cfg.steps.new_module + cfg.steps.joint,
        ..stage3
    };
    run_phase(&mut control, &ctrl, cfg, &clips, &mut std::io::sink())?;
    let (sa, _) = score_corpus(&with, &corpus, LAMBDA)?;
    let (sc, _) = score_corpus(&control, &corpus, LAMBDA)?;
    let a = sa.bpp_mv < sc.bpp_mv && sa.psnr >= sc.psnr - MATCHED_PSNR_TOL;
    notes.push(format!("8a {}: [{}] vs [{}]", pass_word(a), line("mamvp", &sa), line("no-mamvp", &sc)));

    // (b) Final model with four versus two references.
    let final4 = copy_model(&t.dir.path().join("6b"))?;
    let mut final2 = copy_model(&t.dir.path().join("6b"))?;
    final2.config.references = 2;
    let (s4, _) = score_corpus(&final4, &corpus, LAMBDA)?;
    let (s2, _) = score_corpus(&final2, &corpus, LAMBDA)?;
    let b = s4.rd_cost <= s2.rd_cost;
    notes.push(format!(
        "8b {}: [{}] vs [{}], dPSNR {:+.3} dB, dbpp {:+.4}",
        pass_word(b),
        line("refs4", &s4),
        line("refs2", &s2),
        s4.psnr - s2.psnr,
        s4.bpp - s2.bpp
    ));

    // (c) MVD share of from-scratch versus progressive training at the same step budget.
    let mut scratch = Model::new(ModelConfig::desk(), cfg.seed)?;
    let scratch_error = run_phase(&mut scratch, &scratch_phase(cfg, cfg.total_steps()), cfg, &clips, &mut std::io::sink()).err();
    let c = match scratch_error {
        Some(e) => {
            notes.push(format!("8c FAIL: scratch training failed: {e}"));
            false
        }
        None => {
            let (ss, _) = score_corpus(&scratch, &corpus, LAMBDA)?;
            let c = ss.mvd_share < SCRATCH_SHARE_MAX && s4.mvd_share > PROGRESSIVE_SHARE_MIN;
            notes.push(format!(
                "8c {}: scratch mvd share {:.1}% (need < {:.0}%), progressive {:.1}% (need > {:.0}%); [{}]",
                pass_word(c),
                100.0 * ss.mvd_share,
                100.0 * SCRATCH_SHARE_MAX,
                100.0 * s4.mvd_share,
                100.0 * PROGRESSIVE_SHARE_MIN,
                line("scratch", &ss)
            ));
            c
        }
    };
    verdict(a && b && c, notes.join("\n    "))
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; this target has a single entry point.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failed = 0;
    let mut run = |id: &str, what: &str, f: &mut dyn FnMut() -> Result<Verdict>| {
        let start = Instant::now();
        let v = f().unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e}"),
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {id} {}: {what} ({:.1}s)\n    {}",
            pass_word(v.pass),
            start.elapsed().as_secs_f64(),
            v.detail
        );
    };
    run("1", "warp oracle", &mut c1_warp_oracle);
    run("2", "composition correctness", &mut c2_composition);
    run("3", "entropy coder", &mut c3_entropy_coder);
    run("4", "structural identities at init", &mut c4_structural_identities);
    run("5", "buffer state machine", &mut c5_buffers);
    run("6", "bitstream round trip", &mut c6_bitstream);
    let cfg = TrainConfig::desk(LAMBDA);
    run("7", "training smoke", &mut || {
        c7_training(&train_progressive(&cfg, &[toy_training_clip().frames]))
    });
    run("8", "directional ablations", &mut || c8_ablations(&cfg));
    run("9", "metric kernels", &mut c9_metrics);
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
