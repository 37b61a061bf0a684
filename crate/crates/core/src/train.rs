//! Rate-distortion objective, progressive phase schedule and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::media::Frame;
use crate::model::{CodingMode, Enabled, Model, ModuleId, References};
use crate::nn::scalar_f32;
use crate::pipeline::ReferenceBuffers;
use crate::registry;

/// 8-bit-scale MSE: `D = 255² · MSE` on normalized pixels.
pub const DISTORTION_SCALE_8BIT: f64 = 255.0 * 255.0;
pub const LAMBDAS: [f64; 4] = [16.0, 24.0, 40.0, 64.0];

/// `J = D + λ (R_mvd + R_res)` on plain numbers.
pub fn rd_cost(d: f64, r_mvd: f64, r_res: f64, lambda: f64) -> f64 {
    d + lambda * (r_mvd + r_res)
}

/// Differentiable terms of one frame's objective. Rates are in bpp.
#[derive(Debug, Clone)]
pub struct RdLoss {
    pub j: Tensor,
    pub d: Tensor,
    pub bpp_mvd: Tensor,
    pub bpp_res: Tensor,
}

/// `bits_*` are total bits for the batch; `pixels` is `N · H · W`.
pub fn rd_loss(
    x: &Tensor,
    x_hat: &Tensor,
    bits_mvd: &Tensor,
    bits_res: &Tensor,
    lambda: f64,
    distortion_scale: f64,
    pixels: usize,
) -> Result<RdLoss> {
    let d = ((x - x_hat)?.sqr()?.mean_all()? * distortion_scale)?;
    let bpp_mvd = (bits_mvd / pixels as f64)?;
    let bpp_res = (bits_res / pixels as f64)?;
    let j = (&d + ((&bpp_mvd + &bpp_res)? * lambda)?)?;
    if !scalar_f32(&j)?.is_finite() {
        return Err(Error::NonFinite("rate-distortion loss"));
    }
    Ok(RdLoss { j, d, bpp_mvd, bpp_res })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSteps {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
    /// Each 'a' phase (new module alone).
    pub new_module: usize,
    /// Each 'b' phase (joint fine-tuning).
    pub joint: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub distortion_scale: f64,
    pub steps: PhaseSteps,
    /// Learning rate of phases that train newly added modules.
    pub lr_new: f64,
    /// Learning rate of joint fine-tuning phases.
    pub lr_joint: f64,
    /// Number of evenly spaced halvings within each phase.
    pub lr_halvings: usize,
    /// Steps of linear learning-rate ramp at the start of each phase.
    pub lr_warmup: usize,
    /// Learning-rate multiplier for entropy-model parameters.
    pub prior_lr_scale: f64,
    pub adam_beta1: f64,
    /// Lets the motion estimator join the joint phases.
    pub train_me: bool,
    /// Stage 1 predicts from original frames instead of its own predictions.
    pub stage1_original_refs: bool,
    /// Steps before the divergence check starts.
    pub warmup: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn full(lambda: f64) -> Self {
        Self {
            lambda,
            distortion_scale: DISTORTION_SCALE_8BIT,
            steps: PhaseSteps {
                stage1: 2000,
                stage2: 2000,
                stage3: 2000,
                new_module: 2000,
                joint: 2000,
            },
            lr_new: 5e-5,
            lr_joint: 1e-5,
            lr_halvings: 5,
            lr_warmup: 0,
            prior_lr_scale: 1.0,
            adam_beta1: 0.9,
            train_me: false,
            stage1_original_refs: true,
            warmup: 50,
            seed: 0,
        }
    }

    /// Single-core overfitting budget with proportionally larger learning rates.
    pub fn desk(lambda: f64) -> Self {
        Self {
            steps: PhaseSteps {
                stage1: 300,
                stage2: 400,
                stage3: 200,
                new_module: 150,
                joint: 250,
            },
            lr_new: 1e-3,
            lr_joint: 2e-4,
            lr_warmup: 0,
            prior_lr_scale: 10.0,
            warmup: 30,
            ..Self::full(lambda)
        }
    }

    pub fn preset(name: &str, lambda: f64) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(lambda)),
            "desk" => Ok(Self::desk(lambda)),
            other => Err(Error::Config(format!("unknown training preset '{other}'"))),
        }
    }

    pub fn total_steps(&self) -> usize {
        progressive_schedule(self).iter().map(|p| p.steps).sum()
    }
}

/// One phase of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// `1`, `2`, `3`, `4a`, `4b`, … or `scratch`.
    pub id: String,
    pub stage: u8,
    pub trainable: Vec<ModuleId>,
    pub enabled: Enabled,
    pub mode: CodingMode,
    pub lr: f64,
    pub steps: usize,
    pub original_refs: bool,
}

impl Phase {
    pub fn frozen(&self) -> Vec<ModuleId> {
        ModuleId::ALL.into_iter().filter(|m| !self.trainable.contains(m)).collect()
    }

    pub fn is_joint(&self) -> bool {
        self.id.ends_with('b') || self.id == "3"
    }
}

/// The nine phases: motion compensation, the two codecs, their joint tuning,
/// then MAMVP, MV refinement and residual refinement each added alone and
/// then tuned jointly with everything before.
pub fn progressive_schedule(cfg: &TrainConfig) -> Vec<Phase> {
    use ModuleId::*;
    let me: Vec<ModuleId> = if cfg.train_me { vec![Me] } else { vec![] };
    let joint = |extra: &[ModuleId]| -> Vec<ModuleId> {
        me.iter().copied().chain([Mmc, MvdCodec, ResCodec]).chain(extra.iter().copied()).collect()
    };
    let phase = |id: &str, stage: u8, trainable: Vec<ModuleId>, enabled: Enabled, lr: f64, steps: usize| Phase {
        id: id.to_string(),
        stage,
        trainable,
        enabled,
        mode: CodingMode::Full,
        lr,
        steps,
        original_refs: false,
    };
    let e = |mamvp, mv_refine, res_refine| Enabled {
        mamvp,
        mv_refine,
        res_refine,
    };
    let s = &cfg.steps;
    let mut p1 = phase("1", 1, vec![Mmc], Enabled::BASELINE, cfg.lr_new, s.stage1);
    p1.mode = CodingMode::MotionOnly;
    p1.original_refs = cfg.stage1_original_refs;
    vec![
        p1,
        phase("2", 2, vec![MvdCodec, ResCodec], Enabled::BASELINE, cfg.lr_new, s.stage2),
        phase("3", 3, joint(&[]), Enabled::BASELINE, cfg.lr_joint, s.stage3),
        phase("4a", 4, vec![Mamvp], e(true, false, false), cfg.lr_new, s.new_module),
        phase("4b", 4, joint(&[Mamvp]), e(true, false, false), cfg.lr_joint, s.joint),
        phase("5a", 5, vec![MvRefine], e(true, true, false), cfg.lr_new, s.new_module),
        phase("5b", 5, joint(&[Mamvp, MvRefine]), e(true, true, false), cfg.lr_joint, s.joint),
        phase("6a", 6, vec![ResRefine], Enabled::ALL, cfg.lr_new, s.new_module),
        phase("6b", 6, joint(&[Mamvp, MvRefine, ResRefine]), Enabled::ALL, cfg.lr_joint, s.joint),
    ]
}

/// All modules trained together for `steps`, as the control run.
pub fn scratch_phase(cfg: &TrainConfig, steps: usize) -> Phase {
    let trainable = ModuleId::ALL
        .into_iter()
        .filter(|&m| m != ModuleId::Me || cfg.train_me)
        .collect();
    Phase {
        id: "scratch".into(),
        stage: 0,
        trainable,
        enabled: Enabled::ALL,
        mode: CodingMode::Full,
        lr: cfg.lr_new,
        steps,
        original_refs: false,
    }
}

/// Learning rate at `step` with `halvings` evenly spaced halvings.
pub fn lr_at(base: f64, step: usize, steps: usize, halvings: usize) -> f64 {
    if steps == 0 {
        return base;
    }
    let k = (step * (halvings + 1) / steps).min(halvings);
    base / f64::powi(2.0, k as i32)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub stage: u8,
    pub step: usize,
    pub j: f64,
    pub d: f64,
    pub bpp_mv: f64,
    pub bpp_res: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub id: String,
    pub steps: usize,
    /// Mean loss over the first `warmup` steps.
    pub initial_loss: f64,
    /// Mean loss over the last `warmup` steps.
    pub final_loss: f64,
    pub mean_bpp_mv: f64,
    pub mean_bpp_res: f64,
    /// Frozen modules, all verified bit-identical after the phase.
    pub frozen: Vec<ModuleId>,
    pub seconds: f64,
}

/// Frames of each clip as `(1, 3, H, W)` tensors.
pub fn clip_tensors(clips: &[Vec<Frame>]) -> Result<Vec<Vec<Tensor>>> {
    clips
        .iter()
        .map(|c| {
            if c.len() < 2 {
                return Err(Error::SequenceTooShort { have: c.len(), need: 2 });
            }
            c.iter().map(Frame::to_tensor).collect()
        })
        .collect()
}

/// Walks the clips frame by frame, resetting the buffers at each clip start.
struct Cursor {
    clip: usize,
    t: usize,
    buffers: ReferenceBuffers,
}

impl Cursor {
    fn new() -> Self {
        Self {
            clip: 0,
            t: 0,
            buffers: ReferenceBuffers::new(),
        }
    }

    /// Returns `(clip, t)` of the next P-frame, resetting buffers on wrap.
    fn next(&mut self, clips: &[Vec<Tensor>]) -> (usize, usize) {
        self.t += 1;
        if self.t >= clips[self.clip].len() || !self.buffers.is_initialized() {
            if self.buffers.is_initialized() {
                self.clip = (self.clip + 1) % clips.len();
            }
            self.t = 1;
            self.buffers.reset(clips[self.clip][0].clone());
        }
        (self.clip, self.t)
    }
}

fn frozen_digests(model: &Model, ids: &[ModuleId]) -> Result<Vec<[u8; 32]>> {
    ids.iter().map(|&id| model.store(id).checksum()).collect()
}

/// `(weights, entropy-model parameters)` of the given modules.
fn trainable_vars(model: &Model, ids: &[ModuleId]) -> (Vec<Var>, Vec<Var>) {
    let (mut weights, mut priors) = (Vec::new(), Vec::new());
    for &id in ids {
        for (k, v) in model.store(id).named() {
            if k.starts_with("prior") {
                priors.push(v.clone());
            } else {
                weights.push(v.clone());
            }
        }
    }
    (weights, priors)
}

/// Trains one phase in place and verifies the freeze contract.
pub fn run_phase(
    model: &mut Model,
    phase: &Phase,
    cfg: &TrainConfig,
    clips: &[Vec<Tensor>],
    log: &mut dyn Write,
) -> Result<PhaseReport> {
    if clips.is_empty() {
        return Err(Error::Config("no training clips".into()));
    }
    let start = Instant::now();
    model.enabled = phase.enabled;
    model.set_trainable(&phase.trainable);
    let frozen = phase.frozen();
    let before = frozen_digests(model, &frozen)?;
    let params = ParamsAdamW {
        lr: phase.lr,
        beta1: cfg.adam_beta1,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let (weights, priors) = trainable_vars(model, &phase.trainable);
    let mut opt = AdamW::new(weights, params.clone())?;
    let mut opt_prior = AdamW::new(priors, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ phase.id.bytes().fold(0u64, |h, b| h.wrapping_mul(31) + b as u64));
    let mut cursor = Cursor::new();
    let mut original = ReferenceBuffers::new();
    let window = cfg.warmup.max(1);
    let mut losses = Vec::with_capacity(phase.steps);
    let (mut sum_mv, mut sum_res) = (0.0, 0.0);
    for step in 0..phase.steps {
        let ramp = if step < cfg.lr_warmup { (step + 1) as f64 / cfg.lr_warmup as f64 } else { 1.0 };
        let lr = ramp * lr_at(phase.lr, step, phase.steps, cfg.lr_halvings);
        opt.set_learning_rate(lr);
        opt_prior.set_learning_rate(lr * cfg.prior_lr_scale);
        let (c, t) = cursor.next(clips);
        let x = &clips[c][t];
        let refs: References = if phase.original_refs {
            if t == 1 {
                original.reset(clips[c][0].clone());
            }
            original.references()?
        } else {
            cursor.buffers.references()?
        };
        let (_, _, h, w) = x.dims4()?;
        let out = model.forward(x, &refs, phase.mode, QuantMode::Noise, &mut rng)?;
        let loss = rd_loss(x, &out.recon, &out.bits_mvd, &out.bits_res, cfg.lambda, cfg.distortion_scale, h * w)
            .map_err(|e| {
                let v = |t: &Tensor| t.abs().and_then(|a| a.max_all()).and_then(|m| m.to_scalar::<f32>()).unwrap_or(f32::NAN);
                let reason = format!(
                    "{e} (bits mvd {}, res {}, max |recon| {}, max |mv| {}, max |flow| {}, max |mv_pred| {})",
                    v(&out.bits_mvd),
                    v(&out.bits_res),
                    v(&out.recon),
                    v(&out.mv),
                    v(&out.flow),
                    v(&out.mv_pred)
                );
                divergence(phase, step, reason)
            })?;
        let grads = loss.j.backward()?;
        opt.step(&grads)?;
        opt_prior.step(&grads)?;

        let recon = out.recon.detach().clamp(0f32, 1f32)?;
        cursor.buffers.push(recon, out.mv.detach());
        if phase.original_refs {
            original.push(x.clone(), out.mv.detach());
        }
        let rec = LogRecord {
            phase: phase.id.clone(),
            stage: phase.stage,
            step,
            j: scalar_f32(&loss.j)? as f64,
            d: scalar_f32(&loss.d)? as f64,
            bpp_mv: scalar_f32(&loss.bpp_mvd)? as f64,
            bpp_res: scalar_f32(&loss.bpp_res)? as f64,
            lr,
        };
        serde_json::to_writer(&mut *log, &rec)?;
        writeln!(log).map_err(|e| Error::io("training log", e))?;
        sum_mv += rec.bpp_mv;
        sum_res += rec.bpp_res;
        losses.push(rec.j);
        if step >= 2 * window {
            let initial = mean(&losses[..window]);
            let recent = mean(&losses[losses.len() - window..]);
            if recent > 2.0 * initial {
                return Err(divergence(
                    phase,
                    step,
                    format!("mean loss {recent:.3} over the last {window} steps exceeds twice the initial {initial:.3}"),
                ));
            }
        }
    }
    log.flush().map_err(|e| Error::io("training log", e))?;
    if frozen_digests(model, &frozen)? != before {
        return Err(Error::FreezeViolation(phase.id.clone()));
    }
    model.set_trainable(&[]);
    let n = phase.steps.max(1) as f64;
    Ok(PhaseReport {
        id: phase.id.clone(),
        steps: phase.steps,
        initial_loss: mean(&losses[..window.min(losses.len())]),
        final_loss: mean(&losses[losses.len().saturating_sub(window)..]),
        mean_bpp_mv: sum_mv / n,
        mean_bpp_res: sum_res / n,
        frozen,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn divergence(phase: &Phase, step: usize, reason: String) -> Error {
    Error::Divergence {
        phase: phase.id.clone(),
        step,
        reason,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Where a training run writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("train.jsonl")
    }

    pub fn checkpoint(&self, phase: &str) -> PathBuf {
        self.root.join(format!("phase_{phase}"))
    }
}

fn open_log(paths: &RunPaths) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    let path = paths.log();
    let f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// Runs `phases` in order, checkpointing after each one.
pub fn run_phases(
    model: &mut Model,
    phases: &[Phase],
    cfg: &TrainConfig,
    clips: &[Vec<Tensor>],
    paths: &RunPaths,
) -> Result<Vec<PhaseReport>> {
    let mut log = open_log(paths)?;
    let mut reports = Vec::new();
    for phase in phases {
        let report = run_phase(model, phase, cfg, clips, &mut log)?;
        log::info!(
            "phase {} done in {:.1}s: loss {:.2} -> {:.2}",
            report.id,
            report.seconds,
            report.initial_loss,
            report.final_loss
        );
        registry::save_model(model, &paths.checkpoint(&phase.id), cfg.lambda, Some(&phase.id))?;
        reports.push(report);
    }
    let summary = paths.root.join("phases.json");
    registry::write_atomic(&summary, &serde_json::to_vec_pretty(&reports)?)?;
    Ok(reports)
}

/// Runs one scheduled phase from the previous phase's checkpoint.
pub fn run_stage(id: &str, cfg: &TrainConfig, clips: &[Vec<Tensor>], paths: &RunPaths) -> Result<PhaseReport> {
    let schedule = progressive_schedule(cfg);
    let pos = schedule
        .iter()
        .position(|p| p.id == id)
        .ok_or_else(|| Error::Config(format!("unknown phase '{id}'")))?;
    let phase = &schedule[pos];
    let mut model = if pos == 0 {
        registry::load_model(&paths.root.join("init")).map(|(m, _)| m)?
    } else {
        registry::load_model(&paths.checkpoint(&schedule[pos - 1].id))?.0
    };
    let mut log = open_log(paths)?;
    let report = run_phase(&mut model, phase, cfg, clips, &mut log)?;
    registry::save_model(&model, &paths.checkpoint(id), cfg.lambda, Some(id))?;
    Ok(report)
}

/// Writes the untrained model that stage 1 starts from.
pub fn write_initial(model: &Model, cfg: &TrainConfig, paths: &RunPaths) -> Result<()> {
    registry::save_model(model, &paths.root.join("init"), cfg.lambda, None)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{synth_motion_clip, SynthMotion};
    use crate::model::ModelConfig;
    use crate::nn::seeded_uniform;

    #[test]
    fn rd_cost_examples() {
        assert_eq!(rd_cost(0.0, 0.0, 0.0, 64.0), 0.0);
        assert!((rd_cost(0.5, 0.02, 0.08, 16.0) - 2.1).abs() < 1e-12);
        let x = Tensor::new(&[[0.5f32, 0.5]], &candle_core::Device::Cpu).unwrap();
        let bits = Tensor::new(0.0f32, &candle_core::Device::Cpu).unwrap();
        let l = rd_loss(&x, &x, &bits, &bits, 16.0, 1.0, 2).unwrap();
        assert_eq!(scalar_f32(&l.j).unwrap(), 0.0);
    }

    #[test]
    fn distortion_gradient_matches_finite_differences() {
        let x = seeded_uniform(&[1, 3, 4, 4], 0.0, 1.0, 1).unwrap();
        let y = Var::from_tensor(&seeded_uniform(&[1, 3, 4, 4], 0.0, 1.0, 2).unwrap()).unwrap();
        let zero = Tensor::new(3.0f32, &candle_core::Device::Cpu).unwrap();
        let loss = |lam: f64, t: &Tensor| rd_loss(&x, t, &zero, &zero, lam, DISTORTION_SCALE_8BIT, 16).unwrap();
        let g16 = loss(16.0, y.as_tensor()).j.backward().unwrap();
        let g64 = loss(64.0, y.as_tensor()).j.backward().unwrap();
        let a = g16.get(&y).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = g64.get(&y).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let xs = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let ys = y.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let n = ys.len() as f64;
        let j = |v: &[f64]| v.iter().zip(&xs).map(|(p, &q)| (p - q as f64).powi(2)).sum::<f64>() / n * DISTORTION_SCALE_8BIT;
        for i in 0..ys.len() {
            let base: Vec<f64> = ys.iter().map(|&v| v as f64).collect();
            let (mut up, mut dn) = (base.clone(), base);
            up[i] += 1e-4;
            dn[i] -= 1e-4;
            let fd = (j(&up) - j(&dn)) / 2e-4;
            assert!((fd - a[i] as f64).abs() <= 1e-4 * fd.abs().max(1.0), "{i}: {fd} vs {}", a[i]);
        }
    }

    #[test]
    fn schedule_contract() {
        let cfg = TrainConfig::desk(64.0);
        let s = progressive_schedule(&cfg);
        let ids: Vec<_> = s.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["1", "2", "3", "4a", "4b", "5a", "5b", "6a", "6b"]);
        for m in [ModuleId::Mmc, ModuleId::MvdCodec, ModuleId::ResCodec, ModuleId::Mamvp, ModuleId::MvRefine, ModuleId::ResRefine] {
            let first: Vec<_> = s
                .iter()
                .enumerate()
                .filter(|(i, p)| p.trainable.contains(&m) && !s[..*i].iter().any(|q| q.trainable.contains(&m)))
                .collect();
            assert_eq!(first.len(), 1, "{m}");
        }
        for p in &s {
            let expect = if p.is_joint() { cfg.lr_joint } else { cfg.lr_new };
            assert_eq!(p.lr, expect, "phase {}", p.id);
            assert!(!p.trainable.contains(&ModuleId::Me));
        }
        let full = progressive_schedule(&TrainConfig::full(64.0));
        assert_eq!(full[0].lr, 5e-5);
        assert_eq!(full[2].lr, 1e-5);
    }

    #[test]
    fn lr_halves_five_times() {
        let lrs: Vec<f64> = (0..60).map(|s| lr_at(1.0, s, 60, 5)).collect();
        assert_eq!(lrs[0], 1.0);
        assert_eq!(lrs[59], 1.0 / 32.0);
        let mut distinct = lrs.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 6);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn short_phase_respects_freezing_and_logs() {
        let mut cfg = TrainConfig::desk(64.0);
        cfg.warmup = 2;
        let mut mc = ModelConfig::desk();
        mc.mvd = crate::codecs::MvdCodecConfig { hidden: 8, latent: 8 };
        mc.res = crate::codecs::ResCodecConfig { hidden: 8, latent: 8, hyper: 4 };
        let mut model = Model::new(mc, 0).unwrap();
        let clip = synth_motion_clip(SynthMotion::shift(1.0, 0.0), 4, (64, 64), 0);
        let clips = clip_tensors(&[clip.frames]).unwrap();
        let mut phase = progressive_schedule(&cfg)[1].clone();
        phase.steps = 5;
        let mmc_before = model.store(ModuleId::Mmc).checksum().unwrap();
        let res_before = model.store(ModuleId::ResCodec).checksum().unwrap();
        let mut log = Vec::new();
        let report = run_phase(&mut model, &phase, &cfg, &clips, &mut log).unwrap();
        assert_eq!(model.store(ModuleId::Mmc).checksum().unwrap(), mmc_before);
        assert_ne!(model.store(ModuleId::ResCodec).checksum().unwrap(), res_before);
        assert!(report.frozen.contains(&ModuleId::Mmc));
        let lines: Vec<LogRecord> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|r| r.phase == "2" && r.j.is_finite()));
    }
}
