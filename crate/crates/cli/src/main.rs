use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mlvc_core::ablation::{compare, score_corpus, toy_corpus, toy_training_clip, AblationMode, Comparison};
use mlvc_core::eval::{curve_csv, curve_svg, records_csv, score, EvalReport};
use mlvc_core::media::{load_sequence, save_png_dir, ClipSpec};
use mlvc_core::metrics::ColorMode;
use mlvc_core::model::{Model, ModelConfig};
use mlvc_core::pipeline::{decode_sequence, encode_sequence, Decoder, EncodeOptions, Encoder, IntraPlugin};
use mlvc_core::train::{clip_tensors, progressive_schedule, run_phases, run_stage, scratch_phase, write_initial, RunPaths, TrainConfig};
use mlvc_core::{registry, Error, Frame, SequenceSource, Stage};

#[derive(Parser)]
#[command(name = "mlvc", version, about = "Learned low-latency video codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Input {
    /// Image directory, or a planar YUV 4:2:0 file with --width and --height.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, requires = "height")]
    width: Option<usize>,
    #[arg(long, requires = "width")]
    height: Option<usize>,
    /// Use at most this many frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(clap::Args, Clone, Default)]
struct IntraArgs {
    /// Shell command producing the intra blob from `{in}` (PNG) into `{out}`.
    #[arg(long, requires = "intra_decode")]
    intra_encode: Option<String>,
    /// Shell command producing a PNG `{out}` from the blob `{in}`.
    #[arg(long, requires = "intra_encode")]
    intra_decode: Option<String>,
}

impl IntraArgs {
    fn plugin(&self) -> IntraPlugin {
        match (&self.intra_encode, &self.intra_decode) {
            (Some(e), Some(d)) => IntraPlugin::ExternalCommand {
                encode: e.clone(),
                decode: d.clone(),
            },
            _ => IntraPlugin::LosslessStore,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Encode a sequence into a container.
    Encode {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model_dir: PathBuf,
        /// Must match the lambda the model was trained for.
        #[arg(long)]
        lambda: Option<f64>,
        /// Frames between intra frames; one intra frame when omitted.
        #[arg(long)]
        intra_period: Option<usize>,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        intra: IntraArgs,
    },
    /// Decode a container into a directory of PNG frames.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        intra: IntraArgs,
    },
    /// Score containers against the original sequence, one container per lambda.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        container: Vec<PathBuf>,
        /// One model directory per container, in the same order.
        #[arg(long, required = true, num_args = 1..)]
        model_dir: Vec<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, requires = "height")]
        width: Option<usize>,
        #[arg(long, requires = "width")]
        height: Option<usize>,
        /// Sequence name used in the tables.
        #[arg(long, default_value = "sequence")]
        name: String,
        /// Compare BT.601 luma instead of RGB.
        #[arg(long)]
        luma: bool,
        /// Curve CSV (sequence, lambda, bpp, psnr, msssim); stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Per-frame CSV.
        #[arg(long)]
        frames_csv: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[command(flatten)]
        intra: IntraArgs,
    },
    /// Train one phase, the whole progressive schedule, or the from-scratch control.
    Train {
        /// Phase id (1, 2, 3, 4a, 4b, 5a, 5b, 6a, 6b), `all`, or `scratch`.
        #[arg(long)]
        stage: String,
        /// JSON run configuration; the desk preset at --lambda when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64.0)]
        lambda: f64,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Compare a trained model against one of its variants on a corpus.
    Ablate {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        model_dir: PathBuf,
        /// Separately trained variant, required for `scratch`.
        #[arg(long)]
        variant_dir: Option<PathBuf>,
        /// Image directories to score; the synthetic toy corpus when omitted.
        #[arg(long, num_args = 1..)]
        sequence: Vec<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Per-stage encode and decode timing.
    Timing {
        #[command(flatten)]
        input: Input,
        #[arg(long, required = true, num_args = 1..)]
        model_dir: Vec<PathBuf>,
        #[arg(long)]
        intra_period: Option<usize>,
    },
}

/// Training run settings read by `train --config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Model preset name.
    #[serde(default = "default_model")]
    model: String,
    train: TrainConfig,
    /// Training sequences; the synthetic toy clip when empty.
    #[serde(default)]
    inputs: Vec<TrainInput>,
    #[serde(default)]
    clip: ClipSpec,
    /// Frames between clip starts.
    #[serde(default = "default_stride")]
    stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainInput {
    path: PathBuf,
    width: Option<usize>,
    height: Option<usize>,
}

fn default_model() -> String {
    "desk".into()
}

fn default_stride() -> usize {
    16
}

enum Failure {
    Data(String),
    Model(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_model_mismatch() {
            Failure::Model(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn source(path: &Path, width: Option<usize>, height: Option<usize>) -> SequenceSource {
    match (width, height) {
        (Some(width), Some(height)) => SequenceSource::Yuv420 {
            path: path.to_path_buf(),
            width,
            height,
        },
        _ => SequenceSource::ImageDir(path.to_path_buf()),
    }
}

fn load_input(i: &Input) -> CliResult<Vec<Frame>> {
    Ok(load_sequence(&source(&i.input, i.width, i.height), i.frames)?)
}

fn load(dir: &Path) -> CliResult<(Model, registry::Manifest)> {
    Ok(registry::load_model(dir)?)
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Data(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn encode(input: &Input, model_dir: &Path, lambda: Option<f64>, intra_period: Option<usize>, output: &Path, intra: &IntraArgs) -> CliResult {
    let (model, manifest) = load(model_dir)?;
    if let Some(l) = lambda {
        if registry::lambda_id(l) != manifest.lambda_id() {
            return Err(Failure::Model(format!(
                "model in {} was trained for lambda {}, not {l}",
                model_dir.display(),
                manifest.lambda
            )));
        }
    }
    let frames = load_input(input)?;
    let opts = EncodeOptions {
        intra_period,
        lambda_id: manifest.lambda_id(),
        plugin: intra.plugin(),
    };
    let enc = encode_sequence(&model, &frames, &opts)?;
    write(output, &enc.bytes)?;
    let (h, w) = frames[0].size();
    println!(
        "{} frames {w}x{h}: {} bytes, {:.5} bpp",
        frames.len(),
        enc.bytes.len(),
        mlvc_core::pipeline::sequence_bpp(enc.bytes.len(), w, h, frames.len())
    );
    Ok(())
}

fn decode(input: &Path, model_dir: &Path, output: &Path, intra: &IntraArgs) -> CliResult {
    let (model, _) = load(model_dir)?;
    let dec = decode_sequence(&model, &read(input)?, &intra.plugin())?;
    save_png_dir(&dec.frames, output)?;
    println!("{} frames written to {}", dec.frames.len(), output.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    containers: &[PathBuf],
    model_dirs: &[PathBuf],
    reference: &SequenceSource,
    name: &str,
    mode: ColorMode,
    csv: Option<&Path>,
    frames_csv: Option<&Path>,
    svg: Option<&Path>,
    intra: &IntraArgs,
) -> CliResult {
    if containers.len() != model_dirs.len() {
        return Err(Failure::Data(format!(
            "{} containers but {} model directories",
            containers.len(),
            model_dirs.len()
        )));
    }
    let mut decoded = Vec::new();
    for (path, dir) in containers.iter().zip(model_dirs) {
        let (model, manifest) = load(dir)?;
        let bytes = read(path)?;
        let dec = decode_sequence(&model, &bytes, &intra.plugin())?;
        if dec.header.lambda_id != manifest.lambda_id() {
            return Err(Failure::Model(format!("{} was not coded with the model in {}", path.display(), dir.display())));
        }
        decoded.push((manifest.lambda, bytes.len(), dec));
    }
    let longest = decoded.iter().map(|d| d.2.frames.len()).max().unwrap_or(0);
    let originals = load_sequence(reference, Some(longest))?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for (lambda, bytes, dec) in &decoded {
        let n = dec.frames.len().min(originals.len());
        reports.push(score(name, *lambda, *bytes, &dec.stats, &dec.frames, &originals[..n], mode)?);
    }
    let mut summaries: Vec<_> = reports.iter().map(|r| r.summary.clone()).collect();
    summaries.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let curve = curve_csv(&summaries);
    match csv {
        Some(p) => write(p, curve.as_bytes())?,
        None => print!("{curve}"),
    }
    if let Some(p) = frames_csv {
        let records: Vec<_> = reports.iter().flat_map(|r| r.records.iter().cloned()).collect();
        write(p, records_csv(&records).as_bytes())?;
    }
    if let Some(p) = svg {
        if let Err(Failure::Data(msg) | Failure::Model(msg)) = write(p, curve_svg(&summaries).as_bytes()) {
            log::warn!("plot not written: {msg}");
        }
    }
    Ok(())
}

fn read_run_config(path: Option<&Path>, lambda: f64) -> CliResult<RunConfig> {
    match path {
        Some(p) => {
            let text = read(p)?;
            serde_json::from_slice(&text).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
        }
        None => Ok(RunConfig {
            model: default_model(),
            train: TrainConfig::desk(lambda),
            inputs: Vec::new(),
            clip: ClipSpec::default(),
            stride: default_stride(),
        }),
    }
}

fn training_clips(cfg: &RunConfig) -> CliResult<Vec<Vec<Frame>>> {
    if cfg.inputs.is_empty() {
        return Ok(vec![toy_training_clip().frames]);
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut clips = Vec::new();
    for i in &cfg.inputs {
        let frames = load_sequence(&source(&i.path, i.width, i.height), None)?;
        clips.extend(mlvc_core::media::extract_training_clips(&frames, cfg.clip, cfg.stride, &mut rng)?);
    }
    Ok(clips)
}

fn train(stage: &str, config: Option<&Path>, lambda: f64, run_dir: &Path) -> CliResult {
    let cfg = read_run_config(config, lambda)?;
    let clips = clip_tensors(&training_clips(&cfg)?)?;
    let paths = RunPaths::new(run_dir);
    let fresh = || -> CliResult<Model> { Ok(Model::new(ModelConfig::preset(&cfg.model)?, cfg.train.seed)?) };
    let reports = match stage {
        "all" => {
            let mut model = fresh()?;
            write_initial(&model, &cfg.train, &paths)?;
            run_phases(&mut model, &progressive_schedule(&cfg.train), &cfg.train, &clips, &paths)?
        }
        "scratch" => {
            let mut model = fresh()?;
            let phase = scratch_phase(&cfg.train, cfg.train.total_steps());
            run_phases(&mut model, &[phase], &cfg.train, &clips, &paths)?
        }
        id => {
            if !paths.root.join("init").exists() {
                write_initial(&fresh()?, &cfg.train, &paths)?;
            }
            vec![run_stage(id, &cfg.train, &clips, &paths)?]
        }
    };
    for r in reports {
        println!(
            "phase {:<7} {:>5} steps  loss {:>10.3} -> {:>10.3}  mv {:.4} bpp  res {:.4} bpp  {:.1}s",
            r.id, r.steps, r.initial_loss, r.final_loss, r.mean_bpp_mv, r.mean_bpp_res, r.seconds
        );
    }
    Ok(())
}

fn ablate(mode: &str, model_dir: &Path, variant_dir: Option<&Path>, sequences: &[PathBuf], json: Option<&Path>) -> CliResult {
    let mode = AblationMode::parse(mode).map_err(|e| Failure::Data(e.to_string()))?;
    let (base, manifest) = load(model_dir)?;
    let corpus = if sequences.is_empty() {
        toy_corpus()
    } else {
        let mut c = Vec::new();
        for s in sequences {
            let name = s.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            c.push((name, load_sequence(&SequenceSource::ImageDir(s.clone()), None)?));
        }
        c
    };
    let comparison = match (mode.is_inference_toggle(), variant_dir) {
        (true, _) => {
            let (mut variant, _) = load(model_dir)?;
            compare(&base, &mut variant, mode, &corpus, manifest.lambda)?
        }
        (false, Some(dir)) => {
            let (variant, _) = load(dir)?;
            let (b, _) = score_corpus(&base, &corpus, manifest.lambda)?;
            let (v, _) = score_corpus(&variant, &corpus, manifest.lambda)?;
            Comparison::new(mode, b, v)
        }
        (false, None) => {
            return Err(Failure::Model(Error::MissingCheckpoint(PathBuf::from("--variant-dir")).to_string()));
        }
    };
    print!("{}", comparison.to_text());
    if let Some(p) = json {
        let text = serde_json::to_vec_pretty(&comparison).map_err(|e| Failure::Data(e.to_string()))?;
        write(p, &text)?;
    }
    Ok(())
}

const STAGES: [Stage; 8] = [
    Stage::Intra,
    Stage::MotionEstimation,
    Stage::MvPrediction,
    Stage::MvdCoding,
    Stage::MvRefinement,
    Stage::MotionCompensation,
    Stage::ResidualCoding,
    Stage::ResidualRefinement,
];

/// Mean per-frame time of each stage over P-frames plus the measured wall time per frame.
struct Timing {
    stages: [Duration; 8],
    wall: Duration,
    frames: u32,
}

impl Timing {
    fn new() -> Self {
        Self {
            stages: [Duration::ZERO; 8],
            wall: Duration::ZERO,
            frames: 0,
        }
    }

    fn add(&mut self, laps: &[(Stage, Duration)], wall: Duration) {
        for (stage, d) in laps {
            let i = STAGES.iter().position(|s| s == stage).expect("known stage");
            self.stages[i] += *d;
        }
        self.wall += wall;
        self.frames += 1;
    }

    fn ms(d: Duration, n: u32) -> f64 {
        1e3 * d.as_secs_f64() / n.max(1) as f64
    }
}

fn timing(input: &Input, model_dirs: &[PathBuf], intra_period: Option<usize>) -> CliResult {
    let frames = load_input(input)?;
    let (h, w) = frames[0].size();
    println!("{} frames {w}x{h}, times in ms per frame", frames.len());
    for dir in model_dirs {
        let (model, _) = load(dir)?;
        let period = intra_period.unwrap_or(usize::MAX);
        let mut enc = Encoder::new(&model, IntraPlugin::LosslessStore, period);
        let mut dec = Decoder::new(&model, IntraPlugin::LosslessStore, mlvc_core::media::OriginalSize { height: h, width: w });
        let (mut te, mut td) = (Timing::new(), Timing::new());
        for f in &frames {
            let start = Instant::now();
            let e = enc.encode_frame(f)?;
            let we = start.elapsed();
            let start = Instant::now();
            let (_, s) = dec.decode_unit(&e.unit)?;
            let wd = start.elapsed();
            if e.stats.kind == mlvc_core::FrameKind::P {
                te.add(&e.stats.timings, we);
                td.add(&s.timings, wd);
            }
        }
        println!("model {} (P-frames: {})", dir.display(), te.frames);
        println!("{:<22} {:>10} {:>10}", "stage", "encode", "decode");
        for (i, s) in STAGES.iter().enumerate().skip(1) {
            println!(
                "{:<22} {:>10.2} {:>10.2}",
                s.to_string(),
                Timing::ms(te.stages[i], te.frames),
                Timing::ms(td.stages[i], td.frames)
            );
        }
        let sum = |t: &Timing| Timing::ms(t.stages.iter().sum(), t.frames);
        println!("{:<22} {:>10.2} {:>10.2}", "sum of stages", sum(&te), sum(&td));
        println!(
            "{:<22} {:>10.2} {:>10.2}",
            "total",
            Timing::ms(te.wall, te.frames),
            Timing::ms(td.wall, td.frames)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Encode {
            input,
            model_dir,
            lambda,
            intra_period,
            output,
            intra,
        } => encode(&input, &model_dir, lambda, intra_period, &output, &intra),
        Command::Decode {
            input,
            model_dir,
            output,
            intra,
        } => decode(&input, &model_dir, &output, &intra),
        Command::Eval {
            container,
            model_dir,
            reference,
            width,
            height,
            name,
            luma,
            csv,
            frames_csv,
            svg,
            intra,
        } => eval(
            &container,
            &model_dir,
            &source(&reference, width, height),
            &name,
            if luma { ColorMode::Y } else { ColorMode::Rgb },
            csv.as_deref(),
            frames_csv.as_deref(),
            svg.as_deref(),
            &intra,
        ),
        Command::Train {
            stage,
            config,
            lambda,
            run_dir,
        } => train(&stage, config.as_deref(), lambda, &run_dir),
        Command::Ablate {
            mode,
            model_dir,
            variant_dir,
            sequence,
            json,
        } => ablate(&mode, &model_dir, variant_dir.as_deref(), &sequence, json.as_deref()),
        Command::Timing {
            input,
            model_dir,
            intra_period,
        } => timing(&input, &model_dir, intra_period),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Model(msg)) => {
            eprintln!("model mismatch: {msg}");
            ExitCode::from(4)
        }
    }
}
