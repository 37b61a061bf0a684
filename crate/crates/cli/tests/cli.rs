use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlvc_core::media::{save_png_dir, synth_motion_clip, SynthMotion};
use mlvc_core::model::{Model, ModelConfig};
use mlvc_core::registry;
use mlvc_core::train::TrainConfig;

fn mlvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlvc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mlvc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(frames: usize, size: (usize, usize)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clip = synth_motion_clip(SynthMotion::shift(1.0, 0.5), frames, size, 3);
        save_png_dir(&clip.frames, &dir.path().join("seq")).unwrap();
        for (name, seed) in [("model", 0), ("other", 1)] {
            let model = Model::new(ModelConfig::desk(), seed).unwrap();
            registry::save_model(&model, &dir.path().join(name), 64.0, None).unwrap();
        }
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn encode_decode_eval_round_trip() {
    let f = Fixture::new(4, (40, 56));
    let (seq, model, out) = (f.path("seq"), f.path("model"), f.path("a.mlvc"));
    let o = mlvc(&["encode", "--input", p(&seq), "--model-dir", p(&model), "--lambda", "64", "--output", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::metadata(&out).unwrap().len() as f64;

    let o = mlvc(&["decode", "--input", p(&out), "--model-dir", p(&model), "--output", p(&f.path("dec"))]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_dir(f.path("dec")).unwrap().count(), 4);

    let csv = f.path("curve.csv");
    let o = mlvc(&[
        "eval", "--container", p(&out), "--model-dir", p(&model), "--reference", p(&seq),
        "--csv", p(&csv), "--frames-csv", p(&f.path("frames.csv")), "--svg", p(&f.path("rd.svg")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "64");
    let bpp: f64 = row[2].parse().unwrap();
    assert!((bpp - 8.0 * bytes / (40.0 * 56.0 * 4.0)).abs() < 1e-6);
    assert_eq!(std::fs::read_to_string(f.path("frames.csv")).unwrap().lines().count(), 5);
    assert!(std::fs::read_to_string(f.path("rd.svg")).unwrap().contains("<circle"));
}

#[test]
fn exit_codes() {
    let f = Fixture::new(3, (32, 32));
    let (seq, model, out) = (f.path("seq"), f.path("model"), f.path("a.mlvc"));
    assert_eq!(mlvc(&["encode", "--bogus"]).status.code(), Some(2));
    assert_eq!(mlvc(&[]).status.code(), Some(2));
    let o = mlvc(&["encode", "--input", p(&f.path("missing")), "--model-dir", p(&model), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let o = mlvc(&["encode", "--input", p(&seq), "--model-dir", p(&f.path("nope")), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(4));
    let o = mlvc(&["encode", "--input", p(&seq), "--model-dir", p(&model), "--lambda", "256", "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(4));

    assert!(mlvc(&["encode", "--input", p(&seq), "--model-dir", p(&model), "--output", p(&out)]).status.success());
    let o = mlvc(&["decode", "--input", p(&out), "--model-dir", p(&f.path("other")), "--output", p(&f.path("dec"))]);
    assert_eq!(o.status.code(), Some(4));
    std::fs::write(&out, b"not a container").unwrap();
    let o = mlvc(&["decode", "--input", p(&out), "--model-dir", p(&model), "--output", p(&f.path("dec"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ablate_reports_deltas_and_needs_variant_for_scratch() {
    let f = Fixture::new(3, (32, 32));
    let (seq, model) = (f.path("seq"), f.path("model"));
    let o = mlvc(&["ablate", "--mode", "refs_2", "--model-dir", p(&model), "--sequence", p(&seq)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("ablation refs_2"));
    assert!(text.contains("base") && text.contains("variant") && text.contains("delta"));

    let o = mlvc(&["ablate", "--mode", "scratch", "--model-dir", p(&model), "--sequence", p(&seq)]);
    assert_eq!(o.status.code(), Some(4));
    let json = f.path("cmp.json");
    let o = mlvc(&[
        "ablate", "--mode", "scratch", "--model-dir", p(&model), "--variant-dir", p(&f.path("other")),
        "--sequence", p(&seq), "--json", p(&json),
    ]);
    assert!(o.status.success());
    let cmp: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(cmp["mode"], "scratch");
    assert_eq!(mlvc(&["ablate", "--mode", "refs_9", "--model-dir", p(&model)]).status.code(), Some(3));
}

#[test]
fn timing_table_covers_every_stage() {
    let f = Fixture::new(4, (32, 32));
    let o = mlvc(&["timing", "--input", p(&f.path("seq")), "--model-dir", p(&f.path("model"))]);
    assert!(o.status.success());
    let text = stdout(&o);
    for stage in [
        "motion-estimation", "mv-prediction", "mvd-coding", "mv-refinement", "motion-compensation",
        "residual-coding", "residual-refinement",
    ] {
        assert!(text.contains(stage), "{stage} missing from\n{text}");
    }
    let ms = |label: &str| -> (f64, f64) {
        let line = text.lines().find(|l| l.starts_with(label)).unwrap();
        let v: Vec<f64> = line[label.len()..].split_whitespace().map(|x| x.parse().unwrap()).collect();
        (v[0], v[1])
    };
    let (sum, total) = (ms("sum of stages"), ms("total"));
    assert!(sum.0 <= total.0 && sum.0 >= 0.9 * total.0, "{text}");
    assert!(sum.1 <= total.1 && sum.1 >= 0.9 * total.1, "{text}");
}

#[test]
fn train_runs_schedule_from_config() {
    let f = Fixture::new(4, (64, 64));
    let mut cfg = TrainConfig::desk(64.0);
    cfg.steps.stage1 = 2;
    cfg.steps.stage2 = 2;
    cfg.steps.stage3 = 2;
    cfg.steps.new_module = 1;
    cfg.steps.joint = 1;
    let config = serde_json::json!({
        "model": "desk",
        "train": cfg,
        "inputs": [{ "path": f.path("seq") }],
        "clip": { "crop_h": 64, "crop_w": 64, "length": 4 },
        "stride": 4,
    });
    let path = f.path("run.json");
    std::fs::write(&path, serde_json::to_vec(&config).unwrap()).unwrap();
    let run = f.path("run");
    let o = mlvc(&["train", "--stage", "all", "--config", p(&path), "--run-dir", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 9);
    let manifest = registry::read_manifest(&run.join("phase_6b")).unwrap();
    assert_eq!(manifest.phase.as_deref(), Some("6b"));
    assert!(run.join("train.jsonl").exists());

    let o = mlvc(&["train", "--stage", "5a", "--config", p(&path), "--run-dir", p(&run)]);
    assert!(o.status.success());
    let o = mlvc(&["train", "--stage", "9z", "--config", p(&path), "--run-dir", p(&run)]);
    assert_eq!(o.status.code(), Some(3));
    std::fs::write(&path, b"{\"train\": 1}").unwrap();
    assert_eq!(mlvc(&["train", "--stage", "1", "--config", p(&path), "--run-dir", p(&run)]).status.code(), Some(3));
}
