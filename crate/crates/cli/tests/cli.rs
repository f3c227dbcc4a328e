use std::path::Path;
use std::process::{Command, Output};

use hcat::loss::LossWeights;
use hcat::model::{Hcat, ModelConfig};
use hcat::numerics::Parameterized;
use hcat::profiler::{BenchResult, CostReport};
use hcat::synthetic::training_pairs;
use hcat::train::{evaluate, TrainConfig, Trainer};
use hcat_cli::weights::{self, encode, DType, WeightError, WeightFile};

fn hcat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcat"))
        .args(args)
        .env_remove("HCAT_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Toy preset shrunk further so command tests stay quick.
const SMALL: &[&str] = &["--set", "train.pairs=4", "--set", "train.batch=2"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn flops_ffn_lines() {
    let out = stdout(&hcat(&["flops", "--ffn", "8x8x256"]));
    assert!(out.contains("67108864") && out.contains("67.1"), "{out}");
    let out = stdout(&hcat(&["flops", "--ffn", "16x16x256"]));
    assert!(out.contains("268435456") && out.contains("268.4"), "{out}");
    assert!(!hcat(&["flops", "--ffn", "8x8"]).status.success());
}

#[test]
fn flops_sweep_over_sparse_tokens_is_proportional() {
    let out = stdout(&hcat(&["flops", "--json", "--sweep", "S=1,4,9,16,25"]));
    let reports: Vec<CostReport> = out.lines().map(|l| CostReport::from_json(l).unwrap()).collect();
    assert_eq!(reports.len(), 5);
    let unit = reports[0].attention_core_macs;
    for (r, s) in reports.iter().zip([1u64, 4, 9, 16, 25]) {
        assert_eq!(r.config.fusion.sparse_tokens as u64, s);
        assert_eq!(r.attention_core_macs, s * unit);
    }
    let out = stdout(&hcat(&["flops", "--json", "--sweep", "N=1,2"]));
    let n: Vec<CostReport> = out.lines().map(|l| CostReport::from_json(l).unwrap()).collect();
    assert!(n[0].macs < n[1].macs);
    assert!(!hcat(&["flops", "--sweep", "Q=1"]).status.success());
}

#[test]
fn flops_modes_have_identical_totals() {
    let get = |m: &str| CostReport::from_json(stdout(&hcat(&["flops", "--json", "--mode", m])).trim()).unwrap();
    let (h, j) = (get("hierarchical"), get("juxtaposed"));
    assert_eq!((h.macs, h.params, h.serial_depth), (j.macs, j.params, j.serial_depth));
}

#[test]
fn invalid_config_exits_nonzero() {
    let o = hcat(&["--set", "model.fusion.heads=7", "flops"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("heads"));
}

#[test]
fn bench_contract() {
    assert!(!hcat(&["bench", "--reps", "5"]).status.success());
    assert!(!hcat(&["bench", "--threads", "2"]).status.success());
    let out = stdout(&hcat(&["--preset", "toy", "bench", "--block", "fusion", "--reps", "30"]));
    let r = BenchResult::from_json(out.trim()).unwrap();
    assert_eq!((r.reps, r.threads), (30, 1));
    assert!(r.median_ns > 0.0);
}

#[test]
fn config_file_env_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 4\n[model.fusion]\nlayers = 1\n").unwrap();
    let p = path.to_str().unwrap();
    let out = stdout(&hcat(&["--config", p, "config"]));
    assert!(out.contains("seed = 4") && out.contains("layers = 1"), "{out}");

    let o = Command::new(env!("CARGO_BIN_EXE_hcat")).args(["--config", p, "config"]).env("HCAT_SEED", "11").output().unwrap();
    assert!(stdout(&o).contains("seed = 11"));

    std::fs::write(&path, "[model.fusion]\nlayerz = 1\n").unwrap();
    assert!(!hcat(&["--config", p, "config"]).status.success());
}

#[test]
fn train_zero_steps_saves_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("init.weights");
    let out = stdout(&hcat(&with(SMALL, &["train", "--steps", "0", "--out", w.to_str().unwrap()])));
    assert_eq!(out.lines().filter(|l| l.contains("loss")).count(), 1, "{out}");

    // reloading reproduces the logged loss
    let mut cfg = ModelConfig::toy();
    let model = weights::load(&w, cfg.clone()).unwrap();
    let pairs = training_pairs(&cfg, 4, 0).unwrap();
    let loss = evaluate(&model, &pairs, &LossWeights::toy()).unwrap().loss.total;
    assert!(out.contains(&format!("initial loss {loss:.6}")), "{out} vs {loss}");
    assert_eq!(weights::encode(&model, DType::F64), weights::encode(&Hcat::new(cfg.clone(), 0).unwrap(), DType::F64));

    // a different width fails with the first mismatching tensor named
    cfg.fusion.channels = 32;
    let err = weights::load(&w, cfg).unwrap_err();
    assert!(matches!(err, WeightError::Shape { .. }), "{err}");
    assert!(err.to_string().contains("tensor `"), "{err}");
}

#[test]
fn train_logs_each_step_and_diverging_runs_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("a.weights");
    let out = stdout(&hcat(&with(SMALL, &["train", "--steps", "2", "--out", w.to_str().unwrap()])));
    assert_eq!(out.lines().filter(|l| l.starts_with("step ")).count(), 2);
    assert!(w.exists());

    let bad = dir.path().join("bad.weights");
    let o = hcat(&with(SMALL, &["--set", "train.lr=1e300", "--set", "train.clip_norm=0", "train", "--steps", "5", "--out", bad.to_str().unwrap()]));
    assert!(!o.status.success());
    assert!(!bad.exists());
    let o = hcat(&with(SMALL, &["--set", "train.lr=-1", "train", "--out", bad.to_str().unwrap()]));
    assert!(!o.status.success());
    assert!(!bad.exists());
}

fn trained(steps: usize) -> Hcat {
    let cfg = ModelConfig::toy();
    let pairs = training_pairs(&cfg, 4, 0).unwrap();
    let mut model = Hcat::new(cfg, 0).unwrap();
    let t = TrainConfig { steps, batch: 2, pairs: 4, ..Default::default() };
    Trainer::new(t).unwrap().run(&mut model, &pairs, &LossWeights::toy(), |_| {}).unwrap();
    model
}

#[test]
fn weight_files_round_trip_bit_exactly() {
    let model = trained(2);
    let dir = tempfile::tempdir().unwrap();
    for dtype in [DType::F64, DType::F32] {
        let a = dir.path().join("a");
        weights::save(&model, &a, dtype).unwrap();
        let back = weights::load(&a, model.config.clone()).unwrap();
        let b = dir.path().join("b");
        weights::save(&back, &b, dtype).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        if dtype == DType::F64 {
            let pairs = training_pairs(&model.config, 4, 5).unwrap();
            let w = LossWeights::toy();
            assert_eq!(evaluate(&model, &pairs, &w).unwrap(), evaluate(&back, &pairs, &w).unwrap());
        }
    }
}

#[test]
fn entry_table_lists_every_parameter() {
    let model = Hcat::new(ModelConfig::toy(), 3).unwrap();
    let file = WeightFile::decode(&encode(&model, DType::F64)).unwrap();
    let names: Vec<String> = file.entries.iter().map(|e| e.name.clone()).collect();
    assert_eq!(names, model.param_names());
    assert!(names.iter().any(|n| n == "fusion.fs.seeds"));
    let mut shapes = Vec::new();
    model.visit_params(&mut |p| shapes.push(p.shape().to_vec()));
    assert_eq!(file.entries.iter().map(|e| e.shape.clone()).collect::<Vec<_>>(), shapes);
}

#[test]
fn corrupt_files_are_rejected() {
    let model = Hcat::new(ModelConfig::toy(), 0).unwrap();
    let bytes = encode(&model, DType::F32);
    for cut in [7, 100, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(WeightFile::decode(&bytes[..cut]), Err(WeightError::Checksum)), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(WeightFile::decode(&flipped), Err(WeightError::Checksum)));
    let mut v2 = bytes.clone();
    v2[5] = 2;
    assert!(matches!(WeightFile::decode(&v2), Err(WeightError::Version { found: 2 })));
    assert!(matches!(WeightFile::decode(b"PNG..."), Err(WeightError::Magic)));
}

fn write_init_weights(dir: &Path) -> String {
    let w = dir.join("w");
    weights::save(&Hcat::new(ModelConfig::toy(), 0).unwrap(), &w, DType::F64).unwrap();
    w.to_str().unwrap().to_string()
}

#[test]
fn synthetic_tracking_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let w = write_init_weights(dir.path());
    let run = |name: &str| {
        let t = dir.path().join(name);
        let out = stdout(&hcat(&["track", "--weights", &w, "--frames", "6", "--out", t.to_str().unwrap()]));
        assert!(out.contains("mean IoU"), "{out}");
        std::fs::read_to_string(t).unwrap()
    };
    let a = run("a.txt");
    assert_eq!(a, run("b.txt"));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 6);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split(' ').collect();
        assert_eq!(f.len(), 6);
        assert_eq!(f[0], i.to_string());
        assert!(f[1..].iter().all(|v| v.parse::<f64>().is_ok()));
    }
}

#[test]
fn tracking_an_image_directory() {
    let dir = tempfile::tempdir().unwrap();
    let w = write_init_weights(dir.path());
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    for i in 0..3u32 {
        let img = image::RgbImage::from_fn(96, 80, |x, y| {
            let inside = (30 + 2 * i..50 + 2 * i).contains(&x) && (20..40).contains(&y);
            if inside { image::Rgb([230, 20, 20]) } else { image::Rgb([100, 110, (x + y) as u8]) }
        });
        img.save(frames.join(format!("{i:04}.png"))).unwrap();
    }
    let t = dir.path().join("trace.txt");
    let args = ["track", "--weights", &w, "--input", frames.to_str().unwrap(), "--out", t.to_str().unwrap()];
    assert!(!hcat(&args).status.success(), "--init is required");
    assert!(!t.exists());
    let out = stdout(&hcat(&[&args[..], &["--init", "30,20,20,20"]].concat()));
    assert!(!out.contains("mean IoU"));
    assert_eq!(std::fs::read_to_string(&t).unwrap().lines().count(), 3);

    // mixed frame sizes are refused
    image::RgbImage::new(10, 10).save(frames.join("9999.png")).unwrap();
    assert!(!hcat(&[&args[..], &["--init", "30,20,20,20"]].concat()).status.success());
}

#[test]
fn missing_weights_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.txt");
    let o = hcat(&["track", "--weights", dir.path().join("none").to_str().unwrap(), "--out", t.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!t.exists());
}
