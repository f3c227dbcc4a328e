use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use hcat::fusion::FusionNet;
use hcat::loss::iou;
use hcat::model::Hcat;
use hcat::numerics::rng;
use hcat::profiler::{bench_fusion_forward, bench_model_forward, cost_report, flops_ffn, BenchOptions, BenchResult, CostReport};
use hcat::synthetic::{training_pairs, MovingSequence};
use hcat::tracker::{trace_line, BBox, BoxFrame, Image, TrackOutput, Tracker};
use hcat::train::{evaluate, Trainer};

use crate::config::{Preset, RunConfig};
use crate::weights::{self, DType};

#[derive(Debug, Parser)]
#[command(name = "hcat", version, about = "Hierarchical cross-attention tracker")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base preset; defaults to `full` for flops/bench and `toy` otherwise.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Override any config key, e.g. `--set model.fusion.layers=1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print MAC and parameter counts.
    Flops(FlopsArgs),
    /// Time a forward pass.
    Bench(BenchArgs),
    /// Train on generated pairs and save weights.
    Train(TrainArgs),
    /// Run the tracker and write a box trace.
    Track(TrackArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// FFN cost for an `HxWxC` input with the configured hidden width.
    #[arg(long, value_name = "HxWxC")]
    pub ffn: Option<String>,
    /// Sweep one axis: `S=1,4,9,16,25` (sparse tokens) or `N=1,2` (layers).
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Report FLOPs (2 per MAC) instead of MACs.
    #[arg(long)]
    pub flops: bool,
    /// Add softmax and activation costs.
    #[arg(long)]
    pub detailed: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ModeArg {
    Hierarchical,
    Juxtaposed,
    SelfAttnBaseline,
}

impl ModeArg {
    fn key(self) -> &'static str {
        match self {
            ModeArg::Hierarchical => "hierarchical",
            ModeArg::Juxtaposed => "juxtaposed",
            ModeArg::SelfAttnBaseline => "self_attn_baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, clap::ValueEnum)]
pub enum BenchBlock {
    #[default]
    Model,
    Fusion,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmups: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, value_enum, default_value_t)]
    pub block: BenchBlock,
    /// Print an aligned line instead of JSON.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    /// Weight file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Store weights as f32 instead of f64.
    #[arg(long)]
    pub f32: bool,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// `synthetic`, or a directory of image files.
    #[arg(long, default_value = "synthetic")]
    pub input: String,
    /// Length of the generated sequence.
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    /// Initial box `x,y,w,h` in pixels; required for image directories.
    #[arg(long)]
    pub init: Option<String>,
    /// Trace file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Cli {
    fn resolve(&self) -> Result<RunConfig> {
        let (default_preset, flags) = match &self.command {
            Command::Flops(a) => {
                let mut f = Vec::new();
                if let Some(m) = a.mode {
                    f.push(format!("model.fusion.mode={}", m.key()));
                }
                if let Some(s) = a.stride {
                    f.push(format!("model.backbone.stride={s}"));
                }
                (Preset::Full, f)
            }
            Command::Bench(a) => (Preset::Full, a.stride.map(|s| format!("model.backbone.stride={s}")).into_iter().collect()),
            Command::Train(a) => {
                let mut f = Vec::new();
                if let Some(s) = a.steps {
                    f.push(format!("train.steps={s}"));
                }
                if let Some(p) = &a.out {
                    f.push(format!("paths.weights={}", toml_string(p)));
                }
                (Preset::Toy, f)
            }
            Command::Track(a) => {
                let mut f = Vec::new();
                if let Some(p) = &a.weights {
                    f.push(format!("paths.weights={}", toml_string(p)));
                }
                if let Some(p) = &a.out {
                    f.push(format!("paths.trace={}", toml_string(p)));
                }
                (Preset::Toy, f)
            }
            Command::Config => (Preset::Toy, Vec::new()),
        };
        let preset = self.preset.or_else(|| self.config.is_none().then_some(default_preset));
        let mut overrides = self.set.clone();
        overrides.extend(flags);
        RunConfig::load(preset, self.config.as_deref(), &overrides)
    }
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

/// Runs one command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.resolve()?;
    match &cli.command {
        Command::Flops(a) => flops(&cfg, a, out),
        Command::Bench(a) => bench(&cfg, a, out),
        Command::Train(a) => train(&cfg, a, out),
        Command::Track(a) => track(&cfg, a, out),
        Command::Config => Ok(write!(out, "{}", cfg.to_toml())?),
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let v: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("`{s}` is not HxWxC"))?;
    ensure!(v.len() == 3 && v.iter().all(|&d| d > 0), "`{s}` is not HxWxC with positive sizes");
    Ok((v[0], v[1], v[2]))
}

fn flops(cfg: &RunConfig, a: &FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let k = if a.flops { 2 } else { 1 };
    let unit = if a.flops { "MFLOPs" } else { "MMACs" };
    if let Some(spec) = &a.ffn {
        let (h, w, c) = parse_dims(spec)?;
        let hidden = cfg.model.fusion.ffn_hidden;
        let macs = flops_ffn(h * w, c, hidden) * k;
        writeln!(out, "ffn {h}x{w}x{c} hidden {hidden}: {macs} ({:.1} {unit})", macs as f64 / 1e6)?;
        return Ok(());
    }
    let reports: Vec<(String, CostReport)> = match &a.sweep {
        None => vec![(String::new(), cost_report(&cfg.model)?)],
        Some(s) => {
            let (axis, values) = s.split_once('=').with_context(|| format!("sweep `{s}` is not AXIS=v1,v2,..."))?;
            let values: Vec<usize> = values
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<Result<_, _>>()
                .with_context(|| format!("sweep values in `{s}` are not integers"))?;
            ensure!(!values.is_empty(), "empty sweep");
            let mut reports = Vec::new();
            for v in values {
                let mut m = cfg.model.clone();
                match axis.trim() {
                    "S" => m.fusion.sparse_tokens = v,
                    "N" => m.fusion.layers = v,
                    other => bail!("unknown sweep axis `{other}`; use S or N"),
                }
                reports.push((format!("{}={v}", axis.trim()), cost_report(&m)?));
            }
            reports
        }
    };
    if a.json {
        // one document per line
        for (_, r) in &reports {
            writeln!(out, "{}", r.to_json())?;
        }
        return Ok(());
    }
    for (label, r) in &reports {
        if !label.is_empty() {
            writeln!(out, "== {label}")?;
        }
        write!(out, "{}", r.to_table(a.flops, a.detailed))?;
        writeln!(
            out,
            "attention core {:.3} {unit}  serial depth {}  mode {:?}",
            (r.attention_core_macs * k) as f64 / 1e6,
            r.serial_depth,
            r.config.fusion.mode
        )?;
    }
    Ok(())
}

fn bench(cfg: &RunConfig, a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let opts = BenchOptions {
        reps: a.reps,
        warmups: a.warmups,
        threads: a.threads,
        ..BenchOptions::default()
    };
    let result: BenchResult = match a.block {
        BenchBlock::Model => bench_model_forward(&Hcat::new(cfg.model.clone(), cfg.seed)?, &opts)?,
        BenchBlock::Fusion => {
            let net = FusionNet::new(cfg.model.fusion.clone(), &mut rng(cfg.seed))?;
            bench_fusion_forward(&net, cfg.model.template_grid()?, cfg.model.search_grid()?, &opts)?
        }
    };
    if a.table {
        write!(out, "{}", result.to_table())?;
    } else {
        writeln!(out, "{}", result.to_json())?;
    }
    Ok(())
}

fn train(cfg: &RunConfig, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let pairs = training_pairs(&cfg.model, cfg.train.pairs, cfg.seed)?;
    let mut model = Hcat::new(cfg.model.clone(), cfg.seed)?;
    let before = evaluate(&model, &pairs, &cfg.loss)?;
    ensure!(before.loss.total.is_finite(), "initial loss is not finite");
    writeln!(out, "initial loss {:.6} iou {:.4}", before.loss.total, before.mean_iou)?;

    let mut trainer = Trainer::new(cfg.train.clone())?;
    let mut io = Ok(());
    trainer
        .run(&mut model, &pairs, &cfg.loss, |l| {
            if io.is_ok() {
                io = writeln!(
                    out,
                    "step {} loss {:.6} cls {:.6} l1 {:.6} giou {:.6} grad_norm {:.4}",
                    l.step, l.loss.total, l.loss.classification, l.loss.l1, l.loss.giou, l.grad_norm
                );
            }
        })
        .context("training diverged")?;
    io?;
    if cfg.train.steps > 0 {
        let after = evaluate(&model, &pairs, &cfg.loss)?;
        ensure!(after.loss.total.is_finite(), "training diverged: final loss is not finite");
        writeln!(
            out,
            "final loss {:.6} ({:.4}x initial) iou {:.4}",
            after.loss.total,
            after.loss.total / before.loss.total,
            after.mean_iou
        )?;
    }
    let dtype = if a.f32 { DType::F32 } else { DType::F64 };
    weights::save(&model, &cfg.paths.weights, dtype)?;
    writeln!(out, "saved {}", cfg.paths.weights.display())?;
    Ok(())
}

/// Frames plus ground truth when it is known.
struct Sequence {
    frames: Vec<Image>,
    truth: Option<Vec<BBox>>,
    init: BBox,
}

fn parse_box(s: &str) -> Result<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .with_context(|| format!("`{s}` is not x,y,w,h"))?;
    ensure!(v.len() == 4, "`{s}` is not x,y,w,h");
    Ok(BBox::from_xywh(v[0], v[1], v[2], v[3], BoxFrame::Image)?)
}

fn read_frames(dir: &Path) -> Result<Vec<Image>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read frame directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
    });
    files.sort();
    ensure!(!files.is_empty(), "no png or jpeg frames in {}", dir.display());
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let img = image::open(f).with_context(|| format!("cannot decode {}", f.display()))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if let Some(first) = frames.first() {
            let first: &Image = first;
            ensure!(
                (first.height(), first.width()) == (h, w),
                "{} is {w}x{h}, earlier frames are {}x{}",
                f.display(),
                first.width(),
                first.height()
            );
        }
        frames.push(Image::from_interleaved(h, w, img.as_raw())?);
    }
    Ok(frames)
}

fn track(cfg: &RunConfig, a: &TrackArgs, out: &mut dyn Write) -> Result<()> {
    let model = weights::load(&cfg.paths.weights, cfg.model.clone())
        .with_context(|| format!("cannot load weights {}", cfg.paths.weights.display()))?;
    let seq = if a.input == "synthetic" {
        ensure!(a.frames >= 2, "a sequence needs at least two frames");
        let s = MovingSequence::generate(a.frames, cfg.seed);
        let init = match &a.init {
            Some(b) => parse_box(b)?,
            None => s.boxes[0],
        };
        Sequence {
            frames: (0..s.len()).map(|i| s.frame(i)).collect(),
            truth: Some(s.boxes),
            init,
        }
    } else {
        let frames = read_frames(Path::new(&a.input))?;
        let init = parse_box(a.init.as_deref().context("--init x,y,w,h is required for an image directory")?)?;
        Sequence { frames, truth: None, init }
    };

    let tracker = Tracker::new(&model, cfg.tracker.clone())?;
    let mut state = tracker.init(&seq.frames[0], seq.init)?;
    let mut trace = String::new();
    let first = TrackOutput {
        frame_index: 0,
        bbox: seq.init,
        score: 1.0,
    };
    trace.push_str(&trace_line(&first));
    trace.push('\n');
    let mut iou_sum = 0.0;
    for (i, frame) in seq.frames.iter().enumerate().skip(1) {
        let o = tracker.update(&mut state, frame)?;
        trace.push_str(&trace_line(&o));
        trace.push('\n');
        if let Some(t) = &seq.truth {
            iou_sum += iou(&o.bbox, &t[i]);
        }
    }
    weights::write_atomic(&cfg.paths.trace, trace.as_bytes())?;
    writeln!(out, "wrote {} frames to {}", seq.frames.len(), cfg.paths.trace.display())?;
    if seq.truth.is_some() {
        let n = seq.frames.len() - 1;
        writeln!(out, "mean IoU {:.4} over {n} tracked frames", iou_sum / n as f64)?;
    }
    Ok(())
}
