//! Analytic MAC accounting and wall-clock micro-benchmarks.
//!
//! Headline numbers are multiply-accumulates of the matrix products only.
//! The attention core of one cross-attention costs `2·d·n_q·n_k` (scores plus
//! weighted sum); its four `d×d` projections are reported as a separate
//! entry. Softmax, ReLU and sigmoid work goes into `aux_ops` with these
//! per-element costs: softmax 3 (exp, sum, divide), ReLU 1, sigmoid 4.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionNet};
use crate::model::{Hcat, ImagePatch, ModelConfig, PatchRole};
use crate::numerics::{init, rng, Tape};
use crate::tokens::{Grid, Tokens};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const MIN_REPS: usize = 30;

const SOFTMAX_OPS: u64 = 3;
const SIGMOID_OPS: u64 = 4;

/// Attention-core MACs: `2·d·n_q·n_k`.
pub fn flops_attention(d: usize, n_q: usize, n_k: usize) -> u64 {
    2 * d as u64 * n_q as u64 * n_k as u64
}

/// Two-layer FFN MACs: `tokens·(d·hidden + hidden·d)`.
pub fn flops_ffn(tokens: usize, d: usize, hidden: usize) -> u64 {
    tokens as u64 * 2 * d as u64 * hidden as u64
}

fn linear_params(input: usize, output: usize) -> u64 {
    (input * output + output) as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub block: String,
    pub macs: u64,
    pub params: u64,
    pub serial_depth: u32,
    pub aux_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub format_version: u32,
    pub config: ModelConfig,
    pub entries: Vec<CostEntry>,
    pub macs: u64,
    pub params: u64,
    pub serial_depth: u32,
    pub attention_core_macs: u64,
}

struct Builder {
    entries: Vec<CostEntry>,
    core: u64,
}

impl Builder {
    fn push(&mut self, block: String, macs: u64, params: u64, serial_depth: u32, aux_ops: u64) {
        self.entries.push(CostEntry {
            block,
            macs,
            params,
            serial_depth,
            aux_ops,
        });
    }

    /// Projections, attention core and (optionally) FFN of one block.
    fn attention_block(&mut self, name: &str, cfg: &ModelConfig, n_q: usize, n_k: usize, with_ffn: bool) {
        let f = &cfg.fusion;
        let c = f.channels;
        let proj = (2 * n_q + 2 * n_k) as u64 * (c * c) as u64;
        self.push(format!("{name}.proj"), proj, 4 * linear_params(c, c), 0, 0);
        let core = flops_attention(c, n_q, n_k);
        self.core += core;
        self.push(
            format!("{name}.attn"),
            core,
            0,
            1,
            SOFTMAX_OPS * (f.heads * n_q * n_k) as u64,
        );
        if with_ffn {
            self.push(
                format!("{name}.ffn"),
                flops_ffn(n_q, c, f.ffn_hidden),
                linear_params(c, f.ffn_hidden) + linear_params(f.ffn_hidden, c),
                0,
                (n_q * f.ffn_hidden) as u64,
            );
        }
    }
}

/// Every matrix product of one template/search forward pass.
pub fn cost_report(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let f = &cfg.fusion;
    let c = f.channels;
    let mut b = Builder {
        entries: Vec::new(),
        core: 0,
    };

    let mut rng = rng(0);
    let backbone = crate::model::Backbone::new(cfg.backbone.clone(), &mut rng)?;
    for (role, size) in [("template", cfg.template_size), ("search", cfg.search_size)] {
        let stages = backbone.stage_macs(size, size);
        let mut grid = Grid::new(size, size);
        for ((name, macs), stage) in stages.into_iter().zip(&backbone.stages) {
            grid = Grid::new(grid.height.div_ceil(stage.stride), grid.width.div_ceil(stage.stride));
            let (i, o) = (stage.linear.input_dim(), stage.linear.output_dim());
            let params = if role == "search" { linear_params(i, o) } else { 0 };
            b.push(format!("{name}.{role}"), macs, params, 0, (o * grid.len()) as u64);
        }
    }
    let (tz, tx) = (cfg.template_grid()?.len(), cfg.search_grid()?.len());
    let out = cfg.backbone.out_channels();
    b.push("projection.template".into(), (tz * out * c) as u64, 0, 0, 0);
    b.push("projection.search".into(), (tx * out * c) as u64, linear_params(out, c), 0, 0);

    let mut nz = tz;
    if f.use_fs {
        b.attention_block("fusion.fs", cfg, f.sparse_tokens, tz, false);
        if let Some(e) = b.entries.iter_mut().find(|e| e.block == "fusion.fs.proj") {
            e.params += (c * f.sparse_tokens) as u64;
        }
        nz = f.sparse_tokens;
    }
    for l in 0..f.layers {
        let (kx, kz) = match f.mode {
            FusionMode::SelfAttnBaseline => (tx, nz),
            FusionMode::Hierarchical | FusionMode::Juxtaposed => (nz, tx),
        };
        b.attention_block(&format!("fusion.layers.{l}.search"), cfg, tx, kx, true);
        b.attention_block(&format!("fusion.layers.{l}.template"), cfg, nz, kz, true);
    }
    b.attention_block("fusion.decoder", cfg, tx, nz, true);

    let h = cfg.head_hidden;
    let head = |o: usize| (tx * (c * h + h * h + h * o)) as u64;
    let head_params = |o: usize| linear_params(c, h) + linear_params(h, h) + linear_params(h, o);
    b.push("head.reg".into(), head(4), head_params(4), 0, (2 * tx * h) as u64 + SIGMOID_OPS * 4 * tx as u64);
    b.push("head.cls".into(), head(1), head_params(1), 0, (2 * tx * h) as u64 + SIGMOID_OPS * tx as u64);

    let entries = b.entries;
    Ok(CostReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        macs: entries.iter().map(|e| e.macs).sum(),
        params: entries.iter().map(|e| e.params).sum(),
        serial_depth: entries.iter().map(|e| e.serial_depth).sum(),
        attention_core_macs: b.core,
        entries,
    })
}

impl CostReport {
    /// Aligned text table. `flops` doubles every MAC figure; `detailed` adds
    /// the activation/softmax column.
    pub fn to_table(&self, flops: bool, detailed: bool) -> String {
        let k = if flops { 2 } else { 1 };
        let unit = if flops { "MFLOPs" } else { "MMACs" };
        let width = self.entries.iter().map(|e| e.block.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = write!(s, "{:<width$} {:>14} {:>10} {:>6}", "block", unit, "params", "depth");
        if detailed {
            let _ = write!(s, " {:>12}", "aux_ops");
        }
        s.push('\n');
        let row = |s: &mut String, name: &str, macs: u64, params: u64, depth: u32, aux: u64| {
            let _ = write!(s, "{name:<width$} {:>14.3} {params:>10} {depth:>6}", (k * macs) as f64 / 1e6);
            if detailed {
                let _ = write!(s, " {aux:>12}");
            }
            s.push('\n');
        };
        for e in &self.entries {
            row(&mut s, &e.block, e.macs, e.params, e.serial_depth, e.aux_ops);
        }
        let aux = self.entries.iter().map(|e| e.aux_ops).sum();
        row(&mut s, "total", self.macs, self.params, self.serial_depth, aux);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("cost report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config(format!("cost report: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmups: usize,
    pub threads: usize,
    /// Calls are grouped until one timed sample lasts at least this long.
    pub min_sample_ns: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            reps: MIN_REPS,
            warmups: 3,
            threads: 1,
            min_sample_ns: 1_000_000,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.reps < MIN_REPS {
            return Err(Error::Bench(format!("at least {MIN_REPS} repetitions required, got {}", self.reps)));
        }
        if self.threads != 1 {
            return Err(Error::Bench(format!(
                "only single-thread timing is implemented, got threads = {}",
                self.threads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub format_version: u32,
    pub block: String,
    pub median_ns: f64,
    pub iqr_ns: f64,
    pub reps: usize,
    pub warmups: usize,
    pub threads: usize,
    /// Calls per timed sample.
    pub batch: usize,
    pub environment: Environment,
}

impl BenchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bench result serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Bench(format!("bench result: {e}")))
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:<24} median {:>12.0} ns  iqr {:>10.0} ns  reps {}  batch {}  threads {}\n",
            self.block, self.median_ns, self.iqr_ns, self.reps, self.batch, self.threads
        )
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `f` on a dedicated worker thread.
pub fn bench<F>(block: &str, opts: &BenchOptions, mut f: F) -> Result<BenchResult>
where
    F: FnMut() -> Result<()> + Send,
{
    opts.validate()?;
    let opts = opts.clone();
    let (samples, batch) = std::thread::scope(|s| {
        s.spawn(move || -> Result<(Vec<f64>, usize)> {
            for _ in 0..opts.warmups {
                f()?;
            }
            let t = Instant::now();
            f()?;
            let once = t.elapsed().as_nanos().max(1) as u64;
            let batch = opts.min_sample_ns.div_ceil(once).clamp(1, 1_000_000) as usize;
            let mut samples = Vec::with_capacity(opts.reps);
            for _ in 0..opts.reps {
                let t = Instant::now();
                for _ in 0..batch {
                    f()?;
                }
                samples.push(t.elapsed().as_nanos() as f64 / batch as f64);
            }
            Ok((samples, batch))
        })
        .join()
        .map_err(|_| Error::Bench("benchmark worker panicked".into()))?
    })?;
    let mut sorted = samples;
    sorted.sort_by(f64::total_cmp);
    Ok(BenchResult {
        format_version: REPORT_FORMAT_VERSION,
        block: block.into(),
        median_ns: quantile(&sorted, 0.5),
        iqr_ns: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        reps: opts.reps,
        warmups: opts.warmups,
        threads: opts.threads,
        batch,
        environment: Environment::current(),
    })
}

fn seeded_patch(role: PatchRole, side: usize, seed: u64) -> Result<ImagePatch> {
    ImagePatch::from_normalized(role, init::normal_with(&[3, side, side], 1.0, &mut rng(seed))?)
}

/// Full template + search forward on fixed seeded inputs.
pub fn bench_model_forward(model: &Hcat, opts: &BenchOptions) -> Result<BenchResult> {
    let cfg = &model.config;
    let z = seeded_patch(PatchRole::Template, cfg.template_size, 1)?;
    let x = seeded_patch(PatchRole::Search, cfg.search_size, 2)?;
    let name = format!("model.stride{}", cfg.backbone.stride);
    bench(&name, opts, || model.predict(&z, &x).map(|_| ()))
}

/// Fusion network alone on seeded token grids.
pub fn bench_fusion_forward(net: &FusionNet, template: Grid, search: Grid, opts: &BenchOptions) -> Result<BenchResult> {
    let c = net.config.channels;
    let fz = init::normal_with(&[c, template.len()], 1.0, &mut rng(1))?;
    let fx = init::normal_with(&[c, search.len()], 1.0, &mut rng(2))?;
    let name = format!("fusion.n{}.{}", net.config.layers, if net.config.use_fs { "fs" } else { "nofs" });
    bench(&name, opts, || {
        let mut tape = Tape::inference();
        let z = Tokens::new(tape.constant(fz.clone())?, Some(template));
        let x = Tokens::new(tape.constant(fx.clone())?, Some(search));
        net.forward(&mut tape, &z, &x).map(|_| ())
    })
}

#[cfg(test)]
mod tests;
