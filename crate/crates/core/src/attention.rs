//! Multi-head cross-attention and 2-D sine positional encodings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Param, Parameterized, Rng, Tape, Tensor, Var};
use crate::tokens::{Grid, Tokens};

/// How attention logits are scaled before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `1/sqrt(d/h)`, the width of a single head.
    #[default]
    PerHead,
    /// `1/sqrt(d)`, the full model width.
    FullWidth,
}

impl ScaleMode {
    pub fn factor(self, width: usize, heads: usize) -> f64 {
        match self {
            ScaleMode::PerHead => 1.0 / ((width / heads) as f64).sqrt(),
            ScaleMode::FullWidth => 1.0 / (width as f64).sqrt(),
        }
    }
}

/// DETR-style 2-D sine encoding, stored channel-major as `C × (H·W)`.
///
/// The first `C/2` channels encode the row, the last `C/2` the column. Within
/// each half, channel `k` uses frequency `T^(2⌊k/2⌋/(C/2))` with `T = 10000`,
/// sine on even `k` and cosine on odd `k`, applied to the position angle
/// `2π·i/H` (rows) or `2π·j/W` (columns). Cell `(0, 0)` therefore has every
/// sine channel at exactly 0 and every cosine channel at exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEncoding {
    grid: Grid,
    tensor: Tensor,
}

const TEMPERATURE: f64 = 10_000.0;

impl PosEncoding {
    pub fn sine_2d(height: usize, width: usize, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::config(format!(
                "positional encoding needs channels divisible by 4, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::config("positional encoding needs a non-empty grid"));
        }
        let half = channels / 2;
        let n = height * width;
        let mut data = vec![0.0; channels * n];
        let code = |k: usize, angle: f64| {
            let freq = TEMPERATURE.powf((2 * (k / 2)) as f64 / half as f64);
            if k % 2 == 0 {
                (angle / freq).sin()
            } else {
                (angle / freq).cos()
            }
        };
        for r in 0..height {
            let ay = std::f64::consts::TAU * r as f64 / height as f64;
            for c in 0..width {
                let ax = std::f64::consts::TAU * c as f64 / width as f64;
                let tok = r * width + c;
                for k in 0..half {
                    data[k * n + tok] = code(k, ay);
                    data[(half + k) * n + tok] = code(k, ax);
                }
            }
        }
        Ok(Self {
            grid: Grid::new(height, width),
            tensor: Tensor::new(vec![channels, n], data)?,
        })
    }

    pub fn for_grid(grid: Grid, channels: usize) -> Result<Self> {
        Self::sine_2d(grid.height, grid.width, channels)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.tensor.rows()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Scaled dot-product attention split over `heads` row blocks.
///
/// `q` is `d × n_q`, `k` and `v` are `d × n_k`; returns `d × n_q`, each head's
/// output column a convex combination of that head's value columns.
pub fn attention_core(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, scale: ScaleMode) -> Result<Var> {
    let parts = attention_heads(tape, q, k, v, heads, scale)?;
    let outs: Vec<Var> = parts.iter().map(|&(_, o)| o).collect();
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    tape.concat_rows(&outs)
}

/// Per-head `(weights n_q × n_k, output d_h × n_q)` pairs.
pub fn attention_heads(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: ScaleMode,
) -> Result<Vec<(Var, Var)>> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if ks[1] != vs[1] {
        return Err(Error::shape("attention key/value token count", &ks, &vs));
    }
    let d = qs[0];
    if ks[0] != d || vs[0] != d {
        return Err(Error::shape("attention width", &qs, &ks));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let factor = scale.factor(d, heads);
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, h * dh, dh)?,
                tape.slice_rows(k, h * dh, dh)?,
                tape.slice_rows(v, h * dh, dh)?,
            )
        };
        let logits = tape.matmul_t(qh, true, kh, false)?;
        let logits = tape.scale(logits, factor)?;
        let weights = tape.softmax(logits, 1)?;
        let o = tape.matmul_t(vh, false, weights, true)?;
        out.push((weights, o));
    }
    Ok(out)
}

/// Projection weights for multi-head cross-attention of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhcaParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
    pub scale: ScaleMode,
}

impl MhcaParams {
    pub fn new(name: &str, width: usize, heads: usize, scale: ScaleMode, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            w_q: Linear::new(&format!("{name}.w_q"), width, width, rng)?,
            w_k: Linear::new(&format!("{name}.w_k"), width, width, rng)?,
            w_v: Linear::new(&format!("{name}.w_v"), width, width, rng)?,
            w_o: Linear::new(&format!("{name}.w_o"), width, width, rng)?,
            heads,
            scale,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.input_dim()
    }

    /// Cross-attention with `K = V = kv`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        q: &Tokens,
        kv: &Tokens,
        pos_q: Option<&PosEncoding>,
        pos_kv: Option<&PosEncoding>,
    ) -> Result<Tokens> {
        self.forward_qkv(tape, q, kv, kv, pos_q, pos_kv)
    }

    /// Positions are added to the query and key inputs, never to values.
    pub fn forward_qkv(
        &self,
        tape: &mut Tape,
        q: &Tokens,
        k: &Tokens,
        v: &Tokens,
        pos_q: Option<&PosEncoding>,
        pos_kv: Option<&PosEncoding>,
    ) -> Result<Tokens> {
        let d = self.width();
        for t in [q, k, v] {
            if t.channels(tape) != d {
                return Err(Error::shape("mhca input width", &[d], tape.shape(t.var)));
            }
        }
        if k.len(tape) != v.len(tape) {
            return Err(Error::shape("mhca key/value token count", tape.shape(k.var), tape.shape(v.var)));
        }
        let q_in = with_position(tape, q, pos_q)?;
        let k_in = with_position(tape, k, pos_kv)?;
        let qp = self.w_q.forward(tape, q_in)?;
        let kp = self.w_k.forward(tape, k_in)?;
        let vp = self.w_v.forward(tape, v.var)?;
        let mixed = attention_core(tape, qp, kp, vp, self.heads, self.scale)?;
        let out = self.w_o.forward(tape, mixed)?;
        Ok(Tokens::new(out, q.grid))
    }

    /// Projection MACs (four `d×d` maps) for the given token counts.
    pub fn projection_macs(&self, n_q: usize, n_k: usize) -> u64 {
        self.w_q.macs(n_q) + self.w_k.macs(n_k) + self.w_v.macs(n_k) + self.w_o.macs(n_q)
    }
}

fn with_position(tape: &mut Tape, t: &Tokens, pos: Option<&PosEncoding>) -> Result<Var> {
    let Some(pos) = pos else { return Ok(t.var) };
    let grid = t.grid.ok_or_else(|| Error::config("positional encoding given for tokens without a grid"))?;
    pos.grid().ensure_eq(&grid)?;
    if pos.channels() != t.channels(tape) {
        return Err(Error::shape("positional encoding", pos.tensor().shape(), tape.shape(t.var)));
    }
    let p = tape.constant(pos.tensor().clone())?;
    tape.add(t.var, p)
}

impl Parameterized for MhcaParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for l in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o] {
            l.visit_params_mut(f);
        }
    }
}
