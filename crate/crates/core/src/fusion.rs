//! Feature fusion: template sparsification followed by stacked cross-attention
//! layers and a decoder block.
//!
//! Wiring per layer `l` in hierarchical mode:
//!
//! ```text
//! x_l = CFA_search(x_{l-1}, z_{l-1})
//! z_l = CFA_template(z_{l-1}, x_l)        // reads the *new* search tokens
//! ```
//!
//! Juxtaposed mode feeds `x_{l-1}` to the template branch instead, and the
//! self-attention baseline lets each branch attend to itself. Parameter shapes
//! are identical in every mode.

use serde::{Deserialize, Serialize};

use crate::attention::{MhcaParams, PosEncoding, ScaleMode};
use crate::error::{Error, Result};
use crate::layers::Mlp;
use crate::numerics::init::xavier_with;
use crate::numerics::{Param, Parameterized, Rng, Tape};
use crate::tokens::Tokens;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Hierarchical,
    Juxtaposed,
    SelfAttnBaseline,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Self::Hierarchical),
            "juxtaposed" => Ok(Self::Juxtaposed),
            "self_attn_baseline" => Ok(Self::SelfAttnBaseline),
            other => Err(Error::config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hierarchical => "hierarchical",
            Self::Juxtaposed => "juxtaposed",
            Self::SelfAttnBaseline => "self_attn_baseline",
        })
    }
}

/// Optional per-token normalisation after each residual sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostNorm {
    #[default]
    Off,
    On,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub channels: usize,
    pub sparse_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub mode: FusionMode,
    pub use_fs: bool,
    pub pos_every_layer: bool,
    pub post_norm: PostNorm,
    pub scale_mode: ScaleMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            sparse_tokens: 16,
            layers: 2,
            heads: 8,
            ffn_hidden: 2048,
            mode: FusionMode::Hierarchical,
            use_fs: true,
            pos_every_layer: true,
            post_norm: PostNorm::Off,
            scale_mode: ScaleMode::PerHead,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sparse_tokens == 0 {
            return Err(Error::config("sparse_tokens (S) must be at least 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("layers (N) must be at least 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads must be at least 1"));
        }
        if self.channels == 0 || self.channels % 4 != 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "channels ({}) must be a positive multiple of 4 and of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::config("ffn_hidden must be at least 1"));
        }
        Ok(())
    }
}

/// Cross-feature augment block: attention residual, then FFN residual.
#[derive(Clone, Debug, PartialEq)]
pub struct CfaParams {
    pub attn: MhcaParams,
    pub ffn: Mlp,
    pub post_norm: PostNorm,
}

const NORM_EPS: f64 = 1e-5;

impl CfaParams {
    pub fn new(name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: MhcaParams::new(&format!("{name}.attn"), cfg.channels, cfg.heads, cfg.scale_mode, rng)?,
            ffn: Mlp::new(&format!("{name}.ffn"), &[cfg.channels, cfg.ffn_hidden, cfg.channels], rng)?,
            post_norm: cfg.post_norm,
        })
    }

    /// `x̃ = q + MHCA(q + P_q, kv + P_kv, kv)`, then `x̃ + FFN(x̃)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        q: &Tokens,
        kv: &Tokens,
        pos_q: Option<&PosEncoding>,
        pos_kv: Option<&PosEncoding>,
    ) -> Result<Tokens> {
        let attended = self.attn.forward(tape, q, kv, pos_q, pos_kv)?;
        let mut mid = tape.add(q.var, attended.var)?;
        if self.post_norm == PostNorm::On {
            mid = tape.layer_norm_cols(mid, NORM_EPS)?;
        }
        let ff = self.ffn.forward(tape, mid)?;
        let mut out = tape.add(mid, ff)?;
        if self.post_norm == PostNorm::On {
            out = tape.layer_norm_cols(out, NORM_EPS)?;
        }
        Ok(Tokens::new(out, q.grid))
    }

    /// Zeroes the attention output projection and the last FFN layer so the
    /// block reduces to the identity.
    pub fn make_identity(&mut self) {
        self.attn.w_o.zero();
        if let Some(last) = self.ffn.layers.last_mut() {
            last.zero();
        }
    }
}

impl Parameterized for CfaParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.attn.visit_params(f);
        self.ffn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.attn.visit_params_mut(f);
        self.ffn.visit_params_mut(f);
    }
}

/// Learned seed tokens that cross-attend into the template features.
#[derive(Clone, Debug, PartialEq)]
pub struct FsParams {
    pub seeds: Param,
    pub attn: MhcaParams,
}

impl FsParams {
    pub fn new(name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            seeds: Param::new(format!("{name}.seeds"), xavier_with(&[cfg.channels, cfg.sparse_tokens], rng)?),
            attn: MhcaParams::new(&format!("{name}.attn"), cfg.channels, cfg.heads, cfg.scale_mode, rng)?,
        })
    }

    pub fn sparse_tokens(&self) -> usize {
        self.seeds.shape()[1]
    }

    /// `F_zs = F_s + MHCA(F_s, F_z + P_z, F_z)`; the result has no grid.
    pub fn forward(&self, tape: &mut Tape, f_z: &Tokens, pos_z: &PosEncoding) -> Result<Tokens> {
        let grid = f_z.grid.ok_or_else(|| Error::config("template tokens need a grid"))?;
        pos_z.grid().ensure_eq(&grid)?;
        let seeds = Tokens::new(tape.param(&self.seeds)?, None);
        let read = self.attn.forward(tape, &seeds, f_z, None, Some(pos_z))?;
        let out = tape.add(seeds.var, read.var)?;
        Ok(Tokens::new(out, None))
    }
}

impl Parameterized for FsParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.seeds);
        self.attn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.seeds);
        self.attn.visit_params_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HcaLayer {
    pub search: CfaParams,
    pub template: CfaParams,
}

impl HcaLayer {
    pub fn new(name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            search: CfaParams::new(&format!("{name}.search"), cfg, rng)?,
            template: CfaParams::new(&format!("{name}.template"), cfg, rng)?,
        })
    }

    /// One layer; returns `(search, template)` tokens.
    pub fn forward(
        &self,
        tape: &mut Tape,
        f_x: &Tokens,
        f_z: &Tokens,
        pos_x: Option<&PosEncoding>,
        pos_z: Option<&PosEncoding>,
        mode: FusionMode,
    ) -> Result<(Tokens, Tokens)> {
        match mode {
            FusionMode::Hierarchical => {
                let x = self.search.forward(tape, f_x, f_z, pos_x, pos_z)?;
                let z = self.template.forward(tape, f_z, &x, pos_z, pos_x)?;
                Ok((x, z))
            }
            FusionMode::Juxtaposed => {
                let x = self.search.forward(tape, f_x, f_z, pos_x, pos_z)?;
                let z = self.template.forward(tape, f_z, f_x, pos_z, pos_x)?;
                Ok((x, z))
            }
            FusionMode::SelfAttnBaseline => {
                let x = self.search.forward(tape, f_x, f_x, pos_x, pos_x)?;
                let z = self.template.forward(tape, f_z, f_z, pos_z, pos_z)?;
                Ok((x, z))
            }
        }
    }
}

impl Parameterized for HcaLayer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.search.visit_params(f);
        self.template.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.search.visit_params_mut(f);
        self.template.visit_params_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet {
    pub config: FusionConfig,
    pub fs: Option<FsParams>,
    pub layers: Vec<HcaLayer>,
    pub decoder: CfaParams,
}

impl FusionNet {
    pub fn new(config: FusionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let fs = if config.use_fs {
            Some(FsParams::new("fusion.fs", &config, rng)?)
        } else {
            None
        };
        let layers = (0..config.layers)
            .map(|l| HcaLayer::new(&format!("fusion.layers.{l}"), &config, rng))
            .collect::<Result<_>>()?;
        let decoder = CfaParams::new("fusion.decoder", &config, rng)?;
        Ok(Self {
            config,
            fs,
            layers,
            decoder,
        })
    }

    /// Applies feature sparsification when enabled; otherwise passes the
    /// template tokens through.
    pub fn sparsify(&self, tape: &mut Tape, f_z: &Tokens) -> Result<Tokens> {
        self.check_width(tape, f_z)?;
        match &self.fs {
            Some(fs) => {
                let grid = f_z.grid.ok_or_else(|| Error::config("template tokens need a grid"))?;
                let pos = PosEncoding::for_grid(grid, self.config.channels)?;
                fs.forward(tape, f_z, &pos)
            }
            None => Ok(*f_z),
        }
    }

    /// Runs the layer stack and decoder on already-sparsified template tokens.
    pub fn fuse(&self, tape: &mut Tape, template: &Tokens, f_x: &Tokens) -> Result<Tokens> {
        self.check_width(tape, template)?;
        self.check_width(tape, f_x)?;
        let c = self.config.channels;
        let grid_x = f_x.grid.ok_or_else(|| Error::config("search tokens need a grid"))?;
        let pos_x = PosEncoding::for_grid(grid_x, c)?;
        // sparse template tokens carry no spatial code
        let pos_z = template.grid.map(|g| PosEncoding::for_grid(g, c)).transpose()?;

        let (mut x, mut z) = (*f_x, *template);
        for (l, layer) in self.layers.iter().enumerate() {
            let with_pos = self.config.pos_every_layer || l == 0;
            let (px, pz) = if with_pos { (Some(&pos_x), pos_z.as_ref()) } else { (None, None) };
            (x, z) = layer.forward(tape, &x, &z, px, pz, self.config.mode)?;
        }
        let (px, pz) = if self.config.pos_every_layer {
            (Some(&pos_x), pos_z.as_ref())
        } else {
            (None, None)
        };
        self.decoder.forward(tape, &x, &z, px, pz)
    }

    pub fn forward(&self, tape: &mut Tape, f_z: &Tokens, f_x: &Tokens) -> Result<Tokens> {
        let template = self.sparsify(tape, f_z)?;
        self.fuse(tape, &template, f_x)
    }

    fn check_width(&self, tape: &Tape, t: &Tokens) -> Result<()> {
        if t.channels(tape) != self.config.channels {
            return Err(Error::shape(
                "fusion input width",
                &[self.config.channels],
                tape.shape(t.var),
            ));
        }
        Ok(())
    }
}

impl Parameterized for FusionNet {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(fs) = &self.fs {
            fs.visit_params(f);
        }
        self.layers.iter().for_each(|l| l.visit_params(f));
        self.decoder.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(fs) = &mut self.fs {
            fs.visit_params_mut(f);
        }
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
        self.decoder.visit_params_mut(f);
    }
}
