//! Backbone, channel projection, fusion and prediction heads assembled into
//! one network.
//!
//! The backbone is a small stack of 3×3 convolutions standing in for a
//! pretrained feature extractor. Every stage is stride 2 except the last
//! stage of the stride-8 variant, which keeps resolution. Two normalised
//! coordinate channels are appended to the RGB input so that tokens know
//! where they sit inside the patch; the value path of attention carries no
//! position code otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionNet};
use crate::layers::{Linear, Mlp};
use crate::numerics::{rng, Param, Parameterized, Rng, Tape, Tensor, Var};
use crate::tokens::{Grid, TokenSet, Tokens};

/// Per-channel mean and standard deviation applied to `value / 255`.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

const COORD_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchRole {
    Template,
    Search,
}

/// Normalised pixels, `3 × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pixels: Tensor,
    role: PatchRole,
}

impl ImagePatch {
    /// `raw` holds channel-major RGB values in `[0, 255]`.
    pub fn from_raw(role: PatchRole, height: usize, width: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != 3 * height * width {
            return Err(Error::InvalidImage(format!(
                "{} values for a 3×{height}×{width} patch",
                raw.len()
            )));
        }
        let plane = height * width;
        let data = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (v / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c]
            })
            .collect();
        Ok(Self {
            pixels: Tensor::new(vec![3, height, width], data)?,
            role,
        })
    }

    /// Already-normalised pixels.
    pub fn from_normalized(role: PatchRole, pixels: Tensor) -> Result<Self> {
        if pixels.shape().len() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::InvalidImage(format!("expected 3×H×W, got {:?}", pixels.shape())));
        }
        Ok(Self { pixels, role })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Tensor {
        &mut self.pixels
    }

    pub fn role(&self) -> PatchRole {
        self.role
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub stride: usize,
    /// Output channels of the four convolution stages.
    pub channels: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            stride: 16,
            channels: vec![32, 64, 128, 256],
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride != 8 && self.stride != 16 {
            return Err(Error::config(format!("stride must be 8 or 16, got {}", self.stride)));
        }
        if self.channels.len() != 4 || self.channels.contains(&0) {
            return Err(Error::config("backbone needs four positive stage widths"));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.channels[3]
    }

    fn stage_strides(&self) -> [usize; 4] {
        if self.stride == 16 {
            [2, 2, 2, 2]
        } else {
            [2, 2, 2, 1]
        }
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<Grid> {
        if height == 0 || width == 0 || height % self.stride != 0 || width % self.stride != 0 {
            return Err(Error::InvalidImage(format!(
                "{height}×{width} input is not divisible by stride {}",
                self.stride
            )));
        }
        Ok(Grid::new(height / self.stride, width / self.stride))
    }
}

/// 3×3 convolution with padding 1, lowered to a gather plus a matrix product.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub linear: Linear,
    pub stride: usize,
}

impl Conv3x3 {
    fn new(name: &str, input: usize, output: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(name, input * 9, output, rng)?,
            stride,
        })
    }

    fn out_grid(&self, g: Grid) -> Grid {
        Grid::new(g.height.div_ceil(self.stride), g.width.div_ceil(self.stride))
    }

    fn forward(&self, tape: &mut Tape, x: Var, grid: Grid) -> Result<(Var, Grid)> {
        let cin = tape.shape(x)[0];
        let out = self.out_grid(grid);
        let (h, w) = (grid.height as isize, grid.width as isize);
        let mut index = Vec::with_capacity(cin * 9 * out.len());
        for c in 0..cin {
            for ky in 0..3isize {
                for kx in 0..3isize {
                    for oy in 0..out.height {
                        for ox in 0..out.width {
                            let y = (oy * self.stride) as isize + ky - 1;
                            let xx = (ox * self.stride) as isize + kx - 1;
                            let inside = (0..h).contains(&y) && (0..w).contains(&xx);
                            index.push(inside.then(|| (c * grid.len() + (y * w + xx) as usize) as u32));
                        }
                    }
                }
            }
        }
        let cols = tape.gather(x, index, vec![cin * 9, out.len()])?;
        let y = self.linear.forward(tape, cols)?;
        Ok((tape.relu(y)?, out))
    }

    fn macs(&self, out_tokens: usize) -> u64 {
        self.linear.macs(out_tokens)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub stages: Vec<Conv3x3>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut input = 3 + COORD_CHANNELS;
        let mut stages = Vec::with_capacity(4);
        for (i, (&c, s)) in spec.channels.iter().zip(spec.stage_strides()).enumerate() {
            stages.push(Conv3x3::new(&format!("backbone.{i}"), input, c, s, rng)?);
            input = c;
        }
        Ok(Self { spec, stages })
    }

    pub fn forward(&self, tape: &mut Tape, patch: &ImagePatch) -> Result<Tokens> {
        let (h, w) = (patch.height(), patch.width());
        let expected = self.spec.grid_for(h, w)?;
        let rgb = tape.constant(patch.pixels().clone().reshape(vec![3, h * w])?)?;
        let coords = tape.constant(coordinate_planes(h, w))?;
        let mut x = tape.concat_rows(&[rgb, coords])?;
        let mut grid = Grid::new(h, w);
        for stage in &self.stages {
            (x, grid) = stage.forward(tape, x, grid)?;
        }
        debug_assert_eq!(grid, expected);
        Ok(Tokens::new(x, Some(grid)))
    }

    /// `(name, macs)` per stage for an input of the given size.
    pub fn stage_macs(&self, height: usize, width: usize) -> Vec<(String, u64)> {
        let mut grid = Grid::new(height, width);
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                grid = s.out_grid(grid);
                (format!("backbone.{i}"), s.macs(grid.len()))
            })
            .collect()
    }
}

impl Parameterized for Backbone {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.stages.iter().for_each(|s| s.linear.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stages.iter_mut().for_each(|s| s.linear.visit_params_mut(f));
    }
}

/// x then y, each in `[-1, 1]` at pixel centres.
fn coordinate_planes(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        data.extend((0..w).map(|j| 2.0 * (j as f64 + 0.5) / w as f64 - 1.0));
    }
    for i in 0..h {
        data.extend(std::iter::repeat_n(2.0 * (i as f64 + 0.5) / h as f64 - 1.0, w));
    }
    Tensor::from_parts(vec![2, h * w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub backbone: BackboneSpec,
    pub head_hidden: usize,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            backbone: BackboneSpec::default(),
            head_hidden: 256,
            template_size: 128,
            search_size: 256,
        }
    }
}

impl ModelConfig {
    /// A reduced network that trains in a couple of minutes on one core.
    pub fn toy() -> Self {
        Self {
            fusion: FusionConfig {
                channels: 64,
                sparse_tokens: 4,
                layers: 2,
                heads: 4,
                ffn_hidden: 128,
                ..FusionConfig::default()
            },
            backbone: BackboneSpec {
                stride: 16,
                channels: vec![16, 32, 64, 64],
            },
            head_hidden: 64,
            template_size: 64,
            search_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.backbone.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::config("head_hidden must be at least 1"));
        }
        self.template_grid()?;
        self.search_grid()?;
        Ok(())
    }

    pub fn template_grid(&self) -> Result<Grid> {
        self.backbone.grid_for(self.template_size, self.template_size)
    }

    pub fn search_grid(&self) -> Result<Grid> {
        self.backbone.grid_for(self.search_size, self.search_size)
    }
}

/// Per-token predictions on a tape: raw classification logits `1 × n` and
/// boxes `4 × n` already squashed into `[0, 1]` as `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOutput {
    pub logits: Var,
    pub boxes: Var,
    pub grid: Grid,
}

impl HeadOutput {
    pub fn to_prediction(&self, tape: &Tape) -> PredictionGrid {
        let b = tape.value(self.boxes);
        let n = b.cols();
        PredictionGrid {
            boxes: (0..n).map(|i| [b.at(0, i), b.at(1, i), b.at(2, i), b.at(3, i)]).collect(),
            scores: tape.value(self.logits).data().iter().map(|&z| crate::numerics::sigmoid(z)).collect(),
            grid: self.grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrid {
    /// Normalised `(cx, cy, w, h)` per token.
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub grid: Grid,
}

impl PredictionGrid {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub regression: Mlp,
    pub classification: Mlp,
}

impl Heads {
    pub fn new(channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            regression: Mlp::new("head.reg", &[channels, hidden, hidden, 4], rng)?,
            classification: Mlp::new("head.cls", &[channels, hidden, hidden, 1], rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, fused: &Tokens) -> Result<HeadOutput> {
        let c = self.regression.layers[0].input_dim();
        if fused.channels(tape) != c {
            return Err(Error::shape("head input width", &[c], tape.shape(fused.var)));
        }
        let grid = fused.grid.ok_or_else(|| Error::config("head input needs a grid"))?;
        let raw = self.regression.forward(tape, fused.var)?;
        let boxes = tape.sigmoid(raw)?;
        let logits = self.classification.forward(tape, fused.var)?;
        Ok(HeadOutput { logits, boxes, grid })
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        self.regression.macs(tokens) + self.classification.macs(tokens)
    }

    pub fn zero(&mut self) {
        self.visit_params_mut(&mut |p| p.tensor_mut().data_mut().fill(0.0));
    }
}

impl Parameterized for Heads {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.regression.visit_params(f);
        self.classification.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.regression.visit_params_mut(f);
        self.classification.visit_params_mut(f);
    }
}

/// The full tracker network.
#[derive(Clone, Debug, PartialEq)]
pub struct Hcat {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// 1×1 projection from backbone width to the fusion width.
    pub projection: Linear,
    pub fusion: FusionNet,
    pub heads: Heads,
}

impl Hcat {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng(seed);
        let backbone = Backbone::new(config.backbone.clone(), &mut rng)?;
        let c = config.fusion.channels;
        let projection = Linear::new("projection", config.backbone.out_channels(), c, &mut rng)?;
        let fusion = FusionNet::new(config.fusion.clone(), &mut rng)?;
        let heads = Heads::new(c, config.head_hidden, &mut rng)?;
        Ok(Self {
            config,
            backbone,
            projection,
            fusion,
            heads,
        })
    }

    /// Backbone plus projection for a patch of the configured size.
    pub fn extract(&self, tape: &mut Tape, patch: &ImagePatch) -> Result<Tokens> {
        let expected = match patch.role() {
            PatchRole::Template => self.config.template_size,
            PatchRole::Search => self.config.search_size,
        };
        if patch.height() != expected || patch.width() != expected {
            return Err(Error::InvalidImage(format!(
                "{:?} patch is {}×{}, config expects {expected}×{expected}",
                patch.role(),
                patch.height(),
                patch.width()
            )));
        }
        let feats = self.backbone.forward(tape, patch)?;
        let projected = self.projection.forward(tape, feats.var)?;
        Ok(Tokens::new(projected, feats.grid))
    }

    /// Template features after sparsification, ready to be cached.
    pub fn encode_template(&self, tape: &mut Tape, template: &ImagePatch) -> Result<Tokens> {
        let f_z = self.extract(tape, template)?;
        self.fusion.sparsify(tape, &f_z)
    }

    pub fn forward_with_template(&self, tape: &mut Tape, template: &Tokens, search: &ImagePatch) -> Result<HeadOutput> {
        let f_x = self.extract(tape, search)?;
        let fused = self.fusion.fuse(tape, template, &f_x)?;
        self.heads.forward(tape, &fused)
    }

    pub fn forward(&self, tape: &mut Tape, template: &ImagePatch, search: &ImagePatch) -> Result<HeadOutput> {
        let z = self.encode_template(tape, template)?;
        self.forward_with_template(tape, &z, search)
    }

    /// Inference on a cached template.
    pub fn predict_cached(&self, template: &TokenSet, search: &ImagePatch) -> Result<PredictionGrid> {
        let mut tape = Tape::inference();
        let z = template.record(&mut tape)?;
        let out = self.forward_with_template(&mut tape, &z, search)?;
        Ok(out.to_prediction(&tape))
    }

    pub fn predict(&self, template: &ImagePatch, search: &ImagePatch) -> Result<PredictionGrid> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, template, search)?;
        Ok(out.to_prediction(&tape))
    }
}

impl Parameterized for Hcat {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.backbone.visit_params(f);
        self.projection.visit_params(f);
        self.fusion.visit_params(f);
        self.heads.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params_mut(f);
        self.projection.visit_params_mut(f);
        self.fusion.visit_params_mut(f);
        self.heads.visit_params_mut(f);
    }
}
