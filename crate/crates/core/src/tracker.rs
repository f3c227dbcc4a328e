//! Online tracking: crop geometry, Hann-window rescoring and the per-frame
//! loop.
//!
//! A crop of side `factor · sqrt(w · h)` is taken around the box centre and
//! resampled bilinearly to the patch size. The patch's outer corners sit on
//! the crop square's corners, so output pixel `j` samples the source at
//! `x0 + (j + 0.5) · side / out`. Source pixels outside the frame read as the
//! frame's per-channel mean.

mod bbox;

pub use bbox::{BBox, BoxFrame};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hcat, ImagePatch, PatchRole};
use crate::numerics::Tape;
use crate::tokens::{Grid, TokenSet};

/// An RGB frame, channel-major `3 × height × width`, values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage("empty frame".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::InvalidImage(format!(
                "{} values for a 3×{height}×{width} frame",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite pixel".into()));
        }
        Ok(Self { height, width, data })
    }

    /// From interleaved `RGBRGB…` bytes.
    pub fn from_interleaved(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::InvalidImage(format!("{} bytes for {height}×{width} RGB", rgb.len())));
        }
        let plane = height * width;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32;
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.height * self.width;
        let mut m = [0.0; 3];
        for (c, v) in m.iter_mut().enumerate() {
            *v = self.data[c * plane..(c + 1) * plane].iter().map(|&p| p as f64).sum::<f64>() / plane as f64;
        }
        m
    }
}

/// Where a patch came from, for mapping boxes back to the frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropMeta {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropMeta {
    pub fn to_image(&self, b: &BBox) -> Result<BBox> {
        expect_frame(b, BoxFrame::Normalized)?;
        let x0 = self.cx - self.side / 2.0;
        let y0 = self.cy - self.side / 2.0;
        BBox::new(
            x0 + b.cx * self.side,
            y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
            BoxFrame::Image,
        )
    }

    pub fn to_normalized(&self, b: &BBox) -> Result<BBox> {
        expect_frame(b, BoxFrame::Image)?;
        let x0 = self.cx - self.side / 2.0;
        let y0 = self.cy - self.side / 2.0;
        BBox::new(
            (b.cx - x0) / self.side,
            (b.cy - y0) / self.side,
            b.w / self.side,
            b.h / self.side,
            BoxFrame::Normalized,
        )
    }
}

fn expect_frame(b: &BBox, frame: BoxFrame) -> Result<()> {
    if b.frame != frame {
        return Err(Error::InvalidBox(format!("expected a {frame:?} box, got {:?}", b.frame)));
    }
    Ok(())
}

/// Raw crop values (`3 × out × out`, `[0, 255]`) and their geometry.
pub fn crop_raw(frame: &Image, b: &BBox, factor: f64, out_size: usize) -> Result<(Vec<f64>, CropMeta)> {
    expect_frame(b, BoxFrame::Image)?;
    if b.is_degenerate() {
        return Err(Error::InvalidBox(format!("zero-area box {b:?}")));
    }
    if out_size == 0 || factor <= 0.0 {
        return Err(Error::InvalidBox(format!("crop factor {factor} to {out_size} pixels")));
    }
    let side = factor * (b.w * b.h).sqrt();
    let meta = CropMeta {
        cx: b.cx,
        cy: b.cy,
        side,
        out_size,
    };
    let means = frame.channel_means();
    let step = side / out_size as f64;
    let x0 = b.cx - side / 2.0;
    let y0 = b.cy - side / 2.0;
    let plane = out_size * out_size;
    let mut out = vec![0.0; 3 * plane];
    let (h, w) = (frame.height as isize, frame.width as isize);
    for i in 0..out_size {
        // source coordinates relative to pixel centres
        let v = y0 + (i as f64 + 0.5) * step - 0.5;
        let vy = v.floor();
        let fy = v - vy;
        for j in 0..out_size {
            let u = x0 + (j as f64 + 0.5) * step - 0.5;
            let ux = u.floor();
            let fx = u - ux;
            let (ix, iy) = (ux as isize, vy as isize);
            let taps = [
                (iy, ix, (1.0 - fy) * (1.0 - fx)),
                (iy, ix + 1, (1.0 - fy) * fx),
                (iy + 1, ix, fy * (1.0 - fx)),
                (iy + 1, ix + 1, fy * fx),
            ];
            for (c, &mean) in means.iter().enumerate() {
                let mut acc = 0.0;
                for &(y, x, wt) in &taps {
                    let px = if (0..h).contains(&y) && (0..w).contains(&x) {
                        frame.pixel(c, y as usize, x as usize) as f64
                    } else {
                        mean
                    };
                    acc += wt * px;
                }
                out[c * plane + i * out_size + j] = acc;
            }
        }
    }
    Ok((out, meta))
}

pub fn crop_patch(frame: &Image, b: &BBox, factor: f64, out_size: usize, role: PatchRole) -> Result<(ImagePatch, CropMeta)> {
    let (raw, meta) = crop_raw(frame, b, factor, out_size)?;
    Ok((ImagePatch::from_raw(role, out_size, out_size, &raw)?, meta))
}

/// Outer product of 1-D Hann windows, row-major `h × w`.
pub fn hanning_window(h: usize, w: usize) -> Result<Vec<f64>> {
    if h < 2 || w < 2 {
        return Err(Error::config(format!("Hann window needs at least 2×2, got {h}×{w}")));
    }
    let hann = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect()
    };
    let (wy, wx) = (hann(h), hann(w));
    Ok(wy.iter().flat_map(|a| wx.iter().map(move |b| a * b)).collect())
}

/// `(1 − w_inf) · score + w_inf · window`.
pub fn apply_window_penalty(scores: &[f64], window: &[f64], w_inf: f64) -> Result<Vec<f64>> {
    if scores.len() != window.len() {
        return Err(Error::shape("window penalty", &[scores.len()], &[window.len()]));
    }
    if !(0.0..=1.0).contains(&w_inf) {
        return Err(Error::config(format!("w_inf must lie in [0, 1], got {w_inf}")));
    }
    Ok(scores.iter().zip(window).map(|(s, w)| (1.0 - w_inf) * s + w_inf * w).collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub w_inf: f64,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Weight of the predicted size against the previous one; `1` takes the
    /// prediction as is.
    pub size_rate: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            w_inf: 0.49,
            template_factor: 2.0,
            search_factor: 4.0,
            size_rate: 0.3,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w_inf) {
            return Err(Error::config(format!("w_inf must lie in [0, 1], got {}", self.w_inf)));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(Error::config("crop factors must be positive"));
        }
        if !(self.size_rate > 0.0 && self.size_rate <= 1.0) {
            return Err(Error::config(format!("size_rate must lie in (0, 1], got {}", self.size_rate)));
        }
        Ok(())
    }
}

/// Per-sequence memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    /// Template tokens after sparsification, computed once at init.
    pub template: TokenSet,
    /// Last box in image pixels.
    pub last: BBox,
    pub window: Vec<f64>,
    pub grid: Grid,
    pub w_inf: f64,
    pub frame_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackOutput {
    pub frame_index: usize,
    pub bbox: BBox,
    pub score: f64,
}

pub struct Tracker<'m> {
    model: &'m Hcat,
    config: TrackerConfig,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Hcat, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, config })
    }

    pub fn init(&self, frame: &Image, init_box: BBox) -> Result<TrackState> {
        let size = self.model.config.template_size;
        let (patch, _) = crop_patch(frame, &init_box, self.config.template_factor, size, PatchRole::Template)?;
        let mut tape = Tape::inference();
        let template = self.model.encode_template(&mut tape, &patch)?.to_set(&tape);
        let grid = self.model.config.search_grid()?;
        Ok(TrackState {
            template,
            last: init_box,
            window: hanning_window(grid.height, grid.width)?,
            grid,
            w_inf: self.config.w_inf,
            frame_index: 0,
        })
    }

    pub fn update(&self, state: &mut TrackState, frame: &Image) -> Result<TrackOutput> {
        let size = self.model.config.search_size;
        let (patch, meta) = crop_patch(frame, &state.last, self.config.search_factor, size, PatchRole::Search)?;
        let pred = self.model.predict_cached(&state.template, &patch)?;
        let adjusted = apply_window_penalty(&pred.scores, &state.window, state.w_inf)?;
        let best = argmax(&adjusted).ok_or_else(|| Error::config("empty prediction grid"))?;
        let [cx, cy, w, h] = pred.boxes[best];
        let b = meta.to_image(&BBox::new(cx, cy, w, h, BoxFrame::Normalized)?)?;
        // size errors compound from frame to frame, so the size moves only
        // part of the way toward the prediction
        let r = self.config.size_rate;
        let (w, h) = ((1.0 - r) * state.last.w + r * b.w, (1.0 - r) * state.last.h + r * b.h);
        // keep the centre on the frame and the box at least a pixel wide so
        // the next crop stays well defined
        let b = BBox::new(
            b.cx.clamp(0.0, frame.width as f64),
            b.cy.clamp(0.0, frame.height as f64),
            w.max(1.0),
            h.max(1.0),
            BoxFrame::Image,
        )?;
        state.last = b;
        state.frame_index += 1;
        Ok(TrackOutput {
            frame_index: state.frame_index,
            bbox: b,
            score: pred.scores[best],
        })
    }
}

/// One `frame_idx x1 y1 w h score` line in image pixels.
pub fn trace_line(out: &TrackOutput) -> String {
    let b = &out.bbox;
    format!("{} {:.4} {:.4} {:.4} {:.4} {:.6}", out.frame_index, b.x1(), b.y1(), b.w, b.h, out.score)
}

#[cfg(test)]
mod tests;
