//! Generated tracking data: saturated rectangles over smooth textured
//! backgrounds.
//!
//! A training pair mimics one tracking step: the template is cropped around
//! the target in one frame, and the search patch is cropped around that same
//! (previous) position in a frame where the target has moved and rescaled a
//! little.

use rand::Rng as _;

use crate::error::Result;
use crate::model::{ImagePatch, ModelConfig, PatchRole};
use crate::numerics::{rng, Rng};
use crate::tracker::{crop_patch, BBox, BoxFrame, Image, TrackerConfig};

/// A fixed background plus a target appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    height: usize,
    width: usize,
    background: Vec<f32>,
    color: [f32; 3],
    stripe: usize,
}

impl Scene {
    pub fn random(height: usize, width: usize, rng: &mut Rng) -> Self {
        let plane = height * width;
        let mut background = vec![0.0f32; 3 * plane];
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(90.0..150.0));
        let waves: Vec<(f32, f32, f32, f32)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.01..0.08),
                    rng.random_range(0.01..0.08),
                    rng.random_range(0.0..std::f32::consts::TAU),
                    rng.random_range(8.0..20.0),
                )
            })
            .collect();
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let mut v = base[c];
                    for (i, &(fx, fy, ph, amp)) in waves.iter().enumerate() {
                        let shift = (c + i) as f32;
                        v += amp * (fx * x as f32 + fy * y as f32 + ph + shift).sin();
                    }
                    v += rng.random_range(-12.0..12.0);
                    background[c * plane + y * width + x] = v.clamp(0.0, 255.0);
                }
            }
        }
        // one dominant channel keeps the target salient against the
        // muted background
        let dominant = rng.random_range(0..3);
        let color = std::array::from_fn(|c| {
            if c == dominant {
                rng.random_range(210.0..255.0)
            } else {
                rng.random_range(0.0..60.0)
            }
        });
        Self {
            height,
            width,
            background,
            color,
            stripe: rng.random_range(3..7),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The background with the target drawn at `b` (image frame).
    pub fn render(&self, b: &BBox) -> Image {
        let mut data = self.background.clone();
        let plane = self.height * self.width;
        let x0 = b.x1().round().max(0.0) as usize;
        let x1 = (b.x2().round().max(0.0) as usize).min(self.width);
        let y0 = b.y1().round().max(0.0) as usize;
        let y1 = (b.y2().round().max(0.0) as usize).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let dark = ((x - x0) / self.stripe + (y - y0) / self.stripe) % 2 == 1;
                for c in 0..3 {
                    let v = self.color[c];
                    data[c * plane + y * self.width + x] = if dark { 0.75 * v } else { v };
                }
            }
        }
        Image::new(self.height, self.width, data).expect("rendered frame is valid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub template: ImagePatch,
    pub search: ImagePatch,
    /// Target in the search patch, normalised.
    pub gt: BBox,
}

/// Frame size and target ranges for generated data.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub frame: usize,
    pub min_side: f64,
    pub max_side: f64,
    /// Largest per-axis displacement between template and search frames,
    /// as a fraction of the box's geometric-mean side.
    pub max_shift: f64,
    /// Largest relative size change between the two frames.
    pub max_rescale: f64,
    /// Largest relative error of the size the search crop is taken at, so
    /// the target's scale inside the patch varies.
    pub crop_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            frame: 192,
            min_side: 24.0,
            max_side: 44.0,
            max_shift: 0.6,
            max_rescale: 0.1,
            crop_jitter: 0.3,
        }
    }
}

fn random_box(spec: &SyntheticSpec, rng: &mut Rng) -> BBox {
    let w = rng.random_range(spec.min_side..spec.max_side);
    let h = rng.random_range(spec.min_side..spec.max_side);
    let margin = spec.max_side;
    let f = spec.frame as f64;
    let cx = rng.random_range(margin..f - margin);
    let cy = rng.random_range(margin..f - margin);
    BBox::new(cx, cy, w, h, BoxFrame::Image).expect("positive box")
}

pub fn training_pair(cfg: &ModelConfig, spec: &SyntheticSpec, crops: &TrackerConfig, rng: &mut Rng) -> Result<TrainingPair> {
    let scene = Scene::random(spec.frame, spec.frame, rng);
    let b0 = random_box(spec, rng);
    let side = (b0.w * b0.h).sqrt();
    let dx = rng.random_range(-spec.max_shift..=spec.max_shift) * side;
    let dy = rng.random_range(-spec.max_shift..=spec.max_shift) * side;
    let s = 1.0 + rng.random_range(-spec.max_rescale..=spec.max_rescale);
    let b1 = BBox::new(b0.cx + dx, b0.cy + dy, b0.w * s, b0.h * s, BoxFrame::Image)?;
    let j = 1.0 + rng.random_range(-spec.crop_jitter..=spec.crop_jitter);
    let reference = BBox::new(b0.cx, b0.cy, b0.w * j, b0.h * j, BoxFrame::Image)?;

    let (template, _) = crop_patch(&scene.render(&b0), &b0, crops.template_factor, cfg.template_size, PatchRole::Template)?;
    let (search, meta) = crop_patch(&scene.render(&b1), &reference, crops.search_factor, cfg.search_size, PatchRole::Search)?;
    Ok(TrainingPair {
        template,
        search,
        gt: meta.to_normalized(&b1)?,
    })
}

pub fn training_pairs(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<TrainingPair>> {
    let mut r = rng(seed);
    let spec = SyntheticSpec::default();
    let crops = TrackerConfig::default();
    (0..n).map(|_| training_pair(cfg, &spec, &crops, &mut r)).collect()
}

/// A target moving with constant speed and bouncing off the frame edges.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingSequence {
    pub scene: Scene,
    pub boxes: Vec<BBox>,
}

impl MovingSequence {
    pub fn generate(frames: usize, seed: u64) -> Self {
        let spec = SyntheticSpec::default();
        let mut r = rng(seed);
        let scene = Scene::random(spec.frame, spec.frame, &mut r);
        let first = random_box(&spec, &mut r);
        let speed = r.random_range(1.5..3.0);
        let angle = r.random_range(0.0..std::f64::consts::TAU);
        let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
        let f = spec.frame as f64;
        let mut b = first;
        let mut boxes = Vec::with_capacity(frames);
        for _ in 0..frames {
            boxes.push(b);
            let (mut cx, mut cy) = (b.cx + vx, b.cy + vy);
            if cx - b.w / 2.0 < 0.0 || cx + b.w / 2.0 > f {
                vx = -vx;
                cx = b.cx + vx;
            }
            if cy - b.h / 2.0 < 0.0 || cy + b.h / 2.0 > f {
                vy = -vy;
                cy = b.cy + vy;
            }
            b = BBox::new(cx, cy, b.w, b.h, BoxFrame::Image).expect("positive box");
        }
        Self { scene, boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn frame(&self, i: usize) -> Image {
        self.scene.render(&self.boxes[i])
    }
}
