use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate frame a box is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxFrame {
    /// Pixels of the full video frame.
    Image,
    /// Fractions of the search patch side, `[0, 1]`.
    Normalized,
}

/// Axis-aligned box stored as centre and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub frame: BoxFrame,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, frame: BoxFrame) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite box ({cx}, {cy}, {w}, {h})")));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!("negative size {w}×{h}")));
        }
        Ok(Self { cx, cy, w, h, frame })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, frame: BoxFrame) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, frame)
    }

    /// Top-left corner plus size, as written to trace files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64, frame: BoxFrame) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h, frame)
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_degenerate(&self) -> bool {
        self.w <= 0.0 || self.h <= 0.0
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Whether `(x, y)` lies in `[x1, x2) × [y1, y2)`.
    pub fn contains_half_open(&self, x: f64, y: f64) -> bool {
        x >= self.x1() && x < self.x2() && y >= self.y1() && y < self.y2()
    }
}
