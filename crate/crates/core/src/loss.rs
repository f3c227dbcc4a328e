//! Training objective: centre-in-box sample assignment, a binary
//! cross-entropy with down-weighted negatives, and ℓ1 + GIoU regression on
//! positive tokens.
//!
//! Reductions:
//! - classification: each token's BCE term is scaled first (negatives by
//!   `neg_scale`), then averaged over all tokens;
//! - ℓ1: summed over the four `(cx, cy, w, h)` coordinates, averaged over
//!   positives;
//! - GIoU: `1 − giou` averaged over positives.
//!
//! Both regression terms are exactly zero when there are no positives.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadOutput;
use crate::numerics::{Tape, Tensor, Var};
use crate::tokens::Grid;
use crate::tracker::BBox;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub classification: f64,
    pub neg_scale: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            classification: 1.0,
            neg_scale: 1.0 / 16.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl LossWeights {
    /// Weights for the small synthetic regimen. With few channels the
    /// classification term otherwise loses to the box terms and the argmax
    /// rarely lands inside the target.
    pub fn toy() -> Self {
        Self {
            classification: 8.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.classification, self.neg_scale, self.l1, self.giou];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleAssignment {
    pub labels: Vec<bool>,
    pub gt: BBox,
    pub grid: Grid,
}

impl SampleAssignment {
    pub fn positives(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i).collect()
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&p| p).count()
    }
}

/// Marks a token positive when its cell centre lies in the normalised
/// ground-truth box (half-open on the far edges).
pub fn assign_samples(grid: Grid, gt: BBox) -> SampleAssignment {
    let labels = if gt.is_degenerate() {
        warn!("degenerate ground-truth box {gt:?}; every token is negative");
        vec![false; grid.len()]
    } else {
        (0..grid.len())
            .map(|i| {
                let (x, y) = grid.cell_center(i);
                gt.contains_half_open(x, y)
            })
            .collect()
    };
    SampleAssignment { labels, gt, grid }
}

/// Weighted BCE on probabilities `scores` (`1 × n`), clamped to
/// `[ε, 1 − ε]`.
pub fn bce_weighted(tape: &mut Tape, scores: Var, assignment: &SampleAssignment, weights: &LossWeights) -> Result<Var> {
    let n = assignment.labels.len();
    if tape.shape(scores) != [1, n] {
        return Err(Error::shape("bce scores", &[1, n], tape.shape(scores)));
    }
    let pos: Vec<f64> = assignment.labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    let neg: Vec<f64> = pos.iter().map(|y| (1.0 - y) * weights.neg_scale).collect();
    let pos = tape.constant(Tensor::new(vec![1, n], pos)?)?;
    let neg = tape.constant(Tensor::new(vec![1, n], neg)?)?;

    let p = tape.clamp(scores, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(p)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let log_q = tape.log(q)?;
    let a = tape.mul(pos, log_p)?;
    let b = tape.mul(neg, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalised IoU in `(−1, 1]`. Two empty boxes give 0.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x2().max(b.x2()) - a.x1().min(b.x1())) * (a.y2().max(b.y2()) - a.y1().min(b.y1()));
    if union <= 0.0 || hull <= 0.0 {
        if a.is_degenerate() && b.is_degenerate() {
            warn!("GIoU of two empty boxes is defined as 0");
        }
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let h = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    w * h
}

/// Recorded GIoU between each column of `pred` (`4 × m`, `(cx, cy, w, h)`)
/// and a fixed box; returns `1 × m`. Predicted sizes must be positive.
pub fn giou_graph(tape: &mut Tape, pred: Var, gt: &BBox) -> Result<Var> {
    let m = tape.shape(pred)[1];
    let row = |tape: &mut Tape, r: usize| tape.slice_rows(pred, r, 1);
    let (cx, cy, w, h) = (row(tape, 0)?, row(tape, 1)?, row(tape, 2)?, row(tape, 3)?);
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    let px1 = tape.sub(cx, hw)?;
    let px2 = tape.add(cx, hw)?;
    let py1 = tape.sub(cy, hh)?;
    let py2 = tape.add(cy, hh)?;

    let mut c = |v: f64| tape_full(tape, m, v);
    let (gx1, gx2, gy1, gy2) = (c(gt.x1())?, c(gt.x2())?, c(gt.y1())?, c(gt.y2())?);

    let ix1 = tape.maximum(px1, gx1)?;
    let ix2 = tape.minimum(px2, gx2)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;

    let area_p = tape.mul(w, h)?;
    let union = tape.add_scalar(area_p, gt.area())?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(px1, gx1)?;
    let hx2 = tape.maximum(px2, gx2)?;
    let hy1 = tape.minimum(py1, gy1)?;
    let hy2 = tape.maximum(py2, gy2)?;
    let hw = tape.sub(hx2, hx1)?;
    let hh = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hw, hh)?;
    let slack = tape.sub(hull, union)?;
    let slack = tape.div(slack, hull)?;
    tape.sub(iou, slack)
}

fn tape_full(tape: &mut Tape, m: usize, v: f64) -> Result<Var> {
    tape.constant(Tensor::full(vec![1, m], v))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: Var,
    pub classification: Var,
    pub l1: Var,
    pub giou: Var,
}

/// Unweighted component values alongside the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub classification: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.value(self.total).item(),
            classification: tape.value(self.classification).item(),
            l1: tape.value(self.l1).item(),
            giou: tape.value(self.giou).item(),
        }
    }
}

pub fn total_loss(tape: &mut Tape, out: &HeadOutput, assignment: &SampleAssignment, weights: &LossWeights) -> Result<LossTerms> {
    out.grid.ensure_eq(&assignment.grid)?;
    let scores = tape.sigmoid(out.logits)?;
    let classification = bce_weighted(tape, scores, assignment, weights)?;
    let mut total = tape.scale(classification, weights.classification)?;

    let positives = assignment.positives();
    let (l1, giou) = if positives.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0))?;
        (zero, zero)
    } else {
        let m = positives.len() as f64;
        let pred = tape.select_cols(out.boxes, &positives)?;
        let gt = assignment.gt.as_array();
        let target = Tensor::new(
            vec![4, positives.len()],
            gt.iter().flat_map(|&v| std::iter::repeat_n(v, positives.len())).collect(),
        )?;
        let target = tape.constant(target)?;
        let diff = tape.sub(pred, target)?;
        let diff = tape.abs(diff)?;
        let l1 = tape.sum(diff)?;
        let l1 = tape.scale(l1, 1.0 / m)?;

        let g = giou_graph(tape, pred, &assignment.gt)?;
        let g = tape.mean(g)?;
        let g = tape.scale(g, -1.0)?;
        let g = tape.add_scalar(g, 1.0)?;
        (l1, g)
    };
    let wl1 = tape.scale(l1, weights.l1)?;
    total = tape.add(total, wl1)?;
    let wg = tape.scale(giou, weights.giou)?;
    total = tape.add(total, wg)?;
    Ok(LossTerms {
        total,
        classification,
        l1,
        giou,
    })
}
