//! Mini-batch SGD with momentum over generated pairs, plus evaluation.

use std::collections::BTreeMap as HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{assign_samples, giou, iou, total_loss, LossValues, LossWeights};
use crate::model::Hcat;
use crate::numerics::{rng, Parameterized, Tape};
use crate::synthetic::TrainingPair;
use crate::tracker::{argmax, BBox, BoxFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub pairs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr: 0.006,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: 5.0,
            pairs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.pairs == 0 {
            return Err(Error::config("batch and pairs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::config("momentum must lie in [0, 1); decay and clip must be non-negative"));
        }
        Ok(())
    }
}

/// Loss and gradients of one pair, without touching the model.
pub fn pair_gradients(model: &Hcat, pair: &TrainingPair, weights: &LossWeights) -> Result<(LossValues, HashMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &pair.template, &pair.search)?;
    let assignment = assign_samples(out.grid, pair.gt);
    let terms = total_loss(&mut tape, &out, &assignment, weights)?;
    let values = terms.values(&tape);
    tape.backward(terms.total)?;
    let mut grads = HashMap::new();
    model.visit_params(&mut |p| {
        if let Some(g) = tape.param_grad(p.name()) {
            grads.insert(p.name().to_string(), g.to_vec());
        }
    });
    Ok((values, grads))
}

pub fn pair_loss(model: &Hcat, pair: &TrainingPair, weights: &LossWeights) -> Result<LossValues> {
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &pair.template, &pair.search)?;
    let assignment = assign_samples(out.grid, pair.gt);
    Ok(total_loss(&mut tape, &out, &assignment, weights)?.values(&tape))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: LossValues,
    /// IoU of the highest-scoring box against the ground truth.
    pub mean_iou: f64,
    pub mean_giou: f64,
}

pub fn evaluate(model: &Hcat, pairs: &[TrainingPair], weights: &LossWeights) -> Result<Evaluation> {
    let mut e = Evaluation::default();
    for pair in pairs {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &pair.template, &pair.search)?;
        let assignment = assign_samples(out.grid, pair.gt);
        let l = total_loss(&mut tape, &out, &assignment, weights)?.values(&tape);
        let pred = out.to_prediction(&tape);
        let best = argmax(&pred.scores).ok_or_else(|| Error::config("empty prediction"))?;
        let [cx, cy, w, h] = pred.boxes[best];
        let b = BBox::new(cx, cy, w, h, BoxFrame::Normalized)?;
        e.loss.total += l.total;
        e.loss.classification += l.classification;
        e.loss.l1 += l.l1;
        e.loss.giou += l.giou;
        e.mean_iou += iou(&b, &pair.gt);
        e.mean_giou += giou(&b, &pair.gt);
    }
    let n = pairs.len().max(1) as f64;
    e.loss.total /= n;
    e.loss.classification /= n;
    e.loss.l1 /= n;
    e.loss.giou /= n;
    e.mean_iou /= n;
    e.mean_giou /= n;
    Ok(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossValues,
    pub grad_norm: f64,
}

/// Momentum SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
pub struct Trainer {
    pub config: TrainConfig,
    velocity: HashMap<String, Vec<f64>>,
    order: Vec<usize>,
    cursor: usize,
    rng: crate::numerics::Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = rng(config.seed ^ 0x5eed);
        Ok(Self {
            config,
            velocity: HashMap::new(),
            order: Vec::new(),
            cursor: 0,
            rng,
        })
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch);
        while out.len() < self.config.batch.min(n) {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn step(&mut self, model: &mut Hcat, pairs: &[TrainingPair], weights: &LossWeights, step: usize) -> Result<StepLog> {
        let batch = self.next_batch(pairs.len());
        let scale = 1.0 / batch.len() as f64;
        let mut loss = LossValues::default();
        let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
        for &i in &batch {
            let (l, g) = pair_gradients(model, &pairs[i], weights)?;
            if !l.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            loss.total += scale * l.total;
            loss.classification += scale * l.classification;
            loss.l1 += scale * l.l1;
            loss.giou += scale * l.giou;
            for (name, g) in g {
                let acc = grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += scale * b);
            }
        }
        let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let (lr, mu, wd) = (self.config.lr, self.config.momentum, self.config.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params_mut(&mut |p| {
            let Some(g) = grads.get(p.name()) else { return };
            let v = velocity.entry(p.name().to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let data = p.tensor_mut().data_mut();
            for ((x, v), g) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + clip * g + wd * *x;
                *x -= lr * *v;
            }
        });
        Ok(StepLog {
            step,
            loss,
            grad_norm: norm,
        })
    }

    /// Runs `config.steps` steps, reporting each to `log`.
    pub fn run(
        &mut self,
        model: &mut Hcat,
        pairs: &[TrainingPair],
        weights: &LossWeights,
        mut log: impl FnMut(&StepLog),
    ) -> Result<()> {
        for s in 0..self.config.steps {
            let entry = self.step(model, pairs, weights, s)?;
            log(&entry);
        }
        Ok(())
    }
}
