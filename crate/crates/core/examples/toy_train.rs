//! Trains the toy network on generated pairs, then tracks one sequence.
//!
//! `cargo run --release -p hcat --example toy_train -- [steps] [lr] [batch]`

use std::time::Instant;

use hcat::loss::{iou, LossWeights};
use hcat::model::{Hcat, ModelConfig};
use hcat::synthetic::{training_pairs, MovingSequence};
use hcat::tracker::{Tracker, TrackerConfig};
use hcat::train::{evaluate, TrainConfig, Trainer};

fn main() -> hcat::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        steps: arg(0, defaults.steps as f64) as usize,
        lr: arg(1, defaults.lr),
        batch: arg(2, defaults.batch as f64) as usize,
        ..defaults
    };
    let cfg = ModelConfig::toy();
    let weights = LossWeights::toy();
    let pairs = training_pairs(&cfg, train.pairs, train.seed)?;
    let mut model = Hcat::new(cfg, train.seed)?;
    let before = evaluate(&model, &pairs, &weights)?;
    println!("initial loss {:.4} iou {:.3}", before.loss.total, before.mean_iou);

    let t = Instant::now();
    let mut trainer = Trainer::new(train)?;
    trainer.run(&mut model, &pairs, &weights, |l| {
        if l.step % 25 == 0 {
            println!(
                "step {:4} loss {:.4} (cls {:.4} l1 {:.4} giou {:.4}) |g| {:.3}",
                l.step, l.loss.total, l.loss.classification, l.loss.l1, l.loss.giou, l.grad_norm
            );
        }
    })?;
    let after = evaluate(&model, &pairs, &weights)?;
    println!(
        "final loss {:.4} ({:.3}x initial) iou {:.3} [{:.1}s]",
        after.loss.total,
        after.loss.total / before.loss.total,
        after.mean_iou,
        t.elapsed().as_secs_f64()
    );
    let held = evaluate(&model, &training_pairs(&model.config, 100, 999)?, &weights)?;
    println!("held-out loss {:.4} iou {:.3}", held.loss.total, held.mean_iou);

    let tracker = Tracker::new(&model, TrackerConfig::default())?;
    for seed in [11, 12, 13] {
        let seq = MovingSequence::generate(100, seed);
        let mut state = tracker.init(&seq.frame(0), seq.boxes[0])?;
        let mut total = 0.0;
        for i in 1..seq.len() {
            total += iou(&tracker.update(&mut state, &seq.frame(i))?.bbox, &seq.boxes[i]);
        }
        println!("sequence {seed}: mean IoU {:.3}", total / (seq.len() - 1) as f64);
    }
    Ok(())
}
