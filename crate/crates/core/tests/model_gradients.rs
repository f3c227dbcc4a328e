//! Spot-checks end-to-end gradients of the training loss against central
//! differences on randomly chosen scalar parameters.

use hcat::fusion::FusionConfig;
use hcat::loss::LossWeights;
use hcat::model::{BackboneSpec, Hcat, ModelConfig};
use hcat::numerics::{rng, Parameterized};
use hcat::synthetic::training_pairs;
use hcat::train::{pair_gradients, pair_loss};
use rand::Rng as _;

fn tiny() -> ModelConfig {
    ModelConfig {
        fusion: FusionConfig {
            channels: 8,
            sparse_tokens: 2,
            layers: 2,
            heads: 2,
            ffn_hidden: 12,
            ..FusionConfig::default()
        },
        backbone: BackboneSpec {
            stride: 16,
            channels: vec![4, 4, 8, 8],
        },
        head_hidden: 8,
        template_size: 32,
        search_size: 64,
    }
}

fn perturbed(model: &Hcat, name: &str, index: usize, delta: f64) -> Hcat {
    let mut m = model.clone();
    m.visit_params_mut(&mut |p| {
        if p.name() == name {
            p.tensor_mut().data_mut()[index] += delta;
        }
    });
    m
}

#[test]
fn full_model_gradient_spot_check() {
    let cfg = tiny();
    let model = Hcat::new(cfg.clone(), 5).unwrap();
    let pair = &training_pairs(&cfg, 1, 3).unwrap()[0];
    let weights = LossWeights::default();
    let (_, grads) = pair_gradients(&model, pair, &weights).unwrap();

    let mut params = Vec::new();
    model.visit_params(&mut |p| params.push((p.name().to_string(), p.numel())));
    let mut r = rng(17);
    let step = 1e-5;
    for _ in 0..10 {
        let (name, numel) = &params[r.random_range(0..params.len())];
        let i = r.random_range(0..*numel);
        let plus = pair_loss(&perturbed(&model, name, i, step), pair, &weights).unwrap().total;
        let minus = pair_loss(&perturbed(&model, name, i, -step), pair, &weights).unwrap().total;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.get(name).map_or(0.0, |g| g[i]);
        // absolute floor for components that are numerically zero
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(err < 1e-3, "{name}[{i}]: analytic {analytic:e} vs numeric {numeric:e}");
    }
}
