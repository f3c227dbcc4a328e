use std::cell::Cell;

use proptest::prelude::*;

use super::*;
use crate::fusion::FusionConfig;
use crate::numerics::Parameterized;

/// Naive product that counts scalar multiply-adds.
fn counted_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, count: &Cell<u64>) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
                count.set(count.get() + 1);
            }
        }
    }
    out
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    (0..c).flat_map(|j| (0..r).map(move |i| x[i * c + j])).collect()
}

/// Single-head attention core with counted products; `q` is `d × n_q`.
fn counted_attention(q: &[f64], k: &[f64], v: &[f64], d: usize, nq: usize, nk: usize, count: &Cell<u64>) -> Vec<f64> {
    let scores = counted_matmul(&transpose(q, d, nq), k, nq, d, nk, count);
    let mut w = scores.clone();
    for row in w.chunks_mut(nk) {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        row.iter_mut().for_each(|x| *x = ((*x - m) / (d as f64).sqrt()).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    counted_matmul(v, &transpose(&w, nq, nk), d, nk, nq, count)
}

#[test]
fn formula_examples() {
    assert_eq!(flops_attention(256, 256, 64), 8_388_608);
    assert_eq!(flops_attention(256, 256, 16), 2_097_152);
    assert_eq!(flops_attention(256, 0, 16), 0);
    assert_eq!(flops_ffn(64, 256, 2048), 67_108_864);
    assert_eq!(flops_ffn(256, 256, 2048), 268_435_456);
}

#[test]
fn counting_oracle_agrees_on_small_dims() {
    let mut r = rng(1);
    for d in [1usize, 4, 9, 16] {
        for nq in 1..=8 {
            for nk in [1usize, 3, 8] {
                let q = init::normal_with(&[d, nq], 1.0, &mut r).unwrap();
                let k = init::normal_with(&[d, nk], 1.0, &mut r).unwrap();
                let count = Cell::new(0);
                let out = counted_attention(q.data(), k.data(), k.data(), d, nq, nk, &count);
                assert_eq!(count.get(), flops_attention(d, nq, nk));

                // the oracle computes the same thing as the recorded op
                let mut tape = Tape::inference();
                let (qv, kv) = (tape.constant(q).unwrap(), tape.constant(k).unwrap());
                let o = crate::attention::attention_core(&mut tape, qv, kv, kv, 1, Default::default()).unwrap();
                let o = tape.value(o).data();
                assert!(o.iter().zip(&out).all(|(a, b)| (a - b).abs() < 1e-12));
            }
            let hidden = 3 * d;
            let x = vec![0.5; d * nq];
            let w1 = vec![0.1; hidden * d];
            let w2 = vec![0.2; d * hidden];
            let count = Cell::new(0);
            let h = counted_matmul(&w1, &x, hidden, d, nq, &count);
            counted_matmul(&w2, &h, d, hidden, nq, &count);
            assert_eq!(count.get(), flops_ffn(nq, d, hidden));
        }
    }
}

#[test]
fn default_report() {
    let cfg = ModelConfig::default();
    let report = cost_report(&cfg).unwrap();
    assert_eq!(report.serial_depth, 6);
    assert_eq!(report.macs, report.entries.iter().map(|e| e.macs).sum::<u64>());
    assert_eq!(report.params, report.entries.iter().map(|e| e.params).sum::<u64>());
    let fs = report.entries.iter().find(|e| e.block == "fusion.fs.attn").unwrap();
    assert_eq!(fs.macs, flops_attention(256, 16, 64));
    let ffn = report.entries.iter().find(|e| e.block == "fusion.layers.0.search.ffn").unwrap();
    assert_eq!(ffn.macs, 268_435_456);
    let t = report.to_table(false, true);
    assert!(t.lines().last().unwrap().starts_with("total"));
    assert_eq!(CostReport::from_json(&report.to_json()).unwrap(), report);
}

#[test]
fn report_params_match_the_model() {
    for cfg in [ModelConfig::default(), ModelConfig::toy()] {
        let model = Hcat::new(cfg.clone(), 0).unwrap();
        assert_eq!(cost_report(&cfg).unwrap().params, model.param_count() as u64);
    }
}

#[test]
fn sparsification_and_depth_trends() {
    let base = ModelConfig::default();
    let with = cost_report(&base).unwrap();
    let mut no_fs = base.clone();
    no_fs.fusion.use_fs = false;
    let without = cost_report(&no_fs).unwrap();
    assert!(with.attention_core_macs < without.attention_core_macs);
    assert_eq!(without.serial_depth, 5);

    let mut one = base.clone();
    one.fusion.layers = 1;
    let one = cost_report(&one).unwrap();
    assert!(one.macs < with.macs);
    assert_eq!(one.serial_depth, 4);
}

#[test]
fn hierarchical_and_juxtaposed_cost_the_same() {
    let mut cfg = ModelConfig::default();
    let h = cost_report(&cfg).unwrap();
    cfg.fusion.mode = FusionMode::Juxtaposed;
    let j = cost_report(&cfg).unwrap();
    assert_eq!((h.macs, h.serial_depth, h.params), (j.macs, j.serial_depth, j.params));
    cfg.fusion.mode = FusionMode::SelfAttnBaseline;
    assert_eq!(cost_report(&cfg).unwrap().serial_depth, h.serial_depth);
}

#[test]
fn bench_contract() {
    let short = BenchOptions { reps: 5, ..Default::default() };
    assert!(matches!(bench("x", &short, || Ok(())), Err(Error::Bench(_))));
    let threads = BenchOptions { threads: 2, ..Default::default() };
    assert!(bench("x", &threads, || Ok(())).is_err());

    let opts = BenchOptions { min_sample_ns: 200_000, ..Default::default() };
    let mut calls = 0usize;
    let r = bench("noop", &opts, || {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert!(r.batch > 1, "a no-op must be auto-batched");
    assert_eq!(calls, opts.warmups + 1 + opts.reps * r.batch);
    assert!(r.median_ns >= 0.0 && r.iqr_ns >= 0.0);
    assert_eq!(BenchResult::from_json(&r.to_json()).unwrap(), r);
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    for key in ["block", "median_ns", "iqr_ns"] {
        assert!(json.get(key).is_some(), "{key}");
    }

    let failing = bench("err", &BenchOptions::default(), || Err(Error::Bench("boom".into())));
    assert!(failing.is_err());
}

#[test]
fn fusion_bench_runs() {
    let cfg = FusionConfig { channels: 8, heads: 2, ffn_hidden: 8, sparse_tokens: 2, ..Default::default() };
    let net = FusionNet::new(cfg, &mut rng(0)).unwrap();
    let r = bench_fusion_forward(&net, Grid::square(2), Grid::square(3), &BenchOptions::default()).unwrap();
    assert_eq!(r.block, "fusion.n2.fs");
}

proptest! {
    #[test]
    fn quarter_identity_generalises(s in 1usize..200, hz in 1usize..20, wz in 1usize..20, d in 1usize..300, nq in 1usize..300) {
        let dense = flops_attention(d, nq, hz * wz);
        let sparse = flops_attention(d, nq, s);
        prop_assert_eq!(sparse as u128 * (hz * wz) as u128, dense as u128 * s as u128);
    }

    #[test]
    fn ffn_scales_linearly_in_tokens(t in 1usize..500, d in 1usize..300, h in 1usize..3000) {
        prop_assert_eq!(flops_ffn(4 * t, d, h), 4 * flops_ffn(t, d, h));
    }
}
