use proptest::prelude::*;

use super::*;
use crate::model::ModelConfig;

fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Image {
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data.push(f(c, y, x));
            }
        }
    }
    Image::new(h, w, data).unwrap()
}

fn image_box(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx, cy, w, h, BoxFrame::Image).unwrap()
}

#[test]
fn crop_side_follows_factor() {
    let frame = img(200, 200, |c, y, x| (c * 10 + y + x) as f32 % 255.0);
    let b = image_box(100.0, 100.0, 50.0, 50.0);
    let (_, m2) = crop_raw(&frame, &b, 2.0, 16).unwrap();
    assert_eq!((m2.cx, m2.cy, m2.side), (100.0, 100.0, 100.0));
    let (_, m4) = crop_raw(&frame, &b, 4.0, 16).unwrap();
    assert_eq!(m4.side, 200.0);
}

#[test]
fn crop_reproduces_frame_at_unit_scale() {
    let frame = img(8, 8, |c, y, x| (c * 64 + y * 8 + x) as f32);
    // side 8 centred on the frame, sampled at 8 pixels: exact copy
    let (raw, _) = crop_raw(&frame, &image_box(4.0, 4.0, 4.0, 4.0), 2.0, 8).unwrap();
    for (a, b) in raw.iter().zip(frame.data()) {
        assert!((a - *b as f64).abs() < 1e-9);
    }
}

#[test]
fn corner_crop_pads_with_channel_means() {
    let frame = img(40, 40, |c, y, x| ((c + 1) * (y * 3 + x * 7) % 251) as f32);
    let means = frame.channel_means();
    let (raw, _) = crop_raw(&frame, &image_box(0.0, 0.0, 10.0, 10.0), 4.0, 40).unwrap();
    // the crop spans [-20, 20]²; output pixels left of/above x = -1 never
    // touch the frame
    let plane = 40 * 40;
    for c in 0..3 {
        for i in 0..18 {
            for j in 0..40 {
                assert_eq!(raw[c * plane + i * 40 + j], means[c]);
                assert_eq!(raw[c * plane + j * 40 + i], means[c]);
            }
        }
        assert_ne!(raw[c * plane + 39 * 40 + 39], means[c]);
    }
}

#[test]
fn crop_errors() {
    let frame = img(10, 10, |_, _, _| 1.0);
    assert!(crop_raw(&frame, &image_box(5.0, 5.0, 0.0, 3.0), 2.0, 8).is_err());
    let n = BBox::new(0.5, 0.5, 0.2, 0.2, BoxFrame::Normalized).unwrap();
    assert!(crop_raw(&frame, &n, 2.0, 8).is_err());
    assert!(Image::new(0, 4, vec![]).is_err());
}

#[test]
fn hann_window_shape() {
    let w = hanning_window(16, 16).unwrap();
    assert_eq!(w[0], 0.0);
    assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
    for i in 0..16 {
        for j in 0..16 {
            assert!((w[i * 16 + j] - w[(15 - i) * 16 + 15 - j]).abs() < 1e-15);
        }
    }
    let odd = hanning_window(5, 5).unwrap();
    assert_eq!(odd[12], 1.0);
    assert_eq!(argmax(&odd), Some(12));
    assert!(hanning_window(1, 4).is_err());
}

#[test]
fn window_penalty_examples() {
    let scores: Vec<f64> = (0..256).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let window = hanning_window(16, 16).unwrap();
    assert_eq!(apply_window_penalty(&scores, &window, 0.0).unwrap(), scores);
    let central = [7 * 16 + 7, 7 * 16 + 8, 8 * 16 + 7, 8 * 16 + 8];
    let full = apply_window_penalty(&scores, &window, 1.0).unwrap();
    assert!(central.contains(&argmax(&full).unwrap()));
    let flat = apply_window_penalty(&[0.3; 256], &window, 0.2).unwrap();
    assert!(central.contains(&argmax(&flat).unwrap()));
    assert!(apply_window_penalty(&scores, &window[..10], 0.5).is_err());
    assert!(apply_window_penalty(&scores, &window, 1.5).is_err());
}

#[test]
fn argmax_takes_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
    assert_eq!(argmax(&[]), None);
}

#[test]
fn size_update_is_a_convex_step() {
    let model = tiny_model();
    let b = image_box(75.0, 85.0, 30.0, 30.0);
    let step = |rate: f64| {
        let tracker = Tracker::new(&model, TrackerConfig { size_rate: rate, ..Default::default() }).unwrap();
        let mut state = tracker.init(&scene(0), b).unwrap();
        tracker.update(&mut state, &scene(1)).unwrap().bbox
    };
    let (full, part) = (step(1.0), step(0.25));
    assert_eq!((full.cx, full.cy), (part.cx, part.cy));
    assert!((part.w - (0.75 * b.w + 0.25 * full.w)).abs() < 1e-9);
    assert!((part.h - (0.75 * b.h + 0.25 * full.h)).abs() < 1e-9);
    for bad in [0.0, 1.5, f64::NAN] {
        assert!(TrackerConfig { size_rate: bad, ..Default::default() }.validate().is_err());
    }
}

fn tiny_model() -> Hcat {
    let mut cfg = ModelConfig::toy();
    cfg.fusion.channels = 8;
    cfg.fusion.heads = 2;
    cfg.fusion.ffn_hidden = 8;
    cfg.backbone.channels = vec![4, 4, 8, 8];
    cfg.head_hidden = 8;
    Hcat::new(cfg, 3).unwrap()
}

fn scene(shift: usize) -> Image {
    img(160, 160, |c, y, x| {
        if (60 + shift..90 + shift).contains(&x) && (70..100).contains(&y) {
            [220.0, 40.0, 40.0][c]
        } else {
            ((x * 13 + y * 7 + c * 5) % 60) as f32 + 80.0
        }
    })
}

#[test]
fn tracker_init_and_update() {
    let model = tiny_model();
    let tracker = Tracker::new(&model, TrackerConfig::default()).unwrap();
    let b = image_box(75.0, 85.0, 30.0, 30.0);
    let mut state = tracker.init(&scene(0), b).unwrap();
    assert_eq!(state.template.tensor.shape(), &[8, 4]);
    assert_eq!(state, tracker.init(&scene(0), b).unwrap());
    assert!(tracker.init(&scene(0), image_box(75.0, 85.0, 0.0, 30.0)).is_err());

    let template = state.template.clone();
    let mut replay = state.clone();
    let mut trace = Vec::new();
    for k in 0..4 {
        let out = tracker.update(&mut state, &scene(k)).unwrap();
        assert!(out.bbox.w > 0.0 && out.bbox.h > 0.0);
        assert_eq!(out.frame_index, k + 1);
        trace.push(trace_line(&out));
    }
    assert_eq!(state.template, template);
    let again: Vec<_> = (0..4).map(|k| trace_line(&tracker.update(&mut replay, &scene(k)).unwrap())).collect();
    assert_eq!(trace, again);
}

#[test]
fn identical_frames_identical_outputs() {
    let model = tiny_model();
    let tracker = Tracker::new(&model, TrackerConfig::default()).unwrap();
    let state = tracker.init(&scene(0), image_box(75.0, 85.0, 30.0, 30.0)).unwrap();
    let (mut a, mut b) = (state.clone(), state);
    assert_eq!(tracker.update(&mut a, &scene(2)).unwrap(), tracker.update(&mut b, &scene(2)).unwrap());
}

#[test]
fn default_template_cache_shape() {
    let model = Hcat::new(ModelConfig::default(), 0).unwrap();
    let tracker = Tracker::new(&model, TrackerConfig::default()).unwrap();
    let state = tracker.init(&scene(0), image_box(75.0, 85.0, 30.0, 30.0)).unwrap();
    assert_eq!(state.template.tensor.shape(), &[256, 16]);
    assert_eq!(state.window.len(), 256);
}

proptest! {
    #[test]
    fn crop_round_trip(
        cx in -50.0..300.0f64, cy in -50.0..300.0f64, side in 1.0..400.0f64,
        bx in 0.0..1.0f64, by in 0.0..1.0f64, bw in 0.0..1.0f64, bh in 0.0..1.0f64,
    ) {
        let meta = CropMeta { cx, cy, side, out_size: 128 };
        let n = BBox::new(bx, by, bw, bh, BoxFrame::Normalized).unwrap();
        let back = meta.to_normalized(&meta.to_image(&n).unwrap()).unwrap();
        for (a, b) in back.as_array().iter().zip(n.as_array()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert_eq!(back.frame, BoxFrame::Normalized);
    }

    #[test]
    fn zero_influence_keeps_argmax(scores in prop::collection::vec(0.0..1.0f64, 16)) {
        let w = hanning_window(4, 4).unwrap();
        prop_assert_eq!(argmax(&apply_window_penalty(&scores, &w, 0.0).unwrap()), argmax(&scores));
    }
}
