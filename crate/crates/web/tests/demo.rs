use cevit::attention::Selector;
use cevit::data::IMAGE_LEN;
use cevit::model::{Checkpoint, Model, ModelConfig, TrainingMeta};
use cevit_web::demo::{overlay_rgba, prepare_drawing, sharpen, Demo};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(base: ModelConfig, seed: u64) -> Model {
    let cfg = ModelConfig {
        embed_dim: 16,
        num_heads: 2,
        mlp_hidden: 16,
        num_layers: 2,
        ..base
    };
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn demo() -> Demo {
    Demo::new(small(ModelConfig::vit(), 1), small(ModelConfig::cevit(), 2)).unwrap()
}

fn digit() -> Vec<f32> {
    (0..IMAGE_LEN)
        .map(|i| if (i / 28).abs_diff(14) < 6 && (i % 28).abs_diff(14) < 2 { 1.0 } else { 0.0 })
        .collect()
}

#[test]
fn classify_returns_distribution_and_mask() {
    let out = demo().classify(&digit(), Selector::Average).unwrap();
    assert_eq!(out.probs.len(), 10);
    assert!((out.probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    let best = out.probs.iter().cloned().fold(f32::MIN, f32::max);
    assert_eq!(out.probs[out.label as usize], best);
    assert_eq!(out.mask.len(), IMAGE_LEN);
    // Mask is the patch-level CLS row (sums to at most 1) blown up 16×.
    let total: f32 = out.mask.iter().sum();
    assert!(total > 0.0 && total <= 16.0 + 1e-3, "{total}");
}

#[test]
fn compare_scores_in_unit_interval() {
    let d = demo();
    let a = digit();
    let out = d.compare(&a, &a, Selector::Last).unwrap();
    assert!((0.0..=1.0).contains(&out.score));
    assert_eq!(out.mask.len(), IMAGE_LEN);
    assert!(d.compare(&a, &a[..10], Selector::Last).is_err());
}

#[test]
fn checkpoint_bytes_round_trip_and_head_check() {
    let vit = small(ModelConfig::vit(), 3);
    let ce = small(ModelConfig::cevit(), 4);
    let (vm, vb) = Checkpoint::new(vit, TrainingMeta::default()).to_bytes().unwrap();
    let (cm, cb) = Checkpoint::new(ce, TrainingMeta::default()).to_bytes().unwrap();
    assert!(Demo::from_checkpoints(&vm, &vb, &cm, &cb).is_ok());
    assert!(Demo::from_checkpoints(&cm, &cb, &vm, &vb).is_err());
}

#[test]
fn sharpen_and_overlay() {
    let mask: Vec<f32> = (0..IMAGE_LEN).map(|i| i as f32).collect();
    let s = sharpen(&mask, 0.5).unwrap();
    assert_eq!(s[0], 0.0);
    assert_eq!(s[IMAGE_LEN - 1], 1.0);
    assert!(s.iter().all(|&v| v == 0.0 || v >= 0.5));
    assert!(sharpen(&vec![0.3; IMAGE_LEN], 0.5).unwrap().iter().all(|&v| v == 0.0));
    let rgba = overlay_rgba(&digit(), &s, 0.6).unwrap();
    assert_eq!(rgba.len(), IMAGE_LEN * 4);
    // Unmasked background stays black and opaque.
    assert_eq!(&rgba[..4], &[0, 0, 0, 255]);
}

#[test]
fn drawing_is_scaled_and_centred() {
    // A 4×8 bar in the corner of a 56×56 canvas.
    let side = 56;
    let mut canvas = vec![0.0; side * side];
    for y in 2..10 {
        for x in 3..7 {
            canvas[y * side + x] = 1.0;
        }
    }
    let img = prepare_drawing(&canvas, side).unwrap();
    assert_eq!(img.len(), IMAGE_LEN);
    let rows: Vec<usize> = (0..28).filter(|y| (0..28).any(|x| img[y * 28 + x] > 0.0)).collect();
    assert_eq!(rows.len(), 20);
    let (mut cx, mut cy, mut m) = (0.0, 0.0, 0.0);
    for (i, v) in img.iter().enumerate() {
        cx += v * (i % 28) as f32;
        cy += v * (i / 28) as f32;
        m += v;
    }
    assert!((cx / m - 14.0).abs() <= 1.0 && (cy / m - 14.0).abs() <= 1.0);
    assert!(prepare_drawing(&vec![0.0; 100], 10).unwrap().iter().all(|&v| v == 0.0));
    assert!(prepare_drawing(&[0.0; 5], 2).is_err());
}
