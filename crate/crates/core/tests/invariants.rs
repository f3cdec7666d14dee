mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use slotforge::data::{extract_features, generate_sprite_video, FeatureEncoderParams, FeatureGrid, GenConfig};
use slotforge::decoder::decode_frame;
use slotforge::model::{Model, ModelDims};
use slotforge::nn::{softmax, Tensor};
use slotforge::slot_attention::{attention_step, init_slots_gaussian, SlotFrame};

const TRIALS: u64 = 1000;
const SUM_TOL: f64 = 1e-5;

fn dims() -> ModelDims {
    ModelDims {
        canvas: 32,
        k: 5,
        d_feature: 8,
        d_slot: 8,
        sa_hidden: 8,
        dec_hidden: 8,
        dtst_ff: 16,
        ..ModelDims::default()
    }
}

fn random_frame(r: &mut impl Rng, k: usize, d: usize) -> SlotFrame<f32> {
    let mut valid: Vec<bool> = (0..k).map(|_| r.random_bool(0.6)).collect();
    valid[r.random_range(0..k)] = true;
    let scale = r.random_range(0.1..5.0f32);
    let data = (0..k * d).map(|_| scale * r.random_range(-1.0..1.0f32)).collect();
    SlotFrame::new(Tensor::new(vec![k, d], data).unwrap(), valid).unwrap()
}

#[test]
fn attention_rows_sum_to_one_over_valid_slots() {
    let dims = dims();
    let n = dims.n_patches();
    for trial in 0..TRIALS {
        let mut r = rng(trial);
        let model = Model::<f32>::init(&dims, trial % 10).unwrap();
        let scale = r.random_range(0.1..10.0f32);
        let x = FeatureGrid {
            x: Tensor::new(vec![n, dims.d_feature], (0..n * dims.d_feature).map(|_| scale * r.random_range(-1.0..1.0f32)).collect()).unwrap(),
            grid: dims.grid(),
        };
        let sf = random_frame(&mut r, dims.k, dims.d_slot);
        let (out, attn) = attention_step(&x, &sf, &model.params).unwrap();
        assert_eq!(attn.shape(), &[n, dims.k]);
        for p in 0..n {
            let row = attn.row(p);
            let sum: f64 = row.iter().zip(&sf.valid).filter(|(_, &v)| v).map(|(&a, _)| a as f64).sum();
            assert!((sum - 1.0).abs() <= SUM_TOL, "trial {trial}: {sum}");
            for (k, &v) in sf.valid.iter().enumerate() {
                if !v {
                    assert_eq!(row[k], 0.0);
                    assert!(out.slots.row(k).iter().all(|&s| s == 0.0));
                }
            }
        }
        assert!(out.slots.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn decoder_masks_sum_to_one_over_valid_slots() {
    let dims = dims();
    for trial in 0..TRIALS {
        let mut r = rng(trial);
        let model = Model::<f32>::init(&dims, trial % 10).unwrap();
        let sf = random_frame(&mut r, dims.k, dims.d_slot);
        let dec = decode_frame(&sf, &model.params).unwrap();
        for p in 0..dims.n_patches() {
            let sum: f64 = (0..dims.k).map(|k| dec.masks.row(k)[p] as f64).sum();
            assert!((sum - 1.0).abs() <= SUM_TOL, "trial {trial}: {sum}");
            for k in 0..dims.k {
                let m = dec.masks.row(k)[p];
                assert!((0.0..=1.0).contains(&m));
                if !sf.valid[k] {
                    assert_eq!(m, 0.0);
                }
            }
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    for trial in 0..TRIALS {
        let mut r = rng(trial);
        let (rows, cols) = (r.random_range(1..8), r.random_range(1..12));
        let scale = 10f32.powf(r.random_range(-2.0..2.5f32));
        let t = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| scale * r.random_range(-1.0..1.0f32)).collect()).unwrap();
        let s = softmax(&t, 1).unwrap();
        for i in 0..rows {
            let sum: f64 = s.row(i).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() <= SUM_TOL, "trial {trial}: {sum}");
        }
    }
}

#[test]
fn gaussian_init_statistics_over_ten_thousand_seeds() {
    let (k, d) = (7, 64);
    let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for seed in 0..10_000u64 {
        let sf = init_slots_gaussian::<f64>(k, d, seed);
        assert!(sf.valid.iter().all(|&v| v));
        for &v in sf.slots.data() {
            sum += v;
            sq += v * v;
        }
        n += k * d;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    assert!(mean.abs() < 0.01, "{mean}");
    assert!((var - 1.0).abs() < 0.02, "{var}");
    assert_eq!(init_slots_gaussian::<f32>(k, d, 3), init_slots_gaussian::<f32>(k, d, 3));
    assert_ne!(init_slots_gaussian::<f32>(k, d, 3), init_slots_gaussian::<f32>(k, d, 4));
}

#[test]
fn feature_extraction_is_linear_up_to_coordinates() {
    let enc = FeatureEncoderParams::<f64>::new(8, 3, 16, 11);
    let len = 32 * 32 * 3;
    let zero = extract_features(&[vec![0.0; len]], 32, 32, &enc).unwrap().remove(0).x;
    for trial in 0..50 {
        let mut r = rng(trial);
        let f1: Vec<f32> = (0..len).map(|_| r.random_range(0.0..1.0)).collect();
        let f2: Vec<f32> = (0..len).map(|_| r.random_range(0.0..1.0)).collect();
        let (a, b) = (r.random_range(-2.0..2.0f32), r.random_range(-2.0..2.0f32));
        let mix: Vec<f32> = f1.iter().zip(&f2).map(|(x, y)| a * x + b * y).collect();
        let e = |f: &[f32]| extract_features(&[f.to_vec()], 32, 32, &enc).unwrap().remove(0).x;
        let (e1, e2, em) = (e(&f1), e(&f2), e(&mix));
        for i in 0..em.data().len() {
            let c = zero.data()[i];
            let lhs = em.data()[i] - c;
            let rhs = a as f64 * (e1.data()[i] - c) + b as f64 * (e2.data()[i] - c);
            assert!((lhs - rhs).abs() <= 1e-5, "trial {trial}: {lhs} vs {rhs}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_masks_are_disjoint_with_tight_boxes(
        seed in any::<u64>(),
        canvas in prop::sample::select(vec![32usize, 64]),
        sprites in 0usize..=4,
        entry_exit in any::<bool>(),
    ) {
        let cfg = GenConfig {
            canvas,
            sprites_min: sprites,
            sprites_max: sprites,
            radius_min: 3.0,
            radius_max: 8.0,
            entry_exit,
            clip_len: 4,
            ..GenConfig::default()
        };
        let v = generate_sprite_video(&cfg, seed).unwrap();
        for t in 0..v.len() {
            let anns = &v.annotations[t];
            let total: usize = anns.iter().map(|a| a.mask.count()).sum();
            prop_assert!(total <= canvas * canvas);
            let mut seen = vec![false; canvas * canvas];
            for a in anns {
                for (i, &on) in a.mask.data().iter().enumerate() {
                    if on {
                        prop_assert!(!seen[i]);
                        seen[i] = true;
                    }
                }
                let b = a.bbox;
                let m = &a.mask;
                let row_has = |y: usize| (b.x_min..=b.x_max).any(|x| m.get(y, x));
                let col_has = |x: usize| (b.y_min..=b.y_max).any(|y| m.get(y, x));
                prop_assert!(row_has(b.y_min) && row_has(b.y_max) && col_has(b.x_min) && col_has(b.x_max));
                prop_assert_eq!(Some(b), slotforge::metrics::mask_to_box(m));
            }
        }
    }
}
