use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_dataset, SynthConfig};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::model::SegModel;
use crate::nn::{grad_check_input, GradCheckConfig, ParamId, Tensor};

fn mask_of(n: usize, pos: &[usize]) -> Vec<bool> {
    (0..n).map(|i| pos.contains(&i)).collect()
}

fn probs(n: usize, seed: u64) -> Vec<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.05f32..0.95)).collect()
}

// ------------------------------------------------------------------ losses

#[test]
fn dice_identities() {
    let m = mask_of(10, &[1, 2, 3]);
    let p: Vec<f32> = m.iter().map(|&b| b as u8 as f32).collect();
    assert!(dice_term(&p, &m, 1e-6).unwrap().loss.abs() < 1e-6);
    let disjoint: Vec<f32> = m.iter().map(|&b| (!b) as u8 as f32).collect();
    assert!((dice_term(&disjoint, &m, 1e-6).unwrap().loss - 1.0).abs() < 1e-9);
    let half = mask_of(10, &[0, 1]);
    let gt = mask_of(10, &[1, 2]);
    let hp: Vec<f32> = half.iter().map(|&b| b as u8 as f32).collect();
    assert!((dice_term(&hp, &gt, 1e-6).unwrap().loss - 0.5).abs() < 1e-6);
}

#[test]
fn bce_weight_reference_points() {
    assert!((bce_weight(0.5, 1e-6) - 1.0).abs() < 1e-5);
    assert!((bce_weight(0.1, 1e-6) - 9.0).abs() < 1e-4);
}

#[test]
fn bce_uses_mask_ratio_as_weight() {
    let m = mask_of(10, &[0]);
    let p = vec![0.5f32; 10];
    let beta = bce_weight(0.1, 1e-6);
    let expected = -(beta * 0.5f64.ln() + 9.0 * 0.5f64.ln()) / 10.0;
    assert!((bce_dyn(&p, &m, 1e-6).unwrap().loss - expected).abs() < 1e-9);
}

#[test]
fn loss_weights_select_terms() {
    let m = mask_of(16, &[0, 3, 7]);
    let p = probs(16, 3);
    let b = bce_dyn(&p, &m, 1e-6).unwrap();
    let d = dice_term(&p, &m, 1e-6).unwrap();
    let only_b = seg_loss(&p, &m, &SegLossConfig { lambda_bce: 1.0, lambda_dice: 0.0, eps: 1e-6 }).unwrap();
    let only_d = seg_loss(&p, &m, &SegLossConfig { lambda_bce: 0.0, lambda_dice: 1.0, eps: 1e-6 }).unwrap();
    assert_eq!(only_b.loss, b.loss);
    assert_eq!(only_b.grad, b.grad);
    assert_eq!(only_d.loss, d.loss);
    assert_eq!(only_d.grad, d.grad);
    let mixed = seg_loss(&p, &m, &SegLossConfig::default()).unwrap();
    assert!((mixed.loss - (0.7f32 as f64 * b.loss + 0.3f32 as f64 * d.loss)).abs() < 1e-12);
    assert!((mixed.pi - 3.0 / 16.0).abs() < 1e-12);
}

#[test]
fn loss_input_errors() {
    let m = mask_of(4, &[]);
    assert!(dice_term(&[0.5; 4], &m, 1e-6).is_err());
    assert!(bce_dyn(&[0.5; 4], &m, 1e-6).is_err());
    assert!(bce_dyn(&[0.5; 3], &mask_of(4, &[0]), 1e-6).is_err());
    let bad = SegLossConfig { lambda_bce: -1.0, ..SegLossConfig::default() };
    assert!(seg_loss(&[0.5; 4], &mask_of(4, &[0]), &bad).is_err());
}

#[test]
fn bce_gradient_at_clamp_is_finite_and_nonzero() {
    let m = mask_of(4, &[0, 1]);
    let p = [0.0f32, 1.0, 1.0, 0.0];
    let l = bce_dyn(&p, &m, 1e-6).unwrap();
    assert!(l.loss.is_finite());
    assert!(l.grad.iter().all(|g| g.is_finite()));
    // Wrong-side saturated points still push toward the target.
    assert!(l.grad[0] < 0.0);
    assert!(l.grad[2] > 0.0);
}

fn check_loss_grad(pi_count: usize, which: &str) {
    let n = 20;
    let m: Vec<bool> = (0..n).map(|i| i < pi_count).collect();
    let p = probs(n, pi_count as u64);
    let f = |p: &[f32]| -> LossValue {
        match which {
            "dice" => dice_term(p, &m, 1e-6).unwrap(),
            "bce" => bce_dyn(p, &m, 1e-6).unwrap(),
            _ => {
                let s = seg_loss(p, &m, &SegLossConfig::default()).unwrap();
                LossValue { loss: s.loss, grad: s.grad }
            }
        }
    };
    let x = Tensor::new(vec![n], p.clone()).unwrap();
    let g = Tensor::new(vec![n], f(&p).grad).unwrap();
    let cfg = GradCheckConfig { samples: n, floor: 1e-2, ..Default::default() };
    let r = grad_check_input(which, &x, &g, |t| f(t.data()).loss, &cfg).unwrap();
    assert!(r.passed(), "{which} at {pi_count}/{n}:\n{r}");
}

#[test]
fn loss_gradchecks_across_positive_ratios() {
    for pi in [1, 10, 19] {
        for which in ["dice", "bce", "seg"] {
            check_loss_grad(pi, which);
        }
    }
}

proptest! {
    #[test]
    fn dice_in_unit_interval(p in proptest::collection::vec(0.0f32..=1.0, 1..64), bits in any::<u64>()) {
        let n = p.len();
        let mut m: Vec<bool> = (0..n).map(|i| (bits >> (i % 64)) & 1 == 1).collect();
        m[0] = true;
        let d = dice_term(&p, &m, 1e-6).unwrap().loss;
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&d));
        let s = seg_loss(&p, &m, &SegLossConfig::default()).unwrap();
        prop_assert!(s.loss.is_finite() && s.loss >= 0.0);
        prop_assert!(s.grad.iter().all(|g| g.is_finite()));
    }
}

// --------------------------------------------------------- target sampling

fn tiny_dataset(count: usize, n: usize, seed: u64) -> Vec<crate::data::AnnotatedCloud> {
    let cfg = SynthConfig { min_parts: 2, max_parts: 4, ..SynthConfig::default() };
    generate_dataset(count, seed, n, &cfg).unwrap()
}

#[test]
fn target_part_is_uniform_with_interior_prompt() {
    let cloud = tiny_dataset(8, 256, 5).into_iter().find(|c| c.part_count() >= 3).unwrap();
    let labels = cloud.labels.clone().unwrap();
    let k = labels.part_count();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = vec![0usize; k];
    let draws = 6000;
    for _ in 0..draws {
        let s = sample_target_part(&cloud, &mut rng).unwrap();
        counts[s.part] += 1;
        assert_eq!(labels.labels()[s.prompt] as usize, s.part);
        assert_eq!(s.mask, labels.mask(s.part));
        let frac = labels.part_sizes()[s.part] as f32 / cloud.len() as f32;
        assert!((s.scale - frac).abs() < 1e-6);
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 1.0 / k as f64).abs() < 0.03, "frequency {f} for {k} parts");
    }
}

#[test]
fn sampler_rejects_single_part_clouds() {
    let mut c = tiny_dataset(1, 64, 1).remove(0);
    c.labels = Some(crate::geometry::PartLabelMap::new(vec![0; c.len()], 1).unwrap());
    assert!(TargetSampler::new(std::slice::from_ref(&c)).is_err());
}

// ----------------------------------------------------------------- driver

fn tiny_model(seed: u64) -> SegModel {
    let enc = EncoderConfig { dim: 12, res: 8, lift_hidden: [16, 16] };
    let dec = DecoderConfig { dim: 12, heads: 2, ffn_hidden: 16, scale_pairs: 4, modulator_layers: 1, cross_layers: 1, anchors: 32 };
    SegModel::new(enc, dec, seed).unwrap()
}

fn tiny_cfg() -> DecoderTrainConfig {
    DecoderTrainConfig { epochs: 2, batch: 4, points: 48, threads: 2, ..DecoderTrainConfig::default() }
}

fn train(model: &mut SegModel, clouds: &[crate::data::AnnotatedCloud], cfg: &DecoderTrainConfig) -> crate::Result<DecoderTrainReport> {
    let SegModel { encoder, encoder_store, decoder, decoder_store } = model;
    train_decoder(decoder, decoder_store, encoder, encoder_store, clouds, cfg, |_| {})
}

#[test]
fn encoder_stays_frozen() {
    let clouds = tiny_dataset(6, 128, 2);
    let mut model = tiny_model(1);
    let before = model.encoder_store.to_named();
    let dec_before = model.decoder_store.to_named();
    let report = train(&mut model, &clouds, &tiny_cfg()).unwrap();
    assert_eq!(report.steps.len(), 4);
    assert_eq!(report.epoch_means.len(), 2);
    let after = model.encoder_store.to_named();
    for ((_, a), (_, b)) in before.iter().zip(&after) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(dec_before, model.decoder_store.to_named());
}

#[test]
fn zero_learning_rate_leaves_decoder_unchanged() {
    let clouds = tiny_dataset(4, 96, 3);
    let mut model = tiny_model(2);
    let before = model.decoder_store.to_named();
    train(&mut model, &clouds, &DecoderTrainConfig { lr: 0.0, ..tiny_cfg() }).unwrap();
    assert_eq!(before, model.decoder_store.to_named());
}

#[test]
fn training_is_deterministic() {
    let clouds = tiny_dataset(6, 96, 4);
    let run = |threads| {
        let mut model = tiny_model(3);
        let r = train(&mut model, &clouds, &DecoderTrainConfig { threads, ..tiny_cfg() }).unwrap();
        (r.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>(), model.decoder_store.to_named())
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
}

#[test]
fn validation_loss_decreases() {
    let clouds = tiny_dataset(12, 128, 6);
    let held = tiny_dataset(6, 128, 60);
    let mut model = tiny_model(4);
    let cfg = DecoderTrainConfig { epochs: 10, lr: 1e-3, ..tiny_cfg() };
    let val = |m: &SegModel| validation_loss(&m.decoder, &m.decoder_store, &m.encoder, &m.encoder_store, &held, &cfg, 9).unwrap();
    let before = val(&model);
    assert_eq!(before, val(&model));
    train(&mut model, &clouds, &cfg).unwrap();
    let after = val(&model);
    assert!(after < before, "validation loss {before} -> {after}");
}

#[test]
fn non_finite_parameters_report_divergence() {
    let clouds = tiny_dataset(4, 64, 7);
    let mut model = tiny_model(5);
    let last = ParamId(model.decoder_store.len() - 1);
    model.decoder_store.get_mut(last).data_mut()[0] = f32::NAN;
    let err = train(&mut model, &clouds, &tiny_cfg()).unwrap_err();
    assert!(matches!(err, crate::Error::Diverged(_)), "{err}");
}

#[test]
fn width_mismatch_rejected() {
    let clouds = tiny_dataset(2, 64, 8);
    let model = tiny_model(6);
    let mut other = crate::nn::ParameterStore::new();
    let dec = crate::decoder::Decoder::new(
        &mut other,
        DecoderConfig { dim: 18, heads: 2, ffn_hidden: 16, scale_pairs: 4, modulator_layers: 1, cross_layers: 1, anchors: 32 },
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let r = train_decoder(&dec, &mut other, &model.encoder, &model.encoder_store, &clouds, &tiny_cfg(), |_| {});
    assert!(r.is_err());
    assert!(train_decoder(&dec, &mut other, &model.encoder, &model.encoder_store, &[], &tiny_cfg(), |_| {}).is_err());
}
