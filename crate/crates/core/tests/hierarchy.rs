mod common;

use common::*;
use maskvit_core::attention::AttentionMaskVector;
use maskvit_core::gradcheck::grad_check;
use maskvit_core::hvit::*;
use maskvit_core::optim::{AdamConfig, AdamState};
use maskvit_core::tensor::{ParamStore, Tape, Tensor};
use maskvit_core::Error;
use proptest::prelude::*;

fn region_tokens(model: &HierarchicalVit, sample: &SlideSample, masking: Masking) -> Tensor {
    let mut tape = Tape::new();
    let raw = tape.constant(sample.patch_features.clone());
    let e = model.embed_patches(&mut tape, raw).unwrap();
    let r = model.region_forward(&mut tape, e, &sample.tissue, masking).unwrap();
    tape.value(r).clone()
}

#[test]
fn identity_embedding_and_zero_patch() {
    let cfg = ModelConfig {
        input_dim: 8,
        ..tiny_config(1)
    };
    let mut model = HierarchicalVit::new(cfg).unwrap();
    let w = model.store.get_mut(model.patch_embed.weight).tensor.data_mut();
    w.fill(0.0);
    for i in 0..8 {
        w[i * 8 + i] = 1.0;
    }
    let x = random_tensor(&mut rng(2), &[2, 4, 8]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = model.embed_patches(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    model
        .store
        .get_mut(model.patch_embed.bias)
        .tensor
        .data_mut()
        .copy_from_slice(&bias);
    let z = tape.constant(Tensor::zeros(&[1, 4, 8]));
    let y = model.embed_patches(&mut tape, z).unwrap();
    for tok in tape.value(y).data().chunks(8) {
        assert_eq!(tok, &bias[..]);
    }
    let wrong = tape.constant(Tensor::zeros(&[1, 4, 7]));
    assert!(model.embed_patches(&mut tape, wrong).is_err());
}

#[test]
fn same_seed_same_model() {
    let a = HierarchicalVit::new(ModelConfig::default()).unwrap();
    let b = HierarchicalVit::new(ModelConfig::default()).unwrap();
    assert_eq!(a.store, b.store);
    let c = HierarchicalVit::new(ModelConfig {
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_ne!(a.store, c.store);
}

#[test]
fn region_forward_contracts() {
    let cfg = tiny_config(3);
    let model = HierarchicalVit::new(cfg.clone()).unwrap();
    let mut r = rng(4);

    let full = random_sample(&mut r, &cfg, 3, 0.0, 2);
    let on = region_tokens(&model, &full, Masking::On);
    let off = region_tokens(&model, &full, Masking::Off);
    assert_eq!(on.shape(), &[3, 8]);
    for (a, b) in on.data().iter().zip(off.data()) {
        assert!((a - b).abs() <= 1e-12);
    }

    let bg = random_sample(&mut r, &cfg, 3, 0.5, 2);
    assert!(bg.has_background());
    let base = region_tokens(&model, &bg, Masking::On);
    for _ in 0..10 {
        let moved = resample_background(&mut r, &bg);
        assert_eq!(region_tokens(&model, &moved, Masking::On), base);
    }

    // duplicated region gives duplicated token
    let mut dup = bg.clone();
    let per = 4 * 3;
    let first: Vec<f64> = dup.patch_features.data()[..per].to_vec();
    dup.patch_features.data_mut()[per..2 * per].copy_from_slice(&first);
    dup.tissue[1] = dup.tissue[0].clone();
    let t = region_tokens(&model, &dup, Masking::On);
    assert_eq!(t.data()[..8], t.data()[8..16]);
}

#[test]
fn all_background_region_rejected_when_masking() {
    let cfg = tiny_config(5);
    let model = HierarchicalVit::new(cfg.clone()).unwrap();
    let mut s = random_sample(&mut rng(6), &cfg, 2, 0.0, 1);
    s.tissue[1] = AttentionMaskVector::new(vec![0.0; 4]).unwrap();
    assert!(matches!(
        model.logit(&s, Masking::On),
        Err(Error::AllBackground { sequence: 1 })
    ));
    assert!(model.logit(&s, Masking::Off).is_ok());
}

#[test]
fn slide_forward_minimum_and_permutation() {
    let cfg = tiny_config(7);
    let model = HierarchicalVit::new(cfg).unwrap();
    let tokens = random_tensor(&mut rng(8), &[4, 8]);
    let mut tape = Tape::new();
    let one = tape.constant(Tensor::new(vec![1, 8], tokens.data()[..8].to_vec()).unwrap());
    let e1 = model.slide_forward(&mut tape, one).unwrap();
    assert_eq!(tape.shape(e1), &[8]);
    assert!(tape.value(e1).data().iter().all(|v| v.is_finite()));

    let fwd = tape.constant(tokens.clone());
    let a = model.slide_forward(&mut tape, fwd).unwrap();
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| tokens.data()[i * 8..(i + 1) * 8].to_vec()).collect();
    let pv = tape.constant(Tensor::new(vec![4, 8], permuted).unwrap());
    let b = model.slide_forward(&mut tape, pv).unwrap();
    for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
        assert!((x - y).abs() < 1e-12);
    }
    let empty_like = tape.constant(Tensor::zeros(&[2, 7]));
    assert!(model.slide_forward(&mut tape, empty_like).is_err());
}

#[test]
fn hierarchy_gradient_check() {
    let cfg = ModelConfig {
        region_depth: 1,
        ..tiny_config(9)
    };
    let mut model = HierarchicalVit::new(cfg.clone()).unwrap();
    let sample = random_sample(&mut rng(10), &cfg, 2, 0.4, 3);
    let mut store = std::mem::take(&mut model.store);
    for masking in [Masking::On, Masking::Off] {
        let err = grad_check(&mut store, 1e-5, |tape, s| {
            let m = HierarchicalVit {
                store: s.clone(),
                ..model.clone()
            };
            let logit = m.forward(tape, &sample, masking)?;
            mse_loss(tape, logit, sample.label as i64)
        })
        .unwrap();
        assert!(err < 1e-4, "{masking:?}: {err}");
    }
}

#[test]
fn mse_derivative_matches_finite_difference() {
    let mut store = ParamStore::new();
    let id = store.add("logit", Tensor::scalar(1.0)).unwrap();
    let err = grad_check(&mut store, 1e-5, |tape, s| {
        let l = tape.param(s, id);
        mse_loss(tape, l, 3)
    })
    .unwrap();
    assert!(err < 1e-9);
    assert_eq!(store.get(id).tensor.grad().unwrap(), &[-4.0]);
}

#[test]
fn background_resampling_leaves_logit_bit_identical() {
    let cfg = ModelConfig {
        input_dim: 5,
        ..tiny_config(11)
    };
    let mut r = rng(12);
    for seed in 0..5 {
        let model = HierarchicalVit::new(ModelConfig { seed, ..cfg.clone() }).unwrap();
        let sample = random_sample(&mut r, &cfg, 3, 0.5, 0);
        let base = model.logit(&sample, Masking::On).unwrap();
        for _ in 0..5 {
            let moved = resample_background(&mut r, &sample);
            assert_eq!(model.logit(&moved, Masking::On).unwrap().to_bits(), base.to_bits());
        }
        let moved = resample_background(&mut r, &sample);
        assert_ne!(model.logit(&moved, Masking::Off).unwrap(), model.logit(&sample, Masking::Off).unwrap());
    }
}

#[test]
fn shape_contract_across_region_counts() {
    let cfg = tiny_config(13);
    let model = HierarchicalVit::new(cfg.clone()).unwrap();
    for m in 1..=4 {
        let s = random_sample(&mut rng(m as u64), &cfg, m, 0.3, 1);
        let mut tape = Tape::new();
        let raw = tape.constant(s.patch_features.clone());
        assert_eq!(tape.shape(raw), &[m, 4, 3]);
        let e = model.embed_patches(&mut tape, raw).unwrap();
        assert_eq!(tape.shape(e), &[m, 4, 8]);
        let rt = model.region_forward(&mut tape, e, &s.tissue, Masking::On).unwrap();
        assert_eq!(tape.shape(rt), &[m, 8]);
        let se = model.slide_forward(&mut tape, rt).unwrap();
        assert_eq!(tape.shape(se), &[8]);
        let l = model.head_forward(&mut tape, se).unwrap();
        assert_eq!(tape.shape(l), &[1]);
    }
}

#[test]
fn region_attention_layers() {
    let cfg = tiny_config(14);
    let model = HierarchicalVit::new(cfg.clone()).unwrap();
    let s = random_sample(&mut rng(15), &cfg, 2, 0.5, 1);
    let w = model.region_attention(&s, Masking::On, 1).unwrap();
    assert_eq!(w.shape(), &[2, 2, 5, 5]);
    assert!(matches!(
        model.region_attention(&s, Masking::On, 2),
        Err(Error::LayerOutOfRange { .. })
    ));
}

#[test]
fn single_sample_overfits() {
    let cfg = ModelConfig {
        input_dim: 8,
        region_size: 8,
        patch_size: 2,
        ..ModelConfig::default()
    };
    let sample = random_sample(&mut rng(16), &cfg, 2, 0.3, 4);
    let mut model = HierarchicalVit::new(cfg).unwrap();
    let mut state = AdamState::for_store(&model.store);
    let opts = TrainOptions {
        epochs: 200,
        masking: Masking::On,
        adam: AdamConfig::with_lr(1e-3),
    };
    let metrics = train_epochs(&mut model, &mut state, std::slice::from_ref(&sample), &opts).unwrap();
    assert_eq!(state.step, 200);
    let last = metrics.last().unwrap().mean_loss;
    assert!(last < 1e-3, "final loss {last}");
    let early: f64 = metrics[..20].iter().map(|m| m.mean_loss).sum::<f64>() / 20.0;
    let late: f64 = metrics[180..].iter().map(|m| m.mean_loss).sum::<f64>() / 20.0;
    assert!(late < early);
}

#[test]
fn training_determinism_and_vacuous_mask() {
    let cfg = tiny_config(17);
    let mut r = rng(18);
    let data: Vec<_> = (0..6).map(|i| random_sample(&mut r, &cfg, 2, 0.0, (i % 6) as u8)).collect();
    let (a, ma) = train(&data, &cfg, Masking::On, 3, 1e-3).unwrap();
    let (b, mb) = train(&data, &cfg, Masking::On, 3, 1e-3).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let (c, mc) = train(&data, &cfg, Masking::Off, 3, 1e-3).unwrap();
    assert_eq!(ma, mc);
    assert_eq!(a.params, c.params);
    assert!(matches!(train(&[], &cfg, Masking::On, 1, 1e-3), Err(Error::Empty(_))));
}

#[test]
fn checkpoint_restores_model() {
    let cfg = tiny_config(19);
    let data = vec![random_sample(&mut rng(20), &cfg, 2, 0.3, 2)];
    let (ck, _) = train(&data, &cfg, Masking::On, 2, 1e-3).unwrap();
    let model = HierarchicalVit::from_checkpoint(&ck).unwrap();
    assert_eq!(model.store, ck.params);
    assert_eq!(ck.step, 2);
}

proptest! {
    #[test]
    fn decode_is_total(logit in proptest::num::f64::ANY) {
        prop_assert!(predict_isup(logit) <= 5);
    }

    #[test]
    fn decode_rounds_half_away(k in 0u8..5) {
        prop_assert_eq!(predict_isup(k as f64 + 0.5), k + 1);
        prop_assert_eq!(predict_isup(k as f64 + 0.49), k);
    }
}
