use std::ops::ControlFlow;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sufisent::corpus::{encode_checkpoint, gen_toy_nli, toy_tokens, Checkpoint, EmbeddingTable, NliBatch, NliExample, Vocab};
use sufisent::encoder::{EncoderConfig, EncoderParams, Variant};
use sufisent::head::{predict, HeadConfig};
use sufisent::model::Model;
use sufisent::tensor::NumArray;
use sufisent::train::{clip_global_norm, evaluate_accuracy, fit, lr_update, sgd_step, TrainConfig};

fn toy_examples(seed: u64, count: usize) -> (Vocab, Vec<NliExample>) {
    let vocab = Vocab::from_tokens(toy_tokens());
    let ex = gen_toy_nli(seed, count)
        .unwrap()
        .iter()
        .map(|p| vocab.encode_pair(p))
        .collect();
    (vocab, ex)
}

fn small_model(variant: Variant, vocab_len: usize, trainable: bool) -> Model {
    let enc = EncoderConfig::new(variant, 4, 3).unwrap();
    let head = HeadConfig {
        fc_dim: 8,
        ..HeadConfig::new(enc.encoding_dim())
    };
    Model::init(enc, head, EmbeddingTable::random(vocab_len, 3, 5).with_trainable(trainable), 11).unwrap()
}

#[test]
fn tied_update_equals_summed_untied_gradients() {
    let (vocab, ex) = toy_examples(1, 6);
    let batch = NliBatch::from_examples(&ex.iter().collect::<Vec<_>>());
    for (tied_v, untied_v) in [
        (Variant::SufiSentTied, Variant::SufiSent),
        (Variant::SufiSentCatTied, Variant::SufiSentCat),
    ] {
        let tied = small_model(tied_v, vocab.len(), false);
        // untied duplicate: suffix LSTMs start as copies of the prefix ones
        let mut untied = tied.clone();
        untied.encoder_config.variant = untied_v;
        untied.encoder = EncoderParams {
            fwd_suffix: Some(tied.encoder.fwd_prefix.clone()),
            bwd_suffix: Some(tied.encoder.bwd_prefix.clone()),
            ..tied.encoder.clone()
        };

        let t = tied.forward_batch(&batch, true).unwrap();
        let u = untied.forward_batch(&batch, true).unwrap();
        assert_eq!(t.loss, u.loss);

        // untied order: fwd_prefix(3) fwd_suffix(3) bwd_prefix(3) bwd_suffix(3); tied: fwd(3) bwd(3)
        for k in 0..3 {
            for (tied_k, pre, suf) in [(k, k, 3 + k), (3 + k, 6 + k, 9 + k)] {
                let summed = u.grads[pre].zip_map(&u.grads[suf], "sum", |a, b| a + b).unwrap();
                for (a, b) in t.grads[tied_k].data().iter().zip(summed.data()) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{tied_v}: {a} vs {b}");
                }
            }
        }

        let lr = 0.3;
        let mut stepped = tied.clone();
        sgd_step(&mut stepped, &t.grads, lr).unwrap();
        let before = tied.encoder.fwd_prefix.wx.data();
        let after = stepped.encoder.fwd_prefix.wx.data();
        let summed = u.grads[0].zip_map(&u.grads[3], "sum", |a, b| a + b).unwrap();
        for ((b, a), g) in before.iter().zip(after).zip(summed.data()) {
            assert!((a - (b - lr * g)).abs() < 1e-13);
        }
    }
}

#[test]
fn accuracy_matches_counting_oracle() {
    let (vocab, ex) = toy_examples(21, 100);
    let model = small_model(Variant::SufiSentCat, vocab.len(), false);
    let mut correct = 0;
    for e in &ex {
        let out = model.forward_batch(&NliBatch::from_examples(&[e]), false).unwrap();
        if predict(out.logits.row(0)) == e.label {
            correct += 1;
        }
    }
    let acc = evaluate_accuracy(&model, &ex, 7).unwrap();
    assert_eq!(acc, correct as f64 / 100.0);
    assert!(evaluate_accuracy(&model, &[], 7).is_err());
}

#[test]
fn constant_predictor_is_near_chance() {
    let (vocab, ex) = toy_examples(5, 900);
    let mut model = small_model(Variant::SufiSent, vocab.len(), false);
    for p in model.head.arrays_mut() {
        p.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let acc = evaluate_accuracy(&model, &ex, 64).unwrap();
    assert!((acc - 1.0 / 3.0).abs() < 0.01, "{acc}");
}

#[test]
fn fit_is_deterministic_and_tracks_best() {
    let (vocab, ex) = toy_examples(3, 60);
    let (train, val) = ex.split_at(45);
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 4,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let mut m = small_model(Variant::SufiSentTied, vocab.len(), true);
        fit(&mut m, train, val, &cfg, |_| ControlFlow::Continue(())).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.best_model, b.best_model);
    assert_eq!(a.reports.len(), 4);
    let best = a.reports.iter().map(|r| r.val_acc).fold(0.0, f64::max);
    assert_eq!(a.best_val_acc, best);
    assert_eq!(evaluate_accuracy(&a.best_model, val, 8).unwrap(), best);
    for w in a.reports.windows(2) {
        assert_eq!(w[0].next_lr, w[1].lr);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (vocab, ex) = toy_examples(4, 6);
    let cfg = TrainConfig {
        lr0: 0.0,
        batch_size: 64,
        max_epochs: 3,
        min_lr: 0.0,
        ..Default::default()
    };
    let mut m = small_model(Variant::SufiSentCatTied, vocab.len(), true);
    let before = m.clone();
    let out = fit(&mut m, &ex, &ex, &cfg, |_| ControlFlow::Continue(())).unwrap();
    assert_eq!(m, before);
    assert_eq!(out.reports.len(), 3);
}

#[test]
fn early_stop_from_callback() {
    let (vocab, ex) = toy_examples(4, 9);
    let mut m = small_model(Variant::BiLstmMax, vocab.len(), false);
    let out = fit(&mut m, &ex, &ex, &TrainConfig::default(), |r| {
        if r.epoch == 2 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert_eq!(out.reports.len(), 2);
}

#[test]
fn validation_does_not_touch_parameters() {
    let (vocab, ex) = toy_examples(8, 30);
    let model = small_model(Variant::SufiSent, vocab.len(), true);
    let ckpt = |m: &Model| {
        encode_checkpoint(&Checkpoint {
            train: TrainConfig::default(),
            vocab: vocab.clone(),
            model: m.clone(),
            best_val_acc: 0.0,
        })
        .unwrap()
    };
    let before = ckpt(&model);
    evaluate_accuracy(&model, &ex, 4).unwrap();
    assert_eq!(ckpt(&model), before);
}

#[test]
fn empty_sets_rejected() {
    let (vocab, ex) = toy_examples(8, 3);
    let mut m = small_model(Variant::SufiSent, vocab.len(), false);
    let cfg = TrainConfig::default();
    assert!(fit(&mut m, &[], &ex, &cfg, |_| ControlFlow::Continue(())).is_err());
    assert!(fit(&mut m, &ex, &[], &cfg, |_| ControlFlow::Continue(())).is_err());
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        a in proptest::collection::vec(-50.0f64..50.0, 1..20),
        b in proptest::collection::vec(-50.0f64..50.0, 1..20),
        max in 0.1f64..10.0,
    ) {
        let orig = vec![NumArray::vector(a), NumArray::vector(b)];
        let mut g = orig.clone();
        let norm = clip_global_norm(&mut g, max).unwrap();
        let flat = |v: &[NumArray]| v.iter().flat_map(|x| x.data().to_vec()).collect::<Vec<f64>>();
        let (x, y) = (flat(&orig), flat(&g));
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(ny <= max + 1e-12);
        prop_assert!((norm - x.iter().map(|v| v * v).sum::<f64>().sqrt()).abs() < 1e-9);
        if norm > 0.0 {
            let cos = x.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>() / (norm * ny);
            prop_assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn learning_rate_never_increases(accs in proptest::collection::vec(0.0f64..1.0, 1..40)) {
        let cfg = TrainConfig::default();
        let mut lr = cfg.lr0;
        let mut prev = None;
        for a in accs {
            let next = lr_update(&cfg, lr, prev, a);
            prop_assert!(next <= lr && next > 0.0);
            lr = next;
            prev = Some(a);
        }
    }
}

#[test]
fn sgd_with_random_tensors_matches_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p: Vec<NumArray> = (0..3).map(|_| NumArray::uniform(&[4, 5], 1.0, &mut rng)).collect();
    let g: Vec<NumArray> = (0..3).map(|_| NumArray::uniform(&[4, 5], 1.0, &mut rng)).collect();
    let lr = rng.gen_range(0.01..1.0);
    let before = p.clone();
    sgd_step(&mut p, &g, lr).unwrap();
    for k in 0..3 {
        for j in 0..20 {
            assert_eq!(p[k].data()[j], before[k].data()[j] - lr * g[k].data()[j]);
        }
    }
}
