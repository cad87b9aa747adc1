use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::ModelConfig;
use crate::corpus::CorpusSpec;

fn toy(seed: u64) -> Transformer<f64> {
    let cfg = ModelConfig::tiny(32, 4, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frozen = FrozenWeights::random(&cfg, &mut rng);
    let draft = DraftWeights::random(&cfg, &mut rng);
    Transformer::new(cfg, frozen, draft).unwrap()
}

fn seqs(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect()).collect()
}

fn cfg() -> TrainConfig {
    TrainConfig { lambda: 0.7, ..Default::default() }
}

#[test]
fn decay_weight_examples() {
    assert_eq!(decay_weights(4, 0.0), vec![1.0; 4]);
    let w = decay_weights(3, 7.0);
    assert_eq!(w[0], 1.0);
    assert!((w[1] - 9.1188e-4).abs() < 1e-7);
    assert!(w.windows(2).all(|p| p[1] < p[0]));
}

#[test]
fn draft_loss_examples() {
    let targets = [2, 0, 5];
    let sharp: Vec<Vec<f64>> = targets
        .iter()
        .map(|&t| (0..8).map(|v| if v == t { 1e3 } else { 0.0 }).collect())
        .collect();
    assert!(draft_loss(&sharp, &targets, 7.0).abs() < 1e-12);
    let flat = vec![vec![0.3; 64]; 3];
    for lambda in [0.0, 1.0, 7.0] {
        assert!((draft_loss(&flat, &[1, 2, 3], lambda) - 64f64.ln()).abs() < 1e-12);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<Vec<f64>> = (0..4).map(|_| (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let targets = [1, 9, 4, 0];
    let lambda = 0.5;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (l, &t)) in logits.iter().zip(&targets).enumerate() {
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        let w = (-lambda * i as f64).exp();
        num += w * -(l[t].exp() / z).ln();
        den += w;
    }
    assert!((draft_loss(&logits, &targets, lambda) - num / den).abs() < 1e-12);
}

#[test]
fn zero_output_calibration_loss_equals_raw_tail() {
    let m = Transformer::<f64>::random(ModelConfig::tiny(16, 2, 1, 4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<Vec<f64>> = (0..4).map(|_| (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let hidden: Vec<Vec<f64>> = (0..4).map(|_| (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let targets = [3, 4, 5, 6];
    let c = calib_loss(&logits, &hidden, m.embedding(3), &targets, &m.draft, 7.0);
    assert_eq!(c, draft_loss(&logits[1..], &targets[1..], 7.0));

    let sharp: Vec<Vec<f64>> = targets
        .iter()
        .map(|&t| (0..16).map(|v| if v == t { 1e3 } else { 0.0 }).collect())
        .collect();
    assert!(calib_loss(&sharp, &hidden, m.embedding(3), &targets, &m.draft, 7.0).abs() < 1e-12);
}

/// Central differences over every draft parameter.
fn check_gradients(seed: u64) -> f64 {
    let model = toy(seed);
    let batch = seqs(2, 8, 32, seed + 100);
    let anchors = vec![vec![0, 3], vec![2, 4]];
    let c = cfg();
    let (_, grads) = loss_and_grads(&model, &batch, &anchors, &c).unwrap();
    let analytic = grads.flat();
    let base = flatten_draft(&model.draft);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let h = 1e-5 * base[i].abs().max(1.0);
        let mut p = base.clone();
        p[i] = base[i] + h;
        unflatten_draft(&mut probe.draft, &p);
        let up = batch_loss(&probe, &batch, &anchors, &c).unwrap().total;
        p[i] = base[i] - h;
        unflatten_draft(&mut probe.draft, &p);
        let down = batch_loss(&probe, &batch, &anchors, &c).unwrap().total;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(1.0));
    }
    worst
}

#[test]
fn draft_gradients_match_finite_differences() {
    let worst = check_gradients(11);
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn target_gradients_match_finite_differences() {
    let model = Transformer::<f64>::random(ModelConfig::tiny(12, 2, 1, 3), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let batch = seqs(2, 6, 12, 5);
    let (_, grads) = target_loss_and_grads(&model, &batch).unwrap();
    let analytic = flatten_frozen(&grads);
    let base = flatten_frozen(&model.frozen);
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..300 {
        let i = rng.gen_range(0..base.len());
        let h = 1e-5 * base[i].abs().max(1.0);
        let mut p = base.clone();
        p[i] += h;
        unflatten_frozen(&mut probe.frozen, &p);
        let up = target_loss_and_grads(&probe, &batch).unwrap().0;
        p[i] = base[i] - h;
        unflatten_frozen(&mut probe.frozen, &p);
        let down = target_loss_and_grads(&probe, &batch).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        assert!((analytic[i] - fd).abs() / analytic[i].abs().max(1.0) < 1e-5, "param {i}: {} vs {fd}", analytic[i]);
    }
}

#[test]
fn frozen_weights_affect_loss_but_have_no_buffer() {
    let model = toy(7);
    let batch = seqs(1, 8, 32, 8);
    let anchors = vec![vec![1, 3]];
    let base = batch_loss(&model, &batch, &anchors, &cfg()).unwrap().total;
    let mut moved = model.clone();
    moved.frozen.layers[3].w1.data_mut()[0] += 0.5;
    assert_ne!(batch_loss(&moved, &batch, &anchors, &cfg()).unwrap().total, base);
    let (_, grads) = loss_and_grads(&model, &batch, &anchors, &cfg()).unwrap();
    assert_eq!(grads.draft.param_count(), model.trainable_params());
    assert!(grads.draft.tensors().iter().all(|(name, _, _)| name.starts_with("draft.")));
}

#[test]
fn packed_anchors_equal_separate_forwards() {
    let model = toy(9);
    let batch = seqs(1, 10, 32, 10);
    let c = cfg();
    let packed = batch_loss(&model, &batch, &[vec![1, 5]], &c).unwrap().total * 2.0;
    let a = batch_loss(&model, &batch, &[vec![1]], &c).unwrap().total;
    let b = batch_loss(&model, &batch, &[vec![5]], &c).unwrap().total;
    assert!((packed - (a + b)).abs() < 1e-10);
}

#[test]
fn zero_learning_rate_leaves_weights_bitwise() {
    let model = toy(12);
    let before = model.draft.clone();
    let mut t = Trainer::new(model, TrainConfig { lr: 0.0, ..cfg() }).unwrap();
    t.train_step(&seqs(2, 9, 32, 13)).unwrap();
    assert_eq!(t.model.draft, before);
}

#[test]
fn training_reduces_loss_and_keeps_the_target() {
    let cfg_m = ModelConfig::tiny(32, 3, 2, 3);
    let model = Transformer::<f64>::random(cfg_m, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let batch = seqs(4, 12, 32, 15);
    let probe = seqs(1, 12, 32, 16).remove(0);
    let clean = |m: &Transformer<f64>| {
        let mut kv = m.new_kv();
        m.forward(&mut kv, &build_causal_layout(0, probe.len()), &probe).unwrap().logits
    };
    let before = clean(&model);
    let mut t = Trainer::new(model, TrainConfig { lr: 3e-3, lambda: 1.0, ..cfg() }).unwrap();
    let anchors: Vec<Vec<usize>> = vec![vec![0, 3, 6]; 4];
    let first = batch_loss(&t.model, &batch, &anchors, &t.config).unwrap().total;
    let mut last = None;
    for _ in 0..200 {
        last = Some(t.apply(&batch, &anchors).unwrap());
    }
    let after = batch_loss(&t.model, &batch, &anchors, &t.config).unwrap().total;
    assert!(after < 0.5 * first, "{first} -> {after}");
    assert_eq!(clean(&t.model), before);
    let json = serde_json::to_string(&last.unwrap()).unwrap();
    assert!(json.contains("\"acc@slot\""));
}

#[test]
fn anchors_are_distinct_and_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let a = sample_anchors(12, 5, 4, &mut rng);
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|p| p[0] < p[1]));
        assert!(a.iter().all(|&n| n + 5 < 12));
    }
    assert_eq!(sample_anchors(6, 5, 4, &mut rng), vec![0]);
    assert!(sample_anchors(5, 5, 4, &mut rng).is_empty());
}

#[test]
fn calibration_eval_is_exact_at_zero_init() {
    let m = Transformer::<f64>::random(ModelConfig::tiny(16, 2, 1, 4), &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
    let e = eval_calibration(&m, &seqs(3, 10, 16, 19), 7.0).unwrap();
    assert_eq!(e.raw_ce, e.calibrated_ce);
    assert_eq!(e.anchors, 18);
}

#[test]
fn pretraining_lowers_target_loss() {
    let spec = CorpusSpec { vocab_size: 16, seed: 3, n_sequences: 40, seq_len: 16, ..Default::default() };
    let corpus = Corpus::generate(&spec).unwrap();
    let mut m = Transformer::<f64>::random(ModelConfig::tiny(16, 2, 1, 3), &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
    let losses = pretrain_target(&mut m, &corpus, 60, 4, 1e-2, 1).unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(m.draft.layers[0], m.frozen.layers[1].attn);
}
