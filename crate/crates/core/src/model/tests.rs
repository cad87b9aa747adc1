use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::layout::{build_block_after, build_causal_layout, build_training_layout, AttentionLayout, RowSpec};
use crate::tensor::Mat;

fn model(seed: u64, cfg: ModelConfig) -> Transformer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frozen = FrozenWeights::random(&cfg, &mut rng);
    let draft = DraftWeights::random(&cfg, &mut rng);
    Transformer::new(cfg, frozen, draft).unwrap()
}

fn tokens(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Causal forward written directly from the block equations with whole
/// matrices, independent of the row-wise kernels.
fn reference_logits(m: &Transformer<f64>, toks: &[TokenId]) -> Vec<Vec<f64>> {
    let cfg = &m.config;
    let (d, hd, n) = (cfg.d_model, cfg.head_dim(), toks.len());
    let norm = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
        x.iter().zip(g).map(|(v, gi)| v / (ms + cfg.norm_eps).sqrt() * gi).collect()
    };
    let mm = |x: &[Vec<f64>], w: &Mat<f64>| -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| (0..w.cols()).map(|j| (0..w.rows()).map(|k| r[k] * w.get(k, j)).sum()).collect())
            .collect()
    };
    let rotate = |v: &mut Vec<f64>, pos: usize| {
        for h in 0..cfg.n_heads {
            for i in 0..hd / 2 {
                let theta = pos as f64 / cfg.rope_base.powf(2.0 * i as f64 / hd as f64);
                let (a, b) = (v[h * hd + 2 * i], v[h * hd + 2 * i + 1]);
                v[h * hd + 2 * i] = a * theta.cos() - b * theta.sin();
                v[h * hd + 2 * i + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());

    let mut x: Vec<Vec<f64>> = toks.iter().map(|&t| m.frozen.embed.row(t).to_vec()).collect();
    for layer in &m.frozen.layers {
        let a: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &layer.attn_norm)).collect();
        let mut q = mm(&a, &layer.attn.wq);
        let mut k = mm(&a, &layer.attn.wk);
        let v = mm(&a, &layer.attn.wv);
        for p in 0..n {
            rotate(&mut q[p], p);
            rotate(&mut k[p], p);
        }
        let mut o = vec![vec![0.0; d]; n];
        for h in 0..cfg.n_heads {
            for i in 0..n {
                let s: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..=i {
                    let p = (s[j] - mx).exp() / z;
                    for c in 0..hd {
                        o[i][h * hd + c] += p * v[j][h * hd + c];
                    }
                }
            }
        }
        let ao = mm(&o, &layer.attn.wo);
        for i in 0..n {
            for c in 0..d {
                x[i][c] += ao[i][c];
            }
        }
        let f: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &layer.ffn_norm)).collect();
        let h: Vec<Vec<f64>> = mm(&f, &layer.w1).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let y = mm(&h, &layer.w2);
        for i in 0..n {
            for c in 0..d {
                x[i][c] += y[i][c];
            }
        }
    }
    let hn: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &m.frozen.final_norm)).collect();
    mm(&hn, &m.frozen.head)
}

#[test]
fn forward_matches_straight_line_reference() {
    let cfg = ModelConfig { n_layers: 2, n_draft_layers: 1, ..ModelConfig::tiny(11, 2, 1, 3) };
    for seed in 0..3 {
        let m = model(seed, cfg.clone());
        let toks = [3, 7, 1];
        let mut kv = m.new_kv();
        let out = m.forward(&mut kv, &build_causal_layout(0, 3), &toks).unwrap();
        let want = reference_logits(&m, &toks);
        for i in 0..3 {
            for (g, w) in out.logits.row(i).iter().zip(&want[i]) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }
}

#[test]
fn mask_free_training_layout_equals_plain_causal_forward() {
    let m = model(4, ModelConfig::tiny(13, 3, 2, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let toks = tokens(9, 13, &mut rng);
    let mut kv_a = m.new_kv();
    let a = m.forward(&mut kv_a, &build_training_layout(9, &[], 3).unwrap(), &toks).unwrap();
    // Token-by-token decoding against the cache.
    let mut kv_b = m.new_kv();
    for (p, &t) in toks.iter().enumerate() {
        let b = m.forward(&mut kv_b, &build_causal_layout(p, 1), &[t]).unwrap();
        assert_eq!(b.logits.row(0), a.logits.row(p));
        assert_eq!(b.hidden.row(0), a.hidden.row(p));
    }
    assert_eq!(kv_a, kv_b);
}

#[test]
fn mask_rows_leave_clean_rows_bitwise_unchanged() {
    let cfg = ModelConfig::tiny(17, 4, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..5 {
        let m = model(seed, cfg.clone());
        let toks = tokens(14, 17, &mut rng);
        let mut kv_plain = m.new_kv();
        let plain = m.forward(&mut kv_plain, &build_causal_layout(0, 14), &toks).unwrap();
        let mut kv_masked = m.new_kv();
        let layout = build_training_layout(14, &[0, 3, 8, 9], 4).unwrap();
        let masked = m.forward(&mut kv_masked, &layout, &toks).unwrap();
        for i in 0..14 {
            assert_eq!(plain.logits.row(i), masked.logits.row(i));
            assert_eq!(plain.hidden.row(i), masked.hidden.row(i));
        }
        assert_eq!(plain.appended, masked.appended);
        assert_eq!(kv_plain, kv_masked);
    }
}

#[test]
fn mask_rows_never_reach_the_store() {
    let m = model(2, ModelConfig::tiny(9, 3, 1, 3));
    let mut kv = m.new_kv();
    m.forward(&mut kv, &build_causal_layout(0, 4), &[1, 2, 3, 4]).unwrap();
    let out = m.forward(&mut kv, &build_block_after(4, 1, 3), &[5]).unwrap();
    assert_eq!(out.appended, vec![0]);
    assert_eq!(kv.len(), 5);
}

#[test]
fn mask_row_with_frozen_projectors_reproduces_clean_row() {
    let cfg = ModelConfig::tiny(10, 4, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frozen = FrozenWeights::<f64>::random(&cfg, &mut rng);
    let draft = DraftWeights::from_frozen(&cfg, &frozen, &mut rng);
    let m = Transformer::new(cfg.clone(), frozen, draft).unwrap();
    let toks = [4, 1, 7, 2];

    // Hidden state of clean row 3 entering the first draft layer.
    let layout = build_causal_layout(0, 4);
    let mut tape = ForwardTape::default();
    let clean = m.forward_taped(&m.new_kv(), &layout, &toks, &mut tape).unwrap();
    let lt = tape.layers.iter().find(|t| t.layer == cfg.first_draft_layer()).unwrap();
    let injected = Mat::from_vec(1, cfg.d_model, lt.x_in.row(3).to_vec()).unwrap();

    // Rows 0..2 clean, row 3 clean, row 4 a one-slot mask block at position 3
    // seeing rows 0..2 and itself, exactly like row 3.
    let mut rows: Vec<RowSpec> = (0..4).map(RowSpec::frozen).collect();
    rows.push(RowSpec::mask(3, 0));
    let mut l2 = AttentionLayout::empty(0, rows);
    for i in 0..4 {
        for j in 0..=i {
            l2.set_visible(i, j, true);
        }
    }
    for j in [0, 1, 2, 4] {
        l2.set_visible(4, j, true);
    }
    let mut kv = m.new_kv();
    let out = m.forward_injected(&mut kv, &l2, &toks, &injected).unwrap();
    assert_eq!(out.hidden.row(4), clean.hidden.row(3));
    assert_eq!(out.logits.row(4), clean.logits.row(3));
}

#[test]
fn lm_head_cases() {
    let m = model(1, ModelConfig::tiny(8, 2, 1, 3));
    assert!(m.lm_head(&[0.0; 16]).iter().all(|&x| x == 0.0));

    let mut one_hot = m.clone();
    let mut head = Mat::zeros(16, 8);
    for i in 0..8 {
        head.set(i, i, 1.0);
    }
    one_hot.frozen.head = head;
    let h: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 2.0).collect();
    assert_eq!(one_hot.lm_head(&h), h[..8].to_vec());

    let want = crate::tensor::matmul(&Mat::from_vec(1, 16, h.clone()).unwrap(), &m.frozen.head).unwrap();
    for (a, b) in m.lm_head(&h).iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn truncate_to_current_length_is_noop() {
    let m = model(3, ModelConfig::tiny(8, 2, 1, 3));
    let mut kv = m.new_kv();
    m.forward(&mut kv, &build_causal_layout(0, 3), &[1, 2, 3]).unwrap();
    let before = kv.clone();
    m.truncate_kv(&mut kv, 3).unwrap();
    assert_eq!(kv, before);
    assert!(m.truncate_kv(&mut kv, 4).is_err());
}

#[test]
fn truncate_and_replay_matches_straight_line() {
    let m = model(6, ModelConfig::tiny(8, 3, 1, 3));
    let toks = [1, 2, 3, 4, 5];
    let mut straight = m.new_kv();
    m.forward(&mut straight, &build_causal_layout(0, 5), &toks).unwrap();

    let mut replay = m.new_kv();
    m.forward(&mut replay, &build_causal_layout(0, 5), &toks).unwrap();
    m.truncate_kv(&mut replay, 3).unwrap();
    m.forward(&mut replay, &build_causal_layout(3, 2), &toks[3..]).unwrap();
    assert_eq!(replay, straight);
}

#[test]
fn random_rollback_trace_matches_recompute() {
    let vocab = 12;
    let m = model(8, ModelConfig::tiny(vocab, 3, 2, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut kv = m.new_kv();
    let mut committed: Vec<TokenId> = Vec::new();
    for _ in 0..40 {
        let n = rng.gen_range(1..5);
        let new = tokens(n, vocab, &mut rng);
        m.forward(&mut kv, &build_causal_layout(committed.len(), n), &new).unwrap();
        let keep = rng.gen_range(0..=n);
        committed.extend_from_slice(&new[..keep]);
        m.truncate_kv(&mut kv, committed.len()).unwrap();
    }
    let mut fresh = m.new_kv();
    m.forward(&mut fresh, &build_causal_layout(0, committed.len()), &committed).unwrap();
    assert_eq!(fresh, kv);
    let tail = m.forward(&mut kv.clone(), &build_causal_layout(committed.len(), 1), &[3]).unwrap();
    let fresh_tail = m.forward(&mut fresh.clone(), &build_causal_layout(committed.len(), 1), &[3]).unwrap();
    for (a, b) in tail.logits.data().iter().zip(fresh_tail.logits.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_errors() {
    let m = model(1, ModelConfig::tiny(8, 2, 1, 3));
    let mut kv = m.new_kv();
    assert!(m.forward(&mut kv, &build_causal_layout(2, 1), &[1]).is_err());
    assert!(m.forward(&mut kv, &build_causal_layout(0, 2), &[1]).is_err());
    assert!(m.forward(&mut kv, &build_causal_layout(0, 1), &[8]).is_err());
    assert_eq!(kv.len(), 0);
}

#[test]
fn f32_model_runs() {
    let cfg = ModelConfig::tiny(8, 2, 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Transformer::<f32>::random(cfg, &mut rng).unwrap();
    let mut kv = m.new_kv();
    let out = m.forward(&mut kv, &build_training_layout(6, &[1], 3).unwrap(), &[1, 2, 3, 4, 5, 6]).unwrap();
    assert_eq!(out.logits.shape(), (9, 8));
    assert!(out.logits.is_finite());
}

#[test]
fn trainable_fraction_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = Transformer::<f64>::random(ModelConfig::default(), &mut rng).unwrap();
    let cfg = &m.config;
    let d = cfg.d_model;
    let expected = cfg.n_draft_layers * 4 * d * d + d + 2 * d * cfg.calib_hidden + cfg.calib_hidden
        + cfg.calib_hidden * cfg.vocab_size + cfg.vocab_size;
    assert_eq!(m.trainable_params(), expected);
    assert!(m.trainable_params() < m.target_params());
}
