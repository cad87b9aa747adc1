//! Packed draft training with a frozen target.
//!
//! Each sequence is forwarded once without masks; its KV becomes a constant
//! cache and every anchor's mask block runs against it in a single taped
//! forward. Only [`DraftWeights`] receive gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::layout::{build_causal_layout, build_training_layout};
use crate::model::{calib_trace, DraftWeights, ForwardTape, FrozenWeights, GradTargets, KvStore, TokenId, Transformer};
use crate::scalar::Scalar;
use crate::tensor::{argmax_tiebreak_low, gelu_grad, log_sum_exp, outer_acc, vec_mat_t, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub anchors_per_seq: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the calibration loss in the total.
    pub calib_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 7.0,
            lr: 1e-3,
            steps: 2000,
            anchors_per_seq: 4,
            batch: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            calib_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lr >= 0.0) || self.anchors_per_seq == 0 || self.batch == 0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam moments must lie in [0, 1) with eps > 0".into()));
        }
        Ok(())
    }
}

/// `w_i = exp(−λ(i−1))` for `i = 1..=m`.
pub fn decay_weights(m: usize, lambda: f64) -> Vec<f64> {
    (0..m).map(|i| (-lambda * i as f64).exp()).collect()
}

fn log_softmax_at<S: Scalar>(logits: &[S], target: TokenId) -> S {
    logits[target] - log_sum_exp(logits)
}

/// `−Σ w_i log softmax(ℓ_i)[t_i] / Σ w_i`.
pub fn weighted_ce<S: Scalar>(logits: &[Vec<S>], targets: &[TokenId], weights: &[f64]) -> S {
    let total: f64 = weights.iter().sum();
    let mut loss = S::zero();
    for ((l, &t), &w) in logits.iter().zip(targets).zip(weights) {
        loss -= S::of(w) * log_softmax_at(l, t);
    }
    loss / S::of(total)
}

/// Decayed cross entropy of one anchor's raw slot logits.
pub fn draft_loss<S: Scalar>(logits: &[Vec<S>], targets: &[TokenId], lambda: f64) -> S {
    weighted_ce(logits, targets, &decay_weights(logits.len(), lambda))
}

/// Decayed cross entropy of calibrated slots `1..M`, with the embedding of the
/// slot-0 target standing in for the bonus. Weights restart at slot 1.
pub fn calib_loss<S: Scalar>(
    logits: &[Vec<S>],
    hiddens: &[Vec<S>],
    e_b_proxy: &[S],
    targets: &[TokenId],
    draft: &DraftWeights<S>,
    lambda: f64,
) -> S {
    let m = logits.len();
    let calibrated: Vec<Vec<S>> =
        (1..m).map(|i| calib_trace(&logits[i], &hiddens[i], e_b_proxy, &draft.calib).calibrated).collect();
    weighted_ce(&calibrated, &targets[1..], &decay_weights(m - 1, lambda))
}

/// Gradient buffers mirroring [`DraftWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore<S> {
    pub draft: DraftWeights<S>,
}

impl<S: Scalar> GradStore<S> {
    pub fn zeros(model: &Transformer<S>) -> Self {
        Self { draft: DraftWeights::zeros(&model.config) }
    }

    pub fn all_finite(&self) -> bool {
        self.draft.all_finite()
    }

    pub fn flat(&self) -> Vec<S> {
        flatten_draft(&self.draft)
    }

    fn add(&mut self, other: &Self) {
        let flat = other.flat();
        let mut at = 0;
        self.draft.visit_mut(|_, _, data| {
            for x in data.iter_mut() {
                *x += flat[at];
                at += 1;
            }
        });
    }
}

pub fn flatten_draft<S: Scalar>(w: &DraftWeights<S>) -> Vec<S> {
    w.tensors().into_iter().flat_map(|(_, _, d)| d.iter().copied()).collect()
}

pub fn unflatten_draft<S: Scalar>(w: &mut DraftWeights<S>, flat: &[S]) {
    let mut at = 0;
    w.visit_mut(|_, _, data| {
        data.copy_from_slice(&flat[at..at + data.len()]);
        at += data.len();
    });
}

fn flatten_frozen<S: Scalar>(w: &FrozenWeights<S>) -> Vec<S> {
    w.tensors().into_iter().flat_map(|(_, _, d)| d.iter().copied()).collect()
}

fn unflatten_frozen<S: Scalar>(w: &mut FrozenWeights<S>, flat: &[S]) {
    let mut at = 0;
    w.visit_mut(|_, _, data| {
        data.copy_from_slice(&flat[at..at + data.len()]);
        at += data.len();
    });
}

/// Sums over anchors of one batch. Losses are per-anchor means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchLoss {
    pub draft_loss: f64,
    pub calib_loss: f64,
    pub total: f64,
    pub anchors: usize,
    /// Per slot: raw argmax equals the target.
    pub slot_correct: Vec<usize>,
}

impl BatchLoss {
    fn absorb(&mut self, other: &BatchLoss) {
        self.draft_loss += other.draft_loss;
        self.calib_loss += other.calib_loss;
        self.total += other.total;
        self.anchors += other.anchors;
        if self.slot_correct.len() < other.slot_correct.len() {
            self.slot_correct.resize(other.slot_correct.len(), 0);
        }
        for (a, b) in self.slot_correct.iter_mut().zip(&other.slot_correct) {
            *a += b;
        }
    }

    fn normalize(&mut self) {
        let n = self.anchors.max(1) as f64;
        self.draft_loss /= n;
        self.calib_loss /= n;
        self.total /= n;
    }

    pub fn slot_accuracy(&self) -> Vec<f64> {
        self.slot_correct.iter().map(|&c| c as f64 / self.anchors.max(1) as f64).collect()
    }
}

/// Clean KV of a whole sequence; constant with respect to the draft weights.
pub fn clean_cache<S: Scalar>(model: &Transformer<S>, seq: &[TokenId]) -> Result<KvStore<S>> {
    let mut kv = model.new_kv();
    model.forward(&mut kv, &build_causal_layout(0, seq.len()), seq)?;
    Ok(kv)
}

/// Loss sums of one sequence and, when `grads` is given, their gradients
/// scaled by `scale`.
fn sequence_pass<S: Scalar>(
    model: &Transformer<S>,
    kv: &KvStore<S>,
    seq: &[TokenId],
    anchors: &[usize],
    cfg: &TrainConfig,
    scale: f64,
    grads: Option<&mut GradStore<S>>,
) -> Result<BatchLoss> {
    let m = model.config.block_slots;
    let vocab = model.config.vocab_size;
    let d = model.config.d_model;
    let layout = build_training_layout(seq.len(), anchors, m)?.fold_frozen_into_cache()?;
    let mut tape = ForwardTape::default();
    let out = model.forward_taped(kv, &layout, &[], &mut tape)?;

    let w = decay_weights(m, cfg.lambda);
    let w_sum: f64 = w.iter().sum();
    let wc = decay_weights(m.saturating_sub(1), cfg.lambda);
    let wc_sum: f64 = wc.iter().sum();
    let n = layout.n_rows();
    let mut d_logits = Mat::zeros(n, vocab);
    let mut d_hidden = Mat::zeros(n, d);
    let mut calib_grad = DraftWeights::<S>::zeros(&model.config).calib;
    let mut loss = BatchLoss { slot_correct: vec![0; m], ..Default::default() };
    let want_grads = grads.is_some();

    let softmax_grad = |logits: &[S], target: TokenId, coef: f64, out: &mut [S]| {
        let lse = log_sum_exp(logits);
        for (v, (o, &l)) in out.iter_mut().zip(logits).enumerate() {
            let p = (l - lse).exp();
            let g = if v == target { p - S::one() } else { p };
            *o += S::of(coef) * g;
        }
    };

    for &a in anchors {
        let rows = layout.block_rows(a);
        let targets = &seq[a + 1..=a + m];
        let mut dl = 0.0;
        for (s, (&row, &t)) in rows.iter().zip(targets).enumerate() {
            let l = out.logits.row(row);
            dl -= w[s] * log_softmax_at(l, t).f64();
            if argmax_tiebreak_low(l) == t {
                loss.slot_correct[s] += 1;
            }
            if want_grads {
                softmax_grad(l, t, scale * w[s] / w_sum, d_logits.row_mut(row));
            }
        }
        dl /= w_sum;

        let e_b = model.embedding(targets[0]);
        let mut cl = 0.0;
        for s in 1..m {
            let row = rows[s];
            let tr = calib_trace(out.logits.row(row), out.hidden.row(row), e_b, &model.draft.calib);
            let ws = wc[s - 1];
            cl -= ws * log_softmax_at(&tr.calibrated, targets[s]).f64();
            if !want_grads {
                continue;
            }
            let mut dcal = vec![S::zero(); vocab];
            softmax_grad(&tr.calibrated, targets[s], scale * cfg.calib_weight * ws / wc_sum, &mut dcal);
            for (a, &b) in d_logits.row_mut(row).iter_mut().zip(&dcal) {
                *a += b;
            }
            let mlp = &model.draft.calib;
            for (a, &b) in calib_grad.b2.iter_mut().zip(&dcal) {
                *a += b;
            }
            outer_acc(&mut calib_grad.u2, &tr.act, &dcal);
            let dact = vec_mat_t(&dcal, &mlp.u2);
            let dpre: Vec<S> = dact.iter().zip(&tr.pre).map(|(&g, &p)| g * gelu_grad(p)).collect();
            for (a, &b) in calib_grad.b1.iter_mut().zip(&dpre) {
                *a += b;
            }
            outer_acc(&mut calib_grad.u1, &tr.input, &dpre);
            let dinput = vec_mat_t(&dpre, &mlp.u1);
            for (a, &b) in d_hidden.row_mut(row).iter_mut().zip(&dinput[d..]) {
                *a += b;
            }
        }
        if m > 1 {
            cl /= wc_sum;
        }
        loss.draft_loss += dl;
        loss.calib_loss += cl;
        loss.total += dl + cfg.calib_weight * cl;
        loss.anchors += 1;
    }

    if let Some(g) = grads {
        let dx = model.backward(
            &tape,
            kv,
            &layout,
            &[],
            &d_logits,
            Some(&d_hidden),
            &mut GradTargets { draft: Some(&mut g.draft), frozen: None },
        );
        for row in layout.mask_rows() {
            for (a, &b) in g.draft.mask_embed.iter_mut().zip(dx.row(row)) {
                *a += b;
            }
        }
        let c = &mut g.draft.calib;
        c.u1.add_assign(&calib_grad.u1);
        c.u2.add_assign(&calib_grad.u2);
        for (a, &b) in c.b1.iter_mut().zip(&calib_grad.b1) {
            *a += b;
        }
        for (a, &b) in c.b2.iter_mut().zip(&calib_grad.b2) {
            *a += b;
        }
        if !g.all_finite() {
            return Err(Error::NonFinite("draft gradients"));
        }
    }
    Ok(loss)
}

/// Mean loss over every anchor of the batch.
pub fn batch_loss<S: Scalar>(
    model: &Transformer<S>,
    batch: &[Vec<TokenId>],
    anchors: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let mut total = BatchLoss::default();
    for (seq, a) in batch.iter().zip(anchors) {
        let kv = clean_cache(model, seq)?;
        total.absorb(&sequence_pass(model, &kv, seq, a, cfg, 0.0, None)?);
    }
    total.normalize();
    Ok(total)
}

/// Mean loss over the batch and its gradient with respect to the draft weights.
/// Sequences are processed in parallel and reduced in input order.
pub fn loss_and_grads<S: Scalar>(
    model: &Transformer<S>,
    batch: &[Vec<TokenId>],
    anchors: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(BatchLoss, GradStore<S>)> {
    if batch.len() != anchors.len() {
        return Err(Error::Precondition(format!("{} sequences, {} anchor sets", batch.len(), anchors.len())));
    }
    let n_anchors: usize = anchors.iter().map(Vec::len).sum();
    if n_anchors == 0 {
        return Err(Error::Precondition("no anchors".into()));
    }
    let scale = 1.0 / n_anchors as f64;
    let parts = batch
        .par_iter()
        .zip(anchors)
        .map(|(seq, a)| {
            let kv = clean_cache(model, seq)?;
            let mut g = GradStore::zeros(model);
            let l = sequence_pass(model, &kv, seq, a, cfg, scale, Some(&mut g))?;
            Ok((l, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = BatchLoss::default();
    let mut grads = GradStore::zeros(model);
    for (l, g) in &parts {
        loss.absorb(l);
        grads.add(g);
    }
    loss.normalize();
    Ok((loss, grads))
}

/// Up to `count` distinct anchors `n` with `n + M < len`, sorted.
pub fn sample_anchors<R: Rng>(len: usize, block_slots: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let valid = len.saturating_sub(block_slots);
    let mut a = sample(rng, valid, count.min(valid)).into_vec();
    a.sort_unstable();
    a
}

/// Adam over a flat parameter vector. Moments are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step<S: Scalar>(&mut self, params: &mut [S], grads: &[S]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i].f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] -= S::of(update);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub draft_loss: f64,
    pub calib_loss: f64,
    #[serde(rename = "acc@slot")]
    pub acc_at_slot: Vec<f64>,
}

pub struct Trainer<S> {
    pub model: Transformer<S>,
    pub config: TrainConfig,
    adam: Adam,
    step: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Transformer<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.trainable_params(), config.lr, config.beta1, config.beta2, config.eps);
        Ok(Self { model, config, adam, step: 0 })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One Adam update on `batch`, anchors drawn from the step's keyed generator.
    pub fn train_step(&mut self, batch: &[Vec<TokenId>]) -> Result<TrainMetrics> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let m = self.model.config.block_slots;
        let anchors: Vec<Vec<usize>> =
            batch.iter().map(|s| sample_anchors(s.len(), m, self.config.anchors_per_seq, &mut rng)).collect();
        self.apply(batch, &anchors)
    }

    /// One Adam update with explicit anchors.
    pub fn apply(&mut self, batch: &[Vec<TokenId>], anchors: &[Vec<usize>]) -> Result<TrainMetrics> {
        let (loss, grads) = loss_and_grads(&self.model, batch, anchors, &self.config)?;
        let mut params = flatten_draft(&self.model.draft);
        self.adam.step(&mut params, &grads.flat());
        unflatten_draft(&mut self.model.draft, &params);
        self.step += 1;
        Ok(TrainMetrics {
            step: self.step,
            draft_loss: loss.draft_loss,
            calib_loss: loss.calib_loss,
            acc_at_slot: loss.slot_accuracy(),
        })
    }

    /// Draws `batch` sequences per step from `corpus` for `steps` steps.
    pub fn train(&mut self, corpus: &Corpus, steps: usize, mut on_step: impl FnMut(&TrainMetrics)) -> Result<()> {
        let seqs = usable(corpus, self.model.config.block_slots + 1)?;
        for _ in 0..steps {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(0x5eed) ^ self.step as u64);
            let batch: Vec<Vec<TokenId>> =
                (0..self.config.batch).map(|_| seqs[rng.gen_range(0..seqs.len())].clone()).collect();
            let metrics = self.train_step(&batch)?;
            on_step(&metrics);
        }
        Ok(())
    }
}

fn usable(corpus: &Corpus, min_len: usize) -> Result<Vec<&Vec<TokenId>>> {
    let seqs: Vec<&Vec<TokenId>> = corpus.sequences.iter().filter(|s| s.len() >= min_len).collect();
    if seqs.is_empty() {
        return Err(Error::Corpus(format!("no sequence with at least {min_len} tokens")));
    }
    Ok(seqs)
}

/// Held-out cross entropy of calibrated vs raw logits on slots `1..M`, with the
/// same decay weights as training, averaged over anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEval {
    pub raw_ce: f64,
    pub calibrated_ce: f64,
    pub anchors: usize,
}

pub fn eval_calibration<S: Scalar>(
    model: &Transformer<S>,
    sequences: &[Vec<TokenId>],
    lambda: f64,
) -> Result<CalibrationEval> {
    let m = model.config.block_slots;
    if m < 2 {
        return Err(Error::Precondition("calibration needs at least two slots".into()));
    }
    let mut raw = 0.0;
    let mut cal = 0.0;
    let mut count = 0;
    for seq in sequences {
        if seq.len() <= m {
            continue;
        }
        let anchors: Vec<usize> = (0..seq.len() - m).collect();
        let kv = clean_cache(model, seq)?;
        let layout = build_training_layout(seq.len(), &anchors, m)?.fold_frozen_into_cache()?;
        let out = model.forward_taped(&kv, &layout, &[], &mut ForwardTape::default())?;
        let w = decay_weights(m - 1, lambda);
        for &a in &anchors {
            let rows = layout.block_rows(a);
            let targets = &seq[a + 1..=a + m];
            let logits: Vec<Vec<S>> = rows.iter().map(|&r| out.logits.row(r).to_vec()).collect();
            let hidden: Vec<Vec<S>> = rows.iter().map(|&r| out.hidden.row(r).to_vec()).collect();
            raw += weighted_ce(&logits[1..], &targets[1..], &w).f64();
            cal += calib_loss(&logits, &hidden, model.embedding(targets[0]), targets, &model.draft, lambda).f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Precondition("no sequence long enough to evaluate".into()));
    }
    Ok(CalibrationEval { raw_ce: raw / count as f64, calibrated_ce: cal / count as f64, anchors: count })
}

/// Next-token cross entropy of the target on `batch` and its gradient with
/// respect to every frozen weight. Fixture generation only.
pub fn target_loss_and_grads<S: Scalar>(
    model: &Transformer<S>,
    batch: &[Vec<TokenId>],
) -> Result<(f64, FrozenWeights<S>)> {
    let count: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if count == 0 {
        return Err(Error::Precondition("no next-token targets".into()));
    }
    let scale = 1.0 / count as f64;
    let parts = batch
        .par_iter()
        .map(|seq| {
            let mut g = model.frozen.zeros_like();
            let n = seq.len();
            let layout = build_causal_layout(0, n);
            let kv = model.new_kv();
            let mut tape = ForwardTape::default();
            let out = model.forward_taped(&kv, &layout, seq, &mut tape)?;
            let mut d_logits = Mat::zeros(n, model.config.vocab_size);
            let mut loss = 0.0;
            for i in 0..n.saturating_sub(1) {
                let l = out.logits.row(i);
                let t = seq[i + 1];
                loss -= log_softmax_at(l, t).f64();
                let lse = log_sum_exp(l);
                for (v, (o, &x)) in d_logits.row_mut(i).iter_mut().zip(l).enumerate() {
                    let p = (x - lse).exp();
                    *o = S::of(scale) * if v == t { p - S::one() } else { p };
                }
            }
            model.backward(&tape, &kv, &layout, seq, &d_logits, None, &mut GradTargets { draft: None, frozen: Some(&mut g) });
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut grads = model.frozen.zeros_like();
    for (l, g) in &parts {
        loss += l;
        let flat = flatten_frozen(g);
        let mut at = 0;
        grads.visit_mut(|_, _, data| {
            for x in data.iter_mut() {
                *x += flat[at];
                at += 1;
            }
        });
    }
    Ok((loss * scale, grads))
}

/// Briefly trains the target itself on `corpus` so that it has structure for
/// a drafter to learn, then re-derives the drafter from the new weights.
/// Returns the loss of each step.
pub fn pretrain_target<S: Scalar>(
    model: &mut Transformer<S>,
    corpus: &Corpus,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let seqs = usable(corpus, 2)?;
    let mut adam = Adam::new(model.target_params(), lr, 0.9, 0.999, 1e-8);
    let mut losses = Vec::with_capacity(steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..steps {
        let b: Vec<Vec<TokenId>> = (0..batch).map(|_| seqs[rng.gen_range(0..seqs.len())].clone()).collect();
        let (loss, grads) = target_loss_and_grads(model, &b)?;
        let mut params = flatten_frozen(&model.frozen);
        adam.step(&mut params, &flatten_frozen(&grads));
        unflatten_frozen(&mut model.frozen, &params);
        losses.push(loss);
    }
    let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0xd7af);
    let draft = DraftWeights::from_frozen(&model.config, &model.frozen, &mut init);
    *model = model.with_draft(draft)?;
    Ok(losses)
}

#[cfg(test)]
mod tests;
