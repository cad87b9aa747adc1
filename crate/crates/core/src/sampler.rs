//! Distributions, keyed randomness, and lossless draft verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::tensor::argmax_tiebreak_low;

const SUM_TOLERANCE: f64 = 1e-12;

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Precondition("empty distribution".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Precondition("probabilities must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Precondition(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(size: usize, index: usize) -> Self {
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn uniform(size: usize) -> Self {
        Self { probs: vec![1.0 / size as f64; size] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> TokenId {
        argmax_tiebreak_low(&self.probs)
    }

    /// Inverse-CDF draw with `u ∈ [0, 1)`. Never returns a zero-probability token.
    pub fn sample(&self, u: f64) -> TokenId {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

impl AsRef<[f64]> for Categorical {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

/// `softmax(logits / T)`; `T == 0` is exact greedy (one-hot at the lowest argmax).
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Categorical {
    assert!(temperature >= 0.0, "temperature must be nonnegative");
    if temperature == 0.0 {
        return Categorical::one_hot(logits.len(), argmax_tiebreak_low(logits));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Categorical { probs }
}

/// `normalize(max(0, p − q))`.
pub fn residual(p: &Categorical, q: &Categorical) -> Result<Categorical> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("residual over {} and {} entries", p.len(), q.len())));
    }
    let mut r: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(&a, &b)| (a - b).max(0.0)).collect();
    let mass: f64 = r.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroResidual);
    }
    r.iter_mut().for_each(|x| *x /= mass);
    Ok(Categorical { probs: r })
}

/// What a keyed draw is used for; separates otherwise identical keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Purpose {
    AcceptCoin = 1,
    BonusSample = 2,
    DraftSample = 3,
    FirstToken = 4,
}

/// Counter-based randomness keyed by (seed, stream, step, position, purpose).
///
/// Each draw builds a ChaCha8 generator from the full key, so results do not
/// depend on the order in which streams or positions are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
    pub step: u64,
    /// Absolute sequence position of offset 0.
    pub base: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64, step: u64, base: u64) -> Self {
        Self { seed, stream, step, base }
    }

    fn generator(&self, offset: u64, purpose: Purpose) -> ChaCha8Rng {
        let position = self.base + offset;
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.stream.to_le_bytes());
        key[16..24].copy_from_slice(&self.step.to_le_bytes());
        key[24..31].copy_from_slice(&position.to_le_bytes()[..7]);
        key[31] = purpose as u8;
        ChaCha8Rng::from_seed(key)
    }

    /// Uniform in `[0, 1)` for the given position offset and purpose.
    pub fn uniform(&self, offset: u64, purpose: Purpose) -> f64 {
        self.generator(offset, purpose).gen::<f64>()
    }

    pub fn u64(&self, offset: u64, purpose: Purpose) -> u64 {
        self.generator(offset, purpose).gen::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    /// Accepted draft count.
    pub r_acc: usize,
    pub bonus: TokenId,
    /// Accepted drafts followed by the bonus.
    pub committed: Vec<TokenId>,
}

impl VerifyOutcome {
    fn new(drafts: &[TokenId], r_acc: usize, bonus: TokenId) -> Self {
        let mut committed = drafts[..r_acc].to_vec();
        committed.push(bonus);
        Self { r_acc, bonus, committed }
    }
}

/// Speculative sampling over `k` drafts.
///
/// Draft `i` is accepted with probability `min(1, p_i(d_i) / q_i(d_i))` using
/// one uniform per position. The first rejection draws the bonus from the
/// residual `max(0, p_i − q_i)`; if every draft passes, the bonus comes from
/// `targets[k]`.
pub fn speculative_verify(
    targets: &[Categorical],
    drafts: &[TokenId],
    draft_dists: &[Categorical],
    rng: &RngStream,
) -> Result<VerifyOutcome> {
    let k = drafts.len();
    if targets.len() != k + 1 || draft_dists.len() != k {
        return Err(Error::Precondition(format!(
            "{} targets and {} draft distributions for {k} drafts",
            targets.len(),
            draft_dists.len()
        )));
    }
    for (i, (&d, q)) in drafts.iter().zip(draft_dists).enumerate() {
        if d >= q.len() || q.prob(d) <= 0.0 {
            return Err(Error::Precondition(format!("draft {i} has zero probability under its distribution")));
        }
    }
    for (i, (&d, q)) in drafts.iter().zip(draft_dists).enumerate() {
        let p = &targets[i];
        let ratio = (p.prob(d) / q.prob(d)).min(1.0);
        let u = rng.uniform(i as u64, Purpose::AcceptCoin);
        if u >= ratio {
            let bonus = residual(p, q)?.sample(rng.uniform(i as u64, Purpose::BonusSample));
            return Ok(VerifyOutcome::new(drafts, i, bonus));
        }
    }
    let bonus = targets[k].sample(rng.uniform(k as u64, Purpose::BonusSample));
    Ok(VerifyOutcome::new(drafts, k, bonus))
}

/// Temperature-zero verification: accept while each draft is the target's
/// lowest-index argmax; the bonus is the argmax at the first mismatch.
pub fn greedy_verify<T: AsRef<[f64]>>(targets: &[T], drafts: &[TokenId]) -> Result<VerifyOutcome> {
    if targets.len() != drafts.len() + 1 {
        return Err(Error::Precondition(format!("{} targets for {} drafts", targets.len(), drafts.len())));
    }
    for (i, &d) in drafts.iter().enumerate() {
        let best = argmax_tiebreak_low(targets[i].as_ref());
        if best != d {
            return Ok(VerifyOutcome::new(drafts, i, best));
        }
    }
    let k = drafts.len();
    Ok(VerifyOutcome::new(drafts, k, argmax_tiebreak_low(targets[k].as_ref())))
}

/// Largest deviation between the one-position committed-token marginal of
/// speculative sampling and the target `p`:
/// `q(v)·min(1, p(v)/q(v)) + P(reject)·residual(p, q)(v)` versus `p(v)`.
pub fn committed_marginal_identity(p: &Categorical, q: &Categorical) -> f64 {
    let accept: Vec<f64> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(&pv, &qv)| if qv > 0.0 { qv * (pv / qv).min(1.0) } else { 0.0 })
        .collect();
    let reject = 1.0 - accept.iter().sum::<f64>();
    let res = residual(p, q).ok();
    p.probs
        .iter()
        .enumerate()
        .map(|(v, &pv)| {
            let from_residual = res.as_ref().map_or(0.0, |r| reject * r.prob(v));
            (accept[v] + from_residual - pv).abs()
        })
        .fold(0.0, f64::max)
}
