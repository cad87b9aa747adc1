//! Per-stream decoding: prefill, parallel and sequential draft/verify steps,
//! branch selection, calibration, and KV rollback.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{build_block_after, build_causal_layout, build_parallel_layout, build_sequential_draft_layout};
use crate::model::{calibrate as calibrate_mlp, DraftWeights, KvStore, TokenId, Transformer};
use crate::sampler::{apply_temperature, greedy_verify, speculative_verify, Categorical, Purpose, RngStream, VerifyOutcome};
use crate::scalar::Scalar;
use crate::scheduler::ForwardCounts;

pub const DEFAULT_THETA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Parallel,
    Sequential,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Parallel => "parallel",
            Mode::Sequential => "sequential",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub theta: f64,
    pub temperature: f64,
    /// Response length cap (prompt excluded).
    pub max_tokens: usize,
    pub stop_token: Option<TokenId>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { theta: DEFAULT_THETA, temperature: 0.0, max_tokens: 32, stop_token: None, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} outside [0, 1]", self.theta)));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be finite and nonnegative", self.temperature)));
        }
        Ok(())
    }
}

/// Pending drafts for the next verification.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftBlock {
    pub tokens: Vec<TokenId>,
    /// Logits each token was sampled from (calibrated when `calibrated`).
    pub logits: Vec<Vec<f64>>,
    /// Probability of each token under the distribution it was sampled from.
    pub draft_probs: Vec<f64>,
    pub dists: Vec<Categorical>,
    /// Per-token confidence used for branch pruning. Equals `draft_probs`
    /// when sampling; at temperature 0 it is the unscaled softmax probability.
    pub confidence: Vec<f64>,
    pub origin_branch: usize,
    pub calibrated: bool,
}

impl DraftBlock {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Uncalibrated per-slot outputs of one kept branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<S> {
    pub branch: usize,
    pub hidden: Vec<Vec<S>>,
    pub logits: Vec<Vec<S>>,
}

/// Candidates for every kept branch of one parallel forward.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup<S> {
    pub branches: Vec<Candidate<S>>,
}

impl<S> CandidateGroup<S> {
    pub fn get(&self, branch: usize) -> Option<&Candidate<S>> {
        self.branches.iter().find(|c| c.branch == branch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<S> {
    pub id: u64,
    pub mode: Mode,
    /// Prompt followed by the verified response.
    pub committed: Vec<TokenId>,
    pub prompt_len: usize,
    pub kv: KvStore<S>,
    pub pending: Option<DraftBlock>,
    /// Sequential mode: target logits for the position after the bonus.
    pub next_target: Option<Vec<f64>>,
    pub step: u64,
    pub finished: bool,
}

impl<S> StreamState<S> {
    pub fn response(&self) -> &[TokenId] {
        &self.committed[self.prompt_len..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub mode: Mode,
    /// Rows of the main forward (parallel) or of all forwards (sequential).
    pub rows_forwarded: usize,
    pub rows_full: usize,
    pub rows_partial: usize,
    pub kept_branches: Vec<usize>,
    pub r_acc: usize,
    pub committed: usize,
    pub fallback: bool,
    /// Every forward issued by this step, fallback draft passes included.
    pub forwards: Vec<ForwardCounts>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillStats {
    pub forwards: Vec<ForwardCounts>,
    pub first_token_dist: Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub response: Vec<TokenId>,
    pub prefill: PrefillStats,
    pub steps: Vec<StepStats>,
}

impl DecodeResult {
    pub fn tau(&self) -> f64 {
        acceptance_length_tau(&self.steps)
    }
}

/// Keeps branch 0 and every `r` whose cumulative confidence reaches `theta`.
pub fn select_branches(pending: &DraftBlock, theta: f64) -> Vec<usize> {
    let mut kept = vec![0];
    let mut acc = 1.0;
    for (r, &c) in pending.confidence.iter().enumerate() {
        acc *= c;
        if acc < theta {
            break;
        }
        kept.push(r + 1);
    }
    kept
}

/// Bonus-guided logit bias on one slot.
pub fn calibrate<S: Scalar>(logits: &[S], hidden: &[S], bonus_embedding: &[S], draft: &DraftWeights<S>) -> Vec<S> {
    calibrate_mlp(logits, hidden, bonus_embedding, &draft.calib)
}

/// Mean committed tokens per step. Zero for an empty trace.
pub fn acceptance_length_tau(steps: &[StepStats]) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    steps.iter().map(|s| s.committed).sum::<usize>() as f64 / steps.len() as f64
}

fn to_f64<S: Scalar>(row: &[S]) -> Vec<f64> {
    row.iter().map(|x| x.f64()).collect()
}

pub struct Engine<'m, S> {
    pub model: &'m Transformer<S>,
    pub config: DecodeConfig,
}

impl<'m, S: Scalar> Engine<'m, S> {
    pub fn new(model: &'m Transformer<S>, config: DecodeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, config })
    }

    fn block_slots(&self) -> usize {
        self.model.config.block_slots
    }

    pub fn new_state(&self, id: u64, mode: Mode) -> StreamState<S> {
        StreamState {
            id,
            mode,
            committed: Vec::new(),
            prompt_len: 0,
            kv: self.model.new_kv(),
            pending: None,
            next_target: None,
            step: 0,
            finished: false,
        }
    }

    fn sample_block(&self, logits: &[Vec<f64>], rng: RngStream, origin_branch: usize, calibrated: bool) -> DraftBlock {
        let t = self.config.temperature;
        let mut block = DraftBlock {
            tokens: Vec::with_capacity(logits.len()),
            logits: logits.to_vec(),
            draft_probs: Vec::with_capacity(logits.len()),
            dists: Vec::with_capacity(logits.len()),
            confidence: Vec::with_capacity(logits.len()),
            origin_branch,
            calibrated,
        };
        for (i, l) in logits.iter().enumerate() {
            let dist = apply_temperature(l, t);
            let token = dist.sample(rng.uniform(i as u64, Purpose::DraftSample));
            let p = dist.prob(token);
            let conf = if t == 0.0 { apply_temperature(l, 1.0).prob(token) } else { p };
            block.tokens.push(token);
            block.draft_probs.push(p);
            block.confidence.push(conf);
            block.dists.push(dist);
        }
        block
    }

    fn verify(&self, targets: &[Vec<f64>], pending: &DraftBlock, rng: &RngStream) -> Result<VerifyOutcome> {
        let t = self.config.temperature;
        if t == 0.0 {
            greedy_verify(targets, &pending.tokens)
        } else {
            let dists: Vec<Categorical> = targets.iter().map(|l| apply_temperature(l, t)).collect();
            speculative_verify(&dists, &pending.tokens, &pending.dists, rng)
        }
    }

    fn commit(&self, st: &mut StreamState<S>, tokens: &[TokenId]) {
        st.committed.extend_from_slice(tokens);
        let response = &st.committed[st.prompt_len..];
        let stopped = self.config.stop_token.is_some_and(|s| response.contains(&s));
        if stopped || response.len() >= self.config.max_tokens {
            st.finished = true;
        }
    }

    /// Sequential-style draft pass after the bonus at `committed.len()-1`.
    /// Persists the bonus row's KV. Returns the bonus-row target logits and
    /// the raw logits of the first `k` slots.
    fn draft_pass(&self, st: &mut StreamState<S>, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let m = st.committed.len();
        let layout = build_sequential_draft_layout(m, self.block_slots())?;
        let bonus = st.committed[m - 1];
        let out = self.model.forward(&mut st.kv, &layout, &[bonus])?;
        let slots = layout.block_rows(0);
        let drafts = slots[..k].iter().map(|&r| to_f64(out.logits.row(r))).collect();
        Ok((to_f64(out.logits.row(0)), drafts))
    }

    /// Processes the prompt, commits the first token, and prepares the first
    /// draft block unless the stream already finished.
    pub fn prefill(&self, st: &mut StreamState<S>, prompt: &[TokenId]) -> Result<PrefillStats> {
        if prompt.is_empty() {
            return Err(Error::Precondition("empty prompt".into()));
        }
        if !st.committed.is_empty() || !st.kv.is_empty() {
            return Err(Error::Precondition("prefill on a non-empty stream".into()));
        }
        let n = prompt.len();
        let m_slots = self.block_slots();
        st.committed.extend_from_slice(prompt);
        st.prompt_len = n;
        let first_rng = RngStream::new(self.config.seed, st.id, 0, n as u64);
        let layout = match st.mode {
            Mode::Parallel => build_block_after(0, n, m_slots),
            Mode::Sequential => build_causal_layout(0, n),
        };
        let out = self.model.forward(&mut st.kv, &layout, prompt)?;
        let mut forwards = vec![ForwardCounts::of_layout(&layout)];
        let first_token_dist = apply_temperature(&to_f64(out.logits.row(n - 1)), self.config.temperature);
        let b = first_token_dist.sample(first_rng.uniform(0, Purpose::FirstToken));
        if self.config.max_tokens == 0 {
            st.finished = true;
            return Ok(PrefillStats { forwards, first_token_dist });
        }
        self.commit(st, &[b]);
        if st.finished {
            return Ok(PrefillStats { forwards, first_token_dist });
        }
        let draft_rng = RngStream::new(self.config.seed, st.id, 0, n as u64 + 1);
        match st.mode {
            Mode::Parallel => {
                let e_b = self.model.embedding(b);
                let rows = layout.block_rows(0);
                let logits: Vec<Vec<f64>> = rows[1..]
                    .iter()
                    .map(|&r| to_f64(&calibrate(out.logits.row(r), out.hidden.row(r), e_b, &self.model.draft)))
                    .collect();
                st.pending = Some(self.sample_block(&logits, draft_rng, 0, true));
            }
            Mode::Sequential => {
                let (target, drafts) = self.draft_pass(st, m_slots)?;
                forwards.push(ForwardCounts { full: 1, partial: m_slots });
                st.next_target = Some(target);
                st.pending = Some(self.sample_block(&drafts, draft_rng, 0, false));
            }
        }
        Ok(PrefillStats { forwards, first_token_dist })
    }

    /// One combined verify-and-draft forward.
    pub fn parallel_step(&self, st: &mut StreamState<S>) -> Result<StepStats> {
        let pending = st.pending.take().ok_or_else(|| Error::Precondition("no pending draft".into()))?;
        let m_slots = self.block_slots();
        let k = pending.len();
        let cache_len = st.kv.len();
        if cache_len + 1 != st.committed.len() {
            return Err(Error::Kv(format!("parallel step with {cache_len} cached for {} committed", st.committed.len())));
        }
        st.step += 1;
        let bonus = st.committed[cache_len];
        let kept = select_branches(&pending, self.config.theta);
        let layout = build_parallel_layout(cache_len, k, &kept, m_slots)?;
        let mut tokens = Vec::with_capacity(k + 1);
        tokens.push(bonus);
        tokens.extend_from_slice(&pending.tokens);
        let out = self.model.forward(&mut st.kv, &layout, &tokens)?;
        let main = ForwardCounts::of_layout(&layout);

        let targets: Vec<Vec<f64>> = (0..=k).map(|i| to_f64(out.logits.row(i))).collect();
        let group = CandidateGroup {
            branches: kept
                .iter()
                .map(|&r| {
                    let rows = layout.block_rows(r);
                    Candidate {
                        branch: r,
                        hidden: rows.iter().map(|&i| out.hidden.row(i).to_vec()).collect(),
                        logits: rows.iter().map(|&i| out.logits.row(i).to_vec()).collect(),
                    }
                })
                .collect(),
        };
        let rng = RngStream::new(self.config.seed, st.id, st.step, cache_len as u64 + 1);
        let outcome = self.verify(&targets, &pending, &rng)?;
        let r = outcome.r_acc;
        self.model.truncate_kv(&mut st.kv, cache_len + 1 + r)?;
        self.commit(st, &outcome.committed);

        let mut stats = StepStats {
            step: st.step,
            mode: Mode::Parallel,
            rows_forwarded: layout.n_rows(),
            rows_full: main.full,
            rows_partial: main.partial,
            kept_branches: kept,
            r_acc: r,
            committed: outcome.committed.len(),
            fallback: false,
            forwards: vec![main],
        };
        if st.finished {
            return Ok(stats);
        }
        let m = st.committed.len();
        let draft_rng = RngStream::new(self.config.seed, st.id, st.step, m as u64);
        match group.get(r) {
            Some(cand) => {
                let e_b = self.model.embedding(outcome.bonus);
                let logits: Vec<Vec<f64>> = (1..m_slots)
                    .map(|j| to_f64(&calibrate(&cand.logits[j], &cand.hidden[j], e_b, &self.model.draft)))
                    .collect();
                st.pending = Some(self.sample_block(&logits, draft_rng, r, true));
            }
            None => {
                let (_, drafts) = self.draft_pass(st, m_slots - 1)?;
                self.model.truncate_kv(&mut st.kv, m - 1)?;
                stats.fallback = true;
                stats.forwards.push(ForwardCounts { full: 1, partial: m_slots });
                st.pending = Some(self.sample_block(&drafts, draft_rng, r, false));
            }
        }
        Ok(stats)
    }

    /// Verify forward over the pending drafts, then a draft pass reusing the
    /// verified KV.
    pub fn sequential_step(&self, st: &mut StreamState<S>) -> Result<StepStats> {
        let pending = st.pending.take().ok_or_else(|| Error::Precondition("no pending draft".into()))?;
        let first_target =
            st.next_target.take().ok_or_else(|| Error::Precondition("no target for the first draft".into()))?;
        let m_slots = self.block_slots();
        let k = pending.len();
        let cache_len = st.kv.len();
        if cache_len != st.committed.len() {
            return Err(Error::Kv(format!("sequential step with {cache_len} cached for {} committed", st.committed.len())));
        }
        st.step += 1;
        let layout = build_causal_layout(cache_len, k);
        let out = self.model.forward(&mut st.kv, &layout, &pending.tokens)?;
        let verify_counts = ForwardCounts::of_layout(&layout);
        let mut targets = Vec::with_capacity(k + 1);
        targets.push(first_target);
        targets.extend((0..k).map(|i| to_f64(out.logits.row(i))));
        let rng = RngStream::new(self.config.seed, st.id, st.step, cache_len as u64);
        let outcome = self.verify(&targets, &pending, &rng)?;
        self.model.truncate_kv(&mut st.kv, cache_len + outcome.r_acc)?;
        self.commit(st, &outcome.committed);

        let mut stats = StepStats {
            step: st.step,
            mode: Mode::Sequential,
            rows_forwarded: layout.n_rows(),
            rows_full: verify_counts.full,
            rows_partial: 0,
            kept_branches: Vec::new(),
            r_acc: outcome.r_acc,
            committed: outcome.committed.len(),
            fallback: false,
            forwards: vec![verify_counts],
        };
        if st.finished {
            return Ok(stats);
        }
        let (target, drafts) = self.draft_pass(st, m_slots)?;
        let draft_counts = ForwardCounts { full: 1, partial: m_slots };
        stats.rows_forwarded += draft_counts.full + draft_counts.partial;
        stats.rows_full += draft_counts.full;
        stats.rows_partial += draft_counts.partial;
        stats.forwards.push(draft_counts);
        st.next_target = Some(target);
        let draft_rng = RngStream::new(self.config.seed, st.id, st.step, st.committed.len() as u64);
        st.pending = Some(self.sample_block(&drafts, draft_rng, 0, false));
        Ok(stats)
    }

    pub fn step(&self, st: &mut StreamState<S>) -> Result<StepStats> {
        match st.mode {
            Mode::Parallel => self.parallel_step(st),
            Mode::Sequential => self.sequential_step(st),
        }
    }

    /// Decodes one stream to its stop condition.
    pub fn decode(&self, prompt: &[TokenId], stream_id: u64, mode: Mode) -> Result<DecodeResult> {
        let mut st = self.new_state(stream_id, mode);
        let prefill = self.prefill(&mut st, prompt)?;
        let mut steps = Vec::new();
        while !st.finished {
            steps.push(self.step(&mut st)?);
        }
        Ok(DecodeResult { response: self.trim(st.response()), prefill, steps })
    }

    /// Cuts a response at the token cap and after the first stop token.
    pub fn trim(&self, response: &[TokenId]) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = response.iter().copied().take(self.config.max_tokens).collect();
        if let Some(stop) = self.config.stop_token {
            if let Some(i) = out.iter().position(|&t| t == stop) {
                out.truncate(i + 1);
            }
        }
        out
    }
}

/// Plain autoregressive decoding with the target alone, one token per forward.
/// Uses the same keyed randomness as the first-token draw.
pub fn autoregressive<S: Scalar>(
    model: &Transformer<S>,
    prompt: &[TokenId],
    config: &DecodeConfig,
    stream_id: u64,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Precondition("empty prompt".into()));
    }
    let mut kv = model.new_kv();
    let mut out = model.forward(&mut kv, &build_causal_layout(0, prompt.len()), prompt)?;
    let mut response = Vec::new();
    let mut pos = prompt.len();
    while response.len() < config.max_tokens {
        let logits = to_f64(out.logits.row(out.logits.rows() - 1));
        let dist = apply_temperature(&logits, config.temperature);
        let rng = RngStream::new(config.seed, stream_id, 0, pos as u64);
        let t = dist.sample(rng.uniform(0, Purpose::FirstToken));
        response.push(t);
        if config.stop_token == Some(t) || response.len() == config.max_tokens {
            break;
        }
        out = model.forward(&mut kv, &build_causal_layout(pos, 1), &[t])?;
        pos += 1;
    }
    Ok(response)
}
