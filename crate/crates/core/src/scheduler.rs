//! Mode selection by batch size, forward-row accounting, and an analytic cost model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::engine::{DecodeConfig, DecodeResult, Engine, Mode};
use crate::error::{Error, Result};
use crate::layout::AttentionLayout;
use crate::model::{TokenId, Transformer};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: usize = 2;

/// Rows in one forward: full-depth (frozen) and last-`N`-layer (mask) rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardCounts {
    pub full: usize,
    pub partial: usize,
}

impl ForwardCounts {
    pub fn of_layout(layout: &AttentionLayout) -> Self {
        Self { full: layout.n_frozen(), partial: layout.n_mask() }
    }

    pub fn rows(&self) -> usize {
        self.full + self.partial
    }
}

/// Per-step forwards: one for parallel, verify then draft for sequential.
pub fn forward_token_count(mode: Mode, block_slots: usize, kept: &[usize]) -> Vec<ForwardCounts> {
    match mode {
        Mode::Parallel => vec![ForwardCounts { full: block_slots, partial: kept.len() * block_slots }],
        Mode::Sequential => vec![
            ForwardCounts { full: block_slots, partial: 0 },
            ForwardCounts { full: 1, partial: block_slots },
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostProfile {
    /// Cost per layer-row beyond saturation.
    pub alpha: f64,
    /// Fixed cost of any forward (weight reads).
    pub beta: f64,
    /// Rows per forward absorbed by the memory-bound floor.
    pub saturation: f64,
}

impl Default for CostProfile {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 200.0, saturation: 64.0 }
    }
}

impl CostProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.saturation >= 0.0) {
            return Err(Error::Config(format!("invalid cost profile {self:?}")));
        }
        Ok(())
    }
}

/// `β + α·max(0, batch·(L·full + N·partial) − S·L)` for one batched forward.
pub fn estimate_forward_cost(counts: ForwardCounts, batch: usize, cfg: &ModelConfig, profile: &CostProfile) -> f64 {
    let layers = cfg.n_layers as f64;
    let work = batch as f64 * (layers * counts.full as f64 + cfg.n_draft_layers as f64 * counts.partial as f64);
    profile.beta + profile.alpha * (work - profile.saturation * layers).max(0.0)
}

pub fn estimate_step_cost(forwards: &[ForwardCounts], batch: usize, cfg: &ModelConfig, profile: &CostProfile) -> f64 {
    forwards.iter().map(|&c| estimate_forward_cost(c, batch, cfg, profile)).sum()
}

pub fn choose_mode(batch: usize, threshold: usize) -> Mode {
    if batch <= threshold {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModePolicy {
    Auto,
    Parallel,
    Sequential,
}

impl ModePolicy {
    pub fn resolve(self, batch: usize, threshold: usize) -> Mode {
        match self {
            ModePolicy::Auto => choose_mode(batch, threshold),
            ModePolicy::Parallel => Mode::Parallel,
            ModePolicy::Sequential => Mode::Sequential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub decode: DecodeConfig,
    pub policy: ModePolicy,
    pub threshold: usize,
    pub profile: CostProfile,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            policy: ModePolicy::Auto,
            threshold: DEFAULT_THRESHOLD,
            profile: CostProfile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub stream_id: u64,
    pub steps: usize,
    pub tokens: usize,
    pub tau: f64,
    pub rows_full: usize,
    pub rows_partial: usize,
    pub est_cost: f64,
    pub est_speedup: f64,
    pub mode: Mode,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub record: StreamRecord,
    pub result: DecodeResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub batch: usize,
    pub mode: Mode,
    pub streams: Vec<StreamOutput>,
}

impl RunReport {
    pub fn tau(&self) -> f64 {
        let steps: usize = self.streams.iter().map(|s| s.record.steps).sum();
        let committed: usize = self.streams.iter().flat_map(|s| &s.result.steps).map(|s| s.committed).sum();
        if steps == 0 {
            0.0
        } else {
            committed as f64 / steps as f64
        }
    }

    pub fn est_cost(&self) -> f64 {
        self.streams.iter().map(|s| s.record.est_cost).sum()
    }

    pub fn est_speedup(&self) -> f64 {
        let ar: f64 = self.streams.iter().map(|s| s.record.est_cost * s.record.est_speedup).sum();
        ar / self.est_cost()
    }

    pub fn json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.streams {
            out.push_str(&serde_json::to_string(&s.record)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Cost of plain AR decoding of `tokens` after an `n`-token prompt.
pub fn autoregressive_cost(prompt_len: usize, tokens: usize, batch: usize, cfg: &ModelConfig, profile: &CostProfile) -> f64 {
    let prefill = estimate_forward_cost(ForwardCounts { full: prompt_len, partial: 0 }, batch, cfg, profile);
    let one = estimate_forward_cost(ForwardCounts { full: 1, partial: 0 }, batch, cfg, profile);
    prefill + tokens.saturating_sub(1) as f64 * one
}

pub fn stream_record(
    stream_id: u64,
    prompt_len: usize,
    mode: Mode,
    result: &DecodeResult,
    batch: usize,
    cfg: &ModelConfig,
    profile: &CostProfile,
) -> StreamRecord {
    let prefill_cost = estimate_step_cost(&result.prefill.forwards, batch, cfg, profile);
    let est_cost = prefill_cost
        + result.steps.iter().map(|s| estimate_step_cost(&s.forwards, batch, cfg, profile)).sum::<f64>();
    let ar = autoregressive_cost(prompt_len, result.response.len(), batch, cfg, profile);
    let (full, partial) = result
        .steps
        .iter()
        .flat_map(|s| &s.forwards)
        .fold((0, 0), |(f, p), c| (f + c.full, p + c.partial));
    StreamRecord {
        stream_id,
        steps: result.steps.len(),
        tokens: result.response.len(),
        tau: result.tau(),
        rows_full: full,
        rows_partial: partial,
        est_cost,
        est_speedup: ar / est_cost,
        mode,
        fallbacks: result.steps.iter().filter(|s| s.fallback).count(),
    }
}

/// Decodes every `(stream_id, prompt)` under the mode chosen for the batch size.
/// Output is sorted by stream id.
pub fn run_batch<S: Scalar>(
    model: &Transformer<S>,
    streams: &[(u64, Vec<TokenId>)],
    config: &BatchConfig,
) -> Result<RunReport> {
    if streams.is_empty() {
        return Err(Error::Precondition("run_batch needs at least one stream".into()));
    }
    if config.threshold == 0 {
        return Err(Error::Config("threshold must be at least 1".into()));
    }
    config.profile.validate()?;
    let batch = streams.len();
    let mode = config.policy.resolve(batch, config.threshold);
    let engine = Engine::new(model, config.decode)?;
    let mut outputs = streams
        .par_iter()
        .map(|(id, prompt)| {
            let result = engine.decode(prompt, *id, mode)?;
            let record = stream_record(*id, prompt.len(), mode, &result, batch, &model.config, &config.profile);
            Ok(StreamOutput { record, result })
        })
        .collect::<Result<Vec<_>>>()?;
    outputs.sort_by_key(|o| o.record.stream_id);
    Ok(RunReport { batch, mode, streams: outputs })
}
