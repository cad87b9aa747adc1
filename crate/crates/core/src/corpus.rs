//! Seeded order-2 Markov corpus and its text format.
//!
//! One sequence per line as space-separated decimal token ids; lines starting
//! with `#` are comments.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::sampler::Categorical;

/// Weight of the last token's table; the token before it gets the rest.
const RECENT_WEIGHT: f64 = 0.7;
/// Default Dirichlet concentration of each table row. Small values give peaked rows.
pub const DEFAULT_CONCENTRATION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub seed: u64,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub concentration: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { vocab_size: 64, seed: 0, n_sequences: 2000, seq_len: 48, concentration: DEFAULT_CONCENTRATION }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.seq_len < 2 || !(self.concentration > 0.0) {
            return Err(Error::Corpus(format!("invalid corpus spec {self:?}")));
        }
        Ok(())
    }
}

/// `P(c | a, b) = 0.7·recent[b][c] + 0.3·older[a][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    vocab: usize,
    recent: Vec<Vec<f64>>,
    older: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(vocab: usize, seed: u64) -> Result<Self> {
        Self::with_concentration(vocab, DEFAULT_CONCENTRATION, seed)
    }

    pub fn from_spec(spec: &CorpusSpec) -> Result<Self> {
        Self::with_concentration(spec.vocab_size, spec.concentration, spec.seed)
    }

    pub fn with_concentration(vocab: usize, concentration: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let dir = Dirichlet::new(&vec![concentration; vocab]).map_err(|e| Error::Corpus(e.to_string()))?;
        let mut table = || -> Vec<Vec<f64>> { (0..vocab).map(|_| dir.sample(&mut rng)).collect() };
        let recent = table();
        let older = table();
        Ok(Self { vocab, recent, older })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn prob(&self, a: TokenId, b: TokenId, c: TokenId) -> f64 {
        RECENT_WEIGHT * self.recent[b][c] + (1.0 - RECENT_WEIGHT) * self.older[a][c]
    }

    pub fn next_dist(&self, a: TokenId, b: TokenId) -> Vec<f64> {
        (0..self.vocab).map(|c| self.prob(a, b, c)).collect()
    }

    pub fn sample<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<TokenId> {
        let mut seq: Vec<TokenId> = (0..len.min(2)).map(|_| rng.gen_range(0..self.vocab)).collect();
        while seq.len() < len {
            let (a, b) = (seq[seq.len() - 2], seq[seq.len() - 1]);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut next = self.vocab - 1;
            for c in 0..self.vocab {
                acc += self.prob(a, b, c);
                if u < acc {
                    next = c;
                    break;
                }
            }
            seq.push(next);
        }
        seq
    }

    /// Next-token distribution as a validated categorical (renormalized for rounding).
    pub fn categorical(&self, a: TokenId, b: TokenId) -> Result<Categorical> {
        let mut p = self.next_dist(a, b);
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        Categorical::new(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sequences: Vec<Vec<TokenId>>,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let chain = MarkovChain::from_spec(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sequences = (0..spec.n_sequences).map(|_| chain.sample(spec.seq_len, &mut rng)).collect();
        Ok(Self { sequences })
    }

    pub fn to_text(&self, header: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = header {
            for line in h.lines() {
                out.push_str("# ");
                out.push_str(line);
                out.push('\n');
            }
        }
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sequences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let seq = line
                .split_whitespace()
                .map(|w| w.parse::<TokenId>().map_err(|_| Error::Corpus(format!("line {}: bad token {w:?}", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            sequences.push(seq);
        }
        Ok(Self { sequences })
    }

    pub fn save(&self, path: impl AsRef<Path>, header: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_text(header))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for (i, seq) in self.sequences.iter().enumerate() {
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::Corpus(format!("sequence {i}: token {t} outside vocabulary {vocab}")));
            }
        }
        Ok(())
    }

    /// Splits off the last `n` sequences.
    pub fn split_tail(&self, n: usize) -> (Corpus, Corpus) {
        let cut = self.sequences.len().saturating_sub(n);
        (
            Corpus { sequences: self.sequences[..cut].to_vec() },
            Corpus { sequences: self.sequences[cut..].to_vec() },
        )
    }

    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Pearson statistic of observed transitions against `chain`, as a z-score
/// `(χ² − df) / √(2·df)`. Within each context, cells expecting fewer than five
/// counts are pooled into one.
pub fn transition_z_score(chain: &MarkovChain, corpus: &Corpus) -> f64 {
    const MIN_EXPECTED: f64 = 5.0;
    let v = chain.vocab();
    let mut counts = vec![0usize; v * v * v];
    for seq in &corpus.sequences {
        for w in seq.windows(3) {
            counts[(w[0] * v + w[1]) * v + w[2]] += 1;
        }
    }
    let (mut chi2, mut df) = (0.0, 0usize);
    for a in 0..v {
        for b in 0..v {
            let row = &counts[(a * v + b) * v..(a * v + b + 1) * v];
            let n: usize = row.iter().sum();
            if n == 0 {
                continue;
            }
            let mut cells = Vec::new();
            let (mut pool_obs, mut pool_exp) = (0.0, 0.0);
            for (c, &obs) in row.iter().enumerate() {
                let expected = n as f64 * chain.prob(a, b, c);
                if expected >= MIN_EXPECTED {
                    cells.push((obs as f64, expected));
                } else {
                    pool_obs += obs as f64;
                    pool_exp += expected;
                }
            }
            if pool_exp > 0.0 {
                cells.push((pool_obs, pool_exp));
            }
            for &(o, e) in &cells {
                chi2 += (o - e).powi(2) / e;
            }
            df += cells.len().saturating_sub(1);
        }
    }
    (chi2 - df as f64) / (2.0 * df as f64).sqrt()
}
