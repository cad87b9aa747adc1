use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use maskdraft::corpus::{Corpus, CorpusSpec};
use maskdraft::engine::{DecodeConfig, Engine, DEFAULT_THETA};
use maskdraft::model::checkpoint;
use maskdraft::oracle::{self, CheckResult, EfficacyConfig};
use maskdraft::scheduler::{run_batch, BatchConfig, CostProfile, ModePolicy, DEFAULT_THRESHOLD};
use maskdraft::trainer::{pretrain_target, TrainConfig, Trainer};
use maskdraft::{Error, Mode, Model, ModelConfig, TokenId};

#[derive(Parser)]
#[command(name = "maskdraft", version, about = "Block drafting with lossless verification on a toy transformer")]
struct Cli {
    /// JSON file with optional `model`, `train`, `corpus`, and `profile` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted (required for checkpoints).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a seeded order-2 Markov corpus.
    GenCorpus {
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Writes a random target with a drafter derived from it.
    Init,
    /// Trains the target itself on a corpus (fixture generation).
    Pretrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
    },
    /// Trains the drafter; prints metrics as JSON lines.
    Train {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Decodes one prompt; prints step records and the response as JSON lines.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Space- or comma-separated token ids.
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Batch size used to resolve `--mode auto`.
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Runs batches of corpus prompts; prints a run report per batch size.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        prompt_len: usize,
    },
    /// Runs the losslessness and correctness checks; exit code 1 on any failure.
    Oracle {
        /// Model for the model-dependent checks; a random one when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Decodes per mode for the sequence-level distribution check.
        #[arg(long, default_value_t = 200_000)]
        runs: usize,
        /// Also run the end-to-end training check (several minutes).
        #[arg(long)]
        with_training: bool,
    },
}

#[derive(Args, Clone)]
struct DecodeArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
    mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    #[arg(long)]
    stop: Option<TokenId>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    Parallel,
    Sequential,
}

impl From<ModeArg> for ModePolicy {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Auto => ModePolicy::Auto,
            ModeArg::Parallel => ModePolicy::Parallel,
            ModeArg::Sequential => ModePolicy::Sequential,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    corpus: Option<CorpusSpec>,
    profile: Option<CostProfile>,
}

/// Run header: enough to reproduce a decode or bench run.
#[derive(Serialize)]
struct Header<'a> {
    kind: &'static str,
    config_hash: String,
    seed: u64,
    mode_policy: ModePolicy,
    theta: f64,
    temperature: f64,
    max_tokens: usize,
    threshold: usize,
    block_slots: usize,
    n_draft_layers: usize,
    n_layers: usize,
    profile: &'a CostProfile,
}

enum Failure {
    Usage(String),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_config(path: Option<&Path>) -> std::result::Result<ConfigFile, Failure> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(ConfigFile::default()),
    }
}

fn sink(out: Option<&Path>) -> std::result::Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn require_out(out: Option<&Path>) -> std::result::Result<&Path, Failure> {
    out.ok_or_else(|| Failure::Usage("--out is required for this command".into()))
}

fn line<T: Serialize>(w: &mut dyn Write, value: &T) -> Outcome {
    writeln!(w, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn parse_tokens(s: &str) -> std::result::Result<Vec<TokenId>, Failure> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .map(|w| w.parse().map_err(|_| Failure::Usage(format!("bad token {w:?}"))))
        .collect()
}

fn config_hash<T: Serialize>(value: &T) -> std::result::Result<String, Failure> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

fn decode_config(args: &DecodeArgs, seed: u64) -> DecodeConfig {
    DecodeConfig {
        theta: args.theta,
        temperature: args.temperature,
        max_tokens: args.max_tokens,
        stop_token: args.stop,
        seed,
    }
}

fn header<'a>(
    kind: &'static str,
    model: &Model,
    args: &DecodeArgs,
    seed: u64,
    profile: &'a CostProfile,
) -> std::result::Result<Header<'a>, Failure> {
    let policy: ModePolicy = args.mode.into();
    let hash = config_hash(&(&model.config, decode_config(args, seed), policy, args.threshold, profile))?;
    Ok(Header {
        kind,
        config_hash: hash,
        seed,
        mode_policy: policy,
        theta: args.theta,
        temperature: args.temperature,
        max_tokens: args.max_tokens,
        threshold: args.threshold,
        block_slots: model.config.block_slots,
        n_draft_layers: model.config.n_draft_layers,
        n_layers: model.config.n_layers,
        profile,
    })
}

fn load_corpus(path: &Path, model: &Model) -> std::result::Result<Corpus, Failure> {
    let corpus = Corpus::load(path)?;
    corpus.check_vocab(model.config.vocab_size)?;
    Ok(corpus)
}

fn run(cli: Cli) -> Outcome {
    let file = read_config(cli.config.as_deref())?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::GenCorpus { vocab, sequences, seq_len } => {
            let mut spec = file.corpus.unwrap_or_default();
            spec.seed = cli.seed;
            spec.vocab_size = vocab.unwrap_or(spec.vocab_size);
            spec.n_sequences = sequences.unwrap_or(spec.n_sequences);
            spec.seq_len = seq_len.unwrap_or(spec.seq_len);
            let corpus = Corpus::generate(&spec)?;
            let header = serde_json::to_string(&spec)?;
            sink(out)?.write_all(corpus.to_text(Some(&header)).as_bytes())?;
        }
        Command::Init => {
            let cfg = file.model.unwrap_or_default();
            let model = Model::random(cfg, &mut rand_for(cli.seed))?;
            checkpoint::save(&model, require_out(out)?)?;
        }
        Command::Pretrain { checkpoint: ckpt, corpus, steps, batch, lr } => {
            let dest = require_out(out)?;
            let mut model: Model = checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&corpus, &model)?;
            let losses = pretrain_target(&mut model, &corpus, steps, batch, lr, cli.seed)?;
            let mut w = std::io::stdout().lock();
            for (i, l) in losses.iter().enumerate() {
                line(&mut w, &serde_json::json!({ "step": i + 1, "target_loss": l }))?;
            }
            checkpoint::save(&model, dest)?;
        }
        Command::Train { checkpoint: ckpt, corpus, steps, lr, lambda, batch } => {
            let dest = require_out(out)?;
            let model: Model = checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&corpus, &model)?;
            let mut cfg = file.train.unwrap_or_default();
            cfg.seed = cli.seed;
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.lambda = lambda.unwrap_or(cfg.lambda);
            cfg.batch = batch.unwrap_or(cfg.batch);
            let mut trainer = Trainer::new(model, cfg)?;
            let mut w = std::io::stdout().lock();
            let mut io_err = None;
            trainer.train(&corpus, cfg.steps, |m| {
                if io_err.is_none() {
                    if let Err(e) = line(&mut w, m) {
                        io_err = Some(e);
                    }
                }
            })?;
            if let Some(e) = io_err {
                return Err(e);
            }
            checkpoint::save(&trainer.model, dest)?;
        }
        Command::Decode { checkpoint: ckpt, prompt, decode, batch } => {
            let model: Model = checkpoint::load(&ckpt)?;
            let prompt = parse_tokens(&prompt)?;
            let profile = file.profile.unwrap_or_default();
            let mode = ModePolicy::from(decode.mode).resolve(batch.max(1), decode.threshold);
            let engine = Engine::new(&model, decode_config(&decode, cli.seed))?;
            let result = engine.decode(&prompt, 0, mode)?;
            let mut w = sink(out)?;
            line(&mut *w, &header("decode", &model, &decode, cli.seed, &profile)?)?;
            for s in &result.steps {
                line(&mut *w, s)?;
            }
            line(
                &mut *w,
                &serde_json::json!({
                    "mode": mode,
                    "response": result.response,
                    "steps": result.steps.len(),
                    "tau": result.tau(),
                }),
            )?;
        }
        Command::Bench { checkpoint: ckpt, corpus, decode, batch, prompt_len } => {
            let model: Model = checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&corpus, &model)?;
            let prompts: Vec<Vec<TokenId>> = corpus
                .sequences
                .iter()
                .filter(|s| s.len() >= prompt_len && prompt_len > 0)
                .map(|s| s[..prompt_len].to_vec())
                .collect();
            let max_batch = batch.iter().copied().max().unwrap_or(0);
            if batch.contains(&0) || prompts.len() < max_batch {
                return Err(Failure::Usage(format!(
                    "need batch sizes >= 1 and at least {max_batch} prompts of length {prompt_len}"
                )));
            }
            let profile = file.profile.unwrap_or_default();
            let cfg = BatchConfig {
                decode: decode_config(&decode, cli.seed),
                policy: decode.mode.into(),
                threshold: decode.threshold,
                profile,
            };
            let mut w = sink(out)?;
            line(&mut *w, &header("bench", &model, &decode, cli.seed, &profile)?)?;
            for &b in &batch {
                let streams: Vec<(u64, Vec<TokenId>)> =
                    prompts[..b].iter().enumerate().map(|(i, p)| (i as u64, p.clone())).collect();
                let report = run_batch(&model, &streams, &cfg)?;
                for s in &report.streams {
                    let mut record = serde_json::to_value(&s.record)?;
                    record["batch"] = b.into();
                    line(&mut *w, &record)?;
                }
                line(
                    &mut *w,
                    &serde_json::json!({
                        "batch": b,
                        "mode": report.mode,
                        "tau": report.tau(),
                        "est_cost": report.est_cost(),
                        "est_speedup": report.est_speedup(),
                    }),
                )?;
            }
        }
        Command::Oracle { checkpoint: ckpt, runs, with_training } => {
            let model: Model = match ckpt {
                Some(p) => checkpoint::load(&p)?,
                None => Model::random(file.model.unwrap_or_default(), &mut rand_for(cli.seed))?,
            };
            let mut w = sink(out)?;
            let mut all_passed = true;
            let mut report = |c: CheckResult, w: &mut dyn Write| -> Outcome {
                all_passed &= c.passed;
                writeln!(w, "{c}")?;
                w.flush()?;
                Ok(())
            };
            let seed = cli.seed;
            report(oracle::identity_sweep(10_000, 16, seed), &mut *w)?;
            let fixture = oracle::tv_fixture(seed)?;
            for mode in [Mode::Parallel, Mode::Sequential] {
                report(oracle::sequence_tv(&fixture, &[1, 2], 3, runs, mode, seed)?, &mut *w)?;
            }
            let mut models = oracle::greedy_fixtures(seed)?;
            models.push(model.clone());
            report(oracle::greedy_exactness(&models, 30, &[0.0, 0.05, 0.5], 16, seed)?, &mut *w)?;
            report(oracle::isolation(20, seed)?, &mut *w)?;
            report(oracle::kv_reuse(&model, 200, seed)?, &mut *w)?;
            report(oracle::gradient_check(&ModelConfig::tiny(32, 4, 2, 3), &[seed])?, &mut *w)?;
            report(oracle::token_accounting(&model, 5, seed)?, &mut *w)?;
            report(oracle::flex_switching(&model.config, &file.profile.unwrap_or_default()), &mut *w)?;
            report(oracle::config_fidelity(), &mut *w)?;
            if with_training {
                let cfg = EfficacyConfig { model_seed: seed, ..Default::default() };
                let r = oracle::training_efficacy(&cfg, |msg| eprintln!("{msg}"))?;
                for c in r.checks() {
                    report(c, &mut *w)?;
                }
            }
            if !all_passed {
                return Err(Failure::Checks);
            }
        }
    }
    Ok(())
}

fn rand_for(seed: u64) -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
