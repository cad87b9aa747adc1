//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use maskdraft::oracle::{self, CheckResult, EfficacyConfig};
use maskdraft::scheduler::CostProfile;
use maskdraft::{Mode, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_241;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Vec<CheckResult>,
}

fn random_model(seed: u64) -> Model {
    Model::random(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).expect("default config")
}

fn step_identity() -> Vec<CheckResult> {
    vec![oracle::identity_sweep(10_000, 16, SEED)]
}

fn sequence_losslessness() -> Vec<CheckResult> {
    let model = oracle::tv_fixture(SEED).expect("fixture");
    [Mode::Parallel, Mode::Sequential]
        .into_iter()
        .map(|mode| oracle::sequence_tv(&model, &[1, 2], 3, 200_000, mode, SEED).expect("decode"))
        .collect()
}

fn greedy_exactness() -> Vec<CheckResult> {
    let models = oracle::greedy_fixtures(SEED).expect("fixtures");
    vec![oracle::greedy_exactness(&models, 100, &[0.0, 0.05, 0.5], 24, SEED).expect("decode")]
}

fn isolation() -> Vec<CheckResult> {
    vec![oracle::isolation(20, SEED).expect("forward")]
}

fn kv_reuse() -> Vec<CheckResult> {
    vec![oracle::kv_reuse(&random_model(SEED), 200, SEED).expect("decode")]
}

fn gradients() -> Vec<CheckResult> {
    let cfg = ModelConfig::tiny(32, 4, 2, 3);
    vec![oracle::gradient_check(&cfg, &[1, 2, 3, 4, 5]).expect("gradients")]
}

fn training_efficacy() -> Vec<CheckResult> {
    let report = oracle::training_efficacy(&EfficacyConfig::default(), |msg| eprintln!("  {msg}")).expect("training");
    report.checks()
}

fn token_accounting() -> Vec<CheckResult> {
    let mut models = oracle::greedy_fixtures(SEED).expect("fixtures");
    models.push(random_model(SEED + 1));
    models.iter().map(|m| oracle::token_accounting(m, 10, SEED).expect("decode")).collect()
}

fn flex_switching() -> Vec<CheckResult> {
    vec![oracle::flex_switching(&ModelConfig::default(), &CostProfile::default())]
}

fn config_fidelity() -> Vec<CheckResult> {
    vec![oracle::config_fidelity()]
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "step_identity", budget: Some(Duration::from_secs(5)), run: step_identity },
        Criterion {
            id: 2,
            name: "sequence_losslessness",
            budget: Some(Duration::from_secs(300)),
            run: sequence_losslessness,
        },
        Criterion { id: 3, name: "greedy_exactness", budget: Some(Duration::from_secs(60)), run: greedy_exactness },
        Criterion { id: 4, name: "isolation", budget: None, run: isolation },
        Criterion { id: 5, name: "kv_reuse", budget: None, run: kv_reuse },
        Criterion { id: 6, name: "gradients", budget: Some(Duration::from_secs(120)), run: gradients },
        Criterion { id: 7, name: "training_efficacy", budget: Some(Duration::from_secs(600)), run: training_efficacy },
        Criterion { id: 8, name: "token_accounting", budget: None, run: token_accounting },
        Criterion { id: 9, name: "flex_switching", budget: None, run: flex_switching },
        Criterion { id: 10, name: "config_fidelity", budget: None, run: config_fidelity },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let checks = (c.run)();
        let elapsed = start.elapsed();
        let in_budget = c.budget.is_none_or(|b| elapsed < b);
        let passed = in_budget && checks.iter().all(|r| r.passed);
        if !passed {
            failed += 1;
        }
        let budget = c.budget.map_or(String::new(), |b| format!(" budget={}s", b.as_secs()));
        println!(
            "{} criterion {:>2} {} time={:.1}s{budget}",
            if passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
        for r in &checks {
            println!("    {r}");
        }
    }
    println!("acceptance: {} failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
