use maskdraft::corpus::Corpus;
use maskdraft::engine::{autoregressive, select_branches, DecodeConfig, DraftBlock, Engine};
use maskdraft::model::checkpoint;
use maskdraft::sampler::{committed_marginal_identity, Categorical};
use maskdraft::scheduler::{estimate_step_cost, forward_token_count, CostProfile};
use maskdraft::{Mode, Model, ModelConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn block(confidence: Vec<f64>) -> DraftBlock {
    let n = confidence.len();
    DraftBlock {
        tokens: vec![0; n],
        logits: vec![vec![0.0]; n],
        draft_probs: confidence.clone(),
        dists: vec![Categorical::one_hot(1, 0); n],
        confidence,
        origin_branch: 0,
        calibrated: false,
    }
}

fn dist(weights: &[f64]) -> Categorical {
    let s: f64 = weights.iter().sum();
    Categorical::new(weights.iter().map(|w| w / s).collect()).unwrap()
}

fn tiny_model(seed: u64, slots: usize) -> Model {
    Model::random(ModelConfig::tiny(12, 3, 1, slots), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kept_branches_form_a_prefix(conf in prop::collection::vec(0.0f64..=1.0, 1..8), theta in 0.0f64..=1.0) {
        let kept = select_branches(&block(conf.clone()), theta);
        prop_assert_eq!(kept[0], 0);
        prop_assert!(kept.windows(2).all(|w| w[1] == w[0] + 1));
        prop_assert!(kept.len() <= conf.len() + 1);
        let tighter = select_branches(&block(conf), (theta + 0.1).min(1.0));
        prop_assert!(tighter.len() <= kept.len());
    }

    #[test]
    fn verification_preserves_the_target(
        p in prop::collection::vec(0.001f64..1.0, 2..20),
        q in prop::collection::vec(0.001f64..1.0, 2..20),
    ) {
        let n = p.len().min(q.len());
        let err = committed_marginal_identity(&dist(&p[..n]), &dist(&q[..n]));
        prop_assert!(err < 1e-12, "err = {}", err);
    }

    #[test]
    fn step_cost_is_monotone_in_batch(batch in 1usize..64, slots in 2usize..10) {
        let cfg = ModelConfig { block_slots: slots, ..ModelConfig::default() };
        let profile = CostProfile::default();
        let all: Vec<usize> = (0..slots).collect();
        for mode in [Mode::Parallel, Mode::Sequential] {
            let f = forward_token_count(mode, slots, &all);
            prop_assert!(estimate_step_cost(&f, batch, &cfg, &profile) <= estimate_step_cost(&f, batch + 1, &cfg, &profile));
        }
    }

    #[test]
    fn parallel_rows_follow_the_closed_form(slots in 2usize..10, kept in 1usize..10) {
        let kept: Vec<usize> = (0..kept.min(slots)).collect();
        let rows = forward_token_count(Mode::Parallel, slots, &kept)[0].rows();
        prop_assert_eq!(rows, 1 + (slots - 1) + kept.len() * slots);
    }

    #[test]
    fn corpus_text_round_trips(seqs in prop::collection::vec(prop::collection::vec(0usize..1000, 1..12), 0..10)) {
        let corpus = Corpus { sequences: seqs };
        prop_assert_eq!(Corpus::parse(&corpus.to_text(Some("x"))).unwrap(), corpus);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn greedy_decoding_matches_autoregressive(
        seed in 0u64..1000,
        prompt in prop::collection::vec(0usize..12, 1..6),
        theta in prop::sample::select(vec![0.0, 0.05, 0.5, 1.0]),
        slots in 2usize..6,
    ) {
        let model = tiny_model(seed, slots);
        let cfg = DecodeConfig { theta, max_tokens: 14, ..DecodeConfig::default() };
        let reference = autoregressive(&model, &prompt, &cfg, 0).unwrap();
        let engine = Engine::new(&model, cfg).unwrap();
        for mode in [Mode::Parallel, Mode::Sequential] {
            prop_assert_eq!(&engine.decode(&prompt, 0, mode).unwrap().response, &reference);
        }
    }

    #[test]
    fn sampled_decoding_is_reproducible(seed in 0u64..1000, stream in 0u64..4) {
        let model = tiny_model(seed, 3);
        let cfg = DecodeConfig { temperature: 1.0, max_tokens: 10, seed, ..DecodeConfig::default() };
        let engine = Engine::new(&model, cfg).unwrap();
        for mode in [Mode::Parallel, Mode::Sequential] {
            let a = engine.decode(&[1, 2], stream, mode).unwrap();
            let b = engine.decode(&[1, 2], stream, mode).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in 0u64..1000) {
        let model = tiny_model(seed, 4);
        let bytes = checkpoint::encode(&model).unwrap();
        let back: Model = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
        prop_assert_eq!(back, model);
    }
}
