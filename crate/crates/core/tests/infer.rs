use exitpipe::infer::{
    compare_modes, generate_kv_recompute, generate_pipeline, greedy_reference, CompareOptions, GenerationTrace, KvRecompute,
};
use exitpipe::model::{EarlyExitModel, ExitSpec, HeadKind, ModelConfig};
use exitpipe::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random model whose output embeddings are scaled up so exit confidences
/// spread over (0, 1) and some tokens exit early.
fn peaky_model(tie: bool, seed: u64) -> EarlyExitModel {
    let cfg = ModelConfig {
        num_layers: 4,
        hidden_dim: 8,
        num_heads: 2,
        vocab_size: 7,
        max_seq_len: 24,
        exits: vec![
            ExitSpec::new(0, HeadKind::Minimalistic, 0.1),
            ExitSpec::new(1, HeadKind::LayerEmbed, 0.2),
            ExitSpec::new(2, HeadKind::MlpEmbed, 0.3),
            ExitSpec::new(3, HeadKind::NormEmbed, 0.4),
        ],
        tie_embeddings: tie,
    };
    let mut m = EarlyExitModel::build(cfg, seed).unwrap();
    for (name, t) in m.params_mut().iter_mut() {
        if name.ends_with(".out") || name == "embed.tokens" {
            t.scale_in_place(60.0);
        }
    }
    m
}

fn prompts(n: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=5);
            (0..len).map(|_| rng.random_range(0..vocab)).collect()
        })
        .collect()
}

fn both(model: &EarlyExitModel, stages: usize, prompt: &[usize], threshold: f64, n: usize, max_deferred: usize) -> (GenerationTrace, GenerationTrace) {
    let part = model.partition(stages).unwrap();
    let a = generate_pipeline(model, &part, prompt, threshold, n, &[]).unwrap();
    let b = generate_kv_recompute(model, prompt, threshold, n, max_deferred, &[]).unwrap();
    assert!(a.kv_complete() && b.kv_complete(), "KV incomplete");
    assert_eq!(a.positions, b.positions);
    assert_eq!(a.kv, b.kv, "caches differ");
    (a.trace, b.trace)
}

#[test]
fn threshold_one_is_plain_greedy_decoding() {
    for tie in [false, true] {
        let model = peaky_model(tie, 1);
        for prompt in prompts(6, 7, 2) {
            let want = greedy_reference(&model, &prompt, 10).unwrap();
            for p in [1, 2, 4] {
                let (a, b) = both(&model, p, &prompt, 1.0, 10, 4);
                assert_eq!(a.token_ids(), want);
                assert_eq!(b.token_ids(), want);
                assert!(a.tokens.iter().all(|t| t.exit == 4 && t.confidences.len() == 5));
                assert!(a.tokens.iter().all(|t| t.latency == p as f64));
            }
        }
    }
}

#[test]
fn recompute_at_threshold_one_never_defers() {
    let model = peaky_model(false, 3);
    let mut run = KvRecompute::new(&model, 1.0, 2).unwrap();
    run.prefill(&[1, 2]).unwrap();
    let mut t = 3;
    for _ in 0..8 {
        let s = run.step(t).unwrap();
        assert!(run.deferred().is_empty() && !s.forced && s.depth == 4);
        assert!(run.cache().is_complete(run.positions()));
        t = s.token;
    }
}

#[test]
fn modes_agree_on_tokens_confidences_and_caches() {
    let mut early = 0;
    for (seed, tie) in [(5, false), (6, true), (7, false)] {
        let model = peaky_model(tie, seed);
        for prompt in prompts(8, 7, seed) {
            for threshold in [1.0, 0.95, 0.9, 0.8, 0.6] {
                for p in [2, 4] {
                    let (a, b) = both(&model, p, &prompt, threshold, 14, 3);
                    assert_eq!(a.first_divergence(&b), None);
                    for (x, y) in a.tokens.iter().zip(&b.tokens) {
                        assert_eq!(x.confidences, y.confidences);
                        assert_eq!((x.exit, x.exit_layer), (y.exit, y.exit_layer));
                    }
                    early += a.tokens.iter().filter(|t| t.exit < 4).count();
                }
            }
        }
    }
    assert!(early > 50, "too few early exits ({early}) to exercise the fill paths");
}

#[test]
fn deferred_cap_does_not_change_tokens() {
    let model = peaky_model(false, 8);
    for prompt in prompts(5, 7, 9) {
        let base = generate_kv_recompute(&model, &prompt, 0.7, 16, 1, &[]).unwrap();
        for cap in [2, 3, 4, 50] {
            let g = generate_kv_recompute(&model, &prompt, 0.7, 16, cap, &[]).unwrap();
            assert_eq!(g.trace.token_ids(), base.trace.token_ids());
            assert_eq!(g.kv, base.kv);
        }
    }
}

#[test]
fn cap_of_one_fills_on_the_next_step() {
    let model = peaky_model(false, 10);
    let mut forced_steps = 0;
    for prompt in prompts(6, 7, 11) {
        let mut run = KvRecompute::new(&model, 0.6, 1).unwrap();
        run.prefill(&prompt[..prompt.len() - 1]).unwrap();
        let mut t = *prompt.last().unwrap();
        let mut pending = false;
        for _ in 0..12 {
            let s = run.step(t).unwrap();
            assert_eq!(s.forced, pending);
            forced_steps += usize::from(s.forced);
            // everything before the newest position is complete
            assert!(run.cache().is_complete(run.positions() - 1));
            pending = !run.deferred().is_empty();
            assert!(run.deferred().len() <= 1);
            t = s.token;
        }
    }
    assert!(forced_steps > 0);
}

#[test]
fn lower_threshold_never_exits_later_on_a_shared_prefix() {
    let model = peaky_model(false, 12);
    for prompt in prompts(10, 7, 13) {
        let traces: Vec<GenerationTrace> = [1.0, 0.95, 0.9, 0.8, 0.6]
            .iter()
            .map(|&th| generate_kv_recompute(&model, &prompt, th, 12, 4, &[]).unwrap().trace)
            .collect();
        for w in traces.windows(2) {
            let shared = w[0].first_divergence(&w[1]).unwrap_or(w[0].tokens.len());
            // tokens up to and including the first divergence see equal prefixes
            for i in 0..(shared + 1).min(w[0].tokens.len()) {
                assert!(w[1].tokens[i].exit_layer <= w[0].tokens[i].exit_layer);
            }
        }
    }
}

#[test]
fn pipeline_speedup_respects_stage_count() {
    let model = peaky_model(false, 14);
    let opts = CompareOptions { stages: 4, max_new_tokens: 12, max_deferred: 4, stage_times: vec![] };
    let report = compare_modes(&model, &prompts(20, 7, 15), &[1.0, 0.95, 0.9, 0.8], &opts).unwrap();
    assert_eq!(report.rows[0].pipeline_speedup, 1.0);
    assert_eq!(report.rows[0].recompute_speedup, 1.0);
    assert_eq!(report.rows[0].early_exits, 0);
    for row in &report.rows {
        assert!(row.max_token_speedup <= 4.0 + 1e-12);
        assert!(row.pipeline_speedup >= 1.0);
    }
    assert!(report.rows[3].early_exits > 0);
}

#[test]
fn generation_is_deterministic() {
    let model = peaky_model(true, 16);
    let part = model.partition(2).unwrap();
    let a = generate_pipeline(&model, &part, &[1, 2, 3], 0.8, 10, &[1.0, 2.0]).unwrap();
    let b = generate_pipeline(&model, &part, &[1, 2, 3], 0.8, 10, &[1.0, 2.0]).unwrap();
    assert_eq!(a.trace, GenerationTrace { wall_clock: a.trace.wall_clock, ..b.trace });
    assert_eq!(a.kv, b.kv);
}

#[test]
fn bad_requests_are_rejected() {
    let model = peaky_model(false, 17);
    let part = model.partition(2).unwrap();
    let overflow = generate_pipeline(&model, &part, &[1; 20], 0.9, 6, &[]);
    assert!(matches!(overflow, Err(Error::ContextOverflow { needed: 25, max: 24 })));
    assert!(matches!(generate_kv_recompute(&model, &[1; 20], 0.9, 6, 4, &[]), Err(Error::ContextOverflow { .. })));
    assert!(generate_pipeline(&model, &part, &[1; 20], 0.9, 5, &[]).is_ok());
    assert!(generate_pipeline(&model, &part, &[], 0.9, 5, &[]).is_err());
    assert!(generate_pipeline(&model, &part, &[9], 0.9, 5, &[]).is_err());
    assert!(generate_pipeline(&model, &part, &[1], 0.0, 5, &[]).is_err());
    assert!(generate_pipeline(&model, &part, &[1], 0.9, 5, &[1.0]).is_err());
    assert!(generate_kv_recompute(&model, &[1], 0.9, 5, 0, &[]).is_err());
    let other = peaky_model(true, 17).partition(2).unwrap();
    assert!(generate_pipeline(&model, &other, &[1], 0.9, 5, &[]).is_err());
    let empty = generate_pipeline(&model, &part, &[1, 2], 0.9, 0, &[]).unwrap();
    assert!(empty.trace.tokens.is_empty() && empty.kv_complete());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn modes_agree_for_random_prompts(
        prompt in prop::collection::vec(0usize..7, 1..6),
        threshold in 0.3f64..1.0,
        seed in 0u64..4,
        cap in 1usize..5,
    ) {
        let model = peaky_model(seed % 2 == 0, seed);
        let (a, b) = both(&model, 2, &prompt, threshold, 10, cap);
        prop_assert_eq!(a.token_ids(), b.token_ids());
    }
}
