use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqcal_core::calibrate::{
    annotate, calibration_run, combined_loss, kl_reg_graph, kl_reg_loss, rank_loss, rank_loss_len, sample_pairs,
    AnnotatedCandidate, AnnotatedCandidateSet, CalibConfig, CalibItem, CandidatePair, KlDirection,
};
use seqcal_core::corpus::{gen_corpus, oracle_consistency, Corpus, CorpusConfig, Example, TokenId, EOS};
use seqcal_core::decode::{decode_best, generate_candidates, DecodeConfig};
use seqcal_core::diffmath::{Graph, Tensor};
use seqcal_core::model::{with_eos, ModelConfig, Seq2SeqModel};
use seqcal_core::train::{finetune, FinetuneConfig};

fn scored(scores: &[f64]) -> AnnotatedCandidateSet {
    AnnotatedCandidateSet {
        example_id: 0,
        candidates: scores
            .iter()
            .enumerate()
            .map(|(i, &score)| AnnotatedCandidate {
                tokens: vec![5 + i as TokenId, EOS],
                logprob: 0.0,
                score,
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn length_form_reduces_to_plain_form(lp in -50.0f64..0.0, ln in -50.0f64..0.0, beta in 0.0f64..5.0) {
        prop_assert_eq!(rank_loss_len(lp, ln, 1.0, 1.0, 1.0, beta), rank_loss(lp, ln, beta));
    }

    #[test]
    fn hinge_boundary_and_monotonicity(lp in -50.0f64..0.0, ln in -50.0f64..0.0, beta in 0.0f64..5.0, d in 0.0f64..10.0) {
        let l = rank_loss(lp, ln, beta);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, lp - ln >= beta);
        prop_assert!(rank_loss(lp + d, ln, beta) <= l);
        prop_assert!(rank_loss(lp, ln + d, beta) >= l);
        prop_assert!(rank_loss(lp, ln, beta + d) >= l);
        // raising the positive log-likelihood by the loss itself deactivates the hinge
        prop_assert_eq!(rank_loss(lp + l + 1e-12, ln, beta), 0.0);
    }

    #[test]
    fn hinge_is_convex_along_segments(
        (a1, b1) in (-20.0f64..0.0, -20.0f64..0.0),
        (a2, b2) in (-20.0f64..0.0, -20.0f64..0.0),
        t in 0.0f64..1.0,
        beta in 0.0f64..3.0,
    ) {
        let mid = rank_loss(t * a1 + (1.0 - t) * a2, t * b1 + (1.0 - t) * b2, beta);
        prop_assert!(mid <= t * rank_loss(a1, b1, beta) + (1.0 - t) * rank_loss(a2, b2, beta) + 1e-12);
    }

    #[test]
    fn tiny_length_weight_leaves_only_the_margin(lp in -50.0f64..0.0, ln in -50.0f64..0.0, fp in -1.0f64..1.0, fnn in -1.0f64..1.0, beta in 0.01f64..5.0) {
        prop_assert!((rank_loss_len(lp, ln, fp, fnn, 1e-12, beta) - beta).abs() < 1e-9);
    }

    #[test]
    fn pair_orientation_is_derived_from_scores(s1 in 0.0f64..1.0, s2 in 0.0f64..1.0, seed in any::<u64>()) {
        prop_assume!(s1 != s2);
        for scores in [[s1, s2], [s2, s1]] {
            let pairs = sample_pairs(&scored(&scores), 3, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(pairs.len(), 3);
            for p in pairs {
                prop_assert!(p.score_pos > p.score_neg);
                prop_assert_eq!(scores[p.pos], p.score_pos);
            }
        }
    }
}

#[test]
fn pair_frequencies_are_uniform() {
    // m = 3 with distinct scores: three possible pairs
    let set = scored(&[0.2, 0.9, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 90_000;
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for p in sample_pairs(&set, draws, &mut rng) {
        *counts.entry((p.pos, p.neg)).or_default() += 1;
    }
    assert_eq!(counts.len(), 3);
    for (pair, c) in &counts {
        assert!([(1, 0), (2, 0), (1, 2)].contains(pair));
        let freq = *c as f64 / draws as f64;
        assert!((freq - 1.0 / 3.0).abs() < 0.01, "{pair:?}: {freq}");
    }
    // ties are skipped: {0.0, 0.5, 0.5, 1.0} has five eligible pairs
    let set = scored(&[0.0, 0.5, 0.5, 1.0]);
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for p in sample_pairs(&set, draws, &mut rng) {
        *counts.entry((p.pos, p.neg)).or_default() += 1;
    }
    assert_eq!(counts.len(), 5);
    assert!(!counts.contains_key(&(1, 2)) && !counts.contains_key(&(2, 1)));
    for c in counts.values() {
        assert!((*c as f64 / draws as f64 - 0.2).abs() < 0.01);
    }
}

#[test]
fn kl_of_one_hot_against_uniform_is_log_four() {
    let tiny = 1e-200f64;
    let reference = Tensor::matrix(
        2,
        4,
        vec![(1.0 - 3.0 * tiny).ln(), tiny.ln(), tiny.ln(), tiny.ln(), tiny.ln(), tiny.ln(), 0.0, tiny.ln()],
    )
    .unwrap();
    let mut g = Graph::new();
    let cur = g.variable(Tensor::filled(2, 4, 0.25f64.ln()));
    let kl = kl_reg_graph(&mut g, cur, &reference, KlDirection::RefToCurrent).unwrap();
    assert!((g.value(kl).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    let mismatched = Tensor::filled(3, 4, 0.25f64.ln());
    let mut g = Graph::new();
    let cur = g.variable(Tensor::filled(2, 4, 0.25f64.ln()));
    assert_eq!(
        kl_reg_graph(&mut g, cur, &mismatched, KlDirection::RefToCurrent).unwrap_err().kind(),
        "invalid-config"
    );
}

fn tiny_model(vocab: usize, seed: u64) -> Seq2SeqModel {
    Seq2SeqModel::new(ModelConfig {
        vocab_size: vocab,
        embed_dim: 4,
        hidden_dim: 5,
        attention_dim: 3,
        attention: true,
        max_input_len: 8,
        max_output_len: 8,
        init_seed: seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_zero_at_the_reference_and_non_negative(
        seed in any::<u64>(),
        x in prop::collection::vec(3u32..9, 1..8),
        y in prop::collection::vec(3u32..9, 0..6),
    ) {
        let y = with_eos(&y);
        let a = tiny_model(9, seed);
        let b = tiny_model(9, seed.wrapping_add(1));
        for dir in [KlDirection::RefToCurrent, KlDirection::CurrentToRef] {
            prop_assert_eq!(kl_reg_loss(&a, &a, &x, &y, dir).unwrap(), 0.0);
            prop_assert!(kl_reg_loss(&a, &b, &x, &y, dir).unwrap() >= 0.0);
        }
        let other_vocab = tiny_model(10, seed);
        prop_assert_eq!(
            kl_reg_loss(&a, &other_vocab, &x, &y, KlDirection::RefToCurrent).unwrap_err().kind(),
            "invalid-config"
        );
    }
}

fn example(id: u64, x: Vec<TokenId>, reference: Vec<TokenId>) -> Example {
    Example {
        id,
        input_tokens: x,
        reference_tokens: reference,
        document_facts: Vec::new(),
        divergent: false,
    }
}

#[test]
fn disabled_length_term_equals_unit_length_ratios() {
    // every candidate has the reference's content length, so f = 1
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let model = tiny_model(9, seed);
        let reference_model = tiny_model(9, seed + 100);
        let n = rng.gen_range(1..5);
        let ex = example(0, (0..4).map(|_| rng.gen_range(3..9)).collect(), (0..n).map(|_| rng.gen_range(3..9)).collect());
        let set = AnnotatedCandidateSet {
            example_id: 0,
            candidates: (0..3)
                .map(|i| AnnotatedCandidate {
                    tokens: with_eos(&(0..n).map(|_| rng.gen_range(3..9)).collect::<Vec<_>>()),
                    logprob: 0.0,
                    score: i as f64 / 2.0,
                })
                .collect(),
        };
        let pairs = vec![
            CandidatePair { pos: 2, neg: 0, score_pos: 1.0, score_neg: 0.0 },
            CandidatePair { pos: 1, neg: 0, score_pos: 0.5, score_neg: 0.0 },
        ];
        let items = [CalibItem { example: &ex, set: &set, pairs }];
        let plain = CalibConfig { beta: rng.gen_range(0.0..3.0), ..CalibConfig::default() };
        let with_len = CalibConfig { use_f_len: true, alpha: 1.0, ..plain.clone() };
        let (a, ga) = combined_loss(&model, &reference_model, &items, &plain).unwrap();
        let (b, gb) = combined_loss(&model, &reference_model, &items, &with_len).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }
}

#[test]
fn no_pairs_and_no_regularizer_give_zero_loss() {
    let model = tiny_model(9, 1);
    let ex = example(0, vec![3, 4], vec![5, 6]);
    let set = scored(&[0.5, 0.5]);
    let items = [CalibItem { example: &ex, set: &set, pairs: Vec::new() }];
    let config = CalibConfig { lambda: 0.0, ..CalibConfig::default() };
    let (entry, grads) = combined_loss(&model, &model, &items, &config).unwrap();
    assert_eq!(entry.total, 0.0);
    assert!(grads.iter().flatten().all(|&g| g == 0.0));
}

/// A briefly fine-tuned model with annotated candidates.
struct Fixture {
    corpus: Corpus,
    ft: Seq2SeqModel,
    annotated: Vec<AnnotatedCandidateSet>,
}

fn fixture() -> Fixture {
    let corpus = gen_corpus(
        &CorpusConfig {
            n_train: 200,
            n_val: 60,
            n_test: 20,
            ..CorpusConfig::default()
        },
        31,
    )
    .unwrap();
    let init = Seq2SeqModel::new(ModelConfig {
        vocab_size: corpus.vocab.size(),
        init_seed: 31,
        ..ModelConfig::default()
    })
    .unwrap();
    let config = FinetuneConfig {
        steps: 300,
        eval_every: 100,
        eval_examples: 30,
        ..FinetuneConfig::default()
    };
    let ft = finetune(init, &corpus.train, &corpus.val, &config, 31).unwrap().model;
    let sets = generate_candidates(&ft, &corpus.train, 4, 0.8, 16).unwrap();
    let annotated = annotate(&sets, &corpus.train, |d, t| oracle_consistency(&corpus.vocab, d, t).value()).unwrap();
    Fixture { corpus, ft, annotated }
}

fn short(config: CalibConfig) -> CalibConfig {
    CalibConfig {
        steps: 40,
        batch_size: 8,
        ..config
    }
}

#[test]
fn calibration_run_behaviour() {
    let f = fixture();
    let run = |c: CalibConfig, seed| calibration_run(&f.ft, &f.corpus.train, &f.annotated, &c, seed).unwrap();

    // zero objective: nothing moves
    let idle = run(short(CalibConfig { gamma: 0.0, lambda: 0.0, ..CalibConfig::default() }), 1);
    assert_eq!(idle.model.params().iter().map(|p| &p.value).collect::<Vec<_>>(),
               f.ft.params().iter().map(|p| &p.value).collect::<Vec<_>>());
    assert!(idle.log.iter().all(|e| e.total == 0.0));

    // no steps: the reference comes back
    let none = run(CalibConfig { steps: 0, ..CalibConfig::default() }, 1);
    assert_eq!(none.checkpoints.len(), 1);
    assert_eq!(none.model.params().iter().map(|p| &p.value).collect::<Vec<_>>(),
               f.ft.params().iter().map(|p| &p.value).collect::<Vec<_>>());

    // determinism and a finite log
    let a = run(short(CalibConfig { checkpoint_every: 10, ..CalibConfig::default() }), 7);
    let b = run(short(CalibConfig { checkpoint_every: 10, ..CalibConfig::default() }), 7);
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 40);
    assert!(a.log.iter().all(|e| e.total.is_finite() && e.l_cal >= 0.0 && e.l_reg >= 0.0));
    assert_eq!(a.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![10, 20, 30, 40]);

    // frozen parameters stay put, unknown names are rejected
    let frozen = run(short(CalibConfig { frozen: vec!["embedding".into()], ..CalibConfig::default() }), 7);
    assert_eq!(frozen.model.params().by_name("embedding"), f.ft.params().by_name("embedding"));
    assert_ne!(frozen.model.params().by_name("output.weight"), f.ft.params().by_name("output.weight"));
    let err = calibration_run(
        &f.ft,
        &f.corpus.train,
        &f.annotated,
        &CalibConfig { frozen: vec!["nope".into()], ..CalibConfig::default() },
        7,
    )
    .unwrap_err();
    assert_eq!(err.kind(), "invalid-config");

    // a huge regularizer keeps the model closer to the reference than none
    let distance = |m: &Seq2SeqModel| -> f64 {
        m.params()
            .iter()
            .zip(f.ft.params().iter())
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    };
    let pinned = run(short(CalibConfig { lambda: 1e6, ..CalibConfig::default() }), 3);
    let free = run(short(CalibConfig { lambda: 0.0, ..CalibConfig::default() }), 3);
    assert!(distance(&pinned.model) < distance(&free.model));
    let greedy = DecodeConfig { beam_size: 1, alpha: 0.0, max_len: 16 };
    let unchanged = |m: &Seq2SeqModel| {
        f.corpus
            .val
            .iter()
            .filter(|e| {
                decode_best(m, &e.input_tokens, &greedy).unwrap().tokens
                    == decode_best(&f.ft, &e.input_tokens, &greedy).unwrap().tokens
            })
            .count()
    };
    assert!(unchanged(&pinned.model) > unchanged(&free.model));
}

#[test]
fn candidate_sets_respect_the_width_and_rescoring() {
    let f = fixture();
    for set in &f.annotated {
        assert!(set.candidates.len() <= 4);
        let ex = f.corpus.train.iter().find(|e| e.id == set.example_id).unwrap();
        for c in &set.candidates {
            let fresh = f.ft.sequence_log_prob(&ex.input_tokens, &c.tokens).unwrap();
            assert!((fresh - c.logprob).abs() < 1e-9);
        }
    }
}
