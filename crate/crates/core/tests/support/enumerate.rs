use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqcal_core::corpus::{TokenId, EOS};
use seqcal_core::decode::{beam_search, greedy_decode, length_penalty};
use seqcal_core::model::{ModelConfig, Seq2SeqModel};

/// A small random model with sharpened output weights so that sequences
/// rarely tie.
pub fn random_model(vocab: usize, seed: u64, gain: f64) -> Seq2SeqModel {
    let mut model = Seq2SeqModel::new(ModelConfig {
        vocab_size: vocab,
        embed_dim: 3,
        hidden_dim: 4,
        attention_dim: 3,
        attention: seed % 3 != 0,
        max_input_len: 6,
        max_output_len: 8,
        init_seed: seed,
    })
    .unwrap();
    let store = model.params_mut();
    for i in 0..store.len() {
        for v in store.get_mut(i).data_mut() {
            *v *= gain;
        }
    }
    model
}

pub fn random_input(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<TokenId> {
    let n = rng.gen_range(1..=5);
    (0..n).map(|_| rng.gen_range(3..vocab as TokenId)).collect()
}

/// Every output a decoder can produce: sequences ending at their first EOS
/// within `max_len` tokens, and EOS-free sequences of exactly `max_len`.
pub fn enumerate(vocab: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for tok in 0..vocab as TokenId {
                let mut s = prefix.clone();
                s.push(tok);
                if tok == EOS {
                    out.push(s);
                } else if len == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

pub fn brute_force_best(model: &Seq2SeqModel, x: &[TokenId], max_len: usize, alpha: f64) -> (Vec<TokenId>, f64) {
    enumerate(model.vocab_size(), max_len)
        .into_iter()
        .map(|y| {
            let score = model.sequence_log_prob(x, &y).unwrap() / length_penalty(y.len(), alpha);
            (y, score)
        })
        .fold(None::<(Vec<TokenId>, f64)>, |best, (y, s)| match best {
            Some((by, bs)) if bs > s || (bs == s && by < y) => Some((by, bs)),
            _ => Some((y, s)),
        })
        .unwrap()
}

/// Exhaustive-width beam search against full enumeration over every vocabulary
/// up to 4 and output length up to 4.
pub fn check_exhaustive_beam_equals_enumeration() {
    let mut checked = 0;
    for vocab in [3, 4] {
        for max_len in 2..=4 {
            for alpha in [0.0, 0.8] {
                for seed in 0..8u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + max_len as u64);
                    let model = random_model(vocab, seed, 2.5);
                    let x = random_input(&mut rng, vocab.max(4));
                    let x: Vec<TokenId> = x.into_iter().map(|t| t % vocab as TokenId).collect();
                    let width = enumerate(vocab, max_len).len();
                    let hyps = beam_search(&model, &x, width, alpha, max_len).unwrap();
                    let (tokens, score) = brute_force_best(&model, &x, max_len, alpha);
                    assert_eq!(hyps[0].tokens, tokens, "vocab {vocab} max_len {max_len} alpha {alpha} seed {seed}");
                    assert!((hyps[0].score - score).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 96);
}

pub fn check_width_one_equals_greedy_on_100_models() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = rng.gen_range(4..12);
        let model = random_model(vocab, seed, rng.gen_range(0.5..3.0));
        let x = random_input(&mut rng, vocab);
        let max_len = rng.gen_range(2..=8);
        let greedy = greedy_decode(&model, &x, max_len).unwrap();
        for alpha in [0.0, 0.8] {
            let beam = beam_search(&model, &x, 1, alpha, max_len).unwrap();
            assert_eq!(beam.len(), 1);
            assert_eq!(beam[0].tokens, greedy.tokens, "seed {seed}");
            assert!((beam[0].raw_logprob - greedy.raw_logprob).abs() < 1e-12);
        }
    }
}
