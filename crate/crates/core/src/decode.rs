//! Beam search and greedy decoding.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Generated tokens, ending in EOS unless truncated at `max_len`.
    pub tokens: Vec<TokenId>,
    pub raw_logprob: f64,
    pub score: f64,
    pub finished: bool,
    /// Reached `max_len` without emitting EOS.
    pub truncated: bool,
}

impl BeamHypothesis {
    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            alpha: 0.8,
            max_len: 16,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::InvalidConfig("beam_size must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "length penalty alpha {} outside [0, 2]",
                self.alpha
            )));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidConfig("max_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Orders by score descending, then tokens lexicographically ascending.
fn rank(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

struct Live {
    tokens: Vec<TokenId>,
    raw: f64,
    state: Vec<f64>,
}

/// Beam search over raw log-probabilities; finished hypotheses are ranked by
/// `raw / length_penalty(len)` where `len` counts generated tokens including
/// EOS. Returns at most `beam_size` finished hypotheses, best first.
pub fn beam_search(
    model: &Seq2SeqModel,
    x: &[TokenId],
    beam_size: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>> {
    DecodeConfig {
        beam_size,
        alpha,
        max_len,
    }
    .validate()?;
    if max_len > model.config().max_output_len {
        return Err(Error::InvalidConfig(format!(
            "max_len {max_len} exceeds the model's maximum output length {}",
            model.config().max_output_len
        )));
    }
    let enc = model.encode(x)?;
    let vocab = model.vocab_size();
    let best_possible = |raw: f64| raw / length_penalty(max_len, alpha);

    let mut alive = vec![Live {
        tokens: Vec::new(),
        raw: 0.0,
        state: enc.initial_state().to_vec(),
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for step in 1..=max_len {
        let mut expansions: Vec<(usize, TokenId, f64)> = Vec::with_capacity(alive.len() * vocab);
        let mut next_states = Vec::with_capacity(alive.len());
        for (i, beam) in alive.iter().enumerate() {
            let prev = beam.tokens.last().copied().unwrap_or(BOS);
            let (state, logp) = model.decode_step(&enc, &beam.state, prev)?;
            for (tok, lp) in logp.iter().enumerate() {
                expansions.push((i, tok as TokenId, beam.raw + lp));
            }
            next_states.push(state);
        }
        let seq = |&(i, tok, _): &(usize, TokenId, f64)| {
            let mut s = alive[i].tokens.clone();
            s.push(tok);
            s
        };
        expansions.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(Ordering::Equal)
                .then_with(|| seq(a).cmp(&seq(b)))
        });

        let mut next = Vec::with_capacity(beam_size);
        for (r, e) in expansions.iter().enumerate() {
            if next.len() >= beam_size && r >= beam_size {
                break;
            }
            let (i, tok, raw) = *e;
            if tok == EOS {
                if r < beam_size {
                    let tokens = seq(e);
                    finished.push(BeamHypothesis {
                        score: raw / length_penalty(tokens.len(), alpha),
                        tokens,
                        raw_logprob: raw,
                        finished: true,
                        truncated: false,
                    });
                }
            } else if next.len() < beam_size {
                next.push(Live {
                    tokens: seq(e),
                    raw,
                    state: next_states[i].clone(),
                });
            }
        }

        if step == max_len {
            for b in next {
                finished.push(BeamHypothesis {
                    score: b.raw / length_penalty(b.tokens.len(), alpha),
                    tokens: b.tokens,
                    raw_logprob: b.raw,
                    finished: true,
                    truncated: true,
                });
            }
            break;
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        if finished.len() >= beam_size {
            finished.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
            finished.truncate(beam_size);
            let worst = finished[beam_size - 1].score;
            if alive.iter().all(|b| best_possible(b.raw) < worst) {
                break;
            }
        }
    }

    finished.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
    finished.truncate(beam_size);
    Ok(finished)
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(model: &Seq2SeqModel, x: &[TokenId], max_len: usize) -> Result<BeamHypothesis> {
    let enc = model.encode(x)?;
    let mut state = enc.initial_state().to_vec();
    let mut tokens = Vec::new();
    let mut raw = 0.0;
    let mut prev = BOS;
    while tokens.len() < max_len {
        let (s, logp) = model.decode_step(&enc, &state, prev)?;
        let (tok, lp) = logp
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        raw += lp;
        tokens.push(tok as TokenId);
        state = s;
        prev = tok as TokenId;
        if prev == EOS {
            break;
        }
    }
    let truncated = tokens.last() != Some(&EOS);
    Ok(BeamHypothesis {
        score: raw,
        tokens,
        raw_logprob: raw,
        finished: true,
        truncated,
    })
}

/// Top hypothesis of a beam search, or greedy decoding for `beam_size == 1`
/// with `alpha == 0`.
pub fn decode_best(model: &Seq2SeqModel, x: &[TokenId], config: &DecodeConfig) -> Result<BeamHypothesis> {
    let mut hyps = beam_search(model, x, config.beam_size, config.alpha, config.max_len)?;
    if hyps.is_empty() {
        return Err(Error::State("beam search returned no hypotheses".into()));
    }
    Ok(hyps.swap_remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
}

/// The decoded candidates of one training example, best penalized score
/// first and free of duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub example_id: u64,
    pub candidates: Vec<Candidate>,
}

/// Runs a width-`m` beam per example. Examples decode in parallel; output
/// order follows `examples`.
pub fn generate_candidates(
    model: &Seq2SeqModel,
    examples: &[Example],
    m: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<CandidateSet>> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 candidates per example to form pairs, got {m}"
        )));
    }
    examples
        .par_iter()
        .map(|ex| {
            let hyps = beam_search(model, &ex.input_tokens, m, alpha, max_len)?;
            let mut candidates: Vec<Candidate> = Vec::with_capacity(hyps.len());
            for h in hyps {
                if candidates.iter().all(|c| c.tokens != h.tokens) {
                    candidates.push(Candidate {
                        tokens: h.tokens,
                        logprob: h.raw_logprob,
                    });
                }
            }
            Ok(CandidateSet {
                example_id: ex.id,
                candidates,
            })
        })
        .collect()
}
