use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, TokenKind, Vocab, BOS, EOS, PAD, SEP};
use super::Fact;
use crate::error::{Error, Result};

/// Probability-like consistency score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConsistencyScore(f64);

impl ConsistencyScore {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::ContractViolation(format!(
                "consistency score {value} outside [0, 1]"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Splits decoder output into clauses on the separator.
///
/// Decoding stops at the first EOS; BOS and PAD are dropped. A trailing empty
/// segment (after the final separator) is not a clause, while empty segments
/// between two separators are, and count as malformed.
pub fn split_clauses(tokens: &[TokenId]) -> Vec<Vec<TokenId>> {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    let body: Vec<TokenId> = tokens[..end]
        .iter()
        .copied()
        .filter(|&t| t != BOS && t != PAD)
        .collect();
    if body.is_empty() {
        return Vec::new();
    }
    let mut clauses: Vec<Vec<TokenId>> = body.split(|&t| t == SEP).map(<[_]>::to_vec).collect();
    if body.last() == Some(&SEP) {
        clauses.pop();
    }
    clauses
}

fn clause_fact(vocab: &Vocab, clause: &[TokenId]) -> Option<Fact> {
    match clause {
        [e, a, v] => match (vocab.kind(*e), vocab.kind(*a), vocab.kind(*v)) {
            (TokenKind::Entity(e), TokenKind::Attribute(a), TokenKind::Value(v)) => {
                Some(Fact::new(e, a, v))
            }
            _ => None,
        },
        _ => None,
    }
}

/// Fraction of candidate clauses that are well-formed `E A V` triples stated
/// by the document. Total over arbitrary token sequences; no clauses scores 0.
pub fn oracle_consistency(vocab: &Vocab, document: &[Fact], candidate: &[TokenId]) -> ConsistencyScore {
    let clauses = split_clauses(candidate);
    if clauses.is_empty() {
        return ConsistencyScore(0.0);
    }
    let supported = clauses
        .iter()
        .filter(|c| clause_fact(vocab, c).map_or(false, |f| document.contains(&f)))
        .count();
    ConsistencyScore(supported as f64 / clauses.len() as f64)
}
