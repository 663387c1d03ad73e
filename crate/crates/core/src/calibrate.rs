//! Consistency annotation, pair sampling and the calibration objective.
//!
//! For one example with sampled pairs `P` the objective is
//!
//! ```text
//! γ · mean_{(+,-)∈P} max(0, β − α·f⁺·log P(ŷ⁺|x) + α·f⁻·log P(ŷ⁻|x))
//!   + λ · KL-regularizer(θ, θ_ft; x, ȳ)
//!   + μ · per-token NLL(ȳ)
//! ```
//!
//! with `f ≡ 1, α = 1` when the length ratio is disabled. Batch losses are
//! the mean over examples.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Fact, TokenId, BOS, EOS, PAD};
use crate::decode::CandidateSet;
use crate::diffmath::{self, Graph, OptimizerConfig, Tensor, UpdateRule, Var};
use crate::error::{Error, Result};
use crate::model::{with_eos, RngState, Seq2SeqModel};
use crate::seeding::rng_for;
use crate::train::{abort, accumulate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedCandidate {
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedCandidateSet {
    pub example_id: u64,
    pub candidates: Vec<AnnotatedCandidate>,
}

/// Scores every candidate against its example's document facts.
pub fn annotate<F>(sets: &[CandidateSet], examples: &[Example], scorer: F) -> Result<Vec<AnnotatedCandidateSet>>
where
    F: Fn(&[Fact], &[TokenId]) -> f64 + Sync,
{
    let by_id: HashMap<u64, &Example> = examples.iter().map(|e| (e.id, e)).collect();
    sets.par_iter()
        .map(|set| {
            let ex = by_id.get(&set.example_id).ok_or_else(|| {
                Error::InvalidInput(format!("candidate set for unknown example {}", set.example_id))
            })?;
            let candidates = set
                .candidates
                .iter()
                .map(|c| {
                    let score = scorer(&ex.document_facts, &c.tokens);
                    if !(0.0..=1.0).contains(&score) {
                        return Err(Error::ContractViolation(format!(
                            "scorer returned {score} for example {}",
                            set.example_id
                        )));
                    }
                    Ok(AnnotatedCandidate {
                        tokens: c.tokens.clone(),
                        logprob: c.logprob,
                        score,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(AnnotatedCandidateSet {
                example_id: set.example_id,
                candidates,
            })
        })
        .collect()
}

/// Indices into a candidate list with `score_pos > score_neg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidatePair {
    pub pos: usize,
    pub neg: usize,
    pub score_pos: f64,
    pub score_neg: f64,
}

/// Draws `s` pairs uniformly, with replacement, from the unordered pairs whose
/// scores differ. Returns nothing when every score ties.
pub fn sample_pairs(set: &AnnotatedCandidateSet, s: usize, rng: &mut ChaCha8Rng) -> Vec<CandidatePair> {
    let c = &set.candidates;
    let mut eligible = Vec::new();
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            if c[i].score != c[j].score {
                eligible.push((i, j));
            }
        }
    }
    if eligible.is_empty() {
        return Vec::new();
    }
    (0..s)
        .map(|_| {
            let (i, j) = eligible[rng.gen_range(0..eligible.len())];
            let (pos, neg) = if c[i].score > c[j].score { (i, j) } else { (j, i) };
            CandidatePair {
                pos,
                neg,
                score_pos: c[pos].score,
                score_neg: c[neg].score,
            }
        })
        .collect()
}

/// `max(0, β − logp_pos + logp_neg)`.
pub fn rank_loss(logp_pos: f64, logp_neg: f64, beta: f64) -> f64 {
    (beta - logp_pos + logp_neg).max(0.0)
}

/// `max(0, β − α·f_pos·logp_pos + α·f_neg·logp_neg)`.
pub fn rank_loss_len(logp_pos: f64, logp_neg: f64, f_pos: f64, f_neg: f64, alpha: f64, beta: f64) -> f64 {
    (beta - alpha * f_pos * logp_pos + alpha * f_neg * logp_neg).max(0.0)
}

/// Hinge on graph nodes; `scales = Some((α·f_pos, α·f_neg))` gives the
/// length-weighted form.
pub fn rank_loss_graph(g: &mut Graph, logp_pos: Var, logp_neg: Var, beta: f64, scales: Option<(f64, f64)>) -> Result<Var> {
    let (pos, neg) = match scales {
        Some((sp, sn)) => (g.scale(logp_pos, sp)?, g.scale(logp_neg, sn)?),
        None => (logp_pos, logp_neg),
    };
    let d = g.sub(neg, pos)?;
    let d = g.offset(d, beta)?;
    g.relu(d)
}

/// Number of content tokens (BOS, EOS and PAD excluded), stopping at the
/// first EOS.
pub fn content_len(tokens: &[TokenId]) -> usize {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t != BOS && t != PAD)
        .count()
}

/// `1 − |1 − len_candidate / len_reference|`, optionally floored.
pub fn f_len(len_candidate: usize, len_reference: usize, floor: Option<f64>) -> Result<f64> {
    if len_reference == 0 {
        return Err(Error::InvalidInput("reference length is zero".into()));
    }
    let f = 1.0 - (1.0 - len_candidate as f64 / len_reference as f64).abs();
    Ok(match floor {
        Some(lo) => f.max(lo),
        None => f,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(P_ft ‖ P_θ): the frozen model supplies the target distribution.
    #[default]
    RefToCurrent,
    /// KL(P_θ ‖ P_ft).
    CurrentToRef,
}

/// Mean over target positions of the per-position KL divergence between the
/// frozen reference and the current model, as a `[1×1]` node. `cur_rows` are
/// the current model's teacher-forced log-distributions for `y`.
pub fn kl_reg_graph(g: &mut Graph, cur_rows: Var, ref_rows: &Tensor, direction: KlDirection) -> Result<Var> {
    let (t, v) = g.value(cur_rows).dims2()?;
    if ref_rows.shape() != [t, v] {
        return Err(Error::InvalidConfig(format!(
            "reference distributions {:?} do not match current {:?}",
            ref_rows.shape(),
            [t, v]
        )));
    }
    let reference = g.constant(ref_rows.clone());
    let terms = match direction {
        KlDirection::RefToCurrent => {
            let p = g.constant(Tensor::matrix(t, v, ref_rows.data().iter().map(|x| x.exp()).collect())?);
            let d = g.sub(reference, cur_rows)?;
            g.mul(p, d)?
        }
        KlDirection::CurrentToRef => {
            let p = g.exp(cur_rows)?;
            let d = g.sub(cur_rows, reference)?;
            g.mul(p, d)?
        }
    };
    let total = g.reduce_sum(terms)?;
    g.scale(total, 1.0 / t as f64)
}

/// Value of the KL regularizer for one `(x, y)`; `y` should end with EOS.
pub fn kl_reg_loss(
    model: &Seq2SeqModel,
    reference: &Seq2SeqModel,
    x: &[TokenId],
    y: &[TokenId],
    direction: KlDirection,
) -> Result<f64> {
    check_compatible(model, reference)?;
    let mut g = Graph::new();
    let pv = model.bind(&mut g);
    let enc = model.encode_graph(&mut g, &pv, x)?;
    let rows = model.token_log_probs_graph(&mut g, &pv, &enc, y)?;
    let r = kl_reg_graph(&mut g, rows, &reference.token_log_probs(x, y)?, direction)?;
    g.value(r).item()
}

fn check_compatible(model: &Seq2SeqModel, reference: &Seq2SeqModel) -> Result<()> {
    if model.vocab_size() != reference.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "vocabulary sizes differ: {} vs {}",
            model.vocab_size(),
            reference.vocab_size()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    /// Margin of the hinge.
    pub beta: f64,
    /// Weight on length-scaled log-likelihoods; used with `use_f_len`.
    pub alpha: f64,
    pub use_f_len: bool,
    pub f_len_floor: Option<f64>,
    /// Weight on the ranking term.
    pub gamma: f64,
    /// Weight on the KL regularizer.
    pub lambda: f64,
    pub kl_direction: KlDirection,
    /// Weight on an extra reference NLL term.
    pub mle_weight: f64,
    /// Pairs per example; `None` means one fewer than the candidate count.
    pub pairs_per_example: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Keep a checkpoint every this many steps (and at the end); 0 keeps
    /// only the final one.
    pub checkpoint_every: usize,
    /// Parameter names excluded from updates.
    pub frozen: Vec<String>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha: 1.0,
            use_f_len: false,
            f_len_floor: None,
            gamma: 1.0,
            lambda: 1.0,
            kl_direction: KlDirection::default(),
            mle_weight: 0.0,
            pairs_per_example: None,
            optimizer: OptimizerConfig {
                rule: UpdateRule::default(),
                learning_rate: 1e-3,
                clip_norm: Some(5.0),
            },
            steps: 300,
            batch_size: 8,
            checkpoint_every: 0,
            frozen: Vec::new(),
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("margin beta must be non-negative, got {}", self.beta));
        }
        if self.use_f_len && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("length weight alpha must be positive, got {}", self.alpha));
        }
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda), ("mle_weight", self.mle_weight)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.pairs_per_example == Some(0) {
            return bad("pairs_per_example must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("calibration batch_size must be at least 1".into());
        }
        self.optimizer.validate()
    }

    fn pairs_for(&self, n_candidates: usize) -> usize {
        self.pairs_per_example.unwrap_or(n_candidates.saturating_sub(1).max(1))
    }
}

/// One training item: an example, its scored candidates and sampled pairs.
#[derive(Clone, Debug)]
pub struct CalibItem<'a> {
    pub example: &'a Example,
    pub set: &'a AnnotatedCandidateSet,
    pub pairs: Vec<CandidatePair>,
}

/// Per-example loss graph: returns the root and `[L_cal, L_reg]` parts
/// (already weighted by γ and λ), each divided by `batch_size`.
fn item_loss(
    g: &mut Graph,
    pv: &[Var],
    model: &Seq2SeqModel,
    reference: &Seq2SeqModel,
    item: &CalibItem<'_>,
    config: &CalibConfig,
    batch_size: usize,
) -> Result<Option<(Var, Vec<f64>)>> {
    let norm = 1.0 / batch_size as f64;
    let has_rank = config.gamma > 0.0 && !item.pairs.is_empty();
    let has_reg = config.lambda > 0.0;
    let has_mle = config.mle_weight > 0.0;
    if !has_rank && !has_reg && !has_mle {
        return Ok(None);
    }
    let x = &item.example.input_tokens;
    let enc = model.encode_graph(g, pv, x)?;
    let mut parts = Vec::new();
    let (mut l_cal, mut l_reg) = (0.0, 0.0);

    if has_rank {
        let mut logp: HashMap<usize, Var> = HashMap::new();
        let ref_len = content_len(&item.example.reference_tokens);
        let mut hinges = Vec::with_capacity(item.pairs.len());
        for pair in &item.pairs {
            for idx in [pair.pos, pair.neg] {
                if !logp.contains_key(&idx) {
                    let lp = model.sequence_log_prob_graph(g, pv, &enc, &item.set.candidates[idx].tokens)?;
                    logp.insert(idx, lp);
                }
            }
            let scales = if config.use_f_len {
                let fp = f_len(content_len(&item.set.candidates[pair.pos].tokens), ref_len, config.f_len_floor)?;
                let fn_ = f_len(content_len(&item.set.candidates[pair.neg].tokens), ref_len, config.f_len_floor)?;
                Some((config.alpha * fp, config.alpha * fn_))
            } else {
                None
            };
            hinges.push(rank_loss_graph(g, logp[&pair.pos], logp[&pair.neg], config.beta, scales)?);
        }
        let all = g.concat(&hinges, crate::diffmath::Axis::Cols)?;
        let sum = g.reduce_sum(all)?;
        let term = g.scale(sum, config.gamma * norm / item.pairs.len() as f64)?;
        l_cal = g.value(term).item()?;
        parts.push(term);
    }
    if has_reg || has_mle {
        let y = with_eos(&item.example.reference_tokens);
        let rows = model.token_log_probs_graph(g, pv, &enc, &y)?;
        if has_reg {
            let ref_rows = reference.token_log_probs(x, &y)?;
            let kl = kl_reg_graph(g, rows, &ref_rows, config.kl_direction)?;
            let term = g.scale(kl, config.lambda * norm)?;
            l_reg = g.value(term).item()?;
            parts.push(term);
        }
        if has_mle {
            let cells: Vec<(usize, usize)> = y.iter().enumerate().map(|(t, &tok)| (t, tok as usize)).collect();
            let picked = g.pick(rows, &cells)?;
            let sum = g.reduce_sum(picked)?;
            parts.push(g.scale(sum, -config.mle_weight * norm / y.len() as f64)?);
        }
    }
    let root = if parts.len() == 1 {
        parts[0]
    } else {
        let all = g.concat(&parts, crate::diffmath::Axis::Cols)?;
        g.reduce_sum(all)?
    };
    Ok(Some((root, vec![l_cal, l_reg])))
}

/// Loss terms of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub step: usize,
    #[serde(rename = "L_cal")]
    pub l_cal: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    pub total: f64,
}

/// Value and parameter gradients of the combined objective on a batch.
pub fn combined_loss(
    model: &Seq2SeqModel,
    reference: &Seq2SeqModel,
    batch: &[CalibItem<'_>],
    config: &CalibConfig,
) -> Result<(LossLogEntry, Vec<Vec<f64>>)> {
    check_compatible(model, reference)?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n = batch.len();
    let acc = accumulate(model, batch, |g, pv, item| item_loss(g, pv, model, reference, item, config, n))?;
    let aux = |i: usize| acc.aux.get(i).copied().unwrap_or(0.0);
    Ok((
        LossLogEntry {
            step: 0,
            l_cal: aux(0),
            l_reg: aux(1),
            total: acc.value,
        },
        acc.grads,
    ))
}

#[derive(Clone, Debug)]
pub struct CalibrationOutcome {
    pub model: Seq2SeqModel,
    /// `(step, model)` snapshots, ending with the final model.
    pub checkpoints: Vec<(usize, Seq2SeqModel)>,
    pub log: Vec<LossLogEntry>,
    pub rng: RngState,
}

/// Continues training from `reference` on the combined objective. Batches
/// walk the annotated sets in a fresh shuffled order each epoch; pairs are
/// resampled every time an example is visited.
pub fn calibration_run(
    reference: &Seq2SeqModel,
    examples: &[Example],
    annotated: &[AnnotatedCandidateSet],
    config: &CalibConfig,
    seed: u64,
) -> Result<CalibrationOutcome> {
    use rand::seq::SliceRandom;

    config.validate()?;
    let by_id: HashMap<u64, &Example> = examples.iter().map(|e| (e.id, e)).collect();
    let lookup = annotated
        .iter()
        .map(|set| {
            by_id
                .get(&set.example_id)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("annotations for unknown example {}", set.example_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let trainable: Vec<bool> = reference
        .params()
        .iter()
        .map(|p| !config.frozen.iter().any(|f| f == &p.name))
        .collect();
    if let Some(name) = config.frozen.iter().find(|f| reference.params().by_name(f).is_none()) {
        return Err(Error::InvalidConfig(format!("unknown parameter {name} in frozen list")));
    }

    let mut rng = rng_for(seed, "calibrate", 0);
    let mut model = reference.clone();
    model.params_mut().reset_optimizer_state();
    let mut log = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    if annotated.is_empty() && config.steps > 0 {
        return Err(Error::InvalidInput("no annotated candidate sets".into()));
    }

    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..annotated.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            let set = &annotated[i];
            let pairs = sample_pairs(set, config.pairs_for(set.candidates.len()), &mut rng);
            batch.push(CalibItem {
                example: lookup[i],
                set,
                pairs,
            });
        }
        let (mut entry, grads) =
            combined_loss(&model, reference, &batch, config).map_err(|e| abort("calibrate", step, e))?;
        entry.step = step;
        if !entry.total.is_finite() {
            return Err(Error::AbortedRun {
                stage: "calibrate".into(),
                step,
                reason: "loss is not finite".into(),
            });
        }
        diffmath::step(model.params_mut(), &grads, &config.optimizer, Some(&trainable))
            .map_err(|e| abort("calibrate", step, e))?;
        log.push(entry);
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.steps {
            checkpoints.push((step, model.clone()));
        }
    }
    checkpoints.push((config.steps, model.clone()));
    Ok(CalibrationOutcome {
        model,
        checkpoints,
        log,
        rng: RngState::capture(&rng),
    })
}
