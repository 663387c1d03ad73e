//! Gradient accumulation and the maximum-likelihood fine-tuning loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{overlap_scores, Example, TokenId};
use crate::decode::greedy_decode;
use crate::diffmath::{self, Graph, OptimizerConfig, UpdateRule, Var};
use crate::error::{Error, Result};
use crate::model::{with_eos, RngState, Seq2SeqModel};
use crate::seeding::rng_for;

/// Summed loss value, auxiliary values and parameter gradients of a batch.
#[derive(Clone, Debug)]
pub struct Accumulated {
    pub value: f64,
    pub aux: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

/// Builds one graph per item (in parallel), backpropagates each root and sums
/// the values and parameter gradients in item order, so the result does not
/// depend on the thread count. The closure returns the root together with
/// any auxiliary numbers to be summed alongside; `None` contributes nothing.
pub fn accumulate<T, F>(model: &Seq2SeqModel, items: &[T], loss: F) -> Result<Accumulated>
where
    T: Sync,
    F: Fn(&mut Graph, &[Var], &T) -> Result<Option<(Var, Vec<f64>)>> + Sync,
{
    let parts: Vec<Option<(f64, Vec<f64>, Vec<Vec<f64>>)>> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let pv = model.bind(&mut g);
            let Some((root, aux)) = loss(&mut g, &pv, item)? else {
                return Ok(None);
            };
            let value = g.value(root).item()?;
            g.backward(root)?;
            Ok(Some((value, aux, g.gradients(&pv))))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut aux_total: Vec<f64> = Vec::new();
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (value, aux, g) in parts.into_iter().flatten() {
        total += value;
        if aux_total.len() < aux.len() {
            aux_total.resize(aux.len(), 0.0);
        }
        for (a, b) in aux_total.iter_mut().zip(&aux) {
            *a += b;
        }
        for (acc, part) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    Ok(Accumulated {
        value: total,
        aux: aux_total,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Validate every this many steps (and at the end).
    pub eval_every: usize,
    /// Validation examples used for checkpoint selection; 0 means all.
    pub eval_examples: usize,
    pub max_decode_len: usize,
    pub selection: FinetuneSelection,
}

/// Which fine-tuning checkpoint is kept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneSelection {
    /// Highest validation overlap among evaluated steps, including step 0.
    #[default]
    ValOverlap,
    /// The model after the final step.
    Last,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            optimizer: OptimizerConfig {
                rule: UpdateRule::default(),
                learning_rate: 5e-3,
                clip_norm: Some(5.0),
            },
            eval_every: 250,
            eval_examples: 200,
            max_decode_len: 16,
            selection: FinetuneSelection::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("finetune batch_size must be at least 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogEntry {
    pub step: usize,
    pub loss: f64,
    /// Mean validation overlap, present on evaluation steps.
    pub val_overlap: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: Seq2SeqModel,
    pub best_step: usize,
    pub best_overlap: f64,
    pub rng: RngState,
    pub log: Vec<FinetuneLogEntry>,
}

/// Mean of the three overlap F-measures between greedy decodes and
/// references.
pub fn validation_overlap(model: &Seq2SeqModel, examples: &[Example], max_len: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no validation examples".into()));
    }
    let scores: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let h = greedy_decode(model, &ex.input_tokens, max_len)?;
            Ok(overlap_scores(h.content(), &ex.reference_tokens).mean())
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Trains the per-token NLL with epoch-shuffled minibatches and returns the
/// checkpoint picked by `config.selection`. Under validation-overlap
/// selection the initial model counts as step 0.
pub fn finetune(
    init: Seq2SeqModel,
    train: &[Example],
    val: &[Example],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let val = if config.eval_examples == 0 || config.eval_examples >= val.len() {
        val
    } else {
        &val[..config.eval_examples]
    };
    let targets: Vec<Vec<TokenId>> = train.iter().map(|ex| with_eos(&ex.reference_tokens)).collect();
    let mut rng = rng_for(seed, "finetune", 0);
    let mut model = init;
    let mut log = Vec::new();

    let start = if val.is_empty() {
        f64::NEG_INFINITY
    } else {
        validation_overlap(&model, val, config.max_decode_len)?
    };
    let mut best = (0usize, start, model.clone());
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let scale = 1.0 / batch.len() as f64;
        let acc = accumulate(&model, &batch, |g, pv, &i| {
            let pair: [(&[TokenId], &[TokenId]); 1] = [(&train[i].input_tokens, &targets[i])];
            let l = model.nll_loss_graph(g, pv, &pair)?;
            Ok(Some((g.scale(l, scale)?, Vec::new())))
        })
        .map_err(|e| abort("finetune", step, e))?;
        let loss = acc.value;
        if !loss.is_finite() {
            return Err(Error::AbortedRun {
                stage: "finetune".into(),
                step,
                reason: "loss is not finite".into(),
            });
        }
        diffmath::step(model.params_mut(), &acc.grads, &config.optimizer, None)
            .map_err(|e| abort("finetune", step, e))?;

        let mut entry = FinetuneLogEntry {
            step,
            loss,
            val_overlap: None,
        };
        if !val.is_empty() && (step % config.eval_every == 0 || step == config.steps) {
            let score = validation_overlap(&model, val, config.max_decode_len)?;
            entry.val_overlap = Some(score);
            if score > best.1 {
                best = (step, score, model.clone());
            }
        }
        log.push(entry);
    }
    if val.is_empty() || config.selection == FinetuneSelection::Last {
        let last = log.last().and_then(|e: &FinetuneLogEntry| e.val_overlap).unwrap_or(if config.steps == 0 {
            start
        } else {
            f64::NAN
        });
        best = (config.steps, last, model);
    }
    Ok(FinetuneOutcome {
        model: best.2,
        best_step: best.0,
        best_overlap: best.1,
        rng: RngState::capture(&rng),
        log,
    })
}

pub(crate) fn abort(stage: &str, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::AbortedRun {
            stage: stage.into(),
            step,
            reason: format!("non-finite values in {what}"),
        },
        other => other,
    }
}
