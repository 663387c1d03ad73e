//! Single-layer recurrent encoder–decoder with additive attention.
//!
//! Two forward paths share the numeric kernels in `diffmath`: a graph path
//! used for training (gradients reach every parameter) and a plain inference
//! path used by decoding, scoring and the frozen reference model. Both give
//! bit-identical log-probabilities.
//!
//! Shapes, with `E` embedding width, `H` hidden width, `A` attention width and
//! `C = H + E` the width of one encoder memory row (hidden state next to the
//! token embedding it read):
//!
//! ```text
//! encoder   h_t = tanh(emb(x_t)·W_ei + h_{t-1}·W_eh + b_e)
//! memory    M_t = [h_t, emb(x_t)]                        (T×C)
//! keys      K   = M·W_k                                  (T×A)
//! decoder   a   = softmax(tanh(K + 1·(s·W_q))·v)         (1×T)
//!           c   = a·M                                    (1×C)
//!           s'  = tanh([emb(y_prev), c]·W_di + s·W_dr + b_d)
//!           log p(·) = log_softmax([s', c]·W_o + b_o)
//! ```
//!
//! The decoder starts from the final encoder state and conditions on BOS.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOS, EOS};
use crate::diffmath::{log_softmax_lane, matmul_acc, matmul_tensors, Axis, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub attention: bool,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 59,
            embed_dim: 24,
            hidden_dim: 48,
            attention_dim: 24,
            attention: true,
            max_input_len: 40,
            max_output_len: 16,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::InvalidConfig(
                "vocab_size must cover the reserved PAD/BOS/EOS ids".into(),
            ));
        }
        if self.embed_dim < 1 || self.hidden_dim < 1 || (self.attention && self.attention_dim < 1) {
            return Err(Error::InvalidConfig("model dimensions must be at least 1".into()));
        }
        if self.max_input_len < 2 || self.max_output_len < 2 {
            return Err(Error::InvalidConfig("maximum lengths must be at least 2".into()));
        }
        Ok(())
    }

    fn memory_dim(&self) -> usize {
        if self.attention {
            self.hidden_dim + self.embed_dim
        } else {
            0
        }
    }
}

// Store order of the parameters.
const EMBEDDING: usize = 0;
const ENC_INPUT: usize = 1;
const ENC_RECURRENT: usize = 2;
const ENC_BIAS: usize = 3;
const DEC_INPUT: usize = 4;
const DEC_RECURRENT: usize = 5;
const DEC_BIAS: usize = 6;
const OUT_WEIGHT: usize = 7;
const OUT_BIAS: usize = 8;
const ATT_KEY: usize = 9;
const ATT_QUERY: usize = 10;
const ATT_SCORE: usize = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: ParamStore,
}

/// Encoder output used by the inference path.
#[derive(Clone, Debug)]
pub struct Encoded {
    memory: Option<Tensor>,
    keys: Option<Tensor>,
    final_state: Vec<f64>,
}

impl Encoded {
    pub fn initial_state(&self) -> &[f64] {
        &self.final_state
    }
}

/// Encoder output inside a graph.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    memory: Option<Var>,
    keys: Option<Var>,
    ones: Option<Var>,
    final_state: Var,
}

/// Appends EOS to a rendered summary, giving a decoder target.
pub fn with_eos(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut out = tokens.to_vec();
    out.push(EOS);
    out
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data)
}

fn row_matmul(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0; n];
    matmul_acc(x, w.data(), &mut out, 1, k, n);
    out
}

impl Seq2SeqModel {
    /// Fresh model with uniform `±1/sqrt(fan_in)` weights and zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.init_seed, "model-init", 0);
        let (v, e, h, a, c) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.attention_dim,
            config.memory_dim(),
        );
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("embedding", uniform(v, e, 1.0, &mut rng)?)?;
        p.insert("encoder.input", uniform(e, h, inv(e + h), &mut rng)?)?;
        p.insert("encoder.recurrent", uniform(h, h, inv(e + h), &mut rng)?)?;
        p.insert("encoder.bias", Tensor::zeros(1, h))?;
        p.insert("decoder.input", uniform(e + c, h, inv(e + c + h), &mut rng)?)?;
        p.insert("decoder.recurrent", uniform(h, h, inv(e + c + h), &mut rng)?)?;
        p.insert("decoder.bias", Tensor::zeros(1, h))?;
        p.insert("output.weight", uniform(h + c, v, inv(h + c), &mut rng)?)?;
        p.insert("output.bias", Tensor::zeros(1, v))?;
        if config.attention {
            p.insert("attention.key", uniform(c, a, inv(c), &mut rng)?)?;
            p.insert("attention.query", uniform(h, a, inv(h), &mut rng)?)?;
            p.insert("attention.score", uniform(a, 1, inv(a), &mut rng)?)?;
        }
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config.clone())?;
        if template.params.len() != params.len()
            || template
                .params
                .iter()
                .zip(params.iter())
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::InvalidInput(
                "parameter set does not match the model configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn p(&self, idx: usize) -> &Tensor {
        self.params.get(idx)
    }

    fn check_tokens(&self, tokens: &[TokenId], max: usize, what: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput(format!("{what} sequence is empty")));
        }
        if tokens.len() > max {
            return Err(Error::InvalidInput(format!(
                "{what} length {} exceeds maximum {max}",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn check_input(&self, x: &[TokenId]) -> Result<()> {
        self.check_tokens(x, self.config.max_input_len, "input")
    }

    pub fn check_target(&self, y: &[TokenId]) -> Result<()> {
        self.check_tokens(y, self.config.max_output_len, "target")
    }

    // ---- inference path -------------------------------------------------

    pub fn encode(&self, x: &[TokenId]) -> Result<Encoded> {
        self.check_input(x)?;
        let h_dim = self.config.hidden_dim;
        let emb = self.p(EMBEDDING);
        let mut h = vec![0.0; h_dim];
        let mut memory = Vec::new();
        for &tok in x {
            let e = emb.row_slice(tok as usize);
            let a = row_matmul(e, self.p(ENC_INPUT));
            let b = row_matmul(&h, self.p(ENC_RECURRENT));
            let bias = self.p(ENC_BIAS).data();
            h = (0..h_dim).map(|j| ((a[j] + b[j]) + bias[j]).tanh()).collect();
            if self.config.attention {
                memory.extend_from_slice(&h);
                memory.extend_from_slice(e);
            }
        }
        let (memory, keys) = if self.config.attention {
            let m = Tensor::matrix(x.len(), self.config.memory_dim(), memory)?;
            let k = matmul_tensors(&m, self.p(ATT_KEY))?;
            (Some(m), Some(k))
        } else {
            (None, None)
        };
        Ok(Encoded {
            memory,
            keys,
            final_state: h,
        })
    }

    fn context(&self, enc: &Encoded, state: &[f64]) -> Option<Vec<f64>> {
        let (memory, keys) = (enc.memory.as_ref()?, enc.keys.as_ref()?);
        let (t, a) = (keys.rows(), keys.cols());
        let q = row_matmul(state, self.p(ATT_QUERY));
        let mut z = vec![0.0; t * a];
        for i in 0..t {
            for j in 0..a {
                z[i * a + j] = (keys.data()[i * a + j] + q[j]).tanh();
            }
        }
        let mut scores = vec![0.0; t];
        matmul_acc(&z, self.p(ATT_SCORE).data(), &mut scores, t, a, 1);
        let mut logw = vec![0.0; t];
        log_softmax_lane(&scores, &mut logw);
        let w: Vec<f64> = logw.iter().map(|v| v.exp()).collect();
        Some(row_matmul(&w, memory))
    }

    /// One decoder step: returns the new state and the log-distribution over
    /// the next token.
    pub fn decode_step(&self, enc: &Encoded, state: &[f64], prev: TokenId) -> Result<(Vec<f64>, Vec<f64>)> {
        if prev as usize >= self.config.vocab_size {
            return Err(Error::InvalidInput(format!("token id {prev} outside vocabulary")));
        }
        let ctx = self.context(enc, state);
        let e = self.p(EMBEDDING).row_slice(prev as usize);
        let input: Vec<f64> = match &ctx {
            Some(c) => e.iter().chain(c.iter()).copied().collect(),
            None => e.to_vec(),
        };
        let a = row_matmul(&input, self.p(DEC_INPUT));
        let b = row_matmul(state, self.p(DEC_RECURRENT));
        let bias = self.p(DEC_BIAS).data();
        let s: Vec<f64> = (0..self.config.hidden_dim)
            .map(|j| ((a[j] + b[j]) + bias[j]).tanh())
            .collect();
        let out_in: Vec<f64> = match &ctx {
            Some(c) => s.iter().chain(c.iter()).copied().collect(),
            None => s.clone(),
        };
        let logits: Vec<f64> = row_matmul(&out_in, self.p(OUT_WEIGHT))
            .iter()
            .zip(self.p(OUT_BIAS).data())
            .map(|(x, b)| x + b)
            .collect();
        let mut logp = vec![0.0; logits.len()];
        log_softmax_lane(&logits, &mut logp);
        if logp.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decode_step"));
        }
        Ok((s, logp))
    }

    /// Teacher-forced next-token log-distributions, one row per target
    /// position (`[len(y) × V]`).
    pub fn token_log_probs(&self, x: &[TokenId], y: &[TokenId]) -> Result<Tensor> {
        self.check_target(y)?;
        let enc = self.encode(x)?;
        let mut state = enc.final_state.clone();
        let mut prev = BOS;
        let mut rows = Vec::with_capacity(y.len() * self.config.vocab_size);
        for &tok in y {
            let (s, logp) = self.decode_step(&enc, &state, prev)?;
            rows.extend_from_slice(&logp);
            state = s;
            prev = tok;
        }
        Tensor::matrix(y.len(), self.config.vocab_size, rows)
    }

    /// `Σ_t log p(y_t | x, y_<t)`; `y` should end with EOS.
    pub fn sequence_log_prob(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let lp = self.token_log_probs(x, y)?;
        Ok(y.iter()
            .enumerate()
            .map(|(t, &tok)| lp.get(t, tok as usize))
            .sum())
    }

    /// Mean per-token negative log-likelihood of `(input, target)` pairs,
    /// targets including EOS. Value only; see [`Seq2SeqModel::nll_loss_graph`].
    pub fn nll_loss(&self, batch: &[(&[TokenId], &[TokenId])]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut total = 0.0;
        for (x, y) in batch {
            total += -self.sequence_log_prob(x, y)? / y.len() as f64;
        }
        Ok(total / batch.len() as f64)
    }

    // ---- graph path -----------------------------------------------------

    /// Binds the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        g.bind(&self.params)
    }

    pub fn encode_graph(&self, g: &mut Graph, pv: &[Var], x: &[TokenId]) -> Result<EncodedVars> {
        self.check_input(x)?;
        let mut h = g.constant(Tensor::zeros(1, self.config.hidden_dim));
        let mut rows = Vec::with_capacity(x.len());
        for &tok in x {
            let e = g.gather(pv[EMBEDDING], &[tok as usize])?;
            let a = g.matmul(e, pv[ENC_INPUT])?;
            let b = g.matmul(h, pv[ENC_RECURRENT])?;
            let pre = g.add(a, b)?;
            let pre = g.add(pre, pv[ENC_BIAS])?;
            h = g.tanh(pre)?;
            if self.config.attention {
                rows.push(g.concat(&[h, e], Axis::Cols)?);
            }
        }
        if !self.config.attention {
            return Ok(EncodedVars {
                memory: None,
                keys: None,
                ones: None,
                final_state: h,
            });
        }
        let memory = g.concat(&rows, Axis::Rows)?;
        let keys = g.matmul(memory, pv[ATT_KEY])?;
        let ones = g.constant(Tensor::filled(x.len(), 1, 1.0));
        Ok(EncodedVars {
            memory: Some(memory),
            keys: Some(keys),
            ones: Some(ones),
            final_state: h,
        })
    }

    fn decode_step_graph(
        &self,
        g: &mut Graph,
        pv: &[Var],
        enc: &EncodedVars,
        state: Var,
        prev: TokenId,
    ) -> Result<(Var, Var)> {
        let ctx = match (enc.memory, enc.keys, enc.ones) {
            (Some(memory), Some(keys), Some(ones)) => {
                let t = g.value(keys).rows();
                let q = g.matmul(state, pv[ATT_QUERY])?;
                let tiled = g.matmul(ones, q)?;
                let z = g.add(keys, tiled)?;
                let z = g.tanh(z)?;
                let scores = g.matmul(z, pv[ATT_SCORE])?;
                let scores = g.reshape(scores, 1, t)?;
                let logw = g.log_softmax(scores, Axis::Cols)?;
                let w = g.exp(logw)?;
                Some(g.matmul(w, memory)?)
            }
            _ => None,
        };
        let e = g.gather(pv[EMBEDDING], &[prev as usize])?;
        let input = match ctx {
            Some(c) => g.concat(&[e, c], Axis::Cols)?,
            None => e,
        };
        let a = g.matmul(input, pv[DEC_INPUT])?;
        let b = g.matmul(state, pv[DEC_RECURRENT])?;
        let pre = g.add(a, b)?;
        let pre = g.add(pre, pv[DEC_BIAS])?;
        let s = g.tanh(pre)?;
        let out_in = match ctx {
            Some(c) => g.concat(&[s, c], Axis::Cols)?,
            None => s,
        };
        let logits = g.matmul(out_in, pv[OUT_WEIGHT])?;
        let logits = g.add(logits, pv[OUT_BIAS])?;
        let logp = g.log_softmax(logits, Axis::Cols)?;
        Ok((s, logp))
    }

    /// Teacher-forced log-distributions `[len(y) × V]` inside a graph.
    pub fn token_log_probs_graph(
        &self,
        g: &mut Graph,
        pv: &[Var],
        enc: &EncodedVars,
        y: &[TokenId],
    ) -> Result<Var> {
        self.check_target(y)?;
        let mut state = enc.final_state;
        let mut prev = BOS;
        let mut rows = Vec::with_capacity(y.len());
        for &tok in y {
            let (s, logp) = self.decode_step_graph(g, pv, enc, state, prev)?;
            rows.push(logp);
            state = s;
            prev = tok;
        }
        g.concat(&rows, Axis::Rows)
    }

    /// Summed target log-probability as a `[1×1]` graph node.
    pub fn sequence_log_prob_graph(
        &self,
        g: &mut Graph,
        pv: &[Var],
        enc: &EncodedVars,
        y: &[TokenId],
    ) -> Result<Var> {
        let rows = self.token_log_probs_graph(g, pv, enc, y)?;
        let cells: Vec<(usize, usize)> = y.iter().enumerate().map(|(t, &tok)| (t, tok as usize)).collect();
        let picked = g.pick(rows, &cells)?;
        g.reduce_sum(picked)
    }

    /// Differentiable mean per-token NLL over `(input, target)` pairs.
    pub fn nll_loss_graph(
        &self,
        g: &mut Graph,
        pv: &[Var],
        batch: &[(&[TokenId], &[TokenId])],
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut terms = Vec::with_capacity(batch.len());
        for (x, y) in batch {
            let enc = self.encode_graph(g, pv, x)?;
            let lp = self.sequence_log_prob_graph(g, pv, &enc, y)?;
            terms.push(g.scale(lp, -1.0 / y.len() as f64)?);
        }
        let all = g.concat(&terms, Axis::Cols)?;
        let total = g.reduce_sum(all)?;
        g.scale(total, 1.0 / batch.len() as f64)
    }
}
