use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::CalibConfig;
use crate::corpus::{CorpusConfig, Split};
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::FinetuneConfig;

/// Candidate generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    /// Beam width, and so the maximum number of candidates per example.
    pub m: usize,
    pub alpha: f64,
    pub max_len: usize,
    pub histogram_bins: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            m: 15,
            alpha: 0.8,
            max_len: 16,
            histogram_bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub decode: DecodeConfig,
    /// Beam width for the likelihood/consistency correlation study.
    pub correlation_beam: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            decode: DecodeConfig::default(),
            correlation_beam: 15,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSelection {
    /// Highest Avg score (consistency traded against length).
    #[default]
    Avg,
    /// Highest mean consistency.
    Consistency,
}

/// Grids of calibration knobs. Each non-empty grid is swept on its own with
/// the other knobs at their `[calibrate]` values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub gamma: Vec<f64>,
    /// Length weights; every point enables the length ratio.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub selection: SweepSelection,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty() && self.alpha.is_empty() && self.beta.is_empty() && self.lambda.is_empty()
    }

    pub fn grids(&self) -> Vec<(&'static str, &[f64])> {
        [
            ("gamma", self.gamma.as_slice()),
            ("alpha", self.alpha.as_slice()),
            ("beta", self.beta.as_slice()),
            ("lambda", self.lambda.as_slice()),
        ]
        .into_iter()
        .filter(|(_, g)| !g.is_empty())
        .collect()
    }
}

/// Everything a run needs besides the seed. `model.vocab_size` and
/// `model.init_seed` are filled in from the corpus and the run seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub finetune: FinetuneConfig,
    pub candidates: CandidateConfig,
    pub calibrate: CalibConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let mut model = self.model.clone();
        model.vocab_size = self.corpus.vocab()?.size();
        model.validate()?;
        self.finetune.validate()?;
        self.calibrate.validate()?;
        self.eval.decode.validate()?;
        if self.candidates.m < 2 {
            return Err(Error::InvalidConfig(format!(
                "candidates.m must be at least 2, got {}",
                self.candidates.m
            )));
        }
        DecodeConfig {
            beam_size: self.candidates.m,
            alpha: self.candidates.alpha,
            max_len: self.candidates.max_len,
        }
        .validate()?;
        for (what, len) in [
            ("candidates.max_len", self.candidates.max_len),
            ("eval.decode.max_len", self.eval.decode.max_len),
            ("finetune.max_decode_len", self.finetune.max_decode_len),
        ] {
            if len > self.model.max_output_len {
                return Err(Error::InvalidConfig(format!(
                    "{what} ({len}) exceeds model.max_output_len ({})",
                    self.model.max_output_len
                )));
            }
        }
        let k = self.corpus.facts_per_doc;
        if 5 * k > self.model.max_input_len {
            return Err(Error::InvalidConfig(format!(
                "documents of {k} facts need max_input_len ≥ {}",
                5 * k
            )));
        }
        if 4 * self.corpus.facts_per_summary + 1 > self.model.max_output_len {
            return Err(Error::InvalidConfig(format!(
                "summaries of {} facts need max_output_len ≥ {}",
                self.corpus.facts_per_summary,
                4 * self.corpus.facts_per_summary + 1
            )));
        }
        if self.candidates.histogram_bins < 1 {
            return Err(Error::InvalidConfig("histogram_bins must be at least 1".into()));
        }
        if self.eval.correlation_beam < 1 {
            return Err(Error::InvalidConfig("correlation_beam must be at least 1".into()));
        }
        for (name, grid) in self.sweep.grids() {
            if let Some(v) = grid.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidConfig(format!("sweep.{name} holds invalid value {v}")));
            }
            if name == "alpha" && grid.iter().any(|v| *v == 0.0) {
                return Err(Error::InvalidConfig("sweep.alpha values must be positive".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}
