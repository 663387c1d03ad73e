use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

/// Stages in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Finetune,
    Decode,
    Calibrate,
    Eval,
    Correlate,
    Sweep,
    Pareto,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Gen,
        Stage::Finetune,
        Stage::Decode,
        Stage::Calibrate,
        Stage::Eval,
        Stage::Correlate,
        Stage::Sweep,
        Stage::Pareto,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Finetune => "finetune",
            Stage::Decode => "decode",
            Stage::Calibrate => "calibrate",
            Stage::Eval => "eval",
            Stage::Correlate => "correlate",
            Stage::Sweep => "sweep",
            Stage::Pareto => "pareto",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "error")]
pub enum StageStatus {
    Completed,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    /// Logical clock: the value of the manifest counter when the stage
    /// started and finished. Wall-clock times live in `timing.json`.
    pub started: u64,
    pub finished: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub corpus_seed: u64,
    pub clock: u64,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64, corpus_seed: u64) -> Self {
        Self {
            config_hash,
            seed,
            corpus_seed,
            clock: 0,
            stages: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    /// Inserts or replaces a stage record, keeping pipeline order.
    pub fn put(&mut self, record: StageRecord) {
        self.stages.retain(|r| r.stage != record.stage);
        let at = self.stages.partition_point(|r| r.stage < record.stage);
        self.stages.insert(at, record);
    }

    /// The recorded checksum of an artifact produced by a completed stage.
    pub fn produced(&self, path: &str) -> Option<(Stage, &Artifact)> {
        self.stages
            .iter()
            .filter(|r| r.status == StageStatus::Completed)
            .flat_map(|r| r.outputs.iter().map(move |a| (r.stage, a)))
            .find(|(_, a)| a.path == path)
    }

    /// Checks that `path` was produced by a completed stage and is unchanged
    /// on disk, returning its artifact record.
    pub fn verify(&self, dir: &Path, path: &str) -> Result<Artifact> {
        let (_, artifact) = self.produced(path).ok_or_else(|| {
            Error::State(format!("{path} has not been produced by a completed stage of this run"))
        })?;
        let actual = sha256_file(&resolve(dir, path))?;
        if actual != artifact.sha256 {
            return Err(Error::ChecksumMismatch(path.to_string()));
        }
        Ok(artifact.clone())
    }

    /// Checks every artifact of every completed stage.
    pub fn verify_all(&self, dir: &Path) -> Result<()> {
        for r in self.stages.iter().filter(|r| r.status == StageStatus::Completed) {
            for a in &r.outputs {
                if sha256_file(&resolve(dir, &a.path))? != a.sha256 {
                    return Err(Error::ChecksumMismatch(a.path.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Joins `/`-separated relative components onto `dir`.
pub fn resolve(dir: &Path, rel: &str) -> PathBuf {
    rel.split('/').fold(dir.to_path_buf(), |p, c| p.join(c))
}
