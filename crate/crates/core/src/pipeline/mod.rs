//! Stage orchestration over a run directory.
//!
//! A run directory holds plain-file artifacts and a `manifest.json` that
//! records, per stage, the consumed and produced files with their SHA-256
//! digests. Every stage re-verifies its inputs against the manifest before
//! reading them.
//!
//! ```text
//! config.toml
//! corpus/{vocab.txt, train.jsonl, val.jsonl, test.jsonl}
//! finetune/{model.ckpt, log.jsonl, summary.json}
//! candidates/{candidates.jsonl, annotated.jsonl, histogram.tsv}
//! calibrate/{model.ckpt, loss.jsonl, checkpoints/step-NNNNNN.ckpt}
//! eval/{finetuned,calibrated}.json, eval/{finetuned,calibrated}_records.jsonl
//! correlate/correlation.json
//! sweep/<knob>.tsv, sweep/<knob>.jsonl, sweep/<knob>-selected.ckpt, sweep/selected.json
//! pareto/<metric>.tsv
//! ```

mod config;
mod manifest;

pub use config::{CandidateConfig, EvalConfig, ExperimentConfig, SweepConfig, SweepSelection};
pub use manifest::{resolve, sha256_file, Artifact, RunManifest, Stage, StageRecord, StageStatus, MANIFEST_FILE, TIMING_FILE};

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    avg_selection, candidate_histogram, correlation_analysis, eval_records, histogram_tsv, pareto_frontier,
    pareto_tsv, sweep_table_tsv, aggregate, Correlation, CorrelationMode, ExampleRecord, MetricsReport,
    Orientation, ParetoPoint, SweepRow,
};
use crate::calibrate::{annotate, calibration_run, AnnotatedCandidateSet, CalibConfig};
use crate::corpus::{gen_corpus, oracle_consistency, read_jsonl, write_corpus, write_jsonl, Example, Fact, Split, TokenId, Vocab};
use crate::decode::{generate_candidates, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, RngState, Seq2SeqModel};
use crate::seeding::derive_seed;
use crate::train::finetune;

pub const FT_CKPT: &str = "finetune/model.ckpt";
pub const CAL_CKPT: &str = "calibrate/model.ckpt";
pub const ANNOTATED: &str = "candidates/annotated.jsonl";

fn split_path(split: Split) -> String {
    format!("corpus/{}.jsonl", split.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub best_step: usize,
    pub best_val_overlap: f64,
}

/// Coefficients for both pooling modes; `None` where a correlation is
/// undefined (zero variance in either column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub all: Option<Correlation>,
    pub top1: Option<Correlation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub finetuned: CorrelationPair,
    pub calibrated: Option<CorrelationPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub finetuned: MetricsReport,
    pub calibrated: Option<MetricsReport>,
}

/// Rows of one swept knob, with the picked row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub knob: String,
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the selected grid point.
    pub selected: usize,
}

pub const BASELINE_NO_CAL: &str = "w/o L_cal";
pub const BASELINE_NO_FLEN: &str = "w/o f_len";

/// Derived per-purpose seeds.
pub fn corpus_seed(seed: u64) -> u64 {
    derive_seed(seed, "corpus", 0)
}

/// A run directory bound to one configuration and seed.
pub struct Run {
    dir: PathBuf,
    config: ExperimentConfig,
    seed: u64,
    manifest: RunManifest,
    timing: BTreeMap<String, f64>,
}

/// Tracks what a stage reads and writes.
struct StageCtx<'a> {
    dir: &'a Path,
    manifest: &'a RunManifest,
    inputs: Vec<Artifact>,
    outputs: Vec<String>,
}

impl StageCtx<'_> {
    fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let a = self.manifest.verify(self.dir, rel)?;
        if !self.inputs.contains(&a) {
            self.inputs.push(a);
        }
        Ok(resolve(self.dir, rel))
    }

    fn has(&self, rel: &str) -> bool {
        self.manifest.produced(rel).is_some()
    }

    fn output(&mut self, rel: &str) -> Result<PathBuf> {
        let path = resolve(self.dir, rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        if !self.outputs.iter().any(|o| o == rel) {
            self.outputs.push(rel.to_string());
        }
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.output(rel)?, text)?;
        Ok(())
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        std::fs::write(self.output(rel)?, text)?;
        Ok(())
    }

    fn write_jsonl<T: Serialize>(&mut self, rel: &str, records: &[T]) -> Result<()> {
        write_jsonl(&self.output(rel)?, records)
    }

    fn read_examples(&mut self, split: Split) -> Result<Vec<Example>> {
        read_jsonl(&self.input(&split_path(split))?)
    }

    fn read_model(&mut self, rel: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.input(rel)?)
    }
}

fn oracle(vocab: &Vocab) -> impl Fn(&[Fact], &[TokenId]) -> f64 + Sync + '_ {
    move |d, t| oracle_consistency(vocab, d, t).value()
}

impl Run {
    /// Opens (or starts) the run in `dir`. An existing manifest must belong
    /// to the same configuration and seed.
    pub fn open(dir: &Path, config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(dir)?;
        let hash = config.hash()?;
        let manifest = match RunManifest::load(dir)? {
            Some(m) if m.config_hash == hash && m.seed == seed => m,
            Some(_) => {
                return Err(Error::InvalidConfig(format!(
                    "{} holds a run with a different configuration or seed",
                    dir.display()
                )))
            }
            None => RunManifest::new(hash, seed, corpus_seed(seed)),
        };
        std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
        let timing = std::fs::read_to_string(dir.join(TIMING_FILE))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            seed,
            manifest,
            timing,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn vocab(&self) -> Result<Vocab> {
        self.config.corpus.vocab()
    }

    fn execute<T>(&mut self, stage: Stage, body: impl FnOnce(&mut StageCtx<'_>) -> Result<T>) -> Result<T> {
        let started = self.manifest.tick();
        let clock = Instant::now();
        info!("stage {} started", stage.name());
        let snapshot = self.manifest.clone();
        let mut ctx = StageCtx {
            dir: &self.dir,
            manifest: &snapshot,
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        let result = body(&mut ctx);
        let (inputs, outputs) = (ctx.inputs, ctx.outputs);
        let finished = self.manifest.tick();
        let record = match &result {
            Ok(_) => {
                let outputs = outputs
                    .iter()
                    .map(|p| {
                        Ok(Artifact {
                            path: p.clone(),
                            sha256: sha256_file(&resolve(&self.dir, p))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                StageRecord {
                    stage,
                    status: StageStatus::Completed,
                    inputs,
                    outputs,
                    started,
                    finished,
                }
            }
            Err(e) => StageRecord {
                stage,
                status: StageStatus::Failed(format!("{}: {e}", e.kind())),
                inputs,
                outputs: Vec::new(),
                started,
                finished,
            },
        };
        self.manifest.put(record);
        self.manifest.save(&self.dir)?;
        self.timing.insert(stage.name().into(), clock.elapsed().as_secs_f64());
        std::fs::write(self.dir.join(TIMING_FILE), serde_json::to_string_pretty(&self.timing)?)?;
        info!("stage {} finished in {:.1}s", stage.name(), clock.elapsed().as_secs_f64());
        result
    }

    pub fn gen(&mut self) -> Result<()> {
        let config = self.config.corpus.clone();
        let seed = self.manifest.corpus_seed;
        self.execute(Stage::Gen, |ctx| {
            let corpus = gen_corpus(&config, seed)?;
            let dir = ctx.output("corpus/vocab.txt")?;
            write_corpus(dir.parent().expect("corpus dir"), &corpus)?;
            for split in Split::ALL {
                ctx.output(&split_path(split))?;
            }
            Ok(())
        })
    }

    pub fn finetune(&mut self) -> Result<FinetuneSummary> {
        let cfg = self.config.clone();
        let vocab = self.vocab()?;
        let seed = self.seed;
        self.execute(Stage::Finetune, |ctx| {
            let train = ctx.read_examples(Split::Train)?;
            let val = ctx.read_examples(Split::Val)?;
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = vocab.size();
            model_cfg.init_seed = derive_seed(seed, "model-init", 0);
            let init = Seq2SeqModel::new(model_cfg)?;
            let out = finetune(init, &train, &val, &cfg.finetune, derive_seed(seed, "finetune", 0))?;
            Checkpoint::new(out.model, out.best_step as u64, out.rng).save(&ctx.output(FT_CKPT)?)?;
            ctx.write_jsonl("finetune/log.jsonl", &out.log)?;
            let summary = FinetuneSummary {
                best_step: out.best_step,
                best_val_overlap: out.best_overlap,
            };
            ctx.write_json("finetune/summary.json", &summary)?;
            Ok(summary)
        })
    }

    pub fn decode_annotate(&mut self) -> Result<Vec<usize>> {
        let cfg = self.config.candidates.clone();
        let vocab = self.vocab()?;
        self.execute(Stage::Decode, |ctx| {
            let model = ctx.read_model(FT_CKPT)?.model;
            let train = ctx.read_examples(Split::Train)?;
            let sets = generate_candidates(&model, &train, cfg.m, cfg.alpha, cfg.max_len)?;
            ctx.write_jsonl("candidates/candidates.jsonl", &sets)?;
            let annotated = annotate(&sets, &train, oracle(&vocab))?;
            ctx.write_jsonl(ANNOTATED, &annotated)?;
            let hist = candidate_histogram(&annotated, cfg.histogram_bins)?;
            ctx.write_text("candidates/histogram.tsv", &histogram_tsv(&hist))?;
            Ok(hist)
        })
    }

    pub fn calibrate(&mut self) -> Result<Vec<crate::calibrate::LossLogEntry>> {
        let cfg = self.config.calibrate.clone();
        let seed = derive_seed(self.seed, "calibrate", 0);
        self.execute(Stage::Calibrate, |ctx| {
            let reference = ctx.read_model(FT_CKPT)?.model;
            let train = ctx.read_examples(Split::Train)?;
            let annotated: Vec<AnnotatedCandidateSet> = read_jsonl(&ctx.input(ANNOTATED)?)?;
            let out = calibration_run(&reference, &train, &annotated, &cfg, seed)?;
            for (step, model) in &out.checkpoints[..out.checkpoints.len() - 1] {
                let rel = format!("calibrate/checkpoints/step-{step:06}.ckpt");
                Checkpoint::new(model.clone(), *step as u64, RngState::from_seed(seed)).save(&ctx.output(&rel)?)?;
            }
            Checkpoint::new(out.model, cfg.steps as u64, out.rng).save(&ctx.output(CAL_CKPT)?)?;
            ctx.write_jsonl("calibrate/loss.jsonl", &out.log)?;
            Ok(out.log)
        })
    }

    pub fn eval(&mut self) -> Result<EvalSummary> {
        let cfg = self.config.eval.clone();
        let vocab = self.vocab()?;
        self.execute(Stage::Eval, |ctx| {
            let examples = ctx.read_examples(cfg.split)?;
            let has_calibrated = ctx.has(CAL_CKPT);
            let mut run = |ckpt: &str, name: &str| -> Result<MetricsReport> {
                let model = ctx.read_model(ckpt)?.model;
                let records = eval_records(&model, &examples, &cfg.decode, oracle(&vocab))?;
                let report = aggregate(&records)?;
                ctx.write_jsonl(&format!("eval/{name}_records.jsonl"), &records)?;
                ctx.write_json(&format!("eval/{name}.json"), &report)?;
                Ok(report)
            };
            let finetuned = run(FT_CKPT, "finetuned")?;
            let calibrated = if has_calibrated {
                Some(run(CAL_CKPT, "calibrated")?)
            } else {
                None
            };
            Ok(EvalSummary { finetuned, calibrated })
        })
    }

    pub fn correlate(&mut self) -> Result<CorrelationReport> {
        let cfg = self.config.eval.clone();
        let vocab = self.vocab()?;
        self.execute(Stage::Correlate, |ctx| {
            let examples = ctx.read_examples(cfg.split)?;
            let has_calibrated = ctx.has(CAL_CKPT);
            let decode = DecodeConfig {
                beam_size: cfg.correlation_beam,
                ..cfg.decode.clone()
            };
            let mut pair = |ckpt: &str| -> Result<CorrelationPair> {
                let model = ctx.read_model(ckpt)?.model;
                let coefficients = |mode| match correlation_analysis(&model, &examples, mode, &decode, oracle(&vocab)) {
                    Ok(c) => Ok(Some(c)),
                    Err(Error::UndefinedCorrelation(reason)) => {
                        warn!("{ckpt}: {mode:?} correlation undefined: {reason}");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                };
                Ok(CorrelationPair {
                    all: coefficients(CorrelationMode::All)?,
                    top1: coefficients(CorrelationMode::Top1)?,
                })
            };
            let finetuned = pair(FT_CKPT)?;
            let calibrated = if has_calibrated { Some(pair(CAL_CKPT)?) } else { None };
            let report = CorrelationReport { finetuned, calibrated };
            ctx.write_json("correlate/correlation.json", &report)?;
            Ok(report)
        })
    }

    /// Recalibrates from the fine-tuned checkpoint once per grid point of
    /// every non-empty grid and evaluates each result.
    pub fn sweep(&mut self) -> Result<Vec<SweepTable>> {
        if self.config.sweep.is_empty() {
            return Err(Error::InvalidConfig("the sweep stage needs at least one non-empty grid".into()));
        }
        let cfg = self.config.clone();
        let vocab = self.vocab()?;
        let seed = derive_seed(self.seed, "calibrate", 0);
        self.execute(Stage::Sweep, |ctx| {
            let reference = ctx.read_model(FT_CKPT)?.model;
            let train = ctx.read_examples(Split::Train)?;
            let annotated: Vec<AnnotatedCandidateSet> = read_jsonl(&ctx.input(ANNOTATED)?)?;
            let examples = ctx.read_examples(cfg.eval.split)?;
            let evaluate = |m: &Seq2SeqModel| -> Result<MetricsReport> {
                aggregate(&eval_records(m, &examples, &cfg.eval.decode, oracle(&vocab))?)
            };
            let baseline = evaluate(&reference)?;
            let mut cache: HashMap<String, (Seq2SeqModel, MetricsReport)> = HashMap::new();
            let mut calibrated = |c: &CalibConfig| -> Result<(Seq2SeqModel, MetricsReport)> {
                let key = serde_json::to_string(c)?;
                if let Some(hit) = cache.get(&key) {
                    return Ok(hit.clone());
                }
                let model = calibration_run(&reference, &train, &annotated, c, seed)?.model;
                let report = evaluate(&model)?;
                cache.insert(key, (model.clone(), report.clone()));
                Ok((model, report))
            };

            let mut tables = Vec::new();
            let mut selected_summary = BTreeMap::new();
            for (knob, grid) in cfg.sweep.grids() {
                let mut rows = Vec::new();
                let mut models = Vec::new();
                for &v in grid {
                    let mut c = cfg.calibrate.clone();
                    match knob {
                        "gamma" => c.gamma = v,
                        "beta" => c.beta = v,
                        "lambda" => c.lambda = v,
                        _ => {
                            c.alpha = v;
                            c.use_f_len = true;
                        }
                    }
                    let (model, report) = calibrated(&c)?;
                    models.push(model);
                    rows.push(row(&format!("{knob}={v}"), knob, Some(v), report, &baseline));
                }
                if knob == "alpha" {
                    let mut c = cfg.calibrate.clone();
                    c.use_f_len = false;
                    let (_, report) = calibrated(&c)?;
                    rows.push(row(BASELINE_NO_FLEN, knob, None, report, &baseline));
                }
                rows.push(row(BASELINE_NO_CAL, knob, None, baseline.clone(), &baseline));
                let pts: Vec<(f64, f64)> = rows
                    .iter()
                    .map(|r| (r.report.consistency_mean_pct, r.report.mean_length))
                    .collect();
                let avgs = avg_selection(&pts, rows.len() - 1)?;
                for (r, a) in rows.iter_mut().zip(avgs) {
                    r.avg = Some(a);
                }
                let key = |r: &SweepRow| match cfg.sweep.selection {
                    SweepSelection::Avg => r.avg.unwrap_or(f64::NEG_INFINITY),
                    SweepSelection::Consistency => r.report.consistency_mean_pct,
                };
                let selected = (0..grid.len())
                    .reduce(|best, i| if key(&rows[i]) > key(&rows[best]) { i } else { best })
                    .expect("grid is non-empty");
                let picked = &models[selected];
                Checkpoint::new(picked.clone(), cfg.calibrate.steps as u64, RngState::from_seed(seed))
                    .save(&ctx.output(&format!("sweep/{knob}-selected.ckpt"))?)?;
                ctx.write_text(&format!("sweep/{knob}.tsv"), &sweep_table_tsv(&rows))?;
                ctx.write_jsonl(&format!("sweep/{knob}.jsonl"), &rows)?;
                selected_summary.insert(knob.to_string(), rows[selected].clone());
                tables.push(SweepTable {
                    knob: knob.to_string(),
                    rows,
                    selected,
                });
            }
            ctx.write_json("sweep/selected.json", &selected_summary)?;
            Ok(tables)
        })
    }

    /// Frontiers of consistency against each other reported metric, over
    /// every sweep row.
    pub fn pareto(&mut self) -> Result<BTreeMap<String, Vec<ParetoPoint>>> {
        let knobs: Vec<String> = self.config.sweep.grids().iter().map(|(k, _)| k.to_string()).collect();
        if knobs.is_empty() {
            return Err(Error::InvalidConfig("pareto needs sweep results; all grids are empty".into()));
        }
        self.execute(Stage::Pareto, |ctx| {
            let mut rows: Vec<SweepRow> = Vec::new();
            for k in &knobs {
                let table: Vec<SweepRow> = read_jsonl(&ctx.input(&format!("sweep/{k}.jsonl"))?)?;
                for r in table {
                    if !rows.iter().any(|x| x.label == r.label) {
                        rows.push(r);
                    }
                }
            }
            let metrics: [(&str, fn(&MetricsReport) -> f64, bool); 6] = [
                ("f1_unigram", |m| m.f1_unigram, true),
                ("f1_bigram", |m| m.f1_bigram, true),
                ("f1_lcs", |m| m.f1_lcs, true),
                ("coverage_pct", |m| m.coverage_pct, true),
                ("length", |m| m.mean_length, false),
                ("repetition_pct", |m| m.repetition_pct, false),
            ];
            let mut out = BTreeMap::new();
            for (name, f, maximize_b) in metrics {
                let points: Vec<ParetoPoint> = rows
                    .iter()
                    .map(|r| ParetoPoint {
                        a: r.report.consistency_mean_pct,
                        b: f(&r.report),
                        label: r.label.clone(),
                    })
                    .collect();
                let frontier = pareto_frontier(
                    &points,
                    Orientation {
                        maximize_a: true,
                        maximize_b,
                    },
                );
                ctx.write_text(&format!("pareto/{name}.tsv"), &pareto_tsv(&points, &frontier))?;
                out.insert(name.to_string(), frontier);
            }
            Ok(out)
        })
    }

    /// Checks every recorded artifact against its digest.
    pub fn verify(&self) -> Result<()> {
        self.manifest.verify_all(&self.dir)
    }
}

fn row(label: &str, knob: &str, value: Option<f64>, report: MetricsReport, baseline: &MetricsReport) -> SweepRow {
    SweepRow {
        label: label.to_string(),
        knob: knob.to_string(),
        value,
        gain: report.consistency_mean_pct - baseline.consistency_mean_pct,
        report,
        avg: None,
    }
}

/// Runs every stage in order; the sweep and Pareto stages run when a grid is
/// configured.
pub fn run_experiment(dir: &Path, config: ExperimentConfig, seed: u64) -> Result<RunManifest> {
    let mut run = Run::open(dir, config, seed)?;
    run.gen()?;
    run.finetune()?;
    run.decode_annotate()?;
    run.calibrate()?;
    run.eval()?;
    run.correlate()?;
    if !run.config().sweep.is_empty() {
        run.sweep()?;
        run.pareto()?;
    }
    Ok(run.manifest().clone())
}

/// Runs the stages needed for a sweep (reusing completed ones) and returns
/// its tables.
pub fn run_sweep(dir: &Path, config: ExperimentConfig, seed: u64) -> Result<Vec<SweepTable>> {
    let mut run = Run::open(dir, config, seed)?;
    if run.manifest().record(Stage::Gen).map(|r| &r.status) != Some(&StageStatus::Completed) {
        run.gen()?;
    }
    if run.manifest().record(Stage::Finetune).map(|r| &r.status) != Some(&StageStatus::Completed) {
        run.finetune()?;
    }
    if run.manifest().record(Stage::Decode).map(|r| &r.status) != Some(&StageStatus::Completed) {
        run.decode_annotate()?;
    }
    run.sweep()
}

/// Reads back the per-example evaluation dump of a run.
pub fn read_records(dir: &Path, name: &str) -> Result<Vec<ExampleRecord>> {
    read_jsonl(&dir.join("eval").join(format!("{name}_records.jsonl")))
}
