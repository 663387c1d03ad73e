//! Evaluation reports, the Avg selection metric, correlations, Pareto
//! frontiers and score histograms.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::AnnotatedCandidateSet;
use crate::corpus::{coverage, overlap_scores, repetition, Example, Fact, TokenId};
use crate::decode::{beam_search, decode_best, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;

/// Per-example evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: u64,
    pub output_tokens: Vec<TokenId>,
    pub consistency: f64,
    pub f1_unigram: f64,
    pub f1_bigram: f64,
    pub f1_lcs: f64,
    pub coverage: f64,
    pub repetition: f64,
    pub length: usize,
}

/// Dataset-level metrics. `consistency_mean_pct` is the mean oracle score
/// ×100; `consistency_full_pct` the share of outputs scoring exactly 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub consistency_mean_pct: f64,
    pub consistency_full_pct: f64,
    pub f1_unigram: f64,
    pub f1_bigram: f64,
    pub f1_lcs: f64,
    pub coverage_pct: f64,
    pub repetition_pct: f64,
    pub mean_length: f64,
    pub n_examples: usize,
}

impl MetricsReport {
    /// Mean of the three overlap F-measures.
    pub fn overlap_mean(&self) -> f64 {
        (self.f1_unigram + self.f1_bigram + self.f1_lcs) / 3.0
    }
}

/// Scores one output: `output` is the decoded content without EOS.
pub fn example_record<S>(example: &Example, output: Vec<TokenId>, scorer: &S) -> Result<ExampleRecord>
where
    S: Fn(&[Fact], &[TokenId]) -> f64,
{
    let consistency = scorer(&example.document_facts, &output);
    if !(0.0..=1.0).contains(&consistency) {
        return Err(Error::ContractViolation(format!(
            "scorer returned {consistency} for example {}",
            example.id
        )));
    }
    let o = overlap_scores(&output, &example.reference_tokens);
    Ok(ExampleRecord {
        example_id: example.id,
        consistency,
        f1_unigram: o.unigram,
        f1_bigram: o.bigram,
        f1_lcs: o.lcs,
        coverage: coverage(&example.input_tokens, &output),
        repetition: repetition(&output),
        length: output.len(),
        output_tokens: output,
    })
}

/// Averages per-example records into a report.
pub fn aggregate(records: &[ExampleRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to aggregate".into()));
    }
    let n = records.len() as f64;
    let mean = |f: fn(&ExampleRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        consistency_mean_pct: 100.0 * mean(|r| r.consistency),
        consistency_full_pct: 100.0 * mean(|r| if r.consistency == 1.0 { 1.0 } else { 0.0 }),
        f1_unigram: mean(|r| r.f1_unigram),
        f1_bigram: mean(|r| r.f1_bigram),
        f1_lcs: mean(|r| r.f1_lcs),
        coverage_pct: mean(|r| r.coverage),
        repetition_pct: mean(|r| r.repetition),
        mean_length: mean(|r| r.length as f64),
        n_examples: records.len(),
    })
}

/// Runs `decoder` on every example (in parallel, order preserved) and scores
/// the outputs.
pub fn eval_records_with<D, S>(examples: &[Example], decoder: D, scorer: S) -> Result<Vec<ExampleRecord>>
where
    D: Fn(&Example) -> Result<Vec<TokenId>> + Sync,
    S: Fn(&[Fact], &[TokenId]) -> f64 + Sync,
{
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    examples
        .par_iter()
        .map(|ex| example_record(ex, decoder(ex)?, &scorer))
        .collect()
}

/// Beam-decodes every example and scores the top hypothesis.
pub fn eval_records<S>(
    model: &Seq2SeqModel,
    examples: &[Example],
    decode: &DecodeConfig,
    scorer: S,
) -> Result<Vec<ExampleRecord>>
where
    S: Fn(&[Fact], &[TokenId]) -> f64 + Sync,
{
    decode.validate()?;
    eval_records_with(
        examples,
        |ex| Ok(decode_best(model, &ex.input_tokens, decode)?.content().to_vec()),
        scorer,
    )
}

pub fn eval_report<S>(model: &Seq2SeqModel, examples: &[Example], decode: &DecodeConfig, scorer: S) -> Result<MetricsReport>
where
    S: Fn(&[Fact], &[TokenId]) -> f64 + Sync,
{
    aggregate(&eval_records(model, examples, decode, scorer)?)
}

fn min_max(xs: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let lo = xs.clone().fold(f64::INFINITY, f64::min);
    let hi = xs.fold(f64::NEG_INFINITY, f64::max);
    move |x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }
}

/// `Avg = (C' + (1 − max(L', L'_base))) / 2` per row, where `'` is min-max
/// normalization over all rows and `L'_base` is the normalized length of row
/// `baseline_index`. Rows are `(consistency, length)`.
pub fn avg_selection(rows: &[(f64, f64)], baseline_index: usize) -> Result<Vec<f64>> {
    if rows.len() < 2 {
        return Err(Error::InvalidInput("Avg needs at least two rows".into()));
    }
    if baseline_index >= rows.len() {
        return Err(Error::InvalidInput(format!(
            "baseline row {baseline_index} out of range for {} rows",
            rows.len()
        )));
    }
    let c = min_max(rows.iter().map(|r| r.0));
    let l = min_max(rows.iter().map(|r| r.1));
    let base = l(rows[baseline_index].1);
    Ok(rows.iter().map(|&(ci, li)| (c(ci) + (1.0 - l(li).max(base))) / 2.0).collect())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput("correlation needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!("{} vs {} values", xs.len(), ys.len())));
    }
    pearson(&fractional_ranks(xs), &fractional_ranks(ys))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    All,
    Top1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
    pub n_points: usize,
}

/// `(log-prob, score)` points: every hypothesis, or only each example's
/// best, of a width-`beam_size` search.
pub fn correlation_points<S>(
    model: &Seq2SeqModel,
    examples: &[Example],
    mode: CorrelationMode,
    decode: &DecodeConfig,
    scorer: S,
) -> Result<Vec<(f64, f64)>>
where
    S: Fn(&[Fact], &[TokenId]) -> f64 + Sync,
{
    decode.validate()?;
    let per: Vec<Vec<(f64, f64)>> = examples
        .par_iter()
        .map(|ex| {
            let hyps = beam_search(model, &ex.input_tokens, decode.beam_size, decode.alpha, decode.max_len)?;
            let take = match mode {
                CorrelationMode::All => hyps.len(),
                CorrelationMode::Top1 => hyps.len().min(1),
            };
            Ok(hyps[..take]
                .iter()
                .map(|h| (h.raw_logprob, scorer(&ex.document_facts, &h.tokens)))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Pearson and Spearman coefficients between summed log-probability and
/// consistency, pooled over the dataset.
pub fn correlation_analysis<S>(
    model: &Seq2SeqModel,
    examples: &[Example],
    mode: CorrelationMode,
    decode: &DecodeConfig,
    scorer: S,
) -> Result<Correlation>
where
    S: Fn(&[Fact], &[TokenId]) -> f64 + Sync,
{
    let points = correlation_points(model, examples, mode, decode, scorer)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
    Ok(Correlation {
        pearson: pearson(&xs, &ys)?,
        spearman: spearman(&xs, &ys)?,
        n_points: xs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub a: f64,
    pub b: f64,
    pub label: String,
}

/// Whether each metric is maximized (`true`) or minimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orientation {
    pub maximize_a: bool,
    pub maximize_b: bool,
}

/// `p` dominates `q`: no worse on both metrics and strictly better on one.
pub fn dominates(p: &ParetoPoint, q: &ParetoPoint, o: Orientation) -> bool {
    let better = |x: f64, y: f64, max: bool| if max { x > y } else { x < y };
    let no_worse = |x: f64, y: f64, max: bool| x == y || better(x, y, max);
    no_worse(p.a, q.a, o.maximize_a)
        && no_worse(p.b, q.b, o.maximize_b)
        && (better(p.a, q.a, o.maximize_a) || better(p.b, q.b, o.maximize_b))
}

/// Non-dominated points sorted by ascending `a` (then `b`), input order kept
/// among equal points.
pub fn pareto_frontier(points: &[ParetoPoint], orientation: Orientation) -> Vec<ParetoPoint> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&i, &j| {
        let (p, q) = (&points[i], &points[j]);
        let key = |x: f64, max: bool| if max { -x } else { x };
        key(p.a, orientation.maximize_a)
            .total_cmp(&key(q.a, orientation.maximize_a))
            .then(key(p.b, orientation.maximize_b).total_cmp(&key(q.b, orientation.maximize_b)))
    });
    // Sweep from best `a` to worst, keeping points that improve on the best
    // `b` seen among strictly better `a` values.
    let better_b = |x: f64, y: f64| if orientation.maximize_b { x > y } else { x < y };
    let mut keep = Vec::new();
    let mut best_b: Option<f64> = None;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && points[idx[end + 1]].a == points[idx[k]].a {
            end += 1;
        }
        // inside a group of equal `a`, the first entries carry the best `b`
        let group_best = points[idx[k]].b;
        for &i in &idx[k..=end] {
            let b = points[i].b;
            let beaten_in_group = better_b(group_best, b);
            let beaten_before = best_b.map_or(false, |bb| !better_b(b, bb));
            if !beaten_in_group && !beaten_before {
                keep.push(i);
            }
        }
        best_b = Some(match best_b {
            Some(bb) if !better_b(group_best, bb) => bb,
            _ => group_best,
        });
        k = end + 1;
    }
    keep.sort_by(|&i, &j| points[i].a.total_cmp(&points[j].a).then(points[i].b.total_cmp(&points[j].b)).then(i.cmp(&j)));
    keep.into_iter().map(|i| points[i].clone()).collect()
}

/// Equal-width bins over `[0, 1]`; the last bin includes 1.
pub fn score_histogram(scores: impl IntoIterator<Item = f64>, n_bins: usize) -> Result<Vec<usize>> {
    if n_bins < 1 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0usize; n_bins];
    for s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::ContractViolation(format!("score {s} outside [0, 1]")));
        }
        let b = ((s * n_bins as f64).floor() as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    Ok(counts)
}

/// Histogram of every candidate score in an annotated dataset.
pub fn candidate_histogram(sets: &[AnnotatedCandidateSet], n_bins: usize) -> Result<Vec<usize>> {
    score_histogram(sets.iter().flat_map(|s| s.candidates.iter().map(|c| c.score)), n_bins)
}

/// Tab-separated plot data with columns `bin_lo bin_hi count`.
pub fn histogram_tsv(counts: &[usize]) -> String {
    let n = counts.len() as f64;
    let mut out = String::from("bin_lo\tbin_hi\tcount\n");
    for (i, c) in counts.iter().enumerate() {
        let _ = writeln!(out, "{:.4}\t{:.4}\t{c}", i as f64 / n, (i + 1) as f64 / n);
    }
    out
}

/// One line of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub knob: String,
    pub value: Option<f64>,
    pub report: MetricsReport,
    /// Consistency minus the uncalibrated baseline's, in points.
    pub gain: f64,
    pub avg: Option<f64>,
}

pub const SWEEP_COLUMNS: [&str; 14] = [
    "label",
    "knob",
    "value",
    "consistency_pct",
    "consistency_gain",
    "consistency_full_pct",
    "f1_unigram",
    "f1_bigram",
    "f1_lcs",
    "coverage_pct",
    "length",
    "repetition_pct",
    "avg",
    "n_examples",
];

pub fn sweep_table_tsv(rows: &[SweepRow]) -> String {
    let mut out = SWEEP_COLUMNS.join("\t");
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x}"));
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}",
            r.label,
            r.knob,
            opt(r.value),
            m.consistency_mean_pct,
            r.gain,
            m.consistency_full_pct,
            m.f1_unigram,
            m.f1_bigram,
            m.f1_lcs,
            m.coverage_pct,
            m.mean_length,
            m.repetition_pct,
            r.avg.map_or_else(|| "-".to_string(), |x| format!("{x:.4}")),
            m.n_examples
        );
    }
    out
}

pub fn pareto_tsv(points: &[ParetoPoint], frontier: &[ParetoPoint]) -> String {
    let mut out = String::from("label\ta\tb\ton_frontier\n");
    for p in points {
        let on = frontier.iter().any(|f| f == p);
        let _ = writeln!(out, "{}\t{}\t{}\t{}", p.label, p.a, p.b, u8::from(on));
    }
    out
}
