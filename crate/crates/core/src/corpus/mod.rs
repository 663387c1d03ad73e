//! Synthetic facts-to-summary task.
//!
//! A document lists `k` facts as clauses `E has A V .`; its summary restates
//! the first `s` facts as `E A V .`. A configurable fraction of references is
//! *divergent*: one summary clause carries a value that the document does not
//! support. Divergence is concentrated on "noise-prone" entities and always
//! substitutes the attribute's popular value, so a model trained on these
//! references learns a systematic hallucination rather than uniform noise.

mod metrics;
mod oracle;
mod vocab;

pub use metrics::{coverage, overlap_scores, repetition, OverlapScores};
pub use oracle::{oracle_consistency, split_clauses, ConsistencyScore};
pub use vocab::{TokenId, TokenKind, Vocab, BOS, EOS, HAS, PAD, SEP};

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub entity: u32,
    pub attribute: u32,
    pub value: u32,
}

impl Fact {
    pub fn new(entity: u32, attribute: u32, value: u32) -> Self {
        Self {
            entity,
            attribute,
            value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub input_tokens: Vec<TokenId>,
    pub reference_tokens: Vec<TokenId>,
    pub document_facts: Vec<Fact>,
    pub divergent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_entities: u32,
    pub n_attributes: u32,
    pub n_values: u32,
    pub facts_per_doc: usize,
    pub facts_per_summary: usize,
    /// When set, each summary restates a uniformly drawn number of facts in
    /// `min_facts_per_summary..=facts_per_summary`.
    pub min_facts_per_summary: Option<usize>,
    pub divergence_rate: f64,
    /// Fraction of entities whose references are preferentially corrupted.
    pub noise_prone_fraction: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_entities: 20,
            n_attributes: 10,
            n_values: 24,
            facts_per_doc: 5,
            facts_per_summary: 3,
            min_facts_per_summary: Some(1),
            divergence_rate: 0.3,
            noise_prone_fraction: 0.4,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_entities < 1 || self.n_attributes < 1 || self.n_values < 1 {
            return bad("vocabulary sizes must be at least 1".into());
        }
        if self.facts_per_doc < 1 || self.facts_per_summary < 1 {
            return bad("documents and summaries need at least one fact".into());
        }
        if self.facts_per_summary > self.facts_per_doc {
            return bad(format!(
                "facts_per_summary ({}) exceeds facts_per_doc ({})",
                self.facts_per_summary, self.facts_per_doc
            ));
        }
        if let Some(lo) = self.min_facts_per_summary {
            if lo < 1 || lo > self.facts_per_summary {
                return bad(format!(
                    "min_facts_per_summary ({lo}) must lie in 1..={}",
                    self.facts_per_summary
                ));
            }
        }
        if self.facts_per_doc > self.n_entities as usize {
            return bad(format!(
                "facts_per_doc ({}) exceeds the number of entities ({}); document entities are distinct",
                self.facts_per_doc, self.n_entities
            ));
        }
        if !(0.0..=1.0).contains(&self.divergence_rate) {
            return bad(format!("divergence_rate {} outside [0, 1]", self.divergence_rate));
        }
        if !(0.0..=1.0).contains(&self.noise_prone_fraction) {
            return bad(format!(
                "noise_prone_fraction {} outside [0, 1]",
                self.noise_prone_fraction
            ));
        }
        if self.divergence_rate > 0.0 && (self.n_values as usize) <= self.facts_per_doc {
            return bad("divergence needs more values than facts per document".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.n_entities, self.n_attributes, self.n_values)
    }

    /// Entities with id below this bound are noise-prone.
    pub fn noise_prone_cutoff(&self) -> u32 {
        (self.noise_prone_fraction * f64::from(self.n_entities)).round() as u32
    }

    /// The value a divergent reference substitutes for `attribute`.
    pub fn popular_value(&self, attribute: u32) -> u32 {
        ((u64::from(attribute) * 7 + 3) % u64::from(self.n_values)) as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A generated corpus: vocabulary plus three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn render_document(vocab: &Vocab, facts: &[Fact]) -> Result<Vec<TokenId>> {
    if facts.is_empty() {
        return Err(Error::InvalidInput("cannot render an empty fact list".into()));
    }
    let mut out = Vec::with_capacity(facts.len() * 5);
    for f in facts {
        out.extend([
            vocab.entity(f.entity),
            HAS,
            vocab.attribute(f.attribute),
            vocab.value(f.value),
            SEP,
        ]);
    }
    Ok(out)
}

pub fn render_summary(vocab: &Vocab, facts: &[Fact]) -> Result<Vec<TokenId>> {
    if facts.is_empty() {
        return Err(Error::InvalidInput("cannot render an empty fact list".into()));
    }
    let mut out = Vec::with_capacity(facts.len() * 4);
    for f in facts {
        out.extend([
            vocab.entity(f.entity),
            vocab.attribute(f.attribute),
            vocab.value(f.value),
            SEP,
        ]);
    }
    Ok(out)
}

/// Reads one `E A V` triple, with `has` after the entity when `with_has`.
fn parse_clause(vocab: &Vocab, clause: &[TokenId], with_has: bool) -> Option<Fact> {
    let (e, a, v) = match (with_has, clause) {
        (true, [e, h, a, v]) if *h == HAS => (e, a, v),
        (false, [e, a, v]) => (e, a, v),
        _ => return None,
    };
    match (vocab.kind(*e), vocab.kind(*a), vocab.kind(*v)) {
        (TokenKind::Entity(e), TokenKind::Attribute(a), TokenKind::Value(v)) => Some(Fact::new(e, a, v)),
        _ => None,
    }
}

fn parse_strict(vocab: &Vocab, tokens: &[TokenId], with_has: bool) -> Result<Vec<Fact>> {
    let Some(body) = tokens.strip_suffix(&[SEP]) else {
        return Err(Error::InvalidInput("rendering must end with a separator".into()));
    };
    body.split(|&t| t == SEP)
        .map(|c| {
            parse_clause(vocab, c, with_has).ok_or_else(|| {
                Error::InvalidInput(format!("malformed clause {:?}", vocab.render(c)))
            })
        })
        .collect()
}

/// Inverse of [`render_document`].
pub fn parse_document(vocab: &Vocab, tokens: &[TokenId]) -> Result<Vec<Fact>> {
    parse_strict(vocab, tokens, true)
}

/// Inverse of [`render_summary`].
pub fn parse_summary(vocab: &Vocab, tokens: &[TokenId]) -> Result<Vec<Fact>> {
    parse_strict(vocab, tokens, false)
}

fn sample_document(config: &CorpusConfig, rng: &mut impl Rng) -> Vec<Fact> {
    let entities =
        rand::seq::index::sample(rng, config.n_entities as usize, config.facts_per_doc);
    entities
        .iter()
        .map(|e| {
            Fact::new(
                e as u32,
                rng.gen_range(0..config.n_attributes),
                rng.gen_range(0..config.n_values),
            )
        })
        .collect()
}

/// Replaces the value of `summary[clause]` with the attribute's popular
/// value, stepping forward until the value is absent from the document.
fn corrupt(config: &CorpusConfig, document: &[Fact], summary: &mut [Fact], clause: usize) {
    let fact = &mut summary[clause];
    let mut value = config.popular_value(fact.attribute);
    while document.iter().any(|f| f.value == value) {
        value = (value + 1) % config.n_values;
    }
    fact.value = value;
}

fn generate_split(
    config: &CorpusConfig,
    vocab: &Vocab,
    seed: u64,
    split: Split,
    count: usize,
    first_id: u64,
) -> Result<Vec<Example>> {
    let documents: Vec<Vec<Fact>> = (0..count)
        .map(|i| sample_document(config, &mut rng_for(seed, split.name(), i as u64)))
        .collect();

    let lengths: Vec<usize> = (0..count)
        .map(|i| match config.min_facts_per_summary {
            Some(lo) => rng_for(seed, &format!("{}-length", split.name()), i as u64)
                .gen_range(lo..=config.facts_per_summary),
            None => config.facts_per_summary,
        })
        .collect();

    let n_divergent = (config.divergence_rate * count as f64).round() as usize;
    let cutoff = config.noise_prone_cutoff();
    let mut pick_rng = rng_for(seed, &format!("{}-divergence", split.name()), 0);
    let (mut prone, mut other): (Vec<usize>, Vec<usize>) =
        (0..count).partition(|&i| documents[i].first().map_or(false, |f| f.entity < cutoff));
    prone.shuffle(&mut pick_rng);
    other.shuffle(&mut pick_rng);
    // index -> corrupted clause
    let mut corrupted = vec![None; count];
    for &i in prone.iter().take(n_divergent) {
        corrupted[i] = Some(0);
    }
    for &i in other.iter().take(n_divergent.saturating_sub(prone.len())) {
        corrupted[i] = Some(pick_rng.gen_range(0..lengths[i]));
    }

    documents
        .into_iter()
        .enumerate()
        .map(|(i, document)| {
            let mut summary = document[..lengths[i]].to_vec();
            if let Some(clause) = corrupted[i] {
                corrupt(config, &document, &mut summary, clause);
            }
            Ok(Example {
                id: first_id + i as u64,
                input_tokens: render_document(vocab, &document)?,
                reference_tokens: render_summary(vocab, &summary)?,
                document_facts: document,
                divergent: corrupted[i].is_some(),
            })
        })
        .collect()
}

/// Generates train/val/test splits. Deterministic in `(config, seed)`; ids
/// run consecutively across the splits.
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let vocab = config.vocab()?;
    let train = generate_split(config, &vocab, seed, Split::Train, config.n_train, 0)?;
    let val = generate_split(config, &vocab, seed, Split::Val, config.n_val, config.n_train as u64)?;
    let test = generate_split(
        config,
        &vocab,
        seed,
        Split::Test,
        config.n_test,
        (config.n_train + config.n_val) as u64,
    )?;
    Ok(Corpus {
        vocab,
        train,
        val,
        test,
    })
}

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::CorruptFile(format!("{} line {}: {e}", path.display(), n + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes `vocab.txt` and `{train,val,test}.jsonl` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    corpus.vocab.write_to(&dir.join("vocab.txt"))?;
    for split in Split::ALL {
        write_jsonl(&dir.join(format!("{}.jsonl", split.name())), corpus.split(split))?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let vocab = Vocab::read_from(&dir.join("vocab.txt"))?;
    let read = |s: Split| read_jsonl::<Example>(&dir.join(format!("{}.jsonl", s.name())));
    Ok(Corpus {
        vocab,
        train: read(Split::Train)?,
        val: read(Split::Val)?,
        test: read(Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(k: usize, s: usize, p: f64, n: usize) -> CorpusConfig {
        CorpusConfig {
            facts_per_doc: k,
            facts_per_summary: s,
            min_facts_per_summary: None,
            divergence_rate: p,
            n_train: n,
            n_val: 0,
            n_test: 0,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn zero_divergence_rate() {
        let c = gen_corpus(&small(5, 2, 0.0, 10), 7).unwrap();
        assert_eq!(c.train.len(), 10);
        assert!(c.train.iter().all(|e| !e.divergent));
    }

    #[test]
    fn full_divergence_rate() {
        let c = gen_corpus(&small(5, 2, 1.0, 10), 7).unwrap();
        assert!(c.train.iter().all(|e| e.divergent));
    }

    #[test]
    fn divergent_count_is_exact() {
        let c = gen_corpus(&small(5, 2, 0.3, 1000), 3).unwrap();
        assert_eq!(c.train.iter().filter(|e| e.divergent).count(), 300);
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(
            gen_corpus(&small(2, 3, 0.0, 5), 1),
            Err(Error::InvalidConfig(_))
        ));
        let mut cfg = small(2, 1, 0.0, 5);
        cfg.n_values = 0;
        assert!(matches!(gen_corpus(&cfg, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn single_clause_templates() {
        let v = Vocab::new(5, 5, 5).unwrap();
        let f = [Fact::new(1, 2, 3)];
        assert_eq!(v.render(&render_document(&v, &f).unwrap()), "E1 has A2 V3 .");
        assert_eq!(v.render(&render_summary(&v, &f).unwrap()), "E1 A2 V3 .");
    }

    #[test]
    fn two_fact_token_counts() {
        let v = Vocab::new(5, 5, 5).unwrap();
        let f = [Fact::new(1, 2, 3), Fact::new(0, 4, 4)];
        assert_eq!(render_document(&v, &f).unwrap().len(), 10);
        assert_eq!(render_summary(&v, &f).unwrap().len(), 8);
    }

    #[test]
    fn empty_fact_list_rejected() {
        let v = Vocab::new(5, 5, 5).unwrap();
        assert!(matches!(render_document(&v, &[]), Err(Error::InvalidInput(_))));
        assert!(matches!(render_summary(&v, &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn examples_satisfy_invariants() {
        let cfg = small(5, 2, 0.5, 200);
        let c = gen_corpus(&cfg, 11).unwrap();
        for ex in &c.train {
            assert_eq!(parse_document(&c.vocab, &ex.input_tokens).unwrap(), ex.document_facts);
            let summary = parse_summary(&c.vocab, &ex.reference_tokens).unwrap();
            let mut pairs: Vec<_> = ex.document_facts.iter().map(|f| (f.entity, f.attribute)).collect();
            pairs.sort();
            pairs.dedup();
            assert_eq!(pairs.len(), ex.document_facts.len());
            let unsupported = summary.iter().filter(|f| !ex.document_facts.contains(f)).count();
            if ex.divergent {
                assert_eq!(unsupported, 1);
            } else {
                assert_eq!(unsupported, 0);
            }
        }
    }

    #[test]
    fn divergence_prefers_noise_prone_entities() {
        let cfg = small(5, 2, 0.3, 1000);
        let c = gen_corpus(&cfg, 5).unwrap();
        let cutoff = cfg.noise_prone_cutoff();
        let prone: Vec<_> = c.train.iter().filter(|e| e.document_facts[0].entity < cutoff).collect();
        let prone_divergent = prone.iter().filter(|e| e.divergent).count();
        // all 300 divergent slots fit into the ~400 noise-prone examples
        assert_eq!(prone_divergent, 300);
        for ex in prone.iter().filter(|e| e.divergent) {
            let s = parse_summary(&c.vocab, &ex.reference_tokens).unwrap();
            assert_ne!(s[0], ex.document_facts[0]);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small(5, 2, 0.3, 50);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_corpus(&a, &gen_corpus(&cfg, 9).unwrap()).unwrap();
        write_corpus(&b, &gen_corpus(&cfg, 9).unwrap()).unwrap();
        for f in ["vocab.txt", "train.jsonl", "val.jsonl", "test.jsonl"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
        assert_eq!(read_corpus(&a).unwrap(), gen_corpus(&cfg, 9).unwrap());
        assert_ne!(gen_corpus(&cfg, 10).unwrap(), gen_corpus(&cfg, 9).unwrap());
    }
}
