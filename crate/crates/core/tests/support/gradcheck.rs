//! Analytic gradients against central finite differences of independently
//! computed forward values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqcal_core::calibrate::{
    combined_loss, f_len, content_len, rank_loss, rank_loss_len, AnnotatedCandidate, AnnotatedCandidateSet,
    CalibConfig, CalibItem, CandidatePair, KlDirection,
};
use seqcal_core::corpus::{Example, TokenId};
use seqcal_core::diffmath::Graph;
use seqcal_core::model::{with_eos, ModelConfig, Seq2SeqModel};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

fn tiny_model(seed: u64, attention: bool) -> Seq2SeqModel {
    Seq2SeqModel::new(ModelConfig {
        vocab_size: 8,
        embed_dim: 3,
        hidden_dim: 4,
        attention_dim: 3,
        attention,
        max_input_len: 6,
        max_output_len: 6,
        init_seed: seed,
    })
    .unwrap()
}

fn content(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<TokenId> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| rng.gen_range(3..8)).collect()
}

/// A random example with three scored candidates.
struct Instance {
    example: Example,
    set: AnnotatedCandidateSet,
    pairs: Vec<CandidatePair>,
}

fn instance(rng: &mut ChaCha8Rng, id: u64) -> Instance {
    let example = Example {
        id,
        input_tokens: content(rng, 2, 6),
        reference_tokens: content(rng, 2, 5),
        document_facts: Vec::new(),
        divergent: false,
    };
    let candidates = (0..3)
        .map(|i| AnnotatedCandidate {
            tokens: with_eos(&content(rng, 1, 5)),
            logprob: 0.0,
            score: i as f64 / 2.0,
        })
        .collect();
    let pairs = vec![
        CandidatePair { pos: 2, neg: 0, score_pos: 1.0, score_neg: 0.0 },
        CandidatePair { pos: 1, neg: 0, score_pos: 0.5, score_neg: 0.0 },
        CandidatePair { pos: 2, neg: 1, score_pos: 1.0, score_neg: 0.5 },
    ];
    Instance {
        example,
        set: AnnotatedCandidateSet { example_id: id, candidates },
        pairs,
    }
}

fn items(batch: &[Instance]) -> Vec<CalibItem<'_>> {
    batch
        .iter()
        .map(|i| CalibItem {
            example: &i.example,
            set: &i.set,
            pairs: i.pairs.clone(),
        })
        .collect()
}

/// Relative error between the analytic gradient and central differences of
/// `value`, over every parameter scalar.
fn gradient_error(model: &Seq2SeqModel, grads: &[Vec<f64>], value: impl Fn(&Seq2SeqModel) -> f64) -> f64 {
    let mut work = model.clone();
    let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
    for (p, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            let orig = work.params().get(p).data()[j];
            work.params_mut().get_mut(p).data_mut()[j] = orig + EPS;
            let up = value(&work);
            work.params_mut().get_mut(p).data_mut()[j] = orig - EPS;
            let down = value(&work);
            work.params_mut().get_mut(p).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            diff += (numeric - analytic).powi(2);
            norm_a += analytic * analytic;
            norm_n += numeric * numeric;
        }
    }
    let scale = norm_a.sqrt().max(norm_n.sqrt());
    assert!(scale > 1e-8, "gradient vanished; the instance checks nothing");
    diff.sqrt() / scale
}

fn seq_lp(model: &Seq2SeqModel, x: &[TokenId], y: &[TokenId]) -> f64 {
    model.sequence_log_prob(x, y).unwrap()
}

/// Forward value of the KL term from plain (non-graph) distributions.
fn kl_value(model: &Seq2SeqModel, reference: &Seq2SeqModel, x: &[TokenId], y: &[TokenId], dir: KlDirection) -> f64 {
    let cur = model.token_log_probs(x, y).unwrap();
    let refr = reference.token_log_probs(x, y).unwrap();
    let total: f64 = cur
        .data()
        .iter()
        .zip(refr.data())
        .map(|(&c, &r)| match dir {
            KlDirection::RefToCurrent => r.exp() * (r - c),
            KlDirection::CurrentToRef => c.exp() * (c - r),
        })
        .sum();
    total / y.len() as f64
}

/// Forward value of the combined objective, assembled from scalar pieces.
fn combined_value(model: &Seq2SeqModel, reference: &Seq2SeqModel, batch: &[Instance], c: &CalibConfig) -> f64 {
    let b = batch.len() as f64;
    batch
        .iter()
        .map(|inst| {
            let x = &inst.example.input_tokens;
            let ref_len = content_len(&inst.example.reference_tokens);
            let mut total = 0.0;
            if c.gamma > 0.0 {
                let hinge: f64 = inst
                    .pairs
                    .iter()
                    .map(|p| {
                        let (yp, yn) = (&inst.set.candidates[p.pos].tokens, &inst.set.candidates[p.neg].tokens);
                        let (lp, ln) = (seq_lp(model, x, yp), seq_lp(model, x, yn));
                        if c.use_f_len {
                            let fp = f_len(content_len(yp), ref_len, c.f_len_floor).unwrap();
                            let fn_ = f_len(content_len(yn), ref_len, c.f_len_floor).unwrap();
                            rank_loss_len(lp, ln, fp, fn_, c.alpha, c.beta)
                        } else {
                            rank_loss(lp, ln, c.beta)
                        }
                    })
                    .sum();
                total += c.gamma * hinge / inst.pairs.len() as f64;
            }
            let y = with_eos(&inst.example.reference_tokens);
            if c.lambda > 0.0 {
                total += c.lambda * kl_value(model, reference, x, &y, c.kl_direction);
            }
            if c.mle_weight > 0.0 {
                total -= c.mle_weight * seq_lp(model, x, &y) / y.len() as f64;
            }
            total / b
        })
        .sum()
}

/// Smallest distance of any hinge argument from its kink.
fn kink_distance(model: &Seq2SeqModel, batch: &[Instance], c: &CalibConfig) -> f64 {
    let mut best = f64::INFINITY;
    for inst in batch {
        let x = &inst.example.input_tokens;
        let ref_len = content_len(&inst.example.reference_tokens);
        for p in &inst.pairs {
            let (yp, yn) = (&inst.set.candidates[p.pos].tokens, &inst.set.candidates[p.neg].tokens);
            let (mut lp, mut ln) = (seq_lp(model, x, yp), seq_lp(model, x, yn));
            if c.use_f_len {
                lp *= c.alpha * f_len(content_len(yp), ref_len, c.f_len_floor).unwrap();
                ln *= c.alpha * f_len(content_len(yn), ref_len, c.f_len_floor).unwrap();
            }
            best = best.min((c.beta - lp + ln).abs());
        }
    }
    best
}

/// Relative errors of `INSTANCES` random checks of `combined_loss` under
/// configs drawn by `make_config`.
fn check_combined(name: &str, make_config: impl Fn(&mut ChaCha8Rng) -> CalibConfig) -> Vec<f64> {
    let mut errors = Vec::new();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let model = tiny_model(seed, seed % 4 != 3);
        let reference = tiny_model(seed + 500, seed % 4 != 3);
        let batch: Vec<Instance> = (0..2).map(|i| instance(&mut rng, i)).collect();
        let mut config = make_config(&mut rng);
        while config.gamma > 0.0 && kink_distance(&model, &batch, &config) < 1e-3 {
            config.beta += 0.37;
        }
        let (entry, grads) = combined_loss(&model, &reference, &items(&batch), &config).unwrap();
        let expected = combined_value(&model, &reference, &batch, &config);
        assert!(
            (entry.total - expected).abs() <= 1e-10 * expected.abs().max(1.0),
            "{name}: value {} vs {expected}",
            entry.total
        );
        errors.push(gradient_error(&model, &grads, |m| combined_value(m, &reference, &batch, &config)));
    }
    errors
}

pub fn nll_loss_errors() -> Vec<f64> {
    let mut errors = Vec::new();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = tiny_model(seed, seed % 2 == 0);
        let data: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..3)
            .map(|_| (content(&mut rng, 1, 6), with_eos(&content(&mut rng, 0, 5))))
            .collect();
        let batch: Vec<(&[TokenId], &[TokenId])> = data.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
        let mut g = Graph::new();
        let pv = model.bind(&mut g);
        let root = model.nll_loss_graph(&mut g, &pv, &batch).unwrap();
        let value = g.value(root).item().unwrap();
        assert!((value - model.nll_loss(&batch).unwrap()).abs() < 1e-12);
        g.backward(root).unwrap();
        let grads = g.gradients(&pv);
        errors.push(gradient_error(&model, &grads, |m| m.nll_loss(&batch).unwrap()));
    }
    errors
}

pub fn rank_loss_errors() -> Vec<f64> {
    check_combined("rank_loss", |rng| CalibConfig {
        beta: rng.gen_range(0.0..3.0),
        gamma: rng.gen_range(0.5..2.0),
        lambda: 0.0,
        ..CalibConfig::default()
    })
}

pub fn rank_loss_len_errors() -> Vec<f64> {
    check_combined("rank_loss_len", |rng| CalibConfig {
        beta: rng.gen_range(0.0..3.0),
        alpha: rng.gen_range(0.2..2.0),
        use_f_len: true,
        f_len_floor: if rng.gen_bool(0.5) { Some(0.0) } else { None },
        gamma: 1.0,
        lambda: 0.0,
        ..CalibConfig::default()
    })
}

pub fn kl_reg_loss_errors() -> Vec<f64> {
    check_combined("kl_reg_loss", |rng| CalibConfig {
        gamma: 0.0,
        lambda: rng.gen_range(0.5..2.0),
        kl_direction: if rng.gen_bool(0.5) {
            KlDirection::RefToCurrent
        } else {
            KlDirection::CurrentToRef
        },
        ..CalibConfig::default()
    })
}

pub fn combined_loss_errors() -> Vec<f64> {
    check_combined("combined_loss", |rng| CalibConfig {
        beta: rng.gen_range(0.0..3.0),
        alpha: rng.gen_range(0.2..2.0),
        use_f_len: rng.gen_bool(0.5),
        gamma: rng.gen_range(0.1..2.0),
        lambda: rng.gen_range(0.1..2.0),
        mle_weight: if rng.gen_bool(0.5) { rng.gen_range(0.1..1.0) } else { 0.0 },
        ..CalibConfig::default()
    })
}
