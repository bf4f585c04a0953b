//! Coverage, perplexity, passkey and corpus checks against independent oracles.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::Array2;
use poselab::coverage::coverage_probability;
use poselab::data::{
    generate_synthetic_corpus, load_token_corpus, write_token_corpus, CorpusFormat, Provenance, SyntheticKind,
    SyntheticLanguage, SyntheticSpec, TokenCorpus,
};
use poselab::evaluation::{
    make_passkey_example, passkey_sweep, sliding_window_perplexity, EvalModel, NextTokenScorer,
};
use poselab::model::{ModelConfig, ParameterSet};
use poselab::position_plan::{ExtensionConfig, PlanKind};
use poselab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi2_p(observed: &[f64], expected: &[f64], dof: f64) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

/// Exact two-chunk coverage: average over every cut and skip bias.
fn exact_two_chunk(lc: usize, lt: usize) -> Vec<f64> {
    let mut hits = vec![0u64; lt];
    for l0 in 1..lc {
        let short = l0.max(lc - l0);
        for u1 in 0..=lt - lc {
            for (d, h) in hits.iter_mut().enumerate() {
                if d < short || (d > u1 && d < u1 + lc) {
                    *h += 1;
                }
            }
        }
    }
    let cells = ((lc - 1) * (lt - lc + 1)) as f64;
    hits.into_iter().map(|h| h as f64 / cells).collect()
}

#[test]
fn coverage_matches_exact_enumeration() {
    let (lc, lt, trials) = (16, 96, 20_000);
    let exact = exact_two_chunk(lc, lt);
    let cfg = ExtensionConfig::new(lc, lt, 2).unwrap();
    let mc = coverage_probability(&cfg, PlanKind::Pose, trials, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
    for d in 0..lt {
        let p = exact[d];
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        // 4 sigma over 96 distances keeps the family-wise false alarm rate small
        assert!((mc[d] - p).abs() <= 4.0 * sigma + 1e-12, "d {d}: {} vs {p}", mc[d]);
    }
}

#[test]
fn randpos_coverage_is_near_one_with_many_positions() {
    // about (L_t - d) / 64 position pairs land at distance d, so misses stay rare until d nears L_t
    let cfg = ExtensionConfig::new(2048, 16384, 1).unwrap();
    let p = coverage_probability(&cfg, PlanKind::Randpos, 100, &mut ChaCha8Rng::seed_from_u64(32)).unwrap();
    assert!(p[..15000].iter().all(|&x| x >= 0.99));
}

#[test]
fn more_chunks_cover_more_long_distances() {
    let mean = |n: usize| {
        let cfg = ExtensionConfig::new(32, 256, n).unwrap();
        let p = coverage_probability(&cfg, PlanKind::Pose, 20_000, &mut ChaCha8Rng::seed_from_u64(n as u64)).unwrap();
        p[32..].iter().sum::<f64>() / 224.0
    };
    let (a, b, c) = (mean(2), mean(3), mean(32));
    assert!(a < b && b < c, "{a} {b} {c}");
}

/// Bigram-style double: logits depend on the current token and, optionally,
/// on how many tokens the window holds before it.
struct ContextDouble {
    vocab: usize,
    context_weight: f64,
    calls: RefCell<Vec<Vec<u32>>>,
}

impl ContextDouble {
    fn logit(&self, token: u32, target: usize, context: usize) -> f64 {
        if target == (token as usize + 1) % self.vocab {
            0.37 * token as f64 + self.context_weight * context as f64
        } else {
            0.0
        }
    }

    fn nll(&self, token: u32, target: u32, context: usize) -> f64 {
        let row: Vec<f64> = (0..self.vocab).map(|t| self.logit(token, t, context)).collect();
        let z = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        z - row[target as usize]
    }
}

impl NextTokenScorer for ContextDouble {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn sequence_logits(&self, tokens: &[u32], positions: &[usize]) -> Result<Array2<f64>> {
        assert_eq!(positions, (0..tokens.len()).collect::<Vec<_>>().as_slice());
        self.calls.borrow_mut().push(tokens.to_vec());
        Ok(Array2::from_shape_fn((tokens.len(), self.vocab), |(i, t)| self.logit(tokens[i], t, i + 1)))
    }
}

#[test]
fn sliding_window_matches_enumeration() {
    // 13 tokens give 12 prediction slots; window 8, stride 4
    let tokens: Vec<u32> = (0..13).map(|i| (i * 5 % 16) as u32).collect();
    let model = ContextDouble {
        vocab: 16,
        context_weight: 0.11,
        calls: RefCell::new(Vec::new()),
    };
    let r = sliding_window_perplexity(&model, &tokens, 8, 4).unwrap();
    // slots 0..8 scored in the window starting at 0 with context 1..=8,
    // slots 8..12 in the window starting at 4 with context 5..=8
    let scored: Vec<(usize, usize)> = (0..8).map(|s| (s, s + 1)).chain((8..12).map(|s| (s, s - 3))).collect();
    let expected: f64 = scored.iter().map(|&(s, c)| model.nll(tokens[s], tokens[s + 1], c)).sum::<f64>() / 12.0;
    assert_eq!(r.scored_tokens, 12);
    assert_eq!(r.windows, 2);
    assert!((r.mean_nll - expected).abs() < 1e-12);
    let calls = model.calls.borrow();
    assert_eq!(calls[0], tokens[0..8]);
    assert_eq!(calls[1], tokens[4..12]);
}

#[test]
fn stride_does_not_matter_without_context_effects() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tokens: Vec<u32> = (0..200).map(|_| rng.random_range(0..16)).collect();
    let model = ContextDouble {
        vocab: 16,
        context_weight: 0.0,
        calls: RefCell::new(Vec::new()),
    };
    let direct: f64 = (0..199).map(|s| model.nll(tokens[s], tokens[s + 1], 0)).sum::<f64>() / 199.0;
    for (w, s) in [(199, 199), (64, 64), (64, 16), (50, 7), (1, 1)] {
        let r = sliding_window_perplexity(&model, &tokens, w, s).unwrap();
        assert_eq!(r.scored_tokens, 199);
        assert!((r.mean_nll - direct).abs() < 1e-12, "window {w} stride {s}");
    }
}

#[test]
fn uniform_output_gives_vocab_perplexity() {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        train_window: 16,
        target_window: 64,
        ..Default::default()
    };
    let mut p = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let e = p.layout.entries.iter().find(|e| e.name == "unembed").unwrap().clone();
    p.weights.data[e.range()].iter_mut().for_each(|w| *w = 0.0);
    let model = EvalModel::new(&p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens: Vec<u32> = (0..100).map(|_| rng.random_range(0..64)).collect();
    let r = sliding_window_perplexity(&model, &tokens, 32, 16).unwrap();
    assert!((r.perplexity - 64.0).abs() / 64.0 < 0.01);
}

#[test]
fn single_window_equals_one_forward_pass() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        train_window: 16,
        target_window: 64,
        init_std: 0.3,
        ..Default::default()
    };
    let p = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let model = EvalModel::new(&p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens: Vec<u32> = (0..41).map(|_| rng.random_range(0..64)).collect();
    let r = sliding_window_perplexity(&model, &tokens, 40, 40).unwrap();
    let positions: Vec<usize> = (0..40).collect();
    let logits = model.sequence_logits(&tokens[..40], &positions).unwrap();
    let nll = poselab::model::loss_next_token(&logits.view(), &tokens[1..]).unwrap();
    assert!((r.perplexity - nll.exp()).abs() <= 1e-12 * nll.exp());
}

/// Reads the passkey straight out of the prompt: after `Q K` it emits the
/// digits that followed the earlier `K`.
struct CopyOracle {
    lang: SyntheticLanguage,
}

impl NextTokenScorer for CopyOracle {
    fn vocab_size(&self) -> usize {
        self.lang.vocab().vocab_size
    }

    fn sequence_logits(&self, tokens: &[u32], _positions: &[usize]) -> Result<Array2<f64>> {
        let v = self.lang.vocab();
        let q = tokens.iter().rposition(|&t| t == v.query_marker());
        let mut out = Array2::zeros((tokens.len(), v.vocab_size));
        if let Some(q) = q {
            let key = tokens[q + 1];
            let stmt = tokens.iter().position(|&t| t == key).unwrap();
            for slot in q + 1..tokens.len() {
                let next = tokens[stmt + 1 + slot - (q + 1)];
                out[[slot, next as usize]] = 1.0;
            }
        }
        Ok(out)
    }
}

fn lang() -> SyntheticLanguage {
    SyntheticLanguage::new(SyntheticSpec::default()).unwrap()
}

#[test]
fn copying_oracle_always_retrieves() {
    let oracle = CopyOracle { lang: lang() };
    let r = passkey_sweep(&oracle, &lang(), &[24, 64, 128, 256, 1000], 50, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(r.iter().all(|x| x.accuracy == 1.0 && x.successes == 50));
}

#[test]
fn random_model_is_at_chance() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        train_window: 64,
        target_window: 256,
        init_std: 0.5,
        ..Default::default()
    };
    let p = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let model = EvalModel::new(&p).unwrap();
    let r = passkey_sweep(&model, &lang(), &[64, 128], 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    for x in &r {
        assert!((0.0..=0.02).contains(&x.accuracy), "{x:?}");
    }
}

#[test]
fn passkey_sweep_is_deterministic() {
    let oracle = CopyOracle { lang: lang() };
    let a = passkey_sweep(&oracle, &lang(), &[40], 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = passkey_sweep(&oracle, &lang(), &[40], 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn passkey_insert_position_is_uniform() {
    let lang = lang();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // filler span of a 256-token example is 256 - 13 = 243, so 244 offsets
    let buckets = 16;
    let mut observed = vec![0.0; buckets];
    let n = 1000;
    for _ in 0..n {
        let ex = make_passkey_example(256, &mut rng, &lang).unwrap();
        observed[ex.insert_position * buckets / 244] += 1.0;
    }
    let mut sizes = vec![0.0; buckets];
    (0..244).for_each(|v| sizes[v * buckets / 244] += 1.0);
    let expected: Vec<f64> = sizes.iter().map(|s| s / 244.0 * n as f64).collect();
    let p = chi2_p(&observed, &expected, (buckets - 1) as f64);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn markov_text_follows_its_table() {
    let spec = SyntheticSpec::default();
    let lang = SyntheticLanguage::new(spec).unwrap();
    let corpus = generate_synthetic_corpus(SyntheticKind::MarkovText, &spec, 100, 10_000, 12).unwrap();
    let mut counts: HashMap<(u32, u32), HashMap<u32, f64>> = HashMap::new();
    for doc in &corpus.documents {
        for w in doc.windows(3) {
            *counts.entry((w[0], w[1])).or_default().entry(w[2]).or_default() += 1.0;
        }
    }
    let (mut observed, mut expected, mut dof) = (Vec::new(), Vec::new(), 0.0);
    for (&(a, b), next) in &counts {
        let total: f64 = next.values().sum();
        let succ = lang.table.successors(a, b);
        for t in next.keys() {
            assert!(succ.iter().any(|&(s, _)| s == *t), "transition {a} {b} -> {t} not in table");
        }
        // pool contexts with enough data for the normal approximation
        if succ.iter().all(|&(_, p)| p * total >= 5.0) {
            for &(s, p) in succ {
                observed.push(next.get(&s).copied().unwrap_or(0.0));
                expected.push(p * total);
            }
            dof += (succ.len() - 1) as f64;
        }
    }
    assert!(dof > 1000.0);
    let p = chi2_p(&observed, &expected, dof);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn recall_documents_restate_earlier_values() {
    let spec = SyntheticSpec::default();
    let lang = SyntheticLanguage::new(spec).unwrap();
    let v = lang.vocab();
    let corpus = generate_synthetic_corpus(SyntheticKind::RecallTask, &spec, 20, 600, 3).unwrap();
    let mut episodes = 0;
    for doc in &corpus.documents {
        for q in (0..doc.len()).filter(|&i| doc[i] == v.query_marker()) {
            if q + 7 > doc.len() {
                continue;
            }
            let key = doc[q + 1];
            assert!(v.is_key(key));
            // nearest earlier statement of this key
            let stmt = (0..q).rev().find(|&i| doc[i] == key && (i == 0 || doc[i - 1] != v.query_marker())).unwrap();
            assert_eq!(doc[stmt + 1..stmt + 6], doc[q + 2..q + 7]);
            assert!(q - stmt <= 6 + spec.max_gap);
            episodes += 1;
        }
    }
    assert!(episodes > 100);
}

#[test]
fn corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let docs: Vec<Vec<u32>> = (0..30)
        .map(|_| (0..rng.random_range(1..300)).map(|_| rng.random_range(0..1000)).collect())
        .collect();
    let corpus = TokenCorpus::new(docs, 1000, Provenance::PreTokenized).unwrap();
    let path = dir.path().join("c.bin");
    write_token_corpus(&path, &corpus).unwrap();
    let back = load_token_corpus(&path, CorpusFormat::BinaryU16 { vocab_size: 1000 }, 0).unwrap();
    assert_eq!(back.dropped, 0);
    assert_eq!(back.corpus.documents, corpus.documents);

    let long = load_token_corpus(&path, CorpusFormat::BinaryU16 { vocab_size: 1000 }, 100).unwrap();
    let kept = corpus.documents.iter().filter(|d| d.len() >= 100).count();
    assert_eq!(long.corpus.len(), kept);
    assert_eq!(long.dropped, 30 - kept);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SyntheticSpec::default();
    for kind in [SyntheticKind::RecallTask, SyntheticKind::MarkovText] {
        let a = generate_synthetic_corpus(kind, &spec, 5, 300, 77).unwrap();
        let b = generate_synthetic_corpus(kind, &spec, 5, 300, 77).unwrap();
        assert_eq!(a, b);
        assert!(a.documents.iter().flatten().all(|&t| (t as usize) < spec.vocab.vocab_size));
    }
}
