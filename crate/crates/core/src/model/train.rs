//! Next-token training driven by sampled position plans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use super::params::{ParamBuffer, ParameterSet};
use super::transformer::{loss_and_grad, Inputs};
use crate::data::TokenCorpus;
use crate::error::{Error, Result};
use crate::position_plan::{build_plan, ContentStrategy, ExtensionConfig, PlanKind};
use crate::rope::RopeParams;

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub plan_kind: PlanKind,
    pub chunk_count: usize,
    #[serde(default)]
    pub content_strategy: ContentStrategy,
    pub seed: u64,
    /// Worker count. Results are deterministic for a fixed value; 1 is the
    /// reference summation order.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 3e-4,
            warmup_steps: 10,
            adamw: AdamWConfig::default(),
            max_grad_norm: Some(1.0),
            plan_kind: PlanKind::Pose,
            chunk_count: 2,
            content_strategy: ContentStrategy::UniformBias,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("train.lr must be non-negative"));
        }
        if self.threads < 1 {
            return Err(Error::config("train.threads must be at least 1"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.max_grad_norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn extension(&self, model: &ModelConfig) -> Result<ExtensionConfig> {
        let ext = ExtensionConfig {
            original_len: model.train_window,
            target_len: model.target_window,
            chunk_count: self.chunk_count,
            content_strategy: self.content_strategy,
        };
        ext.validate()?;
        Ok(ext)
    }

    /// Window length of each training sequence.
    pub fn window(&self, model: &ModelConfig) -> usize {
        match self.plan_kind {
            PlanKind::Full => model.target_window,
            PlanKind::Pose | PlanKind::Randpos => model.train_window,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }
}

/// `batch` sequences of `seq_len` tokens with positions and next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TrainBatch {
    pub fn inputs(&self) -> Inputs<'_> {
        Inputs {
            tokens: &self.tokens,
            positions: &self.positions,
            batch: self.batch,
            seq_len: self.seq_len,
        }
    }

    /// Sequences `range` as their own batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TrainBatch {
        let rows = range.start * self.seq_len..range.end * self.seq_len;
        TrainBatch {
            tokens: self.tokens[rows.clone()].to_vec(),
            positions: self.positions[rows.clone()].to_vec(),
            targets: self.targets[rows].to_vec(),
            batch: range.len(),
            seq_len: self.seq_len,
        }
    }
}

/// Draws one document per example and lays it out with a fresh plan.
pub fn sample_batch<R: Rng + ?Sized>(
    corpus: &TokenCorpus,
    kind: PlanKind,
    ext: &ExtensionConfig,
    batch: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    if corpus.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let mut out = TrainBatch {
        tokens: Vec::new(),
        positions: Vec::new(),
        targets: Vec::new(),
        batch,
        seq_len: 0,
    };
    for _ in 0..batch {
        let doc = &corpus.documents[rng.random_range(0..corpus.len())];
        // the last token only ever serves as a target
        let text_len = doc.len().saturating_sub(1);
        let mut plan = build_plan(kind, ext, text_len, rng)?;
        if kind == PlanKind::Full {
            // full-length windows read from a uniform offset, as RandPos does
            let slack = text_len - plan.len();
            if slack > 0 {
                let o = rng.random_range(0..=slack);
                plan.content_index.iter_mut().for_each(|c| *c += o);
            }
        }
        out.seq_len = plan.len();
        out.tokens.extend(plan.content_index.iter().map(|&c| doc[c]));
        out.targets.extend(plan.content_index.iter().map(|&c| doc[c + 1]));
        out.positions.extend_from_slice(&plan.position_index);
    }
    Ok(out)
}

/// Loss and gradient of a batch split into `threads` contiguous shards.
/// Shard gradients are summed in shard order.
pub fn batch_loss_and_grad(
    params: &ParameterSet,
    rope: &RopeParams,
    batch: &TrainBatch,
    threads: usize,
) -> Result<(f64, ParamBuffer)> {
    let threads = threads.clamp(1, batch.batch.max(1));
    if threads == 1 {
        return loss_and_grad(params, rope, &batch.inputs(), &batch.targets, 1.0);
    }
    let per = batch.batch.div_ceil(threads);
    let shards: Vec<TrainBatch> = (0..batch.batch)
        .step_by(per)
        .map(|s| batch.slice(s..(s + per).min(batch.batch)))
        .collect();
    let total = batch.targets.len() as f64;
    let results: Vec<Result<(f64, ParamBuffer)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| {
                scope.spawn(move || {
                    let w = shard.targets.len() as f64 / total;
                    loss_and_grad(params, rope, &shard.inputs(), &shard.targets, w).map(|(l, g)| (l * w, g))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut loss = 0.0;
    let mut grads: Option<ParamBuffer> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    Ok((loss, grads.expect("at least one shard")))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub loss_trace: Vec<f64>,
}

/// Trains from a seeded initialisation. Weights come from stream 0 of the
/// seed, batches and plans from stream 1.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, corpus: &TokenCorpus) -> Result<TrainOutcome> {
    train_with_progress(model_cfg, cfg, corpus, |_, _| {})
}

pub fn train_with_progress(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &TokenCorpus,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    let ext = cfg.extension(model_cfg)?;
    if corpus.vocab_size > model_cfg.vocab_size {
        return Err(Error::Data(format!(
            "corpus vocab {} exceeds model vocab {}",
            corpus.vocab_size, model_cfg.vocab_size
        )));
    }
    let needed = cfg.window(model_cfg) + 1;
    if corpus.is_empty() || corpus.min_doc_len() < needed {
        return Err(Error::Data(format!(
            "every document needs at least {needed} tokens (shortest has {})",
            corpus.min_doc_len()
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);

    let mut params = ParameterSet::init(model_cfg, &mut init_rng)?;
    let rope = model_cfg.rope()?;
    let mut opt = OptimizerState::new(&params.layout);
    let schedule = cfg.schedule();
    let mut loss_trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = sample_batch(corpus, cfg.plan_kind, &ext, cfg.batch_size, &mut data_rng)?;
        let (loss, mut grads) = batch_loss_and_grad(&params, &rope, &batch, cfg.threads)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NumericOverflow {
                layer: model_cfg.n_layers,
                stage: "gradient",
            });
        }
        if let Some(max) = cfg.max_grad_norm {
            let norm = grads.norm();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        adamw_step(&mut params.weights.data, &grads.data, &mut opt, &cfg.adamw, &schedule);
        loss_trace.push(loss);
        progress(step, loss);
    }
    Ok(TrainOutcome { params, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, SyntheticKind, SyntheticSpec};

    fn small_model() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            train_window: 16,
            target_window: 48,
            ..Default::default()
        }
    }

    fn corpus() -> TokenCorpus {
        generate_synthetic_corpus(SyntheticKind::RecallTask, &SyntheticSpec::default(), 8, 80, 1).unwrap()
    }

    #[test]
    fn zero_lr_keeps_initial_weights() {
        let m = small_model();
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 2,
            lr: 0.0,
            ..Default::default()
        };
        let out = train(&m, &cfg, &corpus()).unwrap();
        let init = ParameterSet::init(&m, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(out.params.weights, init.weights);
    }

    #[test]
    fn short_documents_are_a_data_error() {
        let m = small_model();
        let c = generate_synthetic_corpus(SyntheticKind::MarkovText, &SyntheticSpec::default(), 2, 16, 1).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(train(&m, &cfg, &c), Err(Error::Data(_))));
    }

    #[test]
    fn batch_targets_follow_content() {
        let m = small_model();
        let c = corpus();
        let ext = ExtensionConfig::new(16, 48, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = sample_batch(&c, PlanKind::Pose, &ext, 3, &mut rng).unwrap();
        assert_eq!(b.tokens.len(), 3 * 16);
        assert_eq!(b.seq_len, m.train_window);
        for row in b.positions.chunks(16) {
            assert!(row.windows(2).all(|w| w[0] < w[1]));
            assert!(*row.last().unwrap() < 48);
        }
    }

    #[test]
    fn full_windows_start_anywhere_in_the_document() {
        let c = corpus();
        let ext = ExtensionConfig::new(16, 48, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = sample_batch(&c, PlanKind::Full, &ext, 64, &mut rng).unwrap();
        assert_eq!(b.seq_len, 48);
        let mut firsts = std::collections::HashSet::new();
        for (toks, (tgts, pos)) in b.tokens.chunks(48).zip(b.targets.chunks(48).zip(b.positions.chunks(48))) {
            assert_eq!(pos, (0..48).collect::<Vec<_>>().as_slice());
            assert_eq!(toks[1..], tgts[..47]);
            let doc = c.documents.iter().find(|d| d.windows(49).any(|w| w[..48] == *toks)).unwrap();
            firsts.insert(doc.windows(48).position(|w| w == toks).unwrap());
        }
        assert!(firsts.len() > 5);
    }

    #[test]
    fn sharded_gradients_match_single_worker() {
        let m = small_model();
        let c = corpus();
        let ext = ExtensionConfig::new(16, 48, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = sample_batch(&c, PlanKind::Pose, &ext, 4, &mut rng).unwrap();
        let params = ParameterSet::init(&m, &mut rng).unwrap();
        let rope = m.rope().unwrap();
        let (l1, g1) = batch_loss_and_grad(&params, &rope, &b, 1).unwrap();
        let (l3, g3) = batch_loss_and_grad(&params, &rope, &b, 3).unwrap();
        assert!((l1 - l3).abs() < 1e-12);
        for (a, b) in g1.data.iter().zip(&g3.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let (l3b, g3b) = batch_loss_and_grad(&params, &rope, &b, 3).unwrap();
        assert_eq!(l3.to_bits(), l3b.to_bits());
        assert_eq!(g3, g3b);
    }
}
