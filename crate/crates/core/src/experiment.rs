//! Declarative training runs: a versioned JSON config resolved into a corpus,
//! a model and a training schedule, with artifacts and a manifest on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_corpus, load_token_corpus, CorpusFormat, SyntheticKind, SyntheticSpec, TokenCorpus};
use crate::error::{Error, Result};
use crate::model::{checkpoint, train::train_with_progress, ModelConfig, TrainConfig, TrainOutcome};
use crate::util::write_atomic;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileFormat {
    BinaryU16,
    Utf8Text,
}

/// Where training text comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum CorpusSource {
    Synthetic {
        kind: SyntheticKind,
        num_docs: usize,
        doc_len: usize,
        seed: u64,
        #[serde(default)]
        spec: SyntheticSpec,
    },
    File {
        path: PathBuf,
        format: FileFormat,
        /// Vocabulary of a binary file; byte text always uses 256.
        #[serde(default)]
        vocab_size: Option<usize>,
    },
}

impl CorpusSource {
    /// Loads or generates the corpus. File documents shorter than
    /// `min_doc_len` are dropped.
    pub fn resolve(&self, min_doc_len: usize) -> Result<TokenCorpus> {
        match self {
            Self::Synthetic {
                kind,
                num_docs,
                doc_len,
                seed,
                spec,
            } => generate_synthetic_corpus(*kind, spec, *num_docs, *doc_len, *seed),
            Self::File { path, format, vocab_size } => {
                let format = match format {
                    FileFormat::Utf8Text => CorpusFormat::Utf8Text,
                    FileFormat::BinaryU16 => CorpusFormat::BinaryU16 {
                        vocab_size: vocab_size
                            .ok_or_else(|| Error::config("corpus.vocab_size is required for binary-u16 files"))?,
                    },
                };
                let loaded = load_token_corpus(path, format, min_doc_len)?;
                Ok(loaded.corpus)
            }
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSource,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.train.extension(&self.model)?;
        if let CorpusSource::Synthetic { spec, .. } = &self.corpus {
            if spec.vocab.vocab_size > self.model.vocab_size {
                return Err(Error::config("corpus.spec.vocab.vocab_size exceeds model.vocab_size"));
            }
        }
        Ok(())
    }
}

/// The resolved configuration plus the files a command produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, threads: usize, config: impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            config: serde_json::to_value(config)?,
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}

pub fn loss_csv(trace: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (step, &loss) in trace.iter().enumerate() {
        w.serialize(LossRow { step, loss })?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

pub struct RunArtifacts {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
    pub manifest: PathBuf,
}

/// Trains and writes `ckpt.bin`, `loss.csv` and `manifest.json` into `out_dir`.
pub fn run_training(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let corpus = cfg.corpus.resolve(cfg.train.window(&cfg.model) + 1)?;
    log::info!(
        "training {} steps on {} documents ({} tokens), plan {}",
        cfg.train.steps,
        corpus.len(),
        corpus.total_tokens(),
        cfg.train.plan_kind
    );
    let every = (cfg.train.steps / 20).max(1);
    let outcome = train_with_progress(&cfg.model, &cfg.train, &corpus, |step, loss| {
        if step % every == 0 || step + 1 == cfg.train.steps {
            log::info!("step {step} loss {loss:.4}");
        }
    })?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let checkpoint_path = cfg.out_dir.join("ckpt.bin");
    let loss_path = cfg.out_dir.join("loss.csv");
    let manifest_path = cfg.out_dir.join("manifest.json");
    checkpoint::save(&checkpoint_path, &outcome.params)?;
    write_atomic(&loss_path, &loss_csv(&outcome.loss_trace)?)?;
    let mut manifest = Manifest::new("train", cfg.train.seed, cfg.train.threads, cfg)?;
    manifest.outputs = vec![checkpoint_path.clone(), loss_path.clone()];
    manifest.write(&manifest_path)?;
    Ok(RunArtifacts {
        outcome,
        checkpoint: checkpoint_path,
        loss_trace: loss_path,
        manifest: manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out_dir: PathBuf) -> RunConfig {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                train_window: 16,
                target_window: 48,
                ..Default::default()
            },
            train: TrainConfig {
                steps: 3,
                batch_size: 2,
                ..Default::default()
            },
            corpus: CorpusSource::Synthetic {
                kind: SyntheticKind::RecallTask,
                num_docs: 4,
                doc_len: 64,
                seed: 1,
                spec: SyntheticSpec::default(),
            },
            out_dir,
        }
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = tiny("out".into());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);

        let minimal = r#"{
            "schema_version": 1,
            "model": {"vocab_size": 64, "n_layers": 1, "d_model": 16, "n_heads": 2,
                      "train_window": 16, "target_window": 48},
            "train": {"steps": 1, "batch_size": 1, "lr": 0.001, "warmup_steps": 0,
                      "max_grad_norm": null, "plan_kind": "pose", "chunk_count": 2, "seed": 3},
            "corpus": {"source": "synthetic", "kind": "markov-text", "num_docs": 2, "doc_len": 40, "seed": 0},
            "out_dir": "x"
        }"#;
        let cfg = RunConfig::from_json(minimal).unwrap();
        assert_eq!(cfg.model.rope_base, 10_000.0);
        assert_eq!(cfg.train.threads, 1);
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let mut cfg = tiny("out".into());
        cfg.schema_version = 2;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("schema_version"), "{err}");
    }

    #[test]
    fn run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path().join("run"));
        let a = run_training(&cfg).unwrap();
        let back = checkpoint::load(&a.checkpoint).unwrap();
        assert_eq!(back.weights, a.outcome.params.weights);
        let loss = std::fs::read_to_string(&a.loss_trace).unwrap();
        assert_eq!(loss.lines().count(), 4);
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&a.manifest).unwrap()).unwrap();
        assert_eq!(m.seed, cfg.train.seed);
        assert_eq!(serde_json::from_value::<RunConfig>(m.config).unwrap(), cfg);
    }
}
