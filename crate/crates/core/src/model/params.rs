//! Flat parameter storage with a named canonical layout.
//!
//! All weights live in one `Vec<f64>`; tensors are views into it. The order
//! of [`ParamLayout::entries`] is the canonical order used by checkpoints.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Matrix,
    NormGain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Indices of one layer's tensors inside [`ParamLayout::entries`].
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub embed: usize,
    pub layers: Vec<LayerIds>,
    pub final_norm: usize,
    pub unembed: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize, kind: ParamKind| {
            entries.push(ParamEntry {
                name,
                offset,
                rows,
                cols,
                kind,
            });
            offset += rows * cols;
            entries.len() - 1
        };
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ffn_dim());
        let embed = push("tok_embed".into(), v, d, ParamKind::Embedding);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerIds {
                attn_norm: push(format!("layers.{l}.attn_norm"), 1, d, ParamKind::NormGain),
                wq: push(format!("layers.{l}.wq"), d, d, ParamKind::Matrix),
                wk: push(format!("layers.{l}.wk"), d, d, ParamKind::Matrix),
                wv: push(format!("layers.{l}.wv"), d, d, ParamKind::Matrix),
                wo: push(format!("layers.{l}.wo"), d, d, ParamKind::Matrix),
                ffn_norm: push(format!("layers.{l}.ffn_norm"), 1, d, ParamKind::NormGain),
                w_up: push(format!("layers.{l}.w_up"), d, f, ParamKind::Matrix),
                w_down: push(format!("layers.{l}.w_down"), f, d, ParamKind::Matrix),
            })
            .collect();
        let final_norm = push("final_norm".into(), 1, d, ParamKind::NormGain);
        let unembed = push("unembed".into(), d, v, ParamKind::Matrix);
        Self {
            entries,
            embed,
            layers,
            final_norm,
            unembed,
            total: offset,
        }
    }
}

/// A flat buffer shaped by a [`ParamLayout`]; used for weights, gradients and
/// optimizer moments alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBuffer {
    pub data: Vec<f64>,
}

impl ParamBuffer {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            data: vec![0.0; layout.total],
        }
    }

    pub fn matrix(&self, e: &ParamEntry) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((e.rows, e.cols), &self.data[e.range()]).expect("layout shape")
    }

    pub fn matrix_mut(&mut self, e: &ParamEntry) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((e.rows, e.cols), &mut self.data[e.range()]).expect("layout shape")
    }

    pub fn vector(&self, e: &ParamEntry) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[e.range()])
    }

    pub fn vector_mut(&mut self, e: &ParamEntry) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[e.range()])
    }

    pub fn add_assign(&mut self, other: &ParamBuffer) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|a| *a *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Model weights together with the layout that names them.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub weights: ParamBuffer,
}

impl ParameterSet {
    /// Normal(0, init_std) matrices, unit norm gains. Output projections of
    /// each residual branch are scaled by `1/sqrt(2 n_layers)`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut weights = ParamBuffer::zeros(&layout);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config(e.to_string()))?;
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let residual_out: Vec<usize> = layout.layers.iter().flat_map(|l| [l.wo, l.w_down]).collect();
        for (i, e) in layout.entries.iter().enumerate() {
            let slice = &mut weights.data[e.range()];
            match e.kind {
                ParamKind::NormGain => slice.fill(1.0),
                ParamKind::Embedding | ParamKind::Matrix => {
                    let s = if residual_out.contains(&i) { residual_scale } else { 1.0 };
                    slice.iter_mut().for_each(|w| *w = s * normal.sample(rng));
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            weights,
        })
    }

    pub fn from_weights(config: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if data.len() != layout.total {
            return Err(Error::Shape {
                expected: format!("{} parameters", layout.total),
                got: data.len().to_string(),
            });
        }
        Ok(Self {
            config: config.clone(),
            layout,
            weights: ParamBuffer { data },
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.layout.entries[id]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_is_contiguous_and_complete() {
        let cfg = ModelConfig::default();
        let layout = ParamLayout::new(&cfg);
        let mut off = 0;
        for e in &layout.entries {
            assert_eq!(e.offset, off);
            off += e.len();
        }
        assert_eq!(off, layout.total);
        let (v, d, f) = (64, 64, 256);
        assert_eq!(layout.total, v * d + 2 * (2 * d + 4 * d * d + 2 * d * f) + d + d * v);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.weights, b.weights);
        let gain = a.entry(a.layout.final_norm);
        assert!(a.weights.vector(gain).iter().all(|&g| g == 1.0));
    }
}
