//! GOPT-style scorer: projected GOP features plus learned positions, five
//! prepended utterance aspect tokens, a post-norm transformer encoder and
//! one affine regression head per granularity and aspect.

mod checkpoint;
mod forward;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dataset::{GOP_DIM, N_UTT_ASPECTS, N_WORD_ASPECTS};
use crate::rng;
use crate::scalar::Scalar;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use forward::{extract_phone_embeddings, forward, ForwardOutput, PhoneEmbedding};

/// Layer norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub input_dim: usize,
    pub n_utt_aspects: usize,
    pub n_word_aspects: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 24,
            n_blocks: 3,
            n_heads: 1,
            ff_dim: 96,
            max_len: 50,
            input_dim: GOP_DIM,
            n_utt_aspects: N_UTT_ASPECTS,
            n_word_aspects: N_WORD_ASPECTS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            self.d_model,
            self.n_blocks,
            self.n_heads,
            self.ff_dim,
            self.max_len,
            self.input_dim,
            self.n_utt_aspects,
            self.n_word_aspects,
        ];
        if extents.contains(&0) {
            return Err(ModelError::Config("all extents must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.input_dim != GOP_DIM || self.n_utt_aspects != N_UTT_ASPECTS || self.n_word_aspects != N_WORD_ASPECTS {
            return Err(ModelError::Config(format!(
                "input_dim/aspect counts must be {GOP_DIM}/{N_UTT_ASPECTS}/{N_WORD_ASPECTS}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ff1_w: Tensor<T>,
    pub ff1_b: Tensor<T>,
    pub ff2_w: Tensor<T>,
    pub ff2_b: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

/// Every trainable tensor.
///
/// Heads of one granularity share a weight matrix: column `a` of
/// `utt_head_w` with entry `a` of `utt_head_b` is the affine head of
/// utterance aspect `a`, and likewise for words.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub input_w: Tensor<T>,
    pub input_b: Tensor<T>,
    pub positions: Tensor<T>,
    pub aspect_tokens: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub utt_head_w: Tensor<T>,
    pub utt_head_b: Tensor<T>,
    pub word_head_w: Tensor<T>,
    pub word_head_b: Tensor<T>,
    pub phone_head_w: Tensor<T>,
    pub phone_head_b: Tensor<T>,
}

/// Name and shape of every parameter tensor, in canonical order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("input.weight".to_string(), vec![cfg.input_dim, d]),
        ("input.bias".to_string(), vec![d]),
        ("positions".to_string(), vec![cfg.max_len, d]),
        ("aspect_tokens".to_string(), vec![cfg.n_utt_aspects, d]),
    ];
    for b in 0..cfg.n_blocks {
        let p = |s: &str| format!("blocks.{b}.{s}");
        out.extend([
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("ff1.weight"), vec![d, cfg.ff_dim]),
            (p("ff1.bias"), vec![cfg.ff_dim]),
            (p("ff2.weight"), vec![cfg.ff_dim, d]),
            (p("ff2.bias"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
        ]);
    }
    out.extend([
        ("heads.utterance.weight".to_string(), vec![d, cfg.n_utt_aspects]),
        ("heads.utterance.bias".to_string(), vec![cfg.n_utt_aspects]),
        ("heads.word.weight".to_string(), vec![d, cfg.n_word_aspects]),
        ("heads.word.bias".to_string(), vec![cfg.n_word_aspects]),
        ("heads.phone.weight".to_string(), vec![d, 1]),
        ("heads.phone.bias".to_string(), vec![1]),
    ]);
    out
}

impl<T: Scalar> ModelParams<T> {
    /// Tensors in [`param_layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.input_w, &self.input_b, &self.positions, &self.aspect_tokens];
        for b in &self.blocks {
            out.extend([
                &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln1_gain, &b.ln1_bias, &b.ff1_w,
                &b.ff1_b, &b.ff2_w, &b.ff2_b, &b.ln2_gain, &b.ln2_bias,
            ]);
        }
        out.extend([
            &self.utt_head_w,
            &self.utt_head_b,
            &self.word_head_w,
            &self.word_head_b,
            &self.phone_head_w,
            &self.phone_head_b,
        ]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        param_layout(&self.config).into_iter().map(|(n, _)| n).zip(self.tensors()).collect()
    }

    /// Rebuilds the parameter set from tensors in [`param_layout`] order,
    /// checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != tensors.len() {
            return Err(ModelError::Config(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!("{name}: expected shape {shape:?}, got {:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let (input_w, input_b, positions, aspect_tokens) = (next(), next(), next(), next());
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                ff1_w: next(),
                ff1_b: next(),
                ff2_w: next(),
                ff2_b: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        Ok(Self {
            config,
            input_w,
            input_b,
            positions,
            aspect_tokens,
            blocks,
            utt_head_w: next(),
            utt_head_b: next(),
            word_head_w: next(),
            word_head_b: next(),
            phone_head_w: next(),
            phone_head_b: next(),
        })
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Self {
        let tensors = self.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        Self::from_tensors(self.config, tensors).expect("same layout")
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors().iter().zip(other.tensors()).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Seeded initialization: matrices uniform in `±1/sqrt(fan_in)`, biases
/// zero, layer norm gains one, position and aspect embeddings `N(0, 0.02)`.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::INIT);
    let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
    let tensors = param_layout(config)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name == "positions" || name == "aspect_tokens" {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 2 {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            Tensor::new(shape, data.into_iter().map(T::lit).collect()).map_err(ModelError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    ModelParams::from_tensors(*config, tensors)
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch does not fit the model: {0}")]
    BatchShape(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        // input 84*24+24, positions 50*24, aspects 5*24,
        // per block 4*(24*24+24) + 2*48 + (24*96+96) + (96*24+24),
        // heads (24*5+5) + (24*3+3) + (24+1)
        let input = 84 * 24 + 24;
        let tables = 50 * 24 + 5 * 24;
        let block = 4 * (24 * 24 + 24) + 2 * (2 * 24) + (24 * 96 + 96) + (96 * 24 + 24);
        let heads = (24 * 5 + 5) + (24 * 3 + 3) + (24 + 1);
        let expected = input + tables + 3 * block + heads;
        assert_eq!(expected, 25_257);
        let p = init_params::<f64>(&ModelConfig::default(), 1).unwrap();
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = init_params::<f64>(&cfg, 5).unwrap();
        let b = init_params::<f64>(&cfg, 5).unwrap();
        let c = init_params::<f64>(&cfg, 6).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn biases_start_at_zero() {
        let p = init_params::<f64>(&ModelConfig::default(), 2).unwrap();
        for (name, t) in p.named_tensors() {
            if name.ends_with("bias") || name.ends_with(".bq") || name.ends_with(".bk") || name.ends_with(".bv") || name.ends_with(".bo") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with("weight") || name.contains(".w") {
                let bound = 1.0 / (t.shape()[0] as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = ModelConfig { n_heads: 5, ..Default::default() };
        assert!(init_params::<f64>(&bad, 0).is_err());
        let bad = ModelConfig { n_blocks: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
