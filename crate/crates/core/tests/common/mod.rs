#![allow(dead_code)]

pub mod oracle;

use pco_core::autodiff::{Tape, Tensor};
use pco_core::dataset::{generate_synthetic, make_batches, Batch, SyntheticSpec, UtteranceSample};
use pco_core::loss::{batch_loss, LossConfig, LossError};
use pco_core::model::{forward, ModelConfig, ModelParams};

/// d_model 8, one block, max_len 6.
pub fn toy_model(n_heads: usize) -> ModelConfig {
    ModelConfig { d_model: 8, n_blocks: 1, n_heads, ff_dim: 16, max_len: 6, ..Default::default() }
}

/// Synthetic utterances of 2..=6 phones over `phonemes` categories.
pub fn toy_data(phonemes: usize, utterances: usize, seed: u64) -> Vec<UtteranceSample> {
    generate_synthetic(&SyntheticSpec { phonemes, utterances, min_phones: 2, max_phones: 6, seed, ..Default::default() })
        .unwrap()
}

pub fn single_batch(samples: &[UtteranceSample], max_len: usize) -> Batch {
    make_batches(samples, samples.len(), max_len, None).unwrap().remove(0)
}

/// L_pco of a forward pass with `tensors` as the parameters, for use
/// inside a finite-difference check.
pub fn pco_of(
    tape: &Tape<f64>,
    config: ModelConfig,
    tensors: &[Tensor<f64>],
    batch: &Batch,
    loss: &LossConfig,
) -> Result<Tensor<f64>, LossError> {
    let params = ModelParams::from_tensors(config, tensors.to_vec()).expect("layout");
    let out = forward(tape, &params, batch).map_err(|e| match e {
        pco_core::model::ModelError::Autodiff(a) => LossError::from(a),
        other => panic!("{other}"),
    })?;
    Ok(batch_loss(tape, &out, batch, loss)?.l_pco)
}
