use super::{BlockParams, ModelError, ModelParams, LAYER_NORM_EPS};
use crate::autodiff::{Tape, Tensor};
use crate::dataset::{Batch, GOP_DIM};
use crate::scalar::Scalar;

/// Encoder outputs and predictions for one batch.
///
/// Phone-level tensors are compact: one row per real phone, in row-major
/// batch order (`token_cells` gives each row's padded cell). Padded views
/// are available through the `padded_*` methods.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub batch_size: usize,
    pub max_len: usize,
    pub token_cells: Vec<usize>,
    /// `(batch_size * n_utt_aspects, d_model)`, row `b * n_utt_aspects + a`.
    pub h_utt: Tensor<T>,
    /// `(tokens, d_model)`: the phone-level representations fed to the heads.
    pub h_phone: Tensor<T>,
    /// `(batch_size, n_utt_aspects)`.
    pub utt_pred: Tensor<T>,
    /// `(tokens, n_word_aspects)`.
    pub word_pred: Tensor<T>,
    /// `(tokens)`.
    pub phone_pred: Tensor<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    fn scatter(&self, values: &[T], width: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.batch_size * self.max_len * width];
        for (row, &cell) in self.token_cells.iter().enumerate() {
            out[cell * width..(cell + 1) * width].copy_from_slice(&values[row * width..(row + 1) * width]);
        }
        out
    }

    /// `(batch_size, max_len, d_model)` with zeros at padded positions.
    pub fn padded_phone_embeddings(&self) -> Tensor<T> {
        let d = self.h_phone.shape()[1];
        Tensor::new(vec![self.batch_size, self.max_len, d], self.scatter(self.h_phone.data(), d))
            .expect("consistent shape")
    }

    /// `(batch_size, max_len)` phone predictions, zero at padded positions.
    pub fn padded_phone_predictions(&self) -> Tensor<T> {
        Tensor::new(vec![self.batch_size, self.max_len], self.scatter(self.phone_pred.data(), 1))
            .expect("consistent shape")
    }

    /// `(batch_size, max_len)` predictions of one word aspect.
    pub fn padded_word_predictions(&self, aspect: usize) -> Tensor<T> {
        let width = self.word_pred.shape()[1];
        let col: Vec<T> = self.word_pred.data().iter().skip(aspect).step_by(width).copied().collect();
        Tensor::new(vec![self.batch_size, self.max_len], self.scatter(&col, 1)).expect("consistent shape")
    }
}

fn check_batch<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Result<(), ModelError> {
    let cfg = &params.config;
    if batch.max_len != cfg.max_len {
        return Err(ModelError::BatchShape(format!(
            "batch max_len {} != model max_len {}",
            batch.max_len, cfg.max_len
        )));
    }
    if batch.features.len() != batch.batch_size * batch.max_len * cfg.input_dim || cfg.input_dim != GOP_DIM {
        return Err(ModelError::BatchShape("feature dimension mismatch".into()));
    }
    if batch.token_count() == 0 {
        return Err(ModelError::BatchShape("batch has no real phones".into()));
    }
    Ok(())
}

fn attention<T: Scalar>(
    tape: &Tape<T>,
    params: &ModelParams<T>,
    block: &BlockParams<T>,
    z: &Tensor<T>,
    spans: &[(usize, usize)],
) -> Result<Tensor<T>, ModelError> {
    let q = tape.add_row(&tape.matmul(z, &block.wq)?, &block.bq)?;
    let k = tape.add_row(&tape.matmul(z, &block.wk)?, &block.bk)?;
    let v = tape.add_row(&tape.matmul(z, &block.wv)?, &block.bv)?;
    // Each utterance attends over its own rows only, so padding is never
    // attended from or to.
    let o = tape.segment_attention(&q, &k, &v, spans, params.config.n_heads)?;
    Ok(tape.add_row(&tape.matmul(&o, &block.wo)?, &block.bo)?)
}

fn encoder_block<T: Scalar>(
    tape: &Tape<T>,
    params: &ModelParams<T>,
    block: &BlockParams<T>,
    z: &Tensor<T>,
    spans: &[(usize, usize)],
) -> Result<Tensor<T>, ModelError> {
    let eps = T::lit(LAYER_NORM_EPS);
    let attn = attention(tape, params, block, z, spans)?;
    let z1 = tape.layer_norm(&tape.add(z, &attn)?, &block.ln1_gain, &block.ln1_bias, eps)?;
    let hidden = tape.gelu(&tape.add_row(&tape.matmul(&z1, &block.ff1_w)?, &block.ff1_b)?)?;
    let ff = tape.add_row(&tape.matmul(&hidden, &block.ff2_w)?, &block.ff2_b)?;
    Ok(tape.layer_norm(&tape.add(&z1, &ff)?, &block.ln2_gain, &block.ln2_bias, eps)?)
}

/// Runs the encoder and every regression head.
///
/// `params` should be bound to `tape` (see [`ModelParams::bind`]) when
/// gradients are wanted; unbound parameters act as constants.
pub fn forward<T: Scalar>(tape: &Tape<T>, params: &ModelParams<T>, batch: &Batch) -> Result<ForwardOutput<T>, ModelError> {
    check_batch(params, batch)?;
    let cfg = &params.config;
    let n_asp = cfg.n_utt_aspects;
    let token_cells = batch.token_cells();
    let n_tokens = token_cells.len();

    let mut x = Vec::with_capacity(n_tokens * GOP_DIM);
    let mut positions = Vec::with_capacity(n_tokens);
    for &cell in &token_cells {
        x.extend(batch.features[cell * GOP_DIM..(cell + 1) * GOP_DIM].iter().map(|&v| T::lit(v)));
        positions.push(cell % batch.max_len);
    }
    let x = Tensor::new(vec![n_tokens, GOP_DIM], x)?;
    let projected = tape.add_row(&tape.matmul(&x, &params.input_w)?, &params.input_b)?;
    let tokens = tape.add(&projected, &tape.embedding_lookup(&params.positions, &positions)?)?;

    // Sequence layout: per utterance, its aspect tokens then its phones.
    // Rows 0..n_asp of `table` are the aspect tokens, phone t is n_asp + t.
    let table = tape.concat(&[&params.aspect_tokens, &tokens], 0)?;
    let mut order = Vec::with_capacity(batch.batch_size * n_asp + n_tokens);
    let mut spans = Vec::with_capacity(batch.batch_size);
    let mut utt_rows = Vec::with_capacity(batch.batch_size * n_asp);
    let mut phone_rows = Vec::with_capacity(n_tokens);
    let mut next_token = 0;
    for &len in &batch.lengths {
        let start = order.len();
        spans.push((start, n_asp + len));
        for a in 0..n_asp {
            utt_rows.push(order.len());
            order.push(a);
        }
        for _ in 0..len {
            phone_rows.push(order.len());
            order.push(n_asp + next_token);
            next_token += 1;
        }
    }
    let mut z = tape.gather(&table, &order)?;
    for block in &params.blocks {
        z = encoder_block(tape, params, block, &z, &spans)?;
    }

    let h_utt = tape.gather(&z, &utt_rows)?;
    let h_phone = tape.gather(&z, &phone_rows)?;

    let utt_all = tape.add_row(&tape.matmul(&h_utt, &params.utt_head_w)?, &params.utt_head_b)?;
    let mut select = vec![T::zero(); batch.batch_size * n_asp * n_asp];
    for r in 0..batch.batch_size * n_asp {
        select[r * n_asp + r % n_asp] = T::one();
    }
    let select = Tensor::new(vec![batch.batch_size * n_asp, n_asp], select)?;
    let utt_pred = tape.sum_axis(&tape.mul(&utt_all, &select)?, 1)?;
    let utt_pred = tape.reshape(&utt_pred, vec![batch.batch_size, n_asp])?;

    let word_pred = tape.add_row(&tape.matmul(&h_phone, &params.word_head_w)?, &params.word_head_b)?;
    let phone_pred = tape.add_row(&tape.matmul(&h_phone, &params.phone_head_w)?, &params.phone_head_b)?;
    let phone_pred = tape.reshape(&phone_pred, vec![n_tokens])?;

    Ok(ForwardOutput {
        batch_size: batch.batch_size,
        max_len: batch.max_len,
        token_cells,
        h_utt,
        h_phone,
        utt_pred,
        word_pred,
        phone_pred,
    })
}

/// Pre-head phone representation of one real phone token.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneEmbedding<T> {
    pub utt_id: String,
    pub position: usize,
    pub phoneme_id: usize,
    pub phone_accuracy: f64,
    pub embedding: Vec<T>,
}

pub fn extract_phone_embeddings<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
) -> Result<Vec<PhoneEmbedding<T>>, ModelError> {
    let tape = Tape::inference();
    let out = forward(&tape, params, batch)?;
    Ok(out
        .token_cells
        .iter()
        .enumerate()
        .map(|(row, &cell)| PhoneEmbedding {
            utt_id: batch.utt_ids[cell / batch.max_len].clone(),
            position: cell % batch.max_len,
            phoneme_id: batch.phoneme_ids[cell],
            phone_accuracy: batch.phone_targets[cell],
            embedding: out.h_phone.row(row).to_vec(),
        })
        .collect())
}
