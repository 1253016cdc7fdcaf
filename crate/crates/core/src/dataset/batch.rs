use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, UtteranceSample, GOP_DIM, N_UTT_ASPECTS, N_WORD_ASPECTS};

/// Target value stored at padded positions. Never read: every consumer
/// filters by the mask first.
pub const PAD_TARGET: f64 = -1.0;

/// Padded, masked stack of utterances.
///
/// Per-position arrays are row-major `(batch_size, max_len)`; features are
/// `(batch_size, max_len, GOP_DIM)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub max_len: usize,
    pub features: Vec<f64>,
    pub phoneme_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub phone_targets: Vec<f64>,
    /// One `(batch_size, max_len)` array per word aspect, the word's score
    /// broadcast to each of its phones.
    pub word_targets: [Vec<f64>; N_WORD_ASPECTS],
    /// `(batch_size, N_UTT_ASPECTS)`.
    pub utterance_targets: Vec<f64>,
    pub word_index: Vec<usize>,
    pub lengths: Vec<usize>,
    pub utt_ids: Vec<String>,
    pub word_counts: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&UtteranceSample], max_len: usize) -> Result<Self, DatasetError> {
        if samples.is_empty() {
            return Err(DatasetError::InvalidBatching("empty batch".into()));
        }
        let b = samples.len();
        let cells = b * max_len;
        let mut batch = Batch {
            batch_size: b,
            max_len,
            features: vec![0.0; cells * GOP_DIM],
            phoneme_ids: vec![0; cells],
            mask: vec![false; cells],
            phone_targets: vec![PAD_TARGET; cells],
            word_targets: std::array::from_fn(|_| vec![PAD_TARGET; cells]),
            utterance_targets: Vec::with_capacity(b * N_UTT_ASPECTS),
            word_index: vec![0; cells],
            lengths: Vec::with_capacity(b),
            utt_ids: Vec::with_capacity(b),
            word_counts: Vec::with_capacity(b),
        };
        for (row, s) in samples.iter().enumerate() {
            if s.len() > max_len {
                return Err(DatasetError::TooLong { utt_id: s.utt_id.clone(), len: s.len(), max_len });
            }
            for (i, p) in s.phones.iter().enumerate() {
                let cell = row * max_len + i;
                batch.features[cell * GOP_DIM..(cell + 1) * GOP_DIM].copy_from_slice(&p.gop);
                batch.phoneme_ids[cell] = p.phoneme_id;
                batch.mask[cell] = true;
                batch.phone_targets[cell] = p.phone_accuracy;
                batch.word_index[cell] = p.word_index;
                let w = s.words[p.word_index].as_array();
                for (a, t) in batch.word_targets.iter_mut().enumerate() {
                    t[cell] = w[a];
                }
            }
            batch.utterance_targets.extend(s.utterance_scores.as_array());
            batch.lengths.push(s.len());
            batch.utt_ids.push(s.utt_id.clone());
            batch.word_counts.push(s.words.len());
        }
        Ok(batch)
    }

    pub fn feature(&self, row: usize, pos: usize) -> &[f64] {
        let cell = row * self.max_len + pos;
        &self.features[cell * GOP_DIM..(cell + 1) * GOP_DIM]
    }

    /// Number of real phones in the batch.
    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Flat `(row * max_len + pos)` index of every real phone, row-major.
    pub fn token_cells(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(row, &len)| (0..len).map(move |i| row * self.max_len + i))
            .collect()
    }

    /// Values of a per-position array at the real phones, row-major.
    pub fn gather_tokens<V: Copy>(&self, per_cell: &[V]) -> Vec<V> {
        self.token_cells().into_iter().map(|c| per_cell[c]).collect()
    }
}

/// Splits samples into padded batches, optionally in a seeded random order.
/// The last partial batch is kept.
pub fn make_batches(
    samples: &[UtteranceSample],
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>, DatasetError> {
    if batch_size == 0 || max_len == 0 {
        return Err(DatasetError::InvalidBatching("batch_size and max_len must be positive".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.len() > max_len) {
        return Err(DatasetError::TooLong { utt_id: s.utt_id.clone(), len: s.len(), max_len });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&UtteranceSample> = chunk.iter().map(|&i| &samples[i]).collect();
            Batch::from_samples(&members, max_len)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{generate_synthetic, SyntheticSpec};
    use super::*;

    fn data(n: usize) -> Vec<UtteranceSample> {
        generate_synthetic(&SyntheticSpec { phonemes: 4, utterances: n, seed: 3, ..Default::default() }).unwrap()
    }

    #[test]
    fn ceiling_division_keeps_partial_batch() {
        let batches = make_batches(&data(5), 2, 50, None).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.batch_size).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn mask_counts_real_phones() {
        let mut s = data(1);
        s[0].phones.truncate(3);
        s[0].phones.iter_mut().for_each(|p| p.word_index = 0);
        s[0].words.truncate(1);
        let b = make_batches(&s, 4, 50, None).unwrap().remove(0);
        assert_eq!(b.mask.iter().filter(|&&m| m).count(), 3);
        assert_eq!(b.phone_targets[3], PAD_TARGET);
        assert_eq!(b.word_targets[0][10], PAD_TARGET);
    }

    #[test]
    fn seeded_shuffle_is_repeatable() {
        let d = data(12);
        let ids = |seed| -> Vec<String> {
            make_batches(&d, 5, 50, Some(seed)).unwrap().into_iter().flat_map(|b| b.utt_ids).collect()
        };
        assert_eq!(ids(9), ids(9));
        assert_ne!(ids(9), ids(10));
        let mut sorted = ids(9);
        sorted.sort();
        assert_eq!(sorted, d.iter().map(|s| s.utt_id.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn too_long_sample_is_named() {
        let d = data(3);
        match make_batches(&d, 2, 4, None) {
            Err(DatasetError::TooLong { utt_id, .. }) => assert!(utt_id.starts_with("syn")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
