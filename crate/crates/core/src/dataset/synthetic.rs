use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetError, Phone, UtteranceSample, UtteranceScores, WordScores, GOP_DIM, MAX_SCORE};
use crate::rng;

const MAX_WORD_PHONES: usize = 4;

/// Synthetic stand-in for a GOP-feature corpus.
///
/// Each phoneme category owns a unit prototype direction. A token of latent
/// quality `q` in `[0, 2]` sits at `center_scale * prototype * q / 2` plus
/// isotropic Gaussian noise, so well pronounced tokens lie near their
/// prototype and poor ones collapse toward the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub phonemes: usize,
    pub center_scale: f64,
    pub noise_scale: f64,
    pub utterances: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            phonemes: 10,
            center_scale: 3.0,
            noise_scale: 0.05,
            utterances: 500,
            min_phones: 5,
            max_phones: 15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |m: &str| Err(DatasetError::InvalidSpec(m.to_string()));
        if self.phonemes < 2 {
            return fail("phonemes must be at least 2");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return fail("noise_scale must be positive");
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return fail("center_scale must be non-negative");
        }
        if self.utterances == 0 {
            return fail("utterances must be positive");
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return fail("need 1 <= min_phones <= max_phones");
        }
        Ok(())
    }
}

/// Maps latent quality to a phone score by thirds of `[0, 2]`.
pub fn quantize_quality(q: f64) -> f64 {
    if q < MAX_SCORE / 3.0 {
        0.0
    } else if q < 2.0 * MAX_SCORE / 3.0 {
        1.0
    } else {
        2.0
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Unit prototype direction of every category, in id order.
pub(super) fn prototypes(rng: &mut impl Rng, phonemes: usize) -> Vec<Vec<f64>> {
    (0..phonemes)
        .map(|_| {
            let v: Vec<f64> = (0..GOP_DIM).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// `center_scale * prototype * q / 2 + noise_scale * noise`.
pub(super) fn token_feature(proto: &[f64], q: f64, center_scale: f64, noise_scale: f64, noise: &[f64]) -> Vec<f64> {
    proto
        .iter()
        .zip(noise)
        .map(|(&m, &n)| center_scale * m * (q / MAX_SCORE) + n * noise_scale)
        .collect()
}

/// Word scores as the mean of member phone scores (all aspects equal) and
/// utterance scores as the mean of word accuracies.
pub(super) fn aggregate_scores(phones: &[Phone]) -> (Vec<WordScores>, UtteranceScores) {
    let n_words = phones.last().map_or(0, |p| p.word_index + 1);
    let words: Vec<WordScores> = (0..n_words)
        .map(|w| {
            let acc = mean(phones.iter().filter(|p| p.word_index == w).map(|p| p.phone_accuracy));
            WordScores { accuracy: acc, stress: acc, total: acc }
        })
        .collect();
    let utt = mean(words.iter().map(|w| w.accuracy));
    let scores = UtteranceScores { accuracy: utt, fluency: utt, completeness: utt, prosody: utt, total: utt };
    (words, scores)
}

/// The unit prototype directions [`generate_synthetic`] draws for `spec`.
pub fn synthetic_prototypes(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>, DatasetError> {
    spec.validate()?;
    Ok(prototypes(&mut rng::stream(spec.seed, rng::DATA), spec.phonemes))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<UtteranceSample>, DatasetError> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::DATA);
    let protos = prototypes(&mut rng, spec.phonemes);

    let mut samples = Vec::with_capacity(spec.utterances);
    for u in 0..spec.utterances {
        let len = rng.random_range(spec.min_phones..=spec.max_phones);
        let mut phones = Vec::with_capacity(len);
        let mut word = 0;
        let mut left_in_word = rng.random_range(1..=MAX_WORD_PHONES);
        for i in 0..len {
            if i > 0 && left_in_word == 0 {
                word += 1;
                left_in_word = rng.random_range(1..=MAX_WORD_PHONES);
            }
            left_in_word -= 1;
            let phoneme_id = rng.random_range(0..spec.phonemes);
            let q: f64 = rng.random_range(0.0..=MAX_SCORE);
            let noise: Vec<f64> = (0..GOP_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            let gop = token_feature(&protos[phoneme_id], q, spec.center_scale, spec.noise_scale, &noise);
            phones.push(Phone { phoneme_id, gop, phone_accuracy: quantize_quality(q), word_index: word });
        }
        let (words, utterance_scores) = aggregate_scores(&phones);
        samples.push(UtteranceSample { utt_id: format!("syn{:05}", u), phones, words, utterance_scores });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec { phonemes: 3, utterances: 10, seed, ..Default::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&small(7)).unwrap();
        let b = generate_synthetic(&small(7)).unwrap();
        assert_eq!(a, b);
        let bits = |s: &[UtteranceSample]| -> Vec<u64> {
            s.iter().flat_map(|u| u.phones.iter().flat_map(|p| p.gop.iter().map(|v| v.to_bits()))).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, generate_synthetic(&small(8)).unwrap());
    }

    #[test]
    fn samples_are_valid() {
        for s in generate_synthetic(&small(1)).unwrap() {
            s.validate(MAX_SCORE).unwrap();
            assert!((5..=15).contains(&s.len()));
            assert!(s.phones.iter().all(|p| p.phoneme_id < 3));
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_synthetic(&SyntheticSpec { phonemes: 1, ..small(0) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { noise_scale: 0.0, ..small(0) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { min_phones: 4, max_phones: 3, ..small(0) }).is_err());
    }

    #[test]
    fn quantization_by_thirds() {
        assert_eq!(quantize_quality(0.0), 0.0);
        assert_eq!(quantize_quality(0.66), 0.0);
        assert_eq!(quantize_quality(0.67), 1.0);
        assert_eq!(quantize_quality(1.33), 1.0);
        assert_eq!(quantize_quality(1.34), 2.0);
        assert_eq!(quantize_quality(2.0), 2.0);
    }

    #[test]
    fn noiseless_full_quality_token_sits_on_prototype() {
        let mut rng = rng::stream(0, rng::DATA);
        let protos = prototypes(&mut rng, 2);
        let noise = vec![1.0; GOP_DIM];
        let feature = token_feature(&protos[0], 2.0, 3.0, 0.0, &noise);
        for (f, m) in feature.iter().zip(&protos[0]) {
            assert_eq!(*f, 3.0 * m);
        }
        let norm: f64 = protos[1].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(quantize_quality(2.0), 2.0);
    }

    #[test]
    fn all_zero_phones_give_zero_aggregates() {
        let mut s = generate_synthetic(&small(3)).unwrap().remove(0);
        s.phones.iter_mut().for_each(|p| p.phone_accuracy = 0.0);
        let (words, utt) = aggregate_scores(&s.phones);
        assert_eq!(words.len(), s.words.len());
        assert!(words.iter().all(|w| w.as_array() == [0.0; 3]));
        assert_eq!(utt.as_array(), [0.0; 5]);
    }

    #[test]
    fn aggregates_are_means() {
        let phone = |score, word_index| Phone { phoneme_id: 0, gop: vec![], phone_accuracy: score, word_index };
        let phones = vec![phone(2.0, 0), phone(1.0, 0), phone(0.0, 1)];
        let (words, utt) = aggregate_scores(&phones);
        assert_eq!(words[0].accuracy, 1.5);
        assert_eq!(words[1].stress, 0.0);
        assert_eq!(utt.prosody, 0.75);
    }
}
