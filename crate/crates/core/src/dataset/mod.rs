//! Utterance data model, the JSON Lines dataset format, synthetic data and
//! batching.

mod batch;
mod io;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, Batch, PAD_TARGET};
pub use io::{load_dataset, parse_dataset, write_dataset, ScoreScale};
pub use synthetic::{generate_synthetic, quantize_quality, synthetic_prototypes, SyntheticSpec};

/// Dimension of every GOP feature vector.
pub const GOP_DIM: usize = 84;
/// Phone scores, and every normalized score, live in `[0, MAX_SCORE]`.
pub const MAX_SCORE: f64 = 2.0;
/// Upper bound of raw utterance and word scores.
pub const RAW_MAX_SCORE: f64 = 10.0;
pub const N_UTT_ASPECTS: usize = 5;
pub const N_WORD_ASPECTS: usize = 3;
/// Utterance aspect order used by targets, predictions and heads.
pub const UTT_ASPECTS: [&str; N_UTT_ASPECTS] = ["accuracy", "fluency", "completeness", "prosody", "total"];
pub const WORD_ASPECTS: [&str; N_WORD_ASPECTS] = ["accuracy", "stress", "total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phone {
    pub phoneme_id: usize,
    pub gop: Vec<f64>,
    #[serde(rename = "score")]
    pub phone_accuracy: f64,
    pub word_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordScores {
    pub accuracy: f64,
    pub stress: f64,
    pub total: f64,
}

impl WordScores {
    pub fn as_array(&self) -> [f64; N_WORD_ASPECTS] {
        [self.accuracy, self.stress, self.total]
    }

    fn shrunk(self, k: f64) -> Self {
        Self { accuracy: self.accuracy / k, stress: self.stress / k, total: self.total / k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScores {
    pub accuracy: f64,
    pub fluency: f64,
    pub completeness: f64,
    pub prosody: f64,
    pub total: f64,
}

impl UtteranceScores {
    /// Values in [`UTT_ASPECTS`] order.
    pub fn as_array(&self) -> [f64; N_UTT_ASPECTS] {
        [self.accuracy, self.fluency, self.completeness, self.prosody, self.total]
    }

    fn shrunk(self, k: f64) -> Self {
        Self {
            accuracy: self.accuracy / k,
            fluency: self.fluency / k,
            completeness: self.completeness / k,
            prosody: self.prosody / k,
            total: self.total / k,
        }
    }
}

/// One utterance: aligned phone features with the full score set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSample {
    pub utt_id: String,
    pub phones: Vec<Phone>,
    pub words: Vec<WordScores>,
    #[serde(rename = "utterance")]
    pub utterance_scores: UtteranceScores,
}

impl UtteranceSample {
    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    /// Checks structure and score ranges. Word and utterance scores must lie
    /// in `[0, upper]`; phone scores always in `[0, 2]`.
    pub fn validate(&self, upper: f64) -> Result<(), String> {
        if self.phones.is_empty() {
            return Err("utterance has no phones".into());
        }
        let mut expected_word = 0;
        for (i, p) in self.phones.iter().enumerate() {
            if p.gop.len() != GOP_DIM {
                return Err(format!("phone {i}: gop has {} dimensions, expected {GOP_DIM}", p.gop.len()));
            }
            if p.gop.iter().any(|v| !v.is_finite()) {
                return Err(format!("phone {i}: non-finite gop value"));
            }
            in_range(p.phone_accuracy, MAX_SCORE).map_err(|e| format!("phone {i} score: {e}"))?;
            if i == 0 && p.word_index != 0 {
                return Err("word_index must start at 0".into());
            }
            if p.word_index != expected_word {
                if p.word_index == expected_word + 1 {
                    expected_word += 1;
                } else {
                    return Err(format!("phone {i}: word_index {} is not contiguous", p.word_index));
                }
            }
        }
        if self.words.len() != expected_word + 1 {
            return Err(format!("{} word score records for {} words", self.words.len(), expected_word + 1));
        }
        for (w, s) in self.words.iter().enumerate() {
            for v in s.as_array() {
                in_range(v, upper).map_err(|e| format!("word {w}: {e}"))?;
            }
        }
        for v in self.utterance_scores.as_array() {
            in_range(v, upper).map_err(|e| format!("utterance: {e}"))?;
        }
        Ok(())
    }

    /// Number of distinct phoneme categories needed to index this sample.
    pub fn max_phoneme_id(&self) -> usize {
        self.phones.iter().map(|p| p.phoneme_id).max().unwrap_or(0)
    }
}

fn in_range(v: f64, upper: f64) -> Result<(), String> {
    if v.is_finite() && (0.0..=upper).contains(&v) {
        Ok(())
    } else {
        Err(format!("score {v} outside [0, {upper}]"))
    }
}

/// Phoneme inventory size implied by a dataset (max id + 1).
pub fn phoneme_count(samples: &[UtteranceSample]) -> usize {
    samples.iter().map(|s| s.max_phoneme_id() + 1).max().unwrap_or(0)
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("utterance {utt_id}: length {len} exceeds max_len {max_len}")]
    TooLong { utt_id: String, len: usize, max_len: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid batching request: {0}")]
    InvalidBatching(String),
}
