use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use super::{DatasetError, UtteranceSample, MAX_SCORE, RAW_MAX_SCORE};

/// Scale declared by a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreScale {
    /// Word and utterance scores in 0-10 (raw annotation scale).
    Raw,
    /// Everything already in 0-2.
    Normalized,
}

#[derive(Deserialize)]
struct Header {
    score_scale: String,
}

/// Reads a JSON Lines dataset.
///
/// A first line `{"score_scale": "0-10"}` marks raw word and utterance
/// scores; without it (or with `"0-2"`) every score is taken as already in
/// 0-2. With `normalize`, raw scores are divided by 5.
pub fn load_dataset(path: impl AsRef<Path>, normalize: bool) -> Result<Vec<UtteranceSample>, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    parse_dataset(BufReader::new(file), normalize)
}

pub fn parse_dataset(reader: impl BufRead, normalize: bool) -> Result<Vec<UtteranceSample>, DatasetError> {
    let mut scale = ScoreScale::Normalized;
    let mut samples = Vec::new();
    let mut seen_content = false;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DatasetError::Malformed { line: lineno, message: e.to_string() })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !seen_content {
            seen_content = true;
            if let Ok(h) = serde_json::from_str::<Header>(trimmed) {
                if !trimmed.contains("\"phones\"") {
                    scale = match h.score_scale.as_str() {
                        "0-10" => ScoreScale::Raw,
                        "0-2" => ScoreScale::Normalized,
                        other => {
                            return Err(DatasetError::Malformed {
                                line: lineno,
                                message: format!("unknown score_scale {other:?}"),
                            })
                        }
                    };
                    continue;
                }
            }
        }
        let mut sample: UtteranceSample = serde_json::from_str(trimmed)
            .map_err(|e| DatasetError::Malformed { line: lineno, message: e.to_string() })?;
        let upper = match scale {
            ScoreScale::Raw => RAW_MAX_SCORE,
            ScoreScale::Normalized => MAX_SCORE,
        };
        sample
            .validate(upper)
            .map_err(|message| DatasetError::Malformed { line: lineno, message })?;
        if normalize && scale == ScoreScale::Raw {
            let k = RAW_MAX_SCORE / MAX_SCORE;
            sample.words.iter_mut().for_each(|w| *w = w.shrunk(k));
            sample.utterance_scores = sample.utterance_scores.shrunk(k);
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples as normalized JSON Lines (no header).
pub fn write_dataset(mut out: impl Write, samples: &[UtteranceSample]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
