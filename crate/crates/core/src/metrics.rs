//! Evaluation metrics: pooled PCC/MSE per granularity and embedding geometry.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{make_batches, DatasetError, UtteranceSample, MAX_SCORE, N_UTT_ASPECTS, N_WORD_ASPECTS};
use crate::loss::{compute_centers, LossError};
use crate::model::{extract_phone_embeddings, forward, ModelError, ModelParams, PhoneEmbedding};
use crate::scalar::Scalar;

/// Utterances per forward pass during evaluation. Results do not depend on it.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PearsonError {
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("constant sequence, correlation undefined")]
    Constant,
    #[error("non-finite value")]
    NonFinite,
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{column}: {source}")]
    Pearson { column: String, source: PearsonError },
    #[error("empty dataset")]
    Empty,
    #[error("{0} predictions for {1} utterances")]
    Mismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Sample Pearson correlation.
///
/// Errors when either sequence has zero variance: the coefficient is 0/0
/// there, and a constant column means something upstream is broken.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, PearsonError> {
    if xs.len() != ys.len() {
        return Err(PearsonError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(PearsonError::TooShort(n));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(PearsonError::NonFinite);
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(PearsonError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn column(name: &str, xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    pearson(xs, ys).map_err(|source| MetricsError::Pearson { column: name.to_string(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhoneMetrics {
    pub mse: f64,
    pub pcc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WordMetrics {
    pub accuracy: f64,
    pub stress: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtteranceMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub fluency: f64,
    pub prosody: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub phone: PhoneMetrics,
    pub word: WordMetrics,
    pub utterance: UtteranceMetrics,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        let u = &self.utterance;
        let w = &self.word;
        [
            ("phone.mse", self.phone.mse),
            ("phone.pcc", self.phone.pcc),
            ("word.accuracy.pcc", w.accuracy),
            ("word.stress.pcc", w.stress),
            ("word.total.pcc", w.total),
            ("utterance.accuracy.pcc", u.accuracy),
            ("utterance.completeness.pcc", u.completeness),
            ("utterance.fluency.pcc", u.fluency),
            ("utterance.prosody.pcc", u.prosody),
            ("utterance.total.pcc", u.total),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Field-wise mean, e.g. across seeds.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        (!reports.is_empty()).then(|| EvalReport {
            phone: PhoneMetrics { mse: avg(&|r| r.phone.mse), pcc: avg(&|r| r.phone.pcc) },
            word: WordMetrics {
                accuracy: avg(&|r| r.word.accuracy),
                stress: avg(&|r| r.word.stress),
                total: avg(&|r| r.word.total),
            },
            utterance: UtteranceMetrics {
                accuracy: avg(&|r| r.utterance.accuracy),
                completeness: avg(&|r| r.utterance.completeness),
                fluency: avg(&|r| r.utterance.fluency),
                prosody: avg(&|r| r.utterance.prosody),
                total: avg(&|r| r.utterance.total),
            },
        })
    }
}

/// Model outputs for one utterance, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePrediction {
    pub phone: Vec<f64>,
    /// Word-head outputs at each phone; word predictions average these over
    /// the word's phones.
    pub word_at_phone: Vec<[f64; N_WORD_ASPECTS]>,
    /// In [`crate::dataset::UTT_ASPECTS`] order.
    pub utterance: [f64; N_UTT_ASPECTS],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Clamp predictions to the score range before scoring.
    pub clip: bool,
}

pub fn predict<T: Scalar>(params: &ModelParams<T>, dataset: &[UtteranceSample]) -> Result<Vec<UtterancePrediction>, MetricsError> {
    let n_asp = params.config.n_utt_aspects;
    let mut preds = Vec::with_capacity(dataset.len());
    for batch in make_batches(dataset, EVAL_BATCH, params.config.max_len, None)? {
        let out = forward(&Tape::inference(), params, &batch)?;
        let phone = out.phone_pred.data();
        let word = out.word_pred.data();
        let utt = out.utt_pred.data();
        let mut tok = 0;
        for (b, &len) in batch.lengths.iter().enumerate() {
            let mut utterance = [0.0; N_UTT_ASPECTS];
            for (a, u) in utterance.iter_mut().enumerate() {
                *u = utt[b * n_asp + a].as_f64();
            }
            preds.push(UtterancePrediction {
                phone: phone[tok..tok + len].iter().map(|v| v.as_f64()).collect(),
                word_at_phone: (tok..tok + len)
                    .map(|t| std::array::from_fn(|a| word[t * N_WORD_ASPECTS + a].as_f64()))
                    .collect(),
                utterance,
            });
            tok += len;
        }
    }
    Ok(preds)
}

/// Scores predictions against the dataset's targets, pooling each column
/// over the whole set.
pub fn evaluate_predictions(
    dataset: &[UtteranceSample],
    preds: &[UtterancePrediction],
    opts: EvalOptions,
) -> Result<EvalReport, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != dataset.len() {
        return Err(MetricsError::Mismatch(preds.len(), dataset.len()));
    }
    let fix = |v: f64| if opts.clip { v.clamp(0.0, MAX_SCORE) } else { v };

    let (mut phone_p, mut phone_y) = (Vec::new(), Vec::new());
    let mut word_p: [Vec<f64>; N_WORD_ASPECTS] = Default::default();
    let mut word_y: [Vec<f64>; N_WORD_ASPECTS] = Default::default();
    let mut utt_p: [Vec<f64>; N_UTT_ASPECTS] = Default::default();
    let mut utt_y: [Vec<f64>; N_UTT_ASPECTS] = Default::default();

    for (s, p) in dataset.iter().zip(preds) {
        if p.phone.len() != s.len() || p.word_at_phone.len() != s.len() {
            return Err(MetricsError::Mismatch(p.phone.len(), s.len()));
        }
        for (ph, &v) in s.phones.iter().zip(&p.phone) {
            phone_p.push(fix(v));
            phone_y.push(ph.phone_accuracy);
        }
        for (w, scores) in s.words.iter().enumerate() {
            let members: Vec<usize> = (0..s.len()).filter(|&i| s.phones[i].word_index == w).collect();
            let targets = scores.as_array();
            for a in 0..N_WORD_ASPECTS {
                let mean = members.iter().map(|&i| p.word_at_phone[i][a]).sum::<f64>() / members.len() as f64;
                word_p[a].push(fix(mean));
                word_y[a].push(targets[a]);
            }
        }
        let targets = s.utterance_scores.as_array();
        for a in 0..N_UTT_ASPECTS {
            utt_p[a].push(fix(p.utterance[a]));
            utt_y[a].push(targets[a]);
        }
    }

    let mse = phone_p.iter().zip(&phone_y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / phone_p.len() as f64;
    // UTT_ASPECTS order: accuracy, fluency, completeness, prosody, total
    Ok(EvalReport {
        phone: PhoneMetrics { mse, pcc: column("phone", &phone_p, &phone_y)? },
        word: WordMetrics {
            accuracy: column("word.accuracy", &word_p[0], &word_y[0])?,
            stress: column("word.stress", &word_p[1], &word_y[1])?,
            total: column("word.total", &word_p[2], &word_y[2])?,
        },
        utterance: UtteranceMetrics {
            accuracy: column("utterance.accuracy", &utt_p[0], &utt_y[0])?,
            fluency: column("utterance.fluency", &utt_p[1], &utt_y[1])?,
            completeness: column("utterance.completeness", &utt_p[2], &utt_y[2])?,
            prosody: column("utterance.prosody", &utt_p[3], &utt_y[3])?,
            total: column("utterance.total", &utt_p[4], &utt_y[4])?,
        },
    })
}

pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &[UtteranceSample],
    opts: EvalOptions,
) -> Result<EvalReport, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::Empty);
    }
    evaluate_predictions(dataset, &predict(params, dataset)?, opts)
}

/// Score bucket of a phone score: nearest of 0, 1, 2.
pub fn score_bucket(score: f64) -> usize {
    (score.round().clamp(0.0, MAX_SCORE)) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryScatter {
    pub phoneme_id: usize,
    pub tokens: usize,
    /// Mean distance to the category center per score bucket 0, 1, 2;
    /// `None` where the bucket is empty.
    pub buckets: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryReport {
    pub mean_inter_center_distance: f64,
    pub score_weighted_scatter: f64,
    /// Mean distance to own center over all tokens of each score bucket.
    pub bucket_scatter: [Option<f64>; 3],
    pub per_category: Vec<CategoryScatter>,
}

impl GeometryReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("geometry.mean_inter_center_distance".to_string(), self.mean_inter_center_distance),
            ("geometry.score_weighted_scatter".to_string(), self.score_weighted_scatter),
        ];
        for (k, v) in self.bucket_scatter.iter().enumerate() {
            if let Some(v) = v {
                rows.push((format!("geometry.scatter.score{k}"), *v));
            }
        }
        for c in &self.per_category {
            for (k, v) in c.buckets.iter().enumerate() {
                if let Some(v) = v {
                    rows.push((format!("geometry.phoneme{}.scatter.score{k}", c.phoneme_id), *v));
                }
            }
        }
        rows
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn bucket_means(sums: [f64; 3], counts: [usize; 3]) -> [Option<f64>; 3] {
    std::array::from_fn(|k| (counts[k] > 0).then(|| sums[k] / counts[k] as f64))
}

/// Geometry of a set of token embeddings `(N, d)` with their phonemes and
/// phone scores. Centers use the loss module's convention (unit-normalized
/// features); distances here are plain Euclidean.
pub fn geometry_of_tokens<T: Scalar>(
    embeddings: &Tensor<T>,
    phoneme_ids: &[usize],
    scores: &[f64],
) -> Result<GeometryReport, MetricsError> {
    let n = phoneme_ids.len();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    if scores.len() != n {
        return Err(MetricsError::Mismatch(scores.len(), n));
    }
    let centers = compute_centers(&Tape::inference(), embeddings, phoneme_ids, &vec![true; n], true)?;
    let m = centers.len();
    let c: Vec<Vec<f64>> = (0..m).map(|r| centers.centers.row(r).iter().map(|v| v.as_f64()).collect()).collect();

    let mut inter = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            inter += euclid(&c[i], &c[j]);
        }
    }
    let mean_inter_center_distance = if m < 2 { 0.0 } else { inter / (m * (m - 1) / 2) as f64 };

    let mut weighted = 0.0;
    let (mut sums, mut counts) = ([0.0; 3], [0usize; 3]);
    let mut cat_sums = vec![[0.0; 3]; m];
    let mut cat_counts = vec![[0usize; 3]; m];
    for t in 0..n {
        let r = centers.row_of(centers.token_phonemes[t]).expect("own center");
        let f: Vec<f64> = centers.features.row(t).iter().map(|v| v.as_f64()).collect();
        let dist = euclid(&f, &c[r]);
        weighted += dist * scores[t];
        let k = score_bucket(scores[t]);
        sums[k] += dist;
        counts[k] += 1;
        cat_sums[r][k] += dist;
        cat_counts[r][k] += 1;
    }
    Ok(GeometryReport {
        mean_inter_center_distance,
        score_weighted_scatter: weighted / n as f64,
        bucket_scatter: bucket_means(sums, counts),
        per_category: (0..m)
            .map(|r| CategoryScatter {
                phoneme_id: centers.categories[r],
                tokens: centers.counts[r],
                buckets: bucket_means(cat_sums[r], cat_counts[r]),
            })
            .collect(),
    })
}

/// Pre-head phone embeddings of every phone in the dataset, in order.
pub fn dataset_embeddings<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &[UtteranceSample],
) -> Result<Vec<PhoneEmbedding<T>>, MetricsError> {
    let mut all = Vec::new();
    for batch in make_batches(dataset, EVAL_BATCH, params.config.max_len, None)? {
        all.extend(extract_phone_embeddings(params, &batch)?);
    }
    Ok(all)
}

pub fn geometry<T: Scalar>(params: &ModelParams<T>, dataset: &[UtteranceSample]) -> Result<GeometryReport, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::Empty);
    }
    let emb = dataset_embeddings(params, dataset)?;
    let d = params.config.d_model;
    let flat: Vec<T> = emb.iter().flat_map(|e| e.embedding.iter().copied()).collect();
    let tensor = Tensor::new(vec![emb.len(), d], flat).map_err(ModelError::from)?;
    let ids: Vec<usize> = emb.iter().map(|e| e.phoneme_id).collect();
    let scores: Vec<f64> = emb.iter().map(|e| e.phone_accuracy).collect();
    geometry_of_tokens(&tensor, &ids, &scores)
}

/// Two-column `key value` text table.
pub fn format_table(rows: &[(String, f64)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v:.6}");
    }
    out
}

/// CSV with header `utt_id,position,phoneme_id,phone_score,e0,..,e{d-1}`.
/// Values use the shortest round-trip representation.
pub fn write_embeddings_csv<T: Scalar>(mut out: impl Write, embeddings: &[PhoneEmbedding<T>]) -> std::io::Result<()> {
    let d = embeddings.first().map_or(0, |e| e.embedding.len());
    let mut header = String::from("utt_id,position,phoneme_id,phone_score");
    for j in 0..d {
        let _ = write!(header, ",e{j}");
    }
    writeln!(out, "{header}")?;
    for e in embeddings {
        let mut line = format!("{},{},{},{}", e.utt_id, e.position, e.phoneme_id, e.phone_accuracy);
        for v in &e.embedding {
            let _ = write!(line, ",{v}");
        }
        writeln!(out, "{line}")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_closed_forms() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() <= 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert_eq!(pearson(&[1.0], &[1.0]), Err(PearsonError::TooShort(1)));
        assert_eq!(pearson(&[1.0, 2.0], &[1.0]), Err(PearsonError::LengthMismatch(2, 1)));
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 1.0]), Err(PearsonError::Constant));
        assert_eq!(pearson(&[1.0, 2.0], &[3.0, 3.0]), Err(PearsonError::Constant));
        assert_eq!(pearson(&[1.0, f64::NAN], &[3.0, 2.0]), Err(PearsonError::NonFinite));
    }

    #[test]
    fn geometry_spot_values() {
        let same = Tensor::new(vec![3, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let g = geometry_of_tokens(&same, &[0, 1, 2], &[2.0, 1.0, 0.0]).unwrap();
        assert_eq!(g.mean_inter_center_distance, 0.0);

        let protos = Tensor::new(vec![4, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let g = geometry_of_tokens(&protos, &[0, 0, 1, 1], &[1.0, 2.0, 0.0, 2.0]).unwrap();
        assert!((g.mean_inter_center_distance - 2f64.sqrt()).abs() <= 1e-12);
        assert_eq!(g.score_weighted_scatter, 0.0);
        assert_eq!(g.bucket_scatter, [Some(0.0), Some(0.0), Some(0.0)]);

        let spread = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = geometry_of_tokens(&spread, &[0, 0], &[0.0, 0.0]).unwrap();
        assert_eq!(g.score_weighted_scatter, 0.0);
        assert!(g.bucket_scatter[0].unwrap() > 0.0);
        assert_eq!(g.bucket_scatter[2], None);
    }

    #[test]
    fn table_aligns_keys() {
        let t = format_table(&[("a".into(), 1.0), ("long.key".into(), 0.5)]);
        assert_eq!(t, "a         1.000000\nlong.key  0.500000\n");
    }
}
