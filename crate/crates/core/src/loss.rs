//! Multi-aspect MSE and the phonemic contrast ordinal (PCO) regularizer.
//!
//! The regularizer works on phone-level encoder outputs. Tokens are
//! optionally scaled to unit norm, grouped by phoneme category into batch
//! centers, and then
//!
//! * the phonemic distinction term is minus the mean distance over ordered
//!   pairs of distinct centers, times the margin;
//! * the ordinal tightness term is the mean over tokens of the distance to
//!   the token's own center, weighted by its phone score.
//!
//! Centers are recomputed per batch and gradients flow through them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dataset::Batch;
use crate::model::ForwardOutput;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_d: f64,
    pub lambda_o: f64,
    pub margin: f64,
    pub normalize_features: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_d: 5.0, lambda_o: 0.1, margin: 1.0, normalize_features: true }
    }
}

impl LossConfig {
    pub fn with_lambdas(lambda_d: f64, lambda_o: f64) -> Self {
        Self { lambda_d, lambda_o, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_d) || !ok(self.lambda_o) {
            return Err(LossError::Config("lambda_d and lambda_o must be finite and >= 0".into()));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(LossError::Config("margin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("{term}: {source}")]
    Term { term: &'static str, source: AutodiffError },
    #[error("no unmasked tokens")]
    EmptyBatch,
    #[error("regression pair {name} has no valid elements")]
    EmptyPair { name: String },
    #[error("regression pair {name}: {reason}")]
    PairShape { name: String, reason: String },
    #[error("no center for phoneme {0}")]
    MissingCenter(usize),
    #[error("{0} ids/scores/mask do not match {1} embedding rows")]
    TokenShape(usize, usize),
}

impl From<AutodiffError> for LossError {
    fn from(source: AutodiffError) -> Self {
        LossError::Term { term: "loss", source }
    }
}

fn term(name: &'static str) -> impl Fn(AutodiffError) -> LossError {
    move |source| LossError::Term { term: name, source }
}

/// One granularity x aspect prediction with its targets.
#[derive(Debug, Clone)]
pub struct RegressionPair<T> {
    pub name: String,
    pub prediction: Tensor<T>,
    pub target: Vec<T>,
    pub mask: Vec<bool>,
}

/// The nine pairs of a forward pass: five utterance aspects, three word
/// aspects (broadcast to phones), one phone accuracy.
pub fn regression_pairs<T: Scalar>(
    tape: &Tape<T>,
    out: &ForwardOutput<T>,
    batch: &Batch,
) -> Result<Vec<RegressionPair<T>>, LossError> {
    let cvt = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
    let n_asp = out.utt_pred.shape()[1];
    let n_tok = out.token_cells.len();
    let mut pairs = Vec::with_capacity(n_asp + batch.word_targets.len() + 1);
    for a in 0..n_asp {
        let pred = tape.slice(&out.utt_pred, 1, a, 1).map_err(term("l_mse"))?;
        let target: Vec<f64> = (0..batch.batch_size).map(|b| batch.utterance_targets[b * n_asp + a]).collect();
        pairs.push(RegressionPair {
            name: format!("utterance.{a}"),
            prediction: pred,
            target: cvt(&target),
            mask: vec![true; batch.batch_size],
        });
    }
    for (a, targets) in batch.word_targets.iter().enumerate() {
        let pred = tape.slice(&out.word_pred, 1, a, 1).map_err(term("l_mse"))?;
        pairs.push(RegressionPair {
            name: format!("word.{a}"),
            prediction: pred,
            target: cvt(&batch.gather_tokens(targets)),
            mask: vec![true; n_tok],
        });
    }
    pairs.push(RegressionPair {
        name: "phone".into(),
        prediction: out.phone_pred.clone(),
        target: cvt(&batch.gather_tokens(&batch.phone_targets)),
        mask: vec![true; n_tok],
    });
    Ok(pairs)
}

/// Mean over pairs of the per-pair masked mean squared error.
pub fn mse_loss<T: Scalar>(tape: &Tape<T>, pairs: &[RegressionPair<T>]) -> Result<Tensor<T>, LossError> {
    let err = term("l_mse");
    let mut total: Option<Tensor<T>> = None;
    for p in pairs {
        if p.target.len() != p.prediction.len() || p.mask.len() != p.prediction.len() {
            return Err(LossError::PairShape {
                name: p.name.clone(),
                reason: format!(
                    "{} predictions, {} targets, {} mask entries",
                    p.prediction.len(),
                    p.target.len(),
                    p.mask.len()
                ),
            });
        }
        if !p.mask.iter().any(|&m| m) {
            return Err(LossError::EmptyPair { name: p.name.clone() });
        }
        // masked targets may hold the sentinel; zero them so they stay inert
        let target: Vec<T> =
            p.target.iter().zip(&p.mask).map(|(&t, &m)| if m { t } else { T::zero() }).collect();
        let target = Tensor::new(p.prediction.shape().to_vec(), target).map_err(&err)?;
        let diff = tape.sub(&p.prediction, &target).map_err(&err)?;
        let sq = tape.mul(&diff, &diff).map_err(&err)?;
        let pair_mean = tape.masked_mean(&sq, &p.mask).map_err(&err)?;
        total = Some(match total {
            None => pair_mean,
            Some(acc) => tape.add(&acc, &pair_mean).map_err(&err)?,
        });
    }
    let total = total.ok_or(LossError::EmptyBatch)?;
    let inv = T::one() / T::from_usize(pairs.len()).expect("fits");
    tape.scale(&total, inv).map_err(err)
}

/// Per-category feature centers of one batch.
#[derive(Debug, Clone)]
pub struct CenterMap<T> {
    /// Phoneme ids present, ascending; row `i` of `centers` belongs to
    /// `categories[i]`.
    pub categories: Vec<usize>,
    pub counts: Vec<usize>,
    /// `(M, d)`.
    pub centers: Tensor<T>,
    /// The unmasked token embeddings the centers were computed from
    /// (unit-normalized when requested), `(N, d)`.
    pub features: Tensor<T>,
    pub token_phonemes: Vec<usize>,
}

impl<T: Scalar> CenterMap<T> {
    /// Centers supplied directly, e.g. for evaluating a term against fixed
    /// reference points.
    pub fn explicit(categories: Vec<usize>, centers: Tensor<T>) -> Self {
        let m = categories.len();
        Self {
            counts: vec![1; m],
            features: centers.clone(),
            token_phonemes: categories.clone(),
            categories,
            centers,
        }
    }

    /// Number of centers (M).
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn row_of(&self, phoneme: usize) -> Option<usize> {
        self.categories.binary_search(&phoneme).ok()
    }

    pub fn get(&self, phoneme: usize) -> Option<(&[T], usize)> {
        self.row_of(phoneme).map(|r| (self.centers.row(r), self.counts[r]))
    }
}

fn as_rows<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
    if x.shape().len() == 2 {
        Ok(x.clone())
    } else {
        let (r, c) = x.rows_cols();
        tape.reshape(x, vec![r, c])
    }
}

/// Groups unmasked token embeddings by phoneme and averages each group.
///
/// `embeddings` is `(rows, d)` or `(B, L, d)`; `phoneme_ids` and `mask`
/// run over its rows.
pub fn compute_centers<T: Scalar>(
    tape: &Tape<T>,
    embeddings: &Tensor<T>,
    phoneme_ids: &[usize],
    mask: &[bool],
    normalize: bool,
) -> Result<CenterMap<T>, LossError> {
    let err = term("centers");
    let rows = as_rows(tape, embeddings).map_err(&err)?;
    let n_rows = rows.shape()[0];
    if phoneme_ids.len() != n_rows || mask.len() != n_rows {
        return Err(LossError::TokenShape(phoneme_ids.len().min(mask.len()), n_rows));
    }
    let keep: Vec<usize> = (0..n_rows).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut features = if keep.len() == n_rows { rows } else { tape.gather(&rows, &keep).map_err(&err)? };
    if normalize {
        let norms = tape.l2_norm(&features).map_err(&err)?;
        features = tape.div_col(&features, &norms).map_err(&err)?;
    }
    let token_phonemes: Vec<usize> = keep.iter().map(|&i| phoneme_ids[i]).collect();
    let mut categories = token_phonemes.clone();
    categories.sort_unstable();
    categories.dedup();
    let mut counts = vec![0usize; categories.len()];
    let rows_of: Vec<usize> = token_phonemes
        .iter()
        .map(|p| categories.binary_search(p).expect("present"))
        .collect();
    rows_of.iter().for_each(|&r| counts[r] += 1);

    let n = keep.len();
    let mut assign = vec![T::zero(); categories.len() * n];
    for (t, &r) in rows_of.iter().enumerate() {
        assign[r * n + t] = T::one() / T::from_usize(counts[r]).expect("fits");
    }
    let assign = Tensor::new(vec![categories.len(), n], assign).map_err(&err)?;
    let centers = tape.matmul(&assign, &features).map_err(&err)?;
    Ok(CenterMap { categories, counts, centers, features, token_phonemes })
}

/// `-(margin / (M (M - 1))) * sum over ordered pairs i != j of |c_i - c_j|`.
/// Zero, with no gradient, when fewer than two centers exist.
pub fn phonemic_distinction<T: Scalar>(
    tape: &Tape<T>,
    centers: &CenterMap<T>,
    margin: T,
) -> Result<Tensor<T>, LossError> {
    let err = term("l_pd");
    let m = centers.len();
    if m < 2 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let (mut left, mut right) = (Vec::with_capacity(m * (m - 1)), Vec::with_capacity(m * (m - 1)));
    for i in 0..m {
        for j in 0..m {
            if i != j {
                left.push(i);
                right.push(j);
            }
        }
    }
    let a = tape.gather(&centers.centers, &left).map_err(&err)?;
    let b = tape.gather(&centers.centers, &right).map_err(&err)?;
    let dist = tape.l2_norm(&tape.sub(&a, &b).map_err(&err)?).map_err(&err)?;
    let total = tape.sum(&dist).map_err(&err)?;
    let k = -margin / T::from_usize(m * (m - 1)).expect("fits");
    tape.scale(&total, k).map_err(err)
}

/// `(1/N) * sum_i |h_i - c(h_i)| * y_i` over unmasked tokens.
///
/// `features` must live in the same space as the centers (normalized when
/// the centers were built from normalized tokens).
pub fn ordinal_tightness<T: Scalar>(
    tape: &Tape<T>,
    features: &Tensor<T>,
    phoneme_ids: &[usize],
    phone_scores: &[f64],
    mask: &[bool],
    centers: &CenterMap<T>,
) -> Result<Tensor<T>, LossError> {
    let err = term("l_ot");
    let rows = as_rows(tape, features).map_err(&err)?;
    let n_rows = rows.shape()[0];
    if phoneme_ids.len() != n_rows || phone_scores.len() != n_rows || mask.len() != n_rows {
        return Err(LossError::TokenShape(phoneme_ids.len(), n_rows));
    }
    let keep: Vec<usize> = (0..n_rows).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let selected = if keep.len() == n_rows { rows } else { tape.gather(&rows, &keep).map_err(&err)? };
    let center_rows = keep
        .iter()
        .map(|&i| centers.row_of(phoneme_ids[i]).ok_or(LossError::MissingCenter(phoneme_ids[i])))
        .collect::<Result<Vec<_>, _>>()?;
    let own = tape.gather(&centers.centers, &center_rows).map_err(&err)?;
    let dist = tape.l2_norm(&tape.sub(&selected, &own).map_err(&err)?).map_err(&err)?;
    let weights = Tensor::new(vec![keep.len()], keep.iter().map(|&i| T::lit(phone_scores[i])).collect())
        .map_err(&err)?;
    let weighted = tape.sum(&tape.mul(&dist, &weights).map_err(&err)?).map_err(&err)?;
    let inv_n = T::one() / T::from_usize(keep.len()).expect("fits");
    tape.scale(&weighted, inv_n).map_err(err)
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub l_mse: f64,
    pub l_pd: f64,
    pub l_ot: f64,
    pub l_pco: f64,
}

impl LossValues {
    /// `l_mse + lambda_d * l_pd + lambda_o * l_ot`, same operation order as
    /// the tape.
    pub fn recombine(&self, cfg: &LossConfig) -> f64 {
        self.l_mse + cfg.lambda_d * self.l_pd + cfg.lambda_o * self.l_ot
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown<T> {
    pub l_mse: Tensor<T>,
    pub l_pd: Tensor<T>,
    pub l_ot: Tensor<T>,
    pub l_pco: Tensor<T>,
    /// Categories present.
    pub m: usize,
    /// Unmasked tokens.
    pub n: usize,
    pub centers: CenterMap<T>,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn values(&self) -> LossValues {
        LossValues {
            l_mse: self.l_mse.item().as_f64(),
            l_pd: self.l_pd.item().as_f64(),
            l_ot: self.l_ot.item().as_f64(),
            l_pco: self.l_pco.item().as_f64(),
        }
    }
}

/// `L_mse + lambda_d * L_pd + lambda_o * L_ot`.
///
/// Terms whose weight is zero are still evaluated (for logging) but stay
/// out of the graph, so `(0, 0)` reproduces plain MSE exactly.
#[allow(clippy::too_many_arguments)]
pub fn pco_loss<T: Scalar>(
    tape: &Tape<T>,
    pairs: &[RegressionPair<T>],
    embeddings: &Tensor<T>,
    phoneme_ids: &[usize],
    phone_scores: &[f64],
    mask: &[bool],
    config: &LossConfig,
) -> Result<LossBreakdown<T>, LossError> {
    config.validate()?;
    let l_mse = mse_loss(tape, pairs)?;
    let centers = compute_centers(tape, embeddings, phoneme_ids, mask, config.normalize_features)?;
    let l_pd = phonemic_distinction(tape, &centers, T::lit(config.margin))?;
    let n = centers.token_phonemes.len();
    let kept_scores: Vec<f64> = (0..mask.len()).filter(|&i| mask[i]).map(|i| phone_scores[i]).collect();
    let l_ot = ordinal_tightness(
        tape,
        &centers.features,
        &centers.token_phonemes,
        &kept_scores,
        &vec![true; n],
        &centers,
    )?;

    let err = term("l_pco");
    let mut l_pco = l_mse.clone();
    if config.lambda_d != 0.0 {
        let w = tape.scale(&l_pd, T::lit(config.lambda_d)).map_err(&err)?;
        l_pco = tape.add(&l_pco, &w).map_err(&err)?;
    }
    if config.lambda_o != 0.0 {
        let w = tape.scale(&l_ot, T::lit(config.lambda_o)).map_err(&err)?;
        l_pco = tape.add(&l_pco, &w).map_err(&err)?;
    }
    Ok(LossBreakdown { m: centers.len(), n, l_mse, l_pd, l_ot, l_pco, centers })
}

/// [`pco_loss`] over a forward pass of `batch`.
pub fn batch_loss<T: Scalar>(
    tape: &Tape<T>,
    out: &ForwardOutput<T>,
    batch: &Batch,
    config: &LossConfig,
) -> Result<LossBreakdown<T>, LossError> {
    let pairs = regression_pairs(tape, out, batch)?;
    let ids = batch.gather_tokens(&batch.phoneme_ids);
    let scores = batch.gather_tokens(&batch.phone_targets);
    let mask = vec![true; ids.len()];
    pco_loss(tape, &pairs, &out.h_phone, &ids, &scores, &mask, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn pair(pred: &[f64], target: &[f64]) -> RegressionPair<f64> {
        RegressionPair {
            name: "p".into(),
            prediction: t(&[pred.len()], pred),
            target: target.to_vec(),
            mask: vec![true; pred.len()],
        }
    }

    #[test]
    fn mse_perfect_fit_and_single_element() {
        let tape = Tape::new();
        let perfect = mse_loss(&tape, &[pair(&[1.0, 2.0], &[1.0, 2.0])]).unwrap();
        assert_eq!(perfect.item(), 0.0);
        let one = mse_loss(&tape, &[pair(&[1.5], &[2.0])]).unwrap();
        assert_eq!(one.item(), 0.25);
        let two = mse_loss(&tape, &[pair(&[1.5], &[2.0]), pair(&[0.0, 0.0], &[0.0, 0.0])]).unwrap();
        assert_eq!(two.item(), 0.125);
    }

    #[test]
    fn mse_is_quadratic_in_error() {
        let tape = Tape::new();
        let a = mse_loss(&tape, &[pair(&[0.3, -0.2, 1.1], &[0.0, 0.0, 0.0])]).unwrap().item();
        let b = mse_loss(&tape, &[pair(&[0.6, -0.4, 2.2], &[0.0, 0.0, 0.0])]).unwrap().item();
        assert!((b - 4.0 * a).abs() < 1e-15);
    }

    #[test]
    fn mse_ignores_masked_sentinels() {
        let tape = Tape::new();
        let mut p = pair(&[1.0, 99.0], &[1.0, -1.0]);
        p.mask = vec![true, false];
        assert_eq!(mse_loss(&tape, &[p.clone()]).unwrap().item(), 0.0);
        p.mask = vec![false, false];
        assert!(matches!(mse_loss(&tape, &[p]), Err(LossError::EmptyPair { .. })));
    }

    #[test]
    fn centers_are_means() {
        let tape = Tape::new();
        let emb = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let c = compute_centers(&tape, &emb, &[4, 4], &[true, true], false).unwrap();
        assert_eq!(c.get(4).unwrap(), (&[0.5, 0.5][..], 2));

        let emb = t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]);
        let c = compute_centers(&tape, &emb, &[4, 4], &[true, true], true).unwrap();
        let (center, _) = c.get(4).unwrap();
        assert!((center[0] - 0.5).abs() < 1e-12 && (center[1] - 0.5).abs() < 1e-12);

        let emb = t(&[2, 2], &[3.0, 4.0, 0.0, 1.0]);
        let c = compute_centers(&tape, &emb, &[1, 2], &[true, true], true).unwrap();
        let (center, count) = c.get(1).unwrap();
        assert_eq!(count, 1);
        assert!((center[0] - 0.6).abs() < 1e-12 && (center[1] - 0.8).abs() < 1e-12);
        assert!(c.get(3).is_none());
    }

    #[test]
    fn centers_skip_masked_tokens() {
        let tape = Tape::new();
        let emb = t(&[3, 2], &[1.0, 0.0, 50.0, 50.0, 0.0, 1.0]);
        let c = compute_centers(&tape, &emb, &[0, 7, 0], &[true, false, true], false).unwrap();
        assert_eq!(c.categories, vec![0]);
        assert_eq!(c.get(0).unwrap().0, &[0.5, 0.5]);
        assert!(matches!(
            compute_centers(&tape, &emb, &[0, 0, 0], &[false; 3], false),
            Err(LossError::EmptyBatch)
        ));
    }

    #[test]
    fn distinction_spot_values() {
        let tape = Tape::new();
        let two = CenterMap::explicit(vec![0, 1], t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let pd = phonemic_distinction(&tape, &two, 1.0).unwrap().item();
        assert!((pd + 2f64.sqrt()).abs() < 1e-12, "{pd}");

        let same = CenterMap::explicit(vec![0, 1, 2], t(&[3, 2], &[0.3, 0.4, 0.3, 0.4, 0.3, 0.4]));
        // each guarded distance is sqrt(NORM_EPS) rather than exactly 0
        let pd = phonemic_distinction(&tape, &same, 1.0).unwrap().item();
        assert!(pd <= 0.0 && pd.abs() <= crate::autodiff::NORM_EPS.sqrt() * (1.0 + 1e-9));

        let one = CenterMap::explicit(vec![0], t(&[1, 2], &[1.0, 0.0]));
        let pd = phonemic_distinction(&tape, &one, 1.0).unwrap();
        assert_eq!(pd.item(), 0.0);
        assert!(pd.node().is_none());
    }

    #[test]
    fn tightness_spot_values() {
        let tape = Tape::new();
        let centers = CenterMap::explicit(vec![0, 1], t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        let feats = t(&[2, 2], &[0.5, 0.0, 1.0, 0.0]);
        let ot = ordinal_tightness(&tape, &feats, &[0, 1], &[2.0, 0.0], &[true, true], &centers).unwrap();
        assert!((ot.item() - 0.5).abs() <= 1e-12);

        let zero = ordinal_tightness(&tape, &feats, &[0, 1], &[0.0, 0.0], &[true, true], &centers).unwrap();
        assert_eq!(zero.item(), 0.0);

        let missing = ordinal_tightness(&tape, &feats, &[0, 5], &[1.0, 1.0], &[true, true], &centers);
        assert!(matches!(missing, Err(LossError::MissingCenter(5))));
    }

    #[test]
    fn pco_combines_terms() {
        let emb = t(&[4, 3], &[1.0, 0.2, 0.0, 0.1, 1.0, 0.3, 0.9, 0.0, 0.4, -0.2, 0.8, 0.1]);
        let ids = [0, 1, 0, 1];
        let scores = [2.0, 1.0, 0.0, 2.0];
        let mask = [true; 4];
        let pairs = [pair(&[0.1, 0.9], &[0.0, 1.0])];
        for (ld, lo) in [(0.0, 0.0), (5.0, 0.0), (5.0, 1.0), (5.0, 0.1)] {
            let tape = Tape::new();
            let cfg = LossConfig::with_lambdas(ld, lo);
            let b = pco_loss(&tape, &pairs, &emb, &ids, &scores, &mask, &cfg).unwrap();
            let v = b.values();
            assert_eq!(v.l_pco, v.recombine(&cfg));
            assert_eq!((b.m, b.n), (2, 4));
            if ld == 0.0 && lo == 0.0 {
                assert_eq!(v.l_pco.to_bits(), v.l_mse.to_bits());
            }
            assert!(v.l_pd <= 0.0 && v.l_ot >= 0.0 && v.l_mse >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { lambda_d: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { margin: 0.0, ..Default::default() }.validate().is_err());
        let d = LossConfig::default();
        assert_eq!((d.lambda_d, d.lambda_o, d.margin, d.normalize_features), (5.0, 0.1, 1.0, true));
    }
}
