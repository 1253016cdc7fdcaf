//! Loop-based scalar reference for the loss terms, independent of the
//! tensor code paths.

use pco_core::autodiff::{Tape, Tensor};
use pco_core::loss::{compute_centers, mse_loss, ordinal_tightness, phonemic_distinction, RegressionPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-12;

/// Random padded batch: B <= 4 utterances, L <= 8 positions, P <= 5 phonemes,
/// d = 6 features per token.
pub struct Toy {
    pub rows: usize,
    pub d: usize,
    pub emb: Vec<f64>,
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
    pub preds: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub pred_masks: Vec<Vec<bool>>,
}

pub fn toy(rng: &mut ChaCha8Rng) -> Toy {
    let b = rng.random_range(1..=4);
    let l = rng.random_range(1..=8);
    let p = rng.random_range(1..=5);
    let d = 6;
    let rows = b * l;
    let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.75)).collect();
    mask[0] = true;
    let emb = (0..rows * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ids = (0..rows).map(|_| rng.random_range(0..p)).collect();
    let scores = (0..rows).map(|i| if mask[i] { rng.random_range(0..=2) as f64 } else { -1.0 }).collect();
    let n_pairs = 9;
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut pred_masks = Vec::new();
    for k in 0..n_pairs {
        let len = if k < 5 { b } else { rows };
        let mut m: Vec<bool> = (0..len).map(|_| rng.random_bool(0.8)).collect();
        m[0] = true;
        preds.push((0..len).map(|_| rng.random_range(-1.0..3.0)).collect());
        targets.push((0..len).map(|i| if m[i] { rng.random_range(0.0..2.0) } else { -1.0 }).collect());
        pred_masks.push(m);
    }
    Toy { rows, d, emb, ids, scores, mask, preds, targets, pred_masks }
}

pub fn pairs(t: &Toy) -> Vec<RegressionPair<f64>> {
    t.preds
        .iter()
        .zip(&t.targets)
        .zip(&t.pred_masks)
        .enumerate()
        .map(|(k, ((p, y), m))| RegressionPair {
            name: format!("pair{k}"),
            prediction: Tensor::vector(p.clone()).unwrap(),
            target: y.clone(),
            mask: m.clone(),
        })
        .collect()
}

// ---- scalar reference ----------------------------------------------------

pub fn norm(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    (s + EPS).sqrt()
}

pub fn oracle_mse(t: &Toy) -> f64 {
    let mut total = 0.0;
    for k in 0..t.preds.len() {
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..t.preds[k].len() {
            if t.pred_masks[k][i] {
                let e = t.preds[k][i] - t.targets[k][i];
                s += e * e;
                n += 1.0;
            }
        }
        total += s / n;
    }
    total / t.preds.len() as f64
}

/// (tokens, phoneme of each token, centers by phoneme id)
#[allow(clippy::type_complexity)]
pub fn oracle_centers(t: &Toy, normalize: bool) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>, Vec<Option<Vec<f64>>>) {
    let mut toks = Vec::new();
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for r in 0..t.rows {
        if !t.mask[r] {
            continue;
        }
        let mut v = t.emb[r * t.d..(r + 1) * t.d].to_vec();
        if normalize {
            let n = norm(&v);
            for x in v.iter_mut() {
                *x /= n;
            }
        }
        toks.push(v);
        ids.push(t.ids[r]);
        scores.push(t.scores[r]);
    }
    let max_id = *ids.iter().max().unwrap();
    let mut centers = vec![None; max_id + 1];
    for p in 0..=max_id {
        let members: Vec<&Vec<f64>> = toks.iter().zip(&ids).filter(|(_, &i)| i == p).map(|(v, _)| v).collect();
        if members.is_empty() {
            continue;
        }
        let mut c = vec![0.0; t.d];
        for m in &members {
            for j in 0..t.d {
                c[j] += m[j];
            }
        }
        for x in c.iter_mut() {
            *x /= members.len() as f64;
        }
        centers[p] = Some(c);
    }
    (toks, ids, scores, centers)
}

pub fn oracle_pd(centers: &[Option<Vec<f64>>], margin: f64) -> f64 {
    let present: Vec<&Vec<f64>> = centers.iter().flatten().collect();
    let m = present.len();
    if m < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let diff: Vec<f64> = present[i].iter().zip(present[j]).map(|(a, b)| a - b).collect();
                s += norm(&diff) * margin;
            }
        }
    }
    -s / (m * (m - 1)) as f64
}

pub fn oracle_ot(toks: &[Vec<f64>], ids: &[usize], scores: &[f64], centers: &[Option<Vec<f64>>]) -> f64 {
    let mut s = 0.0;
    for ((v, &p), &y) in toks.iter().zip(ids).zip(scores) {
        let c = centers[p].as_ref().unwrap();
        let diff: Vec<f64> = v.iter().zip(c).map(|(a, b)| a - b).collect();
        s += norm(&diff) * y;
    }
    s / toks.len() as f64
}

// ---- tensor path ---------------------------------------------------------

pub struct Terms {
    pub mse: f64,
    pub pd: f64,
    pub ot: f64,
}

pub fn tensor_terms(t: &Toy, normalize: bool, margin: f64) -> Terms {
    let tape = Tape::new();
    let emb = Tensor::new(vec![t.rows, t.d], t.emb.clone()).unwrap();
    let mse = mse_loss(&tape, &pairs(t)).unwrap().item();
    let centers = compute_centers(&tape, &emb, &t.ids, &t.mask, normalize).unwrap();
    let pd = phonemic_distinction(&tape, &centers, margin).unwrap().item();
    let n = centers.token_phonemes.len();
    let scores: Vec<f64> = (0..t.rows).filter(|&i| t.mask[i]).map(|i| t.scores[i]).collect();
    let ot = ordinal_tightness(&tape, &centers.features, &centers.token_phonemes, &scores, &vec![true; n], &centers)
        .unwrap()
        .item();
    Terms { mse, pd, ot }
}

/// Largest absolute gap between tensor and reference values of the three
/// terms over `trials` random batches.
pub fn max_deviation(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let t = toy(&mut rng);
        let normalize = trial % 2 == 0;
        let got = tensor_terms(&t, normalize, 1.0);
        let (toks, ids, scores, centers) = oracle_centers(&t, normalize);
        for (a, b) in [
            (got.mse, oracle_mse(&t)),
            (got.pd, oracle_pd(&centers, 1.0)),
            (got.ot, oracle_ot(&toks, &ids, &scores, &centers)),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
