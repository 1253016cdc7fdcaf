//! Seeded multi-trial training, sweeps and the step log.

mod adam;

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dataset::{make_batches, DatasetError, UtteranceSample};
use crate::loss::{batch_loss, LossConfig, LossError, LossValues};
use crate::metrics::{evaluate, geometry, EvalOptions, EvalReport, GeometryReport, MetricsError};
use crate::model::{forward, init_params, ModelConfig, ModelError, ModelParams};
use crate::rng::epoch_shuffle_seed;
use crate::scalar::Scalar;

pub const LOG_HEADER: &str = "seed,epoch,step,l_mse,l_pd,l_ot,l_pco,wall_ms";
pub const SWEEP_HEADER: &str = "value,seed,phone_pcc,word_acc_pcc,utt_acc_pcc,inter_center_dist,score_weighted_scatter";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
}

impl LrSchedule {
    /// Learning rate for a 1-based epoch.
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, gamma } => base * gamma.powi(((epoch - 1) / every) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seeds: Vec<u64>,
    pub loss: LossConfig,
    pub lr_schedule: LrSchedule,
    /// When false, `wall_ms` is logged as 0 so logs are reproducible byte
    /// for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 25,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            loss: LossConfig::default(),
            lr_schedule: LrSchedule::Constant,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if let LrSchedule::Step { every, gamma } = self.lr_schedule {
            if every == 0 || !(gamma > 0.0 && gamma.is_finite()) {
                return bad("step schedule needs every >= 1 and gamma > 0");
            }
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub l_mse: f64,
    pub l_pd: f64,
    pub l_ot: f64,
    pub l_pco: f64,
    pub wall_ms: u64,
}

impl TrainLogRow {
    pub fn values(&self) -> LossValues {
        LossValues { l_mse: self.l_mse, l_pd: self.l_pd, l_ot: self.l_ot, l_pco: self.l_pco }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.seed, self.epoch, self.step, self.l_mse, self.l_pd, self.l_ot, self.l_pco, self.wall_ms
        )
    }
}

pub fn write_log_csv(mut out: impl Write, rows: &[TrainLogRow], header: bool) -> std::io::Result<()> {
    if header {
        writeln!(out, "{LOG_HEADER}")?;
    }
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    out.flush()
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("seed {seed}, step {step}: non-finite {term}")]
    NonFinite { seed: u64, step: usize, term: String },
    #[error("seed {seed}, step {step}: {source}")]
    Step { seed: u64, step: usize, source: Box<TrainError> },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("evaluation: {0}")]
    Metrics(#[from] MetricsError),
}

impl TrainError {
    /// True when the failure is a numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::Step { source, .. } => source.is_numerical(),
            TrainError::Metrics(MetricsError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. }))) => true,
            other => numerical_cause(other).is_some(),
        }
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone)]
pub struct SeedRun<T> {
    pub seed: u64,
    pub params: ModelParams<T>,
    pub eval: EvalReport,
    pub geometry: GeometryReport,
    pub log: Vec<TrainLogRow>,
}

/// Where a numerical failure happened, if `e` is one.
fn numerical_cause(e: &TrainError) -> Option<String> {
    let op_of = |a: &AutodiffError| match a {
        AutodiffError::NonFinite { op } | AutodiffError::DivisorTooSmall { op } => Some(*op),
        _ => None,
    };
    match e {
        TrainError::NonFinite { term, .. } => Some(term.clone()),
        TrainError::Loss(LossError::Term { term, source }) => op_of(source).map(|op| format!("{term} ({op})")),
        TrainError::Model(ModelError::Autodiff(a)) => op_of(a).map(|op| format!("forward ({op})")),
        TrainError::Autodiff(a) => op_of(a).map(|op| format!("update ({op})")),
        _ => None,
    }
}

/// One optimizer step on one batch; returns the loss values before the
/// update.
fn train_step<T: Scalar>(
    params: &ModelParams<T>,
    opt: &mut Adam<T>,
    batch: &crate::dataset::Batch,
    loss: &LossConfig,
    lr: f64,
) -> Result<(ModelParams<T>, LossValues), TrainError> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward(&tape, &bound, batch)?;
    let breakdown = batch_loss(&tape, &out, batch, loss)?;
    let values = breakdown.values();
    for (name, v) in [("l_mse", values.l_mse), ("l_pd", values.l_pd), ("l_ot", values.l_ot), ("l_pco", values.l_pco)] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite { seed: 0, step: 0, term: name.to_string() });
        }
    }
    let grads = tape.backward(&breakdown.l_pco)?;
    let leaves = bound.tensors();
    let g: Vec<Tensor<T>> = leaves.iter().map(|t| grads.get(t)).collect();
    let updated = opt.step(&params.tensors(), &g, lr)?;
    Ok((ModelParams::from_tensors(params.config, updated)?, values))
}

/// Trains one seed from scratch and returns the final parameters and log.
pub fn fit_seed<T: Scalar>(
    train_set: &[UtteranceSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<T>, Vec<TrainLogRow>), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    let start = Instant::now();
    let mut params = init_params::<T>(model, seed)?;
    let mut opt = Adam::new(cfg.adam, &params.tensors());
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_schedule.rate(cfg.learning_rate, epoch);
        let batches = make_batches(train_set, cfg.batch_size, model.max_len, Some(epoch_shuffle_seed(seed, epoch)))?;
        for batch in &batches {
            step += 1;
            let (next, v) = train_step(&params, &mut opt, batch, &cfg.loss, lr).map_err(|e| match numerical_cause(&e) {
                Some(term) => TrainError::NonFinite { seed, step, term },
                None => TrainError::Step { seed, step, source: Box::new(e) },
            })?;
            params = next;
            let wall_ms = if cfg.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 };
            log.push(TrainLogRow {
                seed,
                epoch,
                step,
                l_mse: v.l_mse,
                l_pd: v.l_pd,
                l_ot: v.l_ot,
                l_pco: v.l_pco,
                wall_ms,
            });
        }
    }
    Ok((params, log))
}

/// Trains, evaluates and measures geometry for one seed.
pub fn train_seed<T: Scalar>(
    train_set: &[UtteranceSample],
    eval_set: &[UtteranceSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SeedRun<T>, TrainError> {
    if eval_set.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let (params, log) = fit_seed(train_set, model, cfg, seed)?;
    let eval = evaluate(&params, eval_set, EvalOptions::default())?;
    let geometry = geometry(&params, eval_set)?;
    Ok(SeedRun { seed, params, eval, geometry, log })
}

/// Runs every seed in `cfg.seeds`, in parallel. Results come back in seed
/// order; each seed's outcome is independent of the others.
pub fn train<T: Scalar>(
    train_set: &[UtteranceSample],
    eval_set: &[UtteranceSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Vec<Result<SeedRun<T>, TrainError>> {
    cfg.seeds.par_iter().map(|&seed| train_seed(train_set, eval_set, model, cfg, seed)).collect()
}

/// Like [`train`] but fails on the first seed error.
pub fn train_all<T: Scalar>(
    train_set: &[UtteranceSample],
    eval_set: &[UtteranceSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SeedRun<T>>, TrainError> {
    train(train_set, eval_set, model, cfg).into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaD,
    LambdaO,
}

impl SweepParam {
    /// Loss weights at one sweep value: the distinction sweep drops the
    /// tightness term, the tightness sweep fixes the distinction weight at 5.
    pub fn loss_at(&self, base: &LossConfig, value: f64) -> LossConfig {
        match self {
            SweepParam::LambdaD => LossConfig { lambda_d: value, lambda_o: 0.0, ..*base },
            SweepParam::LambdaO => LossConfig { lambda_d: 5.0, lambda_o: value, ..*base },
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lambda_d" => Ok(SweepParam::LambdaD),
            "lambda_o" => Ok(SweepParam::LambdaO),
            _ => Err(format!("unknown sweep parameter {s:?} (expected lambda_d or lambda_o)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint<T> {
    pub value: f64,
    pub runs: Vec<SeedRun<T>>,
}

pub fn sweep<T: Scalar>(
    param: SweepParam,
    values: &[f64],
    train_set: &[UtteranceSample],
    eval_set: &[UtteranceSample],
    model: &ModelConfig,
    base: &TrainConfig,
) -> Result<Vec<SweepPoint<T>>, TrainError> {
    if values.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let cfg = TrainConfig { loss: param.loss_at(&base.loss, value), ..base.clone() };
            Ok(SweepPoint { value, runs: train_all(train_set, eval_set, model, &cfg)? })
        })
        .collect()
}

pub fn sweep_csv<T>(points: &[SweepPoint<T>]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for p in points {
        for r in &p.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.value,
                r.seed,
                r.eval.phone.pcc,
                r.eval.word.accuracy,
                r.eval.utterance.accuracy,
                r.geometry.mean_inter_center_distance,
                r.geometry.score_weighted_scatter
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let s = LrSchedule::Step { every: 10, gamma: 0.5 };
        assert_eq!(s.rate(1.0, 1), 1.0);
        assert_eq!(s.rate(1.0, 10), 1.0);
        assert_eq!(s.rate(1.0, 11), 0.5);
        assert_eq!(s.rate(1.0, 21), 0.25);
        assert_eq!(LrSchedule::Constant.rate(0.3, 99), 0.3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { seeds: vec![], ..Default::default() }.validate().is_err());
        let bad = LrSchedule::Step { every: 0, gamma: 0.5 };
        assert!(TrainConfig { lr_schedule: bad, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn sweep_holds_the_other_weight() {
        let base = LossConfig::default();
        let d = SweepParam::LambdaD.loss_at(&base, 1.0);
        assert_eq!((d.lambda_d, d.lambda_o), (1.0, 0.0));
        let o = SweepParam::LambdaO.loss_at(&base, 0.5);
        assert_eq!((o.lambda_d, o.lambda_o), (5.0, 0.5));
        assert!("lambda_x".parse::<SweepParam>().is_err());
    }

    #[test]
    fn log_row_format() {
        let r = TrainLogRow { seed: 1, epoch: 2, step: 3, l_mse: 0.5, l_pd: -1.25, l_ot: 0.0, l_pco: 0.1, wall_ms: 0 };
        assert_eq!(r.csv(), "1,2,3,0.5,-1.25,0,0.1,0");
    }
}
