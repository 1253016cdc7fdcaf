mod args;
mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::FromArgMatches;
use pco_core::autodiff::AutodiffError;
use pco_core::dataset::{generate_synthetic, load_dataset, write_dataset, SyntheticSpec, UtteranceSample};
use pco_core::loss::LossConfig;
use pco_core::metrics::{dataset_embeddings, evaluate, format_table, geometry, write_embeddings_csv, EvalOptions, EvalReport, MetricsError, PearsonError};
use pco_core::model::{read_checkpoint, write_checkpoint, ModelConfig, ModelError, ModelParams};
use pco_core::trainer::{sweep, sweep_csv, train_all, write_log_csv, LrSchedule, SeedRun, SweepParam, TrainConfig, TrainError};
use serde_json::json;

use args::{Cli, Command, EvalArgs, ExportArgs, GenArgs, SweepArgs, TrainArgs};
use manifest::{digest_file, run_dir, sidecar, InputFile, RunManifest};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    /// Bad flags, config or input data: exit 2.
    Usage(anyhow::Error),
    /// Training or evaluation produced non-finite values: exit 3.
    Numerical(anyhow::Error),
    /// Could not write artifacts: exit 1.
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Io(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(e) | Failure::Numerical(e) | Failure::Io(e) => format!("{e:#}"),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn io(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Io(e.into())
}

fn from_train(e: TrainError) -> Failure {
    if e.is_numerical() {
        Failure::Numerical(e.into())
    } else {
        Failure::Usage(e.into())
    }
}

fn from_metrics(e: MetricsError) -> Failure {
    let numerical = matches!(
        e,
        MetricsError::Pearson { source: PearsonError::NonFinite, .. }
            | MetricsError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. }))
    );
    if numerical {
        Failure::Numerical(e.into())
    } else {
        Failure::Usage(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let argv = match args::expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match args::command().try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ExportEmbeddings(a) => cmd_export(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// Writes the manifest, runs `body`, then records how it ended.
fn with_manifest(manifest: &mut RunManifest, body: impl FnOnce() -> CmdResult) -> CmdResult {
    manifest.write().map_err(io)?;
    let outcome = body();
    let recorded = match &outcome {
        Ok(()) => manifest.finish(Ok(())),
        Err(f) => manifest.finish(Err(&f.message())),
    };
    outcome?;
    recorded.map_err(io)
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(io)?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(io)?;
    let mut out = BufWriter::new(file);
    write(&mut out).and_then(|()| out.flush()).with_context(|| format!("writing {}", path.display())).map_err(io)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_gen(a: &GenArgs) -> CmdResult {
    let spec = SyntheticSpec {
        phonemes: a.phonemes,
        center_scale: a.center_scale,
        noise_scale: a.noise_scale,
        utterances: a.utterances + a.eval_utterances,
        min_phones: a.min_phones,
        max_phones: a.max_phones,
        seed: a.seed,
    };
    spec.validate().map_err(usage)?;
    if a.utterances == 0 {
        return Err(usage(anyhow!("--utterances must be positive")));
    }
    let config = json!({ "synthetic": spec, "train_utterances": a.utterances, "eval_utterances": a.eval_utterances });
    let mut m = RunManifest::new("gen", config, vec![a.seed], BTreeMap::new(), sidecar(&a.out));
    m.artifacts.push(display(&a.out));
    let eval_out = a.eval_out.as_ref().filter(|_| a.eval_utterances > 0);
    if let Some(p) = eval_out {
        m.artifacts.push(display(p));
    }
    with_manifest(&mut m, || {
        let samples = generate_synthetic(&spec).map_err(usage)?;
        let (train, eval) = samples.split_at(a.utterances);
        write_file(&a.out, |w| write_dataset(w, train))?;
        if let Some(p) = eval_out {
            write_file(p, |w| write_dataset(w, eval))?;
        }
        println!("wrote {} utterances to {}", train.len(), a.out.display());
        if let Some(p) = eval_out {
            println!("wrote {} utterances to {}", eval.len(), p.display());
        }
        Ok(())
    })
}

/// Datasets, configs and input digests for `train` and `sweep`.
struct Resolved {
    train_set: Vec<UtteranceSample>,
    eval_set: Vec<UtteranceSample>,
    model: ModelConfig,
    train: TrainConfig,
    inputs: BTreeMap<String, InputFile>,
    config: serde_json::Value,
}

fn resolve(a: &TrainArgs) -> Result<Resolved, Failure> {
    let model = ModelConfig {
        d_model: a.model.d_model,
        n_blocks: a.model.blocks,
        n_heads: a.model.heads,
        ff_dim: a.model.ff_dim,
        max_len: a.model.max_len,
        ..Default::default()
    };
    model.validate().map_err(usage)?;
    let lr_schedule = match (a.lr_step_every, a.lr_gamma) {
        (Some(every), Some(gamma)) => LrSchedule::Step { every, gamma },
        _ => LrSchedule::Constant,
    };
    let train = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seeds: (0..a.seeds as u64).map(|i| a.first_seed + i).collect(),
        loss: LossConfig {
            lambda_d: a.lambda_d,
            lambda_o: a.lambda_o,
            margin: a.margin,
            normalize_features: !a.no_feature_norm,
        },
        lr_schedule,
        record_wall_time: a.wall_time,
        ..Default::default()
    };
    train.validate().map_err(usage)?;
    if a.parallel_seeds == Some(0) {
        return Err(usage(anyhow!("--parallel-seeds must be at least 1")));
    }

    let train_set = load_dataset(&a.data, true).map_err(usage)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("train".to_string(), digest_file(&a.data).map_err(usage)?);
    let eval_set = match &a.eval {
        Some(p) => {
            inputs.insert("eval".to_string(), digest_file(p).map_err(usage)?);
            load_dataset(p, true).map_err(usage)?
        }
        None => {
            eprintln!("note: no --eval given; scoring on the training set");
            train_set.clone()
        }
    };
    let config = json!({
        "model": model,
        "train": train,
        "data": { "train": display(&a.data), "eval": display(a.eval.as_ref().unwrap_or(&a.data)) },
    });
    Ok(Resolved { train_set, eval_set, model, train, inputs, config })
}

/// Runs `f` on a pool of `threads` workers, or rayon's global pool.
fn on_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, Failure> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(io)?;
            Ok(pool.install(f))
        }
    }
}

/// Averages each key over the row sets that all contain it.
fn mean_rows(sets: &[Vec<(String, f64)>]) -> Vec<(String, f64)> {
    let Some(first) = sets.first() else { return Vec::new() };
    let maps: Vec<BTreeMap<&str, f64>> = sets.iter().map(|s| s.iter().map(|(k, v)| (k.as_str(), *v)).collect()).collect();
    first
        .iter()
        .filter_map(|(k, _)| {
            let vals: Option<Vec<f64>> = maps.iter().map(|m| m.get(k.as_str()).copied()).collect();
            vals.map(|v| (k.clone(), v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}

fn seed_rows(run: &SeedRun<f64>) -> Vec<(String, f64)> {
    let mut rows = run.eval.rows();
    rows.extend(run.geometry.rows());
    rows
}

/// Summary table: seed-averaged rows, then each seed's headline rows.
fn summary(runs: &[SeedRun<f64>]) -> Vec<(String, f64)> {
    let headline = |k: &str| !k.contains(".phoneme");
    let sets: Vec<_> = runs.iter().map(seed_rows).collect();
    let mut rows: Vec<(String, f64)> =
        mean_rows(&sets).into_iter().filter(|(k, _)| headline(k)).map(|(k, v)| (format!("mean.{k}"), v)).collect();
    for (run, set) in runs.iter().zip(&sets) {
        rows.extend(set.iter().filter(|(k, _)| headline(k)).map(|(k, v)| (format!("seed{}.{k}", run.seed), *v)));
    }
    rows
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let r = resolve(a)?;
    let mut m = RunManifest::new("train", r.config.clone(), r.train.seeds.clone(), r.inputs.clone(), PathBuf::new());
    let dir = run_dir(a.run_dir.as_deref(), "train", &m.key());
    m = RunManifest::new("train", r.config, r.train.seeds.clone(), r.inputs, dir.join("manifest.json"));
    let seed_dir = |s: u64| dir.join(format!("seed-{s}"));
    for &s in &r.train.seeds {
        m.artifacts.push(display(&seed_dir(s).join("checkpoint.bin")));
        m.artifacts.push(display(&seed_dir(s).join("log.csv")));
        m.artifacts.push(display(&seed_dir(s).join("report.txt")));
    }
    m.artifacts.push(display(&dir.join("report.txt")));
    with_manifest(&mut m, || {
        let runs = on_pool(a.parallel_seeds, || train_all::<f64>(&r.train_set, &r.eval_set, &r.model, &r.train))?
            .map_err(from_train)?;
        for run in &runs {
            let sd = seed_dir(run.seed);
            write_file(&sd.join("checkpoint.bin"), |w| write_checkpoint(w, &run.params).map_err(std::io::Error::other))?;
            write_file(&sd.join("log.csv"), |w| write_log_csv(w, &run.log, true))?;
            let table = format_table(&seed_rows(run));
            write_file(&sd.join("report.txt"), |w| w.write_all(table.as_bytes()))?;
        }
        let table = format_table(&summary(&runs));
        write_file(&dir.join("report.txt"), |w| w.write_all(table.as_bytes()))?;
        print!("{table}");
        println!("artifacts in {}", dir.display());
        Ok(())
    })
}

fn parse_values(text: &str) -> Result<Vec<f64>, Failure> {
    let values: Vec<f64> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| usage(anyhow!("--values: {s:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(usage(anyhow!("--values needs at least one number")));
    }
    Ok(values)
}

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    let param: SweepParam = a.param.parse().map_err(|e: String| usage(anyhow!(e)))?;
    let values = parse_values(&a.values)?;
    let r = resolve(&a.train)?;
    let mut config = r.config;
    config["sweep"] = json!({ "param": param, "values": values });
    let key = RunManifest::new("sweep", config.clone(), r.train.seeds.clone(), r.inputs.clone(), PathBuf::new()).key();
    let dir = run_dir(a.train.run_dir.as_deref(), "sweep", &key);
    let out = a.out.clone().unwrap_or_else(|| dir.join("sweep.csv"));
    let mut m = RunManifest::new("sweep", config, r.train.seeds.clone(), r.inputs, dir.join("manifest.json"));
    m.artifacts.push(display(&out));
    with_manifest(&mut m, || {
        let points = on_pool(a.train.parallel_seeds, || {
            sweep::<f64>(param, &values, &r.train_set, &r.eval_set, &r.model, &r.train)
        })?
        .map_err(from_train)?;
        let csv = sweep_csv(&points);
        write_file(&out, |w| w.write_all(csv.as_bytes()))?;
        print!("{csv}");
        Ok(())
    })
}

fn load_checkpoint(path: &Path) -> Result<ModelParams<f64>, Failure> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display())).map_err(usage)?;
    read_checkpoint(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display())).map_err(usage)
}

fn checkpoint_inputs(checkpoint: &Path, data: &Path) -> Result<BTreeMap<String, InputFile>, Failure> {
    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".to_string(), digest_file(checkpoint).map_err(usage)?);
    inputs.insert("data".to_string(), digest_file(data).map_err(usage)?);
    Ok(inputs)
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let params = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data, true).map_err(usage)?;
    let inputs = checkpoint_inputs(&a.checkpoint, &a.data)?;
    let config = json!({ "model": params.config, "clip": a.clip });
    let key = RunManifest::new("eval", config.clone(), Vec::new(), inputs.clone(), PathBuf::new()).key();
    let dir = run_dir(a.run_dir.as_deref(), "eval", &key);
    let mut m = RunManifest::new("eval", config, Vec::new(), inputs, dir.join("manifest.json"));
    m.artifacts.push(display(&dir.join("report.txt")));
    with_manifest(&mut m, || {
        let report: EvalReport = evaluate(&params, &data, EvalOptions { clip: a.clip }).map_err(from_metrics)?;
        let geo = geometry(&params, &data).map_err(from_metrics)?;
        let mut rows = report.rows();
        rows.extend(geo.rows());
        let table = format_table(&rows);
        write_file(&dir.join("report.txt"), |w| w.write_all(table.as_bytes()))?;
        print!("{}", format_table(&rows.into_iter().filter(|(k, _)| !k.contains(".phoneme")).collect::<Vec<_>>()));
        Ok(())
    })
}

fn cmd_export(a: &ExportArgs) -> CmdResult {
    let params = load_checkpoint(&a.checkpoint)?;
    if let Some(d) = a.d_model {
        if d != params.config.d_model {
            return Err(usage(anyhow!(
                "checkpoint {} has d_model {}, expected {d}",
                a.checkpoint.display(),
                params.config.d_model
            )));
        }
    }
    let data = load_dataset(&a.data, true).map_err(usage)?;
    let inputs = checkpoint_inputs(&a.checkpoint, &a.data)?;
    let mut m = RunManifest::new("export-embeddings", json!({ "model": params.config }), Vec::new(), inputs, sidecar(&a.out));
    m.artifacts.push(display(&a.out));
    with_manifest(&mut m, || {
        let emb = dataset_embeddings(&params, &data).map_err(from_metrics)?;
        write_file(&a.out, |w| write_embeddings_csv(w, &emb))?;
        println!("wrote {} embeddings to {}", emb.len(), a.out.display());
        Ok(())
    })
}
