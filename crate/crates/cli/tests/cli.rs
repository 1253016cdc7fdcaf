use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn pco(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pco"))
        .args(args)
        .current_dir(cwd)
        .env("PCO_RUN_DIR", cwd.join("runs"))
        .output()
        .expect("spawn pco")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small train/eval pair in `dir`.
fn small_data(dir: &Path) -> (PathBuf, PathBuf) {
    ok(&pco(
        &["gen", "--phonemes", "4", "--utterances", "30", "--eval-utterances", "10", "--eval-out", "eval.jsonl", "--seed", "3", "-o", "train.jsonl"],
        dir,
    ));
    (dir.join("train.jsonl"), dir.join("eval.jsonl"))
}

const FAST: &[&str] = &["--epochs", "2", "--batch-size", "10", "--d-model", "8", "--blocks", "1", "--ff-dim", "16", "--seeds", "2"];

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec!["train", "--data", "train.jsonl", "--eval", "eval.jsonl"];
    a.extend_from_slice(FAST);
    a.extend_from_slice(extra);
    a
}

#[test]
fn gen_writes_requested_count_and_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let args = ["gen", "--phonemes", "10", "--utterances", "500", "--seed", "7", "-o", "a.jsonl"];
    ok(&pco(&args, dir.path()));
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 500);
    let mut again = args;
    again[8] = "b.jsonl";
    ok(&pco(&again, dir.path()));
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    let m = manifest(&dir.path().join("a.jsonl.manifest.json"));
    assert_eq!(m["status"], "complete");
    assert_eq!(m["config"]["synthetic"]["seed"], 7);
}

#[test]
fn gen_rejects_single_phoneme() {
    let dir = TempDir::new().unwrap();
    let out = pco(&["gen", "--phonemes", "1", "-o", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn train_writes_per_seed_artifacts_and_repeats_exactly() {
    let dir = TempDir::new().unwrap();
    small_data(dir.path());
    let stdout = ok(&pco(&train_args(&["--lambda-d", "5", "--lambda-o", "0.1", "--run-dir", "r1"]), dir.path()));
    assert!(stdout.contains("mean.phone.pcc"));
    assert!(stdout.contains("seed1.geometry.mean_inter_center_distance"));
    ok(&pco(&train_args(&["--lambda-d", "5", "--lambda-o", "0.1", "--run-dir", "r2"]), dir.path()));
    for seed in ["seed-0", "seed-1"] {
        for file in ["checkpoint.bin", "log.csv", "report.txt"] {
            let a = std::fs::read(dir.path().join("r1").join(seed).join(file)).unwrap();
            let b = std::fs::read(dir.path().join("r2").join(seed).join(file)).unwrap();
            assert_eq!(a, b, "{seed}/{file}");
        }
    }
    let log = std::fs::read_to_string(dir.path().join("r1/seed-0/log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("seed,epoch,step,l_mse,l_pd,l_ot,l_pco,wall_ms"));
    assert_eq!(log.lines().count(), 1 + 2 * 3);

    let m = manifest(&dir.path().join("r1/manifest.json"));
    assert_eq!(m["status"], "complete");
    assert_eq!(m["seeds"], serde_json::json!([0, 1]));
    assert_eq!(m["config"]["train"]["loss"]["lambda_d"], 5.0);
    assert_eq!(m["inputs"]["train"]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 7);
}

#[test]
fn zero_weights_run_is_plain_mse() {
    let dir = TempDir::new().unwrap();
    small_data(dir.path());
    ok(&pco(&train_args(&["--lambda-d", "0", "--lambda-o", "0", "--seeds", "1", "--run-dir", "r"]), dir.path()));
    let log = std::fs::read_to_string(dir.path().join("r/seed-0/log.csv")).unwrap();
    for line in log.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[3], f[6], "l_mse must equal l_pco: {line}");
    }
}

#[test]
fn default_run_dir_lives_under_env_root() {
    let dir = TempDir::new().unwrap();
    small_data(dir.path());
    ok(&pco(&train_args(&["--seeds", "1"]), dir.path()));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].to_string_lossy().starts_with("train-"));
}

#[test]
fn config_file_supplies_flags_and_explicit_flags_win() {
    let dir = TempDir::new().unwrap();
    small_data(dir.path());
    std::fs::write(
        dir.path().join("run.conf"),
        "# fast settings\ndata = train.jsonl\neval = eval.jsonl\nepochs = 1\nlambda_d = 2\nlambda-o = 0.5\nd-model = 8\nblocks = 1\nff-dim = 16\nseeds = 1\nwall-time = false\n",
    )
    .unwrap();
    ok(&pco(&["train", "--config", "run.conf", "--lambda-d", "3", "--run-dir", "r"], dir.path()));
    let m = manifest(&dir.path().join("r/manifest.json"));
    assert_eq!(m["config"]["train"]["loss"]["lambda_d"], 3.0);
    assert_eq!(m["config"]["train"]["loss"]["lambda_o"], 0.5);
    assert_eq!(m["config"]["train"]["epochs"], 1);

    std::fs::write(dir.path().join("bad.conf"), "no_such_key = 1\n").unwrap();
    assert_eq!(pco(&["train", "--config", "bad.conf", "--data", "train.jsonl"], dir.path()).status.code(), Some(2));
}

#[test]
fn sweep_emits_one_row_per_value_and_seed() {
    let dir = TempDir::new().unwrap();
    small_data(dir.path());
    let mut args = vec!["sweep", "--param", "lambda_d", "--values", "0,1,5,10", "-o", "sweep.csv", "--data", "train.jsonl", "--eval", "eval.jsonl"];
    args.extend_from_slice(FAST);
    ok(&pco(&args, dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("value,seed,phone_pcc,word_acc_pcc,utt_acc_pcc,inter_center_dist,score_weighted_scatter"));
    assert_eq!(lines.count(), 4 * 2);

    args[4] = "";
    assert_eq!(pco(&args, dir.path()).status.code(), Some(2));
    args[4] = "1";
    args[2] = "margin";
    assert_eq!(pco(&args, dir.path()).status.code(), Some(2));
}

#[test]
fn export_counts_tokens_and_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let (_, eval) = small_data(dir.path());
    ok(&pco(&train_args(&["--seeds", "1", "--run-dir", "r"]), dir.path()));
    let tokens: usize = std::fs::read_to_string(&eval)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["phones"].as_array().unwrap().len())
        .sum();
    let ckpt = "r/seed-0/checkpoint.bin";
    ok(&pco(&["export-embeddings", "--checkpoint", ckpt, "--data", "eval.jsonl", "-o", "a.csv"], dir.path()));
    ok(&pco(&["export-embeddings", "--checkpoint", ckpt, "--data", "eval.jsonl", "-o", "b.csv", "--d-model", "8"], dir.path()));
    let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b.csv")).unwrap());
    assert_eq!(a.lines().count(), tokens + 1);
    assert!(a.lines().all(|l| l.split(',').count() == 4 + 8));
    assert_eq!(manifest(&dir.path().join("a.csv.manifest.json"))["status"], "complete");

    let out = pco(&["export-embeddings", "--checkpoint", ckpt, "--data", "eval.jsonl", "-o", "c.csv", "--d-model", "24"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_prints_metric_table() {
    let dir = TempDir::new().unwrap();
    small_data(dir.path());
    ok(&pco(&train_args(&["--seeds", "1", "--run-dir", "r"]), dir.path()));
    let stdout = ok(&pco(&["eval", "--checkpoint", "r/seed-0/checkpoint.bin", "--data", "eval.jsonl", "--run-dir", "e"], dir.path()));
    for key in ["phone.mse", "phone.pcc", "word.accuracy.pcc", "utterance.fluency.pcc", "geometry.mean_inter_center_distance"] {
        assert!(stdout.lines().any(|l| l.starts_with(key)), "{key} missing:\n{stdout}");
    }
    let reported = std::fs::read_to_string(dir.path().join("r/seed-0/report.txt")).unwrap();
    let pcc = |t: &str| t.lines().find(|l| l.starts_with("phone.pcc ")).map(str::to_string);
    assert_eq!(pcc(&stdout), pcc(&reported));
}

#[test]
fn numerical_blowup_exits_3_and_marks_manifest_failed() {
    let dir = TempDir::new().unwrap();
    small_data(dir.path());
    let out = pco(&train_args(&["--lr", "1e300", "--run-dir", "r"]), dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    let m = manifest(&dir.path().join("r/manifest.json"));
    assert_eq!(m["status"], "failed");
    assert!(!dir.path().join("r/seed-0/checkpoint.bin").exists());
}

#[test]
fn bad_data_exits_2() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{not json\n").unwrap();
    let out = pco(&["train", "--data", "bad.jsonl", "--epochs", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = pco(&["train", "--data", "missing.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
