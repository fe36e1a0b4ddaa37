use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use prefixmtl::corpus::Corpus;
use prefixmtl::model::EncoderModel;
use prefixmtl::synthetic::{family_corpus, write_raw_tasks, FamilySpec};
use prefixmtl::training::{two_stage_plan, PreparedCorpus, TrainConfig, Trainer};
use serde_json::Value;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/table8");

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Output {
    fn run_dir(&self) -> PathBuf {
        let line = self.stdout.lines().find_map(|l| l.strip_prefix("run ")).expect("run directory line");
        PathBuf::from(line)
    }

    fn error(&self) -> Value {
        serde_json::from_str(self.stderr.trim()).expect("error JSON on stderr")
    }
}

fn prefixmtl(out: &Path, args: &[&str]) -> Output {
    let o = Command::new(env!("CARGO_BIN_EXE_prefixmtl"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    Output {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8(o.stdout).unwrap(),
        stderr: String::from_utf8(o.stderr).unwrap(),
    }
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = prefixmtl(out, args);
    assert_eq!(o.code, 0, "{args:?} failed: {}", o.stderr);
    o
}

fn fixture_manifest() -> String {
    format!("{FIXTURE}/manifest.json")
}

/// Two families of three tasks each, written as raw task files.
fn family_manifest(dir: &Path) -> String {
    let tasks = family_corpus(&FamilySpec::default());
    let path = write_raw_tasks(&dir.join("raw"), &tasks, Some(2)).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_config(dir: &Path, epochs: usize, finetune_epochs: usize) -> String {
    let config = serde_json::json!({
        "epochs": epochs,
        "finetune_epochs": finetune_epochs,
        "lr": 2e-3,
        "model": {"layers": 2, "hidden": 32, "heads": 2, "ffn": 64, "max_len": 16, "dropout": 0.0}
    });
    let path = dir.join(format!("config-{epochs}-{finetune_epochs}.json"));
    fs::write(&path, config.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn convert_is_deterministic_and_counts_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ok(&tmp.path().join("a"), &["convert", "--manifest", &fixture_manifest()]).run_dir();
    let b = ok(&tmp.path().join("b"), &["convert", "--manifest", &fixture_manifest()]).run_dir();
    assert_eq!(a.file_name(), b.file_name());
    let mut files: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert!(files.len() > 10);
    for f in &files {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f:?}");
    }

    let stats: Value = serde_json::from_slice(&read(&a.join("stats.json"))).unwrap();
    let expected: Value = serde_json::from_slice(&read(&Path::new(FIXTURE).join("expected_stats.json"))).unwrap();
    assert_eq!(stats, expected);

    let other = ok(&tmp.path().join("a"), &["--seed", "9", "convert", "--manifest", &fixture_manifest()]).run_dir();
    assert_ne!(other, a);
}

#[test]
fn converted_corpus_converts_to_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let first = ok(tmp.path(), &["convert", "--manifest", &fixture_manifest()]).run_dir();
    let manifest = first.join("manifest.json");
    let second = ok(tmp.path(), &["convert", "--manifest", manifest.to_str().unwrap()]).run_dir();
    let a = Corpus::from_manifest(&manifest, None, 0).unwrap();
    let b = Corpus::from_manifest(&second.join("manifest.json"), None, 0).unwrap();
    assert_eq!(a.tasks, b.tasks);
}

#[test]
fn same_command_twice_gets_a_suffixed_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ok(tmp.path(), &["convert", "--manifest", &fixture_manifest()]).run_dir();
    let b = ok(tmp.path(), &["convert", "--manifest", &fixture_manifest()]).run_dir();
    assert_eq!(b.file_name().unwrap().to_str().unwrap(), format!("{}-2", a.file_name().unwrap().to_str().unwrap()));
}

#[test]
fn malformed_record_names_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("raw");
    fs::create_dir_all(&dir).unwrap();
    let good = r#"{"context":"a b","question":"q","options":["x","y"],"gold":0}"#;
    fs::write(dir.join("t.train.jsonl"), format!("{good}\n{{\"context\": oops\n")).unwrap();
    fs::write(
        dir.join("manifest.json"),
        r#"{"format":"prefixmtl.manifest.v1","k":2,"tasks":[{"name":"t","family":"f","train":"t.train.jsonl"}]}"#,
    )
    .unwrap();
    let o = prefixmtl(&tmp.path().join("runs"), &["convert", "--manifest", dir.join("manifest.json").to_str().unwrap()]);
    assert_eq!(o.code, 2, "{}", o.stderr);
    let err = o.error();
    assert_eq!(err["error"]["kind"], "parse");
    let message = err["error"]["message"].as_str().unwrap();
    assert!(message.contains("t.train.jsonl:2"), "{message}");
}

#[test]
fn missing_manifest_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = prefixmtl(tmp.path(), &["convert", "--manifest", "/nonexistent/manifest.json"]);
    assert_eq!(o.code, 2);
    assert_eq!(o.error()["error"]["kind"], "io");
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(prefixmtl(tmp.path(), &["nonsense"]).code, 1);
    assert_eq!(prefixmtl(tmp.path(), &["train"]).code, 1);
    let o = prefixmtl(
        tmp.path(),
        &["train", "--manifest", &fixture_manifest(), "--target", "science", "--strategy", "best"],
    );
    assert_eq!(o.code, 1);
    assert_eq!(o.error()["error"]["kind"], "unknown_strategy");
    let o = prefixmtl(tmp.path(), &["train", "--manifest", &fixture_manifest(), "--lambda=-1"]);
    assert_eq!(o.code, 1);
    assert_eq!(o.error()["error"]["kind"], "config");
    assert_eq!(prefixmtl(tmp.path(), &["--help"]).code, 0);
    assert_eq!(prefixmtl(tmp.path(), &["--version"]).code, 0);
}

#[test]
fn dry_run_prints_config_and_touches_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = ok(
        &out,
        &["--dry-run", "--seed", "4", "train", "--manifest", &fixture_manifest(), "--lambda", "0.3", "--prefix-policy", "must", "--target", "court"],
    );
    assert!(!out.exists());
    let config: Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(config["command"], "train");
    assert_eq!(config["seed"], 4);
    assert_eq!(config["train"]["seed"], 4);
    assert_eq!(config["train"]["lambda"], 0.3);
    assert_eq!(config["train"]["prefix_policy"], "must");
    assert_eq!(config["strategy"], "fullset");

    let saved = tmp.path().join("run.json");
    fs::write(&saved, &o.stdout).unwrap();
    let again = ok(&out, &["--dry-run", "rerun", "--run-config", saved.to_str().unwrap()]);
    assert_eq!(again.stdout, o.stdout);
}

#[test]
fn probe_then_select_ranks_family_first() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = family_manifest(tmp.path());
    let config = small_config(tmp.path(), 8, 0);
    let out = tmp.path().join("runs");
    let probe = ok(&out, &["probe", "--manifest", &manifest, "--config", &config]).run_dir();
    for f in ["relationships.json", "relationships.csv", "baseline_length.json", "baseline_vocab.json", "heatmap.pgm", "model.ckpt"] {
        assert!(probe.join(f).exists(), "{f}");
    }

    let select = ok(&out, &["select", "--matrix", probe.to_str().unwrap(), "--target", "ad0", "--top-k", "2"]);
    let ranked: Vec<&str> = select.stdout.lines().filter_map(|l| l.split('\t').nth(1)).collect();
    let mut sorted = ranked.clone();
    sorted.sort();
    assert_eq!(sorted, ["ad1", "ad2"], "{}", select.stdout);

    let report = ok(&out, &["report", "--run", probe.to_str().unwrap()]);
    assert!(report.stdout.contains("== relationships"));
    assert!(probe.join("report/heatmap.pgm").exists());
}

#[test]
fn report_on_an_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = prefixmtl(tmp.path(), &["report", "--run", tmp.path().to_str().unwrap()]);
    assert_ne!(o.code, 0);
    assert_eq!(o.error()["error"]["kind"], "no_artifacts");
    let o = prefixmtl(tmp.path(), &["report", "--run", tmp.path().join("missing").to_str().unwrap()]);
    assert_ne!(o.code, 0);
}

#[test]
fn transfer_resume_skips_finished_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = family_manifest(tmp.path());
    let config = small_config(tmp.path(), 1, 1);
    let out = tmp.path().join("runs");
    let args = ["transfer", "--manifest", &manifest, "--config", &config, "--targets", "ad0", "--sources", "ad1,bk0", "--cap", "40"];
    let first = ok(&out, &args);
    assert!(first.stdout.contains("cells computed 2 reused 0"), "{}", first.stdout);
    let dir = first.run_dir();
    let grid = read(&dir.join("grid.json"));
    assert!(dir.join("correlation.txt").exists());

    fs::remove_file(dir.join("grid.json")).unwrap();
    fs::remove_file(dir.join("cells/ad0__bk0.json")).unwrap();
    let resumed = ok(&out, &["transfer", "--resume", dir.to_str().unwrap()]);
    assert!(resumed.stdout.contains("cells computed 1 reused 1"), "{}", resumed.stdout);
    assert_eq!(read(&dir.join("grid.json")), grid);

    let again = ok(&out, &["transfer", "--resume", dir.to_str().unwrap()]);
    assert!(again.stdout.contains("cells computed 0 reused 2"), "{}", again.stdout);
    let o = prefixmtl(&out, &["transfer", "--resume", dir.to_str().unwrap(), "--epochs", "3"]);
    assert_eq!(o.code, 1);
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = family_manifest(tmp.path());
    let config_path = small_config(tmp.path(), 2, 1);
    let out = tmp.path().join("runs");
    let args = ["train", "--manifest", &manifest, "--config", &config_path, "--cap", "30"];
    let full = ok(&out, &args).run_dir();
    let steps = fs::read_to_string(full.join("steps.jsonl")).unwrap();
    let metrics: Value = serde_json::from_slice(&read(&full.join("metrics.json"))).unwrap();
    let per_epoch: Vec<usize> = metrics["history"].as_array().unwrap().iter().map(|r| r["steps"].as_u64().unwrap() as usize).collect();
    assert_eq!(per_epoch, [12, 12]);
    assert_eq!(steps.lines().count(), 24);

    // the same run, stopped by hand after its first epoch
    let dry = ok(&out, &[&["--dry-run"][..], &args].concat());
    let stopped = tmp.path().join("stopped");
    fs::create_dir_all(&stopped).unwrap();
    fs::write(stopped.join("run.json"), &dry.stdout).unwrap();
    let run: Value = serde_json::from_str(&dry.stdout).unwrap();
    let config: TrainConfig = serde_json::from_value(run["train"].clone()).unwrap();
    let corpus = Corpus::from_manifest(Path::new(&manifest), None, config.seed).unwrap();
    let data = PreparedCorpus::from_config(&corpus, &config).unwrap();
    let all: Vec<usize> = (0..data.tasks.len()).collect();
    let mut trainer = Trainer::new(&data, config.clone(), two_stage_plan(&all, None, &config), None).unwrap();
    trainer.run_epoch(&mut |_| {}).unwrap();
    trainer.save_state(&stopped.join("state")).unwrap();
    drop(trainer);

    ok(&out, &["train", "--resume", stopped.to_str().unwrap()]);
    assert_eq!(read(&stopped.join("metrics.json")), read(&full.join("metrics.json")));
    assert_eq!(read(&stopped.join("model.ckpt")), read(&full.join("model.ckpt")));
    let tail: Vec<&str> = steps.lines().skip(per_epoch[0]).collect();
    let resumed = fs::read_to_string(stopped.join("steps.jsonl")).unwrap();
    assert_eq!(resumed.lines().collect::<Vec<_>>(), tail);
    let (model, _) = EncoderModel::load(&full.join("model.ckpt")).unwrap();
    assert_eq!(model.config().vocab_size, data.vocab.len());
}

#[test]
fn prefix_free_probe_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let tasks = family_corpus(&FamilySpec {
        train: 10,
        ..Default::default()
    });
    let manifest = write_raw_tasks(&tmp.path().join("raw"), &tasks, Some(2)).unwrap();
    let o = prefixmtl(tmp.path(), &["probe", "--manifest", manifest.to_str().unwrap(), "--no-prefix", "--epochs", "1"]);
    assert_eq!(o.code, 1);
    assert_eq!(o.error()["error"]["kind"], "config");
}
