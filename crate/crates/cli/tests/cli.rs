use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gatectr::data::{synthesize_planted, write_rows, PlantedConfig};
use gatectr_cli::commands::{cmd_eval, cmd_gradcheck, cmd_predict, cmd_train, load_run, GradcheckOptions, REPORT_FILE};
use gatectr_cli::{CliError, RunConfig};
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatectr")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_planted(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "data.planted_rows=1500",
        "data.planted_fields=4",
        "model.hidden_widths=[16, 8]",
        "model.embedding_dim=4",
        "train.epochs=2",
        "train.batch_size=100",
        "train.learning_rate=0.003",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::parse("", &o).unwrap()
}

/// Writes planted rows to `train.tsv` / `test.tsv` under `dir` and returns a
/// config reading them.
fn file_config(dir: &Path, fields: usize) -> (RunConfig, PathBuf, PathBuf) {
    let data = synthesize_planted(&PlantedConfig::new(fields, 1, 800, 3)).unwrap();
    let (train, test) = data.rows.split_at(600);
    let tp = dir.join("train.tsv");
    let ep = dir.join("test.tsv");
    write_rows(fs::File::create(&tp).unwrap(), train, '\t').unwrap();
    write_rows(fs::File::create(&ep).unwrap(), test, '\t').unwrap();
    let names: Vec<String> = (0..fields).map(|i| format!("\"c{i}\"")).collect();
    let text = format!(
        "[data]\nsource = \"file\"\ntrain = {:?}\ntest = {:?}\nfields = [{}]\n\n[model]\nembedding_dim = 4\nhidden_widths = [8]\n\n[train]\nepochs = 1\nbatch_size = 64\n",
        tp,
        ep,
        names.join(", ")
    );
    (RunConfig::parse(&text, &[]).unwrap(), tp, ep)
}

#[test]
fn train_writes_one_report_row_per_epoch() {
    let dir = TempDir::new().unwrap();
    let cfg = small_planted(&["train.epochs=3"]);
    let out = cmd_train(&cfg, dir.path()).unwrap();
    let report = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,test_auc,test_logloss,seconds");
    assert_eq!(lines.len(), 4);
    assert_eq!(out.report.epochs.len(), 3);
    for name in ["config.toml", "vocab.tsv", "model.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn eval_reproduces_the_last_report_row() {
    let dir = TempDir::new().unwrap();
    let out = cmd_train(&small_planted(&[]), dir.path()).unwrap();
    let last = out.report.last().unwrap();
    let run = load_run(dir.path(), None, None).unwrap();
    let r = cmd_eval(&run, None, dir.path()).unwrap();
    assert_eq!(r.auc, last.test_auc);
    assert_eq!(r.logloss, last.test_logloss);
    let preds = cmd_predict(&run, None, dir.path()).unwrap();
    assert_eq!(preds.len(), r.n_pos + r.n_neg);
    let text = fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    assert_eq!(text.lines().count(), preds.len() + 1);
}

#[test]
fn saved_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = small_planted(&["model.family=\"deepfm\"", "model.embed_gate=true", "train.seed=9"]);
    cmd_train(&cfg, &dir.path().join("a")).unwrap();
    let saved = RunConfig::load(Some(&dir.path().join("a/config.toml")), &[]).unwrap();
    assert_eq!(saved, cfg);
    cmd_train(&saved, &dir.path().join("b")).unwrap();
    for f in ["report.csv", "model.ckpt", "vocab.tsv", "config.toml"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn file_data_and_schema_mismatch_is_refused() {
    let dir = TempDir::new().unwrap();
    let (cfg, _, test) = file_config(dir.path(), 3);
    let run_dir = dir.path().join("run");
    cmd_train(&cfg, &run_dir).unwrap();
    let run = load_run(&run_dir, None, None).unwrap();
    assert!(cmd_eval(&run, Some(&test), &run_dir).unwrap().auc.is_some());

    // a config naming a different field list
    let other_dir = dir.path().join("x");
    fs::create_dir(&other_dir).unwrap();
    let (other, _, _) = file_config(&other_dir, 2);
    let err = load_run(&run_dir, Some(other), None).err().unwrap();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("schema mismatch, refusing to evaluate"), "{err}");

    // a data file with the wrong number of columns
    let narrow = dir.path().join("x/test.tsv");
    let err = cmd_eval(&run, Some(&narrow), &run_dir).err().unwrap();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("expects 3 fields"), "{err}");
}

#[test]
fn single_class_eval_reports_undefined_auc() {
    let dir = TempDir::new().unwrap();
    let (cfg, _, test) = file_config(dir.path(), 3);
    let run_dir = dir.path().join("run");
    cmd_train(&cfg, &run_dir).unwrap();
    let ones: String = fs::read_to_string(&test)
        .unwrap()
        .lines()
        .map(|l| format!("1{}\n", &l[l.find('\t').unwrap()..]))
        .collect();
    let p = dir.path().join("ones.tsv");
    fs::write(&p, ones).unwrap();

    let o = bin(&["eval", "--out", run_dir.to_str().unwrap(), "--data", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().nth(1).unwrap().starts_with("undefined,"), "{stdout}");
    assert!(stderr(&o).contains("single class"));
}

#[test]
fn invalid_activation_lists_the_four_kinds() {
    let o = bin(&["train", "--out", "/nonexistent/never", "--set", "model.hidden_activation=gelu"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    for kind in ["linear", "relu", "sigmoid", "tanh"] {
        assert!(e.contains(kind), "{e}");
    }
    assert!(!Path::new("/nonexistent/never").exists());
}

#[test]
fn every_config_problem_is_reported_at_once() {
    let err = RunConfig::parse(
        "[model]\nembedding_dim = 0\nfamily = \"xdeepfm\"\nwidth = 3\n[train]\nlearning_rate = -1.0\n",
        &[],
    )
    .err()
    .unwrap();
    let CliError::Config(problems) = &err else { panic!("{err}") };
    assert!(problems.len() >= 4, "{err}");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.tsv");
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, format!("[data]\nsource = \"file\"\ntrain = {missing:?}\nfields = [\"a\"]\n")).unwrap();
    let o = bin(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = bin(&["train", "--set", "train.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = bin(&["gradcheck", "--corrupt"]);
    assert_eq!(o.status.code(), Some(4));

    let o = bin(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn gradcheck_lists_and_blames_gate_tensors() {
    let report = cmd_gradcheck(&GradcheckOptions::default()).unwrap();
    assert!(report.passed(), "{report}");
    let names: Vec<&str> = report.tensors.iter().map(|t| t.name.as_str()).collect();
    for gate in ["gate.W0", "hgate.l1.W", "hgate.l2.W"] {
        assert!(names.contains(&gate), "{names:?}");
    }

    let broken = cmd_gradcheck(&GradcheckOptions {
        corrupt: true,
        ..GradcheckOptions::default()
    })
    .unwrap();
    let failures = broken.failures();
    assert!(failures.iter().any(|n| n.starts_with("gate.W")), "{failures:?}");
    assert!(failures.iter().any(|n| n.starts_with("hgate.")), "{failures:?}");
    assert!(!failures.contains(&"out.b"));
}

#[test]
fn hidden_gate_on_fm_is_a_config_error() {
    let err = cmd_gradcheck(&GradcheckOptions {
        family: gatectr::model::Family::Fm,
        ..GradcheckOptions::default()
    })
    .err()
    .unwrap();
    assert_eq!(err.exit_code(), 2);
}
