//! The five verbs. Each returns what it wrote so callers and tests can
//! inspect results without re-reading files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gatectr::checkpoint::{load_checkpoint, save_checkpoint};
use gatectr::data::{encode_rows, Vocabulary};
use gatectr::gates::{GateConfig, Granularity, Sharing};
use gatectr::gradcheck::{check_model, model_away_from_kinks, random_batch, tiny_spec, GradReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use gatectr::metrics::{AucDisplay, EvalResult};
use gatectr::model::{BackwardFault, Family, HiddenGateConfig, Model};
use gatectr::train::{evaluate, predict_dataset, train_with_progress, TrainOutcome, TrainReport, REPORT_HEADER};
use gatectr::data::Dataset;

use crate::ablate::{run_ablation, AblationTable, Axis};
use crate::config::{DataSource, RunConfig};
use crate::error::CliError;
use crate::pipeline::{check_schema, model_spec, prepare, raw_splits, read_file};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.csv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EVAL_FILE: &str = "eval.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

/// Trains from `cfg` and writes the effective config, vocabulary, report and
/// checkpoint into `out`. Report rows are appended as epochs finish.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    ensure_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    let prepared = prepare(&cfg.data, cfg.train.seed)?;
    let mut vocab_out = BufWriter::new(File::create(out.join(VOCAB_FILE))?);
    prepared.vocab.write_tsv(&mut vocab_out)?;
    vocab_out.flush()?;
    let spec = model_spec(cfg, &prepared.vocab)?;
    eprintln!(
        "training {} on {} rows ({} test), {} epochs",
        spec.label(),
        prepared.splits.train.len(),
        prepared.splits.test.len(),
        cfg.train.epochs
    );

    let report_path = out.join(REPORT_FILE);
    let mut report = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&report_path)?;
    writeln!(report, "{REPORT_HEADER}")?;
    let mut io_err = None;
    let mut last = Instant::now();
    let outcome = train_with_progress(&spec, &prepared.splits, &cfg.train.train_config(), |e| {
        eprintln!(
            "epoch {}: train_loss {:.6} test_auc {} test_logloss {:.6} ({:.2}s)",
            e.epoch,
            e.train_loss,
            AucDisplay(e.test_auc),
            e.test_logloss,
            last.elapsed().as_secs_f64()
        );
        last = Instant::now();
        if let Err(err) = writeln!(report, "{}", TrainReport::csv_row(e)).and_then(|_| report.flush()) {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(CliError::data(format!("cannot write {}: {e}", report_path.display())));
    }
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.model, &outcome.adam)?;
    Ok(outcome)
}

/// A trained run directory loaded back: config, vocabulary and model.
pub struct LoadedRun {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model,
}

/// `config` overrides the run's own `config.toml`; `checkpoint` overrides
/// `model.ckpt`. The checkpoint must agree with the schema and vocabulary.
pub fn load_run(run: &Path, config: Option<RunConfig>, checkpoint: Option<&Path>) -> Result<LoadedRun, CliError> {
    let config = match config {
        Some(c) => c,
        None => RunConfig::load(Some(&run.join(CONFIG_FILE)), &[])?,
    };
    let vocab_path = run.join(VOCAB_FILE);
    let vf = File::open(&vocab_path).map_err(|e| CliError::data(format!("cannot open {}: {e}", vocab_path.display())))?;
    let vocab = Vocabulary::read_tsv(BufReader::new(vf))?;
    let ck_path: PathBuf = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.join(CHECKPOINT_FILE));
    let (model, _) = load_checkpoint(&ck_path)?.into_model()?;
    let schema = crate::pipeline::schema_of(&config.data)?;
    check_schema(model.spec(), &schema, &vocab)?;
    Ok(LoadedRun { config, vocab, model })
}

/// The dataset to score: `data` if given, else the run's own test split.
fn eval_dataset(run: &LoadedRun, data: Option<&Path>) -> Result<Dataset, CliError> {
    let schema = crate::pipeline::schema_of(&run.config.data)?;
    let rows = match data {
        Some(p) => read_file(p, run.config.data.delimiter, &schema).map_err(|e| match e {
            CliError::Data(m) => CliError::Data(format!("{m} (the checkpoint expects {} fields)", schema.len())),
            other => other,
        })?,
        None => raw_splits(&run.config.data, run.config.train.seed)?.test,
    };
    Ok(encode_rows(&rows, &schema, &run.vocab)?)
}

pub fn eval_csv(r: &EvalResult) -> String {
    format!("auc,logloss,n_pos,n_neg\n{},{},{},{}\n", AucDisplay(r.auc), r.logloss, r.n_pos, r.n_neg)
}

/// Scores a dataset with a trained run and writes `eval.csv` into `out`.
pub fn cmd_eval(run: &LoadedRun, data: Option<&Path>, out: &Path) -> Result<EvalResult, CliError> {
    let ds = eval_dataset(run, data)?;
    if ds.is_empty() {
        return Err(CliError::data("evaluation set is empty"));
    }
    let result = evaluate(&run.model, &ds)?;
    ensure_dir(out)?;
    write_file(&out.join(EVAL_FILE), &eval_csv(&result))?;
    Ok(result)
}

/// Writes one probability per input row to `predictions.csv` in `out`.
pub fn cmd_predict(run: &LoadedRun, data: Option<&Path>, out: &Path) -> Result<Vec<f64>, CliError> {
    let ds = eval_dataset(run, data)?;
    let preds = predict_dataset(&run.model, &ds)?;
    ensure_dir(out)?;
    let mut text = String::from("prediction\n");
    for p in &preds {
        text.push_str(&format!("{p}\n"));
    }
    write_file(&out.join(PREDICTIONS_FILE), &text)?;
    Ok(preds)
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub family: Family,
    pub embed_gate: bool,
    pub hidden_gate: bool,
    pub granularity: Granularity,
    pub sharing: Sharing,
    pub embed_gate_activation: gatectr::tensor::Activation,
    pub hidden_gate_activation: gatectr::tensor::Activation,
    pub seed: u64,
    /// Negative control: break the gate backward rules on purpose.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        let e = GateConfig::default();
        let h = HiddenGateConfig::default();
        GradcheckOptions {
            family: Family::DeepFm,
            embed_gate: true,
            hidden_gate: true,
            granularity: e.granularity,
            sharing: e.sharing,
            embed_gate_activation: e.activation,
            hidden_gate_activation: h.activation,
            seed: 42,
            corrupt: false,
        }
    }
}

/// Finite-difference check of every parameter tensor of the tiny model.
pub fn cmd_gradcheck(opts: &GradcheckOptions) -> Result<GradReport, CliError> {
    if opts.hidden_gate && !opts.family.has_deep() {
        return Err(CliError::Config(vec![format!(
            "the hidden gate needs a deep component; family '{}' has none",
            opts.family.name()
        )]));
    }
    let egate = opts.embed_gate.then_some(GateConfig {
        granularity: opts.granularity,
        sharing: opts.sharing,
        activation: opts.embed_gate_activation,
        ..GateConfig::default()
    });
    let hgate = opts.hidden_gate.then_some(HiddenGateConfig {
        activation: opts.hidden_gate_activation,
        ..HiddenGateConfig::default()
    });
    let spec = tiny_spec(opts.family, egate, hgate);
    let batch = random_batch(&spec.cardinalities(), 8, opts.seed);
    let refs: Vec<_> = batch.iter().collect();
    let dropout_seed = opts.seed ^ 0x5eed;
    let mut model = model_away_from_kinks(&spec, &batch, opts.seed, dropout_seed)?;
    if opts.corrupt {
        model.set_backward_fault(Some(BackwardFault::GateDerivativeIgnored));
    }
    Ok(check_model(&mut model, &refs, dropout_seed, DEFAULT_STEP, DEFAULT_TOLERANCE)?)
}

/// Runs the sweep and writes `ablate_<axis>.csv`, `ablate_<axis>.txt` and
/// `ablate_<axis>_runs.csv` per axis into `out`.
pub fn cmd_ablate(cfg: &RunConfig, axes: &[Axis], out: &Path) -> Result<Vec<AblationTable>, CliError> {
    ensure_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    if cfg.data.source == DataSource::Planted {
        eprintln!(
            "ablation on planted data: {} rows, {} fields ({} signal), seeds {:?}",
            cfg.data.planted_rows, cfg.data.planted_fields, cfg.data.planted_signal_fields, cfg.ablate.seeds
        );
    }
    let tables = run_ablation(cfg, axes, |line| eprintln!("{line}"))?;
    for t in &tables {
        let stem = format!("ablate_{}", t.grid.axis.name());
        write_file(&out.join(format!("{stem}.csv")), &t.to_csv())?;
        write_file(&out.join(format!("{stem}.txt")), &t.to_text())?;
        write_file(&out.join(format!("{stem}_runs.csv")), &t.runs_csv())?;
    }
    Ok(tables)
}
