use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gatectr::gates::{Granularity, Sharing};
use gatectr::metrics::AucDisplay;
use gatectr::model::Family;
use gatectr::tensor::Activation;
use gatectr_cli::commands::{self, GradcheckOptions};
use gatectr_cli::{Axis, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "gatectr", version, about = "Gated FM / DNN / DeepFM click-through models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key has a default.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output (or, for eval/predict, run) directory.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any key, e.g. --set model.family=deepfm --set train.epochs=3
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut v = self.sets.clone();
        if let Some(s) = self.seed {
            v.push(format!("train.seed={s}"));
        }
        v
    }

    fn run_config(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write report.csv, vocab.tsv, model.ckpt and config.toml.
    Train(Common),
    /// Evaluate a trained run; prints and writes auc,logloss,n_pos,n_neg.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Delimited data file (label first); defaults to the run's test split.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Checkpoint to load instead of <out>/model.ckpt.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Write one predicted probability per row to predictions.csv.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train a grid of models per ablation axis and tabulate mean test AUC.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated axes; defaults to ablate.axes from the config.
        #[arg(long, value_delimiter = ',')]
        axes: Vec<Axis>,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "deepfm")]
    family: Family,
    /// Which gates to enable: both, embed, hidden or none.
    #[arg(long, default_value = "both")]
    gates: String,
    #[arg(long, default_value = "vector")]
    granularity: Granularity,
    #[arg(long, default_value = "private")]
    sharing: Sharing,
    #[arg(long, default_value = "sigmoid")]
    embed_gate_activation: Activation,
    #[arg(long, default_value = "tanh")]
    hidden_gate_activation: Activation,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.run_config()?;
            let outcome = commands::cmd_train(&cfg, &common.out)?;
            if let Some(last) = outcome.report.last() {
                println!(
                    "final epoch {}: test_auc {} test_logloss {}",
                    last.epoch,
                    AucDisplay(last.test_auc),
                    last.test_logloss
                );
            }
            println!("wrote {}", common.out.display());
        }
        Command::Eval { common, data, checkpoint } => {
            let cfg = match &common.config {
                Some(_) => Some(common.run_config()?),
                None => None,
            };
            let loaded = commands::load_run(&common.out, cfg, checkpoint.as_deref())?;
            let r = commands::cmd_eval(&loaded, data.as_deref(), &common.out)?;
            if r.auc.is_none() {
                eprintln!("auc undefined: the evaluation set holds a single class");
            }
            print!("{}", commands::eval_csv(&r));
        }
        Command::Predict { common, data, checkpoint } => {
            let cfg = match &common.config {
                Some(_) => Some(common.run_config()?),
                None => None,
            };
            let loaded = commands::load_run(&common.out, cfg, checkpoint.as_deref())?;
            let preds = commands::cmd_predict(&loaded, data.as_deref(), &common.out)?;
            println!("wrote {} predictions to {}", preds.len(), common.out.join(commands::PREDICTIONS_FILE).display());
        }
        Command::Gradcheck(args) => {
            let (embed_gate, hidden_gate) = match args.gates.as_str() {
                "both" => (true, true),
                "embed" => (true, false),
                "hidden" => (false, true),
                "none" => (false, false),
                other => {
                    return Err(CliError::Config(vec![format!(
                        "unknown --gates '{other}': expected both, embed, hidden or none"
                    )]))
                }
            };
            let opts = GradcheckOptions {
                family: args.family,
                embed_gate,
                hidden_gate: hidden_gate && args.family.has_deep(),
                granularity: args.granularity,
                sharing: args.sharing,
                embed_gate_activation: args.embed_gate_activation,
                hidden_gate_activation: args.hidden_gate_activation,
                seed: args.seed,
                corrupt: args.corrupt,
            };
            let report = commands::cmd_gradcheck(&opts)?;
            print!("{report}");
            if !report.passed() {
                return Err(CliError::Numeric(format!(
                    "gradient check failed for: {}",
                    report.failures().join(", ")
                )));
            }
            println!("all {} tensors within tolerance", report.tensors.len());
        }
        Command::Ablate { common, axes } => {
            let cfg = common.run_config()?;
            let axes = if axes.is_empty() { cfg.ablate.axes.clone() } else { axes };
            for t in commands::cmd_ablate(&cfg, &axes, &common.out)? {
                println!("[{}] mean test AUC over {} seed(s)", t.grid.axis.name(), cfg.ablate.seeds.len());
                println!("{}", t.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
