use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use goodd::experiment::{self, RunConfig, SweepParam};
use goodd::graphdata::SplitMode;
use goodd::gradcheck;
use goodd::scoring::GraphNegatives;
use goodd::trainer::Variant;
use goodd::{Error, Result};

/// Unsupervised graph-level out-of-distribution detection.
#[derive(Parser)]
#[command(name = "goodd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint, run log and resolved config.
    Train(Common),
    /// Score the test split with a saved checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score over several seeds and report mean and std AUC.
    Eval(Common),
    /// Evaluate every combination of the three losses on the simple variant.
    Ablate(Common),
    /// Evaluate once per value of K or alpha.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["K", "k", "clusters", "alpha"])]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Finite-difference checks of every op and loss.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Adaptive,
    Simp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ood,
    Anomaly,
}

#[derive(Clone, Copy, ValueEnum)]
enum NegArg {
    Batch,
    Bank,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long = "score-neg", value_enum)]
    score_neg: Option<NegArg>,
    #[arg(long, default_value = "goodd-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.variant {
            run.train.variant = match v {
                VariantArg::Adaptive => Variant::Adaptive,
                VariantArg::Simp => Variant::Simp,
            };
        }
        if let Some(m) = self.mode {
            run.split.mode = match m {
                ModeArg::Ood => SplitMode::OodPair,
                ModeArg::Anomaly => SplitMode::Anomaly,
            };
        }
        if let Some(n) = self.score_neg {
            run.score.graph_negatives = match n {
                NegArg::Batch => GraphNegatives::Batch,
                NegArg::Bank => GraphNegatives::Bank,
            };
        }
        if let Some(s) = self.seed {
            run.seed = s;
        }
        Ok(run)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => {
            let (_, stats) = experiment::train_command(&c.resolve()?, &c.out)?;
            if let Some(last) = stats.epochs.last() {
                println!("{}", last.log_line());
            }
            println!("checkpoint {}", c.out.join("model.json").display());
        }
        Command::Score { common, checkpoint } => {
            let (_, auc) = experiment::score_command(&common.resolve()?, &checkpoint, &common.out)?;
            println!("AUC {auc:.6}");
            println!("scores {}", common.out.join("scores.csv").display());
        }
        Command::Eval(c) => {
            let report = experiment::evaluate(&c.resolve()?, Some(&c.out))?;
            print!("{}", report.render());
        }
        Command::Ablate(c) => {
            let rows = experiment::ablate(&c.resolve()?, Some(&c.out))?;
            print!("{}", experiment::render_table("levels", &rows));
        }
        Command::Sweep { common, param, values } => {
            let param: SweepParam = param.parse()?;
            let rows = experiment::sweep(&common.resolve()?, param, &values, Some(&common.out))?;
            print!("{}", experiment::render_table(param.name(), &rows));
        }
        Command::Gradcheck {
            instances,
            seed,
            inject_fault,
        } => {
            let results = gradcheck::run_suite(instances, seed, inject_fault)?;
            print!("{}", gradcheck::render(&results));
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn report_error(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => report_error(&e),
    }
}
