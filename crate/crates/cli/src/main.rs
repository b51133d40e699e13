//! `torlamp`: generate, train, evaluate, explain and attack Tor malware
//! multi-label classifiers from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use torlamp_core::Error;

mod commands;
mod settings;

use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "torlamp", version, about = "Multi-label classification of malware traffic over Tor")]
struct Cli {
    /// `key = value` file; keys are flag names, and flags override them.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads [default: 1].
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled corpus.
    GenData(GenDataArgs),
    /// Shuffle and split a corpus into train.csv and test.csv.
    Split(SplitArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a model on labelled data.
    Evaluate(EvaluateArgs),
    /// Shapley attributions and plot data.
    Explain(ExplainArgs),
    /// Percentile-based evasion experiments on the Ransomware cohort.
    Attack(AttackArgs),
    /// Turn host sessions (JSON lines) into feature rows.
    Featurize(FeaturizeArgs),
    /// Collect summaries from several run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// `d5` or `custom` (generator definition read from --config) [default: d5].
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training share [default: 0.7].
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep only these labels (`A|B|...`), dropping samples left without any.
    #[arg(long)]
    pub keep_labels: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// br, cc, lp or lamp.
    #[arg(long)]
    pub model: Option<String>,
    /// Training CSV.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model file [default: $TORLAMP_OUT_DIR/<model>.model].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trees per forest [default: 100].
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub min_samples_leaf: Option<usize>,
    #[arg(long)]
    pub features_per_split: Option<usize>,
    /// LaMP epochs [default: 100].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// LaMP learning rate [default: 0.0002].
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `prior` (co-occurrence) or `full` label attention mask.
    #[arg(long)]
    pub mask: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory [default: $TORLAMP_OUT_DIR].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Rows to explain; also the background pool.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `exact` (at most 20 features) or `sampled` [default: sampled].
    #[arg(long)]
    pub estimator: Option<String>,
    /// Permutations per attribution for the sampled estimator [default: 200].
    #[arg(long)]
    pub perms: Option<usize>,
    /// Background rows [default: 50].
    #[arg(long)]
    pub background: Option<usize>,
    /// Rows to explain, from the top of the file; 0 means all [default: 20].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Labels to explain (`A|B|...`) [default: all].
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Directory holding any of br.model, cc.model, lp.model, lamp.model.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Cohorts are samples labelled only with the class [default: true].
    #[arg(long)]
    pub exclusive: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FeaturizeArgs {
    /// JSON lines, one host session each.
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    /// Output CSV [default: $TORLAMP_OUT_DIR/features.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory searched recursively for evaluate and attack outputs.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } | Error::Data { .. } | Error::Schema(_) | Error::ModelFormat(_) => 3,
        Error::Training(_) => 4,
        Error::SchemaMismatch { .. } => 5,
    }
}

fn run(cli: Cli) -> torlamp_core::Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let threads = settings.or("threads", cli.threads, 1usize)?;
    if threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a, &mut settings),
        Command::Split(a) => commands::split(a, &mut settings),
        Command::Train(a) => commands::train(a, &mut settings),
        Command::Evaluate(a) => commands::evaluate(a, &mut settings),
        Command::Explain(a) => commands::explain(a, &mut settings),
        Command::Attack(a) => commands::attack(a, &mut settings),
        Command::Featurize(a) => commands::featurize(a, &mut settings),
        Command::Report(a) => commands::report(a, &mut settings),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("torlamp: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
