//! `lineage`: induce deoptimization lineages, lift and admit skills,
//! retrieve them, run optimization sessions and emit reports.

mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "lineage", version, about)]
pub struct Cli {
    /// Artifact store directory.
    #[arg(long, global = true, default_value = "lineage-store")]
    pub store: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a lineage from an expert kernel by gated simplification.
    Induce(InduceArgs),
    /// Cluster stored transitions and lift each cluster into a skill hypothesis.
    Lift(LiftArgs),
    /// Run roundtrip trials on held-out starts for every pending hypothesis.
    Admit(AdmitArgs),
    /// Rank admitted skills for a target.
    Retrieve(RetrieveArgs),
    /// Run one skill-guided optimization session.
    Optimize(OptimizeArgs),
    /// Write the markdown report and cost curves.
    Report(ReportArgs),
    /// End-to-end run on generated or supplied lattices.
    Sim(SimArgs),
    /// Check every stored document and cross reference.
    ValidateStore,
    #[command(hide = true)]
    ServeRunner,
    #[command(hide = true)]
    ServeRewriter,
    #[command(hide = true)]
    ServeLifter,
}

#[derive(Debug, Args)]
pub struct InduceArgs {
    /// Case id; must exist in the store unless --lattice registers it.
    #[arg(long)]
    pub case: Option<String>,
    /// Expert kernel state as JSON. Defaults to the lattice expert for sim cases.
    #[arg(long)]
    pub expert: Option<PathBuf>,
    /// Register a sim lattice (JSON) as a case and induce from its expert.
    #[arg(long)]
    pub lattice: Option<PathBuf>,
    #[arg(long, default_value = "sim")]
    pub runner: String,
    #[arg(long, default_value = "sim")]
    pub rewriter: String,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long, default_value = "sim")]
    pub lifter: String,
}

#[derive(Debug, Args)]
pub struct AdmitArgs {
    #[arg(long, default_value = "sim")]
    pub runner: String,
    #[arg(long, default_value = "sim")]
    pub rewriter: String,
    /// Held-out start states as JSON; their cases must be in the store.
    #[arg(long)]
    pub holdout: Vec<PathBuf>,
    /// Also draw starts from the held-out pool of every stored sim lattice.
    #[arg(long)]
    pub sim_holdout: bool,
    #[arg(long)]
    pub max_trials: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub case: String,
    #[arg(long)]
    pub language: String,
    #[arg(long)]
    pub platform: String,
    /// Comma-separated applied actions.
    #[arg(long, value_delimiter = ',')]
    pub applied: Vec<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Skill directory store; defaults to --store.
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationArg {
    GeneratedOnly,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub case: String,
    /// Root state: a JSON file, or the id of a stored state.
    #[arg(long)]
    pub root: String,
    /// Store holding the skill library; defaults to --store.
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Dollar cap, e.g. 10.00.
    #[arg(long)]
    pub budget: Option<rust_decimal::Decimal>,
    #[arg(long)]
    pub max_submissions: Option<usize>,
    #[arg(long, default_value = "sim")]
    pub runner: String,
    #[arg(long, default_value = "sim")]
    pub rewriter: String,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Seed of the ablation proposer.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub reference_latency: Option<f64>,
    #[arg(long)]
    pub session_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Cross-method latency table (JSON).
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Roundtrip tallies (JSON list of {pair, outcomes}).
    #[arg(long)]
    pub roundtrip: Option<PathBuf>,
    /// Output directory; defaults to <store>/report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// First lattice seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of lattices, seeds seed..seed+n.
    #[arg(long, default_value_t = 1)]
    pub lattices: u64,
    #[arg(long, default_value_t = 12)]
    pub actions: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    /// Run a lattice from a JSON file instead of generating one.
    #[arg(long)]
    pub lattice: Option<PathBuf>,
    #[arg(long)]
    pub max_submissions: Option<usize>,
    #[arg(long)]
    pub budget: Option<rust_decimal::Decimal>,
    /// Write lineages, skills, cases and sessions to the store.
    #[arg(long)]
    pub save: bool,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
