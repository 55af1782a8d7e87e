//! Command-line surface. Options are all optional so that unset flags fall
//! through to the environment and config-file layers; the help text shows
//! the built-in default each one resolves to.

use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use revsearch_core::bench::BenchmarkConfig;
use revsearch_core::executor::SandboxConfig;
use revsearch_core::policy::PolicyConfig;
use revsearch_core::revtree::{BtFitConfig, TreeBuildConfig};
use revsearch_core::search::SearchConfig;

fn dh(text: &str, default: impl Display) -> String {
    format!("{text} [default: {default}]")
}

fn search() -> SearchConfig {
    SearchConfig::default()
}

fn tree() -> TreeBuildConfig {
    TreeBuildConfig::default()
}

fn bt() -> BtFitConfig {
    BtFitConfig::default()
}

#[derive(Debug, Parser)]
#[command(
    name = "revsearch",
    version,
    about = "Local-search code generation: solve tasks, build revision trees, fit preference scorers, run benchmarks",
    after_help = "Configuration layers, lowest to highest precedence: --config TOML file, \
REVSEARCH_* environment variables (ENDPOINT, MODEL, API_KEY, MOCK_SCRIPT, SEED, BUDGET), command-line flags.\n\
Exit codes: 0 solved, 10 best effort or warning, 2 configuration error, 1 internal error."
)]
pub struct Cli {
    #[arg(long, global = true, value_name = "FILE", help = dh("TOML configuration file", "none"))]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "FILE", help = dh("Answer model calls from a JSON mock script", "none"))]
    pub mock_script: Option<PathBuf>,

    #[arg(long, global = true, value_name = "URL", help = dh("OpenAI-compatible API base URL", "none"))]
    pub endpoint: Option<String>,

    #[arg(long, global = true, value_name = "NAME", help = dh("Model name sent to the endpoint", PolicyConfig::default().model_name))]
    pub model: Option<String>,

    #[arg(long, global = true, help = dh("Random seed", search().seed))]
    pub seed: Option<u64>,

    #[arg(long, global = true, value_name = "TOKENS", help = dh("Token budget per task", search().token_budget))]
    pub budget: Option<u64>,

    #[arg(long, global = true, value_name = "SECS", help = dh("Per-test time limit in seconds", SandboxConfig::default().per_test_timeout.as_secs_f64()))]
    pub timeout: Option<f64>,

    #[arg(long, global = true, value_name = "CMD", help = dh("Interpreter command line with a {program} placeholder", SandboxConfig::default().interpreter_command))]
    pub interpreter: Option<String>,

    #[arg(short, long, global = true, action = clap::ArgAction::Count, help = dh("Increase log verbosity (repeatable)", "warnings only"))]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for a program solving one task.
    Solve(SolveArgs),
    /// Build revision trees and export preference pairs.
    Tree(TreeArgs),
    /// Fit a linear Bradley-Terry scorer on preference pairs.
    BtFit(BtFitArgs),
    /// Run a benchmark comparison or budget sweep.
    Bench(BenchArgs),
    /// Summarize benchmark reports.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Hc,
    Ga,
    Bon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ScorerArg {
    PassRate,
    SelfEval,
    ExternalRm,
    LocalBt,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_name = "FILE", help = "Task JSONL file (one task, or pick one with --task-id)")]
    pub task: PathBuf,

    #[arg(long, value_name = "ID", help = dh("Task id within the file", "the only task"))]
    pub task_id: Option<String>,

    #[arg(long, value_enum, help = dh("Search method", "hc"))]
    pub method: Option<MethodArg>,

    #[arg(long, value_enum, help = dh("Candidate scorer", "pass_rate"))]
    pub scorer: Option<ScorerArg>,

    #[arg(long, value_name = "URL", help = dh("Reward-model service for --scorer external_rm", "none"))]
    pub rm_endpoint: Option<String>,

    #[arg(long, value_name = "FILE", help = dh("Weights JSON from bt-fit for --scorer local_bt", "none"))]
    pub bt_weights: Option<PathBuf>,

    #[arg(long, help = dh("Iteration limit", search().iteration_limit))]
    pub iterations: Option<usize>,

    #[arg(long, help = dh("Initial drafts", search().n_drafts))]
    pub drafts: Option<usize>,

    #[arg(long, help = dh("Neighbors per iteration", search().branching))]
    pub branching: Option<usize>,

    #[arg(long, help = dh("Parent uses before a program retires (GA)", search().max_parent_uses))]
    pub max_parent_uses: Option<usize>,

    #[arg(long, help = dh("Draft directly instead of plan-then-generate", "off"))]
    pub no_plans: bool,

    #[arg(long, help = dh("Revise without proposing strategies (HC)", "off"))]
    pub no_strategies: bool,

    #[arg(long, help = dh("Leave execution feedback out of revision prompts", "off"))]
    pub no_feedback: bool,

    #[arg(long, help = dh("Keep searching after the public tests pass", "off"))]
    pub keep_going: bool,

    #[arg(long, value_name = "FILE", help = dh("Where to write the best program", "solution.py"))]
    pub out: Option<PathBuf>,

    #[arg(long, value_name = "FILE", help = dh("Where to write the run transcript", "transcript.jsonl"))]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TreeArgs {
    #[arg(long, value_name = "FILE", help = "Task JSONL file")]
    pub tasks: PathBuf,

    #[arg(long, value_name = "DIR", help = dh("Output directory", "trees"))]
    pub out_dir: Option<PathBuf>,

    #[arg(long, help = dh("Maximum tree depth", tree().d_max))]
    pub d_max: Option<usize>,

    #[arg(long, help = dh("Revisions per incorrect node", tree().k))]
    pub k: Option<usize>,

    #[arg(long, help = dh("Root samples tried before giving up", tree().max_root_attempts))]
    pub max_root_attempts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BtFitArgs {
    #[arg(long, value_name = "FILE", help = dh("Pair JSONL file (repeatable)", "none"))]
    pub pairs: Vec<PathBuf>,

    #[arg(long, value_name = "FILE", help = dh("Task JSONL used to execute paired programs for features", "none"))]
    pub tasks: Option<PathBuf>,

    #[arg(long, value_name = "N", help = dh("Fit on N synthetic teacher-labeled pairs instead", "off"))]
    pub synthetic: Option<usize>,

    #[arg(long, help = dh("Gradient-ascent epochs", bt().epochs))]
    pub epochs: Option<usize>,

    #[arg(long, help = dh("Learning rate", bt().learning_rate))]
    pub learning_rate: Option<f64>,

    #[arg(long, value_name = "FILE", help = dh("Where to write the fitted weights", "bt_weights.json"))]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_name = "FILE", help = dh("Task JSONL file", "from [bench] dataset"))]
    pub dataset: Option<PathBuf>,

    #[arg(long, value_name = "DIR", help = dh("Output directory", BenchmarkConfig::default().output_dir.display()))]
    pub out_dir: Option<PathBuf>,

    #[arg(long, value_delimiter = ',', value_name = "LIST", help = dh("Comma-separated seeds", "0"))]
    pub seeds: Option<Vec<u64>>,

    #[arg(long, value_delimiter = ',', value_name = "LIST", help = dh("Sweep these comma-separated budgets", "from [bench] budget_sweep"))]
    pub budgets: Option<Vec<u64>>,

    #[arg(long, help = dh("Sweep the configured budget_sweep list", "off"))]
    pub sweep: bool,

    #[arg(long, help = dh("Replace the methods with the ablation set of the [search] variant", "off"))]
    pub ablations: bool,

    #[arg(long, help = dh("Concurrent runs (0 = one per CPU)", BenchmarkConfig::default().workers))]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_name = "DIR", help = dh("Benchmark output directory", BenchmarkConfig::default().output_dir.display()))]
    pub dir: Option<PathBuf>,

    #[arg(long, value_enum, help = dh("Output format", "text"))]
    pub format: Option<ReportFormat>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    /// Every option shows its default in `--help`.
    #[test]
    fn help_lists_every_flag_with_default() {
        let mut root = Cli::command();
        root.build();
        let mut checked = 0;
        let mut cmds = vec![root.clone()];
        cmds.extend(root.get_subcommands().cloned());
        for mut cmd in cmds {
            let help = cmd.render_long_help().to_string();
            for arg in cmd.get_arguments() {
                let Some(long) = arg.get_long() else { continue };
                if matches!(long, "help" | "version") {
                    continue;
                }
                assert!(help.contains(&format!("--{long}")), "{}: --{long} missing from help", cmd.get_name());
                let text = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                assert!(
                    arg.is_required_set() || text.contains("[default: "),
                    "{}: --{long} has no default in help: {text:?}",
                    cmd.get_name()
                );
                checked += 1;
            }
        }
        assert!(checked > 30, "only {checked} flags checked");
    }

    #[test]
    fn defaults_in_help_track_core_defaults() {
        let help = Cli::command()
            .find_subcommand_mut("solve")
            .unwrap()
            .render_long_help()
            .to_string();
        assert!(help.contains(&format!("[default: {}]", search().iteration_limit)));
        assert!(help.contains(&format!("[default: {}]", search().n_drafts)));
    }
}
