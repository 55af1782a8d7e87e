//! Layered configuration: built-in defaults, then a TOML file, then
//! `REVSEARCH_*` environment variables, then command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use revsearch_core::bench::BenchmarkConfig;
use revsearch_core::executor::SandboxConfig;
use revsearch_core::policy::PolicyConfig;
use revsearch_core::reward::RewardScorer;
use revsearch_core::revtree::{BtFitConfig, TreeBuildConfig};
use revsearch_core::search::{SearchConfig, Variant};

use crate::args::{Cli, Command, MethodArg, ScorerArg};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectiveConfig {
    pub mock_script: Option<PathBuf>,
    /// Directory of prompt-template overrides.
    pub templates_dir: Option<PathBuf>,
    pub policy: PolicyConfig,
    pub sandbox: SandboxConfig,
    pub search: SearchConfig,
    pub scorer: RewardScorer,
    pub tree: TreeBuildConfig,
    pub bt: BtFitConfig,
    pub bench: BenchmarkConfig,
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        Self {
            mock_script: None,
            templates_dir: None,
            policy: PolicyConfig::default(),
            sandbox: SandboxConfig::default(),
            search: SearchConfig::default(),
            scorer: RewardScorer::PassRate,
            tree: TreeBuildConfig::default(),
            bt: BtFitConfig::default(),
            bench: BenchmarkConfig::default(),
        }
    }
}

impl EffectiveConfig {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

pub const ENV_PREFIX: &str = "REVSEARCH_";

fn parse_env<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CliError::Config(format!("{ENV_PREFIX}{name}={value:?}: {e}")))
}

pub fn load_file(path: &Path) -> Result<EffectiveConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))
}

fn set_seed(cfg: &mut EffectiveConfig, seed: u64) {
    cfg.search.seed = seed;
    cfg.tree.seed = seed;
    cfg.bt.seed = seed;
}

fn set_budget(cfg: &mut EffectiveConfig, budget: u64) {
    cfg.search.token_budget = budget;
    cfg.bench.token_budget = budget;
}

/// Resolves the effective configuration. `env` looks up a variable name
/// without the prefix.
pub fn resolve(cli: &Cli, env: &dyn Fn(&str) -> Option<String>) -> Result<EffectiveConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => load_file(path)?,
        None => EffectiveConfig::default(),
    };

    if let Some(v) = env("ENDPOINT") {
        cfg.policy.endpoint = v;
    }
    if let Some(v) = env("MODEL") {
        cfg.policy.model_name = v;
    }
    if let Some(v) = env("API_KEY") {
        cfg.policy.api_key = Some(v);
    }
    if let Some(v) = env("MOCK_SCRIPT") {
        cfg.mock_script = Some(PathBuf::from(v));
    }
    if let Some(v) = env("SEED") {
        set_seed(&mut cfg, parse_env("SEED", &v)?);
    }
    if let Some(v) = env("BUDGET") {
        set_budget(&mut cfg, parse_env("BUDGET", &v)?);
    }

    if let Some(v) = &cli.endpoint {
        cfg.policy.endpoint = v.clone();
    }
    if let Some(v) = &cli.model {
        cfg.policy.model_name = v.clone();
    }
    if let Some(v) = &cli.mock_script {
        cfg.mock_script = Some(v.clone());
    }
    if let Some(v) = cli.seed {
        set_seed(&mut cfg, v);
        cfg.bench.seeds = vec![v];
    }
    if let Some(v) = cli.budget {
        set_budget(&mut cfg, v);
    }
    if let Some(v) = cli.timeout {
        if !(v.is_finite() && v > 0.0) {
            return Err(CliError::Config(format!("--timeout must be a positive number of seconds, got {v}")));
        }
        cfg.sandbox.per_test_timeout = Duration::from_secs_f64(v);
    }
    if let Some(v) = &cli.interpreter {
        cfg.sandbox.interpreter_command = v.clone();
    }

    match &cli.command {
        Command::Solve(a) => {
            let s = &mut cfg.search;
            if let Some(m) = a.method {
                s.variant = match m {
                    MethodArg::Hc => Variant::Hc,
                    MethodArg::Ga => Variant::Ga,
                    MethodArg::Bon => Variant::Bon,
                };
            }
            if let Some(v) = a.iterations {
                s.iteration_limit = v;
            }
            if let Some(v) = a.drafts {
                s.n_drafts = v;
            }
            if let Some(v) = a.branching {
                s.branching = v;
            }
            if let Some(v) = a.max_parent_uses {
                s.max_parent_uses = v;
            }
            s.ablations.use_plans &= !a.no_plans;
            s.ablations.use_strategies &= !a.no_strategies;
            s.ablations.use_feedback &= !a.no_feedback;
            s.stop_when_solved &= !a.keep_going;
            if let Some(kind) = a.scorer {
                cfg.scorer = scorer_from_flags(kind, a.rm_endpoint.as_deref(), a.bt_weights.as_deref())?;
            }
        }
        Command::Tree(a) => {
            if let Some(v) = a.d_max {
                cfg.tree.d_max = v;
            }
            if let Some(v) = a.k {
                cfg.tree.k = v;
            }
            if let Some(v) = a.max_root_attempts {
                cfg.tree.max_root_attempts = v;
            }
        }
        Command::BtFit(a) => {
            if let Some(v) = a.epochs {
                cfg.bt.epochs = v;
            }
            if let Some(v) = a.learning_rate {
                cfg.bt.learning_rate = v;
            }
        }
        Command::Bench(a) => {
            if let Some(v) = &a.dataset {
                cfg.bench.dataset = v.clone();
            }
            if let Some(v) = &a.out_dir {
                cfg.bench.output_dir = v.clone();
            }
            if let Some(v) = &a.seeds {
                cfg.bench.seeds = v.clone();
            }
            if let Some(v) = &a.budgets {
                cfg.bench.budget_sweep = v.clone();
            }
            if let Some(v) = a.workers {
                cfg.bench.workers = v;
            }
        }
        Command::Report(_) => {}
    }
    Ok(cfg)
}

/// Reads a weights file written by `bt-fit`.
pub fn read_weights(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("--bt-weights {}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("--bt-weights {}: {e}", path.display())))?;
    v.get("weights")
        .and_then(|w| w.as_array())
        .and_then(|w| w.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>())
        .ok_or_else(|| CliError::Config(format!("--bt-weights {}: no numeric \"weights\" array", path.display())))
}

fn scorer_from_flags(kind: ScorerArg, rm: Option<&str>, weights: Option<&Path>) -> Result<RewardScorer, CliError> {
    Ok(match kind {
        ScorerArg::PassRate => RewardScorer::PassRate,
        ScorerArg::SelfEval => RewardScorer::SelfEval,
        ScorerArg::ExternalRm => RewardScorer::ExternalRm {
            endpoint: rm
                .ok_or_else(|| CliError::Config("--scorer external_rm requires --rm-endpoint".into()))?
                .to_string(),
        },
        ScorerArg::LocalBt => RewardScorer::LocalBt {
            weights: read_weights(
                weights.ok_or_else(|| CliError::Config("--scorer local_bt requires --bt-weights".into()))?,
            )?,
        },
    })
}
