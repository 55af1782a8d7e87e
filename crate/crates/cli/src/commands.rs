use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{error, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use revsearch_core::bench::{
    self, ablation_matrix, file_safe, load_tasks, BenchmarkReport, MethodSpec,
};
use revsearch_core::error::{BenchError, BtError, SearchError};
use revsearch_core::executor::{CachedExecutor, Executor, SubprocessSandbox};
use revsearch_core::policy::{ChatModel, OpenAiChatClient, Policy, PromptTemplates, ScriptedModel};
use revsearch_core::reward::{extract_features, FEATURE_NAMES};
use revsearch_core::revtree::{
    bt_fit, bt_fit_diffs, bt_probability, build_tree, export_jsonl, read_pairs, GapHistogram,
    PreferencePair, TreeBuild,
};
use revsearch_core::search::{self, Components, SearchConfig, TranscriptEvent, Variant};
use revsearch_core::Task;

use crate::args::{BenchArgs, BtFitArgs, Cli, Command, ReportArgs, ReportFormat, SolveArgs, TreeArgs};
use crate::config::EffectiveConfig;
use crate::{CliError, EXIT_BEST_EFFORT, EXIT_OK};

/// Weights of the hidden scorer that labels `bt-fit --synthetic` pairs.
pub const SYNTHETIC_TEACHER: [f64; 5] = [6.0, -4.0, 3.0, -2.0, 5.0];

pub fn dispatch(cli: &Cli, cfg: &EffectiveConfig) -> Result<i32, CliError> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a, cfg),
        Command::Tree(a) => cmd_tree(a, cfg),
        Command::BtFit(a) => cmd_bt_fit(a, cfg),
        Command::Bench(a) => cmd_bench(a, cfg),
        Command::Report(a) => cmd_report(a, cfg),
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| internal(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| internal(format!("cannot write {}: {e}", path.display())))
}

pub fn build_policy(cfg: &EffectiveConfig) -> Result<Policy, CliError> {
    let model: Arc<dyn ChatModel> = match &cfg.mock_script {
        Some(path) => Arc::new(ScriptedModel::from_path(path).map_err(|e| CliError::Config(format!("--mock-script: {e}")))?),
        None => {
            if cfg.policy.endpoint.trim().is_empty() {
                return Err(CliError::Config(
                    "--endpoint is required (or REVSEARCH_ENDPOINT, or [policy] endpoint) unless --mock-script is given"
                        .into(),
                ));
            }
            cfg.policy
                .validate()
                .map_err(|e| CliError::Config(format!("--endpoint / [policy]: {e}")))?;
            Arc::new(OpenAiChatClient::new(cfg.policy.clone()).map_err(|e| CliError::Config(format!("[policy]: {e}")))?)
        }
    };
    let templates = match &cfg.templates_dir {
        Some(dir) => PromptTemplates::from_dir(dir)
            .map_err(|e| CliError::Config(format!("templates_dir {}: {e}", dir.display())))?,
        None => PromptTemplates::default(),
    };
    Ok(Policy::with_templates(model, templates))
}

pub fn build_executor(cfg: &EffectiveConfig) -> Result<CachedExecutor<SubprocessSandbox>, CliError> {
    let sandbox = SubprocessSandbox::new(cfg.sandbox.clone())
        .map_err(|e| CliError::Config(format!("--interpreter / --timeout / [sandbox]: {e}")))?;
    Ok(CachedExecutor::new(sandbox))
}

fn read_tasks(path: &Path, flag: &str, strict: bool) -> Result<Vec<Task>, CliError> {
    let (tasks, report) = load_tasks(path, strict).map_err(|e| CliError::Config(format!("{flag} {}: {e}", path.display())))?;
    for (line, msg) in &report.skipped {
        warn!("{}:{line}: skipped: {msg}", path.display());
    }
    Ok(tasks)
}

fn select_task(tasks: Vec<Task>, id: Option<&str>, path: &Path) -> Result<Task, CliError> {
    match id {
        Some(id) => tasks
            .into_iter()
            .find(|t| t.id == id)
            .ok_or_else(|| CliError::Config(format!("--task-id {id:?} not found in {}", path.display()))),
        None if tasks.len() == 1 => Ok(tasks.into_iter().next().expect("one task")),
        None => Err(CliError::Config(format!(
            "--task {} holds {} tasks; choose one with --task-id",
            path.display(),
            tasks.len()
        ))),
    }
}

fn cmd_solve(a: &SolveArgs, cfg: &EffectiveConfig) -> Result<i32, CliError> {
    let tasks = read_tasks(&a.task, "--task", true)?;
    let task = select_task(tasks, a.task_id.as_deref(), &a.task)?;
    cfg.search.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let policy = build_policy(cfg)?;
    let executor = build_executor(cfg)?;
    let scorer = cfg.scorer.build(&policy).map_err(|e| CliError::Config(format!("--scorer: {e}")))?;
    let comps = Components {
        policy: &policy,
        executor: &executor,
        scorer: scorer.as_ref(),
    };
    // The search only ever sees the public tests.
    let visible = Task {
        private_tests: Vec::new(),
        ..task.clone()
    };
    let mut outcome = match search::run(&visible, &cfg.search, comps) {
        Ok(o) => o,
        Err(SearchError::Config(m)) => return Err(CliError::Config(m)),
        Err(SearchError::DraftFailure) => {
            eprintln!("no program produced: every draft failed to parse");
            return Ok(EXIT_BEST_EFFORT);
        }
        Err(e) => return Err(internal(e)),
    };
    outcome
        .transcript
        .events
        .insert(0, TranscriptEvent::Provenance { config: cfg.to_json() });

    let transcript_path = a.transcript.clone().unwrap_or_else(|| PathBuf::from("transcript.jsonl"));
    write_out(&transcript_path, outcome.transcript.to_jsonl().as_bytes())?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("solution.py"));
    let solved = outcome.solved_public();
    match &outcome.best {
        Some(best) => {
            write_out(&out, best.sample.code.as_bytes())?;
            println!(
                "{}: {} ({}/{} public tests), {} tokens, stop: {}; wrote {} and {}",
                task.id,
                if solved { "solved" } else { "best effort" },
                best.feedback.passed_count(),
                best.feedback.verdicts.len(),
                outcome.tokens.total(),
                serde_json::to_value(outcome.stop_reason).expect("serializes").as_str().unwrap_or("?"),
                out.display(),
                transcript_path.display()
            );
        }
        None => println!("{}: no candidate produced; wrote {}", task.id, transcript_path.display()),
    }
    if outcome.degraded {
        warn!("policy became unavailable during the run");
    }
    Ok(if solved { EXIT_OK } else { EXIT_BEST_EFFORT })
}

fn cmd_tree(a: &TreeArgs, cfg: &EffectiveConfig) -> Result<i32, CliError> {
    let tasks = read_tasks(&a.tasks, "--tasks", false)?;
    cfg.tree.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let policy = build_policy(cfg)?;
    let executor = build_executor(cfg)?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| PathBuf::from("trees"));
    fs::create_dir_all(&out_dir).map_err(|e| internal(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut all_pairs: Vec<PreferencePair> = Vec::new();
    let mut per_task = Vec::new();
    let (mut trees, mut failed) = (0usize, 0usize);
    for task in &tasks {
        let stem = file_safe(&task.id);
        match build_tree(task, &cfg.tree, &policy, &executor) {
            Ok(TreeBuild::Built(tree)) => {
                let tree_path = out_dir.join(format!("{stem}.tree.json"));
                let body = serde_json::to_string_pretty(&tree).map_err(internal)? + "\n";
                write_out(&tree_path, body.as_bytes())?;
                let pairs = revsearch_core::revtree::extract_pairs(&tree);
                let pairs_path = out_dir.join(format!("{stem}.pairs.jsonl"));
                export_jsonl(&pairs, &pairs_path).map_err(internal)?;
                if tree.truncated {
                    warn!("{}: tree truncated by a policy outage", task.id);
                }
                per_task.push(json!({
                    "task_id": task.id, "status": "built", "nodes": tree.len(),
                    "max_depth": tree.max_depth(), "pairs": pairs.len(),
                    "truncated": tree.truncated, "tokens": tree.tokens.total(),
                }));
                trees += 1;
                all_pairs.extend(pairs);
            }
            Ok(TreeBuild::NoTree { attempts, reason }) => {
                warn!("{}: no tree after {attempts} root attempts: {reason}", task.id);
                per_task.push(json!({"task_id": task.id, "status": "no_tree", "reason": reason}));
            }
            Err(e) => {
                error!("{}: {e}", task.id);
                per_task.push(json!({"task_id": task.id, "status": "failed", "error": e.to_string()}));
                failed += 1;
            }
        }
    }
    let histogram = GapHistogram::of(&all_pairs);
    let summary = json!({
        "tasks": tasks.len(),
        "trees": trees,
        "failed": failed,
        "pairs": all_pairs.len(),
        "histogram": histogram.to_json(),
        "per_task": per_task,
    });
    write_out(
        &out_dir.join("summary.json"),
        (serde_json::to_string_pretty(&summary).map_err(internal)? + "\n").as_bytes(),
    )?;
    println!(
        "{} tasks: {trees} trees, {} without a tree, {failed} failed, {} pairs",
        tasks.len(),
        tasks.len() - trees - failed,
        all_pairs.len()
    );
    if failed == tasks.len() {
        return Err(internal("every task failed"));
    }
    Ok(if trees == tasks.len() { EXIT_OK } else { EXIT_BEST_EFFORT })
}

/// Pairs labeled by [`SYNTHETIC_TEACHER`] with Bradley-Terry noise, as
/// feature differences (winner minus loser).
pub fn synthetic_diffs(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let d: Vec<f64> = SYNTHETIC_TEACHER.iter().map(|_| rng.gen::<f64>() - rng.gen::<f64>()).collect();
            let margin: f64 = SYNTHETIC_TEACHER.iter().zip(&d).map(|(w, x)| w * x).sum();
            if rng.gen::<f64>() < bt_probability(margin, 0.0) {
                d
            } else {
                d.iter().map(|x| -x).collect()
            }
        })
        .collect()
}

fn agreement(weights: &[f64], diffs: &[Vec<f64>]) -> f64 {
    let ok = diffs
        .iter()
        .filter(|d| weights.iter().zip(d.iter()).map(|(w, x)| w * x).sum::<f64>() > 0.0)
        .count();
    ok as f64 / diffs.len().max(1) as f64
}

fn bt_error(e: BtError) -> CliError {
    match e {
        BtError::NoPairs => CliError::Config("--pairs: no preference pairs to fit".into()),
        BtError::MissingFeatures(c) => CliError::Config(format!("--tasks: no task matches a paired program ({c:?})")),
        other => internal(other),
    }
}

fn cmd_bt_fit(a: &BtFitArgs, cfg: &EffectiveConfig) -> Result<i32, CliError> {
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("bt_weights.json"));
    let result = if let Some(n) = a.synthetic {
        if !a.pairs.is_empty() {
            return Err(CliError::Config("--synthetic and --pairs are mutually exclusive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.bt.seed);
        let train = synthetic_diffs(n, &mut rng);
        let held_out = synthetic_diffs((n / 4).max(1), &mut rng);
        let fit = bt_fit_diffs(&train, &cfg.bt).map_err(bt_error)?;
        json!({
            "weights": fit.weights,
            "feature_names": FEATURE_NAMES,
            "log_likelihood": fit.log_likelihood,
            "pairs": n,
            "train_accuracy": agreement(&fit.weights, &train),
            "held_out_accuracy": agreement(&fit.weights, &held_out),
            "teacher": SYNTHETIC_TEACHER,
            "config": cfg.bt,
        })
    } else {
        if a.pairs.is_empty() {
            return Err(CliError::Config("give --pairs FILE (with --tasks) or --synthetic N".into()));
        }
        let tasks_path = a
            .tasks
            .as_ref()
            .ok_or_else(|| CliError::Config("--pairs needs --tasks to execute the paired programs".into()))?;
        let tasks: HashMap<String, Task> = read_tasks(tasks_path, "--tasks", false)?
            .into_iter()
            .map(|t| (t.id.clone(), t))
            .collect();
        let mut pairs = Vec::new();
        for p in &a.pairs {
            pairs.extend(read_pairs(p).map_err(|e| CliError::Config(format!("--pairs {}: {e}", p.display())))?);
        }
        let executor = build_executor(cfg)?;
        let mut features: HashMap<(String, String), Vec<f64>> = HashMap::new();
        for p in &pairs {
            let Some(task) = tasks.get(&p.task_id) else { continue };
            for code in [&p.win, &p.loss] {
                let key = (p.task_id.clone(), code.clone());
                if features.contains_key(&key) {
                    continue;
                }
                let sample = revsearch_core::CodeSample::draft(code.clone());
                let fb = executor.run_tests(&sample, &task.public_tests).map_err(internal)?;
                features.insert(key, extract_features(code, &fb, None));
            }
        }
        let extractor = |task: &str, code: &str| features.get(&(task.to_string(), code.to_string())).cloned();
        let fit = bt_fit(&pairs, &extractor, &cfg.bt).map_err(bt_error)?;
        let diffs: Vec<Vec<f64>> = pairs
            .iter()
            .map(|p| {
                let w = &features[&(p.task_id.clone(), p.win.clone())];
                let l = &features[&(p.task_id.clone(), p.loss.clone())];
                w.iter().zip(l).map(|(x, y)| x - y).collect()
            })
            .collect();
        json!({
            "weights": fit.weights,
            "feature_names": FEATURE_NAMES,
            "log_likelihood": fit.log_likelihood,
            "pairs": pairs.len(),
            "train_accuracy": agreement(&fit.weights, &diffs),
            "config": cfg.bt,
        })
    };
    write_out(&out, (serde_json::to_string_pretty(&result).map_err(internal)? + "\n").as_bytes())?;
    println!(
        "fitted {} weights on {} pairs: mean log-likelihood {:.6}, train accuracy {:.4}; wrote {}",
        FEATURE_NAMES.len(),
        result["pairs"],
        result["log_likelihood"].as_f64().unwrap_or(f64::NAN),
        result["train_accuracy"].as_f64().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(EXIT_OK)
}

fn bench_error(e: BenchError) -> CliError {
    match e {
        BenchError::Config { .. } | BenchError::Malformed { .. } | BenchError::NoTasks(_) | BenchError::Read { .. } => {
            CliError::Config(e.to_string())
        }
        other => internal(other),
    }
}

/// The comparison run when no methods are configured: HC and GA against
/// the BoN baseline, all sharing the `[search]` settings.
pub fn default_methods(base: &SearchConfig) -> Vec<MethodSpec> {
    [Variant::Hc, Variant::Ga, Variant::Bon]
        .into_iter()
        .map(|variant| MethodSpec {
            name: variant.as_str().to_string(),
            search: SearchConfig {
                variant,
                ..base.clone()
            },
        })
        .collect()
}

fn cmd_bench(a: &BenchArgs, cfg: &EffectiveConfig) -> Result<i32, CliError> {
    let mut bc = cfg.bench.clone();
    if a.ablations {
        bc.methods = ablation_matrix(&cfg.search).map_err(bench_error)?;
    } else if bc.methods.is_empty() {
        bc.methods = default_methods(&cfg.search);
    }
    if bc.dataset.as_os_str().is_empty() {
        return Err(CliError::Config("--dataset (or [bench] dataset) is required".into()));
    }
    bc.provenance = Some(cfg.to_json());
    bc.validate().map_err(bench_error)?;

    let policy = build_policy(cfg)?;
    let executor = build_executor(cfg)?;
    let scorer = cfg.scorer.build(&policy).map_err(|e| CliError::Config(format!("[scorer]: {e}")))?;
    let comps = Components {
        policy: &policy,
        executor: &executor,
        scorer: scorer.as_ref(),
    };
    let reports = if a.sweep || a.budgets.is_some() {
        if bc.budget_sweep.is_empty() {
            return Err(CliError::Config("--sweep needs budgets: --budgets or [bench] budget_sweep".into()));
        }
        let (reports, csv) = bench::scaling_sweep(&bc, &bc.budget_sweep, comps).map_err(bench_error)?;
        print!("{csv}");
        reports
    } else {
        let report = bench::run_benchmark(&bc, comps).map_err(bench_error)?;
        print!("{}", render_text(std::slice::from_ref(&report)));
        vec![report]
    };
    let failed: usize = reports.iter().flat_map(|r| &r.methods).map(|m| m.failed_runs).sum();
    if failed > 0 {
        warn!("{failed} runs ended in an error; see the run outcome files");
        return Ok(EXIT_BEST_EFFORT);
    }
    Ok(EXIT_OK)
}

fn k_columns(reports: &[BenchmarkReport]) -> Vec<String> {
    let mut ks: Vec<u64> = reports.iter().flat_map(|r| r.k_values.iter().copied()).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.iter().map(|k| format!("pass@{k}")).collect()
}

pub fn render_text(reports: &[BenchmarkReport]) -> String {
    let cols = k_columns(reports);
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(s, "budget {} ({} tasks, {} samples per task)", r.budget, r.tasks, r.samples_per_task);
        let _ = write!(s, "  {:<20}", "method");
        for c in &cols {
            let _ = write!(s, " {c:>9}");
        }
        let _ = writeln!(s, " {:>11} {:>8} {:>6}", "mean_tokens", "degraded", "failed");
        for m in &r.methods {
            let _ = write!(s, "  {:<20}", m.method);
            for c in &cols {
                match m.pass_at_k.get(c) {
                    Some(v) => {
                        let _ = write!(s, " {v:>9.4}");
                    }
                    None => {
                        let _ = write!(s, " {:>9}", "-");
                    }
                }
            }
            let _ = writeln!(s, " {:>11.1} {:>8} {:>6}", m.mean_tokens, m.degraded_runs, m.failed_runs);
        }
    }
    s
}

pub fn render_csv(reports: &[BenchmarkReport]) -> String {
    let cols = k_columns(reports);
    let mut s = String::from("method,budget");
    for c in &cols {
        s.push(',');
        s.push_str(c);
    }
    s.push_str(",mean_tokens,degraded_runs,failed_runs\n");
    for r in reports {
        for m in &r.methods {
            let _ = write!(s, "{},{}", m.method, r.budget);
            for c in &cols {
                match m.pass_at_k.get(c) {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6}");
                    }
                    None => s.push(','),
                }
            }
            let _ = writeln!(s, ",{:.3},{},{}", m.mean_tokens, m.degraded_runs, m.failed_runs);
        }
    }
    s
}

/// Every `report_b{budget}.json` in `dir`, ordered by budget.
pub fn load_reports(dir: &Path) -> Result<Vec<BenchmarkReport>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Config(format!("--dir {}: {e}", dir.display())))?;
    let mut found: BTreeMap<u64, PathBuf> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(internal)?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(budget) = name
            .strip_prefix("report_b")
            .and_then(|r| r.strip_suffix(".json"))
            .and_then(|b| b.parse().ok())
        {
            found.insert(budget, path);
        }
    }
    if found.is_empty() {
        return Err(CliError::Config(format!("--dir {}: no report_b*.json files", dir.display())));
    }
    found
        .values()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| internal(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| internal(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn cmd_report(a: &ReportArgs, cfg: &EffectiveConfig) -> Result<i32, CliError> {
    let dir = a.dir.clone().unwrap_or_else(|| cfg.bench.output_dir.clone());
    let reports = load_reports(&dir)?;
    let text = match a.format.unwrap_or(ReportFormat::Text) {
        ReportFormat::Text => render_text(&reports),
        ReportFormat::Csv => render_csv(&reports),
        ReportFormat::Json => serde_json::to_string_pretty(&reports).map_err(internal)? + "\n",
    };
    print!("{text}");
    Ok(EXIT_OK)
}
