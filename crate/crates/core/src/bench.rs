//! Benchmark harness: task ingestion, budget-matched method comparison,
//! Pass@k aggregation, budget sweeps and ablation sets.
//!
//! Every (task, method, budget, seed) run persists its transcript and a
//! small outcome record under `<output_dir>/runs/`. A rerun skips runs whose
//! outcome record already exists, so an interrupted sweep resumes where it
//! stopped and produces the same report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{pass_at_k, Task};
use crate::error::BenchError;
use crate::revtree::write_atomic;
use crate::search::{self, Components, SearchConfig, StopReason, TranscriptEvent, Variant};

/// A named search configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub search: SearchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub dataset: PathBuf,
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    /// Runs per task and method (n for Pass@k); 0 means one per seed.
    pub samples_per_task: usize,
    pub k_values: Vec<u64>,
    /// Per-task budget applied to every method.
    pub token_budget: u64,
    pub budget_sweep: Vec<u64>,
    pub output_dir: PathBuf,
    /// Abort on the first malformed dataset line instead of skipping it.
    pub strict: bool,
    /// Concurrent runs; 0 means one per CPU.
    pub workers: usize,
    /// Recorded as the first event of every run transcript.
    #[serde(skip)]
    pub provenance: Option<serde_json::Value>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            methods: Vec::new(),
            seeds: vec![0],
            samples_per_task: 0,
            k_values: vec![1],
            token_budget: 7000,
            budget_sweep: Vec::new(),
            output_dir: PathBuf::from("bench_out"),
            strict: false,
            workers: 0,
            provenance: None,
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> BenchError {
    BenchError::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl BenchmarkConfig {
    pub fn samples(&self) -> usize {
        if self.samples_per_task == 0 {
            self.seeds.len()
        } else {
            self.samples_per_task
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "must be nonempty"));
        }
        if self.samples() > self.seeds.len() {
            return Err(config_err(
                "samples_per_task",
                format!("{} exceeds the {} seeds given", self.samples(), self.seeds.len()),
            ));
        }
        if self.methods.is_empty() {
            return Err(config_err("methods", "must be nonempty"));
        }
        let mut names = BTreeSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            if m.name.is_empty() || !names.insert(m.name.as_str()) {
                return Err(config_err(&format!("methods[{i}].name"), "must be nonempty and unique"));
            }
            m.search
                .validate()
                .map_err(|e| config_err(&format!("methods[{i}]"), e.to_string()))?;
        }
        let n = self.samples() as u64;
        if let Some(k) = self.k_values.iter().find(|&&k| k == 0 || k > n) {
            return Err(config_err("k_values", format!("k={k} outside 1..={n}")));
        }
        if self.budget_sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("budget_sweep", "budgets must be strictly ascending"));
        }
        Ok(())
    }

    fn seeds_used(&self) -> &[u64] {
        &self.seeds[..self.samples()]
    }
}

/// Malformed lines skipped by a lenient load.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub skipped: Vec<(usize, String)>,
}

/// Reads one task per JSONL line. Blank lines are ignored; malformed or
/// invalid tasks abort in strict mode and are skipped otherwise.
pub fn load_tasks(path: &Path, strict: bool) -> Result<(Vec<Task>, LoadReport), BenchError> {
    let text = fs::read_to_string(path).map_err(|source| BenchError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut tasks = Vec::new();
    let mut report = LoadReport::default();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Task>(line)
            .map_err(|e| e.to_string())
            .and_then(|t| t.validate().map(|_| t).map_err(|e| e.to_string()))
            .and_then(|t| {
                if ids.insert(t.id.clone()) {
                    Ok(t)
                } else {
                    Err(format!("duplicate task id {:?}", t.id))
                }
            });
        match parsed {
            Ok(t) => tasks.push(t),
            Err(message) if strict => return Err(BenchError::Malformed { line: i + 1, message }),
            Err(message) => {
                warn!("{}:{}: skipped: {message}", path.display(), i + 1);
                report.skipped.push((i + 1, message));
            }
        }
    }
    if tasks.is_empty() {
        return Err(BenchError::NoTasks(path.to_path_buf()));
    }
    Ok((tasks, report))
}

/// Outcome of one search run, persisted for resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub method: String,
    pub budget: u64,
    pub seed: u64,
    pub solved_public: bool,
    /// The returned program passes every public and private test.
    pub correct: bool,
    pub tokens: u64,
    pub degraded: bool,
    pub stop_reason: Option<StopReason>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub n: u64,
    pub c: u64,
    pub pass_at_k: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub variant: Variant,
    pub budget: u64,
    pub runs: usize,
    /// Task-averaged Pass@k, keyed "pass@k".
    pub pass_at_k: BTreeMap<String, f64>,
    pub mean_tokens: f64,
    pub max_tokens: u64,
    pub degraded_runs: usize,
    pub failed_runs: usize,
    pub tasks: Vec<TaskOutcome>,
}

impl MethodReport {
    pub fn pass_at_1(&self) -> f64 {
        self.pass_at_k.get("pass@1").copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub budget: u64,
    pub samples_per_task: usize,
    pub k_values: Vec<u64>,
    pub tasks: usize,
    pub methods: Vec<MethodReport>,
}

impl BenchmarkReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Maps a task or method name to a string safe for file names.
pub fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn run_stem(task: &str, method: &str, budget: u64, seed: u64) -> String {
    format!("{}__{}__b{budget}__s{seed}", file_safe(task), file_safe(method))
}

pub fn runs_dir(output_dir: &Path) -> PathBuf {
    output_dir.join("runs")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    write_atomic(path, bytes).map_err(|source| BenchError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn execute_run(
    task: &Task,
    method: &MethodSpec,
    budget: u64,
    seed: u64,
    comps: Components<'_>,
    dir: &Path,
    provenance: Option<&serde_json::Value>,
) -> Result<RunRecord, BenchError> {
    let stem = run_stem(&task.id, &method.name, budget, seed);
    let outcome_path = dir.join(format!("{stem}.outcome.json"));
    if let Ok(text) = fs::read_to_string(&outcome_path) {
        if let Ok(record) = serde_json::from_str::<RunRecord>(&text) {
            return Ok(record);
        }
        warn!("{}: unreadable outcome record, rerunning", outcome_path.display());
    }
    let config = SearchConfig {
        token_budget: budget,
        seed,
        ..method.search.clone()
    };
    // The search sees only public tests; private tests judge the result.
    let search_task = Task {
        private_tests: Vec::new(),
        ..task.clone()
    };
    let mut record = RunRecord {
        task_id: task.id.clone(),
        method: method.name.clone(),
        budget,
        seed,
        solved_public: false,
        correct: false,
        tokens: 0,
        degraded: true,
        stop_reason: None,
        error: None,
    };
    match search::run(&search_task, &config, comps) {
        Ok(mut outcome) => {
            if let Some(p) = provenance {
                outcome
                    .transcript
                    .events
                    .insert(0, TranscriptEvent::Provenance { config: p.clone() });
            }
            write_file(&dir.join(format!("{stem}.jsonl")), outcome.transcript.to_jsonl().as_bytes())?;
            record.solved_public = outcome.solved_public();
            record.tokens = outcome.tokens.total();
            record.degraded = outcome.degraded;
            record.stop_reason = Some(outcome.stop_reason);
            if let Some(best) = &outcome.best {
                record.correct = if !best.feedback.passed_all {
                    false
                } else if task.private_tests.is_empty() {
                    true
                } else {
                    match comps.executor.run_tests(&best.sample, &task.private_tests) {
                        Ok(fb) => fb.passed_all,
                        Err(e) => {
                            record.error = Some(format!("private-test execution failed: {e}"));
                            false
                        }
                    }
                };
            }
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    let mut bytes = serde_json::to_vec_pretty(&record)?;
    bytes.push(b'\n');
    write_file(&outcome_path, &bytes)?;
    Ok(record)
}

fn thread_pool(workers: usize) -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        b = b.num_threads(workers);
    }
    b.build().expect("thread pool")
}

fn aggregate(config: &BenchmarkConfig, tasks: &[Task], budget: u64, records: &[RunRecord]) -> Result<BenchmarkReport, BenchError> {
    let n = config.samples() as u64;
    let mut methods = Vec::new();
    for method in &config.methods {
        let mine: Vec<&RunRecord> = records.iter().filter(|r| r.method == method.name).collect();
        let mut outcomes = Vec::new();
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for task in tasks {
            let c = mine.iter().filter(|r| r.task_id == task.id && r.correct).count() as u64;
            let mut per = BTreeMap::new();
            for &k in &config.k_values {
                let v = pass_at_k(n, c, k).map_err(|e| config_err("k_values", e.to_string()))?;
                per.insert(format!("pass@{k}"), v);
                *sums.entry(format!("pass@{k}")).or_default() += v;
            }
            outcomes.push(TaskOutcome {
                task_id: task.id.clone(),
                n,
                c,
                pass_at_k: per,
            });
        }
        let t = tasks.len() as f64;
        let total_tokens: u64 = mine.iter().map(|r| r.tokens).sum();
        methods.push(MethodReport {
            method: method.name.clone(),
            variant: method.search.variant,
            budget,
            runs: mine.len(),
            pass_at_k: sums.into_iter().map(|(k, v)| (k, v / t)).collect(),
            mean_tokens: if mine.is_empty() { 0.0 } else { total_tokens as f64 / mine.len() as f64 },
            max_tokens: mine.iter().map(|r| r.tokens).max().unwrap_or(0),
            degraded_runs: mine.iter().filter(|r| r.degraded).count(),
            failed_runs: mine.iter().filter(|r| r.error.is_some()).count(),
            tasks: outcomes,
        });
    }
    Ok(BenchmarkReport {
        budget,
        samples_per_task: config.samples(),
        k_values: config.k_values.clone(),
        tasks: tasks.len(),
        methods,
    })
}

/// Runs every method on every task and seed at `budget`.
pub fn run_at_budget(
    config: &BenchmarkConfig,
    tasks: &[Task],
    budget: u64,
    comps: Components<'_>,
) -> Result<BenchmarkReport, BenchError> {
    config.validate()?;
    let dir = runs_dir(&config.output_dir);
    fs::create_dir_all(&dir).map_err(|source| BenchError::Write {
        path: dir.clone(),
        source,
    })?;
    let jobs: Vec<(&Task, &MethodSpec, u64)> = config
        .methods
        .iter()
        .flat_map(|m| {
            tasks
                .iter()
                .flat_map(move |t| config.seeds_used().iter().map(move |&s| (t, m, s)))
        })
        .collect();
    let records = thread_pool(config.workers).install(|| {
        jobs.par_iter()
            .map(|&(t, m, s)| execute_run(t, m, budget, s, comps, &dir, config.provenance.as_ref()))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let report = aggregate(config, tasks, budget, &records)?;
    let path = config.output_dir.join(format!("report_b{budget}.json"));
    write_file(&path, report.to_json().as_bytes())?;
    info!("wrote {}", path.display());
    Ok(report)
}

/// Loads the dataset and runs the comparison at the configured budget.
pub fn run_benchmark(config: &BenchmarkConfig, comps: Components<'_>) -> Result<BenchmarkReport, BenchError> {
    config.validate()?;
    let (tasks, _) = load_tasks(&config.dataset, config.strict)?;
    run_at_budget(config, &tasks, config.token_budget, comps)
}

pub const SWEEP_HEADER: [&str; 4] = ["method", "budget", "pass_at_1", "mean_tokens"];

/// One comparison per budget, tabulated as CSV rows
/// `method,budget,pass_at_1,mean_tokens`; also written to `sweep.csv`.
pub fn scaling_sweep(
    config: &BenchmarkConfig,
    budgets: &[u64],
    comps: Components<'_>,
) -> Result<(Vec<BenchmarkReport>, String), BenchError> {
    if budgets.is_empty() {
        return Err(config_err("budget_sweep", "no budgets given"));
    }
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err("budget_sweep", "budgets must be strictly ascending"));
    }
    config.validate()?;
    let (tasks, _) = load_tasks(&config.dataset, config.strict)?;
    let mut reports = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER)?;
    for &budget in budgets {
        let report = run_at_budget(config, &tasks, budget, comps)?;
        for m in &report.methods {
            w.write_record([
                m.method.clone(),
                budget.to_string(),
                format!("{:.6}", m.pass_at_1()),
                format!("{:.3}", m.mean_tokens),
            ])?;
        }
        reports.push(report);
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv is utf-8");
    write_file(&config.output_dir.join("sweep.csv"), csv.as_bytes())?;
    Ok((reports, csv))
}

/// The component ablations for a base configuration: HC gets full,
/// no-plans, no-strategies and no-feedback; GA has no strategy step.
pub fn ablation_matrix(base: &SearchConfig) -> Result<Vec<MethodSpec>, BenchError> {
    let prefix = match base.variant {
        Variant::Hc => "hc",
        Variant::Ga => "ga",
        Variant::Bon => return Err(config_err("variant", "ablations apply to hc and ga only")),
    };
    let mut out = vec![MethodSpec {
        name: format!("{prefix}-full"),
        search: base.clone(),
    }];
    let mut push = |suffix: &str, f: fn(&mut SearchConfig)| {
        let mut c = base.clone();
        f(&mut c);
        out.push(MethodSpec {
            name: format!("{prefix}-{suffix}"),
            search: c,
        });
    };
    push("no-plans", |c| c.ablations.use_plans = false);
    if base.variant == Variant::Hc {
        push("no-strategies", |c| c.ablations.use_strategies = false);
    }
    push("no-feedback", |c| c.ablations.use_feedback = false);
    Ok(out)
}
