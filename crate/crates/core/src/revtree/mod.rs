//! Revision trees and preference-pair mining.
//!
//! A tree is grown breadth-first from an incorrect root: every incorrect
//! node above the depth limit gets `k` revisions. Nodes are then labeled
//! with their revision distance (0 for correct code, infinity for an
//! incorrect leaf, otherwise one more than the closest child), and pairs
//! are mined between each node and its parent, children and siblings
//! whenever the distances are strictly ordered.

pub mod bt;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::domain::{CodeSample, ExecutionFeedback, Task, TokenUsage};
use crate::error::{PolicyError, TreeError};
use crate::executor::Executor;
use crate::policy::{CallContext, Policy, TokenLedger};

pub use bt::{
    bt_fit, bt_fit_diffs, bt_gradient, bt_log_likelihood, bt_probability, log_sigmoid, BtFit, BtFitConfig,
    FeatureExtractor, FeatureTable,
};

/// Revision distance: a step count or unreachable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Distance {
    Finite(u32),
    Infinite,
}

impl Distance {
    pub fn is_finite(self) -> bool {
        matches!(self, Distance::Finite(_))
    }

    pub fn succ(self) -> Self {
        match self {
            Distance::Finite(d) => Distance::Finite(d + 1),
            Distance::Infinite => Distance::Infinite,
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distance::Finite(d) => write!(f, "{d}"),
            Distance::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Distance {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Distance::Finite(d) => s.serialize_u32(*d),
            Distance::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Distance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Distance;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative integer or \"inf\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Distance, E> {
                u32::try_from(v).map(Distance::Finite).map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Distance, E> {
                u32::try_from(v).map(Distance::Finite).map_err(E::custom)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Distance, E> {
                if v == "inf" {
                    Ok(Distance::Infinite)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub code: CodeSample,
    /// Passes every public and private test.
    pub correct: bool,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
    pub distance: Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeTree {
    pub task_id: String,
    pub root: usize,
    pub nodes: Vec<TreeNode>,
    /// Expansion stopped early on a policy outage.
    #[serde(default)]
    pub truncated: bool,
    /// Revisions that returned their input unchanged.
    #[serde(default)]
    pub noop_revisions: usize,
    #[serde(default)]
    pub parse_failures: usize,
    #[serde(default)]
    pub tokens: TokenUsage,
}

impl CodeTree {
    /// A tree holding only `root`, unlabeled.
    pub fn with_root(task_id: impl Into<String>, code: CodeSample, correct: bool) -> Self {
        Self {
            task_id: task_id.into(),
            root: 0,
            nodes: vec![TreeNode {
                id: 0,
                code,
                correct,
                parent: None,
                children: Vec::new(),
                depth: 0,
                distance: Distance::Infinite,
            }],
            truncated: false,
            noop_revisions: 0,
            parse_failures: 0,
            tokens: TokenUsage::default(),
        }
    }

    /// Appends a child under `parent` and returns its id.
    pub fn add_child(&mut self, parent: usize, code: CodeSample, correct: bool) -> usize {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(TreeNode {
            id,
            code,
            correct,
            parent: Some(parent),
            children: Vec::new(),
            depth,
            distance: Distance::Infinite,
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeBuildConfig {
    pub d_max: usize,
    pub k: usize,
    pub max_root_attempts: usize,
    pub seed: u64,
}

impl Default for TreeBuildConfig {
    fn default() -> Self {
        Self {
            d_max: 5,
            k: 3,
            max_root_attempts: 5,
            seed: 0,
        }
    }
}

impl TreeBuildConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.d_max == 0 {
            return Err(TreeError::Config("d_max must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(TreeError::Config("k must be >= 1".into()));
        }
        if self.max_root_attempts == 0 {
            return Err(TreeError::Config("max_root_attempts must be >= 1".into()));
        }
        Ok(())
    }

    /// Largest possible node count: 1 + k + k^2 + ... + k^d_max.
    pub fn node_bound(&self) -> u128 {
        let mut total: u128 = 0;
        let mut layer: u128 = 1;
        for _ in 0..=self.d_max {
            total = total.saturating_add(layer);
            layer = layer.saturating_mul(self.k as u128);
        }
        total
    }
}

/// Result of one build attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeBuild {
    Built(CodeTree),
    /// No incorrect root could be sampled; not an error.
    NoTree { attempts: usize, reason: String },
}

/// Grows a labeled revision tree for `task`.
///
/// Correctness uses public and private tests; revision prompts see the
/// feedback from that same run.
pub fn build_tree(
    task: &Task,
    config: &TreeBuildConfig,
    policy: &Policy,
    executor: &dyn Executor,
) -> Result<TreeBuild, TreeError> {
    config.validate()?;
    task.validate().map_err(|e| TreeError::Config(e.to_string()))?;
    let tests = task.all_tests();
    let ledger = TokenLedger::new();

    let mut root = None;
    let mut correct_roots = 0;
    let mut last_problem = String::new();
    for attempt in 0..config.max_root_attempts {
        let ctx = CallContext::new(&ledger, config.seed).sample(attempt);
        match policy.draft_direct(task, &ctx) {
            Ok(code) => {
                let fb = executor.run_tests(&code, &tests)?;
                if fb.passed_all {
                    correct_roots += 1;
                } else {
                    root = Some((code, fb));
                    break;
                }
            }
            Err(PolicyError::Unavailable(m)) => {
                return Ok(TreeBuild::NoTree {
                    attempts: attempt + 1,
                    reason: format!("policy unavailable: {m}"),
                });
            }
            Err(e) => last_problem = e.to_string(),
        }
    }
    let Some((root_code, root_fb)) = root else {
        let reason = if correct_roots == config.max_root_attempts {
            "every sampled root was correct".to_string()
        } else {
            format!("{correct_roots} correct root(s); last failure: {last_problem}")
        };
        return Ok(TreeBuild::NoTree {
            attempts: config.max_root_attempts,
            reason,
        });
    };

    let mut tree = CodeTree::with_root(task.id.clone(), root_code, false);
    let mut feedback: Vec<ExecutionFeedback> = vec![root_fb];
    let mut frontier = vec![tree.root];
    for _depth in 1..=config.d_max {
        let jobs: Vec<(usize, usize)> = frontier
            .iter()
            .filter(|&&id| !tree.nodes[id].correct)
            .flat_map(|&id| (0..config.k).map(move |j| (id, j)))
            .collect();
        if jobs.is_empty() {
            break;
        }
        let results: Vec<_> = jobs
            .par_iter()
            .map(|&(id, j)| {
                let parent = &tree.nodes[id].code;
                let fb = &feedback[id];
                let ctx = CallContext::new(&ledger, config.seed).sample(j);
                let child = policy.revise(task, parent, fb, &ctx)?;
                let child_fb = executor.run_tests(&child, &tests).map_err(RevisionFailure::Exec)?;
                Ok::<_, RevisionFailure>((child, child_fb))
            })
            .collect();
        let mut next = Vec::new();
        for (&(id, _), result) in jobs.iter().zip(results) {
            match result {
                Ok((child, fb)) => {
                    if child.code == tree.nodes[id].code.code {
                        tree.noop_revisions += 1;
                    }
                    let cid = tree.add_child(id, child, fb.passed_all);
                    feedback.push(fb);
                    next.push(cid);
                }
                Err(RevisionFailure::Policy(PolicyError::Unavailable(m))) => {
                    if !tree.truncated {
                        warn!("task {}: policy unavailable, tree truncated: {m}", task.id);
                    }
                    tree.truncated = true;
                }
                Err(RevisionFailure::Policy(e)) => {
                    warn!("task {}: revision skipped: {e}", task.id);
                    tree.parse_failures += 1;
                }
                Err(RevisionFailure::Exec(e)) => return Err(e.into()),
            }
        }
        if tree.truncated {
            break;
        }
        frontier = next;
    }
    if tree.noop_revisions > 0 {
        warn!("task {}: {} no-op revision(s)", task.id, tree.noop_revisions);
    }
    tree.tokens = ledger.usage();
    Ok(TreeBuild::Built(label_distances(tree)))
}

enum RevisionFailure {
    Policy(PolicyError),
    Exec(crate::error::ExecError),
}

impl From<PolicyError> for RevisionFailure {
    fn from(e: PolicyError) -> Self {
        RevisionFailure::Policy(e)
    }
}

/// Labels every node bottom-up with its revision distance.
pub fn label_distances(mut tree: CodeTree) -> CodeTree {
    let mut order: Vec<usize> = (0..tree.nodes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(tree.nodes[i].depth));
    for i in order {
        let node = &tree.nodes[i];
        let d = if node.correct {
            Distance::Finite(0)
        } else if node.children.is_empty() {
            Distance::Infinite
        } else {
            node.children
                .iter()
                .map(|&c| tree.nodes[c].distance)
                .min()
                .expect("nonempty children")
                .succ()
        };
        tree.nodes[i].distance = d;
    }
    tree
}

/// Parent, children and siblings of `node`.
pub fn neighborhood(tree: &CodeTree, node: usize) -> BTreeSet<usize> {
    let n = &tree.nodes[node];
    let mut out: BTreeSet<usize> = n.children.iter().copied().collect();
    if let Some(p) = n.parent {
        out.insert(p);
        out.extend(tree.nodes[p].children.iter().copied().filter(|&s| s != node));
    }
    out
}

/// How the losing sample sits relative to the winning one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Parent,
    Child,
    Sibling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task_id: String,
    pub win: String,
    pub loss: String,
    pub win_distance: Distance,
    pub loss_distance: Distance,
    pub relation: Relation,
}

impl PreferencePair {
    /// Histogram bin: the distance gap, or `None` for an infinite loser.
    pub fn gap(&self) -> Option<u32> {
        match (self.win_distance, self.loss_distance) {
            (Distance::Finite(w), Distance::Finite(l)) => Some(l - w),
            _ => None,
        }
    }
}

fn relation(tree: &CodeTree, win: usize, loss: usize) -> Relation {
    if tree.nodes[win].parent == Some(loss) {
        Relation::Parent
    } else if tree.nodes[loss].parent == Some(win) {
        Relation::Child
    } else {
        Relation::Sibling
    }
}

/// (win, loss) node ids of every strictly ordered neighbor pair, once per
/// unordered node pair.
pub fn pair_nodes(tree: &CodeTree) -> Vec<(usize, usize)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for a in &tree.nodes {
        for b in neighborhood(tree, a.id) {
            if a.distance < tree.nodes[b].distance && seen.insert((a.id.min(b), a.id.max(b))) {
                out.push((a.id, b));
            }
        }
    }
    out
}

pub fn extract_pairs(tree: &CodeTree) -> Vec<PreferencePair> {
    pair_nodes(tree)
        .into_iter()
        .map(|(w, l)| PreferencePair {
            task_id: tree.task_id.clone(),
            win: tree.nodes[w].code.code.clone(),
            loss: tree.nodes[l].code.code.clone(),
            win_distance: tree.nodes[w].distance,
            loss_distance: tree.nodes[l].distance,
            relation: relation(tree, w, l),
        })
        .collect()
}

/// Pair counts per distance gap; infinite gaps share one bin.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GapHistogram {
    pub finite: BTreeMap<u32, usize>,
    pub infinite: usize,
}

pub const INF_GAP_BIN: &str = "inf-gap";

impl GapHistogram {
    pub fn of(pairs: &[PreferencePair]) -> Self {
        let mut h = Self::default();
        for p in pairs {
            match p.gap() {
                Some(g) => *h.finite.entry(g).or_default() += 1,
                None => h.infinite += 1,
            }
        }
        h
    }

    pub fn total(&self) -> usize {
        self.finite.values().sum::<usize>() + self.infinite
    }

    /// Ascending numeric bins, then the infinite bin (omitted when empty).
    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (g, c) in &self.finite {
            m.insert(g.to_string(), (*c).into());
        }
        if self.infinite > 0 {
            m.insert(INF_GAP_BIN.into(), self.infinite.into());
        }
        serde_json::Value::Object(m)
    }
}

/// `pairs.jsonl` -> `pairs.stats.json`.
pub fn stats_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.stats.json"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TreeError + '_ {
    move |source| TreeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` via a sibling temp file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writes one pair per line plus the gap-histogram sidecar.
pub fn export_jsonl(pairs: &[PreferencePair], path: &Path) -> Result<GapHistogram, TreeError> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(io_err(path))?;
    let hist = GapHistogram::of(pairs);
    let stats = serde_json::json!({
        "pairs": pairs.len(),
        "histogram": hist.to_json(),
    });
    let sidecar = stats_path(path);
    write_atomic(&sidecar, serde_json::to_string_pretty(&stats)?.as_bytes()).map_err(io_err(&sidecar))?;
    Ok(hist)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>, TreeError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(TreeError::from))
        .collect()
}
