use super::*;
use crate::domain::Reward;
use crate::reward::PassRateScorer;
use crate::testkit::{code_reply, policy, task, MarkerExecutor};
use proptest::prelude::*;
use serde_json::{json, Value};

fn script(rules: Value) -> Policy {
    policy(
        &json!({
            "default_usage": {"prompt_tokens": 200, "completion_tokens": 100},
            "rules": rules
        })
        .to_string(),
    )
}

fn plans(n: usize) -> String {
    (0..n).map(|i| format!("[OBSERVATION]plan {i}[/OBSERVATION]\n")).collect()
}

fn strategies(n: usize) -> String {
    let mut s = "[explanation]off by one[/explanation]\n".to_string();
    for i in 0..n {
        s.push_str(&format!("[direction]idea {i}[/direction]\n"));
    }
    s
}

/// Drafts pass 0 of 2 tests; the second strategy at t=1 yields a program
/// passing both, the other two pass one.
fn golden_rules() -> Value {
    json!([
        {"kind": "draft_plans", "responses": [plans(5)]},
        {"kind": "generate_code", "responses": (0..5).map(|i| code_reply(&format!("# pass 0\nprint({i})"))).collect::<Vec<_>>()},
        {"kind": "propose_strategies", "responses": [strategies(3)]},
        {"kind": "revise_with_strategy", "sample_index": 1, "responses": [code_reply("# pass 2\nprint(2*int(input()))")]},
        {"kind": "revise_with_strategy", "responses": [code_reply("# pass 1\nprint(a)"), code_reply("# pass 1\nprint(b)"), code_reply("# pass 1\nprint(c)")]},
        {"kind": "revise", "responses": [code_reply("# pass 1\nr0"), code_reply("# pass 1\nr1"), code_reply("# pass 1\nr2")]},
        {"kind": "crossover", "responses": [code_reply("# pass 1\nx0"), code_reply("# pass 2\nx1"), code_reply("# pass 1\nx2")]},
        {"kind": "direct_draft", "responses": [code_reply("# pass 0\nd0"), code_reply("# pass 1\nd1"), code_reply("# pass 0\nd2")]}
    ])
}

fn config(variant: Variant) -> SearchConfig {
    SearchConfig {
        variant,
        iteration_limit: 10,
        token_budget: 100_000,
        ..SearchConfig::default()
    }
}

fn go(t: &Task, cfg: &SearchConfig, p: &Policy) -> SearchOutcome {
    let comps = Components {
        policy: p,
        executor: &MarkerExecutor,
        scorer: &PassRateScorer,
    };
    run(t, cfg, comps).unwrap()
}

fn count_calls(o: &SearchOutcome, kind: CallKind) -> usize {
    o.transcript
        .generation_calls()
        .filter(|e| matches!(e, TranscriptEvent::Generation { call, .. } if *call == kind))
        .count()
}

fn candidates_at(o: &SearchOutcome, t: usize) -> Vec<(CodeId, Vec<CodeId>)> {
    o.transcript
        .events
        .iter()
        .filter_map(|e| match e {
            TranscriptEvent::Candidate {
                iteration,
                code_id,
                parent_ids,
                ..
            } if *iteration == t => Some((code_id.clone(), parent_ids.clone())),
            _ => None,
        })
        .collect()
}

fn score(pass: bool, r: f64) -> CompositeScore {
    CompositeScore::new(pass, Reward::new(r).unwrap())
}

#[test]
fn second_strategy_solves_at_first_iteration() {
    let t = task(2, 0);
    let o = go(&t, &config(Variant::Hc), &script(golden_rules()));
    let best = o.best.as_ref().unwrap();
    assert_eq!(best.sample.code, "# pass 2\nprint(2*int(input()))");
    assert!(best.feedback.passed_all);
    assert_eq!(o.stop_reason, StopReason::Solved);
    assert!(!o.degraded);

    let improvements: Vec<usize> = o
        .transcript
        .events
        .iter()
        .filter_map(|e| match e {
            TranscriptEvent::BestUpdated { iteration, .. } if *iteration > 0 => Some(*iteration),
            _ => None,
        })
        .collect();
    assert_eq!(improvements, vec![1]);
    // 1 plan call + 5 codes + 1 strategies call + 3 revisions.
    assert_eq!(o.transcript.generation_calls().count(), 10);
    assert_eq!(o.tokens.total(), 3000);
}

#[test]
fn zero_iterations_returns_best_draft() {
    let t = task(2, 0);
    let rules = json!([
        {"kind": "draft_plans", "responses": [plans(5)]},
        {"kind": "generate_code", "responses": ["```\n# pass 0\na\n```", "```\n# pass 1\nb\n```", "```\n# pass 0\nc\n```", "```\n# pass 0\nd\n```", "```\n# pass 0\ne\n```"]}
    ]);
    let cfg = SearchConfig {
        iteration_limit: 0,
        ..config(Variant::Hc)
    };
    let o = go(&t, &cfg, &script(rules));
    assert_eq!(o.best.unwrap().sample.code, "# pass 1\nb");
    assert_eq!(o.transcript.generation_calls().count(), 6);
    assert_eq!(o.stop_reason, StopReason::IterationLimit);
}

#[test]
fn zero_budget_is_degraded_without_calls() {
    let t = task(2, 0);
    for variant in [Variant::Hc, Variant::Ga, Variant::Bon] {
        let cfg = SearchConfig {
            token_budget: 0,
            ..config(variant)
        };
        let o = go(&t, &cfg, &script(golden_rules()));
        assert!(o.degraded, "{variant:?}");
        assert!(o.best.is_none());
        assert_eq!(o.transcript.generation_calls().count(), 0);
        assert_eq!(o.stop_reason, StopReason::BudgetExhausted);
    }
}

#[test]
fn five_plans_give_five_drafts() {
    let t = task(2, 0);
    let cfg = SearchConfig {
        iteration_limit: 0,
        ..config(Variant::Hc)
    };
    let o = go(&t, &cfg, &script(golden_rules()));
    assert_eq!(candidates_at(&o, 0).len(), 5);
    assert_eq!(o.state.history.len(), 5);
    let incumbents = o
        .transcript
        .events
        .iter()
        .filter(|e| matches!(e, TranscriptEvent::IncumbentSelected { .. }))
        .count();
    assert_eq!(incumbents, 1);
}

#[test]
fn equal_drafts_resolve_to_smaller_code() {
    let t = task(2, 0);
    let rules = json!([
        {"kind": "draft_plans", "responses": [plans(2)]},
        {"kind": "generate_code", "responses": ["```\n# pass 1\nzeta\n```", "```\n# pass 1\nalpha\n```"]}
    ]);
    let cfg = SearchConfig {
        n_drafts: 2,
        iteration_limit: 0,
        ..config(Variant::Hc)
    };
    let o = go(&t, &cfg, &script(rules));
    assert_eq!(o.state.incumbent.unwrap().sample.code, "# pass 1\nalpha");
}

#[test]
fn no_plans_ablation_samples_directly() {
    let t = task(2, 0);
    let mut cfg = SearchConfig {
        iteration_limit: 0,
        ..config(Variant::Hc)
    };
    cfg.ablations.use_plans = false;
    let o = go(&t, &cfg, &script(golden_rules()));
    assert_eq!(count_calls(&o, CallKind::DraftPlans), 0);
    assert_eq!(count_calls(&o, CallKind::DirectDraft), 5);
    match &o.transcript.events[0] {
        TranscriptEvent::RunStarted { config, .. } => assert!(!config.ablations.use_plans),
        e => panic!("unexpected first event {e:?}"),
    }
}

#[test]
fn all_drafts_unparseable_is_an_error() {
    let t = task(2, 0);
    let rules = json!([
        {"kind": "draft_plans", "responses": [plans(3)]},
        {"kind": "generate_code", "responses": ["no code, sorry"]}
    ]);
    let comps_policy = script(rules);
    let comps = Components {
        policy: &comps_policy,
        executor: &MarkerExecutor,
        scorer: &PassRateScorer,
    };
    let err = run(&t, &config(Variant::Hc), comps).unwrap_err();
    assert!(matches!(err, SearchError::DraftFailure));
}

#[test]
fn hc_neighborhood_has_k_children_of_incumbent() {
    let t = task(3, 0);
    let cfg = SearchConfig {
        iteration_limit: 1,
        ..config(Variant::Hc)
    };
    let o = go(&t, &cfg, &script(golden_rules()));
    let incumbent0 = o
        .transcript
        .events
        .iter()
        .find_map(|e| match e {
            TranscriptEvent::IncumbentSelected { iteration: 0, code_id, .. } => Some(code_id.clone()),
            _ => None,
        })
        .unwrap();
    let cands = candidates_at(&o, 1);
    assert_eq!(cands.len(), 3);
    assert!(cands.iter().all(|(_, parents)| parents == &vec![incumbent0.clone()]));
    assert_eq!(count_calls(&o, CallKind::ProposeStrategies), 1);
}

#[test]
fn budget_trip_mid_iteration_keeps_partial_neighborhood() {
    let t = task(3, 0);
    // One draft costs 2 calls (600); strategies + one revision reach 1200.
    let cfg = SearchConfig {
        n_drafts: 1,
        token_budget: 1200,
        ..config(Variant::Hc)
    };
    let o = go(&t, &cfg, &script(golden_rules()));
    assert_eq!(candidates_at(&o, 1).len(), 1);
    assert_eq!(o.stop_reason, StopReason::BudgetExhausted);
    assert!(o.transcript.events.iter().any(|e| matches!(
        e,
        TranscriptEvent::BudgetCheckpoint { iteration: 1, exhausted: true, ledger_total: 1200, .. }
    )));
    assert!(!o.degraded);
}

#[test]
fn no_strategies_ablation_revises_directly() {
    let t = task(3, 0);
    let mut cfg = SearchConfig {
        iteration_limit: 1,
        ..config(Variant::Hc)
    };
    cfg.ablations.use_strategies = false;
    let o = go(&t, &cfg, &script(golden_rules()));
    assert_eq!(candidates_at(&o, 1).len(), 3);
    assert_eq!(count_calls(&o, CallKind::ProposeStrategies), 0);
    assert_eq!(count_calls(&o, CallKind::Revise), 3);
}

#[test]
fn no_feedback_ablation_omits_execution_results() {
    let t = task(2, 0);
    let mut cfg = SearchConfig {
        iteration_limit: 1,
        ..config(Variant::Hc)
    };
    cfg.ablations.use_feedback = false;
    // Any prompt mentioning test results would fall through to an outage.
    let rules = json!([
        {"kind": "draft_plans", "responses": [plans(5)]},
        {"kind": "generate_code", "responses": [code_reply("# pass 0\nq")]},
        {"kind": "propose_strategies", "unless": ["Passed 0/2"], "responses": [strategies(3)]},
        {"kind": "revise_with_strategy", "unless": ["Passed 0/2"], "responses": [code_reply("# pass 1\nw")]},
        {"unavailable": true}
    ]);
    let o = go(&t, &cfg, &script(rules));
    assert!(!o.degraded);
    assert_eq!(candidates_at(&o, 1).len(), 3);
}

fn scored(code: &str, s: CompositeScore) -> Scored {
    Scored {
        sample: CodeSample::draft(code),
        feedback: ExecutionFeedback {
            verdicts: vec![],
            passed_all: s.passes_public,
            summary: String::new(),
        },
        score: s,
    }
}

#[test]
fn ga_parents_are_top_two_eligible() {
    let pool = vec![
        scored("C", score(false, 0.7)),
        scored("A", score(true, 0.9)),
        scored("B", score(false, 0.8)),
    ];
    let cfg = config(Variant::Ga);
    let mut uses = BTreeMap::new();
    assert_eq!(ga_select_parents(&pool, &mut uses, &cfg, 1), Some((1, 2)));
    assert_eq!(uses[&pool[1].sample.id], 1);

    let mut uses = BTreeMap::from([(pool[1].sample.id.clone(), 3)]);
    assert_eq!(ga_select_parents(&pool, &mut uses, &cfg, 1), Some((2, 0)));
    assert_eq!(uses[&pool[1].sample.id], 3);
}

#[test]
fn ga_parent_tie_prefers_smaller_code() {
    let pool = vec![
        scored("C", score(false, 0.5)),
        scored("B", score(false, 0.5)),
        scored("A", score(true, 0.9)),
    ];
    let mut uses = BTreeMap::from([(pool[2].sample.id.clone(), 3)]);
    assert_eq!(ga_select_parents(&pool, &mut uses, &config(Variant::Ga), 1), Some((1, 0)));
}

#[test]
fn ga_parent_starvation_returns_none() {
    let pool = vec![scored("A", score(true, 0.9)), scored("B", score(false, 0.5))];
    let mut uses = BTreeMap::from([(pool[0].sample.id.clone(), 3)]);
    assert_eq!(ga_select_parents(&pool, &mut uses, &config(Variant::Ga), 1), None);
}

#[test]
fn roulette_selection_is_seeded_and_distinct() {
    let pool: Vec<Scored> = (0..6).map(|i| scored(&format!("p{i}"), score(false, i as f64 / 10.0))).collect();
    let cfg = SearchConfig {
        parent_selection: ParentSelection::Roulette,
        max_parent_uses: 100,
        ..config(Variant::Ga)
    };
    for t in 0..50 {
        let (a, b) = ga_select_parents(&pool, &mut BTreeMap::new(), &cfg, t).unwrap();
        assert_ne!(a, b);
        assert_eq!(ga_select_parents(&pool, &mut BTreeMap::new(), &cfg, t), Some((a, b)));
    }
}

#[test]
fn ga_neighborhood_crosses_the_selected_pair() {
    let t = task(3, 0);
    let cfg = SearchConfig {
        iteration_limit: 1,
        ..config(Variant::Ga)
    };
    let o = go(&t, &cfg, &script(golden_rules()));
    let pairs = o.transcript.parent_selections();
    assert_eq!(pairs.len(), 1);
    let cands = candidates_at(&o, 1);
    assert_eq!(cands.len(), 3);
    for (_, parents) in cands {
        assert_eq!(parents, pairs[0].to_vec());
    }
}

#[test]
fn ga_partial_neighborhood_on_budget() {
    let t = task(3, 0);
    // 6 drafting calls (1800) + one crossover reaches 2100.
    let cfg = SearchConfig {
        token_budget: 2100,
        ..config(Variant::Ga)
    };
    let o = go(&t, &cfg, &script(golden_rules()));
    assert_eq!(candidates_at(&o, 1).len(), 1);
    assert_eq!(o.stop_reason, StopReason::BudgetExhausted);
}

#[test]
fn incumbent_update_examples() {
    let c: Vec<CodeSample> = ["x", "y", "z"].iter().map(|s| CodeSample::draft(*s)).collect();
    let s = [score(false, 0.1), score(true, 0.4), CompositeScore::sentinel()];
    assert_eq!(update_incumbent(&c, &s), Some(1));
    let eq = [score(false, 0.3); 3];
    let c2: Vec<CodeSample> = ["m", "b", "q"].iter().map(|s| CodeSample::draft(*s)).collect();
    assert_eq!(update_incumbent(&c2, &eq), Some(1));
    assert_eq!(update_incumbent(&c[..1], &s[..1]), Some(0));
}

#[test]
fn bon_budget_for_four_drafts() {
    let t = task(2, 0);
    let rules = json!([{"kind": "direct_draft", "responses": [code_reply("# pass 0\nd0"), code_reply("# pass 0\nd1")]}]);
    let cfg = SearchConfig {
        token_budget: 1200,
        ..config(Variant::Bon)
    };
    let comps_policy = script(rules);
    let comps = Components {
        policy: &comps_policy,
        executor: &MarkerExecutor,
        scorer: &PassRateScorer,
    };
    let o = bon_run(&t, &cfg, comps).unwrap();
    assert_eq!(count_calls(&o, CallKind::DirectDraft), 4);
    assert_eq!(candidates_at(&o, 0).len() + candidates_at(&o, 1).len() + candidates_at(&o, 2).len() + candidates_at(&o, 3).len(), 4);
    assert_eq!(o.stop_reason, StopReason::BudgetExhausted);
}

#[test]
fn bon_returns_passing_draft() {
    let t = task(2, 0);
    let rules = json!([{"kind": "direct_draft", "responses": [code_reply("# pass 1\nd0"), code_reply("# pass 0\nd1"), code_reply("# pass 2\nd2")]}]);
    let cfg = SearchConfig {
        stop_when_solved: false,
        token_budget: 3000,
        ..config(Variant::Bon)
    };
    let o = go(&t, &cfg, &script(rules));
    assert_eq!(o.best.as_ref().unwrap().sample.code, "# pass 2\nd2");
    assert_eq!(count_calls(&o, CallKind::DirectDraft), 10);
}

#[test]
fn policy_outage_returns_best_so_far() {
    let t = task(2, 0);
    let rules = json!([
        {"kind": "draft_plans", "responses": [plans(5)]},
        {"kind": "generate_code", "responses": [code_reply("# pass 1\nkeep")]},
        {"unavailable": true}
    ]);
    let o = go(&t, &config(Variant::Hc), &script(rules));
    assert!(o.degraded);
    assert_eq!(o.stop_reason, StopReason::PolicyUnavailable);
    assert_eq!(o.best.unwrap().sample.code, "# pass 1\nkeep");
}

struct Flaky;

impl crate::reward::Scorer for Flaky {
    fn name(&self) -> &'static str {
        "flaky"
    }

    fn score(&self, _: &crate::reward::ScoreInput<'_>) -> Result<f64, crate::error::ScorerError> {
        Err(crate::error::ScorerError::Transport("down".into()))
    }
}

#[test]
fn scorer_failure_degrades_the_run() {
    let t = task(2, 0);
    let p = script(golden_rules());
    let comps = Components {
        policy: &p,
        executor: &MarkerExecutor,
        scorer: &Flaky,
    };
    let o = run(&t, &config(Variant::Hc), comps).unwrap();
    assert!(o.degraded);
    assert_eq!(o.stop_reason, StopReason::ScorerFailure);
}

#[test]
fn invalid_configs_rejected() {
    for cfg in [
        SearchConfig { n_drafts: 0, ..SearchConfig::default() },
        SearchConfig { branching: 0, ..SearchConfig::default() },
        SearchConfig { max_parent_uses: 0, ..SearchConfig::default() },
        SearchConfig { variant: Variant::Ga, n_drafts: 1, ..SearchConfig::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
}

/// A script whose responses are drawn by seeded digest from a fixed pool of
/// programs with assorted pass counts, so each seed explores differently.
fn random_rules() -> Value {
    let codes: Vec<String> = (0..12)
        .map(|i| code_reply(&format!("# pass {}\nv{i}", i % 5)))
        .collect();
    let mixed: Vec<String> = codes
        .iter()
        .cloned()
        .chain(["garbled".to_string()])
        .collect();
    json!([
        {"kind": "draft_plans", "pick": "seeded", "responses": [plans(5), plans(3), plans(1)]},
        {"kind": "propose_strategies", "pick": "seeded", "responses": [strategies(3), strategies(1), "nothing"]},
        {"pick": "seeded", "responses": mixed}
    ])
}

fn key_of(e: &TranscriptEvent) -> Option<(CompositeScore, f64)> {
    match e {
        TranscriptEvent::BestUpdated { score, pass_rate, .. } => Some((*score, *pass_rate)),
        _ => None,
    }
}

fn check_invariants(o: &SearchOutcome, cfg: &SearchConfig) -> Result<(), TestCaseError> {
    let updates: Vec<_> = o.transcript.events.iter().filter_map(key_of).collect();
    for w in updates.windows(2) {
        let ((s0, r0), (s1, r1)) = (w[0], w[1]);
        if cfg.variant == Variant::Bon {
            prop_assert!(r1.total_cmp(&r0).then_with(|| compare_scores(&s1, &s0)) != Ordering::Less);
        } else {
            prop_assert!(compare_scores(&s1, &s0) == Ordering::Greater);
        }
    }

    let mut max_call = 0;
    for e in o.transcript.generation_calls() {
        if let TranscriptEvent::Generation { usage, ledger_total, .. } = e {
            prop_assert!(ledger_total - usage.total() < cfg.token_budget);
            max_call = max_call.max(usage.total());
        }
    }
    prop_assert!(o.tokens.total() <= cfg.token_budget + max_call);

    let mut uses: BTreeMap<CodeId, usize> = BTreeMap::new();
    for pair in o.transcript.parent_selections() {
        prop_assert!(pair[0] != pair[1]);
        for id in pair {
            *uses.entry(id).or_default() += 1;
        }
    }
    prop_assert!(uses.values().all(|&u| u <= cfg.max_parent_uses));

    let mut by_iter: BTreeMap<usize, Vec<CompositeScore>> = BTreeMap::new();
    for e in &o.transcript.events {
        match e {
            TranscriptEvent::Candidate { iteration, score, .. } => by_iter.entry(*iteration).or_default().push(*score),
            TranscriptEvent::IncumbentSelected { iteration, score, .. } => {
                if by_iter[iteration].iter().any(|s| !s.reward.is_sentinel()) {
                    prop_assert!(!score.reward.is_sentinel());
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn invariant_run(variant: Variant, seed: u64, budget: u64, branching: usize) -> Result<(), TestCaseError> {
    let t = task(4, 0);
    let cfg = SearchConfig {
        variant,
        seed,
        token_budget: budget,
        branching,
        iteration_limit: 15,
        stop_when_solved: seed % 2 == 0,
        max_parent_uses: 1 + (seed % 3) as usize,
        ..SearchConfig::default()
    };
    let p = script(random_rules());
    let comps = Components {
        policy: &p,
        executor: &MarkerExecutor,
        scorer: &PassRateScorer,
    };
    let first = run(&t, &cfg, comps);
    let second = run(&t, &cfg, comps);
    match (first, second) {
        (Ok(a), Ok(b)) => {
            prop_assert_eq!(a.transcript.to_jsonl(), b.transcript.to_jsonl());
            check_invariants(&a, &cfg)
        }
        (Err(SearchError::DraftFailure), Err(SearchError::DraftFailure)) => Ok(()),
        (a, b) => Err(TestCaseError::fail(format!("diverged: {:?} / {:?}", a.err(), b.err()))),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hc_invariants(seed in any::<u64>(), budget in 0u64..9000, k in 1usize..5) {
        invariant_run(Variant::Hc, seed, budget, k)?;
    }

    #[test]
    fn ga_invariants(seed in any::<u64>(), budget in 0u64..9000, k in 1usize..5) {
        invariant_run(Variant::Ga, seed, budget, k)?;
    }

    #[test]
    fn bon_invariants(seed in any::<u64>(), budget in 0u64..9000) {
        invariant_run(Variant::Bon, seed, budget, 1)?;
    }
}
