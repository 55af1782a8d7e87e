//! Prompt templates with `{name}` placeholders.
//!
//! The defaults are compiled in from `templates/*.txt`; a directory holding
//! files with the same names overrides them one by one.

use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub draft_plans: String,
    pub generate_code: String,
    pub direct_draft: String,
    pub hc_strategies: String,
    pub hc_revise: String,
    pub ga_crossover: String,
    pub revise: String,
    pub self_eval: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            draft_plans: include_str!("../../templates/draft_plans.txt").into(),
            generate_code: include_str!("../../templates/generate_code.txt").into(),
            direct_draft: include_str!("../../templates/direct_draft.txt").into(),
            hc_strategies: include_str!("../../templates/hc_strategies.txt").into(),
            hc_revise: include_str!("../../templates/hc_revise.txt").into(),
            ga_crossover: include_str!("../../templates/ga_crossover.txt").into(),
            revise: include_str!("../../templates/revise.txt").into(),
            self_eval: include_str!("../../templates/self_eval.txt").into(),
        }
    }
}

impl PromptTemplates {
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        let slots: [(&str, &mut String); 8] = [
            ("draft_plans.txt", &mut t.draft_plans),
            ("generate_code.txt", &mut t.generate_code),
            ("direct_draft.txt", &mut t.direct_draft),
            ("hc_strategies.txt", &mut t.hc_strategies),
            ("hc_revise.txt", &mut t.hc_revise),
            ("ga_crossover.txt", &mut t.ga_crossover),
            ("revise.txt", &mut t.revise),
            ("self_eval.txt", &mut t.self_eval),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)?;
            }
        }
        Ok(t)
    }
}

/// Single-pass substitution: values are never re-scanned, so a statement
/// containing `{code}` stays literal. Unknown placeholders are left as-is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let close = tail.find('}');
        let name = close.map(|c| &tail[..c]);
        match name.and_then(|n| vars.iter().find(|(k, _)| *k == n)) {
            Some((k, v)) => {
                out.push_str(v);
                rest = &tail[k.len() + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}
