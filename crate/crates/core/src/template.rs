//! Prompt templates with `{name}` placeholders.
//!
//! Template bodies ship as text assets under `templates/` and can be
//! overridden from a directory holding files of the same names.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

/// Placeholder names a template may use.
pub const PLACEHOLDERS: &[&str] = &[
    "subject",
    "context",
    "question_text",
    "answer_text",
    "options_text",
    "reasonings",
    "points",
    "question_list",
    "question",
    "objectives",
    "label",
    "max_words",
    "generated",
    "gold",
];

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template `{template}` uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` has no binding for {{{name}}}")]
    Unbound { template: String, name: String },
    #[error("cannot read template `{name}`: {reason}")]
    Io { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    body: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self, TemplateError> {
        let t = Self {
            name: name.into(),
            body: body.into().trim_end().to_string(),
        };
        for p in t.placeholders() {
            if !PLACEHOLDERS.contains(&p.as_str()) {
                return Err(TemplateError::UnknownPlaceholder {
                    template: t.name.clone(),
                    name: p,
                });
            }
        }
        Ok(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        PLACEHOLDER.captures_iter(&self.body).map(|c| c[1].to_string()).collect()
    }
}

pub type Bindings<'a> = BTreeMap<&'a str, String>;

/// Substitutes every placeholder in one pass, so bound values that happen to
/// contain `{...}` are never re-expanded.
pub fn render_prompt(t: &PromptTemplate, bindings: &Bindings<'_>) -> Result<String, TemplateError> {
    let used = t.placeholders();
    if let Some(missing) = used.iter().find(|p| !bindings.contains_key(p.as_str())) {
        return Err(TemplateError::Unbound {
            template: t.name.clone(),
            name: missing.clone(),
        });
    }
    for key in bindings.keys() {
        if !used.contains(*key) {
            log::warn!("template `{}` ignores binding `{key}`", t.name);
        }
    }
    Ok(PLACEHOLDER
        .replace_all(&t.body, |c: &regex::Captures<'_>| bindings[&c[1]].clone())
        .into_owned())
}

macro_rules! asset {
    ($name:literal) => {
        ($name, include_str!(concat!("../templates/", $name, ".txt")))
    };
}

const ASSETS: &[(&str, &str)] = &[
    asset!("expert_1"),
    asset!("expert_2"),
    asset!("expert_3"),
    asset!("textbook_1"),
    asset!("textbook_2"),
    asset!("textbook_3"),
    asset!("ontology_determine"),
    asset!("ontology_classify"),
    asset!("shorten"),
    asset!("judge"),
];

/// Every prompt the pipeline issues, keyed by asset name.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = ASSETS
            .iter()
            .map(|(n, b)| (n.to_string(), PromptTemplate::new(*n, *b).expect("shipped template is valid")))
            .collect();
        Self { templates }
    }

    /// Built-in set with any `<name>.txt` found in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for (name, _) in ASSETS {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    name: name.to_string(),
                    reason: e.to_string(),
                })?;
                set.templates.insert(name.to_string(), PromptTemplate::new(*name, body)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &PromptTemplate {
        self.templates.get(name).unwrap_or_else(|| panic!("no template named `{name}`"))
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind<'a>(pairs: &[(&'a str, &str)]) -> Bindings<'a> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn expert_first_prompt_binds_context_and_subject() {
        let set = TemplateSet::builtin();
        let out = render_prompt(
            set.get("expert_1"),
            &bind(&[
                ("subject", "Chemistry"),
                ("context", "undergraduate"),
                ("question_text", "What is the chemical formula for magnesium bromide?"),
                ("answer_text", "MgBr2"),
            ]),
        )
        .unwrap();
        assert!(out.contains("undergraduate Chemistry course"));
        assert!(out.ends_with("Correct answer: MgBr2"));
        assert!(!PLACEHOLDER.is_match(&out));
    }

    #[test]
    fn textbook_first_prompt_states_option_a() {
        let set = TemplateSet::builtin();
        let out = render_prompt(
            set.get("textbook_1"),
            &bind(&[
                ("subject", "Chemistry"),
                ("context", "undergraduate"),
                ("question_text", "Q"),
                ("options_text", "A) MgBr2\nB) MgBr"),
            ]),
        )
        .unwrap();
        assert!(out.contains("option A), is the correct answer"));
        assert!(out.ends_with("Question text: Q\nA) MgBr2\nB) MgBr"));
    }

    #[test]
    fn missing_binding_is_named() {
        let t = PromptTemplate::new("t", "A {subject} course").unwrap();
        assert_eq!(
            render_prompt(&t, &bind(&[("context", "x")])).unwrap_err(),
            TemplateError::Unbound {
                template: "t".into(),
                name: "subject".into()
            }
        );
    }

    #[test]
    fn unknown_placeholder_rejected() {
        assert!(matches!(
            PromptTemplate::new("t", "{nonsense}"),
            Err(TemplateError::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn values_are_not_reexpanded() {
        let t = PromptTemplate::new("t", "{reasonings} / {points}").unwrap();
        let out = render_prompt(&t, &bind(&[("reasonings", "{points}"), ("points", "p")])).unwrap();
        assert_eq!(out, "{points} / p");
    }

    #[test]
    fn shipped_templates_declare_expected_placeholders() {
        let set = TemplateSet::builtin();
        let names = |n: &str| set.get(n).placeholders().into_iter().collect::<Vec<_>>();
        assert_eq!(names("expert_2"), ["reasonings"]);
        assert_eq!(names("expert_3"), ["points", "reasonings"]);
        assert!(names("textbook_2").is_empty());
        assert_eq!(names("ontology_classify"), ["objectives", "question", "subject"]);
    }
}
