//! Pluggable equivalence judges between generated and gold KC labels.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Conversation, Gateway, GatewayError};
use crate::template::{render_prompt, Bindings, TemplateError, TemplateSet};
use crate::text::normalize_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    NormalizedExact,
    Ledger,
    LlmJudge,
}

impl JudgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            JudgeKind::NormalizedExact => "normalized_exact",
            JudgeKind::Ledger => "ledger",
            JudgeKind::LlmJudge => "llm_judge",
        }
    }
}

impl FromStr for JudgeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().replace('-', "_").as_str() {
            "normalized_exact" | "exact" => Ok(JudgeKind::NormalizedExact),
            "ledger" => Ok(JudgeKind::Ledger),
            "llm_judge" | "llm" => Ok(JudgeKind::LlmJudge),
            other => Err(format!("unknown judge kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Match,
    NoMatch,
}

impl Verdict {
    pub fn is_match(self) -> bool {
        self == Verdict::Match
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "match" => Ok(Verdict::Match),
            "no_match" => Ok(Verdict::NoMatch),
            other => Err(format!("unknown verdict `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchVerdict {
    pub value: Verdict,
    pub judge_kind: JudgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_entry: Option<String>,
}

impl MatchVerdict {
    fn exact(value: Verdict) -> Self {
        Self {
            value,
            judge_kind: JudgeKind::NormalizedExact,
            rationale: None,
            ledger_entry: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("cannot judge an empty label for question {0}")]
    EmptyLabel(String),
    #[error("no ledger entry for question {question}: `{generated}` vs `{gold}`")]
    LedgerMiss { question: String, generated: String, gold: String },
    #[error("ledger: {0}")]
    LedgerFormat(String),
    #[error("judge reply is neither yes nor no: {0:?}")]
    Unparseable(String),
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Decides whether a generated label denotes the same KC as the gold label.
///
/// Every implementation treats labels that are equal after normalization as
/// a match without consulting its backing source.
pub trait Judge: Sync {
    fn kind(&self) -> JudgeKind;

    fn judge(&self, question_id: &str, generated: &str, gold: &str) -> Result<MatchVerdict, JudgeError>;

    /// How many questions may be judged at once.
    fn parallelism(&self) -> usize {
        1
    }
}

fn precheck(question_id: &str, generated: &str, gold: &str) -> Result<Option<MatchVerdict>, JudgeError> {
    let (g, h) = (normalize_label(generated), normalize_label(gold));
    if g.is_empty() || h.is_empty() {
        return Err(JudgeError::EmptyLabel(question_id.to_string()));
    }
    Ok((g == h).then(|| MatchVerdict::exact(Verdict::Match)))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedExactJudge;

impl Judge for NormalizedExactJudge {
    fn kind(&self) -> JudgeKind {
        JudgeKind::NormalizedExact
    }

    fn judge(&self, question_id: &str, generated: &str, gold: &str) -> Result<MatchVerdict, JudgeError> {
        Ok(precheck(question_id, generated, gold)?.unwrap_or(MatchVerdict::exact(Verdict::NoMatch)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub question_id: String,
    pub generated_label: String,
    pub gold_label: String,
    pub verdict: String,
    pub adjudicator: String,
}

/// Human adjudications keyed by question and normalized label pair.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    entries: BTreeMap<(String, String, String), (String, Verdict, String)>,
}

impl Ledger {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, JudgeError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut ledger = Ledger::default();
        for (i, row) in rdr.deserialize::<LedgerEntry>().enumerate() {
            // header is line 1
            let line = i + 2;
            let row = row.map_err(|e| JudgeError::LedgerFormat(e.to_string()))?;
            let verdict: Verdict = row
                .verdict
                .parse()
                .map_err(|e| JudgeError::LedgerFormat(format!("line {line}: {e}")))?;
            let key = (
                row.question_id.clone(),
                normalize_label(&row.generated_label),
                normalize_label(&row.gold_label),
            );
            let entry_id = format!("line {line}");
            if let Some((prev_id, prev, _)) = ledger.entries.get(&key) {
                if *prev != verdict {
                    return Err(JudgeError::LedgerFormat(format!(
                        "line {line} contradicts {prev_id} for question {}",
                        row.question_id
                    )));
                }
                continue;
            }
            ledger.entries.insert(key, (entry_id, verdict, row.adjudicator));
        }
        Ok(ledger)
    }

    pub fn load(path: &Path) -> Result<Self, JudgeError> {
        let file = std::fs::File::open(path).map_err(|e| JudgeError::LedgerFormat(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Judge for Ledger {
    fn kind(&self) -> JudgeKind {
        JudgeKind::Ledger
    }

    fn judge(&self, question_id: &str, generated: &str, gold: &str) -> Result<MatchVerdict, JudgeError> {
        if let Some(v) = precheck(question_id, generated, gold)? {
            return Ok(v);
        }
        let key = (question_id.to_string(), normalize_label(generated), normalize_label(gold));
        let (id, value, adjudicator) = self.entries.get(&key).ok_or_else(|| JudgeError::LedgerMiss {
            question: question_id.to_string(),
            generated: generated.to_string(),
            gold: gold.to_string(),
        })?;
        Ok(MatchVerdict {
            value: *value,
            judge_kind: JudgeKind::Ledger,
            rationale: (!adjudicator.is_empty()).then(|| format!("adjudicated by {adjudicator}")),
            ledger_entry: Some(id.clone()),
        })
    }
}

/// Parses a yes/no answer: the first word decides, otherwise exactly one of
/// the two words must appear.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let words: Vec<String> = reply
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    match words.first().map(String::as_str) {
        Some("yes") => return Some(true),
        Some("no") => return Some(false),
        _ => {}
    }
    let yes = words.iter().any(|w| w == "yes");
    let no = words.iter().any(|w| w == "no");
    match (yes, no) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

/// Asks the provider whether two labels are equivalent.
pub struct LlmJudge<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    subject: String,
    context: String,
}

impl<'a> LlmJudge<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, subject: &str, context: &str) -> Self {
        Self {
            gateway,
            templates,
            subject: subject.to_string(),
            context: context.to_string(),
        }
    }
}

impl Judge for LlmJudge<'_> {
    fn kind(&self) -> JudgeKind {
        JudgeKind::LlmJudge
    }

    fn judge(&self, question_id: &str, generated: &str, gold: &str) -> Result<MatchVerdict, JudgeError> {
        if let Some(v) = precheck(question_id, generated, gold)? {
            return Ok(v);
        }
        let mut b = Bindings::new();
        b.insert("subject", self.subject.clone());
        b.insert("context", self.context.clone());
        b.insert("generated", generated.trim().to_string());
        b.insert("gold", gold.trim().to_string());
        let prompt = render_prompt(self.templates.get("judge"), &b)?;
        let reply = self.gateway.complete(&Conversation::single(prompt))?.text;
        let yes = parse_yes_no(&reply).ok_or_else(|| JudgeError::Unparseable(reply.clone()))?;
        Ok(MatchVerdict {
            value: if yes { Verdict::Match } else { Verdict::NoMatch },
            judge_kind: JudgeKind::LlmJudge,
            rationale: Some(reply.trim().to_string()),
            ledger_entry: None,
        })
    }

    fn parallelism(&self) -> usize {
        self.gateway.concurrency()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CompletionParams, Rule, ScriptedProvider};

    const LEDGER: &str = "question_id,generated_label,gold_label,verdict,adjudicator
q01,Relate pressure and temperature of gases,Use Gay Lussac's law,match,r1
q02,Name ionic compounds,Use Gay Lussac's law,no_match,r2
";

    #[test]
    fn normalized_exact_examples() {
        let j = NormalizedExactJudge;
        assert!(j.judge("q", "apply boyle's law", "Apply Boyle's law").unwrap().value.is_match());
        let v = j
            .judge("q", "Understand gas pressure-temperature relationship", "Use Gay Lussac's law")
            .unwrap();
        assert_eq!(v, MatchVerdict::exact(Verdict::NoMatch));
        assert!(matches!(j.judge("q", "  ", "x"), Err(JudgeError::EmptyLabel(_))));
    }

    #[test]
    fn ledger_lookup_and_miss() {
        let l = Ledger::from_reader(LEDGER.as_bytes()).unwrap();
        assert_eq!(l.len(), 2);
        let v = l
            .judge("q01", "relate pressure and temperature of gases.", "Use Gay Lussac's law")
            .unwrap();
        assert_eq!(v.value, Verdict::Match);
        assert_eq!(v.judge_kind, JudgeKind::Ledger);
        assert_eq!(v.ledger_entry.as_deref(), Some("line 2"));
        assert!(!l
            .judge("q02", "Name ionic compounds", "Use Gay Lussac's law")
            .unwrap()
            .value
            .is_match());
        assert!(matches!(l.judge("q03", "a", "b"), Err(JudgeError::LedgerMiss { .. })));
    }

    #[test]
    fn ledger_rejects_contradictions_and_bad_verdicts() {
        let bad = format!("{LEDGER}q01,Relate pressure and temperature of gases,Use Gay Lussac's law,no_match,r3\n");
        assert!(matches!(Ledger::from_reader(bad.as_bytes()), Err(JudgeError::LedgerFormat(_))));
        let bad = "question_id,generated_label,gold_label,verdict,adjudicator\nq1,a,b,maybe,r\n";
        assert!(matches!(Ledger::from_reader(bad.as_bytes()), Err(JudgeError::LedgerFormat(_))));
    }

    #[test]
    fn identical_labels_match_under_every_judge() {
        let gw = Gateway::new(ScriptedProvider::new(vec![]), CompletionParams::default());
        let templates = TemplateSet::builtin();
        let judges: Vec<Box<dyn Judge + '_>> = vec![
            Box::new(NormalizedExactJudge),
            Box::new(Ledger::default()),
            Box::new(LlmJudge::new(&gw, &templates, "Chemistry", "undergraduate")),
        ];
        for j in &judges {
            assert!(j
                .judge("q", "Use Gay Lussac's law", "Use Gay Lussac's law")
                .unwrap()
                .value
                .is_match());
        }
        assert_eq!(gw.request_count(), 0);
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("Yes."), Some(true));
        assert_eq!(parse_yes_no("no, they differ"), Some(false));
        assert_eq!(parse_yes_no("**No**"), Some(false));
        assert_eq!(parse_yes_no("The answer is yes"), Some(true));
        assert_eq!(parse_yes_no("Maybe"), None);
        assert_eq!(parse_yes_no("It could be yes or no"), None);
    }

    #[test]
    fn llm_judge_asks_provider() {
        let p = std::sync::Arc::new(ScriptedProvider::new(vec![
            Rule::contains("Label 1: Relate", ["Yes"]),
            Rule::contains("Label 1: Name", ["Unsure"]),
        ]));
        let gw = Gateway::new(p.clone(), CompletionParams::default());
        let t = TemplateSet::builtin();
        let j = LlmJudge::new(&gw, &t, "Chemistry", "undergraduate");
        let v = j.judge("q1", "Relate pressure and temperature", "Use Gay Lussac's law").unwrap();
        assert_eq!((v.value, v.judge_kind), (Verdict::Match, JudgeKind::LlmJudge));
        assert!(p.requests()[0].contains("Label 2: Use Gay Lussac's law"));
        assert!(matches!(
            j.judge("q1", "Name salts", "Use Gay Lussac's law"),
            Err(JudgeError::Unparseable(_))
        ));
    }
}
