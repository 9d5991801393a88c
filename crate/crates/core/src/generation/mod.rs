//! KC generation through the simulated-expert and simulated-textbook chains.
//!
//! Both strategies issue exactly three prompts per question. The expert
//! chain starts a fresh conversation for every step and binds earlier
//! replies into `{reasonings}` and `{points}`; the textbook chain keeps one
//! running conversation. The second reply yields the five candidates, the
//! third designates the selected one. Each parse gets one repair re-prompt.

mod parse;
mod shorten;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{textbook_options_text, Question, QuestionBank};
use crate::gateway::{parallel_map, Conversation, Gateway, GatewayError, Usage};
use crate::template::{render_prompt, Bindings, TemplateError, TemplateSet};

pub use parse::{
    parse_candidate_list, parse_selection, KcCandidateList, ParseError, SelectionRule, CANDIDATE_COUNT, DEFAULT_SELECTION_THRESHOLD,
};
pub use shorten::{max_words, shorten_label, ShortenOutcome, ShorteningPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Expert,
    Textbook,
}

impl StrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Expert => "expert",
            StrategyKind::Textbook => "textbook",
        }
    }

    fn template(&self, step: usize) -> String {
        format!("{}_{step}", self.as_str())
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "expert" => Ok(StrategyKind::Expert),
            "textbook" => Ok(StrategyKind::Textbook),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("question {question}, prompt {turn}: {source}")]
    Provider {
        question: String,
        turn: usize,
        #[source]
        source: GatewayError,
    },
    #[error("question {question}: candidate list unparseable after repair: {source}")]
    CandidateParse {
        question: String,
        #[source]
        source: ParseError,
    },
    #[error("question {question}: selection unresolvable after repair: {source}")]
    SelectionParse {
        question: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl GenerationError {
    pub fn is_provider(&self) -> bool {
        matches!(self, GenerationError::Provider { .. })
    }
}

/// A re-prompt issued after an unparseable reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairExchange {
    pub step: usize,
    pub rejected_reply: String,
    pub prompt: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub question_id: String,
    pub strategy: StrategyKind,
    /// The three prompts and their accepted replies, in order.
    pub conversation: Conversation,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repairs: Vec<RepairExchange>,
    pub candidates: KcCandidateList,
    pub selected: String,
    pub selection_rule: SelectionRule,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortened: Option<ShortenOutcome>,
}

impl GenerationRecord {
    pub fn to_jsonl(records: &[GenerationRecord]) -> String {
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<GenerationRecord>, serde_json::Error> {
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub templates: TemplateSet,
    pub selection_threshold: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            templates: TemplateSet::builtin(),
            selection_threshold: DEFAULT_SELECTION_THRESHOLD,
        }
    }
}

const CANDIDATE_REPAIR: &str = "Please restate your answer as a numbered list of exactly five items, \
one per line, formatted \"1. ...\" through \"5. ...\", with no other text.";

fn selection_repair(candidates: &KcCandidateList) -> String {
    format!(
        "Please answer with only the number (1-5) of the single most relevant item:\n{}",
        candidates.numbered()
    )
}

struct Chain<'a> {
    question: &'a Question,
    gateway: &'a Gateway,
    usage: Usage,
    log: Conversation,
    repairs: Vec<RepairExchange>,
}

impl Chain<'_> {
    fn ask(&mut self, conv: &Conversation, turn: usize) -> Result<String, GenerationError> {
        let c = self.gateway.complete(conv).map_err(|source| GenerationError::Provider {
            question: self.question.id.clone(),
            turn,
            source,
        })?;
        self.usage = self.usage + c.usage;
        Ok(c.text)
    }

    /// Sends `conv`, parses the reply, and on failure re-prompts once with
    /// `repair`. `conv` is left holding the accepted reply.
    fn ask_parsed<T>(
        &mut self,
        conv: &mut Conversation,
        step: usize,
        repair: &str,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<Result<(String, T), ParseError>, GenerationError> {
        let prompt = conv.last_user().unwrap_or_default().to_string();
        let reply = self.ask(conv, step)?;
        self.log.push_user(prompt);
        if let Ok(v) = parse(&reply) {
            conv.push_assistant(reply.clone());
            self.log.push_assistant(reply.clone());
            return Ok(Ok((reply, v)));
        }
        conv.push_assistant(reply.clone());
        conv.push_user(repair);
        let fixed = self.ask(conv, step)?;
        conv.push_assistant(fixed.clone());
        self.log.push_assistant(fixed.clone());
        self.repairs.push(RepairExchange {
            step,
            rejected_reply: reply,
            prompt: repair.to_string(),
            reply: fixed.clone(),
        });
        Ok(parse(&fixed).map(|v| (fixed, v)))
    }
}

fn base_bindings<'a>(bank_subject: &str, bank_context: &str) -> Bindings<'a> {
    let mut b = Bindings::new();
    b.insert("subject", bank_subject.to_string());
    b.insert("context", bank_context.to_string());
    b
}

/// Runs one strategy's three-prompt chain for `question`.
pub fn run_strategy(
    question: &Question,
    subject: &str,
    context: &str,
    kind: StrategyKind,
    gateway: &Gateway,
    config: &GenerationConfig,
) -> Result<GenerationRecord, GenerationError> {
    let t = &config.templates;
    let mut chain = Chain {
        question,
        gateway,
        usage: Usage::default(),
        log: Conversation::new(),
        repairs: Vec::new(),
    };
    let candidate_err = |source| GenerationError::CandidateParse {
        question: question.id.clone(),
        source,
    };

    let mut b = base_bindings(subject, context);
    b.insert("question_text", question.stem.clone());
    match kind {
        StrategyKind::Expert => b.insert("answer_text", question.correct_option().text.clone()),
        StrategyKind::Textbook => b.insert("options_text", textbook_options_text(question)),
    };
    let first = render_prompt(t.get(&kind.template(1)), &b)?;

    let (candidates, selected_idx, rule) = match kind {
        StrategyKind::Expert => {
            let conv1 = Conversation::single(first.clone());
            chain.log.push_user(first);
            let reasonings = chain.ask(&conv1, 1)?;
            chain.log.push_assistant(reasonings.clone());

            let mut b2 = Bindings::new();
            b2.insert("reasonings", reasonings.clone());
            let mut conv2 = Conversation::single(render_prompt(t.get(&kind.template(2)), &b2)?);
            let (points, candidates) = chain
                .ask_parsed(&mut conv2, 2, CANDIDATE_REPAIR, parse_candidate_list)?
                .map_err(candidate_err)?;

            let mut b3 = Bindings::new();
            b3.insert("reasonings", reasonings);
            b3.insert("points", points);
            let mut conv3 = Conversation::single(render_prompt(t.get(&kind.template(3)), &b3)?);
            let threshold = config.selection_threshold;
            let (_, (idx, rule)) = chain
                .ask_parsed(&mut conv3, 3, &selection_repair(&candidates), |r| {
                    parse_selection(r, &candidates, threshold)
                })?
                .map_err(|source| GenerationError::SelectionParse {
                    question: question.id.clone(),
                    source,
                })?;
            (candidates, idx, rule)
        }
        StrategyKind::Textbook => {
            let mut conv = Conversation::single(first.clone());
            chain.log.push_user(first);
            let topics = chain.ask(&conv, 1)?;
            chain.log.push_assistant(topics.clone());
            conv.push_assistant(topics);

            conv.push_user(render_prompt(t.get(&kind.template(2)), &Bindings::new())?);
            let (_, candidates) = chain
                .ask_parsed(&mut conv, 2, CANDIDATE_REPAIR, parse_candidate_list)?
                .map_err(candidate_err)?;

            conv.push_user(render_prompt(t.get(&kind.template(3)), &Bindings::new())?);
            let threshold = config.selection_threshold;
            let (_, (idx, rule)) = chain
                .ask_parsed(&mut conv, 3, &selection_repair(&candidates), |r| {
                    parse_selection(r, &candidates, threshold)
                })?
                .map_err(|source| GenerationError::SelectionParse {
                    question: question.id.clone(),
                    source,
                })?;
            (candidates, idx, rule)
        }
    };

    Ok(GenerationRecord {
        question_id: question.id.clone(),
        strategy: kind,
        conversation: chain.log,
        repairs: chain.repairs,
        selected: candidates.items()[selected_idx].clone(),
        candidates,
        selection_rule: rule,
        usage: chain.usage,
        shortened: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Provider,
    Parse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub question_id: String,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    pub records: Vec<GenerationRecord>,
    pub failures: Vec<GenerationFailure>,
}

impl BatchOutcome {
    pub fn usage(&self) -> Usage {
        self.records.iter().map(|r| r.usage).sum()
    }
}

/// Runs `kind` over every question of the bank, up to the gateway's
/// concurrency bound at a time. Records and failures keep bank order.
pub fn generate_all(bank: &QuestionBank, kind: StrategyKind, gateway: &Gateway, config: &GenerationConfig) -> BatchOutcome {
    let results = parallel_map(bank.questions(), gateway.concurrency(), |q| {
        run_strategy(q, bank.subject(), bank.context(), kind, gateway, config)
    });
    let mut out = BatchOutcome::default();
    for (q, r) in bank.questions().iter().zip(results) {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(e) => out.failures.push(GenerationFailure {
                question_id: q.id.clone(),
                kind: if e.is_provider() {
                    FailureKind::Provider
                } else {
                    FailureKind::Parse
                },
                message: e.to_string(),
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnswerOption;
    use crate::gateway::{CompletionParams, Rule, ScriptedProvider};

    const LIST: &str = "1. Apply Boyle's law\n2. Calculate gas pressure\n3. Identify isothermal conditions\n4. Convert mL to L\n5. Interpret piston diagrams";

    fn question() -> Question {
        Question {
            id: "q1".into(),
            stem: "What is the new pressure of the argon sample?".into(),
            options: vec![
                AnswerOption {
                    text: "2.26 atm".into(),
                    is_correct: false,
                },
                AnswerOption {
                    text: "1.02 atm".into(),
                    is_correct: true,
                },
            ],
            gold_kc_id: None,
        }
    }

    fn gateway(rules: Vec<Rule>) -> Gateway {
        Gateway::new(ScriptedProvider::new(rules), CompletionParams::default())
    }

    #[test]
    fn expert_chain_binds_prior_replies() {
        let gw = gateway(vec![
            Rule::contains("Simulate three experts", ["REASONING TEXT"]),
            Rule::contains("reword these five points", [LIST]),
            Rule::contains("Of these five points", ["I pick point 3."]),
        ]);
        let rec = run_strategy(
            &question(),
            "Chemistry",
            "undergraduate",
            StrategyKind::Expert,
            &gw,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(rec.candidates.items().len(), 5);
        assert_eq!(rec.selected, "Identify isothermal conditions");
        assert_eq!(rec.conversation.turns.len(), 6);
        assert!(rec.conversation.turns[0].content.contains("Correct answer: 1.02 atm"));
        assert!(!rec.conversation.turns[0].content.contains("2.26"));
        assert!(rec.conversation.turns[2].content.ends_with("Reasonings: REASONING TEXT"));
        assert!(rec.conversation.turns[4].content.contains(&format!("Five points: {LIST}")));
        assert_eq!(gw.request_count(), 3);
        assert_eq!(rec.usage, gw.total_usage());
    }

    #[test]
    fn textbook_chain_keeps_running_conversation() {
        let gw = gateway(vec![Rule::respond(|c| {
            let n = c.turns.len();
            Some(match n {
                1 => "topics...".to_string(),
                3 => LIST.to_string(),
                5 => "Apply Boyle's law".to_string(),
                _ => return None,
            })
        })]);
        let rec = run_strategy(
            &question(),
            "Chemistry",
            "undergraduate",
            StrategyKind::Textbook,
            &gw,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(rec.selected, "Apply Boyle's law");
        assert_eq!(rec.selection_rule, SelectionRule::Substring);
        assert!(rec.conversation.turns[0].content.contains("A) 1.02 atm\nB) 2.26 atm"));
        assert!(rec.conversation.turns[2].content.starts_with("Based on these topics"));
    }

    #[test]
    fn short_list_fails_after_one_repair() {
        let gw = gateway(vec![Rule::contains("Simulate", ["r"]), Rule::any(["1. a\n2. b\n3. c\n4. d"])]);
        let err = run_strategy(&question(), "S", "c", StrategyKind::Expert, &gw, &Default::default()).unwrap_err();
        assert!(
            matches!(
                err,
                GenerationError::CandidateParse {
                    source: ParseError::WrongCount(4),
                    ..
                }
            ),
            "{err}"
        );
        assert_eq!(gw.request_count(), 3);
    }

    #[test]
    fn repair_recovers_selection() {
        let gw = gateway(vec![
            Rule::contains("Simulate", ["r"]),
            Rule::contains("reword", [LIST]),
            Rule::contains("Please answer with only the number", ["5"]),
            Rule::contains("Of these five points", ["hmm, hard to say"]),
        ]);
        let rec = run_strategy(&question(), "S", "c", StrategyKind::Expert, &gw, &Default::default()).unwrap();
        assert_eq!(rec.selected, "Interpret piston diagrams");
        assert_eq!(rec.repairs.len(), 1);
        assert_eq!(rec.repairs[0].step, 3);
        // The log keeps three request/reply pairs.
        assert_eq!(rec.conversation.turns.len(), 6);
    }

    #[test]
    fn provider_errors_carry_turn_index() {
        let gw = gateway(vec![Rule::contains("Simulate", ["r"])]);
        let err = run_strategy(&question(), "S", "c", StrategyKind::Expert, &gw, &Default::default()).unwrap_err();
        assert!(matches!(err, GenerationError::Provider { turn: 2, .. }), "{err}");
    }

    #[test]
    fn records_round_trip_jsonl() {
        let gw = gateway(vec![
            Rule::contains("Simulate", ["r"]),
            Rule::contains("reword", [LIST]),
            Rule::contains("Of these", ["point 1"]),
        ]);
        let rec = run_strategy(&question(), "S", "c", StrategyKind::Expert, &gw, &Default::default()).unwrap();
        let text = GenerationRecord::to_jsonl(std::slice::from_ref(&rec));
        assert_eq!(GenerationRecord::from_jsonl(&text).unwrap(), vec![rec]);
    }
}
