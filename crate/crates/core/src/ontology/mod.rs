//! Iterative induction of a KC ontology: groups of questions are split by
//! LLM-proposed learning objectives until the partition stops changing.

mod export;
mod metrics;
mod parse;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Question, QuestionBank};
use crate::gateway::{parallel_map, Conversation, Gateway, GatewayError, Usage};
use crate::template::{render_prompt, Bindings, TemplateError, TemplateSet};

pub use export::{export_tree, ExportNode, LevelScore, OntologyExport};
pub use metrics::{grouping_accuracy, grouping_refinement, groupings_equal, score_grouping, GroupingScore};
pub use parse::{parse_group_blocks, parse_objective_choice, OntologyParseError, ParsedGroups};

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Parse(#[from] OntologyParseError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("group must hold at least two questions to be split, got {0}")]
    GroupTooSmall(usize),
    #[error("unknown question {0}")]
    UnknownQuestion(String),
    #[error("question {0} has no assigned objective")]
    Unassigned(String),
    #[error("grouping does not cover the benchmark's questions exactly once")]
    QuestionSetMismatch,
    #[error("bank has no questions")]
    Empty,
    #[error("iteration {iteration}, group starting {group}: {source}")]
    AtGroup {
        iteration: usize,
        group: String,
        #[source]
        source: Box<OntologyError>,
    },
}

impl OntologyError {
    pub fn is_provider(&self) -> bool {
        match self {
            OntologyError::Provider(_) => true,
            OntologyError::AtGroup { source, .. } => source.is_provider(),
            _ => false,
        }
    }

    pub fn is_parse(&self) -> bool {
        match self {
            OntologyError::Parse(_) => true,
            OntologyError::AtGroup { source, .. } => source.is_parse(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningObjective {
    pub index: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionGroup {
    pub question_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<LearningObjective>,
}

impl QuestionGroup {
    pub fn root(bank: &QuestionBank) -> Self {
        Self {
            question_ids: bank.questions().iter().map(|q| q.id.clone()).collect(),
            objective: None,
        }
    }

    pub fn len(&self) -> usize {
        self.question_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.question_ids.is_empty()
    }

    fn first_id(&self) -> String {
        self.question_ids.iter().min().cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub level: usize,
    pub groups: Vec<QuestionGroup>,
}

impl Grouping {
    /// The partition as a set of question-id sets.
    pub fn partition(&self) -> BTreeSet<BTreeSet<&str>> {
        self.groups
            .iter()
            .map(|g| g.question_ids.iter().map(String::as_str).collect())
            .collect()
    }

    /// True when groups are non-empty, pairwise disjoint and cover `ids`.
    pub fn is_partition_of<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> bool {
        let expected: BTreeSet<&str> = ids.into_iter().collect();
        let listed: Vec<&str> = self.groups.iter().flat_map(|g| g.question_ids.iter().map(String::as_str)).collect();
        let set: BTreeSet<&str> = listed.iter().copied().collect();
        self.groups.iter().all(|g| !g.is_empty()) && set.len() == listed.len() && set == expected
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyNode {
    pub group: QuestionGroup,
    pub children: Vec<OntologyNode>,
}

impl OntologyNode {
    pub fn leaf_count(&self) -> usize {
        if self.children.is_empty() {
            1
        } else {
            self.children.iter().map(OntologyNode::leaf_count).sum()
        }
    }
}

#[derive(Debug, Clone)]
pub struct InductionConfig {
    pub max_iterations: usize,
    pub templates: TemplateSet,
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            templates: TemplateSet::builtin(),
        }
    }
}

/// Question labels in prompts are per-group positions `Q1..Qn`.
pub fn render_question_list(questions: &[&Question]) -> String {
    questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("Q{}: {}\nAnswer: {}", i + 1, q.stem.trim(), q.correct_option().text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn render_objectives(objectives: &[LearningObjective]) -> String {
    objectives
        .iter()
        .map(|o| format!("{}. {}", o.index, o.label))
        .collect::<Vec<_>>()
        .join("\n")
}

fn group_questions<'a>(group: &QuestionGroup, bank: &'a QuestionBank) -> Result<Vec<&'a Question>, OntologyError> {
    group
        .question_ids
        .iter()
        .map(|id| bank.question(id).ok_or_else(|| OntologyError::UnknownQuestion(id.clone())))
        .collect()
}

const DETERMINE_REPAIR: &str = "Your reply did not follow the required output format. Answer again using only \
lines of the form \"Group i name: [learning objective]\" and \"Group i questions: [Qa, Qb, ...]\".";

fn classify_repair(n: usize) -> String {
    format!(
        "Reply again with a single objective number between 1 and {n}, using the output format \
\"Most relevant Objective: [OBJECTIVE NUMBER]\"."
    )
}

/// Sends `conv`, parses the reply and on failure re-prompts once.
fn ask_with_repair<T>(
    gateway: &Gateway,
    mut conv: Conversation,
    repair: &str,
    parse: impl Fn(&str) -> Result<T, OntologyParseError>,
) -> Result<(T, Usage), OntologyError> {
    let first = gateway.complete(&conv)?;
    let mut usage = first.usage;
    match parse(&first.text) {
        Ok(v) => Ok((v, usage)),
        Err(e) => {
            log::debug!("unparseable reply ({e}); re-prompting");
            conv.push_assistant(first.text);
            conv.push_user(repair);
            let second = gateway.complete(&conv)?;
            usage = usage + second.usage;
            Ok((parse(&second.text)?, usage))
        }
    }
}

/// Objectives proposed for a group and the assignment they came with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Determination {
    pub objectives: Vec<LearningObjective>,
    /// Questions listed under exactly one objective.
    pub assignment: BTreeMap<String, usize>,
    pub omitted: Vec<String>,
    pub duplicated: Vec<String>,
    /// Labels beyond the group's size.
    pub unknown_labels: Vec<usize>,
    pub usage: Usage,
}

impl Determination {
    pub fn is_defective(&self) -> bool {
        !(self.omitted.is_empty() && self.duplicated.is_empty() && self.unknown_labels.is_empty())
    }
}

pub fn determine_objectives(
    group: &QuestionGroup,
    bank: &QuestionBank,
    gateway: &Gateway,
    templates: &TemplateSet,
) -> Result<Determination, OntologyError> {
    if group.len() < 2 {
        return Err(OntologyError::GroupTooSmall(group.len()));
    }
    let questions = group_questions(group, bank)?;
    let mut b = Bindings::new();
    b.insert("subject", bank.subject().to_string());
    b.insert("context", bank.context().to_string());
    b.insert("question_list", render_question_list(&questions));
    let prompt = render_prompt(templates.get("ontology_determine"), &b)?;
    let n = questions.len();
    let (parsed, usage) = ask_with_repair(gateway, Conversation::single(prompt), DETERMINE_REPAIR, |r| {
        parse_group_blocks(r, n)
    })?;

    let id = |label: usize| questions[label - 1].id.clone();
    let objectives = parsed
        .objectives
        .iter()
        .enumerate()
        .map(|(i, label)| LearningObjective {
            index: i + 1,
            label: label.clone(),
        })
        .collect();
    let assignment = parsed
        .listed
        .iter()
        .filter(|(_, g)| g.len() == 1)
        .map(|(q, g)| (id(*q), g[0]))
        .collect();
    Ok(Determination {
        objectives,
        assignment,
        omitted: parsed.omitted(n).into_iter().map(id).collect(),
        duplicated: parsed.duplicated().into_iter().map(id).collect(),
        unknown_labels: parsed.unknown,
        usage,
    })
}

/// Asks which objective best fits `question`; returns its 1-based index.
pub fn classify_question(
    question: &Question,
    objectives: &[LearningObjective],
    bank: &QuestionBank,
    gateway: &Gateway,
    templates: &TemplateSet,
) -> Result<(usize, Usage), OntologyError> {
    assert!(!objectives.is_empty(), "classification needs at least one objective");
    let mut b = Bindings::new();
    b.insert("subject", bank.subject().to_string());
    b.insert(
        "question",
        format!("{}\nAnswer: {}", question.stem.trim(), question.correct_option().text.trim()),
    );
    b.insert("objectives", render_objectives(objectives));
    let prompt = render_prompt(templates.get("ontology_classify"), &b)?;
    let n = objectives.len();
    ask_with_repair(gateway, Conversation::single(prompt), &classify_repair(n), |r| {
        parse_objective_choice(r, n)
    })
}

/// One child per objective that received a question, in objective order.
pub fn partition_group(
    group: &QuestionGroup,
    objectives: &[LearningObjective],
    assignment: &BTreeMap<String, usize>,
) -> Result<Vec<QuestionGroup>, OntologyError> {
    let mut buckets: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for q in &group.question_ids {
        let idx = *assignment.get(q).ok_or_else(|| OntologyError::Unassigned(q.clone()))?;
        buckets.entry(idx).or_default().push(q.clone());
    }
    Ok(buckets
        .into_iter()
        .map(|(idx, question_ids)| QuestionGroup {
            question_ids,
            objective: objectives.iter().find(|o| o.index == idx).cloned(),
        })
        .collect())
}

struct Refinement {
    children: Vec<QuestionGroup>,
    repaired: bool,
    usage: Usage,
}

fn refine_group(
    group: &QuestionGroup,
    bank: &QuestionBank,
    gateway: &Gateway,
    templates: &TemplateSet,
) -> Result<Refinement, OntologyError> {
    let det = determine_objectives(group, bank, gateway, templates)?;
    let mut usage = det.usage;
    let repaired = det.is_defective();
    let assignment = if repaired {
        log::info!(
            "group starting {}: {} omitted, {} duplicated; classifying every question",
            group.first_id(),
            det.omitted.len(),
            det.duplicated.len()
        );
        let questions = group_questions(group, bank)?;
        let results = parallel_map(&questions, gateway.concurrency(), |q| {
            classify_question(q, &det.objectives, bank, gateway, templates)
        });
        let mut assignment = BTreeMap::new();
        for (q, r) in questions.iter().zip(results) {
            let (idx, u) = r?;
            usage = usage + u;
            assignment.insert(q.id.clone(), idx);
        }
        assignment
    } else {
        det.assignment
    };
    Ok(Refinement {
        children: partition_group(group, &det.objectives, &assignment)?,
        repaired,
        usage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionResult {
    pub tree: OntologyNode,
    /// Level 1 is the root grouping.
    pub levels: Vec<Grouping>,
    pub converged: bool,
    /// Refinement passes performed.
    pub iterations: usize,
    /// Groups whose proposed assignment needed classification repair.
    pub classification_repairs: usize,
    pub usage: Usage,
}

impl InductionResult {
    pub fn final_grouping(&self) -> &Grouping {
        self.levels.last().expect("at least the root level")
    }
}

struct Arena {
    groups: Vec<QuestionGroup>,
    children: Vec<Vec<usize>>,
    terminal: Vec<bool>,
}

impl Arena {
    fn add(&mut self, group: QuestionGroup) -> usize {
        self.terminal.push(group.len() <= 1);
        self.groups.push(group);
        self.children.push(Vec::new());
        self.groups.len() - 1
    }

    fn build(&self, i: usize) -> OntologyNode {
        OntologyNode {
            group: self.groups[i].clone(),
            children: self.children[i].iter().map(|&c| self.build(c)).collect(),
        }
    }
}

/// Refines the whole bank until the grouping reaches a fixed point or
/// `max_iterations` passes have run. Singleton groups and groups whose
/// refinement yields a single child are not split further.
pub fn induce_ontology(bank: &QuestionBank, gateway: &Gateway, config: &InductionConfig) -> Result<InductionResult, OntologyError> {
    assert!(config.max_iterations >= 1, "max_iterations must be at least 1");
    if bank.questions().is_empty() {
        return Err(OntologyError::Empty);
    }
    let mut arena = Arena {
        groups: Vec::new(),
        children: Vec::new(),
        terminal: Vec::new(),
    };
    let root = arena.add(QuestionGroup::root(bank));
    let mut frontier = vec![root];
    let mut levels = vec![Grouping {
        level: 1,
        groups: vec![arena.groups[root].clone()],
    }];
    let (mut usage, mut repairs) = (Usage::default(), 0);
    let mut converged = false;
    let mut iterations = 0;

    if arena.terminal[root] {
        converged = true;
    }
    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let open: Vec<usize> = frontier.iter().copied().filter(|&i| !arena.terminal[i]).collect();
        let outcomes = parallel_map(&open, gateway.concurrency(), |&i| {
            refine_group(&arena.groups[i], bank, gateway, &config.templates)
        });
        for (&i, outcome) in open.iter().zip(outcomes) {
            let r = outcome.map_err(|e| OntologyError::AtGroup {
                iteration: iterations,
                group: arena.groups[i].first_id(),
                source: Box::new(e),
            })?;
            usage = usage + r.usage;
            repairs += usize::from(r.repaired);
            if r.children.len() == 1 {
                arena.terminal[i] = true;
                continue;
            }
            for child in r.children {
                let c = arena.add(child);
                arena.children[i].push(c);
            }
        }
        frontier = frontier
            .iter()
            .flat_map(|&i| {
                if arena.children[i].is_empty() {
                    vec![i]
                } else {
                    arena.children[i].clone()
                }
            })
            .collect();
        let next = Grouping {
            level: levels.len() + 1,
            groups: frontier.iter().map(|&i| arena.groups[i].clone()).collect(),
        };
        converged = groupings_equal(&next, levels.last().expect("root level"));
        levels.push(next);
    }
    if !converged {
        log::warn!("no fixed point after {iterations} iterations");
    }
    Ok(InductionResult {
        tree: arena.build(root),
        levels,
        converged,
        iterations,
        classification_repairs: repairs,
        usage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_fixture;
    use crate::gateway::{CompletionParams, Rule, ScriptedProvider};

    fn group(ids: &[&str]) -> QuestionGroup {
        QuestionGroup {
            question_ids: ids.iter().map(|s| s.to_string()).collect(),
            objective: None,
        }
    }

    fn objectives(n: usize) -> Vec<LearningObjective> {
        (1..=n)
            .map(|i| LearningObjective {
                index: i,
                label: format!("o{i}"),
            })
            .collect()
    }

    fn assign(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(q, i)| (q.to_string(), *i)).collect()
    }

    #[test]
    fn partition_examples() {
        let g = group(&["a", "b", "c", "d"]);
        let parts = partition_group(&g, &objectives(2), &assign(&[("a", 1), ("b", 1), ("c", 2), ("d", 2)])).unwrap();
        assert_eq!(parts.iter().map(QuestionGroup::len).collect::<Vec<_>>(), vec![2, 2]);
        let one = partition_group(&g, &objectives(3), &assign(&[("a", 1), ("b", 1), ("c", 1), ("d", 1)])).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].question_ids, g.question_ids);
        let g3 = group(&["a", "b", "c"]);
        let full = partition_group(&g3, &objectives(3), &assign(&[("a", 1), ("b", 2), ("c", 3)])).unwrap();
        assert!(full.iter().all(|p| p.len() == 1));
        assert!(matches!(
            partition_group(&g3, &objectives(1), &assign(&[("a", 1)])),
            Err(OntologyError::Unassigned(_))
        ));
    }

    #[test]
    fn grouping_equality_ignores_order_and_labels() {
        let a = Grouping {
            level: 1,
            groups: vec![group(&["a", "b"]), group(&["c"])],
        };
        let mut b = Grouping {
            level: 2,
            groups: vec![group(&["c"]), group(&["b", "a"])],
        };
        b.groups[0].objective = Some(LearningObjective {
            index: 1,
            label: "x".into(),
        });
        assert!(groupings_equal(&a, &b));
        let c = Grouping {
            level: 1,
            groups: vec![group(&["a"]), group(&["b", "c"])],
        };
        assert!(!groupings_equal(&a, &c));
    }

    #[test]
    fn determine_reports_defects() {
        let bench = synth_fixture(9, 2).unwrap();
        let bank = bench.bank();
        let gw = Gateway::new(
            ScriptedProvider::new(vec![Rule::any([
                "Group 1 name: Gas laws\nGroup 1 questions: [Q1, Q2]\nGroup 2 name: Salts\nGroup 2 questions: [Q2, Q4]",
            ])]),
            CompletionParams::default(),
        );
        let d = determine_objectives(&QuestionGroup::root(bank), bank, &gw, &TemplateSet::builtin()).unwrap();
        let ids: Vec<&str> = bank.questions().iter().map(|q| q.id.as_str()).collect();
        assert_eq!(d.objectives.len(), 2);
        assert_eq!(d.omitted, vec![ids[2].to_string()]);
        assert_eq!(d.duplicated, vec![ids[1].to_string()]);
        assert!(d.is_defective());
        assert_eq!(d.assignment.len(), 2);
    }

    #[test]
    fn determine_repairs_unreadable_reply_once() {
        let bench = synth_fixture(9, 1).unwrap();
        let p = std::sync::Arc::new(ScriptedProvider::new(vec![
            Rule::contains("did not follow", ["Group 1 name: X\nGroup 1 questions: [Q1, Q2]"]),
            Rule::any(["These all concern one idea."]),
        ]));
        let gw = Gateway::new(p.clone(), CompletionParams::default());
        let d = determine_objectives(&QuestionGroup::root(bench.bank()), bench.bank(), &gw, &TemplateSet::builtin()).unwrap();
        assert!(!d.is_defective());
        assert_eq!(p.requests().len(), 2);

        let gw = Gateway::new(
            ScriptedProvider::new(vec![Rule::any(["nothing useful"])]),
            CompletionParams::default(),
        );
        let e = determine_objectives(&QuestionGroup::root(bench.bank()), bench.bank(), &gw, &TemplateSet::builtin()).unwrap_err();
        assert!(e.is_parse());
    }

    #[test]
    fn singleton_bank_returns_immediately() {
        let bank = crate::corpus::load_bank(
            r#"{"subject":"Chemistry","context":"undergraduate","questions":[{"id":"q1","stem":"s","options":[{"text":"a","is_correct":true},{"text":"b","is_correct":false}]}],"kcs":[]}"#
                .as_bytes(),
        )
        .unwrap();
        let gw = Gateway::new(ScriptedProvider::new(vec![]), CompletionParams::default());
        let r = induce_ontology(&bank, &gw, &InductionConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!((r.iterations, r.levels.len(), r.tree.leaf_count()), (0, 1, 1));
        assert_eq!(gw.request_count(), 0);
    }

    #[test]
    fn one_objective_reaches_fixed_point_at_level_two() {
        let bench = synth_fixture(3, 4).unwrap();
        let gw = Gateway::new(
            ScriptedProvider::new(vec![Rule::contains(
                "sorts the questions",
                ["Group 1 name: Everything\nGroup 1 questions: [Q1, Q2, Q3, Q4, Q5, Q6, Q7, Q8]"],
            )]),
            CompletionParams::default(),
        );
        let r = induce_ontology(bench.bank(), &gw, &InductionConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.levels.len(), 2);
        assert!(groupings_equal(&r.levels[0], &r.levels[1]));
        assert!(r.tree.children.is_empty());
    }
}
