//! Built-in scripted provider profiles for offline runs and tests.
//!
//! Each profile recognizes the built-in prompt templates by their opening
//! words and answers in the format the pipeline expects.

use std::sync::{Arc, LazyLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use crate::corpus::QuestionBank;
use crate::gateway::{Conversation, Rule, ScriptedProvider};
use crate::text::{jaccard, normalize_label};

pub const BUILTIN_NAMES: &[&str] = &["gold", "adversarial", "single-objective", "random"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Prompt {
    ExpertPanel,
    ExpertReword,
    ExpertSelect,
    TextbookTopics,
    TextbookReword,
    TextbookSelect,
    ListRepair,
    SelectRepair,
    Determine,
    DetermineRepair,
    Classify,
    ClassifyRepair,
    Shorten,
    ShortenRetry,
    Judge,
}

fn classify_prompt(text: &str) -> Option<Prompt> {
    const PREFIXES: &[(&str, Prompt)] = &[
        ("Simulate three experts", Prompt::ExpertPanel),
        ("Based on the reasoning from these three experts", Prompt::ExpertReword),
        ("Reasonings:", Prompt::ExpertSelect),
        ("Below there is a multiple-choice question", Prompt::TextbookTopics),
        ("Based on these topics", Prompt::TextbookReword),
        ("Of these topics", Prompt::TextbookSelect),
        ("Please restate your answer as a numbered list", Prompt::ListRepair),
        ("Please answer with only the number", Prompt::SelectRepair),
        ("Below there is a list of questions", Prompt::Determine),
        ("Your reply did not follow the required output format", Prompt::DetermineRepair),
        ("Below there is a question, its answer", Prompt::Classify),
        ("Reply again with a single objective number", Prompt::ClassifyRepair),
        ("Rephrase the following knowledge component label", Prompt::Shorten),
        ("That rephrasing has", Prompt::ShortenRetry),
        ("Do the following two knowledge component labels", Prompt::Judge),
    ];
    let t = text.trim_start();
    PREFIXES.iter().find(|(p, _)| t.starts_with(p)).map(|(_, k)| *k)
}

fn stable_hash(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

struct Entry {
    id: String,
    stem: String,
    kc: String,
    gold: String,
}

/// Questions of a bank, longest stem first so that containment picks the
/// most specific match.
struct Index {
    subject: String,
    entries: Vec<Entry>,
}

impl Index {
    fn new(bank: &QuestionBank) -> Self {
        let mut entries: Vec<Entry> = bank
            .questions()
            .iter()
            .filter_map(|q| {
                let kc = q.gold_kc_id.clone()?;
                let gold = bank.gold_label(&q.id)?.to_string();
                Some(Entry {
                    id: q.id.clone(),
                    stem: q.stem.trim().to_string(),
                    kc,
                    gold,
                })
            })
            .collect();
        entries.sort_by(|a, b| b.stem.len().cmp(&a.stem.len()).then_with(|| a.id.cmp(&b.id)));
        Self {
            subject: bank.subject().to_string(),
            entries,
        }
    }

    fn find(&self, text: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| text.contains(e.stem.as_str()))
    }

    fn by_stem(&self, stem: &str) -> Option<&Entry> {
        let stem = stem.trim();
        self.entries.iter().find(|e| e.stem == stem)
    }
}

fn user_turns(conv: &Conversation) -> impl Iterator<Item = &str> {
    conv.turns
        .iter()
        .filter(|t| t.role == crate::gateway::Role::User)
        .map(|t| t.content.as_str())
}

/// The prompt that opened the current exchange, skipping repair turns.
fn base_prompt(conv: &Conversation) -> Option<(Prompt, &str)> {
    user_turns(conv)
        .filter_map(|t| classify_prompt(t).map(|k| (k, t)))
        .filter(|(k, _)| {
            !matches!(
                k,
                Prompt::ListRepair | Prompt::SelectRepair | Prompt::DetermineRepair | Prompt::ClassifyRepair | Prompt::ShortenRetry
            )
        })
        .last()
}

// ---------------------------------------------------------------------------
// Generation chains

/// Where a question's gold label lands in the candidate list and which item
/// is picked. Deterministic per question and strategy.
struct Plan {
    candidates: Vec<String>,
    pick: usize,
}

fn plan(entry: &Entry, subject: &str, strategy: &str) -> Plan {
    let h = stable_hash(&[&entry.id, strategy]);
    let fillers = [
        format!("Recall core terminology used in {subject}"),
        "Interpret the information given in the question stem".to_string(),
        "Eliminate implausible answer choices".to_string(),
        format!("Apply prior {subject} knowledge to a new situation"),
        format!("Connect related concepts across {subject} topics"),
    ];
    let slot = (h % 5) as usize;
    let mut candidates: Vec<String> = fillers.to_vec();
    let pick = match (h >> 8) % 6 {
        // the gold label is not among the candidates
        0 => 0,
        // gold present, another item selected
        1 => {
            candidates[slot] = entry.gold.clone();
            (slot + 1) % 5
        }
        _ => {
            candidates[slot] = entry.gold.clone();
            slot
        }
    };
    Plan { candidates, pick }
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn expert_panel(entry: &Entry) -> String {
    format!(
        "Expert 1: The question \"{}\" asks the student to reason about a single idea.\n\
Expert 2: I agree, and the distractors test related misconceptions.\n\
Expert 3: Building on that, the correct answer requires the core skill plus careful reading.\n\
Conclusion: the experts agree on five knowledge components.",
        entry.stem
    )
}

fn generation_reply(index: &Index, conv: &Conversation) -> Option<String> {
    let last = conv.last_user()?;
    let (kind, base) = base_prompt(conv)?;
    let strategy = match kind {
        Prompt::ExpertPanel | Prompt::ExpertReword | Prompt::ExpertSelect => "expert",
        Prompt::TextbookTopics | Prompt::TextbookReword | Prompt::TextbookSelect => "textbook",
        _ => return None,
    };
    let opening = user_turns(conv).next().unwrap_or(base);
    let entry = index.find(opening).or_else(|| index.find(base))?;
    let plan = plan(entry, &index.subject, strategy);
    let reply = match (classify_prompt(last)?, kind) {
        (Prompt::ExpertPanel, _) => expert_panel(entry),
        (Prompt::TextbookTopics, _) => {
            let topics: Vec<String> = plan.candidates.iter().map(|c| format!("- {}", c.to_lowercase())).collect();
            format!("A textbook page with this question would cover:\n{}", topics.join("\n"))
        }
        (Prompt::ExpertReword | Prompt::TextbookReword | Prompt::ListRepair, _) => numbered(&plan.candidates),
        (Prompt::ExpertSelect, _) => format!("Point {} is the most relevant to the question.", plan.pick + 1),
        (Prompt::TextbookSelect, _) => format!("Topic {} is the most relevant to the question.", plan.pick + 1),
        (Prompt::SelectRepair, _) => (plan.pick + 1).to_string(),
        _ => return None,
    };
    Some(reply)
}

// ---------------------------------------------------------------------------
// Ontology prompts

static Q_ITEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?ms)^Q(\d+): (.*?)\nAnswer:").unwrap());
static OBJECTIVE_ITEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^(\d+)\. (.+)$").unwrap());
static CLASSIFY_STEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)Question: (.*?)\nAnswer:").unwrap());

const COMBINED: &str = "Combined: ";

fn listed_questions(prompt: &str) -> Vec<(usize, String)> {
    Q_ITEM
        .captures_iter(prompt)
        .filter_map(|c| Some((c[1].parse().ok()?, c[2].to_string())))
        .collect()
}

fn objective_label(labels: &[&str]) -> String {
    match labels {
        [one] => one.to_string(),
        many => format!("{COMBINED}{}", many.join(" | ")),
    }
}

fn objective_covers(label: &str, gold: &str) -> bool {
    match label.strip_prefix(COMBINED) {
        Some(rest) => rest.split(" | ").any(|l| l == gold),
        None => label == gold,
    }
}

/// Gold-following proposal: groups of more than two KCs are halved, two KCs
/// are separated, and a single KC stays whole.
fn gold_groups(index: &Index, prompt: &str) -> Option<Vec<(String, Vec<usize>)>> {
    let listed = listed_questions(prompt);
    let mut kcs: Vec<(&str, &str)> = Vec::new();
    let mut members: Vec<(usize, &str)> = Vec::new();
    for (label, stem) in &listed {
        let e = index.by_stem(stem)?;
        if !kcs.iter().any(|(k, _)| *k == e.kc) {
            kcs.push((&e.kc, &e.gold));
        }
        members.push((*label, &e.kc));
    }
    kcs.sort();
    let parts: Vec<&[(&str, &str)]> = if kcs.len() > 2 {
        let (a, b) = kcs.split_at(kcs.len().div_ceil(2));
        vec![a, b]
    } else {
        kcs.chunks(1).collect()
    };
    Some(
        parts
            .into_iter()
            .map(|part| {
                let labels: Vec<&str> = part.iter().map(|(_, l)| *l).collect();
                let qs = members
                    .iter()
                    .filter(|(_, k)| part.iter().any(|(pk, _)| pk == k))
                    .map(|(q, _)| *q)
                    .collect();
                (objective_label(&labels), qs)
            })
            .collect(),
    )
}

fn render_groups(groups: &[(String, Vec<usize>)]) -> String {
    groups
        .iter()
        .enumerate()
        .map(|(i, (name, qs))| {
            let qs: Vec<String> = qs.iter().map(|q| format!("Q{q}")).collect();
            format!("Group {n} name: {name}\nGroup {n} questions: [{}]", qs.join(", "), n = i + 1)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Drops the last listed question and lists the first one twice.
fn corrupt(mut groups: Vec<(String, Vec<usize>)>) -> Vec<(String, Vec<usize>)> {
    let first = groups.first().and_then(|g| g.1.first().copied());
    if let Some(last) = groups.iter_mut().rev().find(|g| !g.1.is_empty()) {
        last.1.pop();
    }
    if let (Some(q), Some(g)) = (first, groups.last_mut()) {
        g.1.push(q);
    }
    groups
}

fn gold_classification(index: &Index, prompt: &str) -> Option<String> {
    let stem = CLASSIFY_STEM.captures(prompt)?.get(1)?.as_str().to_string();
    let entry = index.by_stem(&stem)?;
    let choice = OBJECTIVE_ITEM
        .captures_iter(prompt)
        .find(|c| objective_covers(c[2].trim(), &entry.gold))
        .map(|c| c[1].to_string())
        .unwrap_or_else(|| "1".to_string());
    Some(format!("Most relevant Objective: [{choice}]"))
}

fn ontology_reply(index: &Index, conv: &Conversation, adversarial: bool) -> Option<String> {
    let (kind, base) = base_prompt(conv)?;
    match kind {
        Prompt::Determine => {
            let groups = gold_groups(index, base)?;
            Some(render_groups(&if adversarial { corrupt(groups) } else { groups }))
        }
        Prompt::Classify => gold_classification(index, base),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Auxiliary prompts

static SHORTEN_ARGS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)at most (\d+) words.*\nLabel: (.+)$").unwrap());
static JUDGE_ARGS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"Label 1: (.+)\nLabel 2: (.+)").unwrap());

fn auxiliary_reply(conv: &Conversation) -> Option<String> {
    let (kind, base) = base_prompt(conv)?;
    match kind {
        Prompt::Shorten => {
            let c = SHORTEN_ARGS.captures(base.trim_end())?;
            let limit: usize = c[1].parse().ok()?;
            Some(c[2].split_whitespace().take(limit.max(1)).collect::<Vec<_>>().join(" "))
        }
        Prompt::Judge => {
            let c = JUDGE_ARGS.captures(base)?;
            let same = normalize_label(&c[1]) == normalize_label(&c[2]) || jaccard(&c[1], &c[2]) >= 0.5;
            Some(if same { "Yes" } else { "No" }.to_string())
        }
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Profiles

/// Answers every built-in prompt by following the bank's gold KCs. A fixed,
/// hash-selected subset of questions is answered imperfectly during
/// generation so that match metrics are not saturated.
pub fn gold_following(bank: &QuestionBank) -> ScriptedProvider {
    let index = Arc::new(Index::new(bank));
    ScriptedProvider::new(vec![Rule::respond(move |conv| {
        generation_reply(&index, conv)
            .or_else(|| ontology_reply(&index, conv, false))
            .or_else(|| auxiliary_reply(conv))
    })])
}

/// Like [`gold_following`], but every objective proposal omits one question
/// and lists another twice. Classification answers are correct.
pub fn adversarial(bank: &QuestionBank) -> ScriptedProvider {
    let index = Arc::new(Index::new(bank));
    ScriptedProvider::new(vec![Rule::respond(move |conv| {
        ontology_reply(&index, conv, true)
            .or_else(|| generation_reply(&index, conv))
            .or_else(|| auxiliary_reply(conv))
    })])
}

/// Proposes one objective covering every question.
pub fn single_objective(bank: &QuestionBank) -> ScriptedProvider {
    let subject = bank.subject().to_string();
    ScriptedProvider::new(vec![Rule::respond(move |conv| {
        let (kind, base) = base_prompt(conv)?;
        match kind {
            Prompt::Determine => {
                let qs: Vec<usize> = listed_questions(base).into_iter().map(|(q, _)| q).collect();
                Some(render_groups(&[(format!("Core {subject} knowledge"), qs)]))
            }
            Prompt::Classify => Some("Most relevant Objective: [1]".to_string()),
            _ => auxiliary_reply(conv),
        }
    })])
}

/// Random objective proposals with occasional omissions and duplicates, and
/// random classifications. Replies depend only on `seed` and the prompt.
pub fn randomized(seed: u64) -> ScriptedProvider {
    let seed_text = seed.to_string();
    ScriptedProvider::new(vec![Rule::respond(move |conv| {
        let (kind, base) = base_prompt(conv)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&seed_text, base]));
        match kind {
            Prompt::Determine => {
                let qs: Vec<usize> = listed_questions(base).into_iter().map(|(q, _)| q).collect();
                let m = rng.gen_range(1..=qs.len().clamp(1, 3));
                let mut groups: Vec<(String, Vec<usize>)> = (1..=m)
                    .map(|j| (format!("Objective {j} ({:04x})", rng.gen::<u16>()), Vec::new()))
                    .collect();
                for &q in &qs {
                    groups[rng.gen_range(0..m)].1.push(q);
                }
                if rng.gen_bool(0.25) {
                    groups = corrupt(groups);
                }
                groups.shuffle(&mut rng);
                Some(render_groups(&groups))
            }
            Prompt::Classify => {
                let n = OBJECTIVE_ITEM.captures_iter(base).count().max(1);
                Some(format!("Most relevant Objective: [{}]", rng.gen_range(1..=n)))
            }
            _ => auxiliary_reply(conv),
        }
    })])
}

/// Resolves a `builtin:<name>` profile for `bank`.
pub fn builtin(name: &str, bank: &QuestionBank, seed: u64) -> Option<ScriptedProvider> {
    match name {
        "gold" => Some(gold_following(bank)),
        "adversarial" => Some(adversarial(bank)),
        "single-objective" => Some(single_objective(bank)),
        "random" => Some(randomized(seed)),
        _ => None,
    }
}
