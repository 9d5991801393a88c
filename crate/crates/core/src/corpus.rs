//! Question-bank data model.
//!
//! A bank is a JSON document holding bank-level metadata (`subject`,
//! `context`), the multiple-choice questions and the knowledge components
//! they are tagged with. [`load_bank`] validates every structural invariant;
//! [`validate_paired`] additionally checks the paired layout in which every
//! KC is assessed by exactly two questions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("malformed bank document: {0}")]
    Malformed(String),
    #[error("duplicate question id `{0}`")]
    DuplicateQuestionId(String),
    #[error("duplicate KC id `{0}`")]
    DuplicateKcId(String),
    #[error("question `{question}` references unknown KC `{kc}`")]
    DanglingKc { question: String, kc: String },
    #[error("question `{question}` has {count} options, expected {MIN_OPTIONS} to {MAX_OPTIONS}")]
    OptionCount { question: String, count: usize },
    #[error("question `{0}` has no correct option")]
    NoCorrectOption(String),
    #[error("question `{0}` has multiple correct options")]
    MultipleCorrectOptions(String),
    #[error("question `{0}` has an empty option text")]
    EmptyOption(String),
    #[error("question `{0}` has an empty id or stem")]
    EmptyQuestion(String),
    #[error("KC `{0}` has an empty label")]
    EmptyKcLabel(String),
    #[error("bank is not paired: {0}")]
    NotPaired(PairingViolations),
    #[error("kc_count must be at least 1")]
    InvalidKcCount,
}

/// Every reason a bank fails the paired-benchmark check.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PairingViolations {
    /// KCs whose reference count is not two, with the observed count.
    pub miscounted_kcs: Vec<(String, usize)>,
    /// Questions without a gold KC.
    pub untagged_questions: Vec<String>,
}

impl fmt::Display for PairingViolations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (kc, n) in &self.miscounted_kcs {
            parts.push(format!("KC `{kc}` referenced {n} times"));
        }
        for q in &self.untagged_questions {
            parts.push(format!("question `{q}` has no gold KC"));
        }
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub text: String,
    pub is_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem: String,
    pub options: Vec<AnswerOption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_kc_id: Option<String>,
}

impl Question {
    /// The single correct option. Only valid on questions that passed validation.
    pub fn correct_option(&self) -> &AnswerOption {
        self.options
            .iter()
            .find(|o| o.is_correct)
            .expect("validated question has a correct option")
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.id.trim().is_empty() || self.stem.trim().is_empty() {
            return Err(CorpusError::EmptyQuestion(self.id.clone()));
        }
        let count = self.options.len();
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&count) {
            return Err(CorpusError::OptionCount {
                question: self.id.clone(),
                count,
            });
        }
        if self.options.iter().any(|o| o.text.trim().is_empty()) {
            return Err(CorpusError::EmptyOption(self.id.clone()));
        }
        match self.options.iter().filter(|o| o.is_correct).count() {
            0 => Err(CorpusError::NoCorrectOption(self.id.clone())),
            1 => Ok(()),
            _ => Err(CorpusError::MultipleCorrectOptions(self.id.clone())),
        }
    }
}

/// Number of whitespace-delimited tokens in `text`.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeComponent {
    pub id: String,
    pub label: String,
}

impl KnowledgeComponent {
    pub fn word_count(&self) -> usize {
        word_count(&self.label)
    }
}

/// A validated question bank. Construct through [`load_bank`] or
/// [`QuestionBank::new`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuestionBank {
    subject: String,
    context: String,
    questions: Vec<Question>,
    kcs: Vec<KnowledgeComponent>,
}

#[derive(Deserialize)]
struct RawBank {
    subject: String,
    context: String,
    questions: Vec<Question>,
    kcs: Vec<KnowledgeComponent>,
}

impl QuestionBank {
    pub fn new(
        subject: impl Into<String>,
        context: impl Into<String>,
        questions: Vec<Question>,
        kcs: Vec<KnowledgeComponent>,
    ) -> Result<Self, CorpusError> {
        let mut kc_ids = HashSet::new();
        for kc in &kcs {
            if !kc_ids.insert(kc.id.as_str()) {
                return Err(CorpusError::DuplicateKcId(kc.id.clone()));
            }
            if kc.label.trim().is_empty() {
                return Err(CorpusError::EmptyKcLabel(kc.id.clone()));
            }
        }
        let mut q_ids = HashSet::new();
        for q in &questions {
            if !q_ids.insert(q.id.as_str()) {
                return Err(CorpusError::DuplicateQuestionId(q.id.clone()));
            }
            q.validate()?;
            if let Some(kc) = &q.gold_kc_id {
                if !kc_ids.contains(kc.as_str()) {
                    return Err(CorpusError::DanglingKc {
                        question: q.id.clone(),
                        kc: kc.clone(),
                    });
                }
            }
        }
        Ok(Self {
            subject: subject.into(),
            context: context.into(),
            questions,
            kcs,
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn kcs(&self) -> &[KnowledgeComponent] {
        &self.kcs
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn kc(&self, id: &str) -> Option<&KnowledgeComponent> {
        self.kcs.iter().find(|k| k.id == id)
    }

    /// Gold KC label of a question, if it is tagged.
    pub fn gold_label(&self, question_id: &str) -> Option<&str> {
        let kc = self.question(question_id)?.gold_kc_id.as_deref()?;
        self.kc(kc).map(|k| k.label.as_str())
    }

    /// Serializes to the canonical bank document (fixed key order, two-space
    /// indentation, trailing newline).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bank serializes");
        s.push('\n');
        s
    }
}

/// Parses and validates a bank document.
pub fn load_bank<R: Read>(mut source: R) -> Result<QuestionBank, CorpusError> {
    let mut buf = String::new();
    source.read_to_string(&mut buf).map_err(|e| CorpusError::Malformed(e.to_string()))?;
    let raw: RawBank = serde_json::from_str(&buf).map_err(|e| CorpusError::Malformed(e.to_string()))?;
    QuestionBank::new(raw.subject, raw.context, raw.questions, raw.kcs)
}

/// A bank in which every KC is assessed by exactly two questions and every
/// question carries a gold KC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedBenchmark {
    bank: QuestionBank,
    pairs: BTreeMap<String, [String; 2]>,
}

impl PairedBenchmark {
    pub fn bank(&self) -> &QuestionBank {
        &self.bank
    }

    pub fn into_bank(self) -> QuestionBank {
        self.bank
    }

    /// Question pair of each KC, keyed by KC id.
    pub fn pairs(&self) -> &BTreeMap<String, [String; 2]> {
        &self.pairs
    }

    pub fn kc_count(&self) -> usize {
        self.bank.kcs.len()
    }

    /// Gold KC id of `question_id`.
    pub fn kc_of(&self, question_id: &str) -> Option<&str> {
        self.bank.question(question_id)?.gold_kc_id.as_deref()
    }
}

pub fn validate_paired(bank: QuestionBank) -> Result<PairedBenchmark, CorpusError> {
    let mut refs: HashMap<&str, Vec<&str>> = bank.kcs.iter().map(|k| (k.id.as_str(), Vec::new())).collect();
    let mut violations = PairingViolations::default();
    for q in &bank.questions {
        match &q.gold_kc_id {
            Some(kc) => refs.get_mut(kc.as_str()).expect("validated").push(&q.id),
            None => violations.untagged_questions.push(q.id.clone()),
        }
    }
    let mut pairs = BTreeMap::new();
    for kc in &bank.kcs {
        let qs = &refs[kc.id.as_str()];
        if qs.len() == 2 {
            pairs.insert(kc.id.clone(), [qs[0].to_string(), qs[1].to_string()]);
        } else {
            violations.miscounted_kcs.push((kc.id.clone(), qs.len()));
        }
    }
    if violations.miscounted_kcs.is_empty() && violations.untagged_questions.is_empty() {
        Ok(PairedBenchmark { bank, pairs })
    } else {
        Err(CorpusError::NotPaired(violations))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderStyle {
    /// Stem plus the correct answer only.
    Expert,
    /// Stem plus every option, correct option first.
    Textbook,
}

/// Option texts in textbook order: the correct option first, distractors in
/// their original relative order.
pub fn textbook_options(q: &Question) -> Vec<&str> {
    let correct = q.options.iter().filter(|o| o.is_correct);
    let rest = q.options.iter().filter(|o| !o.is_correct);
    correct.chain(rest).map(|o| o.text.as_str()).collect()
}

/// Options labeled `A)`, `B)`, ... one per line, correct option at `A)`.
pub fn textbook_options_text(q: &Question) -> String {
    textbook_options(q)
        .iter()
        .enumerate()
        .map(|(i, text)| format!("{}) {}", (b'A' + i as u8) as char, text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_question(q: &Question, style: RenderStyle) -> String {
    match style {
        RenderStyle::Expert => format!("{}\nCorrect answer: {}", q.stem, q.correct_option().text),
        RenderStyle::Textbook => format!("{}\n{}", q.stem, textbook_options_text(q)),
    }
}

const VERBS: &[&str] = &[
    "Apply",
    "Calculate",
    "Identify",
    "Explain",
    "Compare",
    "Predict",
    "Classify",
    "Interpret",
];

const TOPICS: &[&str] = &[
    "Boyle's law",
    "Gay Lussac's law",
    "Charles's law",
    "ionic compound formulas",
    "molar mass",
    "limiting reagents",
    "percent yield",
    "oxidation states",
    "Lewis structures",
    "VSEPR geometry",
    "electronegativity trends",
    "atomic radius trends",
    "hydrogen bonding",
    "solution molarity",
    "acid dissociation constants",
    "buffer capacity",
    "reaction enthalpy",
    "Hess's law",
    "entropy change",
    "Gibbs free energy",
    "reaction order",
    "activation energy",
    "equilibrium constants",
    "Le Chatelier's principle",
    "galvanic cells",
    "electron configurations",
    "isotope abundance",
    "significant figures",
    "unit conversions",
    "empirical formulas",
    "balancing equations",
    "gas stoichiometry",
    "partial pressures",
    "colligative properties",
    "intermolecular forces",
    "phase diagrams",
    "nuclear decay",
    "half-life calculations",
    "titration endpoints",
    "solubility rules",
];

const STEM_FRAMES: &[&str] = &[
    "Which statement correctly describes how to {topic} in a typical problem?",
    "A student must {topic} for a lab sample. Which result is correct?",
];

/// Builds a deterministic paired benchmark with `kc_count` KCs and
/// `2 * kc_count` questions. The output depends only on `(seed, kc_count)`.
pub fn synth_fixture(seed: u64, kc_count: usize) -> Result<PairedBenchmark, CorpusError> {
    if kc_count < 1 {
        return Err(CorpusError::InvalidKcCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = kc_count.to_string().len().max(2);
    let qwidth = (2 * kc_count).to_string().len().max(2);

    let mut topics: Vec<usize> = (0..TOPICS.len()).collect();
    topics.shuffle(&mut rng);

    let mut kcs = Vec::with_capacity(kc_count);
    let mut drafts = Vec::with_capacity(2 * kc_count);
    for k in 0..kc_count {
        let verb = VERBS[rng.gen_range(0..VERBS.len())];
        let topic = TOPICS[topics[k % TOPICS.len()]];
        let round = k / TOPICS.len();
        let label = if round == 0 {
            format!("{verb} {topic}")
        } else {
            format!("{verb} {topic} (part {})", round + 1)
        };
        let kc_id = format!("kc{:0width$}", k + 1);
        for (variant, frame) in STEM_FRAMES.iter().enumerate() {
            let task = format!("{} {}", verb.to_lowercase(), topic);
            let stem = format!("[{}{}] {}", k + 1, (b'a' + variant as u8) as char, frame.replace("{topic}", &task));
            let option_count = rng.gen_range(MIN_OPTIONS..=MAX_OPTIONS);
            let correct = rng.gen_range(0..option_count);
            let options = (0..option_count)
                .map(|i| AnswerOption {
                    text: if i == correct {
                        format!("Result consistent with {topic}")
                    } else {
                        format!("Distractor {} for {topic}", i + 1)
                    },
                    is_correct: i == correct,
                })
                .collect();
            drafts.push((stem, options, kc_id.clone()));
        }
        kcs.push(KnowledgeComponent { id: kc_id, label });
    }
    drafts.shuffle(&mut rng);
    let questions = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (stem, options, kc))| Question {
            id: format!("q{:0qwidth$}", i + 1),
            stem,
            options,
            gold_kc_id: Some(kc),
        })
        .collect();
    validate_paired(QuestionBank::new("Chemistry", "undergraduate", questions, kcs)?)
}
