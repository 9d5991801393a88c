//! Rule-driven provider for tests and offline runs.
//!
//! Rules are tried in order against the last user turn. A rule either
//! replays a fixed sequence of replies (the last one repeats) or delegates
//! to a responder closure that may decline by returning `None`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde::Deserialize;

use super::{Completion, CompletionParams, Conversation, GatewayError, Provider, Usage};
use crate::corpus::word_count;

pub type Responder = Arc<dyn Fn(&Conversation) -> Option<String> + Send + Sync>;

enum Matcher {
    Any,
    Contains(String),
    Pattern(Regex),
}

enum Action {
    Replies { replies: Vec<String>, cursor: AtomicUsize },
    Respond(Responder),
}

pub struct Rule {
    matcher: Matcher,
    action: Action,
}

impl Rule {
    fn replies<I, S>(matcher: Matcher, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let replies: Vec<String> = replies.into_iter().map(Into::into).collect();
        assert!(!replies.is_empty(), "a scripted rule needs at least one reply");
        Self {
            matcher,
            action: Action::Replies {
                replies,
                cursor: AtomicUsize::new(0),
            },
        }
    }

    /// Matches requests whose last user turn contains `needle`.
    pub fn contains<I, S>(needle: impl Into<String>, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::replies(Matcher::Contains(needle.into()), replies)
    }

    pub fn regex<I, S>(pattern: &str, replies: I) -> Result<Self, regex::Error>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Ok(Self::replies(Matcher::Pattern(Regex::new(pattern)?), replies))
    }

    pub fn any<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::replies(Matcher::Any, replies)
    }

    pub fn respond(f: impl Fn(&Conversation) -> Option<String> + Send + Sync + 'static) -> Self {
        Self {
            matcher: Matcher::Any,
            action: Action::Respond(Arc::new(f)),
        }
    }

    fn matches(&self, request: &str) -> bool {
        match &self.matcher {
            Matcher::Any => true,
            Matcher::Contains(s) => request.contains(s.as_str()),
            Matcher::Pattern(r) => r.is_match(request),
        }
    }

    fn reply(&self, conv: &Conversation) -> Option<String> {
        match &self.action {
            Action::Replies { replies, cursor } => {
                let i = cursor.fetch_add(1, Ordering::SeqCst).min(replies.len() - 1);
                Some(replies[i].clone())
            }
            Action::Respond(f) => f(conv),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSpec {
    #[serde(default)]
    contains: Option<String>,
    #[serde(default)]
    regex: Option<String>,
    #[serde(default)]
    reply: Option<String>,
    #[serde(default)]
    replies: Vec<String>,
}

#[derive(Deserialize)]
struct ScriptSpec {
    rules: Vec<RuleSpec>,
}

#[derive(Default)]
pub struct ScriptedProvider {
    rules: Vec<Rule>,
    log: Mutex<Vec<String>>,
}

impl ScriptedProvider {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self {
            rules,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn push(&mut self, rule: Rule) {
        self.rules.push(rule);
    }

    /// Loads `{"rules": [{"contains"|"regex": ..., "reply"|"replies": ...}]}`.
    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let bad = |m: String| GatewayError::Transcript(format!("script: {m}"));
        let spec: ScriptSpec = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let mut rules = Vec::new();
        for (i, r) in spec.rules.into_iter().enumerate() {
            let mut replies = r.replies;
            if let Some(one) = r.reply {
                replies.insert(0, one);
            }
            if replies.is_empty() {
                return Err(bad(format!("rule {i} has no reply")));
            }
            let matcher = match (r.contains, r.regex) {
                (Some(c), None) => Matcher::Contains(c),
                (None, Some(p)) => Matcher::Pattern(Regex::new(&p).map_err(|e| bad(e.to_string()))?),
                (None, None) => Matcher::Any,
                (Some(_), Some(_)) => return Err(bad(format!("rule {i} sets both contains and regex"))),
            };
            rules.push(Rule::replies(matcher, replies));
        }
        Ok(Self::new(rules))
    }

    /// Last user turn of every request served so far.
    pub fn requests(&self) -> Vec<String> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Provider for ScriptedProvider {
    fn complete(&self, conv: &Conversation, _params: &CompletionParams) -> Result<Completion, GatewayError> {
        let request = conv.last_user().unwrap_or_default();
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(request.to_string());
        let text = self
            .rules
            .iter()
            .filter(|r| r.matches(request))
            .find_map(|r| r.reply(conv))
            .ok_or_else(|| {
                let head: String = request.chars().take(80).collect();
                GatewayError::ScriptMiss(head)
            })?;
        let prompt_words: usize = conv.turns.iter().map(|t| word_count(&t.content)).sum();
        let usage = Usage::new(prompt_words as u64, word_count(&text) as u64);
        Ok(Completion { text, usage })
    }
}
