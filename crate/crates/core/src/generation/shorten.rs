//! Length-bounded rewording of generated labels.

use serde::{Deserialize, Serialize};

use super::GenerationError;
use crate::corpus::word_count;
use crate::gateway::{Conversation, Gateway};
use crate::template::{render_prompt, Bindings, TemplateSet};
use crate::text::strip_markup;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShorteningPolicy {
    pub ratio: f64,
    pub retry_limit: u32,
}

impl Default for ShorteningPolicy {
    fn default() -> Self {
        Self {
            ratio: 1.5,
            retry_limit: 2,
        }
    }
}

/// Word budget for a rewrite: `floor(ratio * human_word_count)`.
pub fn max_words(human_word_count: usize, policy: &ShorteningPolicy) -> usize {
    assert!(policy.ratio > 0.0, "shortening ratio must be positive");
    (policy.ratio * human_word_count as f64).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortenOutcome {
    pub label: String,
    pub compliant: bool,
    pub max_words: usize,
    /// Requests issued, including the first.
    pub attempts: u32,
}

fn clean_reply(reply: &str) -> String {
    let first = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or_default();
    let first = first.strip_prefix("Label:").unwrap_or(first);
    strip_markup(first)
}

/// Asks for a rewrite of `label` within the word budget, re-prompting up to
/// `policy.retry_limit` times. When no reply fits, the original label is
/// returned flagged non-compliant.
pub fn shorten_label(
    label: &str,
    human_word_count: usize,
    policy: &ShorteningPolicy,
    gateway: &Gateway,
    templates: &TemplateSet,
) -> Result<ShortenOutcome, GenerationError> {
    assert!(human_word_count >= 1, "human label must have at least one word");
    let limit = max_words(human_word_count, policy);
    let mut b = Bindings::new();
    b.insert("label", label.to_string());
    b.insert("max_words", limit.to_string());
    let mut conv = Conversation::single(render_prompt(templates.get("shorten"), &b)?);

    let mut attempts = 0;
    loop {
        attempts += 1;
        let reply = gateway
            .complete(&conv)
            .map_err(|source| GenerationError::Provider {
                question: String::new(),
                turn: attempts as usize,
                source,
            })?
            .text;
        let candidate = clean_reply(&reply);
        let words = word_count(&candidate);
        if words >= 1 && words <= limit {
            return Ok(ShortenOutcome {
                label: candidate,
                compliant: true,
                max_words: limit,
                attempts,
            });
        }
        if attempts > policy.retry_limit {
            return Ok(ShortenOutcome {
                label: label.to_string(),
                compliant: false,
                max_words: limit,
                attempts,
            });
        }
        conv.push_assistant(reply);
        conv.push_user(format!(
            "That rephrasing has {words} words. Rephrase the label again using at most {limit} words. \
Reply with the rephrased label only."
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CompletionParams, Rule, ScriptedProvider};
    use std::sync::Arc;

    #[test]
    fn budgets_use_floor() {
        let p = ShorteningPolicy::default();
        assert_eq!(max_words(10, &p), 15);
        assert_eq!(max_words(4, &p), 6);
        assert_eq!(max_words(3, &p), 4);
        assert_eq!(max_words(1, &p), 1);
    }

    #[test]
    fn accepts_first_compliant_rewrite() {
        let provider = Arc::new(ScriptedProvider::new(vec![Rule::any([
            "Understand how gas pressure relates to temperature at fixed volume",
            "Relate gas pressure and temperature",
        ])]));
        let gw = Gateway::new(provider.clone(), CompletionParams::default());
        let out = shorten_label(
            "Understand gas pressure-temperature relationship",
            4,
            &Default::default(),
            &gw,
            &TemplateSet::builtin(),
        )
        .unwrap();
        assert_eq!(
            out,
            ShortenOutcome {
                label: "Relate gas pressure and temperature".into(),
                compliant: true,
                max_words: 6,
                attempts: 2,
            }
        );
        assert!(provider.requests()[0].contains("at most 6 words"));
    }

    #[test]
    fn over_length_exhausts_retries() {
        let provider = Arc::new(ScriptedProvider::new(vec![Rule::any(["one two three four five six seven"])]));
        let gw = Gateway::new(provider.clone(), CompletionParams::default());
        let policy = ShorteningPolicy {
            ratio: 1.5,
            retry_limit: 3,
        };
        let out = shorten_label("original label", 3, &policy, &gw, &TemplateSet::builtin()).unwrap();
        assert!(!out.compliant);
        assert_eq!(out.label, "original label");
        assert_eq!(out.attempts, 4);
        // exactly retry_limit re-prompts after the first request
        assert_eq!(provider.requests().iter().filter(|r| r.starts_with("That rephrasing")).count(), 3);
    }
}
