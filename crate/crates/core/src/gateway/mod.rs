//! Chat-completion gateway.
//!
//! Every prompt in the pipeline goes through [`Gateway::complete`]. The
//! gateway validates the conversation, bounds the number of in-flight
//! requests and meters token usage; the actual completion comes from a
//! [`Provider`]: a live OpenAI-compatible endpoint, a recorded transcript
//! replayed by fingerprint, or a scripted rule set for tests.

mod live;
mod replay;
mod scripted;
mod usage;

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use live::{LiveProvider, RetryPolicy, API_KEY_ENV, DEFAULT_BASE_URL};
pub use replay::{RecordingProvider, ReplayProvider, Transcript, TranscriptEntry};
pub use scripted::{Responder, Rule, ScriptedProvider};
pub use usage::{default_price_table, usage_cost, usage_sum, ModelRates, PriceTable, Usage};

pub const DEFAULT_MODEL: &str = "gpt-4-0125-preview";
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid conversation: {0}")]
    InvalidConversation(String),
    #[error("no recorded completion for request fingerprint {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("retry budget exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("provider rejected the request ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("no scripted rule matches request: {0}")]
    ScriptMiss(String),
    #[error("transcript error: {0}")]
    Transcript(String),
    #[error("missing API key: set {API_KEY_ENV}")]
    MissingApiKey,
    #[error("unknown model `{0}` in price table")]
    UnknownModel(String),
    #[error("invalid price: {0}")]
    InvalidPrice(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conversation {
    pub turns: Vec<ChatTurn>,
}

impl Conversation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(prompt: impl Into<String>) -> Self {
        Self {
            turns: vec![ChatTurn::user(prompt)],
        }
    }

    pub fn push_user(&mut self, content: impl Into<String>) {
        self.turns.push(ChatTurn::user(content));
    }

    pub fn push_assistant(&mut self, content: impl Into<String>) {
        self.turns.push(ChatTurn::assistant(content));
    }

    /// Content of the last user turn.
    pub fn last_user(&self) -> Option<&str> {
        self.turns.iter().rev().find(|t| t.role == Role::User).map(|t| t.content.as_str())
    }

    /// Checks turn alternation. With `for_request`, the last turn must also be
    /// a user turn.
    pub fn validate(&self, for_request: bool) -> Result<(), GatewayError> {
        let body = match self.turns.first() {
            Some(t) if t.role == Role::System => &self.turns[1..],
            _ => &self.turns[..],
        };
        for (i, turn) in body.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(GatewayError::InvalidConversation(format!(
                    "turn {i} is {:?}, expected {expected:?}",
                    turn.role
                )));
            }
            if turn.content.trim().is_empty() {
                return Err(GatewayError::InvalidConversation(format!("turn {i} is empty")));
            }
        }
        if for_request && body.len() % 2 == 0 {
            return Err(GatewayError::InvalidConversation(
                "a completion request must end with a user turn".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model_id: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            model_id: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            max_output_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

pub trait Provider: Send + Sync {
    fn complete(&self, conv: &Conversation, params: &CompletionParams) -> Result<Completion, GatewayError>;
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn complete(&self, conv: &Conversation, params: &CompletionParams) -> Result<Completion, GatewayError> {
        (**self).complete(conv, params)
    }
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn complete(&self, conv: &Conversation, params: &CompletionParams) -> Result<Completion, GatewayError> {
        (**self).complete(conv, params)
    }
}

/// Stable hex digest of the parts of a request that determine its reply.
pub fn fingerprint(model_id: &str, temperature: f64, turns: &[ChatTurn]) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        model: &'a str,
        temperature: f64,
        turns: &'a [ChatTurn],
    }
    let canonical = serde_json::to_vec(&Key {
        model: model_id,
        temperature,
        turns,
    })
    .expect("fingerprint key serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Counting semaphore bounding in-flight requests.
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.freed.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    provider: Box<dyn Provider>,
    params: CompletionParams,
    concurrency: usize,
    slots: Semaphore,
    meter: Mutex<(Usage, u64)>,
}

impl Gateway {
    pub fn new(provider: impl Provider + 'static, params: CompletionParams) -> Self {
        Self::with_concurrency(provider, params, DEFAULT_CONCURRENCY)
    }

    pub fn with_concurrency(provider: impl Provider + 'static, params: CompletionParams, concurrency: usize) -> Self {
        let concurrency = concurrency.max(1);
        Self {
            provider: Box::new(provider),
            params,
            concurrency,
            slots: Semaphore::new(concurrency),
            meter: Mutex::new((Usage::default(), 0)),
        }
    }

    pub fn params(&self) -> &CompletionParams {
        &self.params
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn complete(&self, conv: &Conversation) -> Result<Completion, GatewayError> {
        conv.validate(true)?;
        if self.params.temperature < 0.0 || self.params.temperature.is_nan() {
            return Err(GatewayError::InvalidConversation(format!(
                "temperature must be >= 0, got {}",
                self.params.temperature
            )));
        }
        let completion = {
            let _permit = self.slots.acquire();
            self.provider.complete(conv, &self.params)?
        };
        let mut m = self.meter.lock().unwrap_or_else(|e| e.into_inner());
        m.0 = m.0 + completion.usage;
        m.1 += 1;
        Ok(completion)
    }

    /// Usage accumulated over every successful completion so far.
    pub fn total_usage(&self) -> Usage {
        self.meter.lock().unwrap_or_else(|e| e.into_inner()).0
    }

    pub fn request_count(&self) -> u64 {
        self.meter.lock().unwrap_or_else(|e| e.into_inner()).1
    }
}

/// Applies `f` to every item using up to `workers` threads; results keep
/// input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn conversation_alternation() {
        let mut c = Conversation::new();
        assert!(c.validate(true).is_err());
        c.turns.push(ChatTurn::system("sys"));
        c.push_user("hi");
        assert!(c.validate(true).is_ok());
        c.push_assistant("hello");
        assert!(c.validate(false).is_ok());
        assert!(c.validate(true).is_err());
        c.push_assistant("again");
        assert!(c.validate(false).is_err());
        assert!(Conversation::single("  ").validate(true).is_err());
    }

    #[test]
    fn fingerprint_covers_params() {
        let turns = vec![ChatTurn::user("x")];
        let a = fingerprint("m", 0.0, &turns);
        assert_eq!(a, fingerprint("m", 0.0, &turns));
        assert_ne!(a, fingerprint("m", 0.5, &turns));
        assert_ne!(a, fingerprint("n", 0.0, &turns));
        assert_ne!(a, fingerprint("m", 0.0, &[ChatTurn::user("y")]));
        assert_eq!(a.len(), 64);
    }

    struct Counting {
        live: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Provider for Counting {
        fn complete(&self, _: &Conversation, _: &CompletionParams) -> Result<Completion, GatewayError> {
            let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(5));
            self.live.fetch_sub(1, Ordering::SeqCst);
            Ok(Completion {
                text: "ok".into(),
                usage: Usage::new(2, 1),
            })
        }
    }

    #[test]
    fn semaphore_bounds_in_flight_requests() {
        let provider = Arc::new(Counting {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = Gateway::with_concurrency(provider.clone(), CompletionParams::default(), 2);
        let items: Vec<usize> = (0..16).collect();
        let out = parallel_map(&items, 8, |_| gw.complete(&Conversation::single("q")).unwrap().text);
        assert_eq!(out.len(), 16);
        assert!(provider.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(gw.total_usage(), Usage::new(32, 16));
        assert_eq!(gw.request_count(), 16);
    }

    #[test]
    fn rejects_negative_temperature() {
        let provider = Counting {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        };
        let params = CompletionParams {
            temperature: -0.1,
            ..Default::default()
        };
        let gw = Gateway::new(provider, params);
        assert!(gw.complete(&Conversation::single("q")).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..100).collect();
        assert_eq!(parallel_map(&items, 7, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<u32>::new(), 4, |x| *x).is_empty());
    }
}
