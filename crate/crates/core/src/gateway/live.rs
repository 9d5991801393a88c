//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatTurn, Completion, CompletionParams, Conversation, GatewayError, Provider, Role, Usage};

pub const API_KEY_ENV: &str = "KCFORGE_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com";

/// Retries apply to transport failures, rate limiting and 5xx responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): initial, 2x, 4x, ...
    pub fn delay(&self, retry: u32) -> Duration {
        self.initial_delay * 2u32.saturating_pow(retry)
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: Role,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
    total_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct WireErrorBody {
    error: WireError,
}

#[derive(Deserialize)]
struct WireError {
    message: Option<String>,
    code: Option<String>,
}

enum Failure {
    Transient(String),
    Fatal(GatewayError),
}

pub struct LiveProvider {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl LiveProvider {
    pub fn new(base_url: &str, api_key: impl Into<String>, retry: RetryPolicy) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let base = base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        Ok(Self {
            endpoint: format!("{base}/v1/chat/completions"),
            api_key: api_key.into(),
            client,
            retry,
        })
    }

    /// Reads the key from `KCFORGE_API_KEY`.
    pub fn from_env(base_url: &str, retry: RetryPolicy) -> Result<Self, GatewayError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| GatewayError::MissingApiKey)?;
        Self::new(base_url, key, retry)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<Completion, Failure> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Transient(e.to_string()))?;
        if !status.is_success() {
            let err = serde_json::from_str::<WireErrorBody>(&text).ok().map(|b| b.error);
            let quota = err.as_ref().and_then(|e| e.code.as_deref()) == Some("insufficient_quota");
            let message = err.and_then(|e| e.message).unwrap_or(text);
            return if (status.as_u16() == 429 && !quota) || status.is_server_error() {
                Err(Failure::Transient(format!("HTTP {status}: {message}")))
            } else {
                Err(Failure::Fatal(GatewayError::Rejected {
                    status: status.as_u16(),
                    message,
                }))
            };
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| Failure::Fatal(GatewayError::BadResponse(e.to_string())))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Failure::Fatal(GatewayError::BadResponse("no message content".into())))?;
        let usage = match parsed.usage {
            Some(u) => match u.total_tokens {
                Some(t) => Usage::from_reported(u.prompt_tokens, u.completion_tokens, t),
                None => Usage::new(u.prompt_tokens, u.completion_tokens),
            },
            None => Usage::default(),
        };
        Ok(Completion { text: content, usage })
    }
}

impl Provider for LiveProvider {
    fn complete(&self, conv: &Conversation, params: &CompletionParams) -> Result<Completion, GatewayError> {
        let body = WireRequest {
            model: &params.model_id,
            messages: conv
                .turns
                .iter()
                .map(|ChatTurn { role, content }| WireMessage { role: *role, content })
                .collect(),
            temperature: params.temperature,
            max_tokens: params.max_output_tokens,
        };
        let mut retry = 0;
        loop {
            match self.attempt(&body) {
                Ok(c) => return Ok(c),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => {
                    if retry >= self.retry.max_retries {
                        return Err(GatewayError::RetriesExhausted {
                            attempts: retry + 1,
                            last: msg,
                        });
                    }
                    let delay = self.retry.delay(retry);
                    log::warn!("transient failure ({msg}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    retry += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves one canned `(status, body)` per connection and forwards each
    /// request body.
    fn stub(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                }
                let mut req = vec![0; len];
                reader.read_exact(&mut req).unwrap();
                tx.send((head, String::from_utf8(req).unwrap())).unwrap();
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), rx)
    }

    fn ok_body(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 11, "completion_tokens": 3, "total_tokens": 14}
        })
        .to_string()
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            initial_delay: Duration::from_millis(1),
        }
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        let secs: Vec<u64> = (0..3).map(|i| p.delay(i).as_secs()).collect();
        assert_eq!(secs, vec![1, 2, 4]);
    }

    #[test]
    fn sends_wire_request_and_parses_reply() {
        let (url, rx) = stub(vec![(200, ok_body("hello"))]);
        let p = LiveProvider::new(&format!("{url}/v1/"), "sk-test", fast()).unwrap();
        assert!(p.endpoint().ends_with("/v1/chat/completions"));
        let params = CompletionParams {
            max_output_tokens: Some(50),
            ..Default::default()
        };
        let c = p.complete(&Conversation::single("Q?"), &params).unwrap();
        assert_eq!(c.text, "hello");
        assert_eq!(c.usage, Usage::new(11, 3));
        let (head, body) = rx.recv().unwrap();
        assert!(head.starts_with("POST /v1/chat/completions"));
        assert!(head.to_ascii_lowercase().contains("authorization: bearer sk-test"));
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["model"], "gpt-4-0125-preview");
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"], "Q?");
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["max_tokens"], 50);
    }

    #[test]
    fn retries_rate_limits_then_succeeds() {
        let (url, _rx) = stub(vec![
            (429, r#"{"error":{"message":"slow down"}}"#.into()),
            (503, "{}".into()),
            (200, ok_body("done")),
        ]);
        let p = LiveProvider::new(&url, "k", fast()).unwrap();
        let c = p.complete(&Conversation::single("x"), &CompletionParams::default()).unwrap();
        assert_eq!(c.text, "done");
    }

    #[test]
    fn exhausts_retry_budget() {
        let (url, _rx) = stub(vec![(500, "{}".into()); 4]);
        let p = LiveProvider::new(&url, "k", fast()).unwrap();
        let err = p.complete(&Conversation::single("x"), &CompletionParams::default()).unwrap_err();
        assert!(matches!(err, GatewayError::RetriesExhausted { attempts: 4, .. }), "{err}");
    }

    #[test]
    fn surfaces_auth_and_quota_rejections() {
        let (url, _rx) = stub(vec![
            (401, r#"{"error":{"message":"bad key"}}"#.into()),
            (429, r#"{"error":{"message":"out of credit","code":"insufficient_quota"}}"#.into()),
        ]);
        let p = LiveProvider::new(&url, "k", fast()).unwrap();
        let e = p.complete(&Conversation::single("x"), &CompletionParams::default()).unwrap_err();
        assert!(matches!(&e, GatewayError::Rejected { status: 401, message } if message == "bad key"));
        let e = p.complete(&Conversation::single("x"), &CompletionParams::default()).unwrap_err();
        assert!(matches!(&e, GatewayError::Rejected { status: 429, message } if message == "out of credit"));
    }
}
