//! Text-generation backends behind one request/response contract.
//!
//! Remote chat-completion services, fixed-reply mocks and rule-scripted
//! backends all implement [`LlmBackend`]. Scripted backends are pure
//! functions of the request, which keeps whole simulations reproducible.

use std::fmt;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::util::fnv1a64;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed backend reply: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn wire_name(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_prompt: String,
    pub messages: Vec<(Role, String)>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Number of independent samples to decode.
    pub sample_count: usize,
}

impl CompletionRequest {
    pub const DEFAULT_TEMPERATURE: f64 = 0.7;
    pub const JUDGE_TEMPERATURE: f64 = 0.0;

    pub fn new(system_prompt: String, messages: Vec<(Role, String)>) -> Result<Self, GatewayError> {
        if messages.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(GatewayError::InvalidRequest("message roles must alternate".into()));
        }
        Ok(Self {
            system_prompt,
            messages,
            temperature: Self::DEFAULT_TEMPERATURE,
            max_tokens: 256,
            sample_count: 1,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature.max(0.0);
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens.max(1);
        self
    }

    pub fn with_samples(mut self, sample_count: usize) -> Self {
        self.sample_count = sample_count.max(1);
        self
    }

    /// Stable hash of the prompt content (system prompt and messages).
    pub fn fingerprint(&self) -> u64 {
        let mut text = String::with_capacity(self.system_prompt.len() + 64);
        text.push_str(&self.system_prompt);
        for (role, content) in &self.messages {
            text.push('\u{1f}');
            text.push_str(role.wire_name());
            text.push('\u{1e}');
            text.push_str(content);
        }
        fnv1a64(text.as_bytes())
    }

    /// Concatenation of every message body, last message last.
    pub fn full_text(&self) -> String {
        let mut text = self.system_prompt.clone();
        for (_, content) in &self.messages {
            text.push('\n');
            text.push_str(content);
        }
        text
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub samples: Vec<String>,
    pub backend_id: String,
    pub latency: Duration,
}

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError>;
}

impl fmt::Debug for dyn LlmBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LlmBackend({})", self.id())
    }
}

/// Runs `request` on `backend` and checks the sample-count contract.
pub fn complete(request: &CompletionRequest, backend: &dyn LlmBackend) -> Result<Completion, GatewayError> {
    if request.sample_count == 0 {
        return Err(GatewayError::InvalidRequest("sample_count must be at least 1".into()));
    }
    let completion = backend.complete(request)?;
    if completion.samples.len() != request.sample_count {
        return Err(GatewayError::Protocol(format!(
            "{} returned {} samples, expected {}",
            completion.backend_id,
            completion.samples.len(),
            request.sample_count
        )));
    }
    Ok(completion)
}

/// Always answers with the same text.
#[derive(Clone, Debug)]
pub struct FixedReply {
    reply: String,
}

impl FixedReply {
    pub fn new(reply: impl Into<String>) -> Self {
        Self { reply: reply.into() }
    }
}

impl LlmBackend for FixedReply {
    fn id(&self) -> &str {
        "fixed"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        Ok(Completion {
            samples: vec![self.reply.clone(); request.sample_count],
            backend_id: self.id().to_string(),
            latency: Duration::ZERO,
        })
    }
}

/// Backend driven by a closure of `(request, sample index)`.
pub struct FnBackend<F> {
    id: String,
    reply: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest, usize) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, reply: F) -> Self {
        Self { id: id.into(), reply }
    }
}

impl<F> LlmBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest, usize) -> Result<String, GatewayError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        let samples = (0..request.sample_count)
            .map(|i| (self.reply)(request, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Completion { samples, backend_id: self.id.clone(), latency: Duration::ZERO })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substring that must occur in the request's system prompt or messages.
    pub contains: String,
    /// Candidate replies; sample `i` takes `replies[(fingerprint + i) % len]`.
    pub replies: Vec<String>,
}

/// Fixture format for [`ScriptedBackend`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptFixture {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    pub default_reply: String,
}

/// Rule-table backend: the first rule whose needle occurs in the request
/// answers it, otherwise the default reply.
#[derive(Clone, Debug)]
pub struct ScriptedBackend {
    id: String,
    fixture: ScriptFixture,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, fixture: ScriptFixture) -> Self {
        Self { id: id.into(), fixture }
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let fixture: ScriptFixture =
            serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        if fixture.rules.iter().any(|r| r.replies.is_empty()) {
            return Err(GatewayError::Config("every script rule needs at least one reply".into()));
        }
        Ok(Self::new(format!("scripted:{}", path.display()), fixture))
    }
}

impl LlmBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        let text = request.full_text();
        let seed = request.fingerprint();
        let samples = match self.fixture.rules.iter().find(|r| text.contains(&r.contains)) {
            Some(rule) => (0..request.sample_count)
                .map(|i| rule.replies[(seed.wrapping_add(i as u64) % rule.replies.len() as u64) as usize].clone())
                .collect(),
            None => vec![self.fixture.default_reply.clone(); request.sample_count],
        };
        Ok(Completion { samples, backend_id: self.id.clone(), latency: Duration::ZERO })
    }
}

/// Connection settings for an OpenAI-compatible chat-completion endpoint.
#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    /// Minimum spacing between requests issued by one backend handle.
    pub min_interval: Duration,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub const DEFAULT_MODEL: &'static str = "gpt-3.5-turbo";

    /// Reads `LLM_API_BASE`, `LLM_API_KEY` and optionally `LLM_MODEL`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let base_url =
            std::env::var("LLM_API_BASE").map_err(|_| GatewayError::Config("LLM_API_BASE is not set".into()))?;
        let api_key =
            std::env::var("LLM_API_KEY").map_err(|_| GatewayError::Config("LLM_API_KEY is not set".into()))?;
        let model = std::env::var("LLM_MODEL").unwrap_or_else(|_| Self::DEFAULT_MODEL.to_string());
        Ok(Self::new(base_url, api_key, model))
    }

    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            model: model.into(),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            min_interval: Duration::from_millis(50),
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    n: usize,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// Chat-completion client for `POST {base}/chat/completions`.
///
/// Wire schema: `{model, messages: [{role, content}], temperature,
/// max_tokens, n}` in, `{choices: [{message: {content}}]}` out. Transport
/// failures and 5xx/429 replies are retried with exponential backoff up to
/// `max_attempts`; other 4xx replies and undecodable bodies fail at once.
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    next_slot: Mutex<Instant>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self { config, client, next_slot: Mutex::new(Instant::now()) })
    }

    fn wait_for_slot(&self) {
        let wait = {
            let mut next = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.config.min_interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn attempt(&self, request: &CompletionRequest, n: usize) -> Result<Vec<String>, AttemptError> {
        let mut messages = Vec::with_capacity(request.messages.len() + 1);
        if !request.system_prompt.is_empty() {
            messages.push(WireMessage { role: "system", content: &request.system_prompt });
        }
        messages.extend(request.messages.iter().map(|(r, c)| WireMessage { role: r.wire_name(), content: c }));
        let body = WireRequest {
            model: &self.config.model,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            n,
        };
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        self.wait_for_slot();
        let response = self
            .client
            .post(url)
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| AttemptError::Retryable(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(AttemptError::Retryable(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(GatewayError::Protocol(format!("HTTP {status}: {text}"))));
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| AttemptError::Fatal(GatewayError::Protocol(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .map(|c| c.message.content.ok_or_else(|| AttemptError::Fatal(GatewayError::Protocol("choice without content".into()))))
            .collect()
    }
}

enum AttemptError {
    Retryable(String),
    Fatal(GatewayError),
}

impl LlmBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        let started = Instant::now();
        let mut samples: Vec<String> = Vec::with_capacity(request.sample_count);
        let mut attempts = 0u32;
        let mut backoff = self.config.initial_backoff;
        while samples.len() < request.sample_count {
            attempts += 1;
            let wanted = request.sample_count - samples.len();
            match self.attempt(request, wanted) {
                Ok(batch) if batch.is_empty() => {
                    return Err(GatewayError::Protocol("reply contained no choices".into()));
                }
                // only whole successful batches are kept, so a retry never repeats samples
                Ok(batch) => {
                    samples.extend(batch.into_iter().take(wanted));
                    attempts = 0;
                    backoff = self.config.initial_backoff;
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable(message)) => {
                    if attempts >= self.config.max_attempts {
                        return Err(GatewayError::Transport { attempts, message });
                    }
                    log::warn!("{}: attempt {attempts} failed: {message}", self.config.model);
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
        Ok(Completion { samples, backend_id: self.config.model.clone(), latency: started.elapsed() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Yes,
    No,
    Abstain,
}

/// Reads a yes/no verdict from the first word of a reply.
pub fn classify_yes_no(text: &str) -> Vote {
    let first = text
        .trim_start()
        .split(|c: char| !c.is_alphabetic())
        .find(|w| !w.is_empty())
        .unwrap_or("")
        .to_ascii_lowercase();
    match first.as_str() {
        "yes" | "yeah" | "yep" | "sure" | "absolutely" | "definitely" => Vote::Yes,
        "no" | "nope" | "not" => Vote::No,
        _ => Vote::Abstain,
    }
}

/// `(yes, no)` counts after classifying every sample.
pub fn tally<S: AsRef<str>>(samples: &[S], classifier: impl Fn(&str) -> Vote) -> (usize, usize) {
    samples.iter().fold((0, 0), |(y, n), s| match classifier(s.as_ref()) {
        Vote::Yes => (y + 1, n),
        Vote::No => (y, n + 1),
        Vote::Abstain => (y, n),
    })
}

/// Strict majority of yes over no; ties and all-abstain count as no.
pub fn majority_vote<S: AsRef<str>>(samples: &[S], classifier: impl Fn(&str) -> Vote) -> bool {
    let (yes, no) = tally(samples, classifier);
    yes > no
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn req(text: &str) -> CompletionRequest {
        CompletionRequest::new("sys".into(), vec![(Role::User, text.into())]).unwrap()
    }

    #[test]
    fn fixed_reply_repeats_for_every_sample() {
        let c = complete(&req("hi").with_samples(3), &FixedReply::new("yes")).unwrap();
        assert_eq!(c.samples, vec!["yes", "yes", "yes"]);
        let c = complete(&req("hi").with_samples(10), &FixedReply::new("no")).unwrap();
        assert_eq!(c.samples.len(), 10);
    }

    #[test]
    fn roles_must_alternate() {
        let err = CompletionRequest::new(String::new(), vec![(Role::User, "a".into()), (Role::User, "b".into())]);
        assert!(matches!(err, Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn scripted_backend_is_a_pure_function_of_the_request() {
        let backend = ScriptedBackend::new(
            "t",
            ScriptFixture {
                rules: vec![ScriptRule { contains: "deal".into(), replies: vec!["yes".into(), "no".into(), "maybe".into()] }],
                default_reply: "default".into(),
            },
        );
        let r = req("did they make a deal?").with_samples(5);
        let a = complete(&r, &backend).unwrap();
        let b = complete(&r, &backend).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(complete(&req("hello"), &backend).unwrap().samples, vec!["default"]);
    }

    #[test]
    fn scripted_backend_loads_fixture_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        std::fs::write(&path, r#"{"rules":[{"contains":"price","replies":["200"]}],"default_reply":"No"}"#).unwrap();
        let backend = ScriptedBackend::from_path(&path).unwrap();
        assert_eq!(complete(&req("the price?"), &backend).unwrap().samples, vec!["200"]);
        std::fs::write(&path, r#"{"rules":[{"contains":"x","replies":[]}],"default_reply":"No"}"#).unwrap();
        assert!(ScriptedBackend::from_path(&path).is_err());
    }

    #[test]
    fn short_sample_lists_are_protocol_errors() {
        let backend = FnBackend::new("short", |_r: &CompletionRequest, _i| Ok("x".to_string()));
        struct Short<B>(B);
        impl<B: LlmBackend> LlmBackend for Short<B> {
            fn id(&self) -> &str {
                "short"
            }
            fn complete(&self, r: &CompletionRequest) -> Result<Completion, GatewayError> {
                let mut c = self.0.complete(r)?;
                c.samples.pop();
                Ok(c)
            }
        }
        assert!(matches!(complete(&req("a").with_samples(2), &Short(backend)), Err(GatewayError::Protocol(_))));
    }

    #[test]
    fn vote_counts() {
        let mut samples = vec!["Yes, they agreed."; 7];
        samples.extend(vec!["No."; 3]);
        assert!(majority_vote(&samples, classify_yes_no));
        let tie: Vec<&str> = ["yes"; 5].iter().chain(["no"; 5].iter()).copied().collect();
        assert!(!majority_vote(&tie, classify_yes_no));
        assert!(!majority_vote(&["hmm"; 10], classify_yes_no));
        assert_eq!(classify_yes_no("  YES."), Vote::Yes);
        assert_eq!(classify_yes_no("Not yet"), Vote::No);
        assert_eq!(classify_yes_no("Perhaps"), Vote::Abstain);
    }

    /// Minimal HTTP/1.1 server: answers `fail_first` requests with 503, then
    /// with a chat-completion body holding `n` copies of "ok".
    fn mock_server(fail_first: usize) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let mut stream = match stream {
                    Ok(s) => s,
                    Err(_) => break,
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0u8; content_length];
                reader.read_exact(&mut body).unwrap();
                let request: serde_json::Value = serde_json::from_slice(&body).unwrap();
                let hit = counter.fetch_add(1, Ordering::SeqCst);
                let (status, payload) = if hit < fail_first {
                    ("503 Service Unavailable", "{}".to_string())
                } else {
                    let n = request["n"].as_u64().unwrap() as usize;
                    let choices: Vec<_> =
                        (0..n).map(|i| serde_json::json!({"message": {"content": format!("ok{i}")}})).collect();
                    ("200 OK", serde_json::json!({ "choices": choices }).to_string())
                };
                let response = format!(
                    "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                stream.write_all(response.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn remote(base: String) -> RemoteBackend {
        let mut config = RemoteConfig::new(base, "test-key", "mock-model");
        config.initial_backoff = Duration::from_millis(5);
        config.min_interval = Duration::ZERO;
        config.timeout = Duration::from_secs(5);
        RemoteBackend::new(config).unwrap()
    }

    #[test]
    fn remote_backend_retries_transient_failures() {
        let (base, hits) = mock_server(2);
        let c = complete(&req("hi").with_samples(3), &remote(base)).unwrap();
        assert_eq!(c.samples, vec!["ok0", "ok1", "ok2"]);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn remote_backend_gives_up_after_bounded_attempts() {
        let (base, hits) = mock_server(usize::MAX);
        match complete(&req("hi"), &remote(base)) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }
}
