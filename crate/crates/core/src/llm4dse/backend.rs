//! Language-model backends: a chat-completions HTTP client, transcript
//! replay, a seeded mutation mock and a recording wrapper.

use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::{example_configs, requested_batch};
use crate::designspace::{DesignConfiguration, DesignSpace};
use crate::doc::DocError;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingKey(String),
    #[error("request failed after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error("response has no message content: {0}")]
    Malformed(String),
    #[error("transcript entry {index}: {message}")]
    Replay { index: usize, message: String },
    #[error(transparent)]
    Doc(#[from] DocError),
}

pub trait LlmBackend {
    fn id(&self) -> String;
    fn complete(&mut self, prompt: &str) -> Result<String, BackendError>;
}

/// Hex SHA-256 of a prompt.
pub fn prompt_hash(prompt: &str) -> String {
    crate::textembed::content_key(prompt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpChatConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> usize {
    3
}

fn default_backoff() -> u64 {
    500
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

pub struct HttpChatBackend {
    config: HttpChatConfig,
    key: String,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&config.key_env)
            .map_err(|_| BackendError::MissingKey(config.key_env.clone()))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, key, agent })
    }

    fn attempt(&self, prompt: &str) -> Result<String, (bool, String)> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: self.config.temperature,
        };
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(&body)
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, e.to_string()))?;
        if status != 200 {
            // client errors other than rate limiting will not go away on retry
            let retry = status == 429 || status >= 500;
            return Err((
                retry,
                format!(
                    "HTTP {status}: {}",
                    text.chars().take(200).collect::<String>()
                ),
            ));
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| (false, e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| (false, "no choices".to_string()))
    }
}

impl LlmBackend for HttpChatBackend {
    fn id(&self) -> String {
        format!("http-chat:{}", self.config.model)
    }

    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (i - 1).min(16));
                log::warn!("chat request failed ({last}); retrying in {wait} ms");
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err((false, m)) => return Err(BackendError::Malformed(m)),
                Err((true, m)) => last = m,
            }
        }
        Err(BackendError::Exhausted { attempts, last })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    pub prompt_hash: String,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn read(path: &Path) -> Result<Self, BackendError> {
        Ok(crate::doc::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), BackendError> {
        Ok(crate::doc::write(path, self)?)
    }
}

/// Answers prompts from a recorded transcript, in order. A prompt whose
/// hash differs from the recording is an error.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    transcript: Transcript,
    next: usize,
}

impl ReplayBackend {
    pub fn new(transcript: Transcript) -> Self {
        Self {
            transcript,
            next: 0,
        }
    }
}

impl LlmBackend for ReplayBackend {
    fn id(&self) -> String {
        "replay".into()
    }

    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        let index = self.next;
        let entry = self
            .transcript
            .entries
            .get(index)
            .ok_or_else(|| BackendError::Replay {
                index,
                message: "transcript exhausted".into(),
            })?;
        let hash = prompt_hash(prompt);
        if entry.prompt_hash != hash {
            return Err(BackendError::Replay {
                index,
                message: format!(
                    "prompt hash {hash} differs from recorded {}",
                    entry.prompt_hash
                ),
            });
        }
        self.next += 1;
        Ok(entry.response.clone())
    }
}

/// Stands in for a model that follows the prompt: each proposal starts from
/// a quoted example (sometimes a crossover of two) and pushes one to three
/// directives in a single direction, either towards more parallelism
/// (larger factors, stronger pipelining) or towards fewer resources.
/// Samples uniformly when the prompt quotes no examples.
#[derive(Debug, Clone)]
pub struct MutationMock {
    space: DesignSpace,
    seed: u64,
    rng: ChaCha8Rng,
}

impl MutationMock {
    pub fn new(space: DesignSpace, seed: u64) -> Self {
        Self {
            space,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Moves directive `i` one value up or down its domain, if it can.
    fn step(&self, c: &mut DesignConfiguration, i: usize, faster: bool) -> bool {
        let domain = &self.space.directives[i].domain;
        let current = domain[c.indices()[i]];
        let closer =
            domain
                .iter()
                .enumerate()
                .filter(|(_, v)| if faster { **v > current } else { **v < current });
        let next = if faster {
            closer.min_by_key(|(_, v)| **v)
        } else {
            closer.max_by_key(|(_, v)| **v)
        }
        .map(|(j, _)| j);
        match next {
            Some(j) => {
                let mut idx = c.indices().to_vec();
                idx[i] = j;
                *c = DesignConfiguration::from_indices(idx);
                true
            }
            None => false,
        }
    }

    fn child(&mut self, parents: &[DesignConfiguration]) -> DesignConfiguration {
        if parents.is_empty() {
            return self.space.random_config(&mut self.rng);
        }
        let a = &parents[self.rng.gen_range(0..parents.len())];
        let mut c = if parents.len() > 1 && self.rng.gen_bool(0.25) {
            let b = &parents[self.rng.gen_range(0..parents.len())];
            let idx = a
                .indices()
                .iter()
                .zip(b.indices())
                .map(|(&x, &y)| if self.rng.gen_bool(0.5) { x } else { y })
                .collect();
            DesignConfiguration::from_indices(idx)
        } else {
            a.clone()
        };
        let faster = self.rng.gen_bool(0.5);
        // now and then go all the way in one direction
        let steps = if self.rng.gen_bool(0.15) {
            self.space.len()
        } else {
            self.rng.gen_range(1..=3)
        };
        let mut done = 0;
        for _ in 0..4 * self.space.len() {
            if done == steps {
                break;
            }
            let i = self.rng.gen_range(0..self.space.len());
            if self.step(&mut c, i, faster) {
                done += 1;
            }
        }
        if done == 0 {
            c = self.space.neighbor(&c, &mut self.rng);
        }
        c
    }
}

impl LlmBackend for MutationMock {
    fn id(&self) -> String {
        format!("mutation-mock:{}", self.seed)
    }

    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        let batch = requested_batch(prompt).unwrap_or(5);
        let parents = example_configs(prompt, &self.space);
        let mut out: Vec<DesignConfiguration> = Vec::with_capacity(batch);
        for _ in 0..batch * 8 {
            if out.len() == batch {
                break;
            }
            let c = self.child(&parents);
            if !parents.contains(&c) && !out.contains(&c) {
                out.push(c);
            }
        }
        let mut text = format!(
            "Starting from {} example configurations, I trade resources for latency or the reverse.\n```\n",
            parents.len()
        );
        let blocks: Vec<String> = out
            .iter()
            .map(|c| {
                self.space
                    .values(c)
                    .map(|(d, v)| format!("{}={}", d.name, v))
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .collect();
        text.push_str(&blocks.join("\n\n"));
        text.push_str("\n```\n");
        Ok(text)
    }
}

/// Forwards to another backend and keeps every exchange.
pub struct Recording<B> {
    pub inner: B,
    pub transcript: Transcript,
}

impl<B: LlmBackend> Recording<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            transcript: Transcript::default(),
        }
    }
}

impl<B: LlmBackend> LlmBackend for Recording<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        let response = self.inner.complete(prompt)?;
        self.transcript.entries.push(TranscriptEntry {
            prompt_hash: prompt_hash(prompt),
            response: response.clone(),
        });
        Ok(response)
    }
}

impl LlmBackend for Box<dyn LlmBackend> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
}
