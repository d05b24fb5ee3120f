//! Provider-agnostic vision-language model clients.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// One message of a conversation. The image is attached to the first user turn only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, text: text.into() }
    }
}

/// Image reference handed to a client, recorded verbatim (path or URL).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub reference: String,
}

impl ImagePayload {
    pub fn new(reference: impl Into<String>) -> Self {
        Self { reference: reference.into() }
    }

    pub fn is_remote(&self) -> bool {
        self.reference.starts_with("http://") || self.reference.starts_with("https://")
    }

    /// A URL usable in an `image_url` content part; local files are inlined as data URLs.
    pub fn to_url(&self) -> Result<String, ClientError> {
        if self.is_remote() || self.reference.starts_with("data:") {
            return Ok(self.reference.clone());
        }
        let bytes = std::fs::read(&self.reference)
            .map_err(|e| ClientError::Image(format!("{}: {e}", self.reference)))?;
        let mime = match image::guess_format(&bytes) {
            Ok(image::ImageFormat::Png) => "image/png",
            Ok(image::ImageFormat::Jpeg) => "image/jpeg",
            Ok(image::ImageFormat::Gif) => "image/gif",
            Ok(image::ImageFormat::WebP) => "image/webp",
            _ => "application/octet-stream",
        };
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(format!("data:{mime};base64,{b64}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("image not loadable: {0}")]
    Image(String),
    #[error("scripted client has no response left for {0}")]
    ScriptExhausted(String),
    #[error("client configuration: {0}")]
    Config(String),
}

pub trait VlmClient: Send + Sync {
    /// Model name recorded in annotation provenance.
    fn model(&self) -> &str;

    fn supports_multi_turn(&self) -> bool;

    /// Sends `prompt` as the next user turn after `history` and returns the reply text.
    fn send(&self, image: &ImagePayload, prompt: &str, history: &[Turn]) -> Result<String, ClientError>;
}

/// A recorded call to a [`ScriptedClient`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Call {
    pub image: String,
    pub prompt: String,
    pub history_len: usize,
}

/// Replays canned responses, one queue per image reference plus a shared fallback queue.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    model: String,
    multi_turn: bool,
    per_image: Mutex<HashMap<String, VecDeque<String>>>,
    fallback: Mutex<VecDeque<String>>,
    calls: Mutex<Vec<Call>>,
}

impl ScriptedClient {
    pub fn new(model: impl Into<String>) -> Self {
        Self { model: model.into(), multi_turn: true, ..Default::default() }
    }

    pub fn single_turn(mut self) -> Self {
        self.multi_turn = false;
        self
    }

    /// Queues responses returned for calls on any image without its own script.
    pub fn with_responses<I, S>(self, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.fallback.lock().unwrap().extend(responses.into_iter().map(Into::into));
        self
    }

    pub fn script<I, S>(&self, image: &str, responses: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.per_image
            .lock()
            .unwrap()
            .entry(image.to_string())
            .or_default()
            .extend(responses.into_iter().map(Into::into));
    }

    pub fn calls(&self) -> Vec<Call> {
        self.calls.lock().unwrap().clone()
    }
}

impl VlmClient for ScriptedClient {
    fn model(&self) -> &str {
        &self.model
    }

    fn supports_multi_turn(&self) -> bool {
        self.multi_turn
    }

    fn send(&self, image: &ImagePayload, prompt: &str, history: &[Turn]) -> Result<String, ClientError> {
        self.calls.lock().unwrap().push(Call {
            image: image.reference.clone(),
            prompt: prompt.to_string(),
            history_len: history.len(),
        });
        if let Some(q) = self.per_image.lock().unwrap().get_mut(&image.reference) {
            if let Some(r) = q.pop_front() {
                return Ok(r);
            }
        }
        self.fallback
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| ClientError::ScriptExhausted(image.reference.clone()))
    }
}

pub const ENV_ENDPOINT: &str = "MEMEKIT_VLM_ENDPOINT";
pub const ENV_API_KEY: &str = "MEMEKIT_VLM_API_KEY";
pub const ENV_MODEL: &str = "MEMEKIT_VLM_MODEL";

/// Client for any server exposing the chat-completions API with image inputs.
#[derive(Debug, Clone)]
pub struct ChatCompletionsClient {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f32,
    agent: ureq::Agent,
}

impl ChatCompletionsClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            temperature: 0.0,
            agent,
        }
    }

    /// Reads endpoint, key and model from `MEMEKIT_VLM_*` variables.
    pub fn from_env() -> Result<Self, ClientError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let endpoint = var(ENV_ENDPOINT).ok_or_else(|| ClientError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| ClientError::Config(format!("{ENV_MODEL} is not set")))?;
        Ok(Self::new(endpoint, var(ENV_API_KEY), model))
    }

    pub fn request_body(&self, image_url: &str, prompt: &str, history: &[Turn]) -> Value {
        let mut messages = Vec::with_capacity(history.len() + 1);
        let mut turns = history.iter().cloned().chain(std::iter::once(Turn::user(prompt)));
        if let Some(first) = turns.next() {
            messages.push(json!({
                "role": "user",
                "content": [
                    {"type": "text", "text": first.text},
                    {"type": "image_url", "image_url": {"url": image_url}},
                ],
            }));
        }
        for t in turns {
            messages.push(json!({"role": t.role, "content": t.text}));
        }
        json!({"model": self.model, "temperature": self.temperature, "messages": messages})
    }
}

impl VlmClient for ChatCompletionsClient {
    fn model(&self) -> &str {
        &self.model
    }

    fn supports_multi_turn(&self) -> bool {
        true
    }

    fn send(&self, image: &ImagePayload, prompt: &str, history: &[Turn]) -> Result<String, ClientError> {
        let body = self.request_body(&image.to_url()?, prompt, history);
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Transport(format!("HTTP {status}: {value}")));
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Protocol(format!("no message content in {value}")))
    }
}
