//! Multi-turn conversations with a multimodal LLM, plus the on-disk
//! transcript cache.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use base64::Engine as _;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::InteractionImage;
use crate::error::{Error, Result};
use crate::mhacot::ReasoningTranscript;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    pub image_attached: bool,
}

impl ChatTurn {
    pub fn user(text: impl Into<String>, image_attached: bool) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            image_attached,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            image_attached: false,
        }
    }
}

/// Checks a conversation: nonempty texts, image only on the first user turn.
pub fn validate_history(turns: &[ChatTurn]) -> Result<()> {
    let first_user = turns.iter().position(|t| t.role == Role::User);
    for (i, t) in turns.iter().enumerate() {
        if t.text.trim().is_empty() {
            return Err(Error::Protocol(format!("turn {i} has empty text")));
        }
        if t.image_attached && (t.role != Role::User || Some(i) != first_user) {
            return Err(Error::Protocol(format!(
                "turn {i}: only the first user turn may attach the image"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Endpoint root; requests go to `<base_url>/chat/completions`.
    pub base_url: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: Option<String>,
    pub model_name: String,
    pub fixture_path: Option<PathBuf>,
    pub max_retries: u32,
    pub timeout_s: f64,
    /// First backoff delay; doubles on each retry.
    pub retry_base_ms: u64,
    /// Conversations in flight at once during batch reasoning.
    pub concurrency: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Fixture,
            base_url: None,
            auth_token_env: None,
            model_name: "default".into(),
            fixture_path: None,
            max_retries: 3,
            timeout_s: 60.0,
            retry_base_ms: 500,
            concurrency: 4,
        }
    }
}

impl BackendConfig {
    pub fn fixture(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Fixture,
            fixture_path: Some(path.into()),
            ..Self::default()
        }
    }

    pub fn http(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            base_url: Some(base_url.into()),
            model_name: model_name.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackendKind::Http if self.base_url.as_deref().is_none_or(str::is_empty) => {
                return Err(Error::Config("http backend requires base_url".into()))
            }
            BackendKind::Fixture if self.fixture_path.is_none() => {
                return Err(Error::Config("fixture backend requires fixture_path".into()))
            }
            _ => {}
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(Error::Config("timeout_s must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }

    /// Builds the configured backend.
    pub fn connect(&self) -> Result<Box<dyn ChatBackend>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Fixture => Box::new(FixtureBackend::load(
                self.fixture_path.as_deref().expect("validated"),
            )?),
            BackendKind::Http => Box::new(HttpBackend::new(self)?),
        })
    }
}

/// Something that can hold one stateful multi-turn conversation about an image.
pub trait ChatBackend: Send + Sync {
    /// Sends `prompts` in order within one conversation and returns one
    /// answer per prompt.
    fn converse(&self, image: &InteractionImage, prompts: &[String]) -> Result<Vec<String>>;
}

/// Runs one conversation with the backend described by `config`.
pub fn converse(image: &InteractionImage, prompts: &[String], config: &BackendConfig) -> Result<Vec<String>> {
    if prompts.len() != 4 {
        return Err(Error::Argument(format!("expected 4 prompts, got {}", prompts.len())));
    }
    let answers = config.connect()?.converse(image, prompts)?;
    check_answers(&answers, prompts.len())?;
    Ok(answers)
}

pub(crate) fn check_answers(answers: &[String], expected: usize) -> Result<()> {
    if answers.len() != expected {
        return Err(Error::Protocol(format!(
            "backend returned {} answers for {expected} prompts",
            answers.len()
        )));
    }
    if let Some(i) = answers.iter().position(|a| a.trim().is_empty()) {
        return Err(Error::Protocol(format!("empty answer to prompt {}", i + 1)));
    }
    Ok(())
}

/// Canned answers keyed by image id; a pure function of (id, prompt index).
#[derive(Clone, Debug, Default)]
pub struct FixtureBackend {
    answers: BTreeMap<String, Vec<String>>,
}

impl FixtureBackend {
    pub fn new(answers: BTreeMap<String, Vec<String>>) -> Self {
        Self { answers }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let answers = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Ok(Self { answers })
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.answers.contains_key(image_id)
    }
}

impl ChatBackend for FixtureBackend {
    fn converse(&self, image: &InteractionImage, prompts: &[String]) -> Result<Vec<String>> {
        let canned = self
            .answers
            .get(&image.id)
            .ok_or_else(|| Error::FixtureMiss(image.id.clone()))?;
        if canned.len() < prompts.len() {
            return Err(Error::Protocol(format!(
                "fixture for `{}` has {} answers, {} prompts asked",
                image.id,
                canned.len(),
                prompts.len()
            )));
        }
        let answers = canned[..prompts.len()].to_vec();
        check_answers(&answers, prompts.len())?;
        Ok(answers)
    }
}

/// Chat-completions client with bounded retries and exponential backoff.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    token: Option<String>,
    max_retries: u32,
    retry_base: Duration,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        let base = config.base_url.as_deref().expect("validated");
        let token = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let agent_config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .build();
        Ok(Self {
            agent: ureq::Agent::new_with_config(agent_config),
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            model: config.model_name.clone(),
            token,
            max_retries: config.max_retries,
            retry_base: Duration::from_millis(config.retry_base_ms),
        })
    }

    fn request_body(&self, history: &[ChatTurn], image_b64: &str) -> Value {
        let messages: Vec<Value> = history
            .iter()
            .map(|t| {
                let mut content = vec![json!({"type": "text", "text": t.text})];
                if t.image_attached {
                    content.push(json!({"type": "image", "data": image_b64}));
                }
                json!({"role": t.role.as_str(), "content": content})
            })
            .collect();
        json!({"model": self.model, "messages": messages})
    }

    fn post_once(&self, body: &str) -> std::result::Result<String, (Option<u16>, String, bool)> {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                if (200..300).contains(&status) {
                    Ok(text)
                } else {
                    let retryable = status >= 500 || status == 429;
                    Err((Some(status), truncate(&text, 200), retryable))
                }
            }
            Err(e) => Err((None, e.to_string(), true)),
        }
    }

    fn post(&self, body: &str) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Ok(text) => return Ok(text),
                Err((status, msg, retryable)) => {
                    if !retryable || attempt >= self.max_retries {
                        return Err(Error::Backend {
                            status,
                            msg: format!("{} after {} attempt(s): {msg}", self.url, attempt + 1),
                        });
                    }
                    let delay = self.retry_base * 2u32.saturating_pow(attempt);
                    log::warn!(
                        "request to {} failed ({}), retrying in {:?}",
                        self.url,
                        status.map(|s| s.to_string()).unwrap_or_else(|| msg.clone()),
                        delay
                    );
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Extracts `choices[0].message.content` from a chat-completions reply.
pub fn parse_completion(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| Error::Protocol(format!("reply is not JSON: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        // Some gateways return content parts.
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => {
            return Err(Error::Protocol(format!(
                "reply lacks choices[0].message.content: {}",
                truncate(body, 200)
            )))
        }
    };
    if text.trim().is_empty() {
        return Err(Error::Protocol("empty answer".into()));
    }
    Ok(text)
}

impl ChatBackend for HttpBackend {
    fn converse(&self, image: &InteractionImage, prompts: &[String]) -> Result<Vec<String>> {
        let image_b64 = encode_png_base64(image)?;
        let mut history = Vec::with_capacity(prompts.len() * 2);
        let mut answers = Vec::with_capacity(prompts.len());
        for (i, prompt) in prompts.iter().enumerate() {
            history.push(ChatTurn::user(prompt.clone(), i == 0));
            validate_history(&history)?;
            let body = self.request_body(&history, &image_b64).to_string();
            let answer = parse_completion(&self.post(&body)?)?;
            history.push(ChatTurn::assistant(answer.clone()));
            answers.push(answer);
        }
        Ok(answers)
    }
}

/// PNG-encodes an image and returns it as standard base64.
pub fn encode_png_base64(image: &InteractionImage) -> Result<String> {
    let (_, h, w) = image.pixels.dim();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image.pixels[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    let mut bytes = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Encoding(format!("image `{}`: {e}", image.id)))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

fn cache_file(image_id: &str, cache_dir: &Path) -> Result<PathBuf> {
    let bad = image_id.is_empty()
        || image_id.starts_with('.')
        || image_id.contains(['/', '\\', '\0']);
    if bad {
        return Err(Error::Argument(format!("image id `{image_id}` is not usable as a file name")));
    }
    Ok(cache_dir.join(format!("{image_id}.json")))
}

/// Reads a cached transcript. Missing files are absent; unreadable or
/// malformed files are renamed to `*.corrupt`, logged, and treated as absent.
pub fn cache_get(image_id: &str, cache_dir: &Path) -> Option<ReasoningTranscript> {
    let path = cache_file(image_id, cache_dir).ok()?;
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
        Err(e) => {
            log::warn!("cannot read cached transcript {}: {e}", path.display());
            return None;
        }
    };
    let parsed = serde_json::from_str::<ReasoningTranscript>(&text)
        .map_err(|e| e.to_string())
        .and_then(|t| {
            if t.image_id != image_id {
                Err(format!("file holds transcript for `{}`", t.image_id))
            } else {
                t.validate().map(|_| t).map_err(|e| e.to_string())
            }
        });
    match parsed {
        Ok(t) => Some(t),
        Err(msg) => {
            let quarantine = path.with_extension("json.corrupt");
            log::warn!(
                "corrupt cached transcript {} ({msg}); moved to {}",
                path.display(),
                quarantine.display()
            );
            if let Err(e) = std::fs::rename(&path, &quarantine) {
                log::warn!("could not quarantine {}: {e}", path.display());
            }
            None
        }
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Atomically stores a transcript as `<cache_dir>/<image_id>.json`.
pub fn cache_put(transcript: &ReasoningTranscript, cache_dir: &Path) -> Result<()> {
    transcript.validate()?;
    let path = cache_file(&transcript.image_id, cache_dir)?;
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let tmp = cache_dir.join(format!(
        ".{}.{}.{}.tmp",
        transcript.image_id,
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let text = serde_json::to_string_pretty(transcript)? + "\n";
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(&path, e)
    })
}
