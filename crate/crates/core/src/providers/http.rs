//! JSON-over-HTTP provider adapters.
//!
//! Wire contracts (all paths relative to the configured base URL):
//!
//! | provider   | request                                             | response                          |
//! |------------|-----------------------------------------------------|-----------------------------------|
//! | language   | `POST /complete` `{step, instruction, story, context}` | `{"text": "..."}`              |
//! | mesh       | `POST /jobs` `{keyword, kind, prompt}`              | `{"job_id": "..."}`               |
//! |            | `GET /jobs/{id}`                                    | `{"status": "running" ...}`       |
//! |            | `GET <artifact url>`                                | raw bytes                         |
//! | similarity | `POST /score` `{image_base64, text}`                | `{"score": f64}`                  |
//! | speech     | `POST /synthesize` `{text, language}`               | audio bytes, `Content-Type: audio/*` |
//!
//! A bearer token is read from the environment variable named in the config.

use std::time::Duration;

use base64::Engine;
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    ArtifactUrl, AudioClip, JobId, JobStatus, LanguageModel, LmRequest, MeshGenerator,
    ProviderError, SimilarityScorer, SpeechSynthesizer,
};
use crate::forge::GenerationPrompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEndpoint {
    pub base_url: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

impl HttpEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            token_env: None,
            timeout_secs: default_timeout_secs(),
        }
    }
}

struct Transport {
    client: Client,
    base: String,
    token: Option<String>,
}

impl Transport {
    fn new(endpoint: &HttpEndpoint) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        let token = endpoint
            .token_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        Ok(Self {
            client,
            base: endpoint.base_url.trim_end_matches('/').to_owned(),
            token,
        })
    }

    fn url(&self, path: &str) -> String {
        if path.starts_with("http://") || path.starts_with("https://") {
            path.to_owned()
        } else {
            format!("{}/{}", self.base, path.trim_start_matches('/'))
        }
    }

    fn send(&self, req: RequestBuilder) -> Result<Response, ProviderError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req
            .send()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body = resp.text().unwrap_or_default();
        let message = format!("HTTP {status}: {body}");
        Err(if status.is_server_error() || status.as_u16() == 429 {
            ProviderError::Unavailable(message)
        } else {
            ProviderError::Rejected(message)
        })
    }

    fn json<T: for<'de> Deserialize<'de>>(resp: Response) -> Result<T, ProviderError> {
        resp.json()
            .map_err(|e| ProviderError::InvalidResponse(e.to_string()))
    }
}

pub struct HttpLanguageModel {
    transport: Transport,
}

impl HttpLanguageModel {
    pub fn new(endpoint: &HttpEndpoint) -> Result<Self, ProviderError> {
        Ok(Self {
            transport: Transport::new(endpoint)?,
        })
    }
}

#[derive(Deserialize)]
struct TextOut {
    text: String,
}

impl LanguageModel for HttpLanguageModel {
    fn complete(&self, request: &LmRequest) -> Result<String, ProviderError> {
        let t = &self.transport;
        let resp = t.send(t.client.post(t.url("complete")).json(request))?;
        Ok(Transport::json::<TextOut>(resp)?.text)
    }
}

pub struct HttpMeshGenerator {
    transport: Transport,
}

impl HttpMeshGenerator {
    pub fn new(endpoint: &HttpEndpoint) -> Result<Self, ProviderError> {
        Ok(Self {
            transport: Transport::new(endpoint)?,
        })
    }
}

#[derive(Deserialize)]
struct JobOut {
    job_id: String,
}

impl MeshGenerator for HttpMeshGenerator {
    fn submit(&self, prompt: &GenerationPrompt) -> Result<JobId, ProviderError> {
        let t = &self.transport;
        let body = json!({
            "keyword": prompt.keyword,
            "kind": prompt.kind,
            "prompt": prompt.prompt_text,
        });
        let resp = t.send(t.client.post(t.url("jobs")).json(&body))?;
        Ok(JobId(Transport::json::<JobOut>(resp)?.job_id))
    }

    fn poll(&self, job: &JobId) -> Result<JobStatus, ProviderError> {
        let t = &self.transport;
        let resp = t.send(t.client.get(t.url(&format!("jobs/{}", job.0))))?;
        Transport::json(resp)
    }

    fn fetch(&self, artifact: &ArtifactUrl) -> Result<Vec<u8>, ProviderError> {
        let t = &self.transport;
        let resp = t.send(t.client.get(t.url(&artifact.0)))?;
        resp.bytes()
            .map(|b| b.to_vec())
            .map_err(|e| ProviderError::Unavailable(e.to_string()))
    }
}

pub struct HttpSimilarityScorer {
    transport: Transport,
    raw_cosine: bool,
}

impl HttpSimilarityScorer {
    /// With `raw_cosine`, the service's cosine similarity in `[-1, 1]` is
    /// mapped onto `[0, 1]` as `(x + 1) / 2`.
    pub fn new(endpoint: &HttpEndpoint, raw_cosine: bool) -> Result<Self, ProviderError> {
        Ok(Self {
            transport: Transport::new(endpoint)?,
            raw_cosine,
        })
    }
}

#[derive(Deserialize)]
struct ScoreOut {
    score: f64,
}

/// Maps a raw provider value into the gate's `[0, 1]` scale.
pub fn normalize_score(raw: f64, raw_cosine: bool) -> Result<f64, ProviderError> {
    let (lo, hi) = if raw_cosine { (-1.0, 1.0) } else { (0.0, 1.0) };
    if !raw.is_finite() || raw < lo || raw > hi {
        return Err(ProviderError::InvalidResponse(format!(
            "score {raw} outside [{lo}, {hi}]"
        )));
    }
    Ok(if raw_cosine { (raw + 1.0) / 2.0 } else { raw })
}

impl SimilarityScorer for HttpSimilarityScorer {
    fn score(&self, image_png: &[u8], text: &str) -> Result<f64, ProviderError> {
        let t = &self.transport;
        let body = json!({
            "image_base64": base64::engine::general_purpose::STANDARD.encode(image_png),
            "text": text,
        });
        let resp = t.send(t.client.post(t.url("score")).json(&body))?;
        normalize_score(Transport::json::<ScoreOut>(resp)?.score, self.raw_cosine)
    }
}

pub struct HttpSpeechSynthesizer {
    transport: Transport,
}

impl HttpSpeechSynthesizer {
    pub fn new(endpoint: &HttpEndpoint) -> Result<Self, ProviderError> {
        Ok(Self {
            transport: Transport::new(endpoint)?,
        })
    }
}

fn extension_for(content_type: &str) -> Option<&'static str> {
    match content_type.split(';').next()?.trim() {
        "audio/wav" | "audio/x-wav" | "audio/wave" => Some("wav"),
        _ => None,
    }
}

impl SpeechSynthesizer for HttpSpeechSynthesizer {
    fn synthesize(&self, text: &str, language: &str) -> Result<AudioClip, ProviderError> {
        let t = &self.transport;
        let body = json!({ "text": text, "language": language });
        let resp = t.send(t.client.post(t.url("synthesize")).json(&body))?;
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_owned();
        let extension = extension_for(&content_type).ok_or_else(|| {
            ProviderError::InvalidResponse(format!("unsupported audio type {content_type:?}"))
        })?;
        let bytes = resp
            .bytes()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        Ok(AudioClip {
            bytes: bytes.to_vec(),
            extension: extension.into(),
        })
    }
}
