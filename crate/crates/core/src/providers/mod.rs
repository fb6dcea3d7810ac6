//! Contracts for the external model services the pipeline drives.
//!
//! Each provider is a blocking, thread-safe trait object. [`mock`] holds the
//! deterministic offline implementations; [`http`] holds the JSON-over-HTTP
//! adapters.

pub mod http;
pub mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::GenerationPrompt;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider rejected the request: {0}")]
    Rejected(String),
    #[error("provider returned an invalid response: {0}")]
    InvalidResponse(String),
}

/// One structured-output request to the language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    /// Pipeline step number (1-4).
    pub step: u8,
    pub instruction: String,
    pub story: String,
    pub context: serde_json::Value,
}

pub trait LanguageModel: Send + Sync {
    /// Returns the raw text of the model's answer.
    fn complete(&self, request: &LmRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JobId(pub String);

/// Location of a finished artifact, resolved through [`MeshGenerator::fetch`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactUrl(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedArtifacts {
    pub mesh: ArtifactUrl,
    /// Frontal render; when absent the forge renders one from the mesh.
    pub frontal_view: Option<ArtifactUrl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded { artifacts: GeneratedArtifacts },
    Rejected { reason: String },
    Failed { reason: String },
}

/// Text-to-3D job API: submit, poll, fetch.
pub trait MeshGenerator: Send + Sync {
    fn submit(&self, prompt: &GenerationPrompt) -> Result<JobId, ProviderError>;
    fn poll(&self, job: &JobId) -> Result<JobStatus, ProviderError>;
    fn fetch(&self, artifact: &ArtifactUrl) -> Result<Vec<u8>, ProviderError>;
}

/// Image-text similarity. Implementations must return a score in `[0, 1]`
/// and be deterministic for identical inputs.
pub trait SimilarityScorer: Send + Sync {
    fn score(&self, image_png: &[u8], text: &str) -> Result<f64, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioClip {
    pub bytes: Vec<u8>,
    /// File extension of the container, e.g. `wav`.
    pub extension: String,
}

pub trait SpeechSynthesizer: Send + Sync {
    fn synthesize(&self, text: &str, language: &str) -> Result<AudioClip, ProviderError>;
}

/// Optional image-to-text hook for photographed pages. Disabled by default.
pub trait OcrProvider: Send + Sync {
    fn recognize(&self, image: &[u8]) -> Result<String, ProviderError>;
}

#[derive(Clone)]
pub struct Providers {
    pub language_model: Arc<dyn LanguageModel>,
    pub mesh_generator: Arc<dyn MeshGenerator>,
    pub scorer: Arc<dyn SimilarityScorer>,
    pub speech: Arc<dyn SpeechSynthesizer>,
    pub ocr: Option<Arc<dyn OcrProvider>>,
}

impl Providers {
    /// All-offline deterministic providers.
    pub fn mock() -> Self {
        Self {
            language_model: Arc::new(mock::HeuristicLanguageModel::default()),
            mesh_generator: Arc::new(mock::MockMeshGenerator::default()),
            scorer: Arc::new(mock::HashScorer::default()),
            speech: Arc::new(mock::SilentSpeech::default()),
            ocr: None,
        }
    }
}

impl std::fmt::Debug for Providers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Providers")
            .field("ocr", &self.ocr.is_some())
            .finish_non_exhaustive()
    }
}
