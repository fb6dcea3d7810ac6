//! Service configuration: a TOML file plus environment overrides.
//!
//! ```toml
//! [gate]
//! threshold = 0.7
//!
//! [forge]
//! parallelism = 4
//! poll_interval_ms = 2000
//!
//! [providers.language_model]
//! kind = "http"
//! base_url = "http://localhost:9000"
//! token_env = "LLM_TOKEN"
//!
//! [providers.scorer]
//! kind = "mock"
//! scores = { "garden path" = 0.41 }
//! ```
//!
//! Environment variables:
//!
//! | variable                          | effect                                    |
//! |-----------------------------------|-------------------------------------------|
//! | `STORYFORGE_DATA_DIR`             | data directory                            |
//! | `STORYFORGE_GATE_THRESHOLD`       | plausibility threshold                    |
//! | `STORYFORGE_{LLM,MESH,SCORER,TTS}_URL`   | switch that provider to HTTP at the URL |
//! | `STORYFORGE_{LLM,MESH,SCORER,TTS}_TOKEN` | bearer token for that provider       |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::ForgeConfig;
use crate::gate::{GateConfig, GateError};
use crate::providers::Providers;
use crate::providers::http::{
    HttpEndpoint, HttpLanguageModel, HttpMeshGenerator, HttpSimilarityScorer, HttpSpeechSynthesizer,
};
use crate::providers::mock::{
    HashScorer, HeuristicLanguageModel, MockJobBehavior, MockMeshGenerator, SilentSpeech,
    SpeechTiming,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("provider setup failed: {0}")]
    Provider(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSettings {
    pub threshold: f64,
    pub review_timeout_secs: u64,
}

impl Default for GateSettings {
    fn default() -> Self {
        let d = GateConfig::default();
        Self {
            threshold: d.threshold(),
            review_timeout_secs: d.review_timeout.as_secs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeSettings {
    pub parallelism: usize,
    pub timeout_secs: u64,
    pub poll_interval_ms: u64,
}

impl Default for ForgeSettings {
    fn default() -> Self {
        let d = ForgeConfig::default();
        Self {
            parallelism: d.parallelism,
            timeout_secs: d.timeout.as_secs(),
            poll_interval_ms: d.poll_interval.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LanguageModelConfig {
    Mock,
    Http(HttpEndpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshGeneratorConfig {
    Mock {
        /// Polls that report `running` before each job succeeds.
        #[serde(default = "one")]
        running_polls: usize,
    },
    Http(HttpEndpoint),
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    Mock {
        #[serde(default)]
        floor: Option<f64>,
        /// Fixed scores per keyword.
        #[serde(default)]
        scores: BTreeMap<String, f64>,
    },
    Http {
        base_url: String,
        #[serde(default)]
        token_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        /// The service returns cosine similarity in `[-1, 1]`.
        #[serde(default)]
        raw_cosine: bool,
    },
}

fn default_timeout() -> u64 {
    HttpEndpoint::new("").timeout_secs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeechConfig {
    Mock {
        #[serde(default = "default_seconds_per_word")]
        seconds_per_word: f64,
    },
    Http(HttpEndpoint),
}

fn default_seconds_per_word() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub language_model: LanguageModelConfig,
    pub mesh_generator: MeshGeneratorConfig,
    pub scorer: ScorerConfig,
    pub speech: SpeechConfig,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            language_model: LanguageModelConfig::Mock,
            mesh_generator: MeshGeneratorConfig::Mock { running_polls: 1 },
            scorer: ScorerConfig::Mock {
                floor: None,
                scores: BTreeMap::new(),
            },
            speech: SpeechConfig::Mock {
                seconds_per_word: default_seconds_per_word(),
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: Option<PathBuf>,
    pub gate: GateSettings,
    pub forge: ForgeSettings,
    pub providers: ProvidersConfig,
}

impl ServiceConfig {
    /// All-mock providers with fast polling, for tests and offline builds.
    pub fn offline() -> Self {
        let mut config = Self::default();
        config.forge.poll_interval_ms = 5;
        config
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Applies `STORYFORGE_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(dir) = var("STORYFORGE_DATA_DIR") {
            self.data_dir = Some(PathBuf::from(dir));
        }
        if let Some(raw) = var("STORYFORGE_GATE_THRESHOLD") {
            self.gate.threshold = raw
                .trim()
                .parse()
                .map_err(|_| ConfigError::Parse(format!("STORYFORGE_GATE_THRESHOLD={raw:?}")))?;
        }
        let endpoint = |prefix: &str| {
            var(&format!("STORYFORGE_{prefix}_URL")).map(|url| HttpEndpoint {
                base_url: url,
                token_env: Some(format!("STORYFORGE_{prefix}_TOKEN")),
                timeout_secs: default_timeout(),
            })
        };
        if let Some(e) = endpoint("LLM") {
            self.providers.language_model = LanguageModelConfig::Http(e);
        }
        if let Some(e) = endpoint("MESH") {
            self.providers.mesh_generator = MeshGeneratorConfig::Http(e);
        }
        if let Some(e) = endpoint("SCORER") {
            let raw_cosine = matches!(
                self.providers.scorer,
                ScorerConfig::Http { raw_cosine: true, .. }
            );
            self.providers.scorer = ScorerConfig::Http {
                base_url: e.base_url,
                token_env: e.token_env,
                timeout_secs: e.timeout_secs,
                raw_cosine,
            };
        }
        if let Some(e) = endpoint("TTS") {
            self.providers.speech = SpeechConfig::Http(e);
        }
        Ok(())
    }

    pub fn gate_config(&self) -> Result<GateConfig, ConfigError> {
        let mut gate = GateConfig::with_threshold(self.gate.threshold)?;
        gate.review_timeout = Duration::from_secs(self.gate.review_timeout_secs);
        Ok(gate)
    }

    pub fn forge_config(&self) -> ForgeConfig {
        ForgeConfig {
            parallelism: self.forge.parallelism.max(1),
            timeout: Duration::from_secs(self.forge.timeout_secs),
            poll_interval: Duration::from_millis(self.forge.poll_interval_ms),
        }
    }

    pub fn build_providers(&self) -> Result<Providers, ConfigError> {
        let p = &self.providers;
        let err = |e: crate::providers::ProviderError| ConfigError::Provider(e.to_string());
        let mut out = Providers::mock();
        out.language_model = match &p.language_model {
            LanguageModelConfig::Mock => Arc::new(HeuristicLanguageModel::default()),
            LanguageModelConfig::Http(e) => Arc::new(HttpLanguageModel::new(e).map_err(err)?),
        };
        out.mesh_generator = match &p.mesh_generator {
            MeshGeneratorConfig::Mock { running_polls } => Arc::new(
                MockMeshGenerator::with_behavior(MockJobBehavior::RunningFor(*running_polls)),
            ),
            MeshGeneratorConfig::Http(e) => Arc::new(HttpMeshGenerator::new(e).map_err(err)?),
        };
        out.scorer = match &p.scorer {
            ScorerConfig::Mock { floor, scores } => {
                let mut s = floor.map_or_else(HashScorer::default, HashScorer::with_floor);
                for (keyword, score) in scores {
                    s = s.with_score(keyword, *score);
                }
                Arc::new(s)
            }
            ScorerConfig::Http {
                base_url,
                token_env,
                timeout_secs,
                raw_cosine,
            } => {
                let endpoint = HttpEndpoint {
                    base_url: base_url.clone(),
                    token_env: token_env.clone(),
                    timeout_secs: *timeout_secs,
                };
                Arc::new(HttpSimilarityScorer::new(&endpoint, *raw_cosine).map_err(err)?)
            }
        };
        out.speech = match &p.speech {
            SpeechConfig::Mock { seconds_per_word } => {
                Arc::new(SilentSpeech::new(SpeechTiming::SecondsPerWord(*seconds_per_word)))
            }
            SpeechConfig::Http(e) => Arc::new(HttpSpeechSynthesizer::new(e).map_err(err)?),
        };
        Ok(out)
    }
}
