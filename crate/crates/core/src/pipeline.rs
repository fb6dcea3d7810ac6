//! The per-book state machine over the ten steps, with a journal snapshot
//! after every transition so a restarted service resumes where it stopped.
//!
//! ```text
//! received -> extracting -> contextualizing -> describing -> generating
//!   -> scoring -> [awaiting_review] -> assembling -> ready
//! ```
//!
//! Any non-terminal state may fall to `failed`. `awaiting_review` is skipped
//! when no asset is suspicious.

use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{
    self, AssemblyError, ManifestAsset, NarrationTrack, PageLayout, assemble_manifest,
    attach_anchors, compute_popup_schedule, synthesize_narration, write_bundle,
};
use crate::config::{ConfigError, ServiceConfig};
use crate::forge::eta::{EtaModel, ProvisionalEta, estimate_generation_seconds};
use crate::forge::{
    AssetEvent, AssetRecord, AssetStatus, ForgeConfig, ForgeError, ProfileRef,
    build_generation_prompt, generate_all,
};
use crate::gate::{
    DecidedBy, GateConfig, GateError, ReviewAction, ReviewBoard, Verdict, score_asset,
};
use crate::ingest::{IngestError, KeywordOccurrence, StoryDocument, locate_occurrences};
use crate::narrative::{
    CharacterProfile, ExtractedEntities, HistoricalContext, Narrator, ObjectProfile, RetryPolicy,
    TemplateSet,
};
use crate::providers::Providers;
use crate::store::{BlobRef, BlobStore, Journal, sha256_hex};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Received,
    Extracting,
    Contextualizing,
    Describing,
    Generating,
    Scoring,
    AwaitingReview,
    Assembling,
    Ready,
    Failed,
}

impl RunState {
    pub const ALL: [RunState; 10] = [
        RunState::Received,
        RunState::Extracting,
        RunState::Contextualizing,
        RunState::Describing,
        RunState::Generating,
        RunState::Scoring,
        RunState::AwaitingReview,
        RunState::Assembling,
        RunState::Ready,
        RunState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Received => "received",
            RunState::Extracting => "extracting",
            RunState::Contextualizing => "contextualizing",
            RunState::Describing => "describing",
            RunState::Generating => "generating",
            RunState::Scoring => "scoring",
            RunState::AwaitingReview => "awaiting_review",
            RunState::Assembling => "assembling",
            RunState::Ready => "ready",
            RunState::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Ready | RunState::Failed)
    }

    /// States in which the runner has nothing to do.
    pub fn is_resting(self) -> bool {
        matches!(
            self,
            RunState::AwaitingReview | RunState::Ready | RunState::Failed
        )
    }

    pub fn can_transition_to(self, to: RunState) -> bool {
        use RunState::*;
        if to == Failed {
            return !self.is_terminal();
        }
        matches!(
            (self, to),
            (Received, Extracting)
                | (Extracting, Contextualizing)
                | (Contextualizing, Describing)
                | (Describing, Generating)
                | (Generating, Scoring)
                | (Scoring, AwaitingReview)
                | (Scoring, Assembling)
                | (AwaitingReview, Assembling)
                | (Assembling, Ready)
        )
    }
}

impl std::fmt::Display for RunState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("book {0} not found")]
    NotFound(String),
    #[error("{operation} is not allowed while book {book_id} is {state}")]
    WrongState {
        book_id: String,
        state: RunState,
        operation: &'static str,
    },
    #[error("story is empty")]
    EmptyStory,
    #[error("asset {0} not found")]
    UnknownAsset(String),
    #[error("asset {0} is not under review")]
    NotSuspicious(String),
    #[error("asset {asset_id} already finalized as {existing:?}")]
    VerdictConflict { asset_id: String, existing: Verdict },
    #[error("no OCR provider configured")]
    OcrUnavailable,
    #[error("OCR failed: {0}")]
    OcrFailed(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("configuration: {0}")]
    Config(String),
}

impl PipelineError {
    /// Stable machine-readable name.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::NotFound(_) => "NotFound",
            PipelineError::WrongState { .. } => "WrongState",
            PipelineError::EmptyStory => "EmptyStory",
            PipelineError::UnknownAsset(_) => "NotFound",
            PipelineError::NotSuspicious(_) => "NotSuspicious",
            PipelineError::VerdictConflict { .. } => "VerdictConflict",
            PipelineError::OcrUnavailable => "OcrUnavailable",
            PipelineError::OcrFailed(_) => "OcrFailed",
            PipelineError::Storage(_) => "Storage",
            PipelineError::Config(_) => "Config",
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Storage(e.to_string())
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

/// Why a run ended in `failed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    /// State the run was in when it failed.
    pub state: RunState,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eta {
    pub seconds: u64,
    /// Word-count based, before the model count is known.
    pub provisional: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub blob: BlobRef,
    pub sha256: String,
    pub manifest_sha256: String,
}

/// Everything known about one book. A fresh copy is journaled after every
/// change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookState {
    pub book_id: String,
    /// Incremented on every resubmission.
    pub run_id: u32,
    pub title: String,
    pub language: String,
    pub body: String,
    pub created_at: DateTime<Utc>,
    pub state: RunState,
    pub step_timestamps: BTreeMap<RunState, DateTime<Utc>>,
    pub error: Option<RunFailure>,
    pub eta: Eta,
    pub entities: Option<ExtractedEntities>,
    pub historical_context: Option<HistoricalContext>,
    pub character_profiles: Option<Vec<CharacterProfile>>,
    pub object_profiles: Option<Vec<ObjectProfile>>,
    pub occurrences: Vec<KeywordOccurrence>,
    pub assets: Vec<AssetRecord>,
    pub review: ReviewBoard,
    pub bundle: Option<BundleInfo>,
}

impl BookState {
    fn document(&self) -> Result<StoryDocument, IngestError> {
        StoryDocument::new(&self.book_id, &self.title, &self.language, &self.body)
    }

    fn enter(&mut self, to: RunState, now: DateTime<Utc>) {
        debug_assert!(
            self.state.can_transition_to(to),
            "{} -> {}",
            self.state,
            to
        );
        self.state = to;
        self.step_timestamps.insert(to, now);
    }

    pub fn model_count(&self) -> usize {
        self.assets
            .iter()
            .filter(|a| a.status != AssetStatus::Failed && a.status != AssetStatus::Removed)
            .count()
    }

    fn content_key(&self) -> String {
        content_key(&self.title, &self.language, &self.body)
    }
}

fn content_key(title: &str, language: &str, body: &str) -> String {
    sha256_hex(format!("{title}\0{language}\0{body}").as_bytes())
}

/// Ids derive from content so the same story yields the same book, asset
/// and manifest bytes on every build path.
fn book_id_for(content_key: &str, nonce: usize) -> String {
    sha256_hex(format!("{content_key}\0{nonce}").as_bytes())[..16].to_owned()
}

pub fn asset_id_for(book_id: &str, keyword: &str) -> String {
    sha256_hex(format!("{book_id}\0{keyword}").as_bytes())[..16].to_owned()
}

pub fn frontal_view_url(book_id: &str, asset_id: &str) -> String {
    format!("/v1/books/{book_id}/assets/{asset_id}/frontal")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookView {
    pub book_id: String,
    pub run_id: u32,
    pub title: String,
    pub language: String,
    pub state: RunState,
    pub created_at: DateTime<Utc>,
    pub step_timestamps: BTreeMap<RunState, DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<RunFailure>,
    pub model_count: usize,
    pub suspicious_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_seconds: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_provisional: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle_sha256: Option<String>,
}

impl From<&BookState> for BookView {
    fn from(s: &BookState) -> Self {
        let live = !s.state.is_terminal();
        Self {
            book_id: s.book_id.clone(),
            run_id: s.run_id,
            title: s.title.clone(),
            language: s.language.clone(),
            state: s.state,
            created_at: s.created_at,
            step_timestamps: s.step_timestamps.clone(),
            error: s.error.clone(),
            model_count: s.model_count(),
            suspicious_count: s.review.review_items().len(),
            eta_seconds: live.then_some(s.eta.seconds),
            eta_provisional: live.then_some(s.eta.provisional),
            bundle_sha256: s.bundle.as_ref().map(|b| b.sha256.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookSummary {
    pub book_id: String,
    pub title: String,
    pub state: RunState,
    pub model_count: usize,
    pub created_at: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_seconds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub asset_id: String,
    pub keyword: String,
    pub score: f64,
    pub verdict: Verdict,
    pub decided_by: DecidedBy,
    pub frontal_view_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub bytes: Vec<u8>,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub gate: GateConfig,
    pub forge: ForgeConfig,
    pub retry: RetryPolicy,
    pub eta: EtaModel,
    pub provisional_eta: ProvisionalEta,
    /// Start a background run on create, review completion and resubmission.
    pub autorun: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            forge: ForgeConfig::default(),
            retry: RetryPolicy::default(),
            eta: EtaModel::shipped(),
            provisional_eta: ProvisionalEta::shipped(),
            autorun: false,
        }
    }
}

impl PipelineSettings {
    /// Fast polling and no retry back-off, for mock providers.
    pub fn offline() -> Self {
        Self {
            forge: ForgeConfig {
                poll_interval: Duration::from_millis(1),
                ..ForgeConfig::default()
            },
            retry: RetryPolicy::immediate(2),
            ..Self::default()
        }
    }

    pub fn from_config(config: &ServiceConfig) -> Result<Self, ConfigError> {
        Ok(Self {
            gate: config.gate_config()?,
            forge: config.forge_config(),
            ..Self::default()
        })
    }
}

struct Inner {
    store: BlobStore,
    journal: Journal,
    books: Mutex<BTreeMap<String, BookState>>,
    providers: Providers,
    templates: TemplateSet,
    settings: PipelineSettings,
    stop: Arc<AtomicBool>,
    running: Mutex<BTreeSet<String>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

/// Handle to the pipeline. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct PipelineService {
    inner: Arc<Inner>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Outcome of one step: either move on, stop quietly, or fail the run.
enum Step {
    Advance,
    Pause,
    Fail { kind: String, message: String },
}

fn fail(kind: &str, message: impl std::fmt::Display) -> Step {
    Step::Fail {
        kind: kind.to_owned(),
        message: message.to_string(),
    }
}

fn narrative_kind(e: &crate::narrative::NarrativeError) -> &'static str {
    use crate::narrative::NarrativeError as N;
    match e {
        N::EmptyStory => "EmptyStory",
        N::ProviderUnavailable { .. } => "ProviderUnavailable",
        N::ProviderRejected { .. } => "ProviderRejected",
        N::MalformedOutput { .. } => "MalformedOutput",
        N::SchemaViolation { .. } => "SchemaViolation",
        N::Template { .. } => "Template",
    }
}

fn forge_kind(e: &ForgeError) -> &'static str {
    match e {
        ForgeError::IncompleteProfile { .. } => "IncompleteProfile",
        ForgeError::ProviderUnavailable(_) => "ProviderUnavailable",
        ForgeError::ProviderRejectedPrompt(_) => "ProviderRejectedPrompt",
        ForgeError::GenerationFailed(_) => "GenerationFailed",
        ForgeError::GenerationTimeout(_) => "GenerationTimeout",
        ForgeError::IllegalTransition { .. } => "IllegalTransition",
        ForgeError::InvalidMesh(_) => "InvalidMesh",
        ForgeError::Render(_) => "Render",
        ForgeError::Store(_) => "Storage",
        ForgeError::Interrupted => "Interrupted",
    }
}

fn assembly_kind(e: &AssemblyError) -> &'static str {
    match e {
        AssemblyError::EmptyBook => "EmptyBook",
        AssemblyError::InvalidOccurrences(_) => "InvalidOccurrences",
        AssemblyError::TtsUnavailable(_) => "TtsUnavailable",
        AssemblyError::ZeroDurationAudio(_) => "ZeroDurationAudio",
        AssemblyError::InvalidAudio(_) => "InvalidAudio",
        AssemblyError::InvalidSpeechRate(_) => "InvalidSpeechRate",
        AssemblyError::DanglingReference(_) => "DanglingReference",
        AssemblyError::RemovedAssetReferenced(_) => "RemovedAssetReferenced",
        AssemblyError::DuplicatePopup(_) => "DuplicatePopup",
        AssemblyError::Store(_) => "Storage",
        AssemblyError::Bundle(_) => "Bundle",
    }
}

impl PipelineService {
    /// Opens (or creates) a data directory and replays its journal.
    pub fn open(
        data_dir: impl AsRef<Path>,
        providers: Providers,
        settings: PipelineSettings,
    ) -> Result<Self, PipelineError> {
        let data_dir = data_dir.as_ref();
        std::fs::create_dir_all(data_dir)?;
        let store = BlobStore::open(data_dir.join("blobs"))?;
        let (journal, records) = Journal::open::<BookState>(data_dir.join("journal.jsonl"))?;
        let mut books = BTreeMap::new();
        for record in records {
            books.insert(record.book_id.clone(), record);
        }
        log::info!(
            "opened {} with {} book(s)",
            data_dir.display(),
            books.len()
        );
        Ok(Self {
            inner: Arc::new(Inner {
                store,
                journal,
                books: Mutex::new(books),
                providers,
                templates: TemplateSet::bundled(),
                settings,
                stop: Arc::new(AtomicBool::new(false)),
                running: Mutex::new(BTreeSet::new()),
                workers: Mutex::new(Vec::new()),
            }),
        })
    }

    /// Builds providers and settings from a config, falling back to
    /// `data_dir` when the config names none.
    pub fn from_config(
        config: &ServiceConfig,
        data_dir: Option<&Path>,
        autorun: bool,
    ) -> Result<Self, PipelineError> {
        let dir: PathBuf = data_dir
            .map(Path::to_owned)
            .or_else(|| config.data_dir.clone())
            .ok_or_else(|| PipelineError::Config("no data directory given".into()))?;
        let mut settings = PipelineSettings::from_config(config)?;
        settings.autorun = autorun;
        Self::open(dir, config.build_providers()?, settings)
    }

    pub fn store(&self) -> &BlobStore {
        &self.inner.store
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.inner.settings
    }

    /// Flag checked by every runner between provider calls.
    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.inner.stop)
    }

    fn persist(&self, state: &BookState) -> Result<(), PipelineError> {
        self.inner.journal.append(state)?;
        Ok(())
    }

    /// Mutates a book under the lock and journals the result.
    fn update<R>(
        &self,
        book_id: &str,
        f: impl FnOnce(&mut BookState) -> Result<R, PipelineError>,
    ) -> Result<R, PipelineError> {
        let mut books = lock(&self.inner.books);
        let book = books
            .get_mut(book_id)
            .ok_or_else(|| PipelineError::NotFound(book_id.to_owned()))?;
        let mut draft = book.clone();
        let out = f(&mut draft)?;
        if draft != *book {
            self.persist(&draft)?;
            *book = draft;
        }
        Ok(out)
    }

    pub fn snapshot(&self, book_id: &str) -> Result<BookState, PipelineError> {
        lock(&self.inner.books)
            .get(book_id)
            .cloned()
            .ok_or_else(|| PipelineError::NotFound(book_id.to_owned()))
    }

    pub fn create_book(
        &self,
        title: &str,
        body: &str,
        language: &str,
    ) -> Result<BookView, PipelineError> {
        let language = if language.trim().is_empty() {
            "en"
        } else {
            language.trim()
        };
        let probe = StoryDocument::new("probe", title, language, body).map_err(|e| match e {
            IngestError::EmptyStory => PipelineError::EmptyStory,
            other => PipelineError::Storage(other.to_string()),
        })?;
        let key = content_key(title, language, body);
        let now = Utc::now();
        let view = {
            let mut books = lock(&self.inner.books);
            let nonce = books.values().filter(|b| b.content_key() == key).count();
            let book_id = book_id_for(&key, nonce);
            let mut state = BookState {
                book_id: book_id.clone(),
                run_id: 1,
                title: title.to_owned(),
                language: language.to_owned(),
                body: body.to_owned(),
                created_at: now,
                state: RunState::Received,
                step_timestamps: BTreeMap::new(),
                error: None,
                eta: Eta {
                    seconds: self
                        .inner
                        .settings
                        .provisional_eta
                        .estimate_seconds(probe.word_count()),
                    provisional: true,
                },
                entities: None,
                historical_context: None,
                character_profiles: None,
                object_profiles: None,
                occurrences: Vec::new(),
                assets: Vec::new(),
                review: ReviewBoard::default(),
                bundle: None,
            };
            state.step_timestamps.insert(RunState::Received, now);
            self.persist(&state)?;
            let view = BookView::from(&state);
            books.insert(book_id, state);
            view
        };
        log::info!("created book {} ({:?})", view.book_id, view.title);
        if self.inner.settings.autorun {
            self.spawn(&view.book_id);
        }
        Ok(view)
    }

    /// Creates a book from a photographed page through the OCR hook.
    pub fn create_book_from_image(
        &self,
        title: &str,
        image: &[u8],
        language: &str,
    ) -> Result<BookView, PipelineError> {
        let ocr = self
            .inner
            .providers
            .ocr
            .as_ref()
            .ok_or(PipelineError::OcrUnavailable)?;
        let text = ocr
            .recognize(image)
            .map_err(|e| PipelineError::OcrFailed(e.to_string()))?;
        self.create_book(title, &text, language)
    }

    pub fn get_status(&self, book_id: &str) -> Result<BookView, PipelineError> {
        Ok(BookView::from(&self.snapshot(book_id)?))
    }

    /// Newest first.
    pub fn list_books(&self) -> Vec<BookSummary> {
        let books = lock(&self.inner.books);
        let mut out: Vec<BookSummary> = books
            .values()
            .map(|b| BookSummary {
                book_id: b.book_id.clone(),
                title: b.title.clone(),
                state: b.state,
                model_count: b.model_count(),
                created_at: b.created_at,
                eta_seconds: (!b.state.is_terminal()).then_some(b.eta.seconds),
            })
            .collect();
        out.sort_by(|a, b| {
            b.created_at
                .cmp(&a.created_at)
                .then_with(|| a.book_id.cmp(&b.book_id))
        });
        out
    }

    /// Every asset that was flagged suspicious, with its current verdict.
    pub fn review_items(&self, book_id: &str) -> Result<Vec<ReviewItem>, PipelineError> {
        let book = self.snapshot(book_id)?;
        Ok(book
            .review
            .review_items()
            .into_iter()
            .map(|r| ReviewItem {
                asset_id: r.asset_id.clone(),
                keyword: r.keyword_text.clone(),
                score: r.score,
                verdict: r.verdict,
                decided_by: r.decided_by,
                frontal_view_url: frontal_view_url(book_id, &r.asset_id),
            })
            .collect())
    }

    fn require(state: &BookState, wanted: RunState, operation: &'static str) -> Result<(), PipelineError> {
        if state.state == wanted {
            Ok(())
        } else {
            Err(PipelineError::WrongState {
                book_id: state.book_id.clone(),
                state: state.state,
                operation,
            })
        }
    }

    pub fn post_verdict(
        &self,
        book_id: &str,
        asset_id: &str,
        action: ReviewAction,
        actor: &str,
    ) -> Result<ReviewItem, PipelineError> {
        self.update(book_id, |book| {
            Self::require(book, RunState::AwaitingReview, "post_verdict")?;
            let record = book
                .review
                .apply_verdict(asset_id, action, actor, Utc::now())
                .map_err(|e| match e {
                    GateError::UnknownAsset(a) => PipelineError::UnknownAsset(a),
                    GateError::NotSuspicious(a) => PipelineError::NotSuspicious(a),
                    GateError::VerdictConflict { asset_id, existing } => {
                        PipelineError::VerdictConflict { asset_id, existing }
                    }
                    other => PipelineError::Storage(other.to_string()),
                })?;
            Ok(ReviewItem {
                frontal_view_url: frontal_view_url(book_id, &record.asset_id),
                asset_id: record.asset_id,
                keyword: record.keyword_text,
                score: record.score,
                verdict: record.verdict,
                decided_by: record.decided_by,
            })
        })
    }

    /// Resolves undecided items with the configured default and moves the
    /// book on to assembly.
    pub fn complete_review(&self, book_id: &str) -> Result<BookView, PipelineError> {
        let gate = self.inner.settings.gate.clone();
        let view = self.update(book_id, |book| {
            Self::require(book, RunState::AwaitingReview, "complete_review")?;
            let now = Utc::now();
            let summary = book.review.complete_review(&gate, now);
            log::info!("book {book_id}: review complete {summary:?}");
            book.enter(RunState::Assembling, now);
            Ok(BookView::from(&*book))
        })?;
        if self.inner.settings.autorun {
            self.spawn(book_id);
        }
        Ok(view)
    }

    /// Completes every review that has waited longer than the configured
    /// timeout. Returns the affected book ids.
    pub fn expire_reviews(&self, now: DateTime<Utc>) -> Vec<String> {
        let timeout = chrono::Duration::from_std(self.inner.settings.gate.review_timeout)
            .unwrap_or(chrono::Duration::MAX);
        let stale: Vec<String> = lock(&self.inner.books)
            .values()
            .filter(|b| b.state == RunState::AwaitingReview)
            .filter(|b| {
                b.step_timestamps
                    .get(&RunState::AwaitingReview)
                    .is_some_and(|t| now - *t >= timeout)
            })
            .map(|b| b.book_id.clone())
            .collect();
        stale
            .into_iter()
            .filter(|id| self.complete_review(id).is_ok())
            .collect()
    }

    pub fn download_bundle(&self, book_id: &str) -> Result<Bundle, PipelineError> {
        let book = self.snapshot(book_id)?;
        Self::require(&book, RunState::Ready, "download_bundle")?;
        let info = book
            .bundle
            .ok_or_else(|| PipelineError::Storage(format!("ready book {book_id} has no bundle")))?;
        let bytes = self.inner.store.get_verified(&info.blob)?;
        Ok(Bundle {
            bytes,
            sha256: info.sha256,
        })
    }

    /// Canonical manifest bytes of a ready book.
    pub fn manifest_json(&self, book_id: &str) -> Result<Vec<u8>, PipelineError> {
        let bundle = self.download_bundle(book_id)?;
        let manifest = assembler::read_bundle(&bundle.bytes)
            .map_err(|e| PipelineError::Storage(e.to_string()))?;
        Ok(manifest.to_canonical_json())
    }

    pub fn frontal_view(&self, book_id: &str, asset_id: &str) -> Result<Vec<u8>, PipelineError> {
        let book = self.snapshot(book_id)?;
        let view = book
            .assets
            .iter()
            .find(|a| a.asset_id == asset_id)
            .and_then(|a| a.frontal_view_ref.clone())
            .ok_or_else(|| PipelineError::UnknownAsset(asset_id.to_owned()))?;
        Ok(self.inner.store.get(&view)?)
    }

    /// Starts a new run of a failed book. Completed steps are not repeated;
    /// failed assets are generated again.
    pub fn resubmit(&self, book_id: &str) -> Result<BookView, PipelineError> {
        let view = self.update(book_id, |book| {
            Self::require(book, RunState::Failed, "resubmit")?;
            let now = Utc::now();
            book.run_id += 1;
            book.error = None;
            book.state = RunState::Received;
            book.step_timestamps = BTreeMap::from([(RunState::Received, now)]);
            for asset in &mut book.assets {
                if asset.status == AssetStatus::Failed {
                    *asset = AssetRecord::new(asset.asset_id.clone(), asset.prompt.clone(), now);
                }
            }
            Ok(BookView::from(&*book))
        })?;
        if self.inner.settings.autorun {
            self.spawn(book_id);
        }
        Ok(view)
    }

    /// Starts background runs for every book left mid-pipeline.
    pub fn resume_all(&self) -> Vec<String> {
        let pending: Vec<String> = lock(&self.inner.books)
            .values()
            .filter(|b| !b.state.is_resting())
            .map(|b| b.book_id.clone())
            .collect();
        for id in &pending {
            log::info!("resuming book {id}");
            self.spawn(id);
        }
        pending
    }

    /// Runs the book on a background thread unless a run is already active.
    pub fn spawn(&self, book_id: &str) {
        if self.inner.stop.load(Ordering::SeqCst) {
            return;
        }
        if !lock(&self.inner.running).insert(book_id.to_owned()) {
            return;
        }
        let svc = self.clone();
        let id = book_id.to_owned();
        let handle = std::thread::Builder::new()
            .name(format!("book-{id}"))
            .spawn(move || {
                loop {
                    if let Err(e) = svc.run_book(&id) {
                        log::error!("book {id}: {e}");
                    }
                    // Decide under the running lock so a concurrent spawn
                    // either sees this runner or finds the slot free.
                    let mut running = lock(&svc.inner.running);
                    let resting = svc.snapshot(&id).map_or(true, |b| b.state.is_resting());
                    if resting || svc.inner.stop.load(Ordering::SeqCst) {
                        running.remove(&id);
                        break;
                    }
                }
            })
            .expect("spawn runner thread");
        let mut workers = lock(&self.inner.workers);
        workers.retain(|h| !h.is_finished());
        workers.push(handle);
    }

    /// Stops all runners after their current provider call and waits for them.
    pub fn shutdown(&self) {
        self.inner.stop.store(true, Ordering::SeqCst);
        let handles: Vec<JoinHandle<()>> = lock(&self.inner.workers).drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    /// Polls until the book rests (review, ready or failed) or time runs out.
    pub fn wait_until_resting(
        &self,
        book_id: &str,
        timeout: Duration,
    ) -> Result<BookView, PipelineError> {
        let deadline = Instant::now() + timeout;
        loop {
            let view = self.get_status(book_id)?;
            if view.state.is_resting() || Instant::now() >= deadline {
                return Ok(view);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Drives the book forward on the calling thread until it rests or the
    /// stop flag is raised. Returns the state it stopped in.
    pub fn run_book(&self, book_id: &str) -> Result<RunState, PipelineError> {
        loop {
            let book = self.snapshot(book_id)?;
            if book.state.is_resting() || self.inner.stop.load(Ordering::SeqCst) {
                return Ok(book.state);
            }
            let step = match book.state {
                RunState::Received => Step::Advance,
                RunState::Extracting => self.step_extract(&book),
                RunState::Contextualizing => self.step_contextualize(&book),
                RunState::Describing => self.step_describe(&book),
                RunState::Generating => self.step_generate(&book),
                RunState::Scoring => self.step_score(&book),
                RunState::Assembling => self.step_assemble(&book),
                RunState::AwaitingReview | RunState::Ready | RunState::Failed => {
                    unreachable!("resting states return above")
                }
            };
            match step {
                Step::Advance => self.update(book_id, |b| {
                    let next = match b.state {
                        RunState::Received => RunState::Extracting,
                        RunState::Extracting => RunState::Contextualizing,
                        RunState::Contextualizing => RunState::Describing,
                        RunState::Describing => RunState::Generating,
                        RunState::Generating => RunState::Scoring,
                        RunState::Scoring => {
                            if b.review.review_queue().is_empty() {
                                RunState::Assembling
                            } else {
                                RunState::AwaitingReview
                            }
                        }
                        RunState::Assembling => RunState::Ready,
                        other => other,
                    };
                    if next != b.state {
                        log::info!("book {}: {} -> {}", b.book_id, b.state, next);
                        b.enter(next, Utc::now());
                    }
                    Ok(())
                })?,
                Step::Pause => return Ok(self.snapshot(book_id)?.state),
                Step::Fail { kind, message } => {
                    self.update(book_id, |b| {
                        log::warn!("book {}: failed in {}: {kind}: {message}", b.book_id, b.state);
                        b.error = Some(RunFailure {
                            state: b.state,
                            kind,
                            message,
                        });
                        b.enter(RunState::Failed, Utc::now());
                        Ok(())
                    })?;
                }
            }
        }
    }

    fn narrator(&self) -> Narrator<'_> {
        Narrator::new(
            self.inner.providers.language_model.as_ref(),
            &self.inner.templates,
        )
        .with_retry(self.inner.settings.retry.clone())
    }

    fn doc_or_fail(book: &BookState) -> Result<StoryDocument, Step> {
        book.document().map_err(|e| fail("EmptyStory", e))
    }

    fn step_extract(&self, book: &BookState) -> Step {
        if book.entities.is_some() {
            return Step::Advance;
        }
        let doc = match Self::doc_or_fail(book) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match self.narrator().extract_entities(&doc) {
            Ok(entities) if entities.characters.is_empty() && entities.objects.is_empty() => {
                fail("EmptyBook", "no main characters or objects were found")
            }
            Ok(entities) => self.save(book, |b| b.entities = Some(entities)),
            Err(e) => fail(narrative_kind(&e), e),
        }
    }

    fn step_contextualize(&self, book: &BookState) -> Step {
        if book.historical_context.is_some() {
            return Step::Advance;
        }
        let doc = match Self::doc_or_fail(book) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match self.narrator().infer_historical_context(&doc) {
            Ok(ctx) => self.save(book, |b| b.historical_context = Some(ctx)),
            Err(e) => fail(narrative_kind(&e), e),
        }
    }

    fn step_describe(&self, book: &BookState) -> Step {
        let doc = match Self::doc_or_fail(book) {
            Ok(d) => d,
            Err(s) => return s,
        };
        let (Some(entities), Some(ctx)) = (&book.entities, &book.historical_context) else {
            return fail("IllegalTransition", "describing without entities or context");
        };
        let narrator = self.narrator();
        let characters = match &book.character_profiles {
            Some(c) => c.clone(),
            None => match narrator.describe_characters(&doc, &entities.characters) {
                Ok(c) => {
                    if let Step::Fail { kind, message } =
                        self.save(book, |b| b.character_profiles = Some(c.clone()))
                    {
                        return Step::Fail { kind, message };
                    }
                    c
                }
                Err(e) => return fail(narrative_kind(&e), e),
            },
        };
        let objects = match &book.object_profiles {
            Some(o) => o.clone(),
            None => match narrator.describe_objects(&doc, &entities.objects, ctx) {
                Ok(o) => o,
                Err(e) => return fail(narrative_kind(&e), e),
            },
        };

        let keywords = entities.keywords();
        let occurrences = match locate_occurrences(&doc, &keywords) {
            Ok(scan) => {
                if !scan.misses.is_empty() {
                    log::warn!(
                        "book {}: not found in text, popping at page start: {:?}",
                        book.book_id,
                        scan.misses
                    );
                }
                scan.anchor_misses(&keywords)
            }
            Err(e) => return fail("InvalidKeywords", e),
        };
        let now = Utc::now();
        let mut assets = Vec::with_capacity(characters.len() + objects.len());
        let profiles = characters
            .iter()
            .map(ProfileRef::Character)
            .chain(objects.iter().map(ProfileRef::Object));
        for profile in profiles {
            match build_generation_prompt(profile, ctx) {
                Ok(prompt) => assets.push(AssetRecord::new(
                    asset_id_for(&book.book_id, &prompt.keyword),
                    prompt,
                    now,
                )),
                Err(e) => return fail(forge_kind(&e), e),
            }
        }
        let eta = NonZeroUsize::new(assets.len()).map(|n| Eta {
            seconds: estimate_generation_seconds(n, &self.inner.settings.eta),
            provisional: false,
        });
        self.save(book, |b| {
            b.object_profiles = Some(objects);
            b.occurrences = occurrences;
            b.assets = assets;
            if let Some(eta) = eta {
                b.eta = eta;
            }
        })
    }

    /// Stores a step result; the caller's snapshot state must still hold.
    fn save(&self, book: &BookState, f: impl FnOnce(&mut BookState)) -> Step {
        let expected = book.state;
        let result = self.update(&book.book_id, |b| {
            if b.state != expected {
                return Err(PipelineError::WrongState {
                    book_id: b.book_id.clone(),
                    state: b.state,
                    operation: "save step result",
                });
            }
            f(b);
            Ok(())
        });
        match result {
            Ok(()) => Step::Advance,
            Err(e) => fail(e.kind(), e),
        }
    }

    fn step_generate(&self, book: &BookState) -> Step {
        let mut records: Vec<AssetRecord> = book.assets.clone();
        let book_id = book.book_id.clone();
        let persist = |record: &AssetRecord| {
            let result = self.update(&book_id, |b| {
                if let Some(slot) = b.assets.iter_mut().find(|a| a.asset_id == record.asset_id) {
                    *slot = record.clone();
                }
                Ok(())
            });
            if let Err(e) = result {
                log::error!("book {book_id}: cannot persist asset {}: {e}", record.asset_id);
            }
        };
        let results = generate_all(
            &mut records,
            self.inner.providers.mesh_generator.as_ref(),
            &self.inner.store,
            &self.inner.settings.forge,
            &self.inner.stop,
            &persist,
        );
        if results.iter().any(|r| matches!(r, Err(ForgeError::Interrupted))) {
            return Step::Pause;
        }
        let mut first_error = None;
        for (record, result) in records.iter().zip(&results) {
            if let Err(e) = result {
                log::warn!("book {book_id}: dropping {:?}: {e}", record.keyword);
                first_error.get_or_insert(e.clone());
            }
        }
        if records.iter().all(|r| r.status == AssetStatus::Failed) {
            let e = first_error.unwrap_or(ForgeError::GenerationFailed("no assets".into()));
            return fail(forge_kind(&e), e);
        }
        Step::Advance
    }

    fn step_score(&self, book: &BookState) -> Step {
        let gate = &self.inner.settings.gate;
        for asset in &book.assets {
            if self.inner.stop.load(Ordering::SeqCst) {
                return Step::Pause;
            }
            if asset.status != AssetStatus::Generated || book.review.get(&asset.asset_id).is_some() {
                continue;
            }
            let record = match score_asset(
                asset,
                self.inner.providers.scorer.as_ref(),
                &self.inner.store,
                gate,
            ) {
                Ok(r) => r,
                Err(GateError::ScorerUnavailable(m)) => return fail("ScorerUnavailable", m),
                Err(e) => return fail("Scoring", e),
            };
            let asset_id = asset.asset_id.clone();
            let result = self.update(&book.book_id, |b| {
                b.review.insert(record);
                if let Some(a) = b.assets.iter_mut().find(|a| a.asset_id == asset_id) {
                    a.apply(AssetEvent::Scored, Utc::now())
                        .map_err(|e| PipelineError::Storage(e.to_string()))?;
                }
                Ok(())
            });
            if let Err(e) = result {
                return fail(e.kind(), e);
            }
        }
        let snapshot = match self.snapshot(&book.book_id) {
            Ok(s) => s,
            Err(e) => return fail(e.kind(), e),
        };
        if snapshot.review.review_queue().is_empty() {
            // Nothing to review: close the board so assembly sees final verdicts.
            let gate = gate.clone();
            if let Err(e) = self.update(&book.book_id, |b| {
                b.review.complete_review(&gate, Utc::now());
                Ok(())
            }) {
                return fail(e.kind(), e);
            }
        }
        Step::Advance
    }

    fn step_assemble(&self, book: &BookState) -> Step {
        match self.assemble(book) {
            Ok(info) => self.save(book, |b| {
                for asset in &mut b.assets {
                    if asset.status != AssetStatus::Scored {
                        continue;
                    }
                    let admitted = b.review.get(&asset.asset_id).is_some_and(|r| r.verdict.admits());
                    let event = if admitted { AssetEvent::Kept } else { AssetEvent::Removed };
                    let _ = asset.apply(event, Utc::now());
                }
                b.bundle = Some(info);
            }),
            Err(e) => fail(assembly_kind(&e), e),
        }
    }

    fn assemble(&self, book: &BookState) -> Result<BundleInfo, AssemblyError> {
        let doc = book
            .document()
            .map_err(|e| AssemblyError::InvalidOccurrences(e.to_string()))?;
        let mut manifest_assets = Vec::new();
        let mut ids = BTreeMap::new();
        for asset in &book.assets {
            let Some(record) = book.review.get(&asset.asset_id) else {
                continue;
            };
            if !record.verdict.admits() {
                continue;
            }
            let mesh = asset.mesh_ref.clone().ok_or_else(|| {
                AssemblyError::DanglingReference(format!("asset {} has no mesh", asset.asset_id))
            })?;
            ids.insert(asset.keyword.clone(), asset.asset_id.clone());
            manifest_assets.push(ManifestAsset::new(
                &asset.asset_id,
                &asset.keyword,
                asset.prompt.kind,
                mesh,
                record.score,
                record.verdict,
            ));
        }
        manifest_assets.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
        let occurrences: Vec<KeywordOccurrence> = book
            .occurrences
            .iter()
            .filter(|o| ids.contains_key(&o.keyword))
            .cloned()
            .collect();
        let pages = attach_anchors(&occurrences, doc.word_count())?;
        let narration = self.narrate(&pages, &doc)?;
        let mut popups = Vec::new();
        for (page, track) in pages.iter().zip(&narration) {
            popups.extend(compute_popup_schedule(page, track, &ids)?);
        }
        let manifest = assemble_manifest(
            &book.book_id,
            &book.title,
            &book.language,
            pages,
            popups,
            narration,
            manifest_assets,
        )?;
        let bytes = write_bundle(&manifest, &self.inner.store)?;
        let blob = self.inner.store.put(&bytes, "zip")?;
        Ok(BundleInfo {
            sha256: blob.hash().to_owned(),
            blob,
            manifest_sha256: sha256_hex(&manifest.to_canonical_json()),
        })
    }

    /// One narration track per page, synthesized concurrently.
    fn narrate(
        &self,
        pages: &[PageLayout],
        doc: &StoryDocument,
    ) -> Result<Vec<NarrationTrack>, AssemblyError> {
        let tts = self.inner.providers.speech.as_ref();
        let store = &self.inner.store;
        let width = self.inner.settings.forge.parallelism.max(1);
        let mut tracks = Vec::with_capacity(pages.len());
        for chunk in pages.chunks(width) {
            let results: Vec<Result<NarrationTrack, AssemblyError>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|page| s.spawn(move || synthesize_narration(page, doc, tts, store)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("narration thread panicked"))
                    .collect()
            });
            for r in results {
                tracks.push(r?);
            }
        }
        Ok(tracks)
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_table() {
        use RunState::*;
        let forward = [
            (Received, Extracting),
            (Extracting, Contextualizing),
            (Contextualizing, Describing),
            (Describing, Generating),
            (Generating, Scoring),
            (Scoring, AwaitingReview),
            (Scoring, Assembling),
            (AwaitingReview, Assembling),
            (Assembling, Ready),
        ];
        for from in RunState::ALL {
            for to in RunState::ALL {
                let expected = forward.contains(&(from, to)) || (to == Failed && !from.is_terminal());
                assert_eq!(from.can_transition_to(to), expected, "{from} -> {to}");
            }
        }
    }

    #[test]
    fn state_names_match_serde() {
        for s in RunState::ALL {
            assert_eq!(serde_json::to_value(s).unwrap(), s.as_str());
        }
    }

    #[test]
    fn ids_are_content_derived() {
        let k = content_key("t", "en", "body");
        assert_eq!(book_id_for(&k, 0), book_id_for(&k, 0));
        assert_ne!(book_id_for(&k, 0), book_id_for(&k, 1));
        assert_eq!(book_id_for(&k, 0).len(), 16);
        assert_ne!(asset_id_for("b", "jade"), asset_id_for("b", "bowl"));
    }
}
