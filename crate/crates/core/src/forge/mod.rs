//! Text-to-3D asset generation: prompt assembly, the per-asset lifecycle,
//! and a bounded-parallelism job pool over a [`MeshGenerator`].

pub mod eta;
pub mod glb;
pub mod render;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::KeywordKind;
use crate::narrative::{CharacterProfile, HistoricalContext, ObjectProfile, UNSPECIFIED};
use crate::providers::{JobId, JobStatus, MeshGenerator, ProviderError};
use crate::store::{BlobRef, BlobStore};

pub use eta::{EtaModel, FitWeighting, ProvisionalEta, estimate_generation_seconds};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForgeError {
    #[error("profile {name:?} is incomplete: {field} is empty")]
    IncompleteProfile { name: String, field: &'static str },
    #[error("mesh provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("mesh provider rejected the prompt: {0}")]
    ProviderRejectedPrompt(String),
    #[error("generation failed: {0}")]
    GenerationFailed(String),
    #[error("generation did not finish within {0:?}")]
    GenerationTimeout(Duration),
    #[error("illegal asset transition {from:?} -> {to:?}")]
    IllegalTransition { from: AssetStatus, to: AssetStatus },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("rendering failed: {0}")]
    Render(String),
    #[error("storage: {0}")]
    Store(String),
    #[error("generation interrupted")]
    Interrupted,
}

/// Which pipeline output a prompt part came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourcePart {
    /// Entity name from extraction.
    #[serde(rename = "output#1")]
    EntityName,
    /// Historical background.
    #[serde(rename = "output#2")]
    HistoricalContext,
    /// Character description.
    #[serde(rename = "output#3")]
    CharacterDescription,
    /// Object explanation and context description.
    #[serde(rename = "output#4")]
    ObjectDescription,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub keyword: String,
    pub kind: KeywordKind,
    pub prompt_text: String,
    pub source_parts: Vec<SourcePart>,
}

#[derive(Debug, Clone, Copy)]
pub enum ProfileRef<'a> {
    Character(&'a CharacterProfile),
    Object(&'a ObjectProfile),
}

fn non_empty(name: &str, field: &'static str, value: &str) -> Result<(), ForgeError> {
    if value.trim().is_empty() {
        Err(ForgeError::IncompleteProfile {
            name: name.to_owned(),
            field,
        })
    } else {
        Ok(())
    }
}

/// Builds the text-to-3D prompt.
///
/// Characters combine name and the six-attribute description only. Objects
/// combine name, historical background, then the contextual description.
pub fn build_generation_prompt(
    profile: ProfileRef<'_>,
    context: &HistoricalContext,
) -> Result<GenerationPrompt, ForgeError> {
    match profile {
        ProfileRef::Character(c) => {
            non_empty(&c.name, "name", &c.name)?;
            for (field, value) in c.attributes() {
                non_empty(&c.name, field, value)?;
            }
            let description: Vec<String> = c
                .attributes()
                .into_iter()
                .filter(|(_, v)| !v.eq_ignore_ascii_case(UNSPECIFIED))
                .map(|(k, v)| format!("{k}: {v}"))
                .collect();
            let prompt_text = if description.is_empty() {
                c.name.clone()
            } else {
                format!("{}. {}.", c.name, description.join("; "))
            };
            Ok(GenerationPrompt {
                keyword: c.name.clone(),
                kind: KeywordKind::Character,
                prompt_text,
                source_parts: vec![SourcePart::EntityName, SourcePart::CharacterDescription],
            })
        }
        ProfileRef::Object(o) => {
            non_empty(&o.name, "name", &o.name)?;
            non_empty(&o.name, "explanation", &o.explanation)?;
            non_empty(&o.name, "context_description", &o.context_description)?;
            non_empty(&o.name, "era", &context.era)?;
            non_empty(&o.name, "place", &context.place)?;
            let prompt_text = format!(
                "{}. Historical setting: {}, {}. {}. {}.",
                o.name,
                context.era,
                context.place,
                o.explanation.trim_end_matches('.'),
                o.context_description.trim_end_matches('.'),
            );
            Ok(GenerationPrompt {
                keyword: o.name.clone(),
                kind: KeywordKind::Object,
                prompt_text,
                source_parts: vec![
                    SourcePart::EntityName,
                    SourcePart::HistoricalContext,
                    SourcePart::ObjectDescription,
                ],
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetStatus {
    Pending,
    Generating,
    Generated,
    Scored,
    Kept,
    Removed,
    Failed,
}

impl AssetStatus {
    pub const ALL: [AssetStatus; 7] = [
        AssetStatus::Pending,
        AssetStatus::Generating,
        AssetStatus::Generated,
        AssetStatus::Scored,
        AssetStatus::Kept,
        AssetStatus::Removed,
        AssetStatus::Failed,
    ];

    pub fn can_transition_to(self, to: AssetStatus) -> bool {
        use AssetStatus::*;
        matches!(
            (self, to),
            (Pending, Generating)
                | (Generating, Generated)
                | (Generated, Scored)
                | (Scored, Kept)
                | (Scored, Removed)
                | (Pending, Failed)
                | (Generating, Failed)
        )
    }

    /// Whether mesh and frontal view exist at this status.
    pub fn has_artifacts(self) -> bool {
        matches!(
            self,
            AssetStatus::Generated | AssetStatus::Scored | AssetStatus::Kept | AssetStatus::Removed
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, AssetStatus::Kept | AssetStatus::Removed | AssetStatus::Failed)
    }
}

/// Something that happened to an asset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssetEvent {
    Submitted(JobId),
    Generated { mesh: BlobRef, frontal_view: BlobRef },
    Failed(String),
    Scored,
    Kept,
    Removed,
}

impl AssetEvent {
    fn target(&self) -> AssetStatus {
        match self {
            AssetEvent::Submitted(_) => AssetStatus::Generating,
            AssetEvent::Generated { .. } => AssetStatus::Generated,
            AssetEvent::Failed(_) => AssetStatus::Failed,
            AssetEvent::Scored => AssetStatus::Scored,
            AssetEvent::Kept => AssetStatus::Kept,
            AssetEvent::Removed => AssetStatus::Removed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub asset_id: String,
    pub keyword: String,
    pub prompt: GenerationPrompt,
    pub job_id: Option<JobId>,
    pub mesh_ref: Option<BlobRef>,
    pub frontal_view_ref: Option<BlobRef>,
    pub status: AssetStatus,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl AssetRecord {
    pub fn new(asset_id: impl Into<String>, prompt: GenerationPrompt, now: DateTime<Utc>) -> Self {
        Self {
            asset_id: asset_id.into(),
            keyword: prompt.keyword.clone(),
            prompt,
            job_id: None,
            mesh_ref: None,
            frontal_view_ref: None,
            status: AssetStatus::Pending,
            error: None,
            created_at: now,
            updated_at: now,
        }
    }

    /// Applies an event if the lifecycle allows it; otherwise leaves the
    /// record untouched.
    pub fn apply(&mut self, event: AssetEvent, now: DateTime<Utc>) -> Result<(), ForgeError> {
        let to = event.target();
        if !self.status.can_transition_to(to) {
            return Err(ForgeError::IllegalTransition {
                from: self.status,
                to,
            });
        }
        match event {
            AssetEvent::Submitted(job) => self.job_id = Some(job),
            AssetEvent::Generated { mesh, frontal_view } => {
                self.mesh_ref = Some(mesh);
                self.frontal_view_ref = Some(frontal_view);
            }
            AssetEvent::Failed(reason) => self.error = Some(reason),
            AssetEvent::Scored | AssetEvent::Kept | AssetEvent::Removed => {}
        }
        self.status = to;
        self.updated_at = now;
        Ok(())
    }

    /// Artifacts are set exactly when the status says they exist.
    pub fn is_consistent(&self) -> bool {
        let has = self.mesh_ref.is_some() && self.frontal_view_ref.is_some();
        let none = self.mesh_ref.is_none() && self.frontal_view_ref.is_none();
        if self.status.has_artifacts() { has } else { none }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeConfig {
    pub parallelism: usize,
    pub timeout: Duration,
    pub poll_interval: Duration,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            parallelism: 4,
            timeout: Duration::from_secs(300),
            poll_interval: Duration::from_secs(2),
        }
    }
}

/// Job handle returned by [`submit_generation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobHandle {
    pub asset_id: String,
    pub job_id: JobId,
}

fn provider_error(err: ProviderError) -> ForgeError {
    match err {
        ProviderError::Rejected(m) => ForgeError::ProviderRejectedPrompt(m),
        ProviderError::Unavailable(m) => ForgeError::ProviderUnavailable(m),
        ProviderError::InvalidResponse(m) => ForgeError::GenerationFailed(m),
    }
}

/// Submits the record's prompt and moves it to `generating`.
pub fn submit_generation(
    record: &mut AssetRecord,
    provider: &dyn MeshGenerator,
) -> Result<JobHandle, ForgeError> {
    if record.status != AssetStatus::Pending {
        return Err(ForgeError::IllegalTransition {
            from: record.status,
            to: AssetStatus::Generating,
        });
    }
    let job_id = provider.submit(&record.prompt).map_err(provider_error)?;
    record.apply(AssetEvent::Submitted(job_id.clone()), Utc::now())?;
    Ok(JobHandle {
        asset_id: record.asset_id.clone(),
        job_id,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PollOutcome {
    InProgress,
    Generated,
}

/// Polls once. On success the mesh and frontal view are stored
/// content-addressed and the record becomes `generated`.
pub fn poll_generation(
    record: &mut AssetRecord,
    provider: &dyn MeshGenerator,
    store: &BlobStore,
) -> Result<PollOutcome, ForgeError> {
    let job = record.job_id.clone().ok_or(ForgeError::IllegalTransition {
        from: record.status,
        to: AssetStatus::Generated,
    })?;
    match provider.poll(&job).map_err(provider_error)? {
        JobStatus::Queued | JobStatus::Running => Ok(PollOutcome::InProgress),
        JobStatus::Rejected { reason } => Err(ForgeError::ProviderRejectedPrompt(reason)),
        JobStatus::Failed { reason } => Err(ForgeError::GenerationFailed(reason)),
        JobStatus::Succeeded { artifacts } => {
            let mesh_bytes = provider.fetch(&artifacts.mesh).map_err(provider_error)?;
            let mesh = glb::read_triangles(&mesh_bytes)?;
            let png = match &artifacts.frontal_view {
                Some(url) => provider.fetch(url).map_err(provider_error)?,
                None => render::render_frontal_view(&mesh, render::FRONTAL_VIEW_SIZE)?,
            };
            let store_err = |e: std::io::Error| ForgeError::Store(e.to_string());
            let mesh_ref = store.put(&mesh_bytes, "glb").map_err(store_err)?;
            let view_ref = store.put(&png, "png").map_err(store_err)?;
            record.apply(
                AssetEvent::Generated {
                    mesh: mesh_ref,
                    frontal_view: view_ref,
                },
                Utc::now(),
            )?;
            Ok(PollOutcome::Generated)
        }
    }
}

/// Runs one asset from its current status to `generated` or `failed`.
///
/// `persist` is called after every status change. When `stop` is raised the
/// loop returns [`ForgeError::Interrupted`] without touching the record, so
/// an in-flight job can be picked up again from its stored job id.
pub fn drive_generation(
    record: &mut AssetRecord,
    provider: &dyn MeshGenerator,
    store: &BlobStore,
    config: &ForgeConfig,
    stop: &AtomicBool,
    persist: &dyn Fn(&AssetRecord),
) -> Result<(), ForgeError> {
    let fail = |record: &mut AssetRecord, err: ForgeError| {
        // Failure is legal from pending and generating, the only states here.
        let _ = record.apply(AssetEvent::Failed(err.to_string()), Utc::now());
        persist(record);
        err
    };
    if record.status.has_artifacts() {
        return Ok(());
    }
    if record.status == AssetStatus::Failed {
        return Err(ForgeError::GenerationFailed(
            record.error.clone().unwrap_or_default(),
        ));
    }
    if stop.load(Ordering::SeqCst) {
        return Err(ForgeError::Interrupted);
    }
    if record.status == AssetStatus::Pending {
        match submit_generation(record, provider) {
            Ok(_) => persist(record),
            Err(e) => return Err(fail(record, e)),
        }
    }
    let deadline = Instant::now() + config.timeout;
    loop {
        if stop.load(Ordering::SeqCst) {
            return Err(ForgeError::Interrupted);
        }
        match poll_generation(record, provider, store) {
            Ok(PollOutcome::Generated) => {
                persist(record);
                return Ok(());
            }
            Ok(PollOutcome::InProgress) => {}
            Err(e) => return Err(fail(record, e)),
        }
        let now = Instant::now();
        if now >= deadline {
            return Err(fail(record, ForgeError::GenerationTimeout(config.timeout)));
        }
        std::thread::sleep(config.poll_interval.min(deadline - now));
    }
}

/// Drives every record with at most `config.parallelism` jobs in flight.
/// Returns one result per record, in input order.
pub fn generate_all(
    records: &mut [AssetRecord],
    provider: &dyn MeshGenerator,
    store: &BlobStore,
    config: &ForgeConfig,
    stop: &AtomicBool,
    persist: &(dyn Fn(&AssetRecord) + Sync),
) -> Vec<Result<(), ForgeError>> {
    let slots: Vec<Mutex<&mut AssetRecord>> = records.iter_mut().map(Mutex::new).collect();
    let results: Vec<Mutex<Option<Result<(), ForgeError>>>> =
        slots.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.parallelism.max(1).min(slots.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= slots.len() {
                        break;
                    }
                    let mut record = slots[i].lock().unwrap();
                    let outcome =
                        drive_generation(&mut record, provider, store, config, stop, persist);
                    *results[i].lock().unwrap() = Some(outcome);
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.into_inner().unwrap().unwrap_or(Err(ForgeError::Interrupted)))
        .collect()
}
