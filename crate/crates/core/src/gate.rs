//! Plausibility gate: similarity scoring of each generated model against its
//! keyword, the suspicious/plausible split, and the human review board.

use std::collections::BTreeMap;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::{AssetRecord, AssetStatus};
use crate::providers::{ProviderError, SimilarityScorer};
use crate::store::BlobStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("similarity scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("frontal view unreadable: {0}")]
    UnreadableImage(String),
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("asset {0} must be generated before scoring (status {1:?})")]
    NotGenerated(String, AssetStatus),
    #[error("unknown asset {0}")]
    UnknownAsset(String),
    #[error("asset {0} is not under review")]
    NotSuspicious(String),
    #[error("asset {asset_id} already finalized as {existing:?}")]
    VerdictConflict { asset_id: String, existing: Verdict },
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AutoPlausible,
    Suspicious,
    Kept,
    Removed,
}

impl Verdict {
    /// Whether an asset with this verdict goes into the book.
    pub fn admits(self) -> bool {
        matches!(self, Verdict::AutoPlausible | Verdict::Kept)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    System,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewAction {
    Keep,
    Remove,
}

impl ReviewAction {
    fn verdict(self) -> Verdict {
        match self {
            ReviewAction::Keep => Verdict::Kept,
            ReviewAction::Remove => Verdict::Removed,
        }
    }
}

impl std::str::FromStr for ReviewAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "keep" | "k" => Ok(ReviewAction::Keep),
            "remove" | "r" => Ok(ReviewAction::Remove),
            other => Err(format!("expected keep or remove, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    threshold: f64,
    /// How long a book may wait in review before the completion default applies.
    #[serde(with = "duration_secs")]
    pub review_timeout: Duration,
    pub default_verdict_on_complete: ReviewAction,
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_secs)
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.7;

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            review_timeout: Duration::from_secs(24 * 60 * 60),
            default_verdict_on_complete: ReviewAction::Remove,
        }
    }
}

impl GateConfig {
    pub fn with_threshold(threshold: f64) -> Result<Self, GateError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(GateError::InvalidThreshold(threshold));
        }
        Ok(Self {
            threshold,
            ..Self::default()
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    AutoPlausible,
    Suspicious,
}

/// Suspicious iff `score < threshold`. A score equal to the threshold passes.
pub fn classify(score: f64, config: &GateConfig) -> Classification {
    if score < config.threshold {
        Classification::Suspicious
    } else {
        Classification::AutoPlausible
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityRecord {
    pub asset_id: String,
    pub keyword_text: String,
    pub score: f64,
    pub verdict: Verdict,
    pub decided_by: DecidedBy,
    pub decided_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
}

impl PlausibilityRecord {
    pub fn from_score(
        asset_id: impl Into<String>,
        keyword: impl Into<String>,
        score: f64,
        config: &GateConfig,
        now: DateTime<Utc>,
    ) -> Result<Self, GateError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GateError::ScoreOutOfRange(score));
        }
        let verdict = match classify(score, config) {
            Classification::AutoPlausible => Verdict::AutoPlausible,
            Classification::Suspicious => Verdict::Suspicious,
        };
        Ok(Self {
            asset_id: asset_id.into(),
            keyword_text: keyword.into(),
            score,
            verdict,
            decided_by: DecidedBy::System,
            decided_at: now,
            actor: None,
        })
    }

    /// True for records that went through (or are waiting in) human review.
    pub fn was_suspicious(&self) -> bool {
        self.verdict != Verdict::AutoPlausible
    }
}

/// Scores one generated asset's frontal view against its keyword.
pub fn score_asset(
    asset: &AssetRecord,
    scorer: &dyn SimilarityScorer,
    store: &BlobStore,
    config: &GateConfig,
) -> Result<PlausibilityRecord, GateError> {
    if asset.status != AssetStatus::Generated {
        return Err(GateError::NotGenerated(asset.asset_id.clone(), asset.status));
    }
    let view = asset
        .frontal_view_ref
        .as_ref()
        .ok_or_else(|| GateError::UnreadableImage(format!("{} has no frontal view", asset.asset_id)))?;
    let png = store
        .get(view)
        .map_err(|e| GateError::UnreadableImage(format!("{view}: {e}")))?;
    image::load_from_memory(&png)
        .map_err(|e| GateError::UnreadableImage(format!("{view}: {e}")))?;
    let score = scorer.score(&png, &asset.keyword).map_err(|e| match e {
        ProviderError::InvalidResponse(m) => GateError::ScorerUnavailable(format!("bad response: {m}")),
        other => GateError::ScorerUnavailable(other.to_string()),
    })?;
    PlausibilityRecord::from_score(&asset.asset_id, &asset.keyword, score, config, Utc::now())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub auto_plausible: usize,
    pub kept: usize,
    pub removed: usize,
    /// Suspicious records resolved by the completion default in this call.
    pub defaulted: usize,
}

/// Per-book set of plausibility records and their review state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewBoard {
    records: BTreeMap<String, PlausibilityRecord>,
    completed: bool,
}

impl ReviewBoard {
    pub fn insert(&mut self, record: PlausibilityRecord) {
        self.records.insert(record.asset_id.clone(), record);
    }

    pub fn get(&self, asset_id: &str) -> Option<&PlausibilityRecord> {
        self.records.get(asset_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &PlausibilityRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.completed
    }

    /// Records still waiting for a human decision.
    pub fn review_queue(&self) -> Vec<&PlausibilityRecord> {
        self.records
            .values()
            .filter(|r| r.verdict == Verdict::Suspicious)
            .collect()
    }

    /// Every record that was ever suspicious, decided or not.
    pub fn review_items(&self) -> Vec<&PlausibilityRecord> {
        self.records.values().filter(|r| r.was_suspicious()).collect()
    }

    pub fn apply_verdict(
        &mut self,
        asset_id: &str,
        action: ReviewAction,
        actor: &str,
        now: DateTime<Utc>,
    ) -> Result<PlausibilityRecord, GateError> {
        let record = self
            .records
            .get_mut(asset_id)
            .ok_or_else(|| GateError::UnknownAsset(asset_id.to_owned()))?;
        let wanted = action.verdict();
        match record.verdict {
            Verdict::AutoPlausible => Err(GateError::NotSuspicious(asset_id.to_owned())),
            Verdict::Suspicious => {
                record.verdict = wanted;
                record.decided_by = DecidedBy::Human;
                record.decided_at = now;
                record.actor = Some(actor.to_owned());
                Ok(record.clone())
            }
            v if v == wanted => Ok(record.clone()),
            existing => Err(GateError::VerdictConflict {
                asset_id: asset_id.to_owned(),
                existing,
            }),
        }
    }

    /// Resolves every still-suspicious record with the configured default.
    /// Calling it again changes nothing.
    pub fn complete_review(&mut self, config: &GateConfig, now: DateTime<Utc>) -> ReviewSummary {
        let mut summary = ReviewSummary::default();
        let default = config.default_verdict_on_complete.verdict();
        for record in self.records.values_mut() {
            if record.verdict == Verdict::Suspicious {
                record.verdict = default;
                record.decided_by = DecidedBy::System;
                record.decided_at = now;
                summary.defaulted += 1;
            }
            match record.verdict {
                Verdict::AutoPlausible => summary.auto_plausible += 1,
                Verdict::Kept => summary.kept += 1,
                Verdict::Removed => summary.removed += 1,
                Verdict::Suspicious => unreachable!("resolved above"),
            }
        }
        self.completed = true;
        summary
    }

    /// Asset ids admitted into the book.
    pub fn admitted(&self) -> impl Iterator<Item = &str> {
        self.records
            .values()
            .filter(|r| r.verdict.admits())
            .map(|r| r.asset_id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanLabel {
    Plausible,
    Implausible,
}

impl std::str::FromStr for HumanLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plausible" | "1" | "true" | "yes" => Ok(HumanLabel::Plausible),
            "implausible" | "0" | "false" | "no" => Ok(HumanLabel::Implausible),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub keyword: String,
    pub score: f64,
    pub human_label: HumanLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    /// Share of plausible pairs among those scoring strictly above the
    /// threshold; `None` when no pair does.
    pub proportion: Option<f64>,
    pub count: usize,
    pub plausible: usize,
}

/// For each threshold `c`, the proportion of human-plausible pairs among all
/// pairs with `score > c`.
pub fn evaluate_thresholds(pairs: &[LabeledPair], thresholds: &[f64]) -> Vec<ThresholdRow> {
    // Scores descending; prefix[k] = plausible count among the top k.
    let mut sorted: Vec<(f64, bool)> = pairs
        .iter()
        .map(|p| (p.score, p.human_label == HumanLabel::Plausible))
        .collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let prefix: Vec<usize> = std::iter::once(0)
        .chain(sorted.iter().scan(0, |acc, (_, ok)| {
            *acc += usize::from(*ok);
            Some(*acc)
        }))
        .collect();
    thresholds
        .iter()
        .map(|&c| {
            let count = sorted.partition_point(|(s, _)| *s > c);
            let plausible = prefix[count];
            ThresholdRow {
                threshold: c,
                proportion: (count > 0).then(|| plausible as f64 / count as f64),
                count,
                plausible,
            }
        })
        .collect()
}
