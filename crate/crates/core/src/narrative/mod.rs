//! Story understanding against a language model: entity extraction,
//! historical context, and character/object descriptions.
//!
//! Every step sends a rendered instruction plus the story text, expects a
//! single JSON object back, and parses it strictly. A malformed answer is
//! re-asked with a repair note until the retry budget is spent.

mod templates;

use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use templates::{OutputSchema, PromptTemplate, TemplateSet};

use crate::ingest::{KeywordKind, StoryDocument, fold_case};
use crate::providers::{LanguageModel, LmRequest, ProviderError};

/// Value used for a character attribute the story gives no evidence for.
pub const UNSPECIFIED: &str = "unspecified";

/// Upper bound on extracted entities per book.
pub const MAX_ENTITIES: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NarrativeError {
    #[error("story is empty")]
    EmptyStory,
    #[error("language model unavailable after {attempts} attempts: {message}")]
    ProviderUnavailable { attempts: u32, message: String },
    #[error("language model rejected step {step}: {message}")]
    ProviderRejected { step: u8, message: String },
    #[error("step {step} output malformed after {attempts} attempts: {message}")]
    MalformedOutput {
        step: u8,
        attempts: u32,
        message: String,
    },
    #[error("step {step} described an entity that was not requested: {name:?}")]
    SchemaViolation { step: u8, name: String },
    #[error("template for step {step}: {message}")]
    Template { step: u8, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoricalContext {
    pub era: String,
    pub place: String,
    pub cultural_notes: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub name: String,
    pub gender: String,
    pub nationality: String,
    pub age: String,
    pub appearance_features: String,
    pub clothing: String,
    pub era_of_life: String,
}

impl CharacterProfile {
    /// The six description attributes in their canonical order.
    pub fn attributes(&self) -> [(&'static str, &str); 6] {
        [
            ("gender", &self.gender),
            ("nationality", &self.nationality),
            ("age", &self.age),
            ("appearance", &self.appearance_features),
            ("clothing", &self.clothing),
            ("era of life", &self.era_of_life),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectProfile {
    pub name: String,
    pub explanation: String,
    pub context_description: String,
}

/// Step 1 result: entity names in salience order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedEntities {
    pub characters: Vec<String>,
    pub objects: Vec<String>,
}

impl ExtractedEntities {
    pub fn keywords(&self) -> Vec<(String, KeywordKind)> {
        self.characters
            .iter()
            .map(|c| (c.clone(), KeywordKind::Character))
            .chain(self.objects.iter().map(|o| (o.clone(), KeywordKind::Object)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCatalog {
    pub characters: Vec<CharacterProfile>,
    pub objects: Vec<ObjectProfile>,
    pub historical_context: HistoricalContext,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts per step, including the first.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles afterwards.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    fn delay_before(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        self.base_delay
            .saturating_mul(1u32 << (attempt - 2).min(16))
    }
}

/// Drives the four language-model steps.
pub struct Narrator<'a> {
    pub model: &'a dyn LanguageModel,
    pub templates: &'a TemplateSet,
    pub retry: RetryPolicy,
}

impl<'a> Narrator<'a> {
    pub fn new(model: &'a dyn LanguageModel, templates: &'a TemplateSet) -> Self {
        Self {
            model,
            templates,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Step 1: main characters and main objects.
    pub fn extract_entities(&self, doc: &StoryDocument) -> Result<ExtractedEntities, NarrativeError> {
        ensure_story(doc)?;
        let bindings = BTreeMap::from([
            ("title", doc.title.clone()),
            ("max_entities", MAX_ENTITIES.to_string()),
        ]);
        self.ask(1, doc, &bindings, json!({ "title": doc.title }), parse_entities)
    }

    /// Step 2: era, place and cultural notes.
    pub fn infer_historical_context(
        &self,
        doc: &StoryDocument,
    ) -> Result<HistoricalContext, NarrativeError> {
        ensure_story(doc)?;
        let bindings = BTreeMap::from([("title", doc.title.clone())]);
        self.ask(2, doc, &bindings, json!({ "title": doc.title }), parse_context)
    }

    /// Step 3: one profile per requested character, in request order.
    pub fn describe_characters(
        &self,
        doc: &StoryDocument,
        names: &[String],
    ) -> Result<Vec<CharacterProfile>, NarrativeError> {
        ensure_story(doc)?;
        if names.is_empty() {
            return Ok(Vec::new());
        }
        let bindings = BTreeMap::from([
            ("title", doc.title.clone()),
            ("names", bullet_list(names)),
        ]);
        let context = json!({ "title": doc.title, "names": names });
        self.ask(3, doc, &bindings, context, |raw| parse_characters(raw, names))
    }

    /// Step 4: one explanation and context description per requested object.
    pub fn describe_objects(
        &self,
        doc: &StoryDocument,
        names: &[String],
        context: &HistoricalContext,
    ) -> Result<Vec<ObjectProfile>, NarrativeError> {
        ensure_story(doc)?;
        if names.is_empty() {
            return Ok(Vec::new());
        }
        let bindings = BTreeMap::from([
            ("title", doc.title.clone()),
            ("names", bullet_list(names)),
            ("era", context.era.clone()),
            ("place", context.place.clone()),
            ("cultural_notes", context.cultural_notes.clone()),
        ]);
        let ctx = json!({
            "title": doc.title,
            "names": names,
            "historical_context": context,
        });
        self.ask(4, doc, &bindings, ctx, |raw| parse_objects(raw, names))
    }

    fn ask<T>(
        &self,
        step: u8,
        doc: &StoryDocument,
        bindings: &BTreeMap<&str, String>,
        context: serde_json::Value,
        parse: impl Fn(&str) -> Result<T, ParseFailure>,
    ) -> Result<T, NarrativeError> {
        let instruction = self.templates.step(step).render(bindings)?;
        let max_attempts = self.retry.max_attempts.max(1);
        let mut request = LmRequest {
            step,
            instruction: instruction.clone(),
            story: doc.body.clone(),
            context,
        };
        let mut last_failure = None;
        for attempt in 1..=max_attempts {
            let delay = self.retry.delay_before(attempt);
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
            match self.model.complete(&request) {
                Ok(raw) => match parse(&raw) {
                    Ok(value) => return Ok(value),
                    Err(ParseFailure::Unknown(name)) => {
                        return Err(NarrativeError::SchemaViolation { step, name });
                    }
                    Err(ParseFailure::Malformed(message)) => {
                        log::debug!("step {step} attempt {attempt}: malformed output: {message}");
                        request.instruction = repair_instruction(&instruction, &raw, &message);
                        last_failure = Some(Err(message));
                    }
                },
                Err(ProviderError::Rejected(message)) => {
                    return Err(NarrativeError::ProviderRejected { step, message });
                }
                Err(err) => {
                    log::debug!("step {step} attempt {attempt}: {err}");
                    last_failure = Some(Ok(err.to_string()));
                }
            }
        }
        Err(match last_failure {
            Some(Err(message)) => NarrativeError::MalformedOutput {
                step,
                attempts: max_attempts,
                message,
            },
            Some(Ok(message)) => NarrativeError::ProviderUnavailable {
                attempts: max_attempts,
                message,
            },
            None => unreachable!("at least one attempt is made"),
        })
    }
}

fn ensure_story(doc: &StoryDocument) -> Result<(), NarrativeError> {
    if doc.tokens.is_empty() {
        Err(NarrativeError::EmptyStory)
    } else {
        Ok(())
    }
}

fn bullet_list(names: &[String]) -> String {
    names
        .iter()
        .map(|n| format!("- {n}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn repair_instruction(instruction: &str, raw: &str, problem: &str) -> String {
    format!(
        "{instruction}\n\nYour previous answer could not be used ({problem}).\n\
         Previous answer:\n{raw}\n\nAnswer again with only the JSON object."
    )
}

#[derive(Debug)]
enum ParseFailure {
    Malformed(String),
    Unknown(String),
}

fn malformed(msg: impl Into<String>) -> ParseFailure {
    ParseFailure::Malformed(msg.into())
}

fn from_json<'de, T: Deserialize<'de>>(raw: &'de str) -> Result<T, ParseFailure> {
    serde_json::from_str(raw.trim()).map_err(|e| malformed(e.to_string()))
}

fn required(field: &str, value: String) -> Result<String, ParseFailure> {
    let value = value.trim().to_owned();
    if value.is_empty() {
        Err(malformed(format!("{field} is empty")))
    } else {
        Ok(value)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntitiesOut {
    entities: Vec<EntityOut>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityOut {
    name: String,
    kind: KeywordKind,
}

fn parse_entities(raw: &str) -> Result<ExtractedEntities, ParseFailure> {
    let out: EntitiesOut = from_json(raw)?;
    let mut seen = HashSet::new();
    let mut result = ExtractedEntities::default();
    let mut kept = 0;
    for entity in out.entities {
        let name = required("entity name", entity.name)?;
        if !seen.insert(fold_case(&name)) {
            continue;
        }
        if kept == MAX_ENTITIES {
            break;
        }
        kept += 1;
        match entity.kind {
            KeywordKind::Character => result.characters.push(name),
            KeywordKind::Object => result.objects.push(name),
        }
    }
    if kept == 0 {
        return Err(malformed("no entities extracted"));
    }
    Ok(result)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextOut {
    era: String,
    place: String,
    cultural_notes: String,
}

fn parse_context(raw: &str) -> Result<HistoricalContext, ParseFailure> {
    let out: ContextOut = from_json(raw)?;
    Ok(HistoricalContext {
        era: required("era", out.era)?,
        place: required("place", out.place)?,
        cultural_notes: required("cultural_notes", out.cultural_notes)?,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CharactersOut {
    characters: Vec<CharacterOut>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CharacterOut {
    name: String,
    gender: Option<String>,
    nationality: Option<String>,
    age: Option<String>,
    appearance_features: Option<String>,
    clothing: Option<String>,
    era_of_life: Option<String>,
}

/// Attributes must be present as keys; null or blank means no evidence.
fn attribute(value: Option<String>) -> String {
    match value.map(|v| v.trim().to_owned()) {
        Some(v) if !v.is_empty() => v,
        _ => UNSPECIFIED.to_owned(),
    }
}

/// Matches each answered name to exactly one requested name.
fn assign<T>(
    requested: &[String],
    answered: Vec<(String, T)>,
) -> Result<Vec<(String, T)>, ParseFailure> {
    let index: BTreeMap<String, usize> = requested
        .iter()
        .enumerate()
        .map(|(i, n)| (fold_case(n.trim()), i))
        .collect();
    let mut slots: Vec<Option<T>> = requested.iter().map(|_| None).collect();
    for (name, value) in answered {
        let i = *index
            .get(&fold_case(name.trim()))
            .ok_or(ParseFailure::Unknown(name.clone()))?;
        if slots[i].is_some() {
            return Err(malformed(format!("{name:?} described twice")));
        }
        slots[i] = Some(value);
    }
    requested
        .iter()
        .zip(slots)
        .map(|(name, slot)| {
            slot.map(|v| (name.clone(), v))
                .ok_or_else(|| malformed(format!("no description for {name:?}")))
        })
        .collect()
}

fn parse_characters(raw: &str, names: &[String]) -> Result<Vec<CharacterProfile>, ParseFailure> {
    // Field presence is checked on the raw value so a missing key is malformed
    // while an explicit null is the no-evidence sentinel.
    let value: serde_json::Value = from_json(raw)?;
    const FIELDS: [&str; 6] = [
        "gender",
        "nationality",
        "age",
        "appearance_features",
        "clothing",
        "era_of_life",
    ];
    if let Some(list) = value.get("characters").and_then(|c| c.as_array()) {
        for entry in list {
            for field in FIELDS {
                if entry.get(field).is_none() {
                    return Err(malformed(format!("character missing {field}")));
                }
            }
        }
    }
    let out: CharactersOut = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    let answered = out
        .characters
        .into_iter()
        .map(|c| (c.name.clone(), c))
        .collect();
    Ok(assign(names, answered)?
        .into_iter()
        .map(|(name, c)| CharacterProfile {
            name,
            gender: attribute(c.gender),
            nationality: attribute(c.nationality),
            age: attribute(c.age),
            appearance_features: attribute(c.appearance_features),
            clothing: attribute(c.clothing),
            era_of_life: attribute(c.era_of_life),
        })
        .collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectsOut {
    objects: Vec<ObjectOut>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectOut {
    name: String,
    explanation: String,
    context_description: String,
}

fn parse_objects(raw: &str, names: &[String]) -> Result<Vec<ObjectProfile>, ParseFailure> {
    let out: ObjectsOut = from_json(raw)?;
    let answered = out.objects.into_iter().map(|o| (o.name.clone(), o)).collect();
    assign(names, answered)?
        .into_iter()
        .map(|(name, o)| {
            Ok(ObjectProfile {
                name,
                explanation: required("explanation", o.explanation)?,
                context_description: required("context_description", o.context_description)?,
            })
        })
        .collect()
}
