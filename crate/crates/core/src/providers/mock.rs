//! Deterministic offline providers for tests, demos and the `mock` config kind.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::Cursor;
use std::sync::Mutex;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::json;
use sha2::{Digest, Sha256};

use super::{
    ArtifactUrl, AudioClip, GeneratedArtifacts, JobId, JobStatus, LanguageModel, LmRequest,
    MeshGenerator, ProviderError, SimilarityScorer, SpeechSynthesizer,
};
use crate::forge::GenerationPrompt;
use crate::forge::glb::TriangleMesh;
use crate::forge::render::{FRONTAL_VIEW_SIZE, render_frontal_view};
use crate::ingest::{fold_case, segment_words};
use crate::store::sha256_hex;

fn unit_from_hash(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
        h.update([0u8]);
    }
    let d = h.finalize();
    let n = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    n as f64 / (u64::MAX as f64 + 1.0)
}

/// Replays a fixed list of answers and records every request.
/// Once the script runs out every call reports the provider as unavailable.
pub struct ScriptedLanguageModel {
    script: Mutex<VecDeque<Result<String, ProviderError>>>,
    requests: Mutex<Vec<LmRequest>>,
}

impl ScriptedLanguageModel {
    pub fn new(script: impl IntoIterator<Item = Result<String, ProviderError>>) -> Self {
        Self {
            script: Mutex::new(script.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<LmRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl LanguageModel for ScriptedLanguageModel {
    fn complete(&self, request: &LmRequest) -> Result<String, ProviderError> {
        self.requests.lock().unwrap().push(request.clone());
        self.script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(ProviderError::Unavailable("script exhausted".into())))
    }
}

/// Answers per step with fixed JSON, any number of times.
pub struct FixtureLanguageModel {
    answers: BTreeMap<u8, String>,
    calls: AtomicUsize,
}

impl FixtureLanguageModel {
    pub fn new(answers: impl IntoIterator<Item = (u8, String)>) -> Self {
        Self {
            answers: answers.into_iter().collect(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LanguageModel for FixtureLanguageModel {
    fn complete(&self, request: &LmRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.answers
            .get(&request.step)
            .cloned()
            .ok_or_else(|| ProviderError::Unavailable(format!("no fixture for step {}", request.step)))
    }
}

const STOPWORDS: &[&str] = &[
    "about", "after", "again", "also", "always", "another", "around", "asked", "away", "back",
    "because", "been", "before", "began", "being", "came", "come", "could", "down", "each",
    "even", "every", "everything", "first", "from", "gave", "going", "good", "great", "have",
    "having", "here", "herself", "himself", "into", "just", "know", "like", "little", "long",
    "looked", "made", "make", "many", "more", "most", "much", "must", "never", "next", "nothing",
    "once", "only", "other", "over", "said", "saw", "says", "see", "should", "some", "something",
    "soon", "still", "such", "take", "than", "that", "their", "them", "then", "there", "these",
    "they", "thing", "think", "this", "those", "thought", "through", "time", "told", "took",
    "too", "very", "want", "wanted", "was", "went", "were", "what", "when", "where", "which",
    "while", "will", "with", "without", "would", "your", "yours",
];

/// Offline stand-in for a language model: characters are capitalized words
/// that are not sentence-initial, objects are repeated lowercase nouns-ish
/// words. Good enough to exercise the whole pipeline deterministically.
#[derive(Default)]
pub struct HeuristicLanguageModel {
    calls: AtomicUsize,
}

impl HeuristicLanguageModel {
    pub const MAX_CHARACTERS: usize = 4;
    pub const MAX_OBJECTS: usize = 6;

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn entities(story: &str) -> (Vec<String>, Vec<String>) {
        let Ok(tokens) = segment_words(story, "") else {
            return (Vec::new(), Vec::new());
        };
        let stop: HashSet<&str> = STOPWORDS.iter().copied().collect();
        let mut characters: Vec<String> = Vec::new();
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        for (i, token) in tokens.iter().enumerate() {
            let word = token.surface.as_str();
            let sentence_start = i == 0 || {
                let gap = &story[tokens[i - 1].byte_span.1..token.byte_span.0];
                gap.contains(['.', '!', '?', '"', '\u{201C}', '\n'])
            };
            let first = word.chars().next().unwrap_or(' ');
            if first.is_uppercase() && !sentence_start && word.chars().count() > 2 {
                if !characters.iter().any(|c| c == word) {
                    characters.push(word.to_owned());
                }
            } else if first.is_lowercase()
                && word.chars().count() >= 4
                && word.chars().all(char::is_alphabetic)
                && !stop.contains(word)
            {
                let e = counts.entry(word.to_owned()).or_insert((0, i));
                e.0 += 1;
            }
        }
        let character_folds: HashSet<String> = characters.iter().map(|c| fold_case(c)).collect();
        let mut objects: Vec<(String, usize, usize)> = counts
            .into_iter()
            .filter(|(w, (n, _))| *n >= 2 && !character_folds.contains(w))
            .map(|(w, (n, first))| (w, n, first))
            .collect();
        objects.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        characters.truncate(Self::MAX_CHARACTERS);
        (
            characters,
            objects
                .into_iter()
                .take(Self::MAX_OBJECTS)
                .map(|(w, _, _)| w)
                .collect(),
        )
    }

    fn sentence_with(story: &str, word: &str) -> String {
        let lower = story.to_lowercase();
        let Some(at) = lower.find(&word.to_lowercase()) else {
            return format!("{word} as it appears in the story");
        };
        let start = story[..at]
            .rfind(['.', '!', '?', '\n'])
            .map_or(0, |i| i + 1);
        let end = story[at..]
            .find(['.', '!', '?', '\n'])
            .map_or(story.len(), |i| at + i);
        story[start..end].trim().to_owned()
    }

    fn names(request: &LmRequest) -> Vec<String> {
        request.context["names"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_owned)).collect())
            .unwrap_or_default()
    }
}

impl LanguageModel for HeuristicLanguageModel {
    fn complete(&self, request: &LmRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let story = &request.story;
        let answer = match request.step {
            1 => {
                let (characters, objects) = Self::entities(story);
                let entities: Vec<_> = characters
                    .iter()
                    .map(|c| json!({"name": c, "kind": "character"}))
                    .chain(objects.iter().map(|o| json!({"name": o, "kind": "object"})))
                    .collect();
                json!({ "entities": entities })
            }
            2 => json!({
                "era": "unspecified period",
                "place": "unspecified place",
                "cultural_notes": "no explicit historical markers were detected offline",
            }),
            3 => json!({
                "characters": Self::names(request).iter().map(|name| json!({
                    "name": name,
                    "gender": "unspecified",
                    "nationality": "unspecified",
                    "age": "unspecified",
                    "appearance_features": Self::sentence_with(story, name),
                    "clothing": "unspecified",
                    "era_of_life": "unspecified",
                })).collect::<Vec<_>>()
            }),
            4 => json!({
                "objects": Self::names(request).iter().map(|name| json!({
                    "name": name,
                    "explanation": format!("the {name} the story refers to"),
                    "context_description": Self::sentence_with(story, name),
                })).collect::<Vec<_>>()
            }),
            other => return Err(ProviderError::Rejected(format!("unknown step {other}"))),
        };
        Ok(answer.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockJobBehavior {
    /// Report `running` for this many polls, then succeed.
    RunningFor(usize),
    NeverFinishes,
    RejectSubmit,
    FailJob,
}

impl Default for MockJobBehavior {
    fn default() -> Self {
        MockJobBehavior::RunningFor(1)
    }
}

struct MockJob {
    prompt: GenerationPrompt,
    polls: usize,
    done: bool,
}

type CompletionHook = Box<dyn Fn(usize) + Send + Sync>;

/// In-memory text-to-3D service producing boxes sized from the prompt hash.
#[derive(Default)]
pub struct MockMeshGenerator {
    behavior: MockJobBehavior,
    with_frontal_views: bool,
    jobs: Mutex<HashMap<String, MockJob>>,
    blobs: Mutex<HashMap<String, Vec<u8>>>,
    submits: AtomicUsize,
    completed: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    on_complete: Mutex<Option<CompletionHook>>,
}

impl MockMeshGenerator {
    pub fn with_behavior(behavior: MockJobBehavior) -> Self {
        Self {
            behavior,
            ..Default::default()
        }
    }

    /// Also return a provider-side frontal render instead of leaving it to the forge.
    pub fn returning_frontal_views(mut self) -> Self {
        self.with_frontal_views = true;
        self
    }

    /// Called with the running total each time a job succeeds.
    pub fn on_complete(&self, hook: impl Fn(usize) + Send + Sync + 'static) {
        *self.on_complete.lock().unwrap() = Some(Box::new(hook));
    }

    pub fn submit_count(&self) -> usize {
        self.submits.load(Ordering::SeqCst)
    }

    pub fn completed_count(&self) -> usize {
        self.completed.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn mesh_for(prompt: &GenerationPrompt) -> TriangleMesh {
        let text = prompt.prompt_text.as_bytes();
        let dim = |axis: &[u8]| 0.5 + 1.5 * unit_from_hash(&[text, axis]) as f32;
        let tint = |axis: &[u8]| 0.2 + 0.7 * unit_from_hash(&[text, b"color", axis]) as f32;
        TriangleMesh::cuboid(
            [dim(b"x"), dim(b"y"), dim(b"z")],
            [tint(b"r"), tint(b"g"), tint(b"b"), 1.0],
        )
    }

    fn finish(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl MeshGenerator for MockMeshGenerator {
    fn submit(&self, prompt: &GenerationPrompt) -> Result<JobId, ProviderError> {
        if self.behavior == MockJobBehavior::RejectSubmit {
            return Err(ProviderError::Rejected("prompt refused by mock".into()));
        }
        let n = self.submits.fetch_add(1, Ordering::SeqCst);
        let id = format!("job-{n}-{}", &sha256_hex(prompt.prompt_text.as_bytes())[..12]);
        self.jobs.lock().unwrap().insert(
            id.clone(),
            MockJob {
                prompt: prompt.clone(),
                polls: 0,
                done: false,
            },
        );
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Ok(JobId(id))
    }

    fn poll(&self, job: &JobId) -> Result<JobStatus, ProviderError> {
        let mut jobs = self.jobs.lock().unwrap();
        let state = jobs
            .get_mut(&job.0)
            .ok_or_else(|| ProviderError::InvalidResponse(format!("unknown job {}", job.0)))?;
        state.polls += 1;
        let running_for = match self.behavior {
            MockJobBehavior::RunningFor(n) => n,
            MockJobBehavior::NeverFinishes => return Ok(JobStatus::Running),
            MockJobBehavior::FailJob => {
                if !state.done {
                    state.done = true;
                    self.finish();
                }
                return Ok(JobStatus::Failed {
                    reason: "mock failure".into(),
                });
            }
            MockJobBehavior::RejectSubmit => unreachable!("submit was refused"),
        };
        if state.polls <= running_for {
            return Ok(JobStatus::Running);
        }
        let mesh = Self::mesh_for(&state.prompt);
        let glb = mesh.to_glb(&state.prompt.keyword);
        let mesh_url = format!("mock://{}/mesh.glb", job.0);
        let mut blobs = self.blobs.lock().unwrap();
        blobs.insert(mesh_url.clone(), glb);
        let frontal_view = if self.with_frontal_views {
            let url = format!("mock://{}/front.png", job.0);
            let png = render_frontal_view(&mesh, FRONTAL_VIEW_SIZE)
                .map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
            blobs.insert(url.clone(), png);
            Some(ArtifactUrl(url))
        } else {
            None
        };
        if !state.done {
            state.done = true;
            drop(blobs);
            drop(jobs);
            self.finish();
            let total = self.completed.fetch_add(1, Ordering::SeqCst) + 1;
            if let Some(hook) = self.on_complete.lock().unwrap().as_ref() {
                hook(total);
            }
        }
        Ok(JobStatus::Succeeded {
            artifacts: GeneratedArtifacts {
                mesh: ArtifactUrl(mesh_url),
                frontal_view,
            },
        })
    }

    fn fetch(&self, artifact: &ArtifactUrl) -> Result<Vec<u8>, ProviderError> {
        self.blobs
            .lock()
            .unwrap()
            .get(&artifact.0)
            .cloned()
            .ok_or_else(|| ProviderError::InvalidResponse(format!("no artifact {}", artifact.0)))
    }
}

/// Deterministic scorer: a hash of (keyword, image) mapped into
/// `[floor, 1)`, with per-keyword overrides.
pub struct HashScorer {
    floor: f64,
    overrides: BTreeMap<String, f64>,
    calls: AtomicUsize,
}

impl Default for HashScorer {
    fn default() -> Self {
        Self {
            floor: 0.55,
            overrides: BTreeMap::new(),
            calls: AtomicUsize::new(0),
        }
    }
}

impl HashScorer {
    pub fn with_floor(floor: f64) -> Self {
        Self {
            floor,
            ..Default::default()
        }
    }

    pub fn with_score(mut self, keyword: &str, score: f64) -> Self {
        self.overrides.insert(fold_case(keyword), score);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl SimilarityScorer for HashScorer {
    fn score(&self, image_png: &[u8], text: &str) -> Result<f64, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(s) = self.overrides.get(&fold_case(text)) {
            return Ok(*s);
        }
        let image_hash = sha256_hex(image_png);
        let u = unit_from_hash(&[fold_case(text).as_bytes(), image_hash.as_bytes()]);
        // Four decimals keeps manifests and logs readable.
        Ok(((self.floor + (1.0 - self.floor) * u) * 1e4).floor() / 1e4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpeechTiming {
    SecondsPerWord(f64),
    Fixed(f64),
}

/// Emits silent mono WAV audio whose duration follows [`SpeechTiming`].
pub struct SilentSpeech {
    timing: SpeechTiming,
    sample_rate: u32,
    calls: AtomicUsize,
}

impl Default for SilentSpeech {
    fn default() -> Self {
        Self::new(SpeechTiming::SecondsPerWord(0.4))
    }
}

impl SilentSpeech {
    pub fn new(timing: SpeechTiming) -> Self {
        Self {
            timing,
            sample_rate: 1000,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Writes `seconds` of silence as 16-bit mono PCM WAV.
pub fn silent_wav(seconds: f64, sample_rate: u32) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let samples = (seconds * f64::from(sample_rate)).round() as u64;
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec).expect("in-memory wav");
        for _ in 0..samples {
            writer.write_sample(0i16).expect("in-memory wav");
        }
        writer.finalize().expect("in-memory wav");
    }
    buf.into_inner()
}

impl SpeechSynthesizer for SilentSpeech {
    fn synthesize(&self, text: &str, language: &str) -> Result<AudioClip, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let seconds = match self.timing {
            SpeechTiming::Fixed(s) => s,
            SpeechTiming::SecondsPerWord(s) => {
                let words = segment_words(text, language).map(|t| t.len()).unwrap_or(0);
                s * words as f64
            }
        };
        Ok(AudioClip {
            bytes: silent_wav(seconds, self.sample_rate),
            extension: "wav".into(),
        })
    }
}
