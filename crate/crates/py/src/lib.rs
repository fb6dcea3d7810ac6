//! Python bindings: the gate, page division, pop-up timing, ETA and a
//! handle on the pipeline service.

use std::num::NonZeroUsize;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;
use storyforge_core::assembler::pagination::divide_pages as divide;
use storyforge_core::assembler::popup::popup_seconds as popup;
use storyforge_core::config::ServiceConfig;
use storyforge_core::forge::eta::EtaModel;
use storyforge_core::gate::{
    Classification, GateConfig, HumanLabel, LabeledPair, ReviewAction, Verdict,
};
use storyforge_core::ingest::{KeywordKind, KeywordOccurrence};
use storyforge_core::pipeline::{PipelineError, PipelineService, RunState};

create_exception!(storyforge, StoryforgeError, PyException);

fn pipeline_err(e: PipelineError) -> PyErr {
    StoryforgeError::new_err((e.kind().to_owned(), e.to_string()))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes through JSON into plain dicts and lists.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn gate(threshold: f64) -> PyResult<GateConfig> {
    GateConfig::with_threshold(threshold).map_err(value_err)
}

/// `"suspicious"` when `score < threshold`, else `"auto_plausible"`.
#[pyfunction]
#[pyo3(signature = (score, threshold = 0.7))]
fn classify(score: f64, threshold: f64) -> PyResult<&'static str> {
    Ok(match storyforge_core::gate::classify(score, &gate(threshold)?) {
        Classification::Suspicious => "suspicious",
        Classification::AutoPlausible => "auto_plausible",
    })
}

/// Share of plausible pairs among those scoring above each threshold.
/// `pairs` holds `(keyword, score, label)` with label `plausible` or
/// `implausible`.
#[pyfunction]
#[pyo3(signature = (pairs, thresholds = vec![0.9, 0.8, 0.7, 0.6]))]
fn evaluate_thresholds(
    py: Python<'_>,
    pairs: Vec<(String, f64, String)>,
    thresholds: Vec<f64>,
) -> PyResult<Py<PyAny>> {
    let pairs = pairs
        .into_iter()
        .map(|(keyword, score, label)| {
            Ok(LabeledPair {
                keyword,
                score,
                human_label: label.parse::<HumanLabel>().map_err(value_err)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &storyforge_core::gate::evaluate_thresholds(&pairs, &thresholds))
}

/// Page layouts for keyword word positions (strictly increasing).
#[pyfunction]
fn divide_pages(py: Python<'_>, positions: Vec<usize>, total_words: usize) -> PyResult<Py<PyAny>> {
    let occurrences: Vec<KeywordOccurrence> = positions
        .iter()
        .enumerate()
        .map(|(i, p)| KeywordOccurrence {
            keyword: format!("k{i}"),
            kind: KeywordKind::Object,
            global_position: *p,
            page_relative_position: None,
            synthetic_anchor: false,
        })
        .collect();
    to_py(py, &divide(&occurrences, total_words).map_err(value_err)?)
}

/// Seconds into page narration at which the keyword at word `n_k` pops up.
#[pyfunction]
fn popup_seconds(n_k: u64, speech_rate: f64) -> PyResult<u64> {
    if !(speech_rate.is_finite() && speech_rate > 0.0) {
        return Err(PyValueError::new_err("speech_rate must be finite and positive"));
    }
    Ok(popup(n_k, speech_rate))
}

/// Generation time estimate in seconds for `model_count` models.
#[pyfunction]
fn estimate_eta(model_count: usize) -> PyResult<u64> {
    let n = NonZeroUsize::new(model_count).ok_or_else(|| PyValueError::new_err("model_count must be positive"))?;
    Ok(EtaModel::shipped().estimate_seconds(n))
}

fn load_config(config: Option<PathBuf>) -> PyResult<ServiceConfig> {
    match config {
        Some(p) => ServiceConfig::load(&p).map_err(value_err),
        None => Ok(ServiceConfig::offline()),
    }
}

/// Pipeline service over a data directory. Without a config every provider
/// is an offline mock.
#[pyclass(frozen)]
struct Service {
    inner: PipelineService,
}

#[pymethods]
impl Service {
    #[new]
    #[pyo3(signature = (data_dir, config = None))]
    fn new(data_dir: PathBuf, config: Option<PathBuf>) -> PyResult<Self> {
        let config = load_config(config)?;
        let inner = PipelineService::from_config(&config, Some(&data_dir), false).map_err(pipeline_err)?;
        Ok(Self { inner })
    }

    /// Registers a story and returns its status.
    #[pyo3(signature = (title, text, language = "en"))]
    fn create_book(&self, py: Python<'_>, title: &str, text: &str, language: &str) -> PyResult<Py<PyAny>> {
        let view = self.inner.create_book(title, text, language).map_err(pipeline_err)?;
        to_py(py, &view)
    }

    /// Runs until the book rests and returns the state name.
    fn run(&self, py: Python<'_>, book_id: &str) -> PyResult<String> {
        let svc = self.inner.clone();
        let state: RunState = py.detach(|| svc.run_book(book_id)).map_err(pipeline_err)?;
        Ok(state.as_str().to_owned())
    }

    fn status(&self, py: Python<'_>, book_id: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.get_status(book_id).map_err(pipeline_err)?)
    }

    fn list_books(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.list_books())
    }

    fn review_items(&self, py: Python<'_>, book_id: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.review_items(book_id).map_err(pipeline_err)?)
    }

    /// `action` is `keep` or `remove`.
    #[pyo3(signature = (book_id, asset_id, action, actor = "python"))]
    fn post_verdict(&self, book_id: &str, asset_id: &str, action: &str, actor: &str) -> PyResult<()> {
        let action: ReviewAction = action.parse().map_err(value_err)?;
        self.inner
            .post_verdict(book_id, asset_id, action, actor)
            .map(drop)
            .map_err(pipeline_err)
    }

    fn complete_review(&self, book_id: &str) -> PyResult<()> {
        self.inner.complete_review(book_id).map(drop).map_err(pipeline_err)
    }

    fn bundle<'py>(&self, py: Python<'py>, book_id: &str) -> PyResult<Bound<'py, PyBytes>> {
        let bundle = self.inner.download_bundle(book_id).map_err(pipeline_err)?;
        Ok(PyBytes::new(py, &bundle.bytes))
    }

    fn manifest(&self, py: Python<'_>, book_id: &str) -> PyResult<Py<PyAny>> {
        let bytes = self.inner.manifest_json(book_id).map_err(pipeline_err)?;
        let text = String::from_utf8(bytes).map_err(value_err)?;
        Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
    }
}

/// Runs a story end to end, answering every review with `review`
/// (`keep` or `remove`), and returns the canonical manifest bytes.
#[pyfunction]
#[pyo3(signature = (title, text, data_dir, review = "remove", config = None, language = "en"))]
fn build_book<'py>(
    py: Python<'py>,
    title: &str,
    text: &str,
    data_dir: PathBuf,
    review: &str,
    config: Option<PathBuf>,
    language: &str,
) -> PyResult<Bound<'py, PyBytes>> {
    let action: ReviewAction = review.parse().map_err(value_err)?;
    let config = load_config(config)?;
    let manifest = py.detach(|| -> Result<Vec<u8>, PipelineError> {
        let svc = PipelineService::from_config(&config, Some(&data_dir), false)?;
        let id = svc.create_book(title, text, language)?.book_id;
        loop {
            match svc.run_book(&id)? {
                RunState::AwaitingReview => {
                    for item in svc.review_items(&id)? {
                        if item.verdict == Verdict::Suspicious {
                            svc.post_verdict(&id, &item.asset_id, action, "python")?;
                        }
                    }
                    svc.complete_review(&id)?;
                }
                RunState::Ready => return svc.manifest_json(&id),
                _ => {
                    let failure = svc.get_status(&id)?.error;
                    return Err(PipelineError::Storage(
                        failure.map_or_else(|| "run stopped".into(), |f| format!("{}: {}", f.kind, f.message)),
                    ));
                }
            }
        }
    });
    Ok(PyBytes::new(py, &manifest.map_err(pipeline_err)?))
}

#[pymodule]
fn storyforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StoryforgeError", m.py().get_type::<StoryforgeError>())?;
    m.add_class::<Service>()?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(divide_pages, m)?)?;
    m.add_function(wrap_pyfunction!(popup_seconds, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_eta, m)?)?;
    m.add_function(wrap_pyfunction!(build_book, m)?)?;
    Ok(())
}
