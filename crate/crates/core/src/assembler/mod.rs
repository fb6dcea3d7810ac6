//! Book assembly: page division, narration, pop-up scheduling, the manifest
//! and the downloadable bundle.

pub mod bundle;
pub mod manifest;
pub mod narration;
pub mod pagination;
pub mod popup;

use thiserror::Error;

pub use bundle::{BUNDLE_MANIFEST, read_bundle, write_bundle};
pub use manifest::{BookManifest, FORMAT_VERSION, ManifestAsset, assemble_manifest};
pub use narration::{NarrationTrack, measure_duration, synthesize_narration};
pub use pagination::{MAX_PER_PAGE, MIN_PER_PAGE, PageLayout, attach_anchors, divide_pages};
pub use popup::{PopupEvent, compute_popup_schedule, popup_seconds, popup_seconds_exact};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("no models remain for this book")]
    EmptyBook,
    #[error("occurrences must be strictly increasing and inside the text: {0}")]
    InvalidOccurrences(String),
    #[error("speech synthesis unavailable: {0}")]
    TtsUnavailable(String),
    #[error("narration audio for page {0} has zero duration")]
    ZeroDurationAudio(usize),
    #[error("unreadable narration audio: {0}")]
    InvalidAudio(String),
    #[error("speech rate must be finite and positive, got {0}")]
    InvalidSpeechRate(f64),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("asset {0} was removed in review and cannot appear in the book")]
    RemovedAssetReferenced(String),
    #[error("asset {0} pops up more than once")]
    DuplicatePopup(String),
    #[error("store: {0}")]
    Store(String),
    #[error("bundle: {0}")]
    Bundle(String),
}

impl From<std::io::Error> for AssemblyError {
    fn from(e: std::io::Error) -> Self {
        AssemblyError::Store(e.to_string())
    }
}
