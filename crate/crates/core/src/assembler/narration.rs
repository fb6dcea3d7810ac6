//! Per-page narration audio and the speech rate derived from it.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use super::AssemblyError;
use super::pagination::PageLayout;
use crate::ingest::StoryDocument;
use crate::providers::{AudioClip, ProviderError, SpeechSynthesizer};
use crate::store::{BlobRef, BlobStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrationTrack {
    pub page_index: usize,
    pub audio_ref: BlobRef,
    /// Location inside the bundle, e.g. `audio/page_1.wav`.
    pub audio_path: String,
    pub duration_seconds: f64,
    /// Words read per 5 seconds.
    pub speech_rate: f64,
}

/// Duration of a WAV clip in seconds, read from its header and sample count.
pub fn measure_duration(clip: &AudioClip) -> Result<f64, AssemblyError> {
    if !clip.extension.eq_ignore_ascii_case("wav") {
        return Err(AssemblyError::InvalidAudio(format!(
            "cannot measure .{} audio",
            clip.extension
        )));
    }
    let reader = hound::WavReader::new(Cursor::new(&clip.bytes))
        .map_err(|e| AssemblyError::InvalidAudio(e.to_string()))?;
    let rate = reader.spec().sample_rate;
    if rate == 0 {
        return Err(AssemblyError::InvalidAudio("sample rate is zero".into()));
    }
    Ok(f64::from(reader.duration()) / f64::from(rate))
}

/// `r = W / (d / 5)`.
pub fn speech_rate(word_count: usize, duration_seconds: f64) -> f64 {
    word_count as f64 * 5.0 / duration_seconds
}

/// Synthesizes the page's text, stores the audio and measures its rate.
pub fn synthesize_narration(
    page: &PageLayout,
    doc: &StoryDocument,
    tts: &dyn SpeechSynthesizer,
    store: &BlobStore,
) -> Result<NarrationTrack, AssemblyError> {
    let (start, end) = page.text_span;
    if start >= end || end > doc.word_count() {
        return Err(AssemblyError::DanglingReference(format!(
            "page {} span [{start}, {end}) outside a {}-word story",
            page.page_index,
            doc.word_count()
        )));
    }
    let text = doc.text_for_words(start, end).trim();
    let clip = tts.synthesize(text, &doc.language).map_err(|e| match e {
        ProviderError::Unavailable(m) | ProviderError::Rejected(m) => AssemblyError::TtsUnavailable(m),
        ProviderError::InvalidResponse(m) => AssemblyError::InvalidAudio(m),
    })?;
    let duration = measure_duration(&clip)?;
    if duration <= 0.0 {
        return Err(AssemblyError::ZeroDurationAudio(page.page_index));
    }
    let audio_ref = store.put(&clip.bytes, &clip.extension.to_ascii_lowercase())?;
    Ok(NarrationTrack {
        page_index: page.page_index,
        audio_path: format!("audio/page_{}.{}", page.page_index, audio_ref.extension()),
        audio_ref,
        duration_seconds: duration,
        speech_rate: speech_rate(page.word_count, duration),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{SilentSpeech, SpeechTiming, silent_wav};

    fn page(span: (usize, usize)) -> PageLayout {
        PageLayout {
            page_index: 1,
            text_span: span,
            word_count: span.1 - span.0,
            occurrences: Vec::new(),
            first_keyword_position: span.0,
            last_keyword_position: span.0,
            anchored: Vec::new(),
        }
    }

    fn story(words: usize) -> StoryDocument {
        let body = vec!["word"; words].join(" ");
        StoryDocument::new("b", "t", "en", body).unwrap()
    }

    #[test]
    fn rate_from_duration() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let tts = SilentSpeech::new(SpeechTiming::Fixed(60.0));
        let t = synthesize_narration(&page((0, 120)), &story(120), &tts, &store).unwrap();
        assert_eq!(t.duration_seconds, 60.0);
        assert_eq!(t.speech_rate, 10.0);
        assert_eq!(t.audio_path, "audio/page_1.wav");
        assert!(store.contains(&t.audio_ref));

        let tts = SilentSpeech::new(SpeechTiming::Fixed(50.0));
        let t = synthesize_narration(&page((0, 100)), &story(100), &tts, &store).unwrap();
        assert_eq!(t.speech_rate, 10.0);
    }

    #[test]
    fn zero_length_audio() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let tts = SilentSpeech::new(SpeechTiming::Fixed(0.0));
        assert_eq!(
            synthesize_narration(&page((0, 10)), &story(10), &tts, &store),
            Err(AssemblyError::ZeroDurationAudio(1))
        );
    }

    #[test]
    fn duration_from_header() {
        let clip = AudioClip {
            bytes: silent_wav(2.5, 8000),
            extension: "wav".into(),
        };
        assert_eq!(measure_duration(&clip).unwrap(), 2.5);
        let junk = AudioClip {
            bytes: b"RIFF....".to_vec(),
            extension: "wav".into(),
        };
        assert!(matches!(measure_duration(&junk), Err(AssemblyError::InvalidAudio(_))));
    }

    #[test]
    fn span_outside_story_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let tts = SilentSpeech::default();
        assert!(synthesize_narration(&page((0, 11)), &story(10), &tts, &store).is_err());
    }
}
