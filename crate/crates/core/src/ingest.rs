//! Story ingestion: word segmentation and first-mention keyword lookup.
//!
//! Every position used by page division and pop-up scheduling is a word index
//! on the axis produced by [`segment_words`]. Alphabetic scripts follow Unicode
//! word boundaries; each CJK ideograph counts as one word.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;
use unicode_normalization::char::is_combining_mark;
use unicode_segmentation::UnicodeSegmentation;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IngestError {
    #[error("story body contains no words")]
    EmptyStory,
    #[error("keyword list is empty")]
    NoKeywords,
    #[error("keyword {0:?} is empty or has no word characters")]
    BlankKeyword(String),
    #[error("keyword {0:?} is listed more than once")]
    DuplicateKeyword(String),
}

/// Whether an extracted entity is a character or an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordKind {
    Character,
    Object,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordToken {
    pub word_index: usize,
    /// Half-open byte range into the story body.
    pub byte_span: (usize, usize),
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryDocument {
    pub book_id: String,
    pub title: String,
    pub language: String,
    pub body: String,
    pub tokens: Vec<WordToken>,
}

impl StoryDocument {
    pub fn new(
        book_id: impl Into<String>,
        title: impl Into<String>,
        language: impl Into<String>,
        body: impl Into<String>,
    ) -> Result<Self, IngestError> {
        let body = body.into();
        let language = language.into();
        let tokens = segment_words(&body, &language)?;
        Ok(Self {
            book_id: book_id.into(),
            title: title.into(),
            language,
            body,
            tokens,
        })
    }

    pub fn word_count(&self) -> usize {
        self.tokens.len()
    }

    /// Rebuilds the body from tokens and the separator text between them.
    pub fn reconstruct(&self) -> String {
        let mut out = String::with_capacity(self.body.len());
        let mut cursor = 0;
        for token in &self.tokens {
            let (start, end) = token.byte_span;
            out.push_str(&self.body[cursor..start]);
            out.push_str(&token.surface);
            cursor = end;
        }
        out.push_str(&self.body[cursor..]);
        out
    }

    /// Text covered by the word range `[start_word, end_word)`, including the
    /// separators that follow each word up to the next word in range. The
    /// final range of a document also takes any trailing text.
    pub fn text_for_words(&self, start_word: usize, end_word: usize) -> &str {
        if start_word >= end_word || start_word >= self.tokens.len() {
            return "";
        }
        let start = self.tokens[start_word].byte_span.0;
        let end = if end_word >= self.tokens.len() {
            self.body.len()
        } else {
            self.tokens[end_word].byte_span.0
        };
        &self.body[start..end]
    }
}

/// First mention of one keyword on the global word axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordOccurrence {
    pub keyword: String,
    pub kind: KeywordKind,
    pub global_position: usize,
    /// Word index inside the owning page; filled in by page division.
    pub page_relative_position: Option<usize>,
    /// Set when the keyword could not be found and was pinned to the first word.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic_anchor: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccurrenceScan {
    /// Sorted by `global_position`, ties in keyword input order.
    pub occurrences: Vec<KeywordOccurrence>,
    pub misses: Vec<String>,
}

impl OccurrenceScan {
    /// Pins every missed keyword to word 0 with the synthetic-anchor flag.
    pub fn anchor_misses(mut self, kinds: &[(String, KeywordKind)]) -> Vec<KeywordOccurrence> {
        let mut anchored: Vec<KeywordOccurrence> = self
            .misses
            .drain(..)
            .map(|keyword| {
                let kind = kinds
                    .iter()
                    .find(|(k, _)| *k == keyword)
                    .map(|(_, kind)| *kind)
                    .unwrap_or(KeywordKind::Object);
                KeywordOccurrence {
                    keyword,
                    kind,
                    global_position: 0,
                    page_relative_position: None,
                    synthetic_anchor: true,
                }
            })
            .collect();
        anchored.append(&mut self.occurrences);
        anchored.sort_by_key(|o| o.global_position);
        anchored
    }
}

fn is_ideograph(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F
        | 0x3005 | 0x3007)
}

fn is_word_segment(segment: &str) -> bool {
    segment.chars().any(char::is_alphanumeric)
}

/// Splits a body into word tokens. Punctuation and whitespace are separators.
pub fn segment_words(body: &str, _language: &str) -> Result<Vec<WordToken>, IngestError> {
    let mut tokens = Vec::new();
    let mut push = |start: usize, surface: &str, tokens: &mut Vec<WordToken>| {
        tokens.push(WordToken {
            word_index: tokens.len(),
            byte_span: (start, start + surface.len()),
            surface: surface.to_owned(),
        });
    };
    for (offset, segment) in body.split_word_bound_indices() {
        if !is_word_segment(segment) {
            continue;
        }
        if !segment.chars().any(is_ideograph) {
            push(offset, segment, &mut tokens);
            continue;
        }
        // Mixed runs: every ideograph stands alone, other letters stay grouped.
        let mut run_start: Option<usize> = None;
        for (i, c) in segment.char_indices() {
            if is_ideograph(c) {
                if let Some(s) = run_start.take() {
                    push_run(offset + s, &segment[s..i], &mut tokens, &mut push);
                }
                push(offset + i, &segment[i..i + c.len_utf8()], &mut tokens);
            } else if run_start.is_none() {
                run_start = Some(i);
            }
        }
        if let Some(s) = run_start {
            push_run(offset + s, &segment[s..], &mut tokens, &mut push);
        }
    }
    if tokens.is_empty() {
        return Err(IngestError::EmptyStory);
    }
    Ok(tokens)
}

fn push_run(
    start: usize,
    run: &str,
    tokens: &mut Vec<WordToken>,
    push: &mut impl FnMut(usize, &str, &mut Vec<WordToken>),
) {
    if is_word_segment(run) {
        push(start, run, tokens);
    }
}

/// Simple case folding used for all keyword comparisons.
pub fn fold_case(s: &str) -> String {
    s.to_lowercase()
}

/// Case-folded, diacritic-stripped, width-folded form used by the fallback match.
pub fn normalize_loose(s: &str) -> String {
    s.nfkd()
        .filter(|c| !is_combining_mark(*c))
        .flat_map(char::to_lowercase)
        .collect()
}

fn keyword_tokens(keyword: &str) -> Vec<String> {
    segment_words(keyword, "")
        .map(|t| t.into_iter().map(|w| fold_case(&w.surface)).collect())
        .unwrap_or_default()
}

/// Finds the first mention of each keyword.
///
/// Exact case-folded token-sequence matches win; otherwise a loose substring
/// match over normalized token text is tried. Keywords with no match at all
/// are reported in `misses`.
///
/// Each word index is claimed by at most one keyword. Keywords with more
/// tokens claim first (ties in input order); a keyword whose first mention is
/// already claimed takes its next unclaimed mention.
pub fn locate_occurrences(
    doc: &StoryDocument,
    keywords: &[(String, KeywordKind)],
) -> Result<OccurrenceScan, IngestError> {
    if keywords.is_empty() {
        return Err(IngestError::NoKeywords);
    }
    let mut seen = std::collections::HashSet::new();
    let mut patterns = Vec::with_capacity(keywords.len());
    for (keyword, _) in keywords {
        let tokens = keyword_tokens(keyword);
        if tokens.is_empty() {
            return Err(IngestError::BlankKeyword(keyword.clone()));
        }
        if !seen.insert(fold_case(keyword.trim())) {
            return Err(IngestError::DuplicateKeyword(keyword.clone()));
        }
        patterns.push(tokens);
    }

    let folded: Vec<String> = doc.tokens.iter().map(|t| fold_case(&t.surface)).collect();
    let loose = LooseText::new(doc);

    let mut order: Vec<usize> = (0..keywords.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(patterns[i].len()));
    let mut claimed = std::collections::HashSet::new();
    let mut found: Vec<Option<usize>> = vec![None; keywords.len()];
    for i in order {
        let (keyword, _) = &keywords[i];
        found[i] = find_sequences(&folded, &patterns[i])
            .find(|p| !claimed.contains(p))
            .or_else(|| loose.find_all(keyword).into_iter().find(|p| !claimed.contains(p)));
        if let Some(p) = found[i] {
            claimed.insert(p);
        }
    }

    let mut scan = OccurrenceScan::default();
    for ((keyword, kind), position) in keywords.iter().zip(found) {
        match position {
            Some(global_position) => scan.occurrences.push(KeywordOccurrence {
                keyword: keyword.clone(),
                kind: *kind,
                global_position,
                page_relative_position: None,
                synthetic_anchor: false,
            }),
            None => scan.misses.push(keyword.clone()),
        }
    }
    scan.occurrences.sort_by_key(|o| o.global_position);
    Ok(scan)
}

fn find_sequences<'a>(
    haystack: &'a [String],
    needle: &'a [String],
) -> impl Iterator<Item = usize> + 'a {
    let width = needle.len().max(1);
    haystack
        .windows(width)
        .enumerate()
        .filter(move |(_, w)| !needle.is_empty() && *w == needle)
        .map(|(i, _)| i)
}

/// Normalized token text joined by single spaces, with the byte offset at
/// which each token starts.
struct LooseText {
    text: String,
    starts: Vec<usize>,
}

impl LooseText {
    fn new(doc: &StoryDocument) -> Self {
        let mut text = String::new();
        let mut starts = Vec::with_capacity(doc.tokens.len());
        for (i, token) in doc.tokens.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            starts.push(text.len());
            text.push_str(&normalize_loose(&token.surface));
        }
        Self { text, starts }
    }

    /// Token indices at which the keyword's normalized text starts, ascending
    /// and without repeats.
    fn find_all(&self, keyword: &str) -> Vec<usize> {
        let Ok(tokens) = segment_words(keyword, "") else {
            return Vec::new();
        };
        let words: Vec<String> = tokens.iter().map(|t| normalize_loose(&t.surface)).collect();
        let needle = words.join(" ");
        if needle.is_empty() {
            return Vec::new();
        }
        let mut hits: Vec<usize> = self
            .text
            .match_indices(&needle)
            .map(|(at, _)| match self.starts.binary_search(&at) {
                Ok(i) => i,
                Err(i) => i - 1,
            })
            .collect();
        hits.dedup();
        hits
    }
}
