//! Page division: every page but the last carries 4 to 6 models.
//!
//! Pages are first filled 4 at a time. A page's text ends right after the
//! word of its last occurrence; the final page runs to the end of the text.
//! Then, from the first page onward, while
//! `W_i - W_{i+1} > P_{i,last} - P_{i,first}` and page `i` has fewer than 6
//! occurrences, the first occurrence of page `i + 1` moves to page `i`. After
//! a move the pages behind `i` are refilled 4 at a time, which keeps every
//! non-final page at 4 or more.

use serde::{Deserialize, Serialize};

use super::AssemblyError;
use crate::ingest::KeywordOccurrence;

pub const MIN_PER_PAGE: usize = 4;
pub const MAX_PER_PAGE: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageLayout {
    /// 1-based.
    pub page_index: usize,
    /// `[start_word, end_word)` on the global word axis.
    pub text_span: (usize, usize),
    pub word_count: usize,
    pub occurrences: Vec<KeywordOccurrence>,
    pub first_keyword_position: usize,
    pub last_keyword_position: usize,
    /// Keywords not found in the text. They sit on page 1 and pop up at the
    /// start of its narration; they do not count toward the page size.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anchored: Vec<KeywordOccurrence>,
}

fn fill_by_four(count: usize) -> Vec<usize> {
    let mut sizes = vec![MIN_PER_PAGE; count / MIN_PER_PAGE];
    if count % MIN_PER_PAGE != 0 {
        sizes.push(count % MIN_PER_PAGE);
    }
    sizes
}

/// Word spans of every page for the given page sizes.
fn spans(positions: &[usize], sizes: &[usize], total_words: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    let mut consumed = 0;
    for (i, size) in sizes.iter().enumerate() {
        consumed += size;
        let end = if i + 1 == sizes.len() {
            total_words
        } else {
            positions[consumed - 1] + 1
        };
        out.push((start, end));
        start = end;
    }
    out
}

/// Page sizes after preliminary filling and rebalancing.
fn page_sizes(positions: &[usize], total_words: usize) -> Vec<usize> {
    let mut sizes = fill_by_four(positions.len());
    let mut i = 0;
    let mut first_of_page = 0;
    while i + 1 < sizes.len() {
        loop {
            if sizes[i] >= MAX_PER_PAGE || i + 1 >= sizes.len() {
                break;
            }
            let last = first_of_page + sizes[i] - 1;
            let start_i = if first_of_page == 0 {
                0
            } else {
                positions[first_of_page - 1] + 1
            };
            let end_i = positions[last] + 1;
            let end_next = if i + 2 == sizes.len() {
                total_words
            } else {
                positions[last + sizes[i + 1]] + 1
            };
            let w_i = end_i - start_i;
            let w_next = end_next - end_i;
            let spread = positions[last] - positions[first_of_page];
            // W_i > W_{i+1} + spread, rearranged to stay in unsigned arithmetic.
            if w_i <= w_next + spread {
                break;
            }
            sizes[i] += 1;
            let assigned: usize = sizes[..=i].iter().sum();
            sizes.truncate(i + 1);
            sizes.extend(fill_by_four(positions.len() - assigned));
        }
        first_of_page += sizes[i];
        i += 1;
    }
    sizes
}

/// Divides the occurrences (sorted, strictly increasing positions, all
/// inside the text) into pages.
pub fn divide_pages(
    occurrences: &[KeywordOccurrence],
    total_words: usize,
) -> Result<Vec<PageLayout>, AssemblyError> {
    if occurrences.is_empty() {
        return Err(AssemblyError::EmptyBook);
    }
    let positions: Vec<usize> = occurrences.iter().map(|o| o.global_position).collect();
    if let Some(w) = positions.windows(2).find(|w| w[0] >= w[1]) {
        return Err(AssemblyError::InvalidOccurrences(format!(
            "position {} follows {}",
            w[1], w[0]
        )));
    }
    if positions[positions.len() - 1] >= total_words {
        return Err(AssemblyError::InvalidOccurrences(format!(
            "position {} is past the last word ({total_words} words)",
            positions[positions.len() - 1]
        )));
    }

    let sizes = page_sizes(&positions, total_words);
    let mut pages = Vec::with_capacity(sizes.len());
    let mut rest = occurrences;
    for (i, (size, span)) in sizes.iter().zip(spans(&positions, &sizes, total_words)).enumerate() {
        let (mine, tail) = rest.split_at(*size);
        rest = tail;
        let occurrences: Vec<KeywordOccurrence> = mine
            .iter()
            .map(|o| KeywordOccurrence {
                page_relative_position: Some(o.global_position - span.0),
                ..o.clone()
            })
            .collect();
        pages.push(PageLayout {
            page_index: i + 1,
            text_span: span,
            word_count: span.1 - span.0,
            first_keyword_position: mine[0].global_position,
            last_keyword_position: mine[mine.len() - 1].global_position,
            occurrences,
            anchored: Vec::new(),
        });
    }
    Ok(pages)
}

/// Lays out a book's occurrences, putting synthetic anchors on page 1.
///
/// When nothing was found in the text, a single page spans the whole story
/// and holds only the anchors.
pub fn attach_anchors(
    occurrences: &[KeywordOccurrence],
    total_words: usize,
) -> Result<Vec<PageLayout>, AssemblyError> {
    let (anchors, located): (Vec<_>, Vec<_>) =
        occurrences.iter().cloned().partition(|o| o.synthetic_anchor);
    let anchors: Vec<KeywordOccurrence> = anchors
        .into_iter()
        .map(|o| KeywordOccurrence {
            page_relative_position: Some(0),
            ..o
        })
        .collect();
    if located.is_empty() {
        if anchors.is_empty() || total_words == 0 {
            return Err(AssemblyError::EmptyBook);
        }
        return Ok(vec![PageLayout {
            page_index: 1,
            text_span: (0, total_words),
            word_count: total_words,
            occurrences: Vec::new(),
            first_keyword_position: 0,
            last_keyword_position: 0,
            anchored: anchors,
        }]);
    }
    let mut pages = divide_pages(&located, total_words)?;
    pages[0].anchored = anchors;
    Ok(pages)
}
