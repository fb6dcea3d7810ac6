//! Narration-synchronized pop-up times: `T = ceil(N_K * 5 / r)`.

use std::collections::BTreeMap;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::narration::NarrationTrack;
use super::pagination::PageLayout;
use super::AssemblyError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopupEvent {
    pub keyword: String,
    pub asset_id: String,
    pub page_index: usize,
    /// Words before the keyword on its page (`N_K`).
    pub page_relative_position: usize,
    pub popup_seconds: u64,
}

/// `ceil(n_k * 5 / r)` evaluated exactly on the binary value of `r`.
///
/// Panics if `r` is not finite and positive.
pub fn popup_seconds_exact(n_k: u64, speech_rate: f64) -> BigUint {
    assert!(
        speech_rate.is_finite() && speech_rate > 0.0,
        "speech rate must be finite and positive"
    );
    let r = BigRational::from_float(speech_rate).expect("finite");
    let t = BigRational::from_integer(BigInt::from(n_k) * 5) / r;
    t.ceil()
        .to_integer()
        .to_biguint()
        .unwrap_or_else(BigUint::zero)
}

/// [`popup_seconds_exact`] saturated to `u64`.
pub fn popup_seconds(n_k: u64, speech_rate: f64) -> u64 {
    popup_seconds_exact(n_k, speech_rate)
        .to_u64()
        .unwrap_or(u64::MAX)
}

/// Pop-up events for one page, sorted by time then by text order.
///
/// `asset_ids` maps each keyword to the asset that renders it.
pub fn compute_popup_schedule(
    page: &PageLayout,
    track: &NarrationTrack,
    asset_ids: &BTreeMap<String, String>,
) -> Result<Vec<PopupEvent>, AssemblyError> {
    if !(track.speech_rate.is_finite() && track.speech_rate > 0.0) {
        return Err(AssemblyError::InvalidSpeechRate(track.speech_rate));
    }
    if track.page_index != page.page_index {
        return Err(AssemblyError::DanglingReference(format!(
            "narration for page {} attached to page {}",
            track.page_index, page.page_index
        )));
    }
    let mut events = Vec::with_capacity(page.anchored.len() + page.occurrences.len());
    for occ in page.anchored.iter().chain(&page.occurrences) {
        let asset_id = asset_ids.get(&occ.keyword).ok_or_else(|| {
            AssemblyError::DanglingReference(format!("no asset for keyword {:?}", occ.keyword))
        })?;
        let n_k = if occ.synthetic_anchor {
            0
        } else {
            occ.global_position - page.text_span.0
        };
        events.push(PopupEvent {
            keyword: occ.keyword.clone(),
            asset_id: asset_id.clone(),
            page_index: page.page_index,
            page_relative_position: n_k,
            popup_seconds: popup_seconds(n_k as u64, track.speech_rate),
        });
    }
    // Stable sort keeps text order among equal times.
    events.sort_by_key(|e| e.popup_seconds);
    Ok(events)
}
