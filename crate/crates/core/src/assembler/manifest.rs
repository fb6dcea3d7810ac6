//! The assembled book and its canonical JSON form.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::AssemblyError;
use super::narration::NarrationTrack;
use super::pagination::PageLayout;
use super::popup::PopupEvent;
use crate::gate::Verdict;
use crate::ingest::KeywordKind;
use crate::store::BlobRef;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestAsset {
    pub asset_id: String,
    pub keyword: String,
    pub kind: KeywordKind,
    pub mesh_ref: BlobRef,
    /// Location inside the bundle, `assets/<hash>.glb`.
    pub mesh_path: String,
    pub score: f64,
    pub verdict: Verdict,
}

impl ManifestAsset {
    pub fn new(
        asset_id: impl Into<String>,
        keyword: impl Into<String>,
        kind: KeywordKind,
        mesh_ref: BlobRef,
        score: f64,
        verdict: Verdict,
    ) -> Self {
        Self {
            asset_id: asset_id.into(),
            keyword: keyword.into(),
            kind,
            mesh_path: format!("assets/{mesh_ref}"),
            mesh_ref,
            score,
            verdict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookManifest {
    pub format_version: String,
    pub book_id: String,
    pub title: String,
    pub language: String,
    pub pages: Vec<PageLayout>,
    pub popups: Vec<PopupEvent>,
    pub narration: Vec<NarrationTrack>,
    pub assets: Vec<ManifestAsset>,
}

/// Builds and validates a manifest. `assets` must hold only admitted
/// (kept or auto-plausible) assets.
pub fn assemble_manifest(
    book_id: &str,
    title: &str,
    language: &str,
    pages: Vec<PageLayout>,
    popups: Vec<PopupEvent>,
    narration: Vec<NarrationTrack>,
    assets: Vec<ManifestAsset>,
) -> Result<BookManifest, AssemblyError> {
    let manifest = BookManifest {
        format_version: FORMAT_VERSION.to_owned(),
        book_id: book_id.to_owned(),
        title: title.to_owned(),
        language: language.to_owned(),
        pages,
        popups,
        narration,
        assets,
    };
    manifest.validate()?;
    Ok(manifest)
}

impl BookManifest {
    /// Checks every cross-reference and the exclusion rule.
    pub fn validate(&self) -> Result<(), AssemblyError> {
        if self.format_version != FORMAT_VERSION {
            return Err(AssemblyError::Bundle(format!(
                "unsupported format version {:?}",
                self.format_version
            )));
        }
        if self.pages.is_empty() || self.assets.is_empty() {
            return Err(AssemblyError::EmptyBook);
        }
        for (i, page) in self.pages.iter().enumerate() {
            if page.page_index != i + 1 {
                return Err(AssemblyError::DanglingReference(format!(
                    "page {} listed at position {}",
                    page.page_index,
                    i + 1
                )));
            }
        }
        let mut assets = BTreeMap::new();
        for asset in &self.assets {
            if !asset.verdict.admits() {
                return Err(AssemblyError::RemovedAssetReferenced(asset.asset_id.clone()));
            }
            if assets.insert(asset.asset_id.as_str(), asset).is_some() {
                return Err(AssemblyError::DanglingReference(format!(
                    "asset {} listed twice",
                    asset.asset_id
                )));
            }
        }
        let mut popped = BTreeSet::new();
        for popup in &self.popups {
            if !assets.contains_key(popup.asset_id.as_str()) {
                return Err(AssemblyError::DanglingReference(format!(
                    "popup {:?} names unknown asset {}",
                    popup.keyword, popup.asset_id
                )));
            }
            if !popped.insert(popup.asset_id.as_str()) {
                return Err(AssemblyError::DuplicatePopup(popup.asset_id.clone()));
            }
            if popup.page_index == 0 || popup.page_index > self.pages.len() {
                return Err(AssemblyError::DanglingReference(format!(
                    "popup {:?} on missing page {}",
                    popup.keyword, popup.page_index
                )));
            }
        }
        let narrated: Vec<usize> = self.narration.iter().map(|n| n.page_index).collect();
        let expected: Vec<usize> = (1..=self.pages.len()).collect();
        if narrated != expected {
            return Err(AssemblyError::DanglingReference(format!(
                "narration covers pages {narrated:?}, book has {}",
                self.pages.len()
            )));
        }
        Ok(())
    }

    /// Canonical serialization: keys sorted at every level, two-space
    /// indentation, trailing LF.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let value = canonicalize(serde_json::to_value(self).expect("manifest serializes"));
        let mut out = serde_json::to_vec_pretty(&value).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AssemblyError> {
        let manifest: Self =
            serde_json::from_slice(bytes).map_err(|e| AssemblyError::Bundle(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

fn canonicalize(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> =
                map.into_iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}
