//! The downloadable zip: `manifest.json`, `assets/<hash>.glb` and
//! `audio/page_<n>.<ext>`. Entries are written in name order with a fixed
//! timestamp, so the same manifest always yields the same archive bytes.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use super::AssemblyError;
use super::manifest::BookManifest;
use crate::store::{BlobRef, BlobStore, sha256_hex};

pub const BUNDLE_MANIFEST: &str = "manifest.json";

fn zip_err(e: impl std::fmt::Display) -> AssemblyError {
    AssemblyError::Bundle(e.to_string())
}

/// Archive paths and the blobs that fill them.
fn entries(manifest: &BookManifest) -> BTreeMap<String, BlobRef> {
    let mut files = BTreeMap::new();
    for asset in &manifest.assets {
        files.insert(asset.mesh_path.clone(), asset.mesh_ref.clone());
    }
    for track in &manifest.narration {
        files.insert(track.audio_path.clone(), track.audio_ref.clone());
    }
    files
}

pub fn write_bundle(manifest: &BookManifest, store: &BlobStore) -> Result<Vec<u8>, AssemblyError> {
    manifest.validate()?;
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    files.insert(BUNDLE_MANIFEST.to_owned(), manifest.to_canonical_json());
    for (path, blob) in entries(manifest) {
        files.insert(path, store.get_verified(&blob)?);
    }
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    for (path, bytes) in &files {
        zip.start_file(path.as_str(), options).map_err(zip_err)?;
        zip.write_all(bytes).map_err(zip_err)?;
    }
    Ok(zip.finish().map_err(zip_err)?.into_inner())
}

/// Opens a bundle, checks that every file the manifest names is present and
/// matches its hash, and returns the manifest.
pub fn read_bundle(bytes: &[u8]) -> Result<BookManifest, AssemblyError> {
    let mut archive = ZipArchive::new(Cursor::new(bytes)).map_err(zip_err)?;
    let mut read = |name: &str| -> Result<Vec<u8>, AssemblyError> {
        let mut file = archive
            .by_name(name)
            .map_err(|e| AssemblyError::Bundle(format!("{name}: {e}")))?;
        let mut out = Vec::new();
        file.read_to_end(&mut out).map_err(zip_err)?;
        Ok(out)
    };
    let manifest = BookManifest::from_json(&read(BUNDLE_MANIFEST)?)?;
    for (path, blob) in entries(&manifest) {
        if sha256_hex(&read(&path)?) != blob.hash() {
            return Err(AssemblyError::Bundle(format!("{path} does not match {blob}")));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembler::manifest::{ManifestAsset, assemble_manifest};
    use crate::assembler::narration::NarrationTrack;
    use crate::assembler::pagination::divide_pages;
    use crate::assembler::popup::compute_popup_schedule;
    use crate::gate::Verdict;
    use crate::ingest::{KeywordKind, KeywordOccurrence};
    use crate::providers::mock::silent_wav;

    fn book(store: &BlobStore) -> BookManifest {
        let occ = vec![KeywordOccurrence {
            keyword: "jade".into(),
            kind: KeywordKind::Object,
            global_position: 2,
            page_relative_position: None,
            synthetic_anchor: false,
        }];
        let pages = divide_pages(&occ, 10).unwrap();
        let mesh = store.put(b"glb bytes", "glb").unwrap();
        let audio = store.put(&silent_wav(1.0, 1000), "wav").unwrap();
        let track = NarrationTrack {
            page_index: 1,
            audio_ref: audio,
            audio_path: "audio/page_1.wav".into(),
            duration_seconds: 1.0,
            speech_rate: 50.0,
        };
        let ids = BTreeMap::from([("jade".to_string(), "a1".to_string())]);
        let popups = compute_popup_schedule(&pages[0], &track, &ids).unwrap();
        let asset = ManifestAsset::new("a1", "jade", KeywordKind::Object, mesh, 0.9, Verdict::AutoPlausible);
        assemble_manifest("b1", "Jade", "en", pages, popups, vec![track], vec![asset]).unwrap()
    }

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let m = book(&store);
        let bytes = write_bundle(&m, &store).unwrap();
        assert_eq!(read_bundle(&bytes).unwrap(), m);
        let archive = ZipArchive::new(Cursor::new(&bytes)).unwrap();
        let mut names: Vec<_> = archive.file_names().map(|n| n.unwrap().into_owned()).collect();
        names.sort();
        assert_eq!(names.len(), 3);
        assert!(names.contains(&"manifest.json".to_string()));
        assert!(names.contains(&"audio/page_1.wav".to_string()));
        assert!(names.iter().any(|n| n.starts_with("assets/") && n.ends_with(".glb")));
    }

    #[test]
    fn same_manifest_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let m = book(&store);
        assert_eq!(write_bundle(&m, &store).unwrap(), write_bundle(&m, &store).unwrap());
    }

    #[test]
    fn tampered_blob_is_not_bundled() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let m = book(&store);
        std::fs::write(store.path(&m.assets[0].mesh_ref), b"swapped").unwrap();
        assert!(write_bundle(&m, &store).is_err());
    }
}
