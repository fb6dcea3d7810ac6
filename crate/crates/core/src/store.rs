//! On-disk persistence: a content-addressed blob directory and an
//! append-only JSON-lines journal.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Name of a stored blob: `<sha256 hex>.<extension>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlobRef(String);

impl BlobRef {
    pub fn new(hash: &str, extension: &str) -> Self {
        Self(format!("{hash}.{extension}"))
    }

    pub fn parse(name: &str) -> Option<Self> {
        let (hash, ext) = name.split_once('.')?;
        let valid = hash.len() == 64
            && hash.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
            && !ext.is_empty()
            && ext.bytes().all(|b| b.is_ascii_alphanumeric());
        valid.then(|| Self(name.to_owned()))
    }

    pub fn hash(&self) -> &str {
        self.0.split_once('.').map_or(&self.0, |(h, _)| h)
    }

    pub fn extension(&self) -> &str {
        self.0.split_once('.').map_or("", |(_, e)| e)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for BlobRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, blob: &BlobRef) -> PathBuf {
        self.root.join(blob.as_str())
    }

    /// Stores bytes under their hash. Writing the same bytes twice is a no-op.
    pub fn put(&self, bytes: &[u8], extension: &str) -> io::Result<BlobRef> {
        let blob = BlobRef::new(&sha256_hex(bytes), extension);
        let path = self.path(&blob);
        if path.exists() {
            return Ok(blob);
        }
        let tmp = self.root.join(format!(
            ".{}.{}.tmp",
            blob.as_str(),
            std::process::id()
        ));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(blob)
    }

    pub fn get(&self, blob: &BlobRef) -> io::Result<Vec<u8>> {
        fs::read(self.path(blob))
    }

    /// Reads a blob and checks it still hashes to its name.
    pub fn get_verified(&self, blob: &BlobRef) -> io::Result<Vec<u8>> {
        let bytes = self.get(blob)?;
        if sha256_hex(&bytes) != blob.hash() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("blob {blob} does not match its hash"),
            ));
        }
        Ok(bytes)
    }

    pub fn contains(&self, blob: &BlobRef) -> bool {
        self.path(blob).is_file()
    }
}

/// Append-only JSON-lines log. Each append is flushed and synced before
/// returning, so a record that was acknowledged survives a crash.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    /// Opens (creating if needed) and replays every complete record.
    ///
    /// A torn or unparsable line is skipped with a warning; records after it
    /// are still replayed.
    pub fn open<T: DeserializeOwned>(path: impl Into<PathBuf>) -> io::Result<(Self, Vec<T>)> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut records = Vec::new();
        let mut needs_newline = false;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.split(b'\n').enumerate() {
                let line = line?;
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                match serde_json::from_slice(&line) {
                    Ok(rec) => records.push(rec),
                    Err(e) => log::warn!("{}: skipping line {}: {e}", path.display(), n + 1),
                }
            }
            let bytes = fs::read(&path)?;
            needs_newline = bytes.last().is_some_and(|b| *b != b'\n');
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        if needs_newline {
            file.write_all(b"\n")?;
        }
        Ok((
            Self {
                path,
                file: Mutex::new(file),
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&line)?;
        file.sync_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn identical_bytes_share_a_ref() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let a = store.put(b"mesh", "glb").unwrap();
        let b = store.put(b"mesh", "glb").unwrap();
        let c = store.put(b"other", "glb").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(store.get(&a).unwrap(), b"mesh");
        assert_eq!(a.extension(), "glb");
        assert_eq!(a.hash(), sha256_hex(b"mesh"));
    }

    #[test]
    fn tampered_blob_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let a = store.put(b"mesh", "glb").unwrap();
        fs::write(store.path(&a), b"evil").unwrap();
        assert!(store.get_verified(&a).is_err());
    }

    #[test]
    fn blob_ref_parsing() {
        let h = sha256_hex(b"x");
        assert!(BlobRef::parse(&format!("{h}.png")).is_some());
        assert!(BlobRef::parse("../etc/passwd").is_none());
        assert!(BlobRef::parse(&format!("{h}.p/g")).is_none());
        assert!(BlobRef::parse(&h).is_none());
    }

    #[test]
    fn journal_replays_and_skips_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.jsonl");
        {
            let (j, recs) = Journal::open::<serde_json::Value>(&path).unwrap();
            assert!(recs.is_empty());
            j.append(&json!({"n": 1})).unwrap();
            j.append(&json!({"n": 2})).unwrap();
        }
        // Simulate a crash halfway through a write.
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"n\": 3").unwrap();
        drop(f);

        let (j, recs) = Journal::open::<serde_json::Value>(&path).unwrap();
        assert_eq!(recs, vec![json!({"n": 1}), json!({"n": 2})]);
        j.append(&json!({"n": 4})).unwrap();
        drop(j);
        let (_, recs) = Journal::open::<serde_json::Value>(&path).unwrap();
        assert_eq!(recs.last().unwrap(), &json!({"n": 4}));
        assert_eq!(recs.len(), 3);
    }
}
