//! Checkpoint bundles on disk:
//!
//! ```text
//! <dir>/manifest            structured-text manifest with checksums
//! <dir>/workload.tree       process tree written by the workload root
//! <dir>/state/<pid>.snap    one state file per process
//! <dir>/BUNDLE_COMPLETE     empty marker, written last
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::storage;

pub const MANIFEST_FILE: &str = "manifest";
pub const COMPLETE_MARKER: &str = "BUNDLE_COMPLETE";
pub const DEFAULT_AWAIT_POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestProcess {
    pub vpid: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u32>,
    pub state_file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub app_command: Vec<String>,
    pub label: String,
    pub created_at: DateTime<Utc>,
    /// Restore order: the root first, then its children.
    pub processes: Vec<ManifestProcess>,
    pub files: Vec<FileEntry>,
    /// Digest over the manifest body digest and every file digest.
    #[serde(default)]
    pub bundle_digest: String,
}

impl Manifest {
    fn body_digest(&self) -> String {
        let mut body = self.clone();
        body.bundle_digest.clear();
        storage::digest64(&serde_json::to_vec(&body).expect("serializable"))
    }

    pub fn compute_bundle_digest(&self) -> String {
        let body = self.body_digest();
        storage::digest_of_digests(
            std::iter::once(body.as_str()).chain(self.files.iter().map(|f| f.digest.as_str())),
        )
    }

    pub fn seal(mut self) -> Self {
        self.bundle_digest = self.compute_bundle_digest();
        self
    }

    pub fn vpids(&self) -> Vec<u32> {
        self.processes.iter().map(|p| p.vpid).collect()
    }

    /// Single rooted tree with unique PIDs.
    pub fn check_tree(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for p in &self.processes {
            if !seen.insert(p.vpid) {
                return Err(format!("duplicate pid {}", p.vpid));
            }
        }
        let roots: Vec<_> = self.processes.iter().filter(|p| p.parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(format!("expected one root, found {}", roots.len()));
        }
        if self.processes.first().map(|p| p.parent.is_some()).unwrap_or(true) {
            return Err("root must come first".into());
        }
        for p in &self.processes {
            if let Some(parent) = p.parent {
                if !seen.contains(&parent) || parent == p.vpid {
                    return Err(format!("pid {} has unknown parent {parent}", p.vpid));
                }
            }
        }
        Ok(())
    }
}

/// A written, sealed bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointBundle {
    pub location: PathBuf,
    pub manifest: Manifest,
}

impl CheckpointBundle {
    pub fn state_files(&self) -> Vec<PathBuf> {
        self.manifest
            .processes
            .iter()
            .map(|p| self.location.join(&p.state_file))
            .collect()
    }
}

/// Result of [`verify_bundle`]. Corruption is a value, not an error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BundleVerdict {
    Ok(Manifest),
    Corrupt(String),
}

impl BundleVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, BundleVerdict::Ok(_))
    }
}

pub fn file_entry(dir: &Path, rel: &str) -> std::io::Result<FileEntry> {
    let bytes = std::fs::read(dir.join(rel))?;
    Ok(FileEntry {
        path: rel.to_string(),
        bytes: bytes.len() as u64,
        digest: storage::digest64(&bytes),
    })
}

pub fn read_manifest(location: &Path) -> Result<Manifest, String> {
    let raw = std::fs::read(location.join(MANIFEST_FILE))
        .map_err(|e| format!("manifest unreadable: {e}"))?;
    serde_json::from_slice(&raw).map_err(|e| format!("manifest malformed: {e}"))
}

/// Check that the manifest exists and every referenced file and checksum
/// matches.
pub fn verify_bundle(location: &Path) -> BundleVerdict {
    let manifest = match read_manifest(location) {
        Ok(m) => m,
        Err(e) => return BundleVerdict::Corrupt(e),
    };
    if let Err(e) = manifest.check_tree() {
        return BundleVerdict::Corrupt(format!("process tree: {e}"));
    }
    for p in &manifest.processes {
        if !manifest.files.iter().any(|f| f.path == p.state_file) {
            return BundleVerdict::Corrupt(format!("state file {} not checksummed", p.state_file));
        }
    }
    for f in &manifest.files {
        match file_entry(location, &f.path) {
            Ok(actual) if actual == *f => {}
            Ok(_) => return BundleVerdict::Corrupt(format!("checksum mismatch in {}", f.path)),
            Err(e) => return BundleVerdict::Corrupt(format!("{}: {e}", f.path)),
        }
    }
    if manifest.compute_bundle_digest() != manifest.bundle_digest {
        return BundleVerdict::Corrupt("bundle checksum mismatch".into());
    }
    BundleVerdict::Ok(manifest)
}

pub fn is_complete(location: &Path) -> bool {
    location.join(COMPLETE_MARKER).exists()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bundle at {location} not available after {waited:?}")]
pub struct BundleUnavailableTimeout {
    pub location: PathBuf,
    pub waited: Duration,
}

/// Block until the completion marker exists. `None` waits forever.
pub fn await_bundle(
    location: &Path,
    timeout: Option<Duration>,
    poll: Duration,
) -> Result<(), BundleUnavailableTimeout> {
    let start = Instant::now();
    loop {
        if is_complete(location) {
            return Ok(());
        }
        let waited = start.elapsed();
        if let Some(t) = timeout {
            if waited >= t {
                return Err(BundleUnavailableTimeout {
                    location: location.to_path_buf(),
                    waited,
                });
            }
            thread::sleep(poll.min(t - waited));
        } else {
            thread::sleep(poll);
        }
    }
}

/// Remove whatever a bundle write left behind in `location`.
pub fn discard(location: &Path, created_dir: bool) {
    let _ = std::fs::remove_file(location.join(COMPLETE_MARKER));
    let _ = std::fs::remove_file(location.join(MANIFEST_FILE));
    let _ = std::fs::remove_file(location.join(crate::workload::TREE_FILE));
    let _ = std::fs::remove_dir_all(location.join(crate::workload::STATE_DIR));
    if created_dir {
        let _ = std::fs::remove_dir(location);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dir: &Path) -> Manifest {
        std::fs::create_dir_all(dir.join("state")).unwrap();
        std::fs::write(dir.join("state/301.snap"), b"root").unwrap();
        std::fs::write(dir.join("state/302.snap"), b"child").unwrap();
        let files = vec![
            file_entry(dir, "state/301.snap").unwrap(),
            file_entry(dir, "state/302.snap").unwrap(),
        ];
        let m = Manifest {
            app_command: vec!["memhog".into()],
            label: "t".into(),
            created_at: Utc::now(),
            processes: vec![
                ManifestProcess {
                    vpid: 301,
                    parent: None,
                    state_file: "state/301.snap".into(),
                },
                ManifestProcess {
                    vpid: 302,
                    parent: Some(301),
                    state_file: "state/302.snap".into(),
                },
            ],
            files,
            bundle_digest: String::new(),
        }
        .seal();
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        m
    }

    #[test]
    fn fresh_bundle_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(dir.path());
        assert_eq!(verify_bundle(dir.path()), BundleVerdict::Ok(m));
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        sample(dir.path());
        std::fs::write(dir.path().join("state/302.snap"), b"chilD").unwrap();
        assert!(!verify_bundle(dir.path()).is_ok());
    }

    #[test]
    fn missing_manifest_or_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        sample(dir.path());
        std::fs::remove_file(dir.path().join("state/301.snap")).unwrap();
        assert!(!verify_bundle(dir.path()).is_ok());
        std::fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(matches!(verify_bundle(dir.path()), BundleVerdict::Corrupt(_)));
    }

    #[test]
    fn tampered_manifest_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample(dir.path());
        m.label = "other".into();
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        assert_eq!(
            verify_bundle(dir.path()),
            BundleVerdict::Corrupt("bundle checksum mismatch".into())
        );
    }

    #[test]
    fn tree_checks() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample(dir.path());
        m.processes[1].vpid = 301;
        assert!(m.check_tree().is_err());
        let mut m = sample(dir.path());
        m.processes[1].parent = None;
        assert!(m.check_tree().is_err());
    }

    #[test]
    fn await_returns_immediately_when_marked() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(COMPLETE_MARKER), b"").unwrap();
        let t = Instant::now();
        await_bundle(dir.path(), Some(Duration::from_secs(5)), DEFAULT_AWAIT_POLL).unwrap();
        assert!(t.elapsed() < Duration::from_millis(50));
    }

    #[test]
    fn await_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let err = await_bundle(dir.path(), Some(Duration::from_secs(1)), DEFAULT_AWAIT_POLL)
            .unwrap_err();
        let waited = t.elapsed();
        assert!(waited >= Duration::from_secs(1) && waited < Duration::from_millis(1300));
        assert!(err.waited >= Duration::from_secs(1));
    }

    #[test]
    fn await_blocks_until_marker_appears() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().to_path_buf();
        let writer = thread::spawn(move || {
            thread::sleep(Duration::from_secs(2));
            std::fs::write(path.join(COMPLETE_MARKER), b"").unwrap();
        });
        let t = Instant::now();
        await_bundle(dir.path(), None, DEFAULT_AWAIT_POLL).unwrap();
        let waited = t.elapsed();
        writer.join().unwrap();
        assert!(waited >= Duration::from_secs(2) && waited < Duration::from_millis(2400));
    }
}
