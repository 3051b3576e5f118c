//! File-system helpers shared by the config writer, the workload and the
//! checkpoint engine: atomic replacement, a simulated directory quota and
//! stable 64-bit digests.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Name of the file that imposes a byte quota on the directory holding it.
pub const QUOTA_FILE: &str = ".liquid-quota";

/// 64-bit digest of `bytes`, hex encoded. Leading 8 bytes of SHA-256, so it is
/// stable across hosts and architectures.
pub fn digest64(bytes: &[u8]) -> String {
    let full = Sha256::digest(bytes);
    hex::encode(&full[..8])
}

/// Digest over an ordered list of digests (whole-bundle checksum).
pub fn digest_of_digests<'a, I>(parts: I) -> String
where
    I: IntoIterator<Item = &'a str>,
{
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Nearest quota root at or above `dir`, with its byte limit.
pub fn find_quota(dir: &Path) -> Option<(PathBuf, u64)> {
    let mut cur = Some(dir);
    while let Some(d) = cur {
        let candidate = d.join(QUOTA_FILE);
        if let Ok(text) = fs::read_to_string(&candidate) {
            if let Ok(limit) = text.trim().parse::<u64>() {
                return Some((d.to_path_buf(), limit));
            }
        }
        cur = d.parent();
    }
    None
}

fn dir_usage(dir: &Path) -> u64 {
    let Ok(entries) = fs::read_dir(dir) else {
        return 0;
    };
    let mut total = 0;
    for entry in entries.flatten() {
        let Ok(meta) = entry.metadata() else { continue };
        if meta.is_dir() {
            total += dir_usage(&entry.path());
        } else if entry.file_name() != QUOTA_FILE {
            total += meta.len();
        }
    }
    total
}

fn check_quota(path: &Path, len: u64) -> io::Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    if let Some((root, limit)) = find_quota(parent) {
        let used = dir_usage(&root);
        if used + len > limit {
            return Err(io::Error::new(
                io::ErrorKind::StorageFull,
                format!(
                    "quota exceeded under {}: {used} + {len} > {limit} bytes",
                    root.display()
                ),
            ));
        }
    }
    Ok(())
}

/// Write `bytes` to `path`, honoring any directory quota, and fsync.
pub fn write_file(path: &Path, bytes: &[u8]) -> io::Result<()> {
    check_quota(path, bytes.len() as u64)?;
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

/// Replace `path` with `bytes` through a temporary sibling and a rename, so
/// readers observe either the old or the new contents.
pub fn atomic_replace(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = parent.join(format!(
        ".{}.tmp.{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let res = write_file(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable() {
        // SHA-256("abc") = ba7816bf8f01cfea...
        assert_eq!(digest64(b"abc"), "ba7816bf8f01cfea");
        assert_ne!(digest64(b"abc"), digest64(b"abd"));
        assert_eq!(digest_of_digests(["a", "b"]), digest_of_digests(["a", "b"]));
        assert_ne!(digest_of_digests(["a", "b"]), digest_of_digests(["b", "a"]));
    }

    #[test]
    fn quota_rejects_oversized_writes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(QUOTA_FILE), "10").unwrap();
        let sub = dir.path().join("bundle");
        fs::create_dir(&sub).unwrap();
        write_file(&sub.join("a"), b"12345").unwrap();
        let err = write_file(&sub.join("b"), b"123456").unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::StorageFull);
        write_file(&sub.join("c"), b"12345").unwrap();
    }

    #[test]
    fn atomic_replace_leaves_no_temp_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(QUOTA_FILE), "3").unwrap();
        let target = dir.path().join("conf");
        assert!(atomic_replace(&target, b"too long").is_err());
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from(QUOTA_FILE)]);
    }
}
