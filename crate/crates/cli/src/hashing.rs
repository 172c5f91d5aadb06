use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const RUN_RECORD: &str = "run.json";

/// Git-style object hash over SHA-256: `blob <len>\0<content>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex(&h.finalize())
}

/// Files hash as blobs. A directory hashes the sorted list of
/// `<hash> <relative path>` lines of every file below it, skipping run
/// records.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        return Ok(blob_hash(&bytes));
    }
    let mut entries = Vec::new();
    collect(path, path, &mut entries)?;
    entries.sort();
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", entries.len()));
    for (rel, hash) in entries {
        h.update(format!("{hash} {rel}\n"));
    }
    Ok(hex(&h.finalize()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != RUN_RECORD) {
            let rel = path.strip_prefix(root).expect("below root").to_string_lossy().replace('\\', "/");
            out.push((rel, blob_hash(&fs::read(&path)?)));
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_blob() {
        // sha256 of "blob 0\0", as used by git's sha256 object format
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn directory_hash_ignores_listing_order() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for (dir, order) in [(&a, ["x", "y"]), (&b, ["y", "x"])] {
            for name in order {
                fs::write(dir.path().join(name), name).unwrap();
            }
        }
        assert_eq!(content_hash(a.path()).unwrap(), content_hash(b.path()).unwrap());
        fs::write(b.path().join("x"), "changed").unwrap();
        assert_ne!(content_hash(a.path()).unwrap(), content_hash(b.path()).unwrap());
    }
}
