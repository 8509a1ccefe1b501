#![allow(dead_code)]

pub mod cases;
pub mod fd;
pub mod oracle;

use sha2::{Digest, Sha256};
use std::path::Path;

/// Hex digest over every file under `dir`, keyed by relative path.
pub fn dir_digest(dir: &Path) -> String {
    let mut files = Vec::new();
    collect(dir, dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update(std::fs::read(dir.join(&rel)).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
        }
    }
}

pub const BLESS_ENV: &str = "SAGE_BLESS";

/// Compares `actual` against the file under `tests/golden/<rel>`; rewrites it
/// when `SAGE_BLESS` is set.
pub fn golden(rel: &str, actual: &str) -> Result<(), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(rel);
    if std::env::var_os(BLESS_ENV).is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e} (set {BLESS_ENV}=1 to create)", path.display()))?;
    if expected != actual {
        let line = expected.lines().zip(actual.lines()).position(|(a, b)| a != b);
        return Err(format!("{rel} differs from golden (first differing line {line:?})"));
    }
    Ok(())
}
