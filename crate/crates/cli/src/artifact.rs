//! Artifact headers, atomic writes and the run manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    /// Header lines without the comment marker.
    pub fn lines(&self, kind: &str) -> Vec<String> {
        vec![format!("sparsearch {VERSION} {kind} config={} seed={}", self.config_hash, self.seed)]
    }

    /// Same lines prefixed with `# `.
    pub fn comment(&self, kind: &str) -> String {
        self.lines(kind).iter().map(|l| format!("# {l}\n")).collect()
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Puts `stamp` comment lines after the first line of a text artifact whose
/// first line is a format header.
pub fn stamp_after_first_line(text: &str, stamp: &Stamp, kind: &str) -> String {
    match text.split_once('\n') {
        Some((first, rest)) => format!("{first}\n{}{rest}", stamp.comment(kind)),
        None => format!("{text}\n{}", stamp.comment(kind)),
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// `manifest.txt`: stamp plus one `sha256  relative-path` line per artifact.
/// Binary artifacts are covered here since they cannot carry a text header.
pub fn write_manifest(dir: &Path, stamp: &Stamp, files: &[&str]) -> std::io::Result<()> {
    let mut s = stamp.comment("manifest");
    for f in files {
        let p = dir.join(f);
        if p.is_file() {
            s.push_str(&format!("{}  {f}\n", sha256_file(&p)?));
        }
    }
    write_atomic(&dir.join("manifest.txt"), s.as_bytes())
}
