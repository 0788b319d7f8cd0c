//! Provenance record written next to every CLI output.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub params: Value,
    pub seeds: Vec<u64>,
    /// Digest of the weights file, when a model was loaded.
    pub model_sha256: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// One digest per regular file; directories are walked in name order.
pub fn digest_path(path: &Path) -> Result<Vec<FileDigest>> {
    if !path.is_dir() {
        return Ok(vec![FileDigest { path: path.display().to_string(), sha256: sha256_file(path)? }]);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut out = Vec::new();
    for e in entries {
        out.extend(digest_path(&e)?);
    }
    Ok(out)
}

/// `out.json` gets `out.json.manifest.json` beside it; a directory `dir`
/// gets `dir.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "run".into());
    name.push(".manifest.json");
    output.with_file_name(name)
}

impl RunManifest {
    pub fn new(command: &str, params: Value) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            params,
            seeds: Vec::new(),
            model_sha256: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now(),
            finished: 0,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.extend(digest_path(path)?);
        Ok(())
    }

    /// An input that is not a file, such as a bundled corpus.
    pub fn input_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.push(FileDigest { path: name.into(), sha256: sha256_bytes(bytes) });
    }

    /// Hashes `output` and writes the manifest beside it.
    pub fn finish(self, output: &Path) -> Result<PathBuf> {
        self.finish_all(output, &[])
    }

    /// Like [`finish`](Self::finish), also hashing secondary outputs.
    pub fn finish_all(mut self, output: &Path, extra: &[&Path]) -> Result<PathBuf> {
        self.outputs = digest_path(output)?;
        for p in extra {
            self.outputs.extend(digest_path(p)?);
        }
        self.finished = now();
        let path = manifest_path(output);
        let mut text = serde_json::to_vec_pretty(&self)?;
        text.push(b'\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}
