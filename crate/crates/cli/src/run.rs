//! File access for one invocation. Every input read is hashed and every
//! output written is recorded, so the run can be described by a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Description of a completed run, written beside its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
}

pub struct Run {
    command: String,
    argv: Vec<String>,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
}

fn display(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

impl Run {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        Self { command: command.to_string(), argv, inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("Io: cannot read {}", path.display()))?;
        self.inputs.push(InputDigest { path: display(path), sha256: hex::encode(Sha256::digest(&bytes)) });
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String> {
        let bytes = self.read(path)?;
        String::from_utf8(bytes).with_context(|| format!("Io: {} is not UTF-8", path.display()))
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(input) = self.inputs.iter().find(|i| same_file(Path::new(&i.path), path)) {
            bail!("OutputIsInput: refusing to overwrite input {}", input.path);
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("Io: cannot create {}", dir.display()))?;
        }
        fs::write(path, bytes).with_context(|| format!("Io: cannot write {}", path.display()))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Writes the manifest to `path` and returns it.
    pub fn finish(mut self, path: &Path, config: impl Serialize, seed: Option<u64>) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.clone(),
            argv: std::mem::take(&mut self.argv),
            version: env!("CARGO_PKG_VERSION"),
            config: serde_json::to_value(config).context("config snapshot")?,
            inputs: std::mem::take(&mut self.inputs),
            outputs: self.outputs.iter().map(|p| display(p)).collect(),
            seed,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        self.write(path, json.as_bytes())?;
        Ok(manifest)
    }
}

/// `<path>` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_appends() {
        assert_eq!(sibling(Path::new("out/m.prb"), ".run.json"), PathBuf::from("out/m.prb.run.json"));
    }

    #[test]
    fn digests_inputs_and_refuses_to_overwrite_them() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, b"abc").unwrap();
        let mut run = Run::new("test", vec![]);
        assert_eq!(run.read(&input).unwrap(), b"abc");
        assert_eq!(
            run.inputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let err = run.write(&input, b"x").unwrap_err();
        assert!(err.to_string().starts_with("OutputIsInput"));
        assert_eq!(fs::read(&input).unwrap(), b"abc");
        let out = dir.path().join("sub/out.txt");
        run.write(&out, b"y").unwrap();
        let m = run.finish(&sibling(&out, ".run.json"), serde_json::json!({"k": 1}), Some(3)).unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert!(dir.path().join("sub/out.txt.run.json").exists());
    }
}
