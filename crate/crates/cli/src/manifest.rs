use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    Ok(sha256_hex(&std::fs::read(path).with_context(|| {
        format!("cannot read {}", path.display())
    })?))
}

/// Record of one pipeline run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub input_digests: BTreeMap<String, String>,
    /// Keyed by file name inside the output directory.
    pub output_digests: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub seed: Option<u64>,
    pub threads: usize,
}

pub struct Recorder {
    started: Instant,
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str, config_bytes: &[u8], seed: Option<u64>, out_dir: &Path) -> Self {
        Self {
            started: Instant::now(),
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                config_digest: sha256_hex(config_bytes),
                input_digests: BTreeMap::new(),
                output_digests: BTreeMap::new(),
                wall_time_s: 0.0,
                seed,
                threads: rayon::current_num_threads(),
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let digest = file_digest(path)?;
        self.manifest
            .input_digests
            .insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Path of an output file, to be written by the caller before `finish`.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.manifest
            .output_digests
            .insert(name.into(), String::new());
        self.out_dir.join(name)
    }

    pub fn write_output(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.output(name);
        std::fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    /// Digests the outputs and writes `<command>.manifest.json`.
    pub fn finish(mut self) -> anyhow::Result<RunManifest> {
        for (name, digest) in self.manifest.output_digests.iter_mut() {
            *digest = file_digest(&self.out_dir.join(name))?;
        }
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        let path = self
            .out_dir
            .join(format!("{}.manifest.json", self.manifest.command));
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Recorder::new("demo", b"{}", Some(3), dir.path());
        r.write_output("a.txt", b"abc").unwrap();
        let m = r.finish().unwrap();
        assert_eq!(m.output_digests["a.txt"], sha256_hex(b"abc"));
        assert_eq!(m.seed, Some(3));
        let back: RunManifest =
            serde_json::from_slice(&std::fs::read(dir.path().join("demo.manifest.json")).unwrap())
                .unwrap();
        assert_eq!(back.config_digest, sha256_hex(b"{}"));
    }
}
