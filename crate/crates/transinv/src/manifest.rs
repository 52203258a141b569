//! Run manifests: every command records its arguments, input digests, seeds
//! and produced files so a run can be reproduced or audited.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Vec<String>,
    pub created_unix: u64,
    pub wall_secs: f64,
    pub data_dir: Option<String>,
    /// (file name, CRC32 of the on-disk bytes)
    pub dataset_checksums: Vec<(String, u32)>,
    pub seeds: Vec<u64>,
    /// CRC32 of the architecture JSON actually used, when one is involved.
    pub arch_digest_crc32: Option<u32>,
    pub artifacts: Vec<String>,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: Vec<String>) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command,
                created_unix: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                wall_secs: 0.0,
                data_dir: None,
                dataset_checksums: Vec::new(),
                seeds: Vec::new(),
                arch_digest_crc32: None,
                artifacts: Vec::new(),
            },
        }
    }

    pub fn data_dir(&mut self, dir: &Path) -> &mut Self {
        self.manifest.data_dir = Some(dir.display().to_string());
        self
    }

    pub fn checksums(&mut self, sums: &[(String, u32)]) -> &mut Self {
        self.manifest.dataset_checksums = sums.to_vec();
        self
    }

    pub fn seeds(&mut self, seeds: &[u64]) -> &mut Self {
        self.manifest.seeds = seeds.to_vec();
        self
    }

    pub fn arch_json(&mut self, json: &str) -> &mut Self {
        self.manifest.arch_digest_crc32 = Some(crc32fast::hash(json.as_bytes()));
        self
    }

    pub fn artifact(&mut self, path: &Path) -> &mut Self {
        self.manifest.artifacts.push(path.display().to_string());
        self
    }

    /// Write `manifest.json` into the output directory (itself an artifact).
    pub fn write(mut self, out_dir: &Path) -> std::io::Result<PathBuf> {
        self.manifest.wall_secs = self.started.elapsed().as_secs_f64();
        let path = out_dir.join("manifest.json");
        self.manifest.artifacts.push(path.display().to_string());
        std::fs::write(
            &path,
            serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes"),
        )?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_every_artifact_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ManifestBuilder::new(vec!["transinv".into(), "train".into()]);
        b.seeds(&[1, 2, 3]).arch_json("{}");
        b.artifact(&dir.path().join("a.tinv"));
        b.artifact(&dir.path().join("report.json"));
        let path = b.write(dir.path()).unwrap();
        let back: RunManifest =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(back.seeds, vec![1, 2, 3]);
        assert_eq!(back.artifacts.len(), 3, "two outputs plus the manifest");
        assert_eq!(back.arch_digest_crc32, Some(crc32fast::hash(b"{}")));
    }
}
