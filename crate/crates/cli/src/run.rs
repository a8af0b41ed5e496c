//! Run directories and their manifests.

use std::path::{Path, PathBuf};

use serde::Serialize;
use stratplan_core::catalog::sha256_hex;

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_hash: String,
    pub catalog_hash: String,
    pub seed: u64,
    /// Effective settings after flag overrides.
    pub config: serde_json::Value,
    pub started_at: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub status: String,
    pub outputs: Vec<String>,
}

pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

fn now() -> chrono::DateTime<chrono::Utc> {
    chrono::Utc::now()
}

impl Run {
    /// Creates `<root>/<timestamp>-<hash8>/` and writes the manifest into it.
    pub fn create(root: &Path, command: &str, config: serde_json::Value, seed: u64, catalog_hash: &str) -> Result<Run, String> {
        let config_hash = sha256_hex(serde_json::to_string(&config).unwrap().as_bytes());
        let started = now();
        let stem = format!("{}-{}", started.format("%Y%m%dT%H%M%SZ"), &config_hash[..8]);
        let mut dir = root.join(&stem);
        let mut n = 1;
        while dir.exists() {
            dir = root.join(format!("{stem}-{n}"));
            n += 1;
        }
        std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let run = Run {
            dir,
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config_hash,
                catalog_hash: catalog_hash.to_string(),
                seed,
                config,
                started_at: started.to_rfc3339(),
                finished_at: None,
                status: "running".into(),
                outputs: Vec::new(),
            },
        };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_manifest(&self) -> Result<(), String> {
        let path = self.path("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).unwrap();
        std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Writes `contents` to `name` inside the run directory and records it.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, String> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
        std::fs::write(&path, contents).map_err(|e| format!("{}: {e}", path.display()))?;
        self.record(name);
        Ok(path)
    }

    /// Lists a file written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
        }
    }

    pub fn finish(&mut self, status: &str) -> Result<(), String> {
        self.manifest.finished_at = Some(now().to_rfc3339());
        self.manifest.status = status.to_string();
        self.write_manifest()
    }
}
