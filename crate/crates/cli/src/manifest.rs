use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use umtl::arrays::{read_file, sha256_hex, write_atomic};
use umtl::mutual::SavedIteration;
use umtl::{Result, UmtlError};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Everything a run produced, keyed by paths relative to the run directory.
/// Wall-clock times live in a sidecar so that this file depends only on the
/// config, the corpus and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub mode: String,
    pub config_digest: String,
    pub seed: u64,
    pub corpus: Option<String>,
    pub corpus_digest: Option<String>,
    pub iterations: Vec<SavedIteration>,
    pub artifacts: Vec<Artifact>,
    pub timings: String,
}

impl RunManifest {
    pub fn new(command: &str, mode: &str, config_digest: String, seed: u64) -> Self {
        RunManifest {
            version: format!("umtl {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            mode: mode.to_string(),
            config_digest,
            seed,
            corpus: None,
            corpus_digest: None,
            iterations: Vec::new(),
            artifacts: Vec::new(),
            timings: TIMINGS_FILE.to_string(),
        }
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(MANIFEST_FILE);
        serde_json::from_slice(&read_file(&p)?).map_err(|e| UmtlError::Malformed {
            path: p,
            reason: e.to_string(),
        })
    }

    /// Writes `bytes` under the run directory and records it.
    pub fn emit(&mut self, run_dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = run_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| UmtlError::io(parent, e))?;
        }
        write_atomic(&path, bytes)?;
        self.record(rel, bytes);
        Ok(())
    }

    pub fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Checks that every referenced file exists, then writes the manifest.
    pub fn finish(&self, run_dir: &Path, timings: &Timings) -> Result<()> {
        let referenced = self
            .artifacts
            .iter()
            .map(|a| a.path.as_str())
            .chain(self.iterations.iter().flat_map(|i| [i.checkpoint.as_str(), i.labels.as_str(), i.metrics.as_str()]));
        for rel in referenced {
            if !run_dir.join(rel).is_file() {
                return Err(UmtlError::MissingFile(run_dir.join(rel)));
            }
        }
        let t = serde_json::to_string_pretty(&timings.stages)?;
        write_atomic(&run_dir.join(TIMINGS_FILE), t.as_bytes())?;
        let json = serde_json::to_string_pretty(self)?;
        write_atomic(&run_dir.join(MANIFEST_FILE), json.as_bytes())
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Default)]
pub struct Timings {
    stages: BTreeMap<String, f64>,
}

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f();
        *self.stages.entry(stage.to_string()).or_default() += t0.elapsed().as_secs_f64();
        out
    }
}
