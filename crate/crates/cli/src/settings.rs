use std::path::{Component, Path, PathBuf};

use umtl::arrays::read_file;
use umtl::config::RunConfig;
use umtl::{Result, UmtlError};

pub const RUN_DIR_VAR: &str = "UMTL_RUN_DIR";
pub const THREADS_VAR: &str = "UMTL_THREADS";
const DEFAULT_RUN_DIR: &str = "runs";

/// Parses a TOML config, applies `section.key=value` overrides and validates
/// the result. Unknown keys are rejected.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = match path {
        Some(p) => {
            let text = String::from_utf8(read_file(p)?).map_err(|e| UmtlError::Malformed {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?;
            text.parse().map_err(|e: toml::de::Error| {
                UmtlError::config("config", e.message().to_string())
            })?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| UmtlError::config("config", e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| UmtlError::config(spec, "override must look like section.key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| UmtlError::config(key, format!("{p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Root for every output.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR))
}

/// Resolves an output name under the run root; names may not escape it.
pub fn output_dir(name: &str) -> Result<PathBuf> {
    let rel = Path::new(name);
    if name.is_empty() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(UmtlError::config("out", format!("{name:?} must be a relative path inside {RUN_DIR_VAR}")));
    }
    Ok(run_root().join(rel))
}

/// Accepts either a corpus directory or its manifest file.
pub fn corpus_manifest(path: &Path) -> Result<PathBuf> {
    let p = if path.is_dir() {
        path.join(umtl::corpus::MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    if !p.is_file() {
        return Err(UmtlError::MissingFile(p));
    }
    Ok(p)
}

pub fn configure_threads() -> Result<()> {
    let Some(raw) = std::env::var_os(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .to_str()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| UmtlError::config(THREADS_VAR, "must be a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| UmtlError::Other(format!("thread pool: {e}")))
}
