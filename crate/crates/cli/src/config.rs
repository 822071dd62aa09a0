//! Config loading: TOML file, `--set` overrides, path resolution, hash.

use std::path::{Path, PathBuf};

use dtsmooth::experiment::ExperimentConfig;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// Parse `key.path=value`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("override `{s}` is not of the form key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(|p| p.trim().to_string()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(format!("override `{s}` has an empty key segment"));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn apply(table: &mut Table, path: &[String], value: Value) -> Result<(), String> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` in `{}` is not a section", path.join(".")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Defaults, then the file, then the overrides. Relative paths in the file
/// are taken from the file's directory; those given by overrides from the
/// working directory.
pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig, String> {
    let mut table = match file {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?
            .parse::<Table>()
            .map_err(|e| format!("config {}: {e}", path.display()))?,
        None => Table::new(),
    };
    let mut cfg: ExperimentConfig = table
        .clone()
        .try_into()
        .map_err(|e| format!("invalid config: {e}"))?;
    if let Some(dir) = file.and_then(Path::parent) {
        resolve(dir, &mut cfg.phantom.band_table);
        resolve(dir, &mut cfg.noise.scheme_file);
        resolve(dir, &mut cfg.output.dir);
        table = Table::try_from(&cfg).map_err(|e| format!("invalid config: {e}"))?;
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply(&mut table, &path, value)?;
    }
    let mut cfg: ExperimentConfig = table.try_into().map_err(|e| format!("invalid config: {e}"))?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate().map_err(|e| format!("invalid config: {e}"))?;
    Ok(cfg)
}

/// SHA-256 of the canonical JSON form of the resolved config. The output
/// directory is not part of the experiment and is left out.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.output.dir = None;
    let json = serde_json::to_string(&cfg).expect("config serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
