//! Output bundles: plot-ready CSV tables, a JSON summary and a manifest of
//! checksums, written atomically under `<out>/<scenario>/<seed>/`.

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::ScenarioConfig;
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub trait CsvValue {
    fn csv(&self) -> String;
}

impl CsvValue for f64 {
    /// Shortest representation that parses back to the same bits.
    fn csv(&self) -> String {
        format!("{self:?}")
    }
}

macro_rules! csv_display {
    ($($t:ty),*) => {$(
        impl CsvValue for $t {
            fn csv(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
csv_display!(u32, u64, usize, i64, bool, &str, String);

/// A CSV table whose header names every column with its unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<String>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: &[&dyn CsvValue]) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row.iter().map(|v| v.csv()).collect::<Vec<_>>().join(","));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(r);
            s.push('\n');
        }
        s.into_bytes()
    }
}

/// Everything a scenario produces before it is written.
#[derive(Debug, Clone, Default)]
pub struct Bundle {
    /// File name (ending in .csv) and table; the first one is `data.csv`.
    pub tables: Vec<(String, Table)>,
    pub summary: Map<String, Value>,
}

impl Bundle {
    pub fn new(data: Table) -> Self {
        Self { tables: vec![("data.csv".into(), data)], summary: Map::new() }
    }

    pub fn table(mut self, name: &str, t: Table) -> Self {
        self.tables.push((name.into(), t));
        self
    }

    pub fn set(&mut self, key: &str, v: impl Serialize) {
        self.summary.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    /// SHA-256 of every written file except the manifest itself.
    pub files: BTreeMap<String, String>,
    /// Outputs that were expected but not produced.
    pub missing: Vec<String>,
    pub error: Option<String>,
    pub duration_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::from(e)
    })
}

pub fn run_dir(out_dir: &Path, scenario: &str, seed: u64) -> PathBuf {
    out_dir.join(scenario).join(seed.to_string())
}

fn json_bytes(v: &impl Serialize) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("json values serialise");
    b.push(b'\n');
    b
}

/// Writes the bundle and its manifest; returns the run directory.
pub fn write_bundle(
    out_dir: &Path,
    scenario: &str,
    seed: u64,
    config: &ScenarioConfig,
    mut bundle: Bundle,
    started: Instant,
) -> Result<PathBuf, CliError> {
    let dir = run_dir(out_dir, scenario, seed);
    fs::create_dir_all(&dir)?;
    let hash = config.hash();
    let mut files = BTreeMap::new();
    for (name, table) in &bundle.tables {
        let bytes = table.to_bytes();
        write_atomic(&dir.join(name), &bytes)?;
        files.insert(name.clone(), sha256_hex(&bytes));
    }
    bundle.summary.insert("scenario".into(), json!(scenario));
    bundle.summary.insert("seed".into(), json!(seed));
    bundle.summary.insert("config_hash".into(), json!(hash));
    bundle.summary.insert("version".into(), json!(VERSION));
    let summary = json_bytes(&bundle.summary);
    write_atomic(&dir.join("summary.json"), &summary)?;
    files.insert("summary.json".into(), sha256_hex(&summary));
    let manifest = RunManifest {
        scenario: scenario.into(),
        seed,
        config_hash: hash,
        version: VERSION.into(),
        files,
        missing: vec![],
        error: None,
        duration_s: started.elapsed().as_secs_f64(),
    };
    write_atomic(&dir.join("manifest.json"), &json_bytes(&manifest))?;
    Ok(dir)
}

/// Records a failed run: which outputs are missing and why.
pub fn write_failure_manifest(
    out_dir: &Path,
    scenario: &str,
    seed: u64,
    config: &ScenarioConfig,
    error: &CliError,
    started: Instant,
) -> Result<PathBuf, CliError> {
    let dir = run_dir(out_dir, scenario, seed);
    fs::create_dir_all(&dir)?;
    let mut missing = Vec::new();
    for name in ["data.csv", "summary.json"] {
        // Anything left from an earlier run is stale; do not vouch for it.
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p)?;
        }
        missing.push(name.to_string());
    }
    let manifest = RunManifest {
        scenario: scenario.into(),
        seed,
        config_hash: config.hash(),
        version: VERSION.into(),
        files: BTreeMap::new(),
        missing,
        error: Some(error.to_string()),
        duration_s: started.elapsed().as_secs_f64(),
    };
    write_atomic(&dir.join("manifest.json"), &json_bytes(&manifest))?;
    Ok(dir)
}
