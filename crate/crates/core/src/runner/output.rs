//! On-disk run layout: `{output_dir}/{dataset}/{model}/records.jsonl` plus
//! `run_meta.json`.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{RunConfig, RunRecord};
use crate::backend::BackendCapabilities;
use crate::dataset::DatasetManifest;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const META_FILE: &str = "run_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub dataset: String,
    pub model: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub config: RunConfig,
    pub capabilities: BackendCapabilities,
    pub manifest: DatasetManifest,
    pub item_count: usize,
    pub error_count: usize,
}

/// Replace path separators and other awkward characters so model names
/// such as `org/model:tag` stay one directory level.
fn path_component(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c.is_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    match cleaned.as_str() {
        "" | "." | ".." => "_".to_string(),
        _ => cleaned,
    }
}

pub fn run_dir(output_dir: &Path, dataset: &str, model: &str) -> PathBuf {
    output_dir.join(path_component(dataset)).join(path_component(model))
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Write records and metadata; returns the run directory.
pub fn write_run(output_dir: &Path, meta: &RunMeta, records: &[RunRecord]) -> io::Result<PathBuf> {
    let dir = run_dir(output_dir, &meta.dataset, &meta.model);
    fs::create_dir_all(&dir)?;
    write_records(&dir.join(RECORDS_FILE), records)?;
    let mut meta_json = serde_json::to_string_pretty(meta)?;
    meta_json.push('\n');
    fs::write(dir.join(META_FILE), meta_json)?;
    Ok(dir)
}

pub fn read_records(path: &Path) -> io::Result<Vec<RunRecord>> {
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}
