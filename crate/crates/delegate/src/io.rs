//! JSONL files, dataset records and run manifests.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use delegate_core::arith::{parse_expr, ArithmeticProblem};
use delegate_core::orchestrator::{ContextRecord, ContextStore, TaskSpec, TRAJECTORY_SCHEMA_VERSION};
use delegate_core::Trajectory;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// One arithmetic problem as stored on disk. The answer is a string so
/// values past 2^53 survive JSON tooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub seed: u64,
    pub expression: String,
    pub answer: String,
    pub op_count: u32,
}

impl From<&ArithmeticProblem> for DatasetRecord {
    fn from(p: &ArithmeticProblem) -> Self {
        DatasetRecord {
            id: p.id.clone(),
            seed: p.seed,
            expression: p.rendered.clone(),
            answer: p.answer.to_string(),
            op_count: p.op_count,
        }
    }
}

impl DatasetRecord {
    pub fn to_problem(&self) -> Result<ArithmeticProblem> {
        let expr = parse_expr(&self.expression).with_context(|| format!("{}: bad expression", self.id))?;
        let p = ArithmeticProblem::from_expr(self.id.clone(), self.seed, expr)
            .with_context(|| format!("{}: expression does not evaluate", self.id))?;
        if p.answer.to_string() != self.answer {
            bail!(
                "{}: stored answer {} but expression gives {}",
                self.id,
                self.answer,
                p.answer
            );
        }
        Ok(p)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Loads tasks from a dataset file: arithmetic records or QA task specs,
/// one per line.
pub fn read_tasks(path: &Path) -> Result<Vec<TaskSpec>> {
    let lines: Vec<Value> = read_jsonl(path)?;
    lines
        .into_iter()
        .map(|v| {
            if v.get("expression").is_some() {
                let rec: DatasetRecord = serde_json::from_value(v)?;
                Ok(TaskSpec::arithmetic(&rec.to_problem()?))
            } else {
                Ok(serde_json::from_value(v).context("neither a dataset record nor a task")?)
            }
        })
        .collect()
}

pub fn read_context_store(path: &Path) -> Result<ContextStore> {
    let records: Vec<ContextRecord> = read_jsonl(path)?;
    Ok(records.into_iter().collect())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let trajs: Vec<Trajectory> = read_jsonl(path)?;
    for t in &trajs {
        if t.schema_version != TRAJECTORY_SCHEMA_VERSION {
            bail!(
                "{}: trajectory {} has schema version {}, expected {}",
                path.display(),
                t.trajectory_id,
                t.schema_version,
                TRAJECTORY_SCHEMA_VERSION
            );
        }
    }
    Ok(trajs)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Describes what produced a set of output files. Carries no timestamps so
/// reruns produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: Value,
    pub files: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub summary: Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Manifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            files: Vec::new(),
            summary: Value::Null,
        }
    }

    /// Records `file`, named relative to `base`.
    pub fn add_file(&mut self, base: &Path, file: &Path) -> Result<()> {
        let name = file.strip_prefix(base).unwrap_or(file);
        self.files.push(FileEntry {
            path: name.to_string_lossy().into_owned(),
            sha256: sha256_file(file)?,
            bytes: fs::metadata(file)?.len(),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// `<stem>.manifest.json` next to `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}
