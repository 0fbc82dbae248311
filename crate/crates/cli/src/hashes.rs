//! Stage provenance: every stage writes a `stage.json` recording the config
//! hash, the hashes of the upstream records it consumed, and the hashes of
//! the files it produced. Downstream stages compare recorded hashes against
//! the files on disk, so artifacts from different runs cannot be mixed
//! silently.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::stages::Stage;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_sha256: String,
    /// Stage name -> hash of that stage's record when this stage consumed it.
    pub inputs: BTreeMap<String, String>,
    /// Workdir-relative path -> content hash, for every file produced.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hash of the experiment identity: the canonical config serialization.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let json = serde_json::to_string(&cfg.canonical()).expect("config serializes");
    sha256_bytes(json.as_bytes())
}

fn record_path(workdir: &Path, stage: Stage) -> PathBuf {
    workdir.join(stage.dir()).join("stage.json")
}

/// Loads the record a prior stage wrote; missing means that stage never ran.
pub fn load_record(workdir: &Path, stage: Stage, wanted_by: &'static str) -> Result<StageRecord> {
    let path = record_path(workdir, stage);
    if !path.is_file() {
        return Err(CliError::Dependency {
            stage: wanted_by,
            missing: stage.name(),
            artifact: path,
        });
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{} is not a valid stage record: {e}", path.display())))
}

/// Verifies the upstream stages exist and form one consistent chain: each
/// record's remembered input hashes must match the records now on disk.
/// Returns the hash of each requested stage's record, keyed by stage name.
pub fn verify_inputs(
    workdir: &Path,
    stages: &[Stage],
    wanted_by: &'static str,
) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    for &stage in stages {
        let record = load_record(workdir, stage, wanted_by)?;
        for (input_name, remembered) in &record.inputs {
            let input_stage = Stage::from_name(input_name).ok_or_else(|| {
                CliError::Data(format!(
                    "{} names unknown input stage `{input_name}`",
                    record_path(workdir, stage).display()
                ))
            })?;
            let current = sha256_file(&record_path(workdir, input_stage))?;
            if &current != remembered {
                return Err(CliError::Data(format!(
                    "mixed provenance: `{}` was produced from a different `{input_name}` run than the one on disk; rerun `{}`",
                    stage.name(),
                    stage.name()
                )));
            }
        }
        hashes.insert(stage.name().to_string(), sha256_file(&record_path(workdir, stage))?);
    }
    Ok(hashes)
}

/// Writes the stage record after hashing every produced file.
pub fn write_record(
    workdir: &Path,
    stage: Stage,
    cfg: &PipelineConfig,
    inputs: BTreeMap<String, String>,
    produced: &[PathBuf],
) -> Result<()> {
    let mut outputs = BTreeMap::new();
    for path in produced {
        let rel = path
            .strip_prefix(workdir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        outputs.insert(rel, sha256_file(path)?);
    }
    let record = StageRecord {
        stage: stage.name().to_string(),
        config_sha256: config_hash(cfg),
        inputs,
        outputs,
    };
    let path = record_path(workdir, stage);
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    std::fs::write(&path, json + "\n")
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Collects every file under `dir`, sorted, so whole artifact directories
/// can be hashed into a stage record.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d)
            .map_err(|e| CliError::Data(format!("cannot list {}: {e}", d.display())))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::Data(format!("cannot list {}: {e}", d.display())))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "stage.json") {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}
