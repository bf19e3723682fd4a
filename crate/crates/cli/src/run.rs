//! Runs one experiment end to end and writes the manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::commands::{self, write_artifact, CommandOutput};
use crate::config::{CommandParams, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::plot::render_plots;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub duration_seconds: f64,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub failure: Option<String>,
    pub summary: Value,
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn dispatch(dir: &Path, config: &ExperimentConfig) -> Result<CommandOutput> {
    let seed = config.seed;
    match &config.command {
        CommandParams::Equivcheck(p) => commands::equivcheck(dir, seed, p),
        CommandParams::Gradcheck(p) => commands::gradcheck(dir, seed, p),
        CommandParams::Flow(p) => commands::flow(dir, seed, p),
        CommandParams::Spectral(p) => commands::spectral(dir, seed, p),
        CommandParams::Train(p) => commands::train_command(dir, seed, p),
        CommandParams::Audit(p) => commands::audit(dir, seed, p),
    }
}

/// Executes `config` into `output_dir`: resolved config echo first, then the
/// command's artifacts, plots and summary, and the manifest last.
pub fn execute(config: &ExperimentConfig, output_dir: &Path) -> Result<RunOutcome> {
    let start = Instant::now();
    std::fs::create_dir_all(output_dir).map_err(|e| CliError::io(output_dir, e))?;
    let mut config = config.clone();
    config.output_dir = Some(output_dir.to_path_buf());

    let mut files = Vec::new();
    write_artifact(output_dir, "config.resolved.json", &format!("{}\n", config.to_json()), &mut files)?;
    let output = dispatch(output_dir, &config)?;
    files.extend(output.files);
    for svg in render_plots(output_dir)? {
        files.push(svg.file_name().expect("file name").to_string_lossy().into_owned());
    }
    let status = if output.failure.is_some() { RunStatus::Failed } else { RunStatus::Ok };
    let summary = serde_json::json!({
        "command": config.command.name().as_str(),
        "status": status,
        "failure": output.failure,
        "result": output.summary,
    });
    write_artifact(output_dir, "summary.json", &format!("{}\n", serde_json::to_string_pretty(&summary).expect("json")), &mut files)?;

    let mut entries = Vec::with_capacity(files.len());
    for name in &files {
        let (bytes, sha256) = sha256_file(&output_dir.join(name))?;
        entries.push(FileEntry { path: name.clone(), bytes, sha256 });
    }
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool: "plat".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: config.command.name().as_str().into(),
        config,
        status,
        failure: output.failure.clone(),
        duration_seconds: start.elapsed().as_secs_f64(),
        files: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_atomic(&output_dir.join(MANIFEST_NAME), &format!("{text}\n"))?;
    Ok(RunOutcome {
        status,
        failure: output.failure,
        summary: output.summary,
        output_dir: output_dir.to_path_buf(),
        manifest,
    })
}
