use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{execute, CliError, Command, Outcome, ReplayArgs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    /// `"-"` for stdout.
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
    pub deterministic: bool,
}

/// Record of one CLI run, sufficient to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    #[serde(flatten)]
    pub command: Command,
    pub seeds: BTreeMap<String, u64>,
    pub threads: Option<usize>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<OutputDigest>,
    pub wall_time_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn default_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn output_digests(outcome: &Outcome) -> Vec<OutputDigest> {
    outcome
        .outputs
        .iter()
        .map(|a| OutputDigest {
            path: a.path.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string()),
            sha256: sha256_hex(&a.bytes),
            bytes: a.bytes.len(),
            deterministic: a.deterministic,
        })
        .collect()
}

impl RunManifest {
    pub fn new(command: Command, threads: Option<usize>, outcome: &Outcome, wall_time_s: f64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            seeds: outcome.seeds.clone(),
            threads,
            inputs: outcome.inputs.clone(),
            outputs: output_digests(outcome),
            wall_time_s,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, CliError> {
        serde_json::from_str(s).map_err(|e| CliError::schema(format!("bad manifest: {e}")))
    }
}

#[derive(Serialize)]
struct ReplayEntry {
    path: String,
    expected: String,
    actual: Option<String>,
    status: &'static str,
}

#[derive(Serialize)]
struct ReplayReport {
    subcommand: &'static str,
    reproduced: bool,
    outputs: Vec<ReplayEntry>,
}

pub(super) fn replay(a: &ReplayArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.file)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", a.file.display())))?;
    let m = RunManifest::from_json(&text)?;
    if matches!(m.command, Command::Replay(_)) {
        return Err(CliError::schema("a replay manifest cannot be replayed"));
    }
    if m.version != env!("CARGO_PKG_VERSION") {
        tracing::warn!(recorded = %m.version, "manifest was written by a different version");
    }
    for input in &m.inputs {
        let bytes = std::fs::read(&input.path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", input.path.display())))?;
        if sha256_hex(&bytes) != input.sha256 {
            return Err(CliError::schema(format!("input {} changed since the run", input.path.display())));
        }
    }
    let mut cmd = m.command.clone();
    cmd.resolve();
    let outcome = execute(&cmd, m.threads)?;
    let fresh = output_digests(&outcome);
    let mut entries = Vec::with_capacity(m.outputs.len());
    for (i, want) in m.outputs.iter().enumerate() {
        let got = fresh.get(i).filter(|g| g.path == want.path);
        let status = match got {
            None => "missing",
            Some(_) if !want.deterministic => "skipped",
            Some(g) if g.sha256 == want.sha256 => "identical",
            Some(_) => "differs",
        };
        entries.push(ReplayEntry {
            path: want.path.clone(),
            expected: want.sha256.clone(),
            actual: got.map(|g| g.sha256.clone()),
            status,
        });
    }
    let reproduced = fresh.len() == m.outputs.len()
        && entries.iter().all(|e| matches!(e.status, "identical" | "skipped"));
    let report = ReplayReport { subcommand: cmd.name(), reproduced, outputs: entries };
    let json = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, json)
            .map_err(|e| CliError::usage(format!("cannot write {}: {e}", p.display())))?,
        None => print!("{json}"),
    }
    if reproduced {
        Ok(())
    } else {
        Err(CliError::numeric(format!("replay of {} did not reproduce its outputs", cmd.name())))
    }
}
