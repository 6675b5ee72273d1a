use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Provenance record written next to every output file as
/// `<output>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_sha256: BTreeMap<String, String>,
    pub input_sha256: BTreeMap<String, String>,
    pub output_sha256: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::at(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Collects the provenance of one invocation.
pub struct Recorder {
    started: Instant,
    command: Vec<String>,
    configs: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    pub seed: Option<u64>,
}

impl Recorder {
    pub fn new(command: Vec<String>) -> Self {
        Self { started: Instant::now(), command, configs: Vec::new(), inputs: Vec::new(), seed: None }
    }

    pub fn config(&mut self, path: &Path) {
        self.configs.push(path.to_path_buf());
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn digests(paths: &[PathBuf]) -> CliResult<BTreeMap<String, String>> {
        paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
    }

    /// Write one manifest covering `outputs`, named after the first of them.
    pub fn write(&self, outputs: &[&Path]) -> CliResult<PathBuf> {
        let Some(first) = outputs.first() else {
            return Err(CliError::validation("no output to describe"));
        };
        let owned: Vec<PathBuf> = outputs.iter().map(|p| p.to_path_buf()).collect();
        let m = RunManifest {
            command: self.command.clone(),
            config_sha256: Self::digests(&self.configs)?,
            input_sha256: Self::digests(&self.inputs)?,
            output_sha256: Self::digests(&owned)?,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let path = manifest_path(first);
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(&path, text).map_err(|e| CliError::at(&path, e))?;
        Ok(path)
    }
}
