use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use distil_core::train::digest64;
use serde::Serialize;
use serde_json::Value;

use crate::commands::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub digest: String,
}

/// Record of one command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub wall_seconds: f64,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    format!("{:016x}", digest64(bytes))
}

pub fn input(path: &Path) -> CliResult<InputDigest> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::runtime)?;
    Ok(InputDigest {
        path: path.to_owned(),
        digest: hex_digest(&bytes),
    })
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let occupied = !dir.is_dir()
            || fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))
                .map_err(CliError::runtime)?
                .next()
                .is_some();
        if occupied && !force {
            return Err(CliError::usage(anyhow::anyhow!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        if !dir.is_dir() {
            return Err(CliError::usage(anyhow::anyhow!("{} is not a directory", dir.display())));
        }
    }
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::runtime)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::runtime)
}
