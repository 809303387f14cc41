//! Run manifests: every output directory gets exactly one, reproducing the
//! full invocation. Wall-clock timings live in their own field and stay out
//! of the config hash so repeated runs differ only there.

use serde::Serialize;
use std::path::Path;
use std::time::Instant;

use ionflux_core::rng::fnv1a;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    pub code_version: String,
    /// Excluded from the hash.
    pub timings: Timings,
}

#[derive(Debug, Serialize, Default)]
pub struct Timings {
    pub wall_s: f64,
}

pub struct ManifestBuilder {
    command: String,
    config_json: String,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    warnings: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: impl Into<String>, config_json: impl Into<String>, seeds: Vec<u64>) -> Self {
        ManifestBuilder {
            command: command.into(),
            config_json: config_json.into(),
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        crate::log::warn(&msg);
        self.warnings.push(msg);
    }

    pub fn write(mut self, dir: &Path) -> anyhow::Result<()> {
        self.inputs.sort();
        self.outputs.sort();
        let hashed = format!(
            "{}\n{}\n{:?}\n{:?}\n{:?}",
            self.command, self.config_json, self.seeds, self.inputs, self.outputs
        );
        let manifest = RunManifest {
            command: self.command,
            config_hash: format!("{:016x}", fnv1a(hashed.as_bytes())),
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            warnings: self.warnings,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            timings: Timings {
                wall_s: self.started.elapsed().as_secs_f64(),
            },
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }
}
