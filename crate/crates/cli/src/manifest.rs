use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::{write_text, CliResult};

/// Record of one command invocation, written as `<output>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub arguments: Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub result: Value,
}

impl RunManifest {
    pub fn new(command: &str, args: &impl Serialize, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            arguments: serde_json::to_value(args).unwrap_or(Value::Null),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            result: Value::Null,
        }
    }

    pub fn timing(&mut self, stage: &str, since: Instant) {
        self.timings.insert(stage.to_string(), since.elapsed().as_secs_f64());
    }

    pub fn inputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a PathBuf>) {
        self.inputs.extend(paths.into_iter().cloned());
    }

    pub fn outputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(paths);
    }

    pub fn result(&mut self, value: Value) {
        self.result = value;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn path_beside(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn write_beside(&self, output: &Path) -> CliResult<()> {
        write_text(&Self::path_beside(output), &self.to_json())
    }
}
