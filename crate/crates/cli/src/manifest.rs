//! Plain-text record of a CLI run, written next to its outputs.
//!
//! ```text
//! # edgeuda run manifest
//! command = train
//! version = 0.1.0 (abc1234)
//! seed = 7
//! started = 1760000000
//! finished = 1760000420
//! arg.arm = full
//! output = losses.csv
//! [config]
//! steps = 600
//! ...
//! ```
//!
//! Everything after `[config]` is a complete training config, so the manifest
//! itself can be passed back to `train --config`.

use std::fmt::Display;
use std::fs;
use std::path::Path;

pub const VERSION: &str = env!("EDGEUDA_VERSION");
pub const FILE_NAME: &str = "manifest.run";
const CONFIG_MARKER: &str = "[config]";

pub struct RunManifest {
    command: &'static str,
    seed: u64,
    started: u64,
    args: Vec<(String, String)>,
    outputs: Vec<String>,
    pub config: Option<String>,
}

impl RunManifest {
    pub fn new(command: &'static str, seed: u64, started: u64) -> Self {
        RunManifest {
            command,
            seed,
            started,
            args: Vec::new(),
            outputs: Vec::new(),
            config: None,
        }
    }

    pub fn arg(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.args.push((key.to_string(), value.to_string()));
        self
    }

    /// Records `path` relative to `root` when possible.
    pub fn output(&mut self, path: &Path, root: &Path) {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs.push(rel.display().to_string());
    }

    pub fn render(&self, finished: u64) -> String {
        let mut s = format!(
            "# edgeuda run manifest\ncommand = {}\nversion = {VERSION}\nseed = {}\nstarted = {}\nfinished = {finished}\n",
            self.command, self.seed, self.started
        );
        for (k, v) in &self.args {
            s.push_str(&format!("arg.{k} = {v}\n"));
        }
        for o in &self.outputs {
            s.push_str(&format!("output = {o}\n"));
        }
        if let Some(cfg) = &self.config {
            s.push_str(CONFIG_MARKER);
            s.push('\n');
            s.push_str(cfg);
            if !cfg.ends_with('\n') {
                s.push('\n');
            }
        }
        s
    }

    pub fn finish(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(FILE_NAME), self.render(super::now()))?;
        Ok(())
    }

    /// The config body of a manifest, or `None` if `text` is not one.
    pub fn config_section(text: &str) -> Option<&str> {
        if !text.starts_with("# edgeuda run manifest") {
            return None;
        }
        let at = text.find(&format!("\n{CONFIG_MARKER}\n"))?;
        Some(&text[at + CONFIG_MARKER.len() + 2..])
    }
}
