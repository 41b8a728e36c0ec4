//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use castnet::artifact::fingerprint_of;
use serde::Serialize;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CASTNET_OUT";

pub struct RunDir {
    pub path: PathBuf,
    pub command: String,
    pub fingerprint: String,
    files: Vec<String>,
}

impl RunDir {
    /// Creates `<root>/<command>-<UTC timestamp>-<first 8 hex of fingerprint>`,
    /// adding `-2`, `-3`, ... if that name is taken.
    pub fn create(root: &Path, command: &str, fingerprint: &str) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output root {}", root.display()))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{command}-{stamp}-{}", &fingerprint[..8]);
        let mut attempt = 1;
        loop {
            let name = if attempt == 1 { base.clone() } else { format!("{base}-{attempt}") };
            let path = root.join(name);
            match fs::create_dir(&path) {
                Ok(()) => {
                    return Ok(Self {
                        path,
                        command: command.to_string(),
                        fingerprint: fingerprint.to_string(),
                        files: Vec::new(),
                    })
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => attempt += 1,
                Err(e) => return Err(e).with_context(|| format!("cannot create run directory {}", path.display())),
            }
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Registers a file written by other code (for example a panel archive).
    pub fn record(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Writes `manifest.json` listing every recorded file with its SHA-256.
    pub fn finish(self, panel_fingerprint: Option<&str>) -> Result<PathBuf> {
        let mut files = BTreeMap::new();
        for name in &self.files {
            let bytes = fs::read(self.file(name)).with_context(|| format!("cannot read back {name}"))?;
            files.insert(name.clone(), castnet::artifact::sha256_hex(&bytes));
        }
        let manifest = Manifest {
            command: &self.command,
            config_fingerprint: &self.fingerprint,
            panel_fingerprint,
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.file("manifest.json");
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(self.path)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_fingerprint: &'a str,
    panel_fingerprint: Option<&'a str>,
    files: BTreeMap<String, String>,
}

/// Fingerprint of the resolved configuration of a command.
pub fn config_fingerprint<T: Serialize>(command: &str, config: &T) -> Result<String> {
    Ok(fingerprint_of(&(command, config))?)
}
