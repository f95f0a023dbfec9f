//! Run directories: atomic file writes and the reproducibility manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::settings::Settings;

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

pub struct RunDir {
    pub root: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    seed: Option<u64>,
    os: &'a str,
    arch: &'a str,
    float_model: &'a str,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` through a temporary file and a rename.
    pub fn write(&self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// CSV with a header row.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> anyhow::Result<()> {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }

    pub fn write_config(&self, settings: &Settings) -> anyhow::Result<()> {
        self.write(CONFIG_FILE, settings.to_text().as_bytes())
    }

    /// Settings of an earlier run in this directory.
    pub fn previous_config(&self) -> anyhow::Result<Option<Settings>> {
        let p = self.path(CONFIG_FILE);
        if p.exists() {
            Ok(Some(Settings::load(&p)?))
        } else {
            Ok(None)
        }
    }

    pub fn write_manifest(&self, command: &str, seed: Option<u64>, files: &[&str]) -> anyhow::Result<()> {
        let m = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            float_model: "IEEE-754 binary64; outputs are bit-identical for the same config, seed, build and platform",
            files: files.iter().map(|s| s.to_string()).collect(),
        };
        self.write_json(MANIFEST_FILE, &m)
    }
}

/// Shortest round-trip formatting for CSV cells.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
