//! Append-only, timestamped run directories.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub struct RunDir {
    pub path: PathBuf,
    started: Instant,
}

impl RunDir {
    /// Creates `<out>/<command>-<UTC timestamp>` and snapshots the resolved
    /// config into it. An existing directory is never reused.
    pub fn create(config: &RunConfig, command: &str) -> Result<Self> {
        fs::create_dir_all(&config.out).with_context(|| format!("cannot create {}", config.out.display()))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.6fZ");
        let base = config.out.join(format!("{command}-{stamp}"));
        let mut path = base.clone();
        let mut n = 1;
        while path.exists() {
            path = PathBuf::from(format!("{}-{n}", base.display()));
            n += 1;
        }
        fs::create_dir(&path).with_context(|| format!("cannot create {}", path.display()))?;
        let dir = Self {
            path,
            started: Instant::now(),
        };
        dir.write_text("config.toml", &config.to_toml()?)?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Wall-clock timings live in their own file so every other output is
    /// reproducible byte for byte.
    pub fn finish(&self, extra: &[(&str, f64)]) -> Result<()> {
        let mut timing = serde_json::Map::new();
        timing.insert("total_seconds".into(), self.started.elapsed().as_secs_f64().into());
        for (k, v) in extra {
            timing.insert((*k).into(), (*v).into());
        }
        self.write_json("timing.json", &timing)
    }
}
