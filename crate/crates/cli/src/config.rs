//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vntgt::eval::EvalConfig;
use vntgt::pretrain::PretrainConfig;
use vntgt::vnt::VNTConfig;

pub const DATA_ROOT_VAR: &str = "VNT_DATA_ROOT";

/// Encoder shape; the attribute width comes from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub pos_dim: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            heads: 4,
            pos_dim: vntgt::positional::DEFAULT_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GppeParams {
    /// Number of source tasks M.
    pub m: usize,
    pub episodes: usize,
    pub lr: f64,
}

impl Default for GppeParams {
    fn default() -> Self {
        Self {
            m: 48,
            episodes: 1000,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeParams {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self { steps: 100, lr: 1e-2 }
    }
}

/// Encoder learning rate for the unfrozen ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneParams {
    pub lr_model: f64,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        Self { lr_model: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepParams {
    pub m: Vec<usize>,
    pub alpha: Vec<f64>,
    pub width: Vec<usize>,
    pub depth: Vec<usize>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            m: vec![0, 8, 16, 32, 48],
            alpha: vec![0.5, 1.0, 2.0],
            width: vec![64, 128],
            depth: vec![1, 2, 4],
        }
    }
}

/// Artifacts consumed by later commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub checkpoint: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub module: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    /// 0 means one worker per available core.
    pub workers: usize,
    pub paths: Paths,
    pub model: ModelParams,
    pub pretrain: PretrainConfig,
    pub vnt: VNTConfig,
    pub gppe: GppeParams,
    pub eval: EvalConfig,
    pub probe: ProbeParams,
    pub finetune: FinetuneParams,
    pub sweep: SweepParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            seed: 0,
            out: PathBuf::from("runs"),
            workers: 0,
            paths: Paths::default(),
            model: ModelParams::default(),
            pretrain: PretrainConfig::default(),
            vnt: VNTConfig::default(),
            gppe: GppeParams::default(),
            eval: EvalConfig::default(),
            probe: ProbeParams::default(),
            finetune: FinetuneParams::default(),
            sweep: SweepParams::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub dataset: Option<PathBuf>,
}

const SEEDED_SECTIONS: [&str; 3] = ["pretrain", "vnt", "eval"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for section in SEEDED_SECTIONS {
            if value
                .get(section)
                .and_then(|s| s.as_table())
                .is_some_and(|t| t.contains_key("seed"))
            {
                bail!("[{section}] may not set `seed`; use the top-level `seed` key");
            }
        }
        let config: RunConfig = value.try_into().context("invalid config")?;
        Ok(config)
    }

    /// Reads `path` (or starts from defaults), applies `overrides`, pushes the
    /// top-level seed into every component and validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.out = out.clone();
        }
        if let Some(w) = overrides.workers {
            config.workers = w;
        }
        if let Some(d) = &overrides.dataset {
            config.dataset = Some(d.clone());
        }
        config.pretrain.seed = config.seed;
        config.vnt.seed = config.seed;
        config.eval.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.vnt.validate()?;
        let m = &self.model;
        if m.layers == 0 || m.heads == 0 || m.hidden % m.heads != 0 {
            bail!("model: hidden {} must be a positive multiple of heads {} and layers >= 1", m.hidden, m.heads);
        }
        if self.gppe.lr <= 0.0 || self.probe.lr <= 0.0 || self.finetune.lr_model <= 0.0 {
            bail!("learning rates must be positive");
        }
        if self.eval.n_way < 2 {
            bail!("eval.n_way must be at least 2");
        }
        Ok(())
    }

    /// The config file path wins; `VNT_DATA_ROOT` is the fallback, and a
    /// relative `dataset` that does not exist is also tried under it.
    pub fn dataset_path(&self) -> Result<PathBuf> {
        let root = std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from);
        match (&self.dataset, root) {
            (Some(d), _) if d.exists() => Ok(d.clone()),
            (Some(d), Some(root)) if d.is_relative() => Ok(root.join(d)),
            (Some(d), _) => Ok(d.clone()),
            (None, Some(root)) => Ok(root),
            (None, None) => bail!("no dataset path: set `dataset` in the config, pass --dataset, or set {DATA_ROOT_VAR}"),
        }
    }

    /// The resolved config as TOML that [`RunConfig::from_toml`] accepts
    /// back; component seeds are implied by the top-level one.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(self)?;
        for section in SEEDED_SECTIONS {
            if let Some(t) = table.get_mut(section).and_then(|s| s.as_table_mut()) {
                t.remove("seed");
            }
        }
        Ok(toml::to_string(&table)?)
    }

    pub fn required(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        path.clone()
            .with_context(|| format!("paths.{what} is not set"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[vnt]\nalpah = 1.0").is_err());
    }

    #[test]
    fn component_seeds_come_from_the_top() {
        assert!(RunConfig::from_toml("[vnt]\nseed = 3").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 5\n[vnt]\nalpha = 2.0\n").unwrap();
        let c = RunConfig::resolve(
            Some(&path),
            &Overrides {
                seed: Some(9),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((c.seed, c.vnt.seed, c.pretrain.seed, c.eval.seed), (9, 9, 9, 9));
        assert_eq!(c.vnt.alpha, 2.0);
    }

    #[test]
    fn invalid_values_rejected_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[model]\nhidden = 10\nheads = 4\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &Overrides::default()).is_err());
    }
}
