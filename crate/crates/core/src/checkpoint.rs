//! Binary tensor archives for encoder checkpoints, prompt dictionaries and
//! GPPE modules.
//!
//! Layout: `b"VNTA"`, u32 version, u64 metadata length, metadata JSON, u32
//! tensor count, then per tensor: u32 name length, name, u64 rows, u64
//! cols, row-major little-endian f64 values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::encoder::{GTModel, ModelConfig};
use crate::error::{Error, Result};
use crate::gppe::{DictionaryEntry, GPPEModule, PromptDictionary, Theta};
use crate::nn::{Linear, Parameters};

const MAGIC: &[u8; 4] = b"VNTA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a tensor archive".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let meta = take(&mut r, meta_len)?;
        let metadata = serde_json::from_slice(meta)?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let raw = take(&mut r, rows.saturating_mul(cols).saturating_mul(8))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::load(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").and_then(|k| k.as_str())
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Checkpoint(format!(
                "expected a {kind} archive, found {}",
                other.unwrap_or("unknown")
            ))),
        }
    }

    fn meta<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.metadata.clone())?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("archive is truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("archive is truncated".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn owned_tensors<P: Parameters + ?Sized>(p: &P) -> Vec<(String, Array2<f64>)> {
    p.named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect()
}

/// Copies archive tensors into `target` by name, checking names and shapes.
fn restore<P: Parameters + ?Sized>(target: &mut P, tensors: &[(String, Array2<f64>)]) -> Result<()> {
    let names: Vec<String> = target.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} tensors, expected {}",
            tensors.len(),
            names.len()
        )));
    }
    for ((name, slot), (stored_name, stored)) in names.iter().zip(target.tensors_mut()).zip(tensors) {
        if name != stored_name || slot.dim() != stored.dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {stored_name} {:?} does not match {name} {:?}",
                stored.dim(),
                slot.dim()
            )));
        }
        slot.assign(stored);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    param_digest: String,
}

pub fn save_model(path: &Path, model: &GTModel) -> Result<()> {
    let meta = ModelMeta {
        kind: "gt".into(),
        config: model.config,
        param_digest: model.param_digest(),
    };
    Archive {
        metadata: serde_json::to_value(meta)?,
        tensors: owned_tensors(model),
    }
    .write(path)
}

/// Loads an encoder checkpoint and verifies its parameter digest. The
/// model comes back unfrozen.
pub fn load_model(path: &Path) -> Result<GTModel> {
    let archive = Archive::read(path)?;
    archive.expect_kind("gt")?;
    let meta: ModelMeta = archive.meta()?;
    let mut model = GTModel::new(meta.config)?;
    restore(&mut model, &archive.tensors)?;
    if model.param_digest() != meta.param_digest {
        return Err(Error::Checkpoint(format!(
            "{}: parameter digest mismatch",
            path.display()
        )));
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct DictionaryMeta {
    kind: String,
    vnt_config_hash: String,
    task_ids: Vec<String>,
    content_hash: String,
}

pub fn save_dictionary(path: &Path, dict: &PromptDictionary) -> Result<()> {
    let meta = DictionaryMeta {
        kind: "dictionary".into(),
        vnt_config_hash: dict.vnt_config_hash.clone(),
        task_ids: dict.entries.iter().map(|e| e.task_id.clone()).collect(),
        content_hash: dict.content_hash(),
    };
    Archive {
        metadata: serde_json::to_value(meta)?,
        tensors: dict
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (format!("entry.{i}"), e.prompt.clone()))
            .collect(),
    }
    .write(path)
}

pub fn load_dictionary(path: &Path) -> Result<PromptDictionary> {
    let archive = Archive::read(path)?;
    archive.expect_kind("dictionary")?;
    let meta: DictionaryMeta = archive.meta()?;
    if meta.task_ids.len() != archive.tensors.len() {
        return Err(Error::Checkpoint("dictionary metadata and tensors disagree".into()));
    }
    let dict = PromptDictionary {
        entries: meta
            .task_ids
            .into_iter()
            .zip(archive.tensors)
            .map(|(task_id, (_, prompt))| DictionaryEntry { task_id, prompt })
            .collect(),
        vnt_config_hash: meta.vnt_config_hash,
    };
    if dict.content_hash() != meta.content_hash {
        return Err(Error::Checkpoint(format!("{}: dictionary hash mismatch", path.display())));
    }
    Ok(dict)
}

#[derive(Serialize, Deserialize)]
struct ModuleMeta {
    kind: String,
    dim: usize,
    hidden: usize,
    out: usize,
    n_way: usize,
    seed: u64,
    trained: bool,
    dictionary_hash: String,
}

pub fn save_module(path: &Path, module: &GPPEModule) -> Result<()> {
    let meta = ModuleMeta {
        kind: "gppe".into(),
        dim: module.theta.first.in_dim(),
        hidden: module.theta.first.out_dim(),
        out: module.theta.second.out_dim(),
        n_way: module.psi.n_classes(),
        seed: module.seed,
        trained: module.trained,
        dictionary_hash: module.dictionary_hash.clone(),
    };
    Archive {
        metadata: serde_json::to_value(meta)?,
        tensors: owned_tensors(module),
    }
    .write(path)
}

pub fn load_module(path: &Path) -> Result<GPPEModule> {
    let archive = Archive::read(path)?;
    archive.expect_kind("gppe")?;
    let meta: ModuleMeta = archive.meta()?;
    let mut module = GPPEModule {
        theta: Theta {
            first: Linear::zeros(meta.dim, meta.hidden),
            second: Linear::zeros(meta.hidden, meta.out),
        },
        value: Array2::zeros((meta.dim, meta.dim)),
        psi: Classifier::new(meta.n_way, meta.dim, "gppe"),
        trained: meta.trained,
        seed: meta.seed,
        dictionary_hash: meta.dictionary_hash,
    };
    restore(&mut module, &archive.tensors)?;
    Ok(module)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::rng::rng;

    fn model() -> GTModel {
        GTModel::new(ModelConfig {
            input_dim: 3,
            hidden: 8,
            layers: 2,
            heads: 2,
            pos_dim: 2,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn model_roundtrip_keeps_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.ckpt");
        let m = model();
        save_model(&path, &m).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.param_digest(), m.param_digest());
        assert_eq!(back, m);
    }

    #[test]
    fn corrupted_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.ckpt");
        save_model(&path, &model()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, &bytes[..n / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn dictionary_and_module_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let dict = PromptDictionary {
            entries: (0..3)
                .map(|i| DictionaryEntry {
                    task_id: format!("source-{i}"),
                    prompt: gaussian(4, 8, 1.0, &mut rng(i)),
                })
                .collect(),
            vnt_config_hash: "abc".into(),
        };
        let dp = dir.path().join("dict.bin");
        save_dictionary(&dp, &dict).unwrap();
        assert_eq!(load_dictionary(&dp).unwrap(), dict);

        let mut module = GPPEModule::init(8, 2, 3);
        module.trained = true;
        module.dictionary_hash = dict.content_hash();
        let mp = dir.path().join("gppe.bin");
        save_module(&mp, &module).unwrap();
        assert_eq!(load_module(&mp).unwrap(), module);
        assert!(matches!(load_model(&mp), Err(Error::Checkpoint(_))));
    }
}
