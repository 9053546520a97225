//! Single-file checkpoints: a tar archive holding `manifest.json` and one raw
//! little-endian f32 blob per parameter, keyed by module path.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const FORMAT: &str = "vesselseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: BackboneConfig,
    pub seed: u64,
    /// `main` or `finetune`.
    pub phase: String,
    pub epoch: usize,
    pub val_dice: Option<f64>,
    pub params: Vec<ParamEntry>,
}

/// A network together with its weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Backbone,
    pub store: ParamStore<f32>,
    pub seed: u64,
}

impl Model {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Backbone::new(config, &mut store, seed)?;
        Ok(Self { net, store, seed })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.net.config
    }
}

/// Training state recorded next to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Stamp {
    pub phase: String,
    pub epoch: usize,
    pub val_dice: Option<f64>,
}

fn blob_name(name: &str) -> String {
    format!("params/{name}.f32")
}

fn append(builder: &mut tar::Builder<std::fs::File>, name: &str, data: &[u8], path: &Path) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, name, data).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, model: &Model, stamp: &Stamp) -> Result<()> {
    let store = &model.store;
    let params: Vec<ParamEntry> = store
        .ids()
        .map(|id| ParamEntry {
            name: store.name(id).to_string(),
            shape: store.value(id).shape().to_vec(),
            file: blob_name(store.name(id)),
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        model: model.net.config.clone(),
        seed: model.seed,
        phase: stamp.phase.clone(),
        epoch: stamp.epoch,
        val_dice: stamp.val_dice,
        params,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write beside the target and rename, so a crash never leaves a torn file.
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut builder = tar::Builder::new(file);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    append(&mut builder, "manifest.json", &json, &tmp)?;
    for id in store.ids() {
        let bytes: Vec<u8> = store.value(id).iter().flat_map(|v| v.to_le_bytes()).collect();
        append(&mut builder, &blob_name(store.name(id)), &bytes, &tmp)?;
    }
    builder.into_inner().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(read_entries(path)?.0)
}

fn read_entries(path: &Path) -> Result<(Manifest, BTreeMap<String, Vec<u8>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = tar::Archive::new(file);
    let mut blobs = BTreeMap::new();
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    for entry in archive.entries().map_err(|e| bad(e.to_string()))? {
        let mut entry = entry.map_err(|e| bad(e.to_string()))?;
        let name = entry.path().map_err(|e| bad(e.to_string()))?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(|e| bad(e.to_string()))?;
        blobs.insert(name, data);
    }
    let raw = blobs.remove("manifest.json").ok_or_else(|| bad("missing manifest.json".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&raw).map_err(|e| bad(e.to_string()))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(bad("not a checkpoint archive".into()));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    Ok((manifest, blobs))
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    let (manifest, blobs) = read_entries(path)?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut model = Model::new(manifest.model.clone(), manifest.seed).map_err(|e| bad(e.to_string()))?;
    if manifest.params.len() != model.store.len() {
        return Err(bad(format!(
            "architecture mismatch: archive has {} parameters, model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .store
            .get(&entry.name)
            .ok_or_else(|| bad(format!("parameter {} does not exist in the model", entry.name)))?;
        let data = blobs.get(&entry.file).ok_or_else(|| bad(format!("missing blob {}", entry.file)))?;
        let n: usize = entry.shape.iter().product();
        if data.len() != 4 * n {
            return Err(bad(format!("blob {} has {} bytes, expected {}", entry.file, data.len(), 4 * n)));
        }
        let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| bad(e.to_string()))?;
        model.store.set(id, arr).map_err(|e| bad(e.to_string()))?;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LdcaSites;
    use crate::tensor::Tape;

    fn small() -> BackboneConfig {
        BackboneConfig {
            depth: 2,
            base_width: 2,
            patch_size: 16,
            ldca_sites: LdcaSites::List(vec![[0, 1]]),
            ..Default::default()
        }
    }

    fn run(model: &Model, x: &ArrayD<f32>) -> Vec<u32> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = model.net.forward(&mut tape, &model.store, xv).unwrap();
        tape.value(y).iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(small(), 3).unwrap();
        // Perturb so the test does not pass on re-initialisation alone.
        for id in model.store.ids().collect::<Vec<_>>() {
            model.store.value_mut(id).mapv_inplace(|v| v * 1.5 + 0.01);
        }
        let path = dir.path().join("m.ckpt");
        let stamp = Stamp {
            phase: "main".into(),
            epoch: 4,
            val_dice: Some(0.5),
        };
        save(&path, &model, &stamp).unwrap();
        let (back, manifest) = load(&path).unwrap();
        assert_eq!(manifest.epoch, 4);
        assert_eq!(manifest.model, small());
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 1, 16, 16]), |i| ((i[2] * 3 + i[3]) % 7) as f32 / 7.0);
        assert_eq!(run(&model, &x), run(&back, &x));
    }

    #[test]
    fn version_and_architecture_mismatches_are_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(small(), 3).unwrap();
        let path = dir.path().join("m.ckpt");
        let stamp = Stamp {
            phase: "main".into(),
            epoch: 0,
            val_dice: None,
        };
        save(&path, &model, &stamp).unwrap();

        // Rewrite the archive with a future version number.
        let (mut manifest, blobs) = read_entries(&path).unwrap();
        manifest.version = 99;
        let bumped = dir.path().join("v99.ckpt");
        let mut b = tar::Builder::new(std::fs::File::create(&bumped).unwrap());
        append(&mut b, "manifest.json", &serde_json::to_vec(&manifest).unwrap(), &bumped).unwrap();
        for (k, v) in &blobs {
            append(&mut b, k, v, &bumped).unwrap();
        }
        b.into_inner().unwrap();
        assert!(matches!(load(&bumped), Err(Error::CheckpointVersion { found: 99, expected: 1 })));

        // Same weights, different architecture in the manifest.
        let (mut manifest, blobs) = read_entries(&path).unwrap();
        manifest.model.ldca_sites = LdcaSites::none();
        let other = dir.path().join("arch.ckpt");
        let mut b = tar::Builder::new(std::fs::File::create(&other).unwrap());
        append(&mut b, "manifest.json", &serde_json::to_vec(&manifest).unwrap(), &other).unwrap();
        for (k, v) in &blobs {
            append(&mut b, k, v, &other).unwrap();
        }
        b.into_inner().unwrap();
        assert!(matches!(load(&other), Err(Error::Checkpoint(_))));

        std::fs::write(dir.path().join("junk.ckpt"), b"junk").unwrap();
        assert!(load(&dir.path().join("junk.ckpt")).is_err());
    }
}
