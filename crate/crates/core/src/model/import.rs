//! Saving, loading and initializing a sparse model from dense DiT weights.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, ArrayD, ArrayViewD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, CheckpointManifest, TensorFile};
use super::{ModelConfig, SparseDit};
use crate::error::{Error, Result};
use crate::params::Params;

/// Which donor tensors were not carried over and which tensors were created.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    /// Fused projections feeding a poolingformer: only the value rows are
    /// kept, the query and key rows are dropped.
    pub dropped_qk: Vec<String>,
    /// Tensors with no donor counterpart, set to the identity merge.
    pub created: Vec<String>,
    /// Donor blocks deeper than the target network.
    pub unused_blocks: Vec<usize>,
}

fn views(t: &[(String, ArrayD<f64>)]) -> Vec<(String, ArrayViewD<'_, f64>)> {
    t.iter().map(|(n, a)| (n.clone(), a.view())).collect()
}

impl SparseDit {
    pub fn tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, a| out.push((name.to_string(), a.to_owned())));
        out
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "model", "model": self.config() })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(self.metadata(), &views(&self.tensors()))
    }

    pub fn save(&self, path: &Path) -> Result<CheckpointManifest> {
        checkpoint::write_checkpoint(path, self.metadata(), &views(&self.tensors()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&checkpoint::read_checkpoint(path)?)
    }

    /// Rebuilds a model from a file written by [`SparseDit::save`]. The
    /// tensor names must match the configured layout exactly.
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let config = config_from_metadata(&file.manifest.metadata)?;
        let mut model = skeleton(config)?;
        let mut by_name: BTreeMap<&str, &ArrayD<f64>> = file.tensors.iter().map(|(n, a)| (n.as_str(), a)).collect();
        let mut failure = None;
        model.visit_mut("", &mut |name, mut dst| {
            if failure.is_some() {
                return;
            }
            match by_name.remove(name) {
                None => failure = Some(entry_err(name, "missing from checkpoint")),
                Some(src) if src.shape() != dst.shape() => {
                    failure = Some(entry_err(name, format!("shape {:?}, expected {:?}", src.shape(), dst.shape())))
                }
                Some(src) => dst.assign(src),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(entry_err(extra, "not part of the configured model"));
        }
        Ok(model)
    }
}

fn entry_err(name: &str, reason: impl Into<String>) -> Error {
    Error::CheckpointEntry {
        entry: name.to_string(),
        reason: reason.into(),
    }
}

pub fn config_from_metadata(meta: &serde_json::Value) -> Result<ModelConfig> {
    let m = meta
        .get("model")
        .ok_or_else(|| Error::Checkpoint("metadata has no model config".into()))?;
    let cfg: ModelConfig = serde_json::from_value(m.clone())?;
    cfg.validate()?;
    Ok(cfg)
}

fn skeleton(config: ModelConfig) -> Result<SparseDit> {
    SparseDit::new(config, &mut ChaCha8Rng::seed_from_u64(0))
}

fn donor_depth(donor: &TensorFile) -> usize {
    let mut depth = 0;
    for name in donor.names() {
        if let Some(rest) = name.strip_prefix("blocks.") {
            if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
                depth = depth.max(i + 1);
            }
        }
    }
    depth
}

/// Initializes `config` from a dense DiT checkpoint, mapping donor block `i`
/// to block `i`. Poolingformers keep the value rows of the fused projection;
/// recovery merges start at `W1 = 0, W2 = I`.
pub fn import_dense(donor: &TensorFile, config: ModelConfig) -> Result<(SparseDit, ImportReport)> {
    config.validate()?;
    let need = config.depth();
    let have = donor_depth(donor);
    if have < need {
        return Err(Error::Import(format!("donor has {have} blocks, target needs {need}")));
    }
    let width = config.width;
    if let Some(w) = donor.get("x_embedder.proj.weight") {
        if w.shape()[0] != width {
            return Err(Error::Import(format!("donor width {} does not match target width {width}", w.shape()[0])));
        }
    }
    let mut model = skeleton(config)?;
    let mut report = ImportReport {
        unused_blocks: (need..have).collect(),
        ..Default::default()
    };
    let mut failure = None;
    model.visit_mut("", &mut |name, mut dst| {
        if failure.is_some() {
            return;
        }
        if name.contains(".merge.") {
            report.created.push(name.to_string());
            return;
        }
        let pooled = ["attn.v.weight", "attn.v.bias"]
            .iter()
            .find(|suffix| name.ends_with(*suffix))
            .map(|suffix| format!("{}attn.qkv.{}", &name[..name.len() - suffix.len()], &suffix["attn.v.".len()..]));
        let src_name = pooled.clone().unwrap_or_else(|| name.to_string());
        let Some(src) = donor.get(&src_name) else {
            failure = Some(Error::Import(format!("donor has no tensor {src_name} for {name}")));
            return;
        };
        let src = if pooled.is_some() {
            if src.shape()[0] != 3 * width {
                failure = Some(entry_err(&src_name, format!("fused projection has {} rows, expected {}", src.shape()[0], 3 * width)));
                return;
            }
            report.dropped_qk.push(src_name.clone());
            src.slice_axis(ndarray::Axis(0), (2 * width..3 * width).into()).to_owned()
        } else {
            src.clone()
        };
        if src.shape() != dst.shape() {
            failure = Some(entry_err(&src_name, format!("shape {:?}, expected {:?}", src.shape(), dst.shape())));
            return;
        }
        dst.assign(&src);
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((model, report))
}

/// Value rows of a fused `[3C, C]` projection.
pub fn value_rows(qkv: &ArrayD<f64>, width: usize) -> ArrayD<f64> {
    match qkv.ndim() {
        2 => qkv.slice(s![2 * width..3 * width, ..]).to_owned().into_dyn(),
        _ => qkv.slice(s![2 * width..3 * width]).to_owned().into_dyn(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Block;

    fn dense_toy() -> SparseDit {
        let sparse = ModelConfig::toy();
        let cfg = ModelConfig {
            n_bottom: 0,
            sdtm: Vec::new(),
            n_top: sparse.depth(),
            ..sparse
        };
        SparseDit::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn as_file(m: &SparseDit) -> TensorFile {
        checkpoint::decode(&m.to_bytes().unwrap()).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let m = SparseDit::new(ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let back = SparseDit::from_tensor_file(&as_file(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn import_maps_blocks_in_order() {
        let dense = dense_toy();
        let (m, report) = import_dense(&as_file(&dense), ModelConfig::toy()).unwrap();
        assert_eq!(report.dropped_qk, vec!["blocks.0.attn.qkv.weight", "blocks.0.attn.qkv.bias"]);
        assert_eq!(report.created, vec!["blocks.3.merge.w1.weight", "blocks.3.merge.w2.weight"]);
        let Block::Dense(d0) = &dense.blocks[0] else { panic!() };
        let Block::Pooling(p0) = &m.blocks[0] else { panic!() };
        assert_eq!(p0.value.weight.view().into_dyn(), value_rows(&d0.attn.qkv.weight.clone().into_dyn(), 64));
        let Block::Dense(d3) = &dense.blocks[3] else { panic!() };
        let Block::Recover(r3) = &m.blocks[3] else { panic!() };
        assert_eq!(r3.attn, d3.attn);
        assert!(r3.w1.weight.iter().all(|&v| v == 0.0));
        assert_eq!(m.x_embedder, dense.x_embedder);
    }

    #[test]
    fn shallow_or_narrow_donor_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.n_top = 0;
        cfg.sdtm.clear();
        cfg.n_bottom = 2;
        let small = SparseDit::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(import_dense(&as_file(&small), ModelConfig::toy()), Err(Error::Import(_))));
        let mut wide = ModelConfig::toy();
        wide.width = 32;
        assert!(matches!(import_dense(&as_file(&dense_toy()), wide), Err(Error::Import(_))));
    }
}
