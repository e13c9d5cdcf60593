//! Checkpoint files on disk and the dense-to-sparse import path.

mod common;

use std::collections::BTreeSet;

use sparsedit_core::model::checkpoint::{decode, encode};
use sparsedit_core::model::{import_dense, read_checkpoint, Block, ModelConfig, SparseDit};
use sparsedit_core::{Error, Params};

fn dense_cfg() -> ModelConfig {
    let s = ModelConfig::toy();
    ModelConfig {
        n_bottom: 0,
        sdtm: Vec::new(),
        n_top: s.depth(),
        ..s
    }
}

#[test]
fn file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(1);
    let mut m = SparseDit::new(ModelConfig::toy(), &mut rng).unwrap();
    common::randomize(&mut m, 0.5, &mut rng);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    m.save(&a).unwrap();
    let back = SparseDit::load(&a).unwrap();
    assert_eq!(back, m);
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn import_manifest_diff() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(2);
    let mut dense = SparseDit::new(dense_cfg(), &mut rng).unwrap();
    common::randomize(&mut dense, 0.5, &mut rng);
    let path = dir.path().join("dense.ckpt");
    dense.save(&path).unwrap();
    let donor = read_checkpoint(&path).unwrap();
    let (sparse, report) = import_dense(&donor, ModelConfig::toy()).unwrap();

    let donor_names: BTreeSet<String> = donor.names().map(String::from).collect();
    let sparse_names: BTreeSet<String> = sparse.manifest().into_iter().map(|(n, _)| n).collect();
    let removed: Vec<&String> = donor_names.difference(&sparse_names).collect();
    let added: Vec<&String> = sparse_names.difference(&donor_names).collect();
    // the pooled fused projection loses its q and k rows and is renamed
    assert_eq!(removed, ["blocks.0.attn.qkv.bias", "blocks.0.attn.qkv.weight"]);
    assert_eq!(
        added,
        [
            "blocks.0.attn.v.bias",
            "blocks.0.attn.v.weight",
            "blocks.3.merge.w1.weight",
            "blocks.3.merge.w2.weight"
        ]
    );
    assert_eq!(report.dropped_qk.len(), 2);
    for (name, a) in sparse.tensors() {
        if let Some(src) = donor.get(&name) {
            assert_eq!(&a, src, "{name} changed on import");
        }
    }
    let Block::Recover(r) = &sparse.blocks[3] else { panic!("block 3 is not a recovery block") };
    assert!(r.w1.weight.iter().all(|&v| v == 0.0));
    assert_eq!(r.w2.weight, ndarray::Array2::<f64>::eye(64));
}

#[test]
fn corrupted_files_name_the_entry() {
    let m = SparseDit::new(ModelConfig::toy(), &mut common::rng(0)).unwrap();
    let bytes = m.to_bytes().unwrap();
    let truncated = &bytes[..bytes.len() - 8];
    match decode(truncated) {
        Err(Error::CheckpointEntry { entry, .. }) => assert_eq!(entry, "final_layer.adaLN_modulation.1.bias"),
        other => panic!("{other:?}"),
    }
    let mut tensors = m.tensors();
    tensors.retain(|(n, _)| n != "y_embedder.embedding_table.weight");
    let views: Vec<_> = tensors.iter().map(|(n, a)| (n.clone(), a.view())).collect();
    let partial = decode(&encode(m.metadata(), &views).unwrap()).unwrap();
    match SparseDit::from_tensor_file(&partial) {
        Err(Error::CheckpointEntry { entry, .. }) => assert_eq!(entry, "y_embedder.embedding_table.weight"),
        other => panic!("{other:?}"),
    }
    assert_eq!(m.param_count(), m.tensors().iter().map(|(_, a)| a.len()).sum::<usize>());
}
