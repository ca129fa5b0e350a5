use std::fs;

use monalab::checkpoint::{self, decode, encode, load_weights, save_weights, CheckpointScope, LoadMode};
use monalab::delta::{attach_method, MethodKind, MethodSpec};
use monalab::init::{rng, uniform_tensor};
use monalab::{build_backbone, BackboneConfig, Error, ModuleGraph, Origin};

fn mona_graph(seed: u64) -> ModuleGraph {
    let mut g = build_backbone(&BackboneConfig::preset("toy").unwrap(), seed).unwrap();
    attach_method(&mut g, &MethodSpec::new(MethodKind::Mona).with_dim(4), seed).unwrap();
    g
}

fn perturb(g: &mut ModuleGraph, origin: Origin, seed: u64) {
    let mut r = rng(seed);
    for p in g.params_mut().iter_mut().filter(|p| p.origin == origin) {
        p.value = uniform_tensor(p.value.shape(), &mut r).unwrap();
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.dfck"), dir.path().join("b.dfck"));
    let mut src = mona_graph(1);
    perturb(&mut src, Origin::Delta, 3);
    save_weights(&src, &a, CheckpointScope::Full).unwrap();
    let mut dst = mona_graph(2);
    load_weights(&mut dst, &a, LoadMode::Exact).unwrap();
    save_weights(&dst, &b, CheckpointScope::Full).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    for (p, q) in src.params().iter().zip(dst.params().iter()) {
        assert!(p.value.bit_eq(&q.value), "{}", p.name);
    }
    assert_eq!(src.parameter_inventory(), dst.parameter_inventory());
}

#[test]
fn file_layout_header() {
    let g = mona_graph(0);
    let bytes = encode(&checkpoint::collect(&g, CheckpointScope::Full));
    assert_eq!(&bytes[0..4], b"DFCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, g.params().len());
    let first = &g.params().iter().next().unwrap().name;
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(&bytes[16..16 + len], first.as_bytes());
    // payload + per-entry headers account for the whole file
    let payload: usize = g.params().iter().map(|p| 8 * p.numel()).sum();
    let headers: usize = g
        .params()
        .iter()
        .map(|p| 4 + p.name.len() + 2 + 4 + 4 * p.value.rank())
        .sum();
    assert_eq!(bytes.len(), 12 + headers + payload);
}

#[test]
fn renamed_key_is_named_in_error() {
    let g = mona_graph(0);
    let mut entries = checkpoint::collect(&g, CheckpointScope::Full);
    entries[3].name = "stages.0.blocks.0.attn.qq.weight".into();
    let original = g.params().iter().nth(3).unwrap().name.clone();
    let mut dst = mona_graph(0);
    match checkpoint::apply(&mut dst, entries.clone(), LoadMode::Exact) {
        Err(Error::CheckpointMismatch(msg)) => assert!(msg.contains("attn.qq.weight"), "{msg}"),
        other => panic!("{other:?}"),
    }
    // drop the bad entry: now the original key is reported missing
    entries.remove(3);
    match checkpoint::apply(&mut dst, entries, LoadMode::Exact) {
        Err(Error::CheckpointMismatch(msg)) => assert!(msg.contains(&original), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn failed_load_leaves_graph_untouched() {
    let mut src = mona_graph(0);
    perturb(&mut src, Origin::Delta, 1);
    let mut entries = checkpoint::collect(&src, CheckpointScope::DeltaOnly);
    entries.last_mut().unwrap().name.push_str(".x");
    let mut dst = mona_graph(0);
    let before = dst.clone();
    assert!(checkpoint::apply(&mut dst, entries, LoadMode::Subset).is_err());
    for (p, q) in before.params().iter().zip(dst.params().iter()) {
        assert!(p.value.bit_eq(&q.value));
    }
}

#[test]
fn delta_only_holds_only_delta_and_is_small() {
    let dir = tempfile::tempdir().unwrap();
    let g = mona_graph(0);
    let (full, delta) = (dir.path().join("full.dfck"), dir.path().join("delta.dfck"));
    save_weights(&g, &full, CheckpointScope::Full).unwrap();
    save_weights(&g, &delta, CheckpointScope::DeltaOnly).unwrap();
    let entries = decode(&fs::read(&delta).unwrap()).unwrap();
    assert!(!entries.is_empty());
    assert!(entries.iter().all(|e| e.origin == Origin::Delta && e.trainable));
    let n_delta = g.params().iter().filter(|p| p.origin == Origin::Delta).count();
    assert_eq!(entries.len(), n_delta);
    let (fs_full, fs_delta) = (fs::metadata(&full).unwrap().len(), fs::metadata(&delta).unwrap().len());
    assert!(fs_delta * 2 < fs_full, "{fs_delta} vs {fs_full}");
}

#[test]
fn shape_or_origin_mismatch_rejected() {
    let g = mona_graph(0);
    let mut entries = checkpoint::collect(&g, CheckpointScope::Trainable);
    entries[0].origin = Origin::Pretrained;
    let mut dst = mona_graph(0);
    assert!(matches!(checkpoint::apply(&mut dst, entries, LoadMode::Subset), Err(Error::CheckpointMismatch(_))));

    let tiny = build_backbone(&BackboneConfig::preset("tiny").unwrap(), 0).unwrap();
    let mut toy = build_backbone(&BackboneConfig::preset("toy").unwrap(), 0).unwrap();
    let foreign = checkpoint::collect(&tiny, CheckpointScope::Full);
    assert!(matches!(checkpoint::apply(&mut toy, foreign, LoadMode::Subset), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn trainable_mode_requires_exact_trainable_set() {
    let g = mona_graph(0);
    let ok = checkpoint::collect(&g, CheckpointScope::Trainable);
    let mut dst = mona_graph(0);
    checkpoint::apply(&mut dst, ok.clone(), LoadMode::Trainable).unwrap();
    // missing the head
    let no_head: Vec<_> = ok.iter().filter(|e| e.origin != Origin::Head).cloned().collect();
    assert!(checkpoint::apply(&mut dst, no_head, LoadMode::Trainable).is_err());
    // carrying a frozen tensor
    let full = checkpoint::collect(&g, CheckpointScope::Full);
    assert!(checkpoint::apply(&mut dst, full, LoadMode::Trainable).is_err());
}

#[test]
fn garbage_files_are_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.dfck");
    fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
    let mut g = mona_graph(0);
    assert!(matches!(load_weights(&mut g, &path, LoadMode::Subset), Err(Error::CheckpointMismatch(_))));
    assert!(matches!(
        load_weights(&mut g, &dir.path().join("absent"), LoadMode::Subset),
        Err(Error::Io(_))
    ));
}
