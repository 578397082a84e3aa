mod common;

use dlr_core::checkpoint::{decode, encode, load, round_to_storage, save, CheckpointError, Manifest, MAGIC};
use dlr_core::model::DlrModel;

fn manifest() -> Manifest {
    Manifest::new(2, 42, "seed = 42\n[model]\nd = 16\n")
}

#[test]
fn save_load_save_is_byte_identical() {
    let (_, store) = common::minimal_model(1);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save(&a, &store, &manifest()).unwrap();
    let (loaded, m) = load(&a).unwrap();
    assert_eq!(m, manifest());
    save(&b, &loaded, &m).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn loaded_values_are_the_f32_rounding() {
    let (cfg, gcfg) = common::minimal();
    let (_, store) = common::minimal_model(2);
    let (loaded, _) = decode(&encode(&store, &manifest())).unwrap();
    let mut rounded = store.clone();
    round_to_storage(&mut rounded);
    assert_eq!(loaded.checksum(), rounded.checksum());
    let names: Vec<&str> = loaded.iter().map(|p| p.name.as_str()).collect();
    let orig: Vec<&str> = store.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, orig);
    DlrModel::bind(&cfg, &gcfg, &loaded).unwrap();
}

#[test]
fn header_layout() {
    let (_, store) = common::minimal_model(3);
    let bytes = encode(&store, &manifest());
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, store.len());
    let first = store.iter().next().unwrap();
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(&bytes[16..16 + n], first.name.as_bytes());
    let text = manifest().config_text;
    assert!(bytes.ends_with(text.as_bytes()));
}

#[test]
fn corruption_is_detected() {
    let (_, store) = common::minimal_model(4);
    let bytes = encode(&store, &manifest());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode(&bad), Err(CheckpointError::Version(9))));
    assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(decode(&bad), Err(CheckpointError::Corrupt(_))));
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 1;
    assert!(matches!(decode(&bad), Err(CheckpointError::HashMismatch)));
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(load(std::path::Path::new("/nonexistent/x.ckpt")), Err(CheckpointError::Io { .. })));
}
