mod common;

use std::fs;
use std::path::Path;

use mla_core::model::{load_checkpoint, save_checkpoint, Model, Selector};
use mla_core::Error;

fn same_params(a: &Model<f32>, b: &Model<f32>) -> bool {
    a.registry().len() == b.registry().len()
        && a.registry()
            .iter()
            .zip(b.registry().iter())
            .all(|((_, x), (_, y))| {
                x.name == y.name
                    && x.component == y.component
                    && x.trainable == y.trainable
                    && x.embedding == y.embedding
                    && x.row_mask == y.row_mask
                    && x.value.bit_eq(&y.value)
            })
}

fn saved(model: &Model<f32>, dir: &Path) -> std::path::PathBuf {
    let p = dir.join("ck");
    save_checkpoint(model, &p).unwrap();
    p
}

#[test]
fn roundtrip_is_bit_exact() {
    let s = common::setup(&["xa", "xb"], &[]);
    let tmp = tempfile::tempdir().unwrap();
    let p = saved(&s.model, tmp.path());
    let back = load_checkpoint(&p).unwrap();
    assert!(same_params(&s.model, &back));
    assert_eq!(back.languages(), s.model.languages());
    assert_eq!(back.config(), s.model.config());
    assert_eq!(
        back.native_vocab().tokens(),
        s.model.native_vocab().tokens()
    );
    assert_eq!(
        back.nonnative_vocab().tokens(),
        s.model.nonnative_vocab().tokens()
    );
    let ids = s
        .model
        .nonnative_vocab()
        .encode(&s.world.utter(&[4, 1], "xb").unwrap())
        .unwrap();
    assert!(back
        .encode_nonnative_text(&ids, "xb")
        .unwrap()
        .bit_eq(&s.model.encode_nonnative_text(&ids, "xb").unwrap()));
}

#[test]
fn manifest_lists_both_languages_and_their_stacks() {
    let s = common::setup(&["xa", "xc"], &[]);
    let tmp = tempfile::tempdir().unwrap();
    let p = saved(&s.model, tmp.path());
    let man: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["languages"], serde_json::json!(["xa", "xc"]));
    let comps: Vec<&str> = man["params"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["component"].as_str().unwrap())
        .collect();
    assert!(comps.contains(&"acquirer:xa") && comps.contains(&"acquirer:xc"));
    let total: u64 = man["params"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            4 * r["shape"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| d.as_u64().unwrap())
                .product::<u64>()
        })
        .sum();
    assert_eq!(total, fs::metadata(p.join("params.bin")).unwrap().len());
}

#[test]
fn trainable_flags_and_row_masks_survive() {
    let mut s = common::setup(&["xa"], &[]);
    s.model.registry_mut().freeze_all();
    s.model
        .set_trainable(
            &[Selector::EmbeddingRows {
                name: "nonnative.tok_emb".into(),
                rows: vec![3, 5],
            }],
            true,
        )
        .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let back = load_checkpoint(&saved(&s.model, tmp.path())).unwrap();
    assert!(same_params(&s.model, &back));
}

#[test]
fn saving_twice_gives_identical_bytes() {
    let s = common::setup(&["xa"], &[]);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    save_checkpoint(&s.model, &a).unwrap();
    save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
    for f in ["params.bin", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn flipped_byte_is_rejected() {
    let s = common::setup(&["xa"], &[]);
    let tmp = tempfile::tempdir().unwrap();
    let p = saved(&s.model, tmp.path());
    let blob = p.join("params.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[17] ^= 1;
    fs::write(&blob, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&p),
        Err(Error::CheckpointCorrupted(_))
    ));
}

#[test]
fn truncated_blob_is_rejected() {
    let s = common::setup(&["xa"], &[]);
    let tmp = tempfile::tempdir().unwrap();
    let p = saved(&s.model, tmp.path());
    let blob = p.join("params.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    match load_checkpoint(&p) {
        Err(Error::CheckpointTruncated { expected, found }) => assert_eq!(expected - found, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn future_format_version_is_rejected() {
    let s = common::setup(&[], &[]);
    let tmp = tempfile::tempdir().unwrap();
    let p = saved(&s.model, tmp.path());
    let man = p.join("manifest.json");
    let text = fs::read_to_string(&man)
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 2");
    fs::write(&man, text).unwrap();
    assert!(matches!(
        load_checkpoint(&p),
        Err(Error::CheckpointVersion {
            found: 2,
            expected: 1
        })
    ));
}

#[test]
fn manifest_shape_disagreement_is_rejected() {
    let s = common::setup(&[], &[]);
    let tmp = tempfile::tempdir().unwrap();
    let p = saved(&s.model, tmp.path());
    let man = p.join("manifest.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&man).unwrap()).unwrap();
    v["params"][0]["shape"][0] =
        serde_json::json!(v["params"][0]["shape"][0].as_u64().unwrap() + 1);
    fs::write(&man, v.to_string()).unwrap();
    assert!(matches!(
        load_checkpoint(&p),
        Err(Error::CheckpointShape(_))
    ));
}

#[test]
fn missing_blob_is_an_io_error() {
    let s = common::setup(&[], &[]);
    let tmp = tempfile::tempdir().unwrap();
    let p = saved(&s.model, tmp.path());
    fs::remove_file(p.join("params.bin")).unwrap();
    assert_eq!(load_checkpoint(&p).unwrap_err().kind(), "io");
}
