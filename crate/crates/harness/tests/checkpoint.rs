use mam_core::{init_model, Array64, DecodeMode, ModelConfig, ModelKind};
use mam_harness::checkpoint::{encode_checkpoint, FORMAT_VERSION, MAGIC};
use mam_harness::{load_checkpoint, load_policy, save_checkpoint, HarnessError};

fn small(kind: ModelKind, d_model: usize) -> ModelConfig {
    ModelConfig { kind, d_model, state_dim: 4, dt_rank: 4, attn_blocks: 1, ..ModelConfig::new(3, 5, 4) }
}

#[test]
fn save_and_load_are_bitwise_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Mam, ModelKind::Attention] {
        let cfg = small(kind, 8);
        let policy = init_model::<f64>(&cfg, 11).unwrap();
        let path = dir.path().join(format!("{kind}.ckpt"));
        save_checkpoint(policy.params(), &cfg, &path).unwrap();
        let (stored, params) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(stored, cfg);
        assert!(params.bit_eq(policy.params()));

        let restored = load_policy::<f64>(&path, None).unwrap();
        let obs = Array64::from_fn([3, 5], |i| (i as f64 * 0.37).sin());
        assert_eq!(restored.act(&obs, DecodeMode::Greedy).unwrap(), policy.act(&obs, DecodeMode::Greedy).unwrap());
        assert_eq!(std::fs::read(&path).unwrap(), encode_checkpoint(restored.params(), &cfg));
    }
}

fn saved(dir: &std::path::Path) -> (std::path::PathBuf, Vec<u8>) {
    let cfg = small(ModelKind::Mam, 8);
    let policy = init_model::<f64>(&cfg, 1).unwrap();
    let path = dir.join("m.ckpt");
    save_checkpoint(policy.params(), &cfg, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    (path, bytes)
}

#[test]
fn bad_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (path, mut bytes) = saved(dir.path());
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint::<f64>(&path).unwrap_err();
    assert!(matches!(err, HarnessError::BadMagic { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn future_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (path, mut bytes) = saved(dir.path());
    assert_eq!(&bytes[..8], MAGIC);
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint::<f64>(&path).unwrap_err();
    assert!(
        matches!(err, HarnessError::Version { found, expected, .. } if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION)
    );
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (path, bytes) = saved(dir.path());
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = load_checkpoint::<f64>(&path).unwrap_err();
    assert!(matches!(err, HarnessError::Truncated { .. }), "{err}");
    assert_eq!(err.exit_code(), 5);
}

#[test]
fn incompatible_config_names_the_first_mismatched_array() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path());
    let wider = small(ModelKind::Mam, 16);
    let first = init_model::<f64>(&wider, 0).unwrap().params().iter().next().map(|(n, _)| n.to_string()).unwrap();
    let err = load_policy::<f64>(&path, Some(&wider)).err().expect("shapes differ");
    match &err {
        HarnessError::ShapeMismatch { name, .. } => assert_eq!(*name, first),
        other => panic!("unexpected error {other}"),
    }
    assert_eq!(err.exit_code(), 6);
    assert!(err.to_string().contains(&first));

    let other_kind = small(ModelKind::Attention, 8);
    assert!(matches!(load_policy::<f64>(&path, Some(&other_kind)), Err(HarnessError::ShapeMismatch { .. })));
}
