use std::collections::BTreeMap;
use std::path::Path;

use fsrl::harness::{
    load_adapter, load_checkpoint, load_lm, load_sae, save_adapter, save_checkpoint, save_lm, save_sae, FORMAT_VERSION,
};
use fsrl::lm::{FrozenLm, LmConfig};
use fsrl::pref::{evaluate, gen_preference_data, prepare, DataSpec, SimpoConfig};
use fsrl::rng::{normal_tensor, stream};
use fsrl::sae::SparseAutoencoder;
use fsrl::steering::{SteeringAdapter, Variant};
use fsrl::{Error, Tensor32, Tensor64};
use serde_json::json;

fn write_random(path: &Path) -> Vec<(String, Tensor32)> {
    let mut rng = stream(1, "ckpt");
    let tensors: Vec<(String, Tensor32)> = [vec![3, 4], vec![7], vec![2, 2, 5]]
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("t{i}"), normal_tensor(&mut rng, &s, 3.0)))
        .collect();
    let refs: Vec<(&str, &Tensor32)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    save_checkpoint(path, "test", &refs, BTreeMap::new(), json!({"seed": 1})).unwrap();
    tensors
}

fn is_checkpoint_error<T: std::fmt::Debug>(r: fsrl::Result<T>) -> bool {
    matches!(r, Err(Error::Checkpoint(_)))
}

#[test]
fn f32_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let tensors = write_random(&path);
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.manifest.format_version, FORMAT_VERSION);
    assert_eq!(ck.manifest.config, json!({"seed": 1}));
    for (name, t) in &tensors {
        let back: Tensor32 = ck.tensor(name).unwrap();
        assert_eq!(back.shape(), t.shape());
        let max = t.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert_eq!(max, 0.0);
    }
}

#[test]
fn f64_roundtrip_rounds_to_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ckpt");
    let t: Tensor64 = normal_tensor(&mut stream(2, "ckpt"), &[5, 3], 1.0);
    save_checkpoint(&path, "test", &[("w", &t)], BTreeMap::new(), json!(null)).unwrap();
    let back: Tensor64 = load_checkpoint(&path).unwrap().tensor("w").unwrap();
    for (a, b) in t.data().iter().zip(back.data()) {
        assert_eq!(*b, f64::from(*a as f32));
    }
}

#[test]
fn flipped_payload_byte_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    write_random(&path);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(is_checkpoint_error(load_checkpoint(&path)));
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ckpt");
    write_random(&path);
    let bytes = std::fs::read(&path).unwrap();
    for cut in [4, 30, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(is_checkpoint_error(load_checkpoint(&path)), "cut at {cut}");
    }
}

#[test]
fn version_and_magic_mismatches_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.ckpt");
    write_random(&path);
    let good = std::fs::read(&path).unwrap();

    let mut bytes = good.clone();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    let mut bytes = good;
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(is_checkpoint_error(load_checkpoint(&path)));
}

#[test]
fn missing_file_is_an_io_not_found() {
    let r = load_checkpoint(Path::new("/nonexistent/x.ckpt"));
    assert!(matches!(r, Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound));
}

#[test]
fn wrong_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    write_random(&path);
    assert!(is_checkpoint_error(load_adapter::<f64>(&path)));
}

fn small_lm() -> FrozenLm<f64> {
    let cfg = LmConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 16,
        hook_layer: 1,
        ..LmConfig::default()
    };
    FrozenLm::random(cfg, 4).unwrap()
}

#[test]
fn artifacts_roundtrip_and_reproduce_the_evaluation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_lm();
    let sae = SparseAutoencoder::<f64>::init(8, 24, 5).unwrap();
    let mut adapter = SteeringAdapter::<f64>::init(8, 24, Variant::JumpRelu, 6).unwrap();
    adapter.w_a = normal_tensor(&mut stream(7, "w"), &[24, 8], 0.3);
    save_lm(&dir.path().join("lm.ckpt"), &model, json!({})).unwrap();
    save_sae(&dir.path().join("sae.ckpt"), &sae, 1, json!({})).unwrap();
    save_adapter(&dir.path().join("ad.ckpt"), &adapter, json!({})).unwrap();

    let triplets = gen_preference_data(
        0,
        &DataSpec {
            n: 6,
            ..DataSpec::default()
        },
    )
    .unwrap();
    let cfg = SimpoConfig::default();
    let run = || {
        let m: FrozenLm<f64> = load_lm(&dir.path().join("lm.ckpt")).unwrap();
        let (s, layer) = load_sae::<f64>(&dir.path().join("sae.ckpt")).unwrap();
        let a: SteeringAdapter<f64> = load_adapter(&dir.path().join("ad.ckpt")).unwrap();
        assert_eq!(layer, 1);
        assert_eq!(a.variant, Variant::JumpRelu);
        assert_eq!(m.config(), model.config());
        let p = prepare(&m, &triplets).unwrap();
        evaluate(&m, Some((&s, &a)), &p, &cfg, None).unwrap().loss
    };
    let first = run();
    assert!(first.is_finite());
    assert_eq!(first.to_bits(), run().to_bits());
}
