use gatectr::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointError};
use gatectr::data::{EncodedInstance, Dataset};
use gatectr::gates::{GateConfig, Granularity, Sharing};
use gatectr::model::{Family, HiddenGateConfig, ModelSpec, Parameterized};
use gatectr::train::{train, AdamConfig, Splits, TrainConfig};

fn trained() -> (gatectr::train::TrainOutcome, Dataset) {
    let data = Dataset::new(
        (0..200u32)
            .map(|i| EncodedInstance {
                indices: vec![i % 6 + 1, i % 4 + 1, i % 3 + 1],
                label: u8::from(i % 6 < 3),
            })
            .collect(),
    );
    let spec = ModelSpec {
        embedding_dim: 3,
        hidden_widths: vec![8, 4],
        embed_gate: Some(GateConfig {
            granularity: Granularity::BitWise,
            sharing: Sharing::FieldShared,
            bias: true,
            ..GateConfig::default()
        }),
        hidden_gate: Some(HiddenGateConfig::default()),
        ..ModelSpec::new(Family::DeepFm, &[7, 5, 4])
    };
    let splits = Splits {
        train: data.clone(),
        test: data.clone(),
        valid: None,
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        adam: AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        seed: 2,
        ..TrainConfig::default()
    };
    (train(&spec, &splits, &cfg).unwrap(), data)
}

#[test]
fn trained_model_round_trips_with_optimizer_state() {
    let (out, data) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &out.model, &out.adam).unwrap();
    let ck = load_checkpoint_for(&path, out.model.spec()).unwrap();
    assert_eq!(&ck.spec, out.model.spec());
    assert_eq!(ck.adam, out.adam);
    let (model, _) = ck.into_model().unwrap();
    assert_eq!(model.params(), out.model.params());
    for inst in &data.instances {
        assert_eq!(
            model.logit(&inst.indices).unwrap().to_bits(),
            out.model.logit(&inst.indices).unwrap().to_bits()
        );
    }
    save_checkpoint(&dir.path().join("again.ckpt"), &model, &out.adam).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("again.ckpt")).unwrap()
    );
}

#[test]
fn truncated_file_is_rejected() {
    let (out, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &out.model, &out.adam).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 13] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Checksum)), "cut at {cut}");
    }
}

#[test]
fn spec_mismatch_lists_differences() {
    let (out, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &out.model, &out.adam).unwrap();
    let mut other = out.model.spec().clone();
    other.hidden_widths = vec![8, 8];
    other.hidden_gate = None;
    let err = load_checkpoint_for(&path, &other).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("hidden_widths"), "{msg}");
    assert!(msg.contains("hidden_gate"), "{msg}");
}
