use casa::checkpoint::{decode, encode, load, save, CheckpointError, VERSION};
use casa_core::train::{adam_step, EpochRecord, OptimState};
use casa_core::{AttentionKind, CasaModel, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 2], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        shape,
        (0..shape[0] * shape[1])
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap()
}

fn small(attention: AttentionKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(4, 12, 6).with_d_model(8);
    cfg.attention = attention;
    cfg
}

/// A model after a few f32-stored Adam steps, with its optimizer state.
fn trained(attention: AttentionKind) -> (CasaModel, OptimState) {
    let mut model = CasaModel::new(small(attention), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut state = OptimState::new(model.params(), 1e-2);
    for _ in 0..3 {
        let (x, y) = (random([4, 12], &mut rng), random([4, 6], &mut rng));
        let grads = model.loss_gradients(&x, &y).unwrap();
        adam_step(model.params_mut(), &grads, &mut state).unwrap();
        model.params_mut().round_to_f32();
    }
    (model, state)
}

fn log() -> Vec<EpochRecord> {
    vec![
        EpochRecord {
            epoch: 1,
            train_mse: 0.75,
            val_mse: 0.5,
            lr: 1e-3,
        },
        EpochRecord {
            epoch: 2,
            train_mse: 0.625,
            val_mse: 0.4375,
            lr: 5e-4,
        },
    ]
}

#[test]
fn round_trip_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for attention in [AttentionKind::Casa, AttentionKind::Baseline] {
        let (model, state) = trained(attention);
        let back = decode(&encode(&model, Some(&state), &log())).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.optim.as_ref(), Some(&state));
        assert_eq!(back.log, log());
        for _ in 0..10 {
            let x = random([4, 12], &mut rng);
            let a = model.predict(&x).unwrap();
            let b = back.model.predict(&x).unwrap();
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn file_round_trip_without_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = CasaModel::new(small(AttentionKind::Casa), 1).unwrap();
    save(&path, &model, None, &[]).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back.model, model);
    assert!(back.optim.is_none() && back.log.is_empty());
    let missing = load(&dir.path().join("absent.ckpt")).unwrap_err();
    assert!(matches!(missing, CheckpointError::Io { .. }));
}

#[test]
fn every_truncation_is_rejected() {
    let (model, state) = trained(AttentionKind::Casa);
    let bytes = encode(&model, Some(&state), &log());
    for cut in 0..bytes.len() {
        let err = decode(&bytes[..cut]).unwrap_err();
        assert!(
            matches!(
                err,
                CheckpointError::BadMagic
                    | CheckpointError::Truncated { .. }
                    | CheckpointError::ChecksumMismatch { .. }
            ),
            "cut {cut}: {err:?}"
        );
    }
}

#[test]
fn flipped_bits_fail_the_checksum() {
    let model = CasaModel::new(small(AttentionKind::Casa), 2).unwrap();
    let bytes = encode(&model, None, &log());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let mut bad = bytes.clone();
        let i = rng.random_range(8..bad.len());
        bad[i] ^= 1 << rng.random_range(0..8);
        assert!(
            matches!(decode(&bad), Err(CheckpointError::ChecksumMismatch { .. })),
            "byte {i}"
        );
    }
}

#[test]
fn magic_and_version_are_checked_first() {
    let model = CasaModel::new(small(AttentionKind::Casa), 2).unwrap();
    let mut bytes = encode(&model, None, &[]);
    bytes[0] = b'X';
    assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    assert!(matches!(
        decode(b"not a checkpoint"),
        Err(CheckpointError::BadMagic)
    ));
    let mut bytes = encode(&model, None, &[]);
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(
        decode(&bytes),
        Err(CheckpointError::VersionMismatch { found, .. }) if found == VERSION + 1
    ));
}

#[test]
fn consistent_body_with_bad_contents_is_malformed() {
    let model = CasaModel::new(small(AttentionKind::Casa), 2).unwrap();
    let mut bytes = encode(&model, None, &[]);
    bytes.truncate(bytes.len() - 4);
    bytes.push(0);
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(decode(&bytes), Err(CheckpointError::Malformed(_))));
}

#[test]
fn other_variate_count_is_a_shape_mismatch() {
    let ett = CasaModel::new(ModelConfig::new(7, 96, 96).with_d_model(16), 0).unwrap();
    let ckpt = decode(&encode(&ett, None, &[])).unwrap();
    assert!(ckpt.check_config(ett.config()).is_ok());
    let err = ckpt
        .check_config(&ModelConfig::new(21, 96, 96).with_d_model(16))
        .unwrap_err();
    assert!(err.is_mismatch());
    assert!(
        err.to_string().contains("model.N: config 21, checkpoint 7"),
        "{err}"
    );
}
