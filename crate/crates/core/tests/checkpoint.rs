use steinprune::data::{
    decode_checkpoint, encode_checkpoint, generate_blobs, load_checkpoint, save_checkpoint,
    Checkpoint, Normalization, CHECKPOINT_VERSION,
};
use steinprune::gates::GateSet;
use steinprune::net::{mlp_specs, Activation};
use steinprune::pruning::{extract_slab, MaskOrigin};
use steinprune::svgd::{ParticleEnsemble, TrainConfig, Trainer};
use steinprune::Error;

fn trained_checkpoint() -> Checkpoint {
    let data = generate_blobs(3, 30, 4, 5.0, 8).unwrap();
    let specs = mlp_specs(4, &[6], 3, Activation::Relu, Activation::SoftmaxOut);
    let config = TrainConfig {
        epochs: 4,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let ensemble = ParticleEnsemble::init(&specs, 3, &config).unwrap();
    let mut trainer = Trainer::new(ensemble, &data, config).unwrap();
    trainer.run_epoch().unwrap();
    trainer.run_epoch().unwrap();
    let ensemble = trainer.ensemble().clone();
    let (mask, _) = extract_slab(&ensemble.particles()[0], 0.5).unwrap();
    Checkpoint {
        progress: Some(trainer.progress().clone()),
        normalization: Some(Normalization::standardize(&data)),
        config_text: "{\"seed\":42}".into(),
        mask: Some(mask.with_origin(MaskOrigin::DllpSlab)),
        ensemble,
    }
}

/// Relaxed gate draws are per-step samples regenerated from the saved
/// streams, so only the logits persist.
fn persisted(mut ck: Checkpoint) -> Checkpoint {
    for p in ck.ensemble.particles_mut() {
        p.gates = GateSet::from_logits(p.gates.logits().to_vec()).unwrap();
    }
    ck
}

#[test]
fn round_trip_is_exact() {
    let ck = trained_checkpoint();
    let bytes = encode_checkpoint(&ck).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    let ck = persisted(ck);
    assert_eq!(back, ck);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.dllp");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
}

#[test]
fn optional_sections_may_be_absent() {
    let mut ck = trained_checkpoint();
    ck.progress = None;
    ck.normalization = None;
    ck.mask = None;
    let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
    assert_eq!(back, persisted(ck));
}

#[test]
fn every_payload_flip_is_caught() {
    let bytes = encode_checkpoint(&trained_checkpoint()).unwrap();
    // Past the 12-byte header every byte is a tag, a length, payload or a checksum.
    for at in (12..bytes.len()).step_by(7) {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        assert!(
            decode_checkpoint(&bad).is_err(),
            "flip at byte {at} went unnoticed"
        );
    }
}

#[test]
fn checksum_mismatch_names_its_offset() {
    let bytes = encode_checkpoint(&trained_checkpoint()).unwrap();
    // First section: tag (4) and length (8) after the header, then the payload.
    let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let mut bad = bytes.clone();
    bad[24] ^= 1;
    match decode_checkpoint(&bad) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset, (24 + len) as u64);
            assert!(message.contains("checksum"), "{message}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn other_versions_are_refused() {
    let mut bytes = encode_checkpoint(&trained_checkpoint()).unwrap();
    assert_eq!(
        u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
        CHECKPOINT_VERSION
    );
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match decode_checkpoint(&bytes) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset, 8);
            assert!(message.contains("version"));
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn truncation_never_panics() {
    let bytes = encode_checkpoint(&trained_checkpoint()).unwrap();
    for n in (0..bytes.len()).step_by(5).chain([bytes.len() - 16]) {
        assert!(
            matches!(decode_checkpoint(&bytes[..n]), Err(Error::Format { .. })),
            "prefix {n}"
        );
    }
    let mut long = bytes.clone();
    long.extend_from_slice(&bytes[12..]);
    assert!(decode_checkpoint(&long).is_err());
    let mut junk = bytes.clone();
    junk[..8].copy_from_slice(b"NOTACKPT");
    assert!(decode_checkpoint(&junk).is_err());
}

#[test]
fn single_particle_ensembles_are_refused() {
    let ck = trained_checkpoint();
    let one = vec![ck.ensemble.particles()[0].clone()];
    assert!(matches!(
        ParticleEnsemble::new(one),
        Err(Error::Precondition(_))
    ));
    assert!(matches!(
        ParticleEnsemble::new(Vec::new()),
        Err(Error::Precondition(_))
    ));
}
