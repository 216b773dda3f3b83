use twin_core::exec::Execution;
use twin_core::federation::FedConfig;
use twin_core::scenario::{generate_world, prepare, Modality, PreparedData, WorldConfig};
use twin_core::twin::{
    evaluate, map_modalities, transform, CoderConfig, ConvStage, Route, TrainConfig, TransformConfig, TwinCheckpoint,
    TwinConfig, TwinOp,
};

fn setup() -> (PreparedData, TwinConfig, TrainConfig) {
    let world = WorldConfig {
        areas: 2,
        steps: 60,
        window: 4,
        ..WorldConfig::default()
    }
    .noiseless();
    let data = prepare(&generate_world(&world).unwrap(), world.window, world.train_fraction).unwrap();
    let twin_cfg = TwinConfig {
        latent_dim: 6,
        window: 4,
        layers: CoderConfig {
            conv: vec![ConvStage {
                channels: 4,
                kernel: 2,
                stride: 1,
            }],
            hidden: vec![12],
            ..CoderConfig::default()
        },
        ..TwinConfig::default()
    };
    let train = TrainConfig {
        fed: FedConfig {
            rounds: 40,
            ..FedConfig::default()
        },
        batch_size: 8,
        ..TrainConfig::default()
    };
    (data, twin_cfg, train)
}

#[test]
fn merge_then_split_chain() {
    let (data, twin_cfg, train) = setup();
    let tcfg = TransformConfig {
        train: train.clone(),
        ..TransformConfig::default()
    };
    let v = map_modalities(&data, &[Modality::V], &twin_cfg, &train, 1, Execution::Parallel).unwrap();
    let w = map_modalities(&data, &[Modality::W], &twin_cfg, &train, 2, Execution::Parallel).unwrap();
    let merge: TwinOp = "V+W->S".parse().unwrap();
    let merged = transform(&[&v.twin, &w.twin], &merge, &data, &twin_cfg, &tcfg, 3, Execution::Parallel).unwrap();
    assert_eq!(merged.twin.encoder_modalities(), vec![Modality::V, Modality::W]);
    assert_eq!(merged.twin.decoder_modalities(), vec![Modality::S]);

    let split: TwinOp = "S->V,W".parse().unwrap();
    let s = map_modalities(&data, &[Modality::S], &twin_cfg, &train, 4, Execution::Parallel).unwrap();
    let out = transform(&[&s.twin], &split, &data, &twin_cfg, &tcfg, 5, Execution::Parallel).unwrap();
    let scores = evaluate(&out.twin, &split.route(), &data.test_flat()).unwrap();
    assert_eq!(scores.keys().copied().collect::<Vec<_>>(), vec![Modality::V, Modality::W]);
    for r in scores.values() {
        assert!(r.value.is_finite());
    }
    assert!(out.mapping.final_loss < out.mapping.history[0].global_loss);
    assert_eq!(out.twin.provenance.len(), s.twin.provenance.len() + 1);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (data, twin_cfg, train) = setup();
    let v = map_modalities(&data, &[Modality::V], &twin_cfg, &train, 1, Execution::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.json");
    TwinCheckpoint::from_twin(&v.twin).write(&path).unwrap();
    let back = TwinCheckpoint::read(&path).unwrap().to_twin().unwrap();
    assert_eq!(back, v.twin);
    let route = Route::new(&[Modality::V], &[Modality::V]);
    let a = evaluate(&v.twin, &route, &data.test_flat()).unwrap();
    let b = evaluate(&back, &route, &data.test_flat()).unwrap();
    assert_eq!(a[&Modality::V].value.to_bits(), b[&Modality::V].value.to_bits());
}

#[test]
fn restored_donor_transforms_identically() {
    let (data, twin_cfg, train) = setup();
    let tcfg = TransformConfig {
        train: train.clone(),
        ..TransformConfig::default()
    };
    let v = map_modalities(&data, &[Modality::V], &twin_cfg, &train, 1, Execution::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.json");
    TwinCheckpoint::from_twin(&v.twin).write(&path).unwrap();
    let restored = TwinCheckpoint::read(&path).unwrap().to_twin().unwrap();
    let op: TwinOp = "V->W".parse().unwrap();
    let a = transform(&[&v.twin], &op, &data, &twin_cfg, &tcfg, 9, Execution::Parallel).unwrap();
    let b = transform(&[&restored], &op, &data, &twin_cfg, &tcfg, 9, Execution::Sequential).unwrap();
    assert_eq!(a.twin, b.twin);
}
