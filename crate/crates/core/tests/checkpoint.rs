use g2p_core::checkpoint::{Checkpoint, MAGIC};
use g2p_core::optim::AdamWState;
use g2p_core::{Error, ModelConfig, ModelParameters, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        rel_pos_buckets: 4,
        rel_pos_max_distance: 8,
        ..ModelConfig::default()
    }
}

fn params(seed: u64) -> ModelParameters<f32> {
    ModelParameters::init(&tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn bits(p: &ModelParameters<f32>) -> Vec<u32> {
    p.named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn is_checkpoint_error<T: std::fmt::Debug>(r: g2p_core::Result<T>) -> bool {
    matches!(r, Err(Error::Checkpoint(_)))
}

#[test]
fn round_trip_is_bit_exact() {
    let mut p = params(3);
    {
        let mut tensors = p.named_tensors_mut();
        let data = tensors[0].1.data_mut();
        data[..6].copy_from_slice(&[-0.0, f32::MIN_POSITIVE / 4.0, f32::MAX, f32::INFINITY, -1e-30, 1.0]);
    }
    let train = TrainConfig {
        learning_rate: 1.234_567_890_123e-4,
        seed: u64::MAX,
        ..TrainConfig::default()
    };
    let extra = serde_json::json!({"note": "ok", "n": [1, 2]});
    let ckpt = Checkpoint::from_params(&p, Some(&train), 42, extra.clone());
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);

    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.header.model_config, tiny());
    assert_eq!(back.header.train_config.as_ref(), Some(&train));
    assert_eq!(back.header.step, 42);
    assert_eq!(back.header.extra, extra);
    assert_eq!(bits(&back.to_params::<f32>().unwrap()), bits(&p));
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(bits(&Checkpoint::load(&path).unwrap().to_params().unwrap()), bits(&p));
}

#[test]
fn f64_parameters_round_trip_through_f32() {
    let p: ModelParameters<f64> = params(4).cast();
    let back = Checkpoint::from_bytes(&Checkpoint::from_params(&p, None, 0, serde_json::Value::Null).to_bytes().unwrap())
        .unwrap()
        .to_params::<f64>()
        .unwrap();
    assert_eq!(back, p);
}

#[test]
fn optimizer_state_round_trips() {
    let p = params(5);
    let mut state = AdamWState::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (_, t) in state.first_moment.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    for (_, t) in state.second_moment.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
    }
    state.step = 17;
    let ckpt = Checkpoint::from_optimizer(&state);
    assert!(ckpt.header.tensors.iter().all(|e| e.name.starts_with("adam.m.") || e.name.starts_with("adam.v.")));
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap().to_optimizer::<f32>().unwrap();
    assert_eq!(back, state);
    // A model container is not an optimizer container and vice versa.
    assert!(is_checkpoint_error(Checkpoint::from_params(&p, None, 0, serde_json::Value::Null).to_optimizer::<f32>()));
    assert!(is_checkpoint_error(ckpt.to_params::<f32>()));
}

#[test]
fn every_single_byte_corruption_is_detected() {
    let bytes = Checkpoint::from_params(&params(7), None, 1, serde_json::Value::Null)
        .to_bytes()
        .unwrap();
    let mut copy = bytes.clone();
    for i in 0..bytes.len() {
        for flip in [0x01u8, 0x80, 0xff] {
            copy[i] ^= flip;
            assert!(is_checkpoint_error(Checkpoint::from_bytes(&copy)), "byte {i} ^ {flip:#x}");
            copy[i] ^= flip;
        }
    }
    for len in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        assert!(is_checkpoint_error(Checkpoint::from_bytes(&bytes[..len])), "truncated to {len}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(is_checkpoint_error(Checkpoint::from_bytes(&longer)));
}

#[test]
fn inconsistent_directories_are_rejected() {
    let good = Checkpoint::from_params(&params(8), None, 0, serde_json::Value::Null);

    let mut short = good.clone();
    short.payloads[2].pop();
    assert!(is_checkpoint_error(short.to_bytes()));

    let mut renamed = good.clone();
    renamed.header.tensors[0].name = "shared.embedding.typo".into();
    let reloaded = Checkpoint::from_bytes(&renamed.to_bytes().unwrap()).unwrap();
    assert!(is_checkpoint_error(reloaded.to_params::<f32>()));

    let mut missing = good.clone();
    missing.header.tensors.pop();
    missing.payloads.pop();
    let reloaded = Checkpoint::from_bytes(&missing.to_bytes().unwrap()).unwrap();
    assert!(is_checkpoint_error(reloaded.to_params::<f32>()));

    let mut wider = good.clone();
    wider.header.model_config.d_ff = 16;
    let reloaded = Checkpoint::from_bytes(&wider.to_bytes().unwrap()).unwrap();
    assert!(is_checkpoint_error(reloaded.to_params::<f32>()));
}
