mod common;

use common::uniform;
use lesion_core::checkpoint::{Checkpoint, CheckpointMeta};
use lesion_core::models::{AlexConfig, ModelConfig, Phase, UNetConfig};
use lesion_core::optim::AdamState;
use lesion_core::rng::seeded;
use lesion_core::tensor::{class_cross_entropy, weighted_pixel_bce};
use lesion_core::Tensor;
use rand::Rng;

fn unet(size: usize, base: usize) -> ModelConfig {
    ModelConfig::Unet(UNetConfig {
        input_size: size,
        base_channels: base,
        bottleneck_width: 16,
        ..UNetConfig::default()
    })
}

fn small_alex() -> ModelConfig {
    ModelConfig::Alexnet(AlexConfig {
        input_size: 64,
        fc_width: 32,
        num_classes: 3,
        width_mult: 0.125,
        ..AlexConfig::default()
    })
}

fn input(rng: &mut impl Rng, n: usize, size: usize) -> Tensor {
    Tensor::new(&[n, 3, size, size], uniform(rng, n * 3 * size * size, -0.5, 0.5)).unwrap()
}

#[test]
fn desk_unet_parameter_count() {
    let model = ModelConfig::Unet(UNetConfig::default()).build(&mut seeded(0)).unwrap();
    assert_eq!(model.num_parameters(), 583_937);
}

#[test]
fn unet_output_matches_input_size() {
    let mut rng = seeded(1);
    for size in [16, 32, 64] {
        let model = unet(size, 4).build(&mut seeded(size as u64)).unwrap();
        let y = model.forward(&input(&mut rng, 2, size), Phase::Eval).unwrap();
        assert_eq!(y.shape(), [2, 1, size, size]);
        assert!(y.to_vec().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn paper_scale_configs_construct() {
    let cfg = ModelConfig::Alexnet(AlexConfig::default());
    let model = cfg.build(&mut seeded(0)).unwrap();
    let y = model.forward(&input(&mut seeded(1), 1, 224), Phase::Eval).unwrap();
    assert_eq!(y.shape(), [1, 3]);
    assert!((y.to_vec().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn every_unet_parameter_gets_gradient() {
    let cfg = ModelConfig::Unet(UNetConfig {
        input_size: 16,
        base_channels: 4,
        bottleneck_width: 16,
        dropout_rate: 0.0,
        ..UNetConfig::default()
    });
    let model = cfg.build(&mut seeded(3)).unwrap();
    let mut rng = seeded(4);
    let y = model.forward(&input(&mut rng, 2, 16), Phase::Train(&mut seeded(5))).unwrap();
    let target: Vec<f64> = (0..512).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
    let t = Tensor::new(&[2, 1, 16, 16], target).unwrap();
    let w = Tensor::new(&[2, 1, 16, 16], vec![1.0; 512]).unwrap();
    weighted_pixel_bce(&y, &t, &w).unwrap().backward().unwrap();
    for (name, p) in model.parameters() {
        let g = p.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|&v| v != 0.0), "{name} gradient is all zero");
    }
}

#[test]
fn every_alexnet_parameter_gets_gradient() {
    let mut cfg = small_alex();
    if let ModelConfig::Alexnet(a) = &mut cfg {
        a.dropout_rate = 0.0;
    }
    let model = cfg.build(&mut seeded(6)).unwrap();
    let y = model.forward(&input(&mut seeded(7), 6, 64), Phase::Train(&mut seeded(8))).unwrap();
    class_cross_entropy(&y, &[0, 1, 2, 0, 1, 2]).unwrap().backward().unwrap();
    for (name, p) in model.parameters() {
        let g = p.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|&v| v != 0.0), "{name} gradient is all zero");
    }
}

#[test]
fn eval_forward_is_pure() {
    for cfg in [unet(32, 4), small_alex()] {
        let model = cfg.build(&mut seeded(9)).unwrap();
        let size = cfg.input_size();
        let x = input(&mut seeded(10), 2, size);
        let a = model.forward(&x, Phase::Eval).unwrap().to_vec();
        let b = model.forward(&x, Phase::Eval).unwrap().to_vec();
        assert_eq!(a, b);
        let again = cfg.build(&mut seeded(9)).unwrap();
        assert_eq!(again.forward(&x, Phase::Eval).unwrap().to_vec(), a);
    }
}

#[test]
fn checkpoint_restores_model_and_optimizer() {
    let cfg = unet(16, 2);
    let model = cfg.build(&mut seeded(11)).unwrap();
    let adam = AdamState::new(&model, 1e-3);
    let meta = CheckpointMeta { epoch: 7, metric: 0.8125, fold: Some(2) };
    let ck = Checkpoint::from_model(&model, meta, Some(&adam));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let x = input(&mut seeded(12), 1, 16);
    let restored = back.to_model().unwrap();
    assert_eq!(
        restored.forward(&x, Phase::Eval).unwrap().to_vec(),
        model.forward(&x, Phase::Eval).unwrap().to_vec()
    );
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let model = unet(16, 2).build(&mut seeded(13)).unwrap();
    let ck = Checkpoint::from_model(&model, CheckpointMeta { epoch: 1, metric: 0.5, fold: None }, None);
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
}
