use super::*;
use crate::sim::{sample_profiles, speaker_frames, SpeakerRanges};

fn tiny_model() -> StbConfig {
    StbConfig {
        num_blocks: 1,
        heads: 2,
        feature_dim: 8,
        input_dim: 6,
        frames: 6,
        sap_dim: 8,
        ffn_dim: 16,
        ..StbConfig::default()
    }
}

fn quick(epochs: usize, channels: usize) -> TrainConfig {
    TrainConfig {
        pretrain: PretrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 1e-2,
        },
        finetune: FinetuneConfig {
            epochs,
            batch_size: 4,
            learning_rate: 1e-3,
            channels,
            head_epochs: 1,
            head_learning_rate: 1e-2,
        },
        ..TrainConfig::default()
    }
}

/// `speakers * per_speaker` utterances of `channels` noisy copies of clean frames.
fn toy_set(speakers: usize, per_speaker: usize, channels: usize, seed: u64) -> LabeledSet {
    let profiles = sample_profiles(speakers, 6, &SpeakerRanges::default(), &mut substream(seed, "p", 0)).unwrap();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (s, p) in profiles.iter().enumerate() {
        for u in 0..per_speaker {
            let mut rng = substream(seed, "u", (s * per_speaker + u) as u64);
            let clean = speaker_frames(p, 6, &mut rng);
            let mut data = Vec::new();
            for _ in 0..channels {
                let noise = Tensor::randn([6, 6], 0.3, &mut rng);
                data.extend(clean.data().iter().zip(noise.data()).map(|(a, b)| a + b));
            }
            features.push(Tensor::new([channels, 6, 6], data).unwrap());
            labels.push(s);
        }
    }
    LabeledSet::new(features, labels, speakers).unwrap()
}

#[test]
fn zero_gradient_step_leaves_parameters_unchanged() {
    let model = StbModel::single_channel(tiny_model(), &mut substream(1, "i", 0)).unwrap();
    let mut params = model.params.clone();
    let zeros: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape().to_vec())))
        .collect();
    let mut opt = Adam::new(AdamConfig::default(), 1e-3);
    for _ in 0..3 {
        opt.step(&mut params, &zeros).unwrap();
    }
    assert_eq!(params, model.params);
}

#[test]
fn first_adam_step_moves_by_learning_rate() {
    let mut params = crate::model::ParamStore::new();
    params.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
    let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.3, -4.0, 0.0]))]);
    // tiny eps so the first step is exactly lr * sign(g)
    let mut opt = Adam::new(AdamConfig { eps: 1e-300, ..AdamConfig::default() }, 0.1);
    opt.step(&mut params, &grads).unwrap();
    let w = params.value("w").unwrap().data().to_vec();
    assert!((w[0] - 0.9).abs() < 1e-12);
    assert!((w[1] + 1.9).abs() < 1e-12);
    assert_eq!(w[2], 0.5);
}

#[test]
fn adam_refuses_frozen_parameters() {
    let mut params = crate::model::ParamStore::new();
    params.insert("frontend.w1", Tensor::zeros([2]));
    params.set_frozen(crate::model::ParamGroup::Frontend, true);
    let grads = BTreeMap::from([("frontend.w1".to_string(), Tensor::ones([2]))]);
    assert!(Adam::new(AdamConfig::default(), 1e-3).step(&mut params, &grads).is_err());
}

#[test]
fn single_speaker_loss_vanishes() {
    let data = toy_set(1, 4, 1, 2);
    let out = pretrain(&data, &tiny_model(), &quick(2, 1), 2).unwrap();
    assert!(out.final_loss < 1e-12);
    assert_eq!(out.final_accuracy, 1.0);
}

#[test]
fn pretraining_memorizes_a_small_set() {
    let data = toy_set(3, 4, 1, 3);
    let out = pretrain(&data, &tiny_model(), &quick(40, 1), 3).unwrap();
    let first = out.curve[0].loss;
    assert!(out.final_loss < 0.5 * first, "{first} -> {}", out.final_loss);
    assert!(out.final_accuracy > 0.9);
}

#[test]
fn training_is_bit_reproducible() {
    let data = toy_set(3, 4, 1, 4);
    let a = pretrain(&data, &tiny_model(), &quick(3, 1), 4).unwrap();
    let b = pretrain(&data, &tiny_model(), &quick(3, 1), 4).unwrap();
    assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    assert_eq!(a.model, b.model);
    let c = pretrain(&data, &tiny_model(), &quick(3, 1), 5).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn finetune_keeps_frozen_groups_bitwise() {
    let clean = toy_set(3, 4, 1, 6);
    let pre = pretrain(&clean, &tiny_model(), &quick(3, 1), 6).unwrap().model;
    let multi = toy_set(3, 4, 3, 7);
    for normalizer in [Normalizer::Softmax, Normalizer::Sparsemax] {
        let out = finetune(&pre, &multi, &tiny_model(), &quick(3, 2), normalizer, 7).unwrap();
        verify_frozen(&pre, &out.model).unwrap();
        let init = finetune_init(&pre, &multi, &tiny_model(), normalizer, 7).unwrap();
        assert_ne!(
            init.params.value("blocks.0.ccl.attn.wq").unwrap(),
            out.model.params.value("blocks.0.ccl.attn.wq").unwrap()
        );
        assert_eq!(out.model.config.normalizer, normalizer);
    }
    let mut tampered = pre.clone();
    let v = &mut tampered.params.value_mut("sap.u").unwrap().data_mut()[0];
    *v = f64::from_bits(v.to_bits() + 1);
    assert!(matches!(verify_frozen(&pre, &tampered), Err(Error::Contract(_))));
}

#[test]
fn single_channel_finetune_runs() {
    let clean = toy_set(2, 2, 1, 8);
    let pre = pretrain(&clean, &tiny_model(), &quick(1, 1), 8).unwrap().model;
    let out = finetune(&pre, &toy_set(2, 2, 3, 9), &tiny_model(), &quick(2, 1), Normalizer::Sparsemax, 9).unwrap();
    assert!(out.final_loss.is_finite());
    assert!(finetune(&pre, &toy_set(2, 2, 3, 9), &tiny_model(), &quick(1, 4), Normalizer::Softmax, 9).is_err());
}

#[test]
fn divergence_reports_the_step() {
    let data = toy_set(2, 4, 1, 10);
    let mut cfg = quick(5, 1);
    cfg.pretrain.learning_rate = 1e300;
    match pretrain(&data, &tiny_model(), &cfg, 10) {
        Err(Error::Training { step, .. }) => assert!(step < 10),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    let mut cfg = TrainConfig::default();
    cfg.validate().unwrap();
    cfg.finetune.channels = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.finetune.epochs = 0;
    assert!(cfg.validate().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"pretrain": {"epochs": 2, "lr": 1}}"#).is_err());
}

#[test]
fn curve_csv_has_one_row_per_step() {
    let data = toy_set(2, 4, 1, 11);
    let out = pretrain(&data, &tiny_model(), &quick(2, 1), 11).unwrap();
    assert_eq!(out.curve.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    write_curve(&path, &out.curve).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,epoch,loss,accuracy");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("3,1,"));
}
