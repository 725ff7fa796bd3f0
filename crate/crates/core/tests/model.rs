use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdlnet::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelError, Part, SdlNet, SplitPoint};
use sdlnet::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

fn images(batch: usize, size: usize, seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(&[batch, 3, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn targets(batch: usize, size: usize, seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(&[batch, 4, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One Adam step on MSE against `target`, updating running stats.
fn train_step(model: &mut SdlNet, state: &mut AdamState<f32>, x: &Tensor<f32>, target: &Tensor<f32>) -> f32 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let pass = model.forward(&mut tape, xv, true).unwrap();
    let tv = tape.leaf(target.clone(), false);
    let loss = tape.mse_loss(pass.heatmaps, tv).unwrap();
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss).unwrap();
    for (i, v) in pass.bindings.iter().enumerate() {
        match grads.take(*v) {
            Some(g) => model.params_mut()[i].grad = g,
            None => model.params_mut()[i].zero_grad(),
        }
    }
    model.apply_bn_updates(&pass.bn_updates);
    adam_step(model.params_mut(), state).unwrap();
    value
}

/// Parameter count of the channel plan, computed from layer shapes alone.
fn expected_parameter_count(c: &ModelConfig) -> usize {
    let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let dw_bn = |ch: usize| ch * 9 + 2 * ch;
    let repeats = [1, 2, 2, 2, 1];
    let expansion = [1, 6, 6, 6, 6];
    let mut total = conv_bn(3, c.stem_channels, 3);
    let mut cin = c.stem_channels;
    for s in 0..5 {
        for _ in 0..repeats[s] {
            let hidden = cin * expansion[s];
            if expansion[s] != 1 {
                total += conv_bn(cin, hidden, 1);
            }
            total += dw_bn(hidden) + conv_bn(hidden, c.backbone_stage_channels[s], 1);
            cin = c.backbone_stage_channels[s];
        }
    }
    for u in 0..4 {
        let cout = c.upsampler_channels[u];
        total += cin * cout * 16 + conv_bn(cout + c.backbone_stage_channels[3 - u], cout, 1);
        cin = cout;
    }
    total + cin * 4 * 16 + 4
}

#[test]
fn default_forward_shape() {
    let model = SdlNet::new(ModelConfig::default(), 0).unwrap();
    let y = model.predict(&images(1, 64, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 4, 64, 64]);
}

#[test]
fn output_size_matches_input_size_for_other_configs() {
    for (size, width) in [(32, 0.25), (96, 0.25), (64, 0.5)] {
        let model = SdlNet::new(ModelConfig::new(size, width), 3).unwrap();
        assert_eq!(model.predict(&images(2, size, 2)).unwrap().shape(), &[2, 4, size, size]);
    }
}

#[test]
fn equal_seeds_build_identical_models() {
    let a = SdlNet::new(ModelConfig::default(), 42).unwrap();
    let b = SdlNet::new(ModelConfig::default(), 42).unwrap();
    let c = SdlNet::new(ModelConfig::default(), 43).unwrap();
    assert!(a.params().iter().zip(b.params()).all(|(p, q)| p.value == q.value));
    assert!(a.params().iter().zip(c.params()).any(|(p, q)| p.value != q.value));
}

#[test]
fn parameter_count_is_pinned() {
    let model = SdlNet::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(model.parameter_count(), expected_parameter_count(model.config()));
    assert_eq!(model.parameter_count(), 167_188);
    for width in [0.5, 1.0] {
        let m = SdlNet::new(ModelConfig::new(64, width), 0).unwrap();
        assert_eq!(m.parameter_count(), expected_parameter_count(m.config()));
    }
}

#[test]
fn heatmaps_start_near_prior_and_stay_in_unit_interval() {
    let model = SdlNet::new(ModelConfig::default(), 5).unwrap();
    let y = model.predict(&images(2, 64, 9)).unwrap();
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
    assert!(mean < 0.1, "initial mean heatmap {mean}");
}

#[test]
fn split_partition_and_monotonicity() {
    let model = SdlNet::new(ModelConfig::default(), 0).unwrap();
    let total = model.parameter_count();
    let mut last = usize::MAX;
    for split in SplitPoint::ALL {
        let (enc, dec) = model.split_parameters(split);
        let mut all: Vec<usize> = enc.iter().chain(&dec).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..model.params().len()).collect::<Vec<_>>(), "{split}");
        assert_eq!(model.count(&enc) + model.count(&dec), total);
        let d = model.count(&dec);
        assert!(d < last, "decoder count {d} not below {last} at split {split}");
        last = d;
    }
}

#[test]
fn middle_split_encoder_is_the_backbone() {
    let model = SdlNet::new(ModelConfig::default(), 0).unwrap();
    let (enc, dec) = model.split_parameters(SplitPoint::Middle0);
    assert!(enc.iter().all(|&i| model.param_info()[i].part == Part::Backbone));
    assert!(dec.iter().all(|&i| model.param_info()[i].part != Part::Backbone));
}

#[test]
fn up3_decoder_is_last_upsampler_and_head() {
    let model = SdlNet::new(ModelConfig::default(), 0).unwrap();
    let (_, dec) = model.split_parameters(SplitPoint::Up3);
    let parts: Vec<Part> = dec.iter().map(|&i| model.param_info()[i].part).collect();
    assert!(parts.iter().all(|p| matches!(p, Part::Upsampler(3) | Part::Head)));
    assert!(parts.contains(&Part::Upsampler(3)) && parts.contains(&Part::Head));
    // 16*8*4*4 transpose + (8+8)*8 fuse + 2*8 bn, then 8*4*4*4 head + 4 bias
    assert_eq!(model.count(&dec), 2048 + 128 + 16 + 512 + 4);
}

#[test]
fn frozen_encoder_survives_training_steps() {
    let mut model = SdlNet::new(ModelConfig::default(), 11).unwrap();
    model.freeze_encoder(SplitPoint::Up1);
    let before = model.clone();
    let checksum = model.encoder_checksum(SplitPoint::Up1);
    let mut state = AdamState::new(model.params(), AdamConfig::default());
    for step in 0..10 {
        train_step(&mut model, &mut state, &images(2, 64, step), &targets(2, 64, 100 + step));
        if step == 0 {
            let (_, dec) = model.split_parameters(SplitPoint::Up1);
            assert!(dec.iter().any(|&i| model.params()[i].value != before.params()[i].value));
        }
    }
    let (enc, _) = model.split_parameters(SplitPoint::Up1);
    for i in enc {
        assert_eq!(model.params()[i].value, before.params()[i].value, "{}", model.param_info()[i].name);
    }
    for (i, info) in model.running_stats_info().iter().enumerate() {
        let (a, b) = (&model.running_stats()[i], &before.running_stats()[i]);
        if info.part.in_encoder(SplitPoint::Up1) {
            assert!(a.mean == b.mean && a.var == b.var, "{}", info.name);
        }
    }
    assert_eq!(model.encoder_checksum(SplitPoint::Up1), checksum);
}

#[test]
fn init_from_copies_everything() {
    let mut source = SdlNet::new(ModelConfig::default(), 1).unwrap();
    let mut state = AdamState::new(source.params(), AdamConfig::default());
    train_step(&mut source, &mut state, &images(2, 64, 1), &targets(2, 64, 2));
    let mut target = SdlNet::new(ModelConfig::default(), 2).unwrap();
    target.init_from(&source).unwrap();
    let x = images(2, 64, 3);
    assert_eq!(source.predict(&x).unwrap(), target.predict(&x).unwrap());

    let other = SdlNet::new(ModelConfig::new(64, 0.5), 1).unwrap();
    assert!(matches!(target.init_from(&other), Err(ModelError::Mismatch(_))));
}

#[test]
fn fine_tuning_keeps_boundary_activations() {
    let mut pretrained = SdlNet::new(ModelConfig::default(), 4).unwrap();
    let mut state = AdamState::new(pretrained.params(), AdamConfig::default());
    for step in 0..2 {
        train_step(&mut pretrained, &mut state, &images(2, 64, step), &targets(2, 64, step + 50));
    }
    let probe = images(2, 64, 77);
    for split in SplitPoint::ALL {
        let mut tuned = SdlNet::new(ModelConfig::default(), 99).unwrap();
        tuned.init_from(&pretrained).unwrap();
        tuned.freeze_encoder(split);
        let mut state = AdamState::new(tuned.params(), AdamConfig::default());
        for step in 0..3 {
            train_step(&mut tuned, &mut state, &images(2, 64, step + 10), &targets(2, 64, step + 20));
        }
        let a = pretrained.boundary_activations(&probe, split).unwrap();
        let b = tuned.boundary_activations(&probe, split).unwrap();
        assert_eq!(a, b, "split {split}");
        assert_ne!(pretrained.predict(&probe).unwrap(), tuned.predict(&probe).unwrap());
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let model = SdlNet::new(ModelConfig::default(), 6).unwrap();
    let mut seen = vec![false; model.params().len()];
    for seed in 0..5 {
        let mut tape = Tape::new();
        let x = tape.leaf(images(2, 64, seed), false);
        let pass = model.forward(&mut tape, x, true).unwrap();
        let t = tape.leaf(targets(2, 64, seed + 1000), false);
        let loss = tape.mse_loss(pass.heatmaps, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (i, v) in pass.bindings.iter().enumerate() {
            if grads.get(*v).is_some_and(|g| g.data().iter().any(|&d| d != 0.0)) {
                seen[i] = true;
            }
        }
    }
    let missing: Vec<&str> =
        seen.iter().enumerate().filter(|(_, s)| !**s).map(|(i, _)| model.param_info()[i].name.as_str()).collect();
    assert!(missing.is_empty(), "no gradient for {missing:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sdln");
    let mut model = SdlNet::new(ModelConfig::default(), 8).unwrap();
    let mut state = AdamState::new(model.params(), AdamConfig::default());
    train_step(&mut model, &mut state, &images(2, 64, 1), &targets(2, 64, 2));
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let x = images(1, 64, 5);
    assert_eq!(model.predict(&x).unwrap(), loaded.predict(&x).unwrap());
    assert_eq!(model.encoder_checksum(SplitPoint::Middle0), loaded.encoder_checksum(SplitPoint::Middle0));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sdln");
    save_checkpoint(&SdlNet::new(ModelConfig::default(), 8).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = dir.path().join("truncated.sdln");
    std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(load_checkpoint(&truncated), Err(ModelError::Checkpoint { .. })));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    let corrupt = dir.path().join("corrupt.sdln");
    std::fs::write(&corrupt, &flipped).unwrap();
    let err = load_checkpoint(&corrupt).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");

    let mut versioned = bytes.clone();
    versioned[4..8].copy_from_slice(&99u32.to_le_bytes());
    let future = dir.path().join("future.sdln");
    std::fs::write(&future, &versioned).unwrap();
    let err = load_checkpoint(&future).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn checkpoint_from_other_width_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.sdln");
    save_checkpoint(&SdlNet::new(ModelConfig::new(64, 0.5), 1).unwrap(), &path).unwrap();
    let mut model = SdlNet::new(ModelConfig::default(), 1).unwrap();
    let err = model.load_weights(&path).unwrap_err().to_string();
    assert!(err.contains("config mismatch"), "{err}");
}
