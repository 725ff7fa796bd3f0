use std::collections::HashSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdlnet::geometry::{encode_targets, HeatmapStack, Quadrangle};
use sdlnet::model::{ModelConfig, SdlNet, SplitPoint};
use sdlnet::synth::{generate_dataset, DataConfig, Dataset, DocClass, Sample};
use sdlnet::training::{
    cell_id, dataset_loss, evaluate, evaluate_predictions, generalization_summary, mean_loss, nested_subset, report, results_csv,
    run_generalization_experiment, run_split_experiment, split_study_summary, train, CellKind, ExperimentConfig, ParamSelection,
    TrainConfig, TrainError, CSV_HEADER,
};

fn small_model() -> SdlNet {
    SdlNet::new(ModelConfig::new(32, 0.25), 7).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig { max_epochs: epochs, input_size: 32, batch_size: 8, ..TrainConfig::default() }
}

fn single_class(n: usize, seed: u64) -> Dataset {
    generate_dataset(&DataConfig { size: 32, ..DataConfig::single_class(DocClass::Id, n, seed) }).unwrap()
}

fn labels(samples: &[Sample]) -> Vec<Quadrangle> {
    samples.iter().map(|s| s.label).collect()
}

#[test]
fn perfect_heatmaps_score_near_one() {
    let data = generate_dataset(&DataConfig { n: 200, seed: 4, ..DataConfig::default() }).unwrap();
    let test: Vec<Sample> = data.classes.iter().flat_map(|c| c.splits.test.clone()).collect();
    let stacks: Vec<HeatmapStack> = test.iter().map(|s| encode_targets(&s.label, 64, 1.5)).collect();
    let m = evaluate_predictions(&stacks, &labels(&test), 0.3);
    assert_eq!(m.invalid_count, 0);
    assert_eq!(m.ious.len(), test.len());
    assert!(m.ious.iter().all(|&v| v > 0.95), "min IoU {:?}", m.ious.iter().cloned().fold(1.0, f64::min));
    assert!(m.iou_mean > 0.95 && m.iou_median > 0.95);
    assert!(m.score_min_mean > 0.5);
}

#[test]
fn zero_heatmaps_are_all_invalid() {
    let data = single_class(40, 3);
    let test = &data.classes[0].splits.test;
    let stacks = vec![HeatmapStack::zeros(32); test.len()];
    let m = evaluate_predictions(&stacks, &labels(test), 0.3);
    assert_eq!(m.invalid_count, test.len());
    assert_eq!(m.iou_mean, 0.0);
    assert_eq!(m.iou_median, 0.0);
    assert_eq!(m.score_min_mean, 0.0);
}

#[test]
fn metrics_ignore_test_order() {
    let data = single_class(60, 5);
    let test = data.classes[0].splits.test.clone();
    // Blurred targets shifted per sample give a spread of IoUs.
    let stacks: Vec<HeatmapStack> =
        test.iter().enumerate().map(|(i, s)| encode_targets(&s.label.translate(i as f64 * 0.7, 0.3), 32, 2.0)).collect();
    let a = evaluate_predictions(&stacks, &labels(&test), 0.3);
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let shuffled_stacks: Vec<HeatmapStack> = order.iter().map(|&i| stacks[i].clone()).collect();
    let shuffled_labels: Vec<Quadrangle> = order.iter().map(|&i| test[i].label).collect();
    let b = evaluate_predictions(&shuffled_stacks, &shuffled_labels, 0.3);
    assert_eq!(a.iou_mean.to_bits(), b.iou_mean.to_bits());
    assert_eq!(a.iou_std.to_bits(), b.iou_std.to_bits());
    assert_eq!(a.iou_median.to_bits(), b.iou_median.to_bits());
    assert_eq!(a.score_mean.to_bits(), b.score_mean.to_bits());
    assert_eq!(a.score_min_mean.to_bits(), b.score_min_mean.to_bits());
    assert_eq!(a.invalid_count, b.invalid_count);
}

#[test]
fn median_and_std_follow_their_definitions() {
    let data = single_class(60, 6);
    let test = data.classes[0].splits.test.clone();
    let stacks: Vec<HeatmapStack> =
        test.iter().enumerate().map(|(i, s)| encode_targets(&s.label.translate(0.0, i as f64 * 0.9), 32, 1.5)).collect();
    let m = evaluate_predictions(&stacks, &labels(&test), 0.3);
    let mut v = m.ious.clone();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let med = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!((m.iou_median - med).abs() < 1e-12);
    assert!((m.iou_mean - mean).abs() < 1e-12);
    assert!((m.iou_std - std).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&m.iou_mean) && (0.0..=1.0).contains(&m.iou_median));
}

#[test]
fn one_epoch_lowers_the_training_loss() {
    let data = single_class(50, 8);
    let mut model = small_model();
    let config = TrainConfig { augment: None, ..small_config(1) };
    let splits = &data.classes[0].splits;
    let h = train(&mut model, ParamSelection::All, splits, &config).unwrap();
    assert_eq!(h.epochs.len(), 1);
    let after = dataset_loss(&model, &splits.train, config.sigma(), true).unwrap();
    assert!(after < h.initial_train_loss, "{after} vs {}", h.initial_train_loss);
}

#[test]
fn equal_seeds_give_identical_histories() {
    let data = single_class(50, 9);
    let run = || {
        let mut model = small_model();
        let h = train(&mut model, ParamSelection::All, &data.classes[0].splits, &small_config(3)).unwrap();
        (h, model)
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    assert_eq!(h1.epochs, h2.epochs);
    assert_eq!(h1.initial_train_loss, h2.initial_train_loss);
    assert_eq!(h1.best_epoch, h2.best_epoch);
    assert!(m1.params().iter().zip(m2.params()).all(|(a, b)| a.value == b.value));
}

#[test]
fn decoder_finetune_leaves_encoder_untouched() {
    let data = single_class(50, 10);
    let splits = &data.classes[0].splits;
    let mut base = small_model();
    train(&mut base, ParamSelection::All, splits, &small_config(1)).unwrap();
    let probe: Vec<Sample> = splits.test.iter().take(4).cloned().collect();
    let images = sdlnet::tensor::Tensor::stack(&probe.iter().map(Sample::to_tensor).collect::<Vec<_>>()).unwrap();
    for split in SplitPoint::ALL {
        let mut tuned = small_model();
        tuned.init_from(&base).unwrap();
        let before = base.encoder_checksum(split);
        train(&mut tuned, ParamSelection::Decoder(split), splits, &small_config(2)).unwrap();
        assert_eq!(tuned.encoder_checksum(split), before, "{split:?}");
        assert_eq!(tuned.boundary_activations(&images, split).unwrap(), base.boundary_activations(&images, split).unwrap());
        assert!(tuned.params().iter().zip(base.params()).any(|(a, b)| a.value != b.value), "{split:?}: nothing trained");
    }
}

#[test]
fn early_stopping_restores_the_best_weights() {
    let data = single_class(50, 11);
    let splits = &data.classes[0].splits;
    for patience in [1, 2] {
        let mut model = small_model();
        let config = TrainConfig { patience, learning_rate: 3e-3, ..small_config(30) };
        let h = train(&mut model, ParamSelection::All, splits, &config).unwrap();
        assert!(h.epochs.len() <= h.best_epoch + patience);
        let min = h.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_val_loss, min);
        assert_eq!(h.epochs[h.best_epoch - 1].val_loss, min);
        let sigma = config.sigma();
        assert_eq!(mean_loss(&model, &splits.validation, sigma).unwrap(), min);
        if h.epochs.len() < 30 {
            assert!(h.stopped_early);
        }
    }
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let data = single_class(50, 12);
    let mut model = small_model();
    let last = model.params().len() - 1;
    model.params_mut()[last].value.data_mut()[0] = f32::NAN;
    let err = train(&mut model, ParamSelection::All, &data.classes[0].splits, &small_config(2)).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { epoch: 1, batch: 1 }), "{err}");
}

#[test]
fn bad_configs_and_data_are_rejected() {
    let data = single_class(50, 13);
    let splits = &data.classes[0].splits;
    let mut model = small_model();
    for config in [
        TrainConfig { learning_rate: 0.0, ..small_config(1) },
        TrainConfig { patience: 0, ..small_config(1) },
        TrainConfig { input_size: 64, ..small_config(1) },
    ] {
        assert!(matches!(train(&mut model, ParamSelection::All, splits, &config), Err(TrainError::Config(_))));
    }
    let mut empty = splits.clone();
    empty.validation.clear();
    assert!(matches!(train(&mut model, ParamSelection::All, &empty, &small_config(1)), Err(TrainError::Data(_))));
}

proptest! {
    #[test]
    fn fraction_subsets_are_nested(n in 1usize..300, seed in any::<u64>()) {
        let fractions = [0.2, 0.4, 0.6, 0.8, 1.0];
        let subsets: Vec<Vec<usize>> = fractions.iter().map(|&f| nested_subset(n, f, seed)).collect();
        for w in subsets.windows(2) {
            prop_assert!(w[0].len() <= w[1].len());
            prop_assert_eq!(&w[1][..w[0].len()], &w[0][..]);
        }
        prop_assert_eq!(subsets[4].len(), n);
        let distinct: HashSet<usize> = subsets[4].iter().copied().collect();
        prop_assert_eq!(distinct.len(), n);
        prop_assert!(!subsets[0].is_empty());
    }
}

#[test]
fn cell_ids_are_stable_and_distinct() {
    let classes = [DocClass::Id, DocClass::P];
    let a = cell_id("splits", CellKind::Finetune, &classes, Some(SplitPoint::Up1), Some(0.4), 1);
    assert_eq!(a, cell_id("splits", CellKind::Finetune, &classes, Some(SplitPoint::Up1), Some(0.4), 1));
    assert!(a.starts_with("ft-"));
    let others = [
        cell_id("splits", CellKind::Finetune, &classes, Some(SplitPoint::Up2), Some(0.4), 1),
        cell_id("splits", CellKind::Finetune, &classes, Some(SplitPoint::Up1), Some(0.6), 1),
        cell_id("splits", CellKind::Finetune, &classes, Some(SplitPoint::Up1), Some(0.4), 2),
        cell_id("splits", CellKind::Finetune, &[DocClass::Id], Some(SplitPoint::Up1), Some(0.4), 1),
    ];
    assert!(others.iter().all(|o| *o != a));
}

fn tiny_experiment() -> (Dataset, ExperimentConfig) {
    let data = generate_dataset(&DataConfig { n: 200, seed: 21, size: 32, ..DataConfig::default() }).unwrap();
    let train = TrainConfig { max_epochs: 1, input_size: 32, batch_size: 16, ..TrainConfig::default() };
    let config = ExperimentConfig {
        model: ModelConfig::new(32, 0.25),
        seed: 3,
        pretrain: train.clone(),
        finetune: train,
        record_timing: false,
        ..ExperimentConfig::default()
    };
    (data, config)
}

fn split_results() -> &'static (Dataset, ExperimentConfig, Vec<sdlnet::training::ExperimentResult>) {
    static CELL: OnceLock<(Dataset, ExperimentConfig, Vec<sdlnet::training::ExperimentResult>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (data, config) = tiny_experiment();
        let results = run_split_experiment(&data, &config, None).unwrap();
        (data, config, results)
    })
}

#[test]
fn split_experiment_has_25_rows_and_shrinking_decoders() {
    let (_, _, results) = split_results();
    assert_eq!(results.len(), 25);
    assert_eq!(results.iter().filter(|r| r.kind == CellKind::Generic).count(), 5);
    assert_eq!(results.iter().filter(|r| r.kind == CellKind::Finetune).count(), 20);
    let summary = split_study_summary(results);
    assert_eq!(summary.len(), 5);
    for class in &summary {
        assert_eq!(class.split_medians.len(), 4);
        let counts: Vec<usize> = class.split_trainable.iter().map(|&(_, n)| n).collect();
        assert!(counts.windows(2).all(|w| w[0] > w[1]), "{counts:?}");
    }
    let ids: HashSet<&str> = results.iter().map(|r| r.experiment_id.as_str()).collect();
    assert_eq!(ids.len(), 25);
    for r in results {
        assert!(!r.pretrain_classes.contains(&r.holdout));
        assert!(r.pretrain_classes.len() == 4);
    }
}

#[test]
fn report_is_byte_stable_and_well_formed() {
    let (_, _, results) = split_results();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files_a = report(results, a.path()).unwrap();
    let files_b = report(results, b.path()).unwrap();
    assert_eq!(files_a.len(), 3);
    for (fa, fb) in files_a.iter().zip(&files_b) {
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap(), "{}", fa.display());
    }
    let csv = std::fs::read_to_string(a.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), results.len() + 1);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 12));
    for f in files_a.iter().filter(|f| f.extension().is_some_and(|e| e == "svg")) {
        let text = std::fs::read_to_string(f).unwrap();
        check_xml(&text).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
    }
}

/// Minimal well-formedness check: balanced, properly nested tags with
/// quoted attributes and a single root.
fn check_xml(text: &str) -> Result<(), String> {
    let mut stack: Vec<String> = Vec::new();
    let mut roots = 0;
    let mut rest = text.trim();
    while let Some(start) = rest.find('<') {
        let end = rest[start..].find('>').ok_or("unterminated tag")? + start;
        let tag = &rest[start + 1..end];
        if !tag.matches('"').count().is_multiple_of(2) {
            return Err(format!("unbalanced quotes in <{tag}>"));
        }
        if let Some(name) = tag.strip_prefix('/') {
            let open = stack.pop().ok_or(format!("stray </{name}>"))?;
            if open != name.trim() {
                return Err(format!("</{name}> closes <{open}>"));
            }
        } else {
            let name = tag.split_whitespace().next().ok_or("empty tag")?.trim_end_matches('/').to_string();
            if stack.is_empty() {
                roots += 1;
            }
            if !tag.ends_with('/') {
                stack.push(name);
            }
        }
        rest = &rest[end + 1..];
    }
    if !stack.is_empty() {
        return Err(format!("unclosed {stack:?}"));
    }
    if roots != 1 {
        return Err(format!("{roots} root elements"));
    }
    Ok(())
}

#[test]
fn generalization_experiment_counts_and_resume() {
    let (data, config) = tiny_experiment();
    let cache = tempfile::tempdir().unwrap();
    let full = run_generalization_experiment(&data, &config, Some(cache.path())).unwrap();
    assert_eq!(full.iter().filter(|r| r.kind != CellKind::Finetune).count(), 17);
    assert_eq!(full.iter().filter(|r| r.kind == CellKind::Finetune).count(), 80);
    assert_eq!(full.iter().filter(|r| r.kind == CellKind::Scratch).count(), 1);
    assert!(full.iter().all(|r| r.holdout == DocClass::Dl));
    assert!(full.iter().filter(|r| r.kind == CellKind::Finetune).all(|r| r.split == Some(SplitPoint::Up1)));
    let summary = generalization_summary(&full);
    assert_eq!(summary.by_fraction.len(), 5);
    assert!(summary.by_fraction.iter().all(|(_, sizes)| sizes.iter().map(|s| s.0).collect::<Vec<_>>() == vec![1, 2, 3, 4]));
    assert!(summary.scratch_median.is_some() && summary.largest_combination_full_median.is_some());

    // Drop a pre-trained model and some fine-tunes, as if killed mid-way.
    let cells = cache.path().join("cells");
    let mut removed = 0;
    for r in full.iter().skip(10).step_by(7) {
        std::fs::remove_file(cells.join(format!("{}.json", r.experiment_id))).unwrap();
        removed += 1;
    }
    assert!(removed > 5);
    let resumed = run_generalization_experiment(&data, &config, Some(cache.path())).unwrap();
    assert_eq!(results_csv(&resumed), results_csv(&full));

    // A different configuration refuses the cache.
    let other = ExperimentConfig { seed: 4, ..config.clone() };
    assert!(run_generalization_experiment(&data, &other, Some(cache.path())).is_err());

    // Worker threads do not change the results.
    let parallel = run_generalization_experiment(&data, &ExperimentConfig { jobs: 3, ..config }, None).unwrap();
    assert_eq!(results_csv(&parallel), results_csv(&full));
}

#[test]
fn evaluate_runs_the_model() {
    let data = single_class(50, 14);
    let model = small_model();
    let m = evaluate(&model, &data.classes[0].splits.test, 0.3).unwrap();
    assert_eq!(m.ious.len(), data.classes[0].splits.test.len());
    assert!(m.invalid_count <= m.ious.len());
    assert!(m.ious.iter().all(|v| (0.0..=1.0).contains(v)));
}
