//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 5 to 7 train real models (tens of minutes in total on one CPU
//! core); criterion 8 repeats them and compares the result tables byte for
//! byte.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::random_convex_quad;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdlnet::cli::{rectify, RunConfig};
use sdlnet::geometry::{
    decode_quadrangle, default_sigma, encode_targets, estimate_homography_dlt, quad_iou, quad_iou_raster_oracle, Point2,
    Quadrangle,
};
use sdlnet::model::{save_checkpoint, ModelConfig, SdlNet, SplitPoint};
use sdlnet::synth::{generate_dataset, DataConfig, DocClass};
use sdlnet::tensor::{grad_check, BnMode, RunningStats, Tape, Tensor, Var};
use sdlnet::training::{
    evaluate, generalization_summary, results_csv, run_generalization_experiment, run_split_experiment, split_study_summary,
    train, CellKind, ExperimentConfig, ExperimentResult, ParamSelection, TrainConfig,
};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Writes straight to the stderr handle so the line survives output capture.
fn verdict(n: usize, name: &str, passed: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "acceptance criterion {n} [{name}]: {} in {:.1} s; {detail}\n",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Relative gap of `<A x, y>` against `<x, A^T y>` for the linear map `forward`.
fn adjoint_gap(forward: impl Fn(&mut Tape<f64>, Var) -> Var, x: Tensor<f64>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = forward(&mut tape, xv);
    let y = randn(tape.value(out).shape(), seed);
    let lhs = tape.value(out).dot(&y).unwrap();
    let grads = tape.backward_with(out, y).unwrap();
    let rhs = x.dot(grads.get(xv).unwrap()).unwrap();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

#[test]
fn criterion_1_autodiff() {
    let start = Instant::now();
    let mut worst_grad = 0.0f64;
    let mut failures = Vec::new();
    let mut check = |name: &str, r: sdlnet::tensor::GradCheckReport| {
        worst_grad = worst_grad.max(r.max_rel_error);
        if !r.passed() {
            failures.push(format!("{name}: {:.2e}", r.max_rel_error));
        }
    };
    for seed in SEEDS {
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let r = grad_check(
                |t, v| t.conv2d(v[0], v[1], stride, pad),
                &[randn(&[1, 2, 5, 5], seed), randn(&[3, 2, 3, 3], seed + 10)],
                1e-5,
            );
            check("conv2d", r.unwrap());
            let r = grad_check(
                |t, v| t.depthwise_conv2d(v[0], v[1], stride, pad),
                &[randn(&[2, 3, 5, 6], seed), randn(&[3, 1, 3, 3], seed + 20)],
                1e-5,
            );
            check("depthwise_conv2d", r.unwrap());
        }
        for stride in [1, 2] {
            let k = randn(&[2, 3, 2 * stride, 2 * stride], seed + 30);
            let r = grad_check(|t, v| t.conv2d_transpose(v[0], v[1], stride), &[randn(&[1, 2, 3, 3], seed), k], 1e-5);
            check("conv2d_transpose", r.unwrap());
        }
        for mode in [BnMode::Train, BnMode::Eval] {
            let stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
            let inputs = [randn(&[2, 3, 3, 3], seed), randn(&[3], seed + 1), randn(&[3], seed + 2)];
            let r = grad_check(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], &stats, mode, 1e-5)?.0), &inputs, 1e-5);
            check("batch_norm", r.unwrap());
        }
        // Kinks of relu6 at 0 and 6 have no derivative; keep samples away from them.
        let x = Tensor::<f64>::rand_uniform(&[40], -2.0, 8.0, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| {
            if v.abs() < 1e-2 || (v - 6.0).abs() < 1e-2 {
                v + 0.05
            } else {
                v
            }
        });
        check("relu6", grad_check(|t, v| Ok(t.relu6(v[0])), &[x], 1e-5).unwrap());
        check("sigmoid", grad_check(|t, v| Ok(t.sigmoid(v[0])), &[randn(&[3, 4], seed)], 1e-5).unwrap());
        let pair = [randn(&[2, 3, 2, 2], seed), randn(&[2, 3, 2, 2], seed + 1)];
        check("add", grad_check(|t, v| t.add(v[0], v[1]), &pair, 1e-5).unwrap());
        check("mse_loss", grad_check(|t, v| t.mse_loss(v[0], v[1]), &pair, 1e-5).unwrap());
        let r =
            grad_check(|t, v| t.concat_channels(v[0], v[1]), &[randn(&[1, 2, 3, 3], seed), randn(&[1, 1, 3, 3], seed + 2)], 1e-5);
        check("concat_channels", r.unwrap());
        let r = grad_check(|t, v| t.bias_add(v[0], v[1]), &[randn(&[2, 3, 2, 2], seed), randn(&[3], seed + 3)], 1e-5);
        check("bias_add", r.unwrap());
    }

    let mut worst_adj = 0.0f64;
    for seed in SEEDS {
        let k = randn(&[4, 3, 3, 3], seed + 1);
        let kd = randn(&[3, 1, 3, 3], seed + 2);
        let kt = randn(&[3, 5, 4, 4], seed + 3);
        let other = randn(&[1, 2, 4, 4], seed + 4);
        let bias = randn(&[3], seed + 5);
        let gaps = [
            adjoint_gap(
                |t, x| {
                    let kv = t.leaf(k.clone(), false);
                    t.conv2d(x, kv, 2, 1).unwrap()
                },
                randn(&[2, 3, 7, 7], seed),
                seed + 10,
            ),
            adjoint_gap(
                |t, x| {
                    let kv = t.leaf(kd.clone(), false);
                    t.depthwise_conv2d(x, kv, 2, 1).unwrap()
                },
                randn(&[2, 3, 6, 6], seed),
                seed + 11,
            ),
            adjoint_gap(
                |t, x| {
                    let kv = t.leaf(kt.clone(), false);
                    t.conv2d_transpose(x, kv, 2).unwrap()
                },
                randn(&[1, 3, 4, 4], seed),
                seed + 12,
            ),
            adjoint_gap(
                |t, x| {
                    let o = t.leaf(Tensor::zeros(other.shape()), false);
                    t.concat_channels(x, o).unwrap()
                },
                randn(&[1, 3, 4, 4], seed),
                seed + 13,
            ),
            adjoint_gap(
                |t, x| {
                    let b = t.leaf(Tensor::zeros(bias.shape()), false);
                    t.bias_add(x, b).unwrap()
                },
                randn(&[2, 3, 2, 2], seed),
                seed + 14,
            ),
            adjoint_gap(
                |t, x| {
                    let z = t.leaf(Tensor::zeros(&[2, 3, 2, 2]), false);
                    t.add(x, z).unwrap()
                },
                randn(&[2, 3, 2, 2], seed),
                seed + 15,
            ),
        ];
        worst_adj = gaps.iter().fold(worst_adj, |a, &b| a.max(b));
    }
    let elapsed = start.elapsed();
    let passed = failures.is_empty() && worst_adj <= 1e-10 && elapsed < Duration::from_secs(60);
    let detail =
        format!("max gradient rel. error {worst_grad:.2e} (tol 1e-5), max adjoint gap {worst_adj:.2e} (tol 1e-10) {failures:?}");
    verdict(1, "autodiff", passed, elapsed, &detail);
    assert!(passed, "{detail}");
}

#[test]
fn criterion_2_geometry_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_iou = 0.0f64;
    for _ in 0..100 {
        let a = random_convex_quad(&mut rng, Point2::new(0.0, 0.0), 10.0);
        let centre = Point2::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
        let b = random_convex_quad(&mut rng, centre, 10.0);
        worst_iou = worst_iou.max((quad_iou(&a, &b).value - quad_iou_raster_oracle(&a, &b, 512)).abs());
    }
    let mut worst_dlt = 0.0f64;
    for _ in 0..100 {
        let src = random_convex_quad(&mut rng, Point2::new(50.0, 40.0), 40.0);
        let centre = Point2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        let dst = random_convex_quad(&mut rng, centre, 60.0);
        let h = estimate_homography_dlt(&src.corners(), &dst.corners()).unwrap();
        for (s, d) in src.corners().iter().zip(dst.corners()) {
            worst_dlt = worst_dlt.max(h.apply(*s).distance(d));
        }
    }
    let square = Quadrangle::rectangle(0.0, 0.0, 1.0, 1.0);
    let third = quad_iou(&square, &square.translate(0.5, 0.0)).value;
    let elapsed = start.elapsed();
    let passed = worst_iou <= 1e-2 && worst_dlt < 1e-8 && (third - 1.0 / 3.0).abs() <= 1e-6 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "max |IoU - raster| {worst_iou:.2e} (tol 1e-2), max DLT error {worst_dlt:.2e} px (tol 1e-8), shifted square {third:.9}"
    );
    verdict(2, "geometry oracles", passed, elapsed, &detail);
    assert!(passed, "{detail}");
}

#[test]
fn criterion_3_heatmap_round_trip() {
    let start = Instant::now();
    let size = 64usize;
    let sigma = default_sigma(size);
    let margin = (3.0 * sigma).ceil() as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut worst, mut min_score, mut corners) = (0.0f64, 1.0f32, 0usize);
    for _ in 0..1000 {
        let mut pick = || {
            Point2::new(
                rng.random_range(margin..size as i64 - margin) as f64,
                rng.random_range(margin..size as i64 - margin) as f64,
            )
        };
        let quad = Quadrangle::new(pick(), pick(), pick(), pick());
        let stack = encode_targets(&quad, size, sigma);
        for refine in [false, true] {
            let det = decode_quadrangle(&stack, 0.5, refine);
            for (i, (got, want)) in det.quad.corners().iter().zip(quad.corners()).enumerate() {
                worst = worst.max(got.distance(want));
                min_score = min_score.min(det.scores[i]);
                corners += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = worst <= 0.5 && min_score == 1.0 && elapsed < Duration::from_secs(60);
    let detail = format!("{corners} corners (with and without refinement): max error {worst:.3} px, min score {min_score}");
    verdict(3, "heatmap round trip", passed, elapsed, &detail);
    assert!(passed, "{detail}");
}

#[test]
fn criterion_4_freezing_and_transfer() {
    let start = Instant::now();
    let data = generate_dataset(&DataConfig { n: 120, seed: 4, size: 32, ..DataConfig::default() }).unwrap();
    let all = data.select(&data.class_list()).unwrap();
    let holdout = data.select(&[DocClass::Rp]).unwrap();
    let config = ModelConfig::new(32, 0.25);
    let cfg = TrainConfig { max_epochs: 2, input_size: 32, learning_rate: 3e-3, ..TrainConfig::default() };
    let mut pretrained = SdlNet::new(config.clone(), 4).unwrap();
    train(&mut pretrained, ParamSelection::All, &all, &cfg).unwrap();
    let probe = sdlnet::tensor::Tensor::stack(&all.test.iter().take(4).map(|s| s.to_tensor()).collect::<Vec<_>>()).unwrap();
    let mut problems = Vec::new();
    for split in SplitPoint::ALL {
        let mut tuned = SdlNet::new(config.clone(), 40 + split as u64).unwrap();
        tuned.init_from(&pretrained).unwrap();
        train(&mut tuned, ParamSelection::Decoder(split), &holdout, &cfg).unwrap();
        let (enc, dec) = tuned.split_parameters(split);
        if enc.iter().any(|&i| tuned.params()[i].value != pretrained.params()[i].value) {
            problems.push(format!("{}: encoder parameters changed", split.name()));
        }
        if !dec.iter().any(|&i| tuned.params()[i].value != pretrained.params()[i].value) {
            problems.push(format!("{}: decoder did not train", split.name()));
        }
        for (i, info) in tuned.running_stats_info().iter().enumerate() {
            let (a, b) = (&tuned.running_stats()[i], &pretrained.running_stats()[i]);
            if info.part.in_encoder(split) && (a.mean != b.mean || a.var != b.var) {
                problems.push(format!("{}: running stats {} changed", split.name(), info.name));
            }
        }
        if tuned.boundary_activations(&probe, split).unwrap() != pretrained.boundary_activations(&probe, split).unwrap() {
            problems.push(format!("{}: boundary activations differ", split.name()));
        }
    }
    let elapsed = start.elapsed();
    let passed = problems.is_empty() && elapsed < Duration::from_secs(300);
    let detail = if problems.is_empty() {
        "all 4 splits: encoder weights, running stats and boundary activations bit-identical after fine-tuning".to_string()
    } else {
        problems.join("; ")
    };
    verdict(4, "freezing and weight transfer", passed, elapsed, &detail);
    assert!(passed, "{detail}");
}

/// Single-class convergence at 64 px with the default training config.
struct ToyRun {
    csv: String,
    median: f64,
    model: SdlNet,
    test: Vec<sdlnet::synth::Sample>,
    seconds: f64,
    epochs: usize,
}

fn toy_run() -> ToyRun {
    let start = Instant::now();
    let data = generate_dataset(&DataConfig::single_class(DocClass::Id, 1000, 5)).unwrap();
    let split = data.select(&[DocClass::Id]).unwrap();
    assert_eq!(split.train.len(), 700);
    let mut model = SdlNet::new(ModelConfig::default(), 5).unwrap();
    let config = TrainConfig { seed: 5, ..TrainConfig::default() };
    let history = train(&mut model, ParamSelection::All, &split, &config).unwrap();
    let metrics = evaluate(&model, &split.test, sdlnet::geometry::DEFAULT_SCORE_THRESHOLD).unwrap();
    let median = metrics.iou_median;
    let row = ExperimentResult {
        experiment_id: "toy-ID".into(),
        experiment: "toy".into(),
        kind: CellKind::Scratch,
        pretrain_classes: vec![DocClass::Id],
        holdout: DocClass::Id,
        split: None,
        finetune_fraction: None,
        metrics,
        train_seconds: None,
        epochs: history.epochs.len(),
        trainable_params: model.parameter_count(),
    };
    ToyRun {
        csv: results_csv(&[row]),
        median,
        model,
        test: split.test,
        seconds: start.elapsed().as_secs_f64(),
        epochs: history.epochs.len(),
    }
}

/// Settings shared by the reduced-scale experiment criteria: 32 px scenes,
/// the default channel plan and a raised learning rate.
fn desk_config(epochs: usize) -> ExperimentConfig {
    let train = TrainConfig { learning_rate: 3e-3, max_epochs: epochs, patience: 10, input_size: 32, ..TrainConfig::default() };
    ExperimentConfig {
        model: ModelConfig::new(32, 0.25),
        seed: 1,
        pretrain: train.clone(),
        finetune: train,
        record_timing: false,
        ..ExperimentConfig::default()
    }
}

fn split_study() -> (Vec<ExperimentResult>, f64) {
    let start = Instant::now();
    let data = generate_dataset(&DataConfig { n: 750, seed: 1, size: 32, ..DataConfig::default() }).unwrap();
    let results = run_split_experiment(&data, &desk_config(40), None).unwrap();
    (results, start.elapsed().as_secs_f64())
}

fn generalization_study() -> (Vec<ExperimentResult>, f64) {
    let start = Instant::now();
    let data = generate_dataset(&DataConfig { n: 1000, seed: 1, size: 32, ..DataConfig::default() }).unwrap();
    let results = run_generalization_experiment(&data, &desk_config(15), None).unwrap();
    (results, start.elapsed().as_secs_f64())
}

static TOY: OnceLock<ToyRun> = OnceLock::new();
static SPLITS: OnceLock<(Vec<ExperimentResult>, f64)> = OnceLock::new();
static GENERALIZATION: OnceLock<(Vec<ExperimentResult>, f64)> = OnceLock::new();

/// Rectifies test scenes through the command layer and returns the median
/// over scenes of the worst corner error, in pixels.
fn rectify_corner_error(model: &SdlNet, test: &[sdlnet::synth::Sample], dir: &Path) -> (f64, usize) {
    let ckpt = dir.join("toy.ckpt");
    save_checkpoint(model, &ckpt).unwrap();
    let mut errors = Vec::new();
    let mut invalid = 0;
    for (i, sample) in test.iter().enumerate() {
        let image = dir.join(format!("scene{i}.png"));
        sample.image.save(&image).unwrap();
        let config = RunConfig {
            model: Some(ckpt.clone()),
            image: Some(image),
            out: Some(dir.join(format!("rect{i}.png"))),
            ..RunConfig::default()
        };
        let report = rectify(&config, &mut std::io::sink()).unwrap();
        invalid += usize::from(!report.valid);
        let err = report.quad.corners().iter().zip(sample.label.corners()).map(|(a, b)| a.distance(b)).fold(0.0, f64::max);
        errors.push(err);
    }
    errors.sort_by(f64::total_cmp);
    (errors[errors.len() / 2], invalid)
}

#[test]
fn criterion_5_toy_convergence() {
    let run = TOY.get_or_init(toy_run);
    let passed = run.median >= 0.85 && run.seconds < 1800.0;
    let detail = format!(
        "ID class, 700 train samples at 64x64: median test IoU {:.4} (need >= 0.85) after {} epochs",
        run.median, run.epochs
    );
    verdict(5, "toy convergence", passed, Duration::from_secs_f64(run.seconds), &detail);

    let dir = tempfile::tempdir().unwrap();
    let (err, invalid) = rectify_corner_error(&run.model, &run.test, dir.path());
    let line = format!(
        "toy model through rectify: median worst-corner error {err:.2} px over {} scenes ({invalid} invalid)\n",
        run.test.len()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(passed, "{detail}");
    assert!(err <= 2.0, "{line}");
}

#[test]
fn criterion_6_split_study() {
    let (results, seconds) = SPLITS.get_or_init(split_study);
    let generic = results.iter().filter(|r| r.kind == CellKind::Generic).count();
    let tuned = results.iter().filter(|r| r.kind == CellKind::Finetune).count();
    let summary = split_study_summary(results);
    let decreasing = summary.len() == 5
        && summary.iter().all(|c| c.split_trainable.len() == 4 && c.split_trainable.windows(2).all(|w| w[0].1 > w[1].1));
    let beating: Vec<DocClass> = summary.iter().filter(|c| c.all_splits_beat_generic()).map(|c| c.holdout).collect();
    let medians: Vec<String> = summary
        .iter()
        .map(|c| {
            let splits: Vec<String> = c.split_medians.iter().map(|(_, m)| format!("{m:.3}")).collect();
            format!("{} generic {:.3} splits [{}]", c.holdout, c.generic_median, splits.join(" "))
        })
        .collect();
    let passed = results.len() == 25 && generic == 5 && tuned == 20 && decreasing && beating.len() >= 4;
    let detail = format!(
        "{} rows ({generic} generic + {tuned} fine-tuned), decoder sizes strictly decreasing: {decreasing}, all splits beat generic for {}/5 classes; {}",
        results.len(),
        beating.len(),
        medians.join("; ")
    );
    verdict(6, "split study", passed, Duration::from_secs_f64(*seconds), &detail);
    assert!(passed, "{detail}");
}

#[test]
fn criterion_7_generalization() {
    let (results, seconds) = GENERALIZATION.get_or_init(generalization_study);
    let full = results.iter().filter(|r| r.kind != CellKind::Finetune).count();
    let tuned = results.iter().filter(|r| r.kind == CellKind::Finetune).count();
    let summary = generalization_summary(results);
    let scratch = summary.scratch_median.unwrap_or(f64::NAN);
    let best = summary.largest_combination_full_median.unwrap_or(f64::NAN);
    let monotone = summary.monotone_fractions();
    let table: Vec<String> = summary
        .by_fraction
        .iter()
        .map(|(f, v)| format!("{:.0}%: {}", f * 100.0, v.iter().map(|(_, m)| format!("{m:.3}")).collect::<Vec<_>>().join(" ")))
        .collect();
    let passed = best > scratch && monotone >= 4 && full == 17 && tuned == 80;
    let detail = format!(
        "4-class + 100% median {best:.4} vs scratch {scratch:.4}; monotone in combination size for {monotone}/5 fractions [{}]; {full} pre-trained + {tuned} fine-tuned",
        table.join("; ")
    );
    verdict(7, "generalization trend", passed, Duration::from_secs_f64(*seconds), &detail);
    assert!(passed, "{detail}");
}

#[test]
fn criterion_8_determinism() {
    let first = [
        TOY.get_or_init(toy_run).csv.clone(),
        results_csv(&SPLITS.get_or_init(split_study).0),
        results_csv(&GENERALIZATION.get_or_init(generalization_study).0),
    ];
    let start = Instant::now();
    let second = [toy_run().csv, results_csv(&split_study().0), results_csv(&generalization_study().0)];
    let same: Vec<bool> = first.iter().zip(&second).map(|(a, b)| a.as_bytes() == b.as_bytes()).collect();
    let passed = same.iter().all(|&s| s);
    let detail = format!(
        "re-run results.csv byte-identical: toy {}, splits {}, generalization {} ({} bytes total)",
        same[0],
        same[1],
        same[2],
        first.iter().map(String::len).sum::<usize>()
    );
    verdict(8, "determinism", passed, start.elapsed(), &detail);
    assert!(passed, "{detail}");
}
