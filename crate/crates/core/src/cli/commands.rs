use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::Serialize;

use super::{io_err, CliError, Outcome, Result, RunConfig};
use crate::geometry::{decode_quadrangle, rectify as rectify_image, HeatmapStack, Point2, Quadrangle};
use crate::model::{load_checkpoint, save_checkpoint, SdlNet};
use crate::synth::{generate_dataset, image_to_tensor, load_dataset, mix_seed, Dataset, DatasetSplit, DocClass};
use crate::tensor::Tensor;
use crate::training::{
    evaluate, nested_subset, report, run_generalization_experiment, run_split_experiment, train_with_progress, ParamSelection,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Splits,
    Generalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Finetune,
    Eval,
    Rectify,
    Experiment(ExperimentKind),
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Rectify => "rectify",
            Command::Experiment(ExperimentKind::Splits) => "experiment splits",
            Command::Experiment(ExperimentKind::Generalization) => "experiment generalization",
        }
    }
}

pub fn execute(command: Command, config: &RunConfig, log: &mut dyn Write) -> Result<Outcome> {
    match command {
        Command::GenData => gen_data(config, log),
        Command::Train => train(config, log),
        Command::Finetune => finetune(config, log),
        Command::Eval => eval(config, log),
        Command::Rectify => rectify(config, log).map(|r| if r.valid { Outcome::Success } else { Outcome::DetectionFailed }),
        Command::Experiment(kind) => experiment(kind, config, log),
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| CliError::Config(format!("--{flag} is required")))
}

fn say(log: &mut dyn Write, text: impl AsRef<str>) {
    let _ = writeln!(log, "{}", text.as_ref());
}

/// `<file stem>.config.txt` beside a file output, `run_config.txt` inside
/// a directory output.
fn write_resolved(config: &RunConfig, command: Command, target: &Path, is_dir: bool) -> Result<PathBuf> {
    let path = if is_dir { target.join("run_config.txt") } else { target.with_extension("config.txt") };
    let text = format!("# resolved configuration of `sdlnet {}`\n{}", command.name(), config.to_text());
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io_err(p)),
        _ => Ok(()),
    }
}

fn open_dataset(config: &RunConfig) -> Result<(PathBuf, Dataset)> {
    let dir = required(&config.data_dir, "data")?;
    Ok((dir.to_path_buf(), load_dataset(dir)?))
}

fn require_class(data: &Dataset, class: DocClass, dir: &Path) -> Result<DatasetSplit> {
    data.class(class).cloned().ok_or_else(|| CliError::Input {
        path: dir.display().to_string(),
        reason: format!("dataset has no class {class}; it has {}", DocClass::list_name(&data.class_list())),
    })
}

/// Generates a dataset into a new or empty directory.
pub fn gen_data(config: &RunConfig, log: &mut dyn Write) -> Result<Outcome> {
    let out = required(&config.out, "out")?;
    if fs::read_dir(out).is_ok_and(|mut d| d.next().is_some()) {
        return Err(CliError::Input { path: out.display().to_string(), reason: "output directory is not empty".into() });
    }
    let dataset = generate_dataset(&config.data)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    crate::synth::save_dataset(&dataset, out)?;
    write_resolved(config, Command::GenData, out, true)?;
    for (class, counts) in dataset.manifest().counts {
        say(log, format!("{class:>4}: {} train / {} validation / {} test", counts[0], counts[1], counts[2]));
    }
    say(log, format!("wrote {} samples to {}", dataset.classes.iter().map(|c| c.splits.len()).sum::<usize>(), out.display()));
    Ok(Outcome::Success)
}

fn history_csv(history: &crate::training::History) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for e in &history.epochs {
        let _ = writeln!(s, "{},{:.8},{:.8}", e.epoch, e.train_loss, e.val_loss);
    }
    s
}

fn fit(
    model: &mut SdlNet,
    selection: ParamSelection,
    data: &DatasetSplit,
    config: &crate::training::TrainConfig,
    out: &Path,
    log: &mut dyn Write,
) -> Result<()> {
    let history = train_with_progress(model, selection, data, config, |e| {
        say(log, format!("epoch {:4}  train {:.6}  val {:.6}", e.epoch, e.train_loss, e.val_loss));
    })?;
    create_parent(out)?;
    save_checkpoint(model, out)?;
    let hist = out.with_extension("history.csv");
    fs::write(&hist, history_csv(&history)).map_err(io_err(&hist))?;
    say(
        log,
        format!(
            "best epoch {} of {} (val {:.6}); wrote {}",
            history.best_epoch,
            history.epochs.len(),
            history.best_val_loss,
            out.display()
        ),
    );
    Ok(())
}

/// Trains every parameter of a fresh model on the selected classes.
pub fn train(config: &RunConfig, log: &mut dyn Write) -> Result<Outcome> {
    let out = required(&config.out, "out")?;
    let (dir, dataset) = open_dataset(config)?;
    let classes = config.classes.clone().unwrap_or_else(|| dataset.class_list());
    for &c in &classes {
        require_class(&dataset, c, &dir)?;
    }
    let data = dataset.select(&classes)?;
    let mut run = config.clone();
    run.data = dataset.config.clone();
    run.data.seed = config.seed;
    let mut train_cfg = config.train.clone();
    train_cfg.input_size = dataset.config.size as usize;
    let mut model = SdlNet::new(run.model_config(), config.seed)?;
    say(
        log,
        format!(
            "training {} parameters on {} ({} samples)",
            model.parameter_count(),
            DocClass::list_name(&classes),
            data.train.len()
        ),
    );
    fit(&mut model, ParamSelection::All, &data, &train_cfg, out, log)?;
    write_resolved(&run, Command::Train, out, false)?;
    Ok(Outcome::Success)
}

/// Fine-tunes the decoder of `--init` on a fraction of one class, with the
/// encoder frozen at `--split`.
pub fn finetune(config: &RunConfig, log: &mut dyn Write) -> Result<Outcome> {
    let out = required(&config.out, "out")?;
    let init = required(&config.init, "init")?;
    let class = config.class.ok_or_else(|| CliError::Config("--class is required".into()))?;
    if !(config.fraction > 0.0 && config.fraction <= 100.0) {
        return Err(CliError::Config(format!("fraction {} must lie in (0, 100]", config.fraction)));
    }
    let mut model = load_checkpoint(init)?;
    let (dir, dataset) = open_dataset(config)?;
    let size = model.config().input_size;
    if dataset.config.size as usize != size {
        return Err(CliError::Input {
            path: dir.display().to_string(),
            reason: format!("images are {0}x{0} but {1} expects {size}x{size}", dataset.config.size, init.display()),
        });
    }
    let holdout = require_class(&dataset, class, &dir)?;
    let keep = nested_subset(holdout.train.len(), config.fraction / 100.0, mix_seed(config.seed, class.index() as u64));
    let data = DatasetSplit {
        train: keep.iter().map(|&i| holdout.train[i].clone()).collect(),
        validation: holdout.validation,
        test: Vec::new(),
    };
    let mut train_cfg = config.finetune.clone();
    train_cfg.input_size = size;
    say(
        log,
        format!(
            "fine-tuning {} on {class} ({} samples, {}%), encoder frozen at {}",
            init.display(),
            data.train.len(),
            config.fraction,
            config.split.name()
        ),
    );
    fit(&mut model, ParamSelection::Decoder(config.split), &data, &train_cfg, out, log)?;
    let mut run = config.clone();
    run.data = dataset.config.clone();
    run.data.seed = config.seed;
    write_resolved(&run, Command::Finetune, out, false)?;
    Ok(Outcome::Success)
}

pub const EVAL_CSV_HEADER: &str = "model,class,samples,iou_mean,iou_std,iou_median,score_mean,score_min_mean,invalid_count";

/// Test-set metrics per class, printed and written as CSV (default
/// `<model stem>.eval.csv`).
pub fn eval(config: &RunConfig, log: &mut dyn Write) -> Result<Outcome> {
    let model_path = required(&config.model, "model")?;
    let model = load_checkpoint(model_path)?;
    let (dir, dataset) = open_dataset(config)?;
    let classes = match config.class {
        Some(c) => vec![c],
        None => dataset.class_list(),
    };
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    for class in classes {
        let test = require_class(&dataset, class, &dir)?.test;
        let m = evaluate(&model, &test, config.score_threshold)?;
        say(
            log,
            format!(
                "{class:>4}: IoU mean {:.4} std {:.4} median {:.4}; score {:.4} (min-corner {:.4}); invalid {}/{}",
                m.iou_mean,
                m.iou_std,
                m.iou_median,
                m.score_mean,
                m.score_min_mean,
                m.invalid_count,
                test.len()
            ),
        );
        let _ = writeln!(
            csv,
            "{},{class},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            model_path.display(),
            test.len(),
            m.iou_mean,
            m.iou_std,
            m.iou_median,
            m.score_mean,
            m.score_min_mean,
            m.invalid_count
        );
    }
    let out = config.out.clone().unwrap_or_else(|| model_path.with_extension("eval.csv"));
    create_parent(&out)?;
    fs::write(&out, csv).map_err(io_err(&out))?;
    write_resolved(config, Command::Eval, &out, false)?;
    say(log, format!("wrote {}", out.display()));
    Ok(Outcome::Success)
}

/// Contents of the JSON sidecar written beside a rectified image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RectifyReport {
    /// `model` or `argument`.
    pub source: &'static str,
    /// Corners in original image pixels.
    pub quad: Quadrangle,
    /// Per-corner peak values (TL, TR, BL, BR); absent for a given quadrangle.
    pub scores: Option<[f32; 4]>,
    pub document_score: Option<f32>,
    pub valid: bool,
    pub image_size: [u32; 2],
    /// Absent when nothing was rectified.
    pub output_size: Option<[u32; 2]>,
}

/// Maps a point from a `from`-pixel square image to a `to_w x to_h` image
/// that it was resized from, keeping pixel centres aligned.
fn unresize(p: Point2, from: u32, to_w: u32, to_h: u32) -> Point2 {
    Point2 { x: (p.x + 0.5) * to_w as f64 / from as f64 - 0.5, y: (p.y + 0.5) * to_h as f64 / from as f64 - 0.5 }
}

fn detect(model: &SdlNet, image: &RgbImage, threshold: f32) -> Result<(Quadrangle, [f32; 4], bool)> {
    let s = model.config().input_size as u32;
    let small = imageops::resize(image, s, s, FilterType::Triangle);
    let batch = Tensor::stack(&[image_to_tensor(&small)]).map_err(crate::model::ModelError::from)?;
    let heatmaps = model.predict(&batch)?;
    let det = decode_quadrangle(&HeatmapStack::from_batch(&heatmaps, 0), threshold, true);
    let quad = det.quad.map(|p| unresize(p, s, image.width(), image.height()));
    let valid = det.valid && quad.is_well_formed();
    Ok((quad, det.scores, valid))
}

/// Height of the rectified image when none is given: the longer of the
/// two vertical edges.
fn natural_height(q: &Quadrangle) -> u32 {
    let h = q.tl.distance(q.bl).max(q.tr.distance(q.br)).round();
    (h as u32).max(2)
}

/// Rectifies `--image` with `--quad` or the model's detection. The sidecar
/// `<out stem>.json` is written even for an invalid detection, in which
/// case no image is produced.
pub fn rectify(config: &RunConfig, log: &mut dyn Write) -> Result<RectifyReport> {
    let image_path = required(&config.image, "image")?;
    let out = required(&config.out, "out")?;
    let image = image::open(image_path)
        .map_err(|e| CliError::Input { path: image_path.display().to_string(), reason: format!("unreadable image: {e}") })?
        .to_rgb8();
    let (source, quad, scores, valid) = match (&config.quad, &config.model) {
        (Some(q), _) => {
            if !q.is_simple() {
                return Err(CliError::Config(format!("--quad {} is not a simple quadrangle", q.to_json())));
            }
            ("argument", *q, None, true)
        }
        (None, Some(m)) => {
            let model = load_checkpoint(m)?;
            let (quad, scores, valid) = detect(&model, &image, config.score_threshold)?;
            ("model", quad, Some(scores), valid)
        }
        (None, None) => return Err(CliError::Config("either --model or --quad is required".into())),
    };
    create_parent(out)?;
    let mut output_size = None;
    if valid {
        let height = config.height.unwrap_or_else(|| natural_height(&quad));
        let (rectified, _) = rectify_image(&image, &quad, height)?;
        rectified
            .save(out)
            .map_err(|e| CliError::Input { path: out.display().to_string(), reason: format!("cannot write image: {e}") })?;
        output_size = Some([rectified.width(), rectified.height()]);
    }
    let report = RectifyReport {
        source,
        quad,
        scores,
        document_score: scores.map(|s| s.iter().copied().fold(f32::INFINITY, f32::min)),
        valid,
        image_size: [image.width(), image.height()],
        output_size,
    };
    let sidecar = out.with_extension("json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(&sidecar, text).map_err(io_err(&sidecar))?;
    write_resolved(config, Command::Rectify, out, false)?;
    if valid {
        say(log, format!("quadrangle {}; wrote {}", quad.to_json(), out.display()));
    } else {
        say(log, format!("no valid document detected (scores {scores:?}); wrote {}", sidecar.display()));
    }
    Ok(report)
}

/// Runs one experiment protocol with its cell cache, result table and
/// plots under `--out`. Data come from `--data` or are generated from the
/// data keys.
pub fn experiment(kind: ExperimentKind, config: &RunConfig, log: &mut dyn Write) -> Result<Outcome> {
    let out = required(&config.out, "out")?;
    let mut run = config.clone();
    let dataset = match &config.data_dir {
        Some(dir) => {
            let d = load_dataset(dir)?;
            run.data = d.config.clone();
            d
        }
        None => generate_dataset(&config.data)?,
    };
    let mut exp = run.experiment_config();
    exp.model = crate::model::ModelConfig::new(dataset.config.size as usize, config.width);
    exp.pretrain.input_size = exp.model.input_size;
    exp.finetune.input_size = exp.model.input_size;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_resolved(&run, Command::Experiment(kind), out, true)?;
    let results = match kind {
        ExperimentKind::Splits => run_split_experiment(&dataset, &exp, Some(out))?,
        ExperimentKind::Generalization => run_generalization_experiment(&dataset, &exp, Some(out))?,
    };
    for r in &results {
        say(
            log,
            format!(
                "{} {:>16} {:>7} {:>5}  median IoU {:.4}",
                r.experiment_id,
                DocClass::list_name(&r.pretrain_classes),
                r.split.map_or("full", |s| s.name()),
                r.finetune_fraction.map(|f| format!("{:.0}%", f * 100.0)).unwrap_or_default(),
                r.metrics.iou_median
            ),
        );
    }
    for path in report(&results, out)? {
        say(log, format!("wrote {}", path.display()));
    }
    Ok(Outcome::Success)
}
