use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::median;
use super::{evaluate, train, EvalMetrics, ParamSelection, Result, TrainConfig, TrainError};
use crate::geometry::DEFAULT_SCORE_THRESHOLD;
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, SdlNet, SplitPoint};
use crate::synth::{mix_seed, Dataset, DatasetSplit, DocClass};

/// Settings shared by both experiment protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Root of every model-initialization and shuffling seed.
    pub seed: u64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub score_threshold: f32,
    /// Fine-tune fractions of the holdout train set, ascending.
    pub fractions: Vec<f64>,
    /// Holdout class of the generalization study.
    pub holdout: DocClass,
    /// Split of the generalization study.
    pub split: SplitPoint,
    /// Without it `train_seconds` is left empty, keeping results byte-stable.
    pub record_timing: bool,
    /// Worker threads for independent cells.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::finetune_default(),
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            holdout: DocClass::Dl,
            split: SplitPoint::Up1,
            record_timing: true,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    /// Everything that influences results; `jobs` and timing do not.
    fn fingerprint(&self, data: &Dataset) -> String {
        format!(
            "{:?}\n{:?}\n{}\n{:?}\n{:?}\n{}\n{:?}\n{}\n{}\n",
            data.config,
            self.model,
            self.seed,
            self.pretrain,
            self.finetune,
            self.score_threshold,
            self.fractions,
            self.holdout,
            self.split
        )
    }

    fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(TrainError::Config(format!("fractions must lie in (0, 1], got {:?}", self.fractions)));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrainError::Config(format!("fractions must be strictly increasing, got {:?}", self.fractions)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// Full model trained on every class except the holdout.
    Generic,
    /// Full model pre-trained on a class combination.
    Pretrain,
    /// Full model trained on the holdout class alone.
    Scratch,
    /// Decoder fine-tuned on the holdout class from a full model.
    Finetune,
}

impl CellKind {
    fn tag(self) -> &'static str {
        match self {
            CellKind::Generic => "gen",
            CellKind::Pretrain => "pre",
            CellKind::Scratch => "scr",
            CellKind::Finetune => "ft",
        }
    }
}

/// One trained and evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment_id: String,
    /// `splits` or `generalization`.
    pub experiment: String,
    pub kind: CellKind,
    /// Classes the full model was trained on.
    pub pretrain_classes: Vec<DocClass>,
    pub holdout: DocClass,
    #[serde(with = "split_name")]
    pub split: Option<SplitPoint>,
    pub finetune_fraction: Option<f64>,
    pub metrics: EvalMetrics,
    pub train_seconds: Option<f64>,
    pub epochs: usize,
    pub trainable_params: usize,
}

mod split_name {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::model::SplitPoint;

    pub fn serialize<S: Serializer>(split: &Option<SplitPoint>, s: S) -> Result<S::Ok, S::Error> {
        split.map(|p| p.name()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SplitPoint>, D::Error> {
        let name: Option<String> = Option::deserialize(d)?;
        name.map(|n| n.parse().map_err(serde::de::Error::custom)).transpose()
    }
}

/// Stable identifier of a cell: kind tag plus a hash of what defines it.
pub fn cell_id(
    experiment: &str,
    kind: CellKind,
    classes: &[DocClass],
    split: Option<SplitPoint>,
    fraction: Option<f64>,
    seed: u64,
) -> String {
    let key = format!(
        "{experiment}|{}|{}|{}|{}|{seed}",
        kind.tag(),
        DocClass::list_name(classes),
        split.map_or("full", |s| s.name()),
        fraction.map_or_else(|| "-".to_string(), |f| format!("{f:.4}"))
    );
    let digest = Sha256::digest(key.as_bytes());
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{}-{hex}", kind.tag())
}

/// First `max(1, round(fraction * n))` entries of a seeded permutation of
/// `0..n`, so smaller fractions give prefixes of larger ones.
pub fn nested_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5ab5e7)));
    let k = ((fraction * n as f64).round() as usize).clamp(1.min(n), n);
    order.truncate(k);
    order
}

struct Cell {
    id: String,
    kind: CellKind,
    classes: Vec<DocClass>,
    holdout: DocClass,
    split: Option<SplitPoint>,
    fraction: Option<f64>,
    /// Index of the full model a fine-tune starts from.
    parent: Option<usize>,
    train: TrainConfig,
}

/// Where finished cells are cached so that an interrupted run resumes.
struct CellStore {
    root: Option<PathBuf>,
}

impl CellStore {
    fn open(root: Option<&Path>, config: &ExperimentConfig, data: &Dataset) -> Result<Self> {
        let Some(root) = root else { return Ok(Self { root: None }) };
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| TrainError::Io { path, source }
        };
        for sub in ["cells", "models"] {
            fs::create_dir_all(root.join(sub)).map_err(io(&root.join(sub)))?;
        }
        let stamp = root.join("cells").join("config.txt");
        let fingerprint = config.fingerprint(data);
        match fs::read_to_string(&stamp) {
            Ok(existing) if existing != fingerprint => {
                return Err(TrainError::Format {
                    path: stamp.display().to_string(),
                    reason: "cached cells come from a different configuration; use a fresh output directory".into(),
                })
            }
            Ok(_) => {}
            Err(_) => fs::write(&stamp, &fingerprint).map_err(io(&stamp))?,
        }
        Ok(Self { root: Some(root.to_path_buf()) })
    }

    fn result_path(&self, id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join("cells").join(format!("{id}.json")))
    }

    fn model_path(&self, id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join("models").join(format!("{id}.ckpt")))
    }

    fn load(&self, cell: &Cell, needs_model: bool) -> Option<(ExperimentResult, Option<SdlNet>)> {
        let text = fs::read_to_string(self.result_path(&cell.id)?).ok()?;
        let result: ExperimentResult = serde_json::from_str(&text).ok()?;
        if result.experiment_id != cell.id {
            return None;
        }
        if !needs_model {
            return Some((result, None));
        }
        let model = load_checkpoint(self.model_path(&cell.id)?).ok()?;
        Some((result, Some(model)))
    }

    fn save(&self, result: &ExperimentResult, model: Option<&SdlNet>) -> Result<()> {
        let Some(path) = self.result_path(&result.experiment_id) else { return Ok(()) };
        if let (Some(model), Some(mp)) = (model, self.model_path(&result.experiment_id)) {
            save_checkpoint(model, &mp)?;
        }
        // The result file marks completion, so it is renamed into place last.
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(result).expect("result serializes");
        fs::write(&tmp, text).map_err(|source| TrainError::Io { path: tmp.display().to_string(), source })?;
        fs::rename(&tmp, &path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        Ok(())
    }
}

/// Runs `f` over `items` on `jobs` threads; results keep item order.
fn parallel_map<T: Send + Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let slots: Vec<Mutex<Option<Result<U>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= items.len() {
            break;
        }
        let out = f(&items[i]);
        *slots[i].lock().expect("slot lock") = Some(out);
    };
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every item ran")).collect()
}

struct Runner<'a> {
    name: &'static str,
    data: &'a Dataset,
    config: &'a ExperimentConfig,
    store: CellStore,
}

impl Runner<'_> {
    fn cell_seed(&self, id: &str) -> u64 {
        let digest = Sha256::digest(id.as_bytes());
        mix_seed(self.config.seed, u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
    }

    fn cell(
        &self,
        kind: CellKind,
        classes: Vec<DocClass>,
        holdout: DocClass,
        split: Option<SplitPoint>,
        fraction: Option<f64>,
        parent: Option<usize>,
    ) -> Cell {
        let id = cell_id(self.name, kind, &classes, split, fraction, self.config.seed);
        let mut train = match kind {
            CellKind::Finetune => self.config.finetune.clone(),
            _ => self.config.pretrain.clone(),
        };
        if kind == CellKind::Scratch {
            train.max_epochs = self.config.pretrain.max_epochs + self.config.finetune.max_epochs;
        }
        train.seed = self.cell_seed(&id);
        train.input_size = self.config.model.input_size;
        Cell { id, kind, classes, holdout, split, fraction, parent, train }
    }

    fn training_data(&self, cell: &Cell) -> Result<DatasetSplit> {
        if cell.kind != CellKind::Finetune {
            return Ok(self.data.select(&cell.classes)?);
        }
        let holdout = self.data.select(&[cell.holdout])?;
        let fraction = cell.fraction.unwrap_or(1.0);
        let keep = nested_subset(holdout.train.len(), fraction, mix_seed(self.config.seed, cell.holdout.index() as u64));
        let train = keep.iter().map(|&i| holdout.train[i].clone()).collect();
        Ok(DatasetSplit { train, validation: holdout.validation, test: Vec::new() })
    }

    /// Trains and evaluates one cell, or loads it from the cache. Full
    /// models are returned for their fine-tunes.
    fn run(&self, cell: &Cell, parent: Option<&SdlNet>) -> Result<(ExperimentResult, Option<SdlNet>)> {
        let needs_model = cell.kind != CellKind::Finetune;
        if let Some(cached) = self.store.load(cell, needs_model) {
            return Ok(cached);
        }
        let data = self.training_data(cell)?;
        let mut model = SdlNet::new(self.config.model.clone(), cell.train.seed)?;
        let selection = match (cell.kind, parent) {
            (CellKind::Finetune, Some(p)) => {
                model.init_from(p)?;
                ParamSelection::Decoder(cell.split.expect("fine-tune cells carry a split"))
            }
            _ => ParamSelection::All,
        };
        let history = train(&mut model, selection, &data, &cell.train)?;
        let test = &self.data.select(&[cell.holdout])?.test;
        let metrics = evaluate(&model, test, self.config.score_threshold)?;
        let trainable = model.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum();
        let result = ExperimentResult {
            experiment_id: cell.id.clone(),
            experiment: self.name.to_string(),
            kind: cell.kind,
            pretrain_classes: cell.classes.clone(),
            holdout: cell.holdout,
            split: cell.split,
            finetune_fraction: cell.fraction,
            metrics,
            train_seconds: self.config.record_timing.then_some(history.seconds),
            epochs: history.epochs.len(),
            trainable_params: trainable,
        };
        self.store.save(&result, needs_model.then_some(&model))?;
        Ok((result, needs_model.then_some(model)))
    }

    /// Full models first, then the fine-tunes that start from them.
    fn run_all(&self, full: Vec<Cell>, finetunes: Vec<Cell>) -> Result<Vec<ExperimentResult>> {
        let jobs = self.config.jobs;
        let trained = parallel_map(&full, jobs, |c| self.run(c, None))?;
        let tuned = parallel_map(&finetunes, jobs, |c| {
            let parent = trained[c.parent.expect("fine-tune cells have a parent")].1.as_ref();
            self.run(c, parent).map(|(r, _)| r)
        })?;
        Ok(trained.into_iter().map(|(r, _)| r).chain(tuned).collect())
    }
}

fn check_classes(data: &Dataset, holdout: Option<DocClass>) -> Result<Vec<DocClass>> {
    let classes = data.class_list();
    if classes.len() < 2 {
        return Err(TrainError::Data(format!("the experiments need at least 2 classes, the dataset has {}", classes.len())));
    }
    if let Some(h) = holdout {
        if !classes.contains(&h) {
            return Err(TrainError::Data(format!("holdout class {h} is not in the dataset")));
        }
    }
    Ok(classes)
}

/// Split-candidate evaluation: for every holdout class, a generic model on
/// the remaining classes, then one decoder fine-tune per split candidate.
/// Rows: all generic models (class order), then fine-tunes (class, split).
pub fn run_split_experiment(data: &Dataset, config: &ExperimentConfig, cache: Option<&Path>) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    let classes = check_classes(data, None)?;
    let runner = Runner { name: "splits", data, config, store: CellStore::open(cache, config, data)? };
    let mut full = Vec::new();
    let mut tuned = Vec::new();
    for (k, &holdout) in classes.iter().enumerate() {
        let others: Vec<DocClass> = classes.iter().copied().filter(|&c| c != holdout).collect();
        full.push(runner.cell(CellKind::Generic, others.clone(), holdout, None, None, None));
        for split in SplitPoint::ALL {
            tuned.push(runner.cell(CellKind::Finetune, others.clone(), holdout, Some(split), Some(1.0), Some(k)));
        }
    }
    runner.run_all(full, tuned)
}

/// Every non-empty combination of `classes`, by size then in class order.
fn combinations(classes: &[DocClass]) -> Vec<Vec<DocClass>> {
    let n = classes.len();
    let mut out: Vec<Vec<DocClass>> =
        (1u32..(1 << n)).map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).map(|i| classes[i]).collect()).collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

/// Generalization study: full models pre-trained on every combination of
/// the non-holdout classes plus one on all classes, each fine-tuned at
/// every fraction, and a scratch model on the holdout class alone.
/// Rows: pre-trained models (combinations, all classes, scratch), then
/// fine-tunes (model, fraction).
pub fn run_generalization_experiment(
    data: &Dataset,
    config: &ExperimentConfig,
    cache: Option<&Path>,
) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    let classes = check_classes(data, Some(config.holdout))?;
    let runner = Runner { name: "generalization", data, config, store: CellStore::open(cache, config, data)? };
    let holdout = config.holdout;
    let others: Vec<DocClass> = classes.iter().copied().filter(|&c| c != holdout).collect();
    let mut full: Vec<Cell> = combinations(&others)
        .into_iter()
        .map(|combo| runner.cell(CellKind::Pretrain, combo, holdout, None, None, None))
        .collect();
    full.push(runner.cell(CellKind::Pretrain, classes.clone(), holdout, None, None, None));
    let pretrained = full.len();
    full.push(runner.cell(CellKind::Scratch, vec![holdout], holdout, None, None, None));
    let mut tuned = Vec::new();
    for k in 0..pretrained {
        for &f in &config.fractions {
            let classes = full[k].classes.clone();
            tuned.push(runner.cell(CellKind::Finetune, classes, holdout, Some(config.split), Some(f), Some(k)));
        }
    }
    runner.run_all(full, tuned)
}

/// Split-study outcome for one holdout class.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitStudyClass {
    pub holdout: DocClass,
    pub generic_median: f64,
    pub split_medians: Vec<(SplitPoint, f64)>,
    pub split_trainable: Vec<(SplitPoint, usize)>,
}

impl SplitStudyClass {
    /// Every fine-tuned split reaches at least the generic median.
    pub fn all_splits_at_least_generic(&self) -> bool {
        self.split_medians.iter().all(|&(_, m)| m >= self.generic_median)
    }

    /// Every fine-tuned split strictly beats the generic median.
    pub fn all_splits_beat_generic(&self) -> bool {
        self.split_medians.iter().all(|&(_, m)| m > self.generic_median)
    }
}

pub fn split_study_summary(results: &[ExperimentResult]) -> Vec<SplitStudyClass> {
    let mut out: Vec<SplitStudyClass> = Vec::new();
    for r in results.iter().filter(|r| r.experiment == "splits" && r.kind == CellKind::Generic) {
        let mut tuned: Vec<&ExperimentResult> = results
            .iter()
            .filter(|t| t.kind == CellKind::Finetune && t.experiment == "splits" && t.holdout == r.holdout)
            .collect();
        tuned.sort_by_key(|t| t.split);
        out.push(SplitStudyClass {
            holdout: r.holdout,
            generic_median: r.metrics.iou_median,
            split_medians: tuned.iter().filter_map(|t| Some((t.split?, t.metrics.iou_median))).collect(),
            split_trainable: tuned.iter().filter_map(|t| Some((t.split?, t.trainable_params))).collect(),
        });
    }
    out.sort_by_key(|c| c.holdout);
    out
}

/// Generalization-study medians grouped by fine-tune fraction and pre-train combination size.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizationSummary {
    pub scratch_median: Option<f64>,
    /// Pre-trained on every non-holdout class, fine-tuned on the full holdout train set.
    pub largest_combination_full_median: Option<f64>,
    /// Per fraction, the pooled median IoU of each combination size (ascending).
    pub by_fraction: Vec<(f64, Vec<(usize, f64)>)>,
}

impl GeneralizationSummary {
    /// Fractions whose medians never decrease with combination size.
    pub fn monotone_fractions(&self) -> usize {
        self.by_fraction.iter().filter(|(_, m)| m.windows(2).all(|w| w[0].1 <= w[1].1)).count()
    }
}

pub fn generalization_summary(results: &[ExperimentResult]) -> GeneralizationSummary {
    let rows: Vec<&ExperimentResult> = results.iter().filter(|r| r.experiment == "generalization").collect();
    let scratch_median = rows.iter().find(|r| r.kind == CellKind::Scratch).map(|r| r.metrics.iou_median);
    let holdout = rows.first().map(|r| r.holdout);
    let is_combo = |r: &ExperimentResult| !r.pretrain_classes.contains(&r.holdout);
    let largest = rows.iter().filter(|r| r.kind == CellKind::Pretrain && is_combo(r)).map(|r| r.pretrain_classes.len()).max();
    let largest_combination_full_median = rows
        .iter()
        .filter(|r| r.kind == CellKind::Finetune && is_combo(r) && Some(r.pretrain_classes.len()) == largest)
        .filter(|r| r.finetune_fraction == Some(1.0) && Some(r.holdout) == holdout)
        .map(|r| r.metrics.iou_median)
        .next();
    let mut pooled: BTreeMap<(u64, usize), (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.kind == CellKind::Finetune && is_combo(r)) {
        let f = r.finetune_fraction.unwrap_or(1.0);
        let entry = pooled.entry((f.to_bits(), r.pretrain_classes.len())).or_insert((f, Vec::new()));
        entry.1.extend(&r.metrics.ious);
    }
    let mut by_fraction: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    for ((_, size), (f, mut ious)) in pooled {
        ious.sort_by(f64::total_cmp);
        let m = median(&ious);
        match by_fraction.iter_mut().find(|(g, _)| *g == f) {
            Some((_, v)) => v.push((size, m)),
            None => by_fraction.push((f, vec![(size, m)])),
        }
    }
    by_fraction.sort_by(|a, b| a.0.total_cmp(&b.0));
    GeneralizationSummary { scratch_median, largest_combination_full_median, by_fraction }
}
