use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{mix_seed, DocClass, Result, Sample, SynthError};
use crate::geometry::{estimate_homography_dlt, Homography, Quadrangle};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const LABELS: &str = "labels.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Total number of samples over all classes.
    pub n: usize,
    pub seed: u64,
    /// Side of the square scene images.
    pub size: u32,
    /// Class proportions in `DocClass::ALL` order; must sum to 1.
    pub mix: [f64; 5],
    /// Largest corner displacement as a fraction of the card side.
    pub perspective: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 1000, seed: 0, size: 64, mix: DocClass::REFERENCE_MIX, perspective: 0.15 }
    }
}

impl DataConfig {
    /// All `n` samples from a single class.
    pub fn single_class(class: DocClass, n: usize, seed: u64) -> Self {
        let mut mix = [0.0; 5];
        mix[class.index()] = 1.0;
        Self { n, seed, mix, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mix.iter().any(|&p| !(p >= 0.0)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SynthError::Config(format!("class proportions {:?} must be non-negative and sum to 1", self.mix)));
        }
        if self.size < 8 {
            return Err(SynthError::Config(format!("image size {} is too small", self.size)));
        }
        if !(0.0..=super::MAX_PERSPECTIVE).contains(&self.perspective) {
            return Err(SynthError::Config(format!("perspective {} outside [0, {}]", self.perspective, super::MAX_PERSPECTIVE)));
        }
        Ok(())
    }
}

/// Per-class sample counts by largest remainder, ties to the earlier class.
pub fn class_counts(n: usize, mix: &[f64; 5]) -> [usize; 5] {
    let exact: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts: [usize; 5] = std::array::from_fn(|i| exact[i].floor() as usize);
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().filter(|&&i| mix[i] > 0.0).take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Train, validation and test sizes for `n` samples (70/15/15, rounded).
pub fn split_counts(n: usize) -> Result<[usize; 3]> {
    let train = (0.70 * n as f64).round() as usize;
    let validation = (0.15 * n as f64).round() as usize;
    let test = n.saturating_sub(train + validation);
    if train == 0 || validation == 0 || test == 0 {
        return Err(SynthError::Config(format!("{n} samples leave an empty split ({train}/{validation}/{test})")));
    }
    Ok([train, validation, test])
}

/// Sample seeds of every class, partitioned into train/validation/test.
/// Seeds are sorted and cut at the split counts, so a sample's split
/// depends only on its seed within the class's seed set.
pub fn plan_splits(config: &DataConfig) -> Result<Vec<(DocClass, [Vec<u64>; 3])>> {
    config.validate()?;
    let counts = class_counts(config.n, &config.mix);
    let mut out = Vec::new();
    for class in DocClass::ALL {
        let n = counts[class.index()];
        if n == 0 {
            continue;
        }
        let [train, validation, _] = split_counts(n).map_err(|e| match e {
            SynthError::Config(m) => SynthError::Config(format!("class {class}: {m}")),
            other => other,
        })?;
        let mut seeds: Vec<u64> = (0..n as u64).map(|i| mix_seed(config.seed, ((class.index() as u64) << 32) | i)).collect();
        seeds.sort_unstable();
        let test = seeds.split_off(train + validation);
        let validation = seeds.split_off(train);
        out.push((class, [seeds, validation, test]));
    }
    if out.is_empty() {
        return Err(SynthError::Config("no samples requested".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    /// Concatenation of several splits, split by split.
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a DatasetSplit>) -> DatasetSplit {
        let mut out = DatasetSplit::default();
        for p in parts {
            for s in Split::ALL {
                out.get_mut(s).extend_from_slice(p.get(s));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassData {
    pub class: DocClass,
    pub splits: DatasetSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub classes: Vec<ClassData>,
}

impl Dataset {
    pub fn class(&self, class: DocClass) -> Option<&DatasetSplit> {
        self.classes.iter().find(|c| c.class == class).map(|c| &c.splits)
    }

    pub fn class_list(&self) -> Vec<DocClass> {
        self.classes.iter().map(|c| c.class).collect()
    }

    /// Merged splits of `classes`; an absent class is an error.
    pub fn select(&self, classes: &[DocClass]) -> Result<DatasetSplit> {
        let parts = classes
            .iter()
            .map(|&c| self.class(c).ok_or_else(|| SynthError::Config(format!("dataset has no samples of class {c}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetSplit::merge(parts))
    }

    pub fn manifest(&self) -> Manifest {
        let counts = self.classes.iter().map(|c| (c.class.name().to_string(), c.splits.counts())).collect();
        Manifest { format_version: DATASET_FORMAT_VERSION, config: self.config.clone(), counts }
    }
}

/// Written last by `save_dataset`; its presence marks a complete dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DataConfig,
    /// Train, validation and test counts per class name.
    pub counts: BTreeMap<String, [usize; 3]>,
}

pub fn generate_dataset(config: &DataConfig) -> Result<Dataset> {
    let plan = plan_splits(config)?;
    let mut classes = Vec::with_capacity(plan.len());
    for (class, seeds) in plan {
        let mut splits = DatasetSplit::default();
        for (split, seeds) in Split::ALL.into_iter().zip(seeds) {
            *splits.get_mut(split) =
                seeds.into_iter().map(|s| Sample::generate(class, s, config.size, config.perspective)).collect::<Result<_>>()?;
        }
        classes.push(ClassData { class, splits });
    }
    Ok(Dataset { config: config.clone(), classes })
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    path: String,
    class: DocClass,
    quad: Quadrangle,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    placement: Option<[[f64; 3]; 3]>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

fn data_err(path: &Path, reason: impl Into<String>) -> SynthError {
    SynthError::Dataset { path: path.display().to_string(), reason: reason.into() }
}

/// Writes `<root>/<class>/<split>/NNNNNN.png` plus one `labels.jsonl` per
/// split, then `manifest.json`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for data in &dataset.classes {
        for split in Split::ALL {
            let dir = root.join(data.class.name()).join(split.name());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut labels = String::new();
            for (i, sample) in data.splits.get(split).iter().enumerate() {
                let name = format!("{i:06}.png");
                let path = dir.join(&name);
                sample.image.save(&path).map_err(|e| data_err(&path, e.to_string()))?;
                let record = LabelRecord {
                    path: name,
                    class: sample.class,
                    quad: sample.label,
                    seed: sample.seed,
                    placement: Some(sample.placement.rows()),
                };
                labels.push_str(&serde_json::to_string(&record).expect("label record serializes"));
                labels.push('\n');
            }
            let path = dir.join(LABELS);
            fs::write(&path, labels).map_err(io_err(&path))?;
        }
    }
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&dataset.manifest()).expect("manifest serializes");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(text.as_bytes()).and_then(|_| f.write_all(b"\n")).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| data_err(&path, format!("malformed manifest: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(data_err(
            &path,
            format!("unsupported format version {} (expected {DATASET_FORMAT_VERSION})", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Reads and validates a dataset written by `save_dataset`: every record
/// must parse, name an existing image of the manifest size, and carry an
/// in-frame, well-formed label; counts must match the manifest and the
/// PNG files present.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let size = manifest.config.size;
    let mut classes = Vec::new();
    for (name, expected) in &manifest.counts {
        let class: DocClass = name.parse().map_err(|e: String| data_err(&root.join(MANIFEST), e))?;
        let mut splits = DatasetSplit::default();
        for (split, &want) in Split::ALL.into_iter().zip(expected) {
            let dir = root.join(name).join(split.name());
            let samples = load_split(&dir, class, size)?;
            if samples.len() != want {
                return Err(data_err(&dir.join(LABELS), format!("{} records but the manifest lists {want}", samples.len())));
            }
            let on_disk = count_pngs(&dir)?;
            if on_disk != want {
                return Err(data_err(&dir, format!("{on_disk} PNG files but the manifest lists {want}")));
            }
            *splits.get_mut(split) = samples;
        }
        classes.push(ClassData { class, splits });
    }
    classes.sort_by_key(|c| c.class);
    Ok(Dataset { config: manifest.config, classes })
}

fn count_pngs(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(io_err(dir))?;
        if e.path().extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    Ok(n)
}

fn load_split(dir: &Path, class: DocClass, size: u32) -> Result<Vec<Sample>> {
    let labels = dir.join(LABELS);
    let text = fs::read_to_string(&labels).map_err(io_err(&labels))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = PathBuf::from(format!("{}:{}", labels.display(), i + 1));
        let record: LabelRecord = serde_json::from_str(line).map_err(|e| data_err(&at, format!("malformed label: {e}")))?;
        if record.class != class {
            return Err(data_err(&at, format!("record {} has class {} in a {class} directory", record.path, record.class)));
        }
        let q = record.quad;
        if !q.is_finite() || !q.in_frame(size as usize, size as usize) {
            return Err(data_err(
                &at,
                format!("record {}: corner outside the {size}x{size} frame: {}", record.path, q.to_json()),
            ));
        }
        if !q.is_well_formed() {
            return Err(data_err(&at, format!("record {}: corners are not a simple clockwise quadrangle", record.path)));
        }
        let path = dir.join(&record.path);
        let image =
            image::open(&path).map_err(|e| data_err(&at, format!("cannot read image {}: {e}", path.display())))?.to_rgb8();
        if image.dimensions() != (size, size) {
            return Err(data_err(&at, format!("image {} is {:?}, expected {size}x{size}", record.path, image.dimensions())));
        }
        let placement = match record.placement {
            Some(rows) => Homography::from_rows(rows),
            None => estimate_homography_dlt(&Quadrangle::rectangle(0.0, 0.0, 1.0, 1.0).corners(), &q.corners())?,
        };
        out.push(Sample { image, label: q, class, seed: record.seed, placement });
    }
    Ok(out)
}
