//! The corner-heatmap U-Net: a width-reduced MobileNetV2-style backbone, four
//! upsampler blocks fed by skip connections, and a transposed-convolution head
//! producing one sigmoid heatmap per corner.
//!
//! Parameters live in a flat list tagged with the part of the network they
//! belong to, so that any [`SplitPoint`] is just a view over that list.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{BatchStats, BnMode, Parameter, RunningStats, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
/// Initial heatmap value produced by the head before any training.
pub const HEAD_PRIOR: f64 = 0.01;

const REFERENCE_STEM: usize = 32;
/// MobileNetV2 output channels of the five stages feeding the skips and the bottleneck.
const REFERENCE_STAGES: [usize; 5] = [16, 24, 32, 96, 320];
const STAGE_REPEATS: [usize; 5] = [1, 2, 2, 2, 1];
const STAGE_EXPANSION: [usize; 5] = [1, 6, 6, 6, 6];
const REFERENCE_UPSAMPLERS: [usize; 4] = [256, 128, 64, 32];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Side of the square input, divisible by 32.
    pub input_size: usize,
    pub width_multiplier: f64,
    pub stem_channels: usize,
    pub backbone_stage_channels: Vec<usize>,
    pub upsampler_channels: [usize; 4],
    /// Always 4: one heatmap per corner.
    pub out_channels: usize,
}

fn scale_channels(reference: usize, width: f64) -> usize {
    let c = (reference as f64 * width / 4.0).round() as usize * 4;
    c.max(8)
}

impl ModelConfig {
    /// Channel plan derived from the reference plan scaled by `width_multiplier`.
    pub fn new(input_size: usize, width_multiplier: f64) -> Self {
        Self {
            input_size,
            width_multiplier,
            stem_channels: scale_channels(REFERENCE_STEM, width_multiplier),
            backbone_stage_channels: REFERENCE_STAGES.iter().map(|&c| scale_channels(c, width_multiplier)).collect(),
            upsampler_channels: REFERENCE_UPSAMPLERS.map(|c| scale_channels(c, width_multiplier)),
            out_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(ModelError::Config(format!("input size {} is not a positive multiple of 32", self.input_size)));
        }
        if self.out_channels != 4 {
            return Err(ModelError::Config(format!("out_channels must be 4, got {}", self.out_channels)));
        }
        if self.backbone_stage_channels.len() != 5 {
            return Err(ModelError::Config(format!("expected 5 backbone stages, got {}", self.backbone_stage_channels.len())));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(ModelError::Config(format!("width multiplier {} must be positive", self.width_multiplier)));
        }
        if self.stem_channels == 0 || self.backbone_stage_channels.contains(&0) || self.upsampler_channels.contains(&0) {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// `key=value` lines, the form stored in checkpoints.
    pub fn to_kv_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "input_size={}\nwidth_multiplier={}\nstem_channels={}\nbackbone_stage_channels={}\nupsampler_channels={}\nout_channels={}\n",
            self.input_size,
            self.width_multiplier,
            self.stem_channels,
            join(&self.backbone_stage_channels),
            join(&self.upsampler_channels),
            self.out_channels
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let bad = |k: &str, v: &str| ModelError::Config(format!("bad value {v:?} for {k}"));
        let list =
            |k: &str, v: &str| -> Result<Vec<usize>> { v.split(',').map(|s| s.trim().parse().map_err(|_| bad(k, v))).collect() };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| ModelError::Config(format!("malformed line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "input_size" => cfg.input_size = v.parse().map_err(|_| bad(k, v))?,
                "width_multiplier" => cfg.width_multiplier = v.parse().map_err(|_| bad(k, v))?,
                "stem_channels" => cfg.stem_channels = v.parse().map_err(|_| bad(k, v))?,
                "backbone_stage_channels" => cfg.backbone_stage_channels = list(k, v)?,
                "upsampler_channels" => {
                    cfg.upsampler_channels = list(k, v)?.try_into().map_err(|_| bad(k, v))?;
                }
                "out_channels" => cfg.out_channels = v.parse().map_err(|_| bad(k, v))?,
                other => return Err(ModelError::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(64, 0.25)
    }
}

/// Boundary between the shared (frozen) encoder and the fine-tuned decoder,
/// named by how many upsampler blocks sit on the encoder side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitPoint {
    Middle0,
    Up1,
    Up2,
    Up3,
}

impl SplitPoint {
    pub const ALL: [SplitPoint; 4] = [SplitPoint::Middle0, SplitPoint::Up1, SplitPoint::Up2, SplitPoint::Up3];

    pub fn upsamplers_in_encoder(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitPoint::Middle0 => "Middle0",
            SplitPoint::Up1 => "Up1",
            SplitPoint::Up2 => "Up2",
            SplitPoint::Up3 => "Up3",
        }
    }
}

impl fmt::Display for SplitPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.upsamplers_in_encoder())
    }
}

impl FromStr for SplitPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let valid = "valid splits: 0 (middle), 1, 2, 3 (upsampler blocks in the encoder)";
        let idx: usize = match s.trim().to_ascii_lowercase().as_str() {
            "middle" | "middle0" => 0,
            "up1" => 1,
            "up2" => 2,
            "up3" => 3,
            other => other.parse().map_err(|_| format!("unknown split {s:?}; {valid}"))?,
        };
        Self::from_index(idx).ok_or_else(|| format!("split {idx} is not supported; {valid}"))
    }
}

/// Which part of the network a parameter or running statistic belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Backbone,
    /// Upsampler block index in forward order, 0..4.
    Upsampler(usize),
    Head,
}

impl Part {
    pub fn in_encoder(self, split: SplitPoint) -> bool {
        match self {
            Part::Backbone => true,
            Part::Upsampler(i) => i < split.upsamplers_in_encoder(),
            Part::Head => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub name: String,
    pub part: Part,
}

#[derive(Debug, Clone, Copy)]
enum ConvKind {
    Full { stride: usize, padding: usize },
    Depthwise { stride: usize, padding: usize },
}

#[derive(Debug, Clone)]
struct ConvBn {
    kernel: usize,
    kind: ConvKind,
    gamma: usize,
    beta: usize,
    stats: usize,
    relu: bool,
}

#[derive(Debug, Clone)]
struct InvertedResidual {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    project: ConvBn,
    residual: bool,
}

#[derive(Debug, Clone)]
struct Upsampler {
    transpose: usize,
    fuse: ConvBn,
}

/// Handles to the intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub heatmaps: Var,
    /// One tape variable per model parameter, in parameter order.
    pub bindings: Vec<Var>,
    /// Skip tensors from stages 1..=4, highest resolution first.
    pub skips: [Var; 4],
    pub bottleneck: Var,
    /// Outputs of the four upsampler blocks in forward order.
    pub upsampled: [Var; 4],
    /// Batch statistics to fold into running stats, keyed by stats index.
    pub bn_updates: Vec<(usize, BatchStats<f32>)>,
}

impl ForwardPass {
    /// Activations crossing the encoder/decoder boundary: the deepest encoder
    /// output followed by every skip tensor.
    pub fn boundary(&self, split: SplitPoint) -> Vec<Var> {
        let mut v = vec![match split.upsamplers_in_encoder() {
            0 => self.bottleneck,
            k => self.upsampled[k - 1],
        }];
        v.extend(self.skips);
        v
    }
}

#[derive(Clone)]
pub struct SdlNet {
    config: ModelConfig,
    params: Vec<Parameter<f32>>,
    info: Vec<ParamInfo>,
    stats: Vec<RunningStats<f32>>,
    stats_info: Vec<ParamInfo>,
    stem: ConvBn,
    stages: Vec<Vec<InvertedResidual>>,
    upsamplers: Vec<Upsampler>,
    head_kernel: usize,
    head_bias: usize,
    frozen: Option<SplitPoint>,
}

impl fmt::Debug for SdlNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdlNet")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .field("frozen", &self.frozen)
            .finish()
    }
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter<f32>>,
    info: Vec<ParamInfo>,
    stats: Vec<RunningStats<f32>>,
    stats_info: Vec<ParamInfo>,
}

impl Builder {
    fn param(&mut self, name: String, part: Part, value: Tensor<f32>) -> usize {
        self.params.push(Parameter::new(value));
        self.info.push(ParamInfo { name, part });
        self.params.len() - 1
    }

    fn he(&mut self, name: String, part: Part, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = Tensor::randn(shape, std, &mut self.rng);
        self.param(name, part, value)
    }

    fn conv_bn(&mut self, name: &str, part: Part, cin: usize, cout: usize, kind: ConvKind, k: usize, relu: bool) -> ConvBn {
        let kernel = match kind {
            ConvKind::Full { .. } => self.he(format!("{name}.kernel"), part, &[cout, cin, k, k], cin * k * k),
            ConvKind::Depthwise { .. } => self.he(format!("{name}.kernel"), part, &[cout, 1, k, k], k * k),
        };
        let gamma = self.param(format!("{name}.bn.gamma"), part, Tensor::full(&[cout], 1.0));
        let beta = self.param(format!("{name}.bn.beta"), part, Tensor::zeros(&[cout]));
        self.stats.push(RunningStats::new(cout));
        self.stats_info.push(ParamInfo { name: format!("{name}.bn"), part });
        ConvBn { kernel, kind, gamma, beta, stats: self.stats.len() - 1, relu }
    }
}

impl SdlNet {
    /// Builds a network with weights drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            info: Vec::new(),
            stats: Vec::new(),
            stats_info: Vec::new(),
        };
        let bb = Part::Backbone;
        let stem = b.conv_bn("backbone.stem", bb, 3, config.stem_channels, ConvKind::Full { stride: 2, padding: 1 }, 3, true);
        let mut cin = config.stem_channels;
        let mut stages = Vec::new();
        for (s, &cout) in config.backbone_stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for r in 0..STAGE_REPEATS[s] {
                let stride = if s > 0 && r == 0 { 2 } else { 1 };
                let name = format!("backbone.stage{}.block{r}", s + 1);
                let hidden = cin * STAGE_EXPANSION[s];
                let expand = (STAGE_EXPANSION[s] != 1).then(|| {
                    b.conv_bn(&format!("{name}.expand"), bb, cin, hidden, ConvKind::Full { stride: 1, padding: 0 }, 1, true)
                });
                let depthwise = b.conv_bn(
                    &format!("{name}.depthwise"),
                    bb,
                    hidden,
                    hidden,
                    ConvKind::Depthwise { stride, padding: 1 },
                    3,
                    true,
                );
                let project =
                    b.conv_bn(&format!("{name}.project"), bb, hidden, cout, ConvKind::Full { stride: 1, padding: 0 }, 1, false);
                blocks.push(InvertedResidual { expand, depthwise, project, residual: stride == 1 && cin == cout });
                cin = cout;
            }
            stages.push(blocks);
        }
        let mut upsamplers = Vec::new();
        for (u, &cout) in config.upsampler_channels.iter().enumerate() {
            let part = Part::Upsampler(u);
            let name = format!("upsampler{}", u + 1);
            let transpose = b.he(format!("{name}.transpose"), part, &[cin, cout, 4, 4], cin * 4);
            let skip = config.backbone_stage_channels[3 - u];
            let fuse =
                b.conv_bn(&format!("{name}.fuse"), part, cout + skip, cout, ConvKind::Full { stride: 1, padding: 0 }, 1, true);
            upsamplers.push(Upsampler { transpose, fuse });
            cin = cout;
        }
        let head_std = (1.0 / (cin * 4) as f64).sqrt();
        let head_value = Tensor::randn(&[cin, config.out_channels, 4, 4], head_std, &mut b.rng);
        let head_kernel = b.param("head.transpose".into(), Part::Head, head_value);
        let prior = (HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln() as f32;
        let head_bias = b.param("head.bias".into(), Part::Head, Tensor::full(&[config.out_channels], prior));
        Ok(Self {
            config,
            params: b.params,
            info: b.info,
            stats: b.stats,
            stats_info: b.stats_info,
            stem,
            stages,
            upsamplers,
            head_kernel,
            head_bias,
            frozen: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<f32>] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn running_stats(&self) -> &[RunningStats<f32>] {
        &self.stats
    }

    pub fn running_stats_info(&self) -> &[ParamInfo] {
        &self.stats_info
    }

    pub fn frozen_split(&self) -> Option<SplitPoint> {
        self.frozen
    }

    /// Total number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Counts learnable scalars for a list of parameter indices.
    pub fn count(&self, indices: &[usize]) -> usize {
        indices.iter().map(|&i| self.params[i].value.len()).sum()
    }

    /// Parameter indices on the encoder and decoder side of `split`.
    pub fn split_parameters(&self, split: SplitPoint) -> (Vec<usize>, Vec<usize>) {
        (0..self.params.len()).partition(|&i| self.info[i].part.in_encoder(split))
    }

    /// Marks every encoder-side parameter non-trainable and switches encoder
    /// batch-norm layers to running statistics during training.
    pub fn freeze_encoder(&mut self, split: SplitPoint) {
        for (p, info) in self.params.iter_mut().zip(&self.info) {
            p.trainable = !info.part.in_encoder(split);
        }
        self.frozen = Some(split);
    }

    pub fn unfreeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = true);
        self.frozen = None;
    }

    /// Copies every parameter value and running statistic from `source`.
    pub fn init_from(&mut self, source: &SdlNet) -> Result<()> {
        if source.config != self.config {
            return Err(ModelError::Mismatch(format!(
                "source config {:?} differs from target config {:?}",
                source.config, self.config
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&source.params) {
            dst.value = src.value.clone();
            dst.zero_grad();
        }
        self.stats = source.stats.clone();
        Ok(())
    }

    /// Snapshot of all weights and statistics, used for early-stopping restore.
    pub fn weights(&self) -> (Vec<Tensor<f32>>, Vec<RunningStats<f32>>) {
        (self.params.iter().map(|p| p.value.clone()).collect(), self.stats.clone())
    }

    pub fn set_weights(&mut self, weights: (Vec<Tensor<f32>>, Vec<RunningStats<f32>>)) {
        let (values, stats) = weights;
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        self.stats = stats;
    }

    fn encoder_layer(&self, part: Part) -> bool {
        self.frozen.is_some_and(|s| part.in_encoder(s))
    }

    /// Records a forward pass on `tape`. With `training`, trainable parameters
    /// require gradients and unfrozen batch-norm layers use batch statistics.
    pub fn forward(&self, tape: &mut Tape<f32>, input: Var, training: bool) -> Result<ForwardPass> {
        let s = self.config.input_size;
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(TensorError::Shape {
                op: "SdlNet::forward",
                detail: format!("expected [B, 3, {s}, {s}], got {shape:?}"),
            }
            .into());
        }
        let bindings: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), training && p.trainable)).collect();
        let mut ctx = Ctx { net: self, tape, bindings: &bindings, training, bn_updates: Vec::new() };

        let mut x = ctx.conv_bn(&self.stem, input, Part::Backbone)?;
        let mut stage_out = Vec::with_capacity(5);
        for stage in &self.stages {
            for block in stage {
                x = ctx.inverted_residual(block, x)?;
            }
            stage_out.push(x);
        }
        let skips = [stage_out[0], stage_out[1], stage_out[2], stage_out[3]];
        let bottleneck = stage_out[4];
        let mut upsampled = Vec::with_capacity(4);
        for (u, up) in self.upsamplers.iter().enumerate() {
            let part = Part::Upsampler(u);
            let y = ctx.tape.conv2d_transpose(x, bindings[up.transpose], 2)?;
            let y = ctx.tape.concat_channels(y, skips[3 - u])?;
            x = ctx.conv_bn(&up.fuse, y, part)?;
            upsampled.push(x);
        }
        let logits = ctx.tape.conv2d_transpose(x, bindings[self.head_kernel], 2)?;
        let logits = ctx.tape.bias_add(logits, bindings[self.head_bias])?;
        let heatmaps = ctx.tape.sigmoid(logits);
        let bn_updates = ctx.bn_updates;
        Ok(ForwardPass {
            heatmaps,
            bindings,
            skips,
            bottleneck,
            upsampled: [upsampled[0], upsampled[1], upsampled[2], upsampled[3]],
            bn_updates,
        })
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats<f32>)]) {
        for (i, batch) in updates {
            self.stats[*i].update(batch, BN_MOMENTUM);
        }
    }

    /// Inference-mode heatmaps for a `[B, 3, S, S]` batch.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), false);
        let pass = self.forward(&mut tape, x, false)?;
        Ok(tape.value(pass.heatmaps).clone())
    }

    /// Inference-mode activations crossing the boundary of `split`.
    pub fn boundary_activations(&self, images: &Tensor<f32>, split: SplitPoint) -> Result<Vec<Tensor<f32>>> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), false);
        let pass = self.forward(&mut tape, x, false)?;
        Ok(pass.boundary(split).into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

struct Ctx<'a> {
    net: &'a SdlNet,
    tape: &'a mut Tape<f32>,
    bindings: &'a [Var],
    training: bool,
    bn_updates: Vec<(usize, BatchStats<f32>)>,
}

impl Ctx<'_> {
    fn conv_bn(&mut self, layer: &ConvBn, x: Var, part: Part) -> Result<Var> {
        let k = self.bindings[layer.kernel];
        let y = match layer.kind {
            ConvKind::Full { stride, padding } => self.tape.conv2d(x, k, stride, padding)?,
            ConvKind::Depthwise { stride, padding } => self.tape.depthwise_conv2d(x, k, stride, padding)?,
        };
        let mode = if self.training && !self.net.encoder_layer(part) { BnMode::Train } else { BnMode::Eval };
        let (y, batch) = self.tape.batch_norm(
            y,
            self.bindings[layer.gamma],
            self.bindings[layer.beta],
            &self.net.stats[layer.stats],
            mode,
            BN_EPS,
        )?;
        if let Some(batch) = batch {
            self.bn_updates.push((layer.stats, batch));
        }
        Ok(if layer.relu { self.tape.relu6(y) } else { y })
    }

    fn inverted_residual(&mut self, block: &InvertedResidual, x: Var) -> Result<Var> {
        let part = Part::Backbone;
        let mut y = x;
        if let Some(expand) = &block.expand {
            y = self.conv_bn(expand, y, part)?;
        }
        y = self.conv_bn(&block.depthwise, y, part)?;
        y = self.conv_bn(&block.project, y, part)?;
        Ok(if block.residual { self.tape.add(x, y)? } else { y })
    }
}
