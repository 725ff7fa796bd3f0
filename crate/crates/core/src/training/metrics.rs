use serde::{Deserialize, Serialize};

use super::Result;
use crate::geometry::{decode_quadrangle, quad_iou, HeatmapStack, Quadrangle};
use crate::model::SdlNet;
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Localization quality over a test set. Aggregates are computed from
/// sorted values, so they do not depend on the order of the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Per-sample IoU in test-set order; invalid detections count as 0.
    pub ious: Vec<f64>,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub iou_median: f64,
    /// Mean peak value per corner channel (TL, TR, BL, BR).
    pub corner_score_mean: [f64; 4],
    /// Mean over all corner scores.
    pub score_mean: f64,
    /// Mean document score, the weakest corner of each detection.
    pub score_min_mean: f64,
    pub invalid_count: usize,
}

fn sorted(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn mean(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

/// Population standard deviation.
fn std_dev(sorted: &[f64], mean: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let mut dev = sorted.iter().map(|v| (v - mean).powi(2)).collect::<Vec<_>>();
    dev.sort_by(f64::total_cmp);
    (dev.iter().sum::<f64>() / sorted.len() as f64).sqrt()
}

pub(crate) fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Metrics of predicted heatmaps against ground-truth labels.
pub fn evaluate_predictions(stacks: &[HeatmapStack], labels: &[Quadrangle], threshold: f32) -> EvalMetrics {
    assert_eq!(stacks.len(), labels.len(), "one prediction per label");
    let mut ious = Vec::with_capacity(labels.len());
    let mut corners: [Vec<f64>; 4] = Default::default();
    let mut minima = Vec::with_capacity(labels.len());
    let mut invalid_count = 0;
    for (stack, label) in stacks.iter().zip(labels) {
        let det = decode_quadrangle(stack, threshold, true);
        let iou = if det.valid { quad_iou(&det.quad, label).value } else { 0.0 };
        invalid_count += usize::from(!det.valid);
        ious.push(iou);
        for (c, s) in corners.iter_mut().zip(det.scores) {
            c.push(s as f64);
        }
        minima.push(det.document_score() as f64);
    }
    let iou_sorted = sorted(ious.iter().copied());
    let iou_mean = mean(&iou_sorted);
    let corner_sorted: [Vec<f64>; 4] = std::array::from_fn(|i| sorted(corners[i].iter().copied()));
    let all_scores = sorted(corner_sorted.iter().flatten().copied());
    EvalMetrics {
        iou_std: std_dev(&iou_sorted, iou_mean),
        iou_median: median(&iou_sorted),
        iou_mean,
        ious,
        corner_score_mean: std::array::from_fn(|i| mean(&corner_sorted[i])),
        score_mean: mean(&all_scores),
        score_min_mean: mean(&sorted(minima)),
        invalid_count,
    }
}

/// Runs the model in inference mode on `test` and scores the decoded
/// quadrangles against the labels.
pub fn evaluate(model: &SdlNet, test: &[Sample], threshold: f32) -> Result<EvalMetrics> {
    const CHUNK: usize = 32;
    let mut stacks = Vec::with_capacity(test.len());
    for chunk in test.chunks(CHUNK) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(Sample::to_tensor).collect();
        let out = model.predict(&Tensor::stack(&images)?)?;
        stacks.extend((0..chunk.len()).map(|i| HeatmapStack::from_batch(&out, i)));
    }
    let labels: Vec<Quadrangle> = test.iter().map(|s| s.label).collect();
    Ok(evaluate_predictions(&stacks, &labels, threshold))
}
