use super::{Point2, Quadrangle};
use crate::tensor::Tensor;

/// Minimum corner score for a detection to count as valid.
pub const DEFAULT_SCORE_THRESHOLD: f32 = 0.3;

/// Target width: 2% of the image side, at least 1.5 px.
pub fn default_sigma(size: usize) -> f64 {
    (0.02 * size as f64).max(1.5)
}

/// Unnormalized Gaussian `exp(-|p - corner|^2 / (2 sigma^2))` sampled at
/// every pixel centre of a `size x size` map, row-major.
pub fn render_gaussian_heatmap(corner: Point2, size: usize, sigma: f64) -> Vec<f32> {
    assert!(sigma > 0.0, "sigma must be positive");
    let inv = 1.0 / (2.0 * sigma * sigma);
    // The Gaussian is separable, so one exponential per row and column suffices.
    let gx: Vec<f64> = (0..size).map(|c| (-(c as f64 - corner.x).powi(2) * inv).exp()).collect();
    let gy: Vec<f64> = (0..size).map(|r| (-(r as f64 - corner.y).powi(2) * inv).exp()).collect();
    let mut out = Vec::with_capacity(size * size);
    for &y in &gy {
        out.extend(gx.iter().map(|&x| (y * x) as f32));
    }
    out
}

/// Four `size x size` maps in channel order TL, TR, BL, BR.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub size: usize,
    pub data: Vec<f32>,
}

impl HeatmapStack {
    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0.0; 4 * size * size] }
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.size * self.size;
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Item `index` of a `[B, 4, S, S]` batch.
    pub fn from_batch(batch: &Tensor<f32>, index: usize) -> Self {
        let shape = batch.shape();
        assert!(shape.len() == 4 && shape[1] == 4 && shape[2] == shape[3], "expected [B, 4, S, S], got {shape:?}");
        let n = 4 * shape[2] * shape[3];
        Self { size: shape[2], data: batch.data()[index * n..(index + 1) * n].to_vec() }
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        let s = self.size;
        Tensor::from_vec(&[4, s, s], self.data).expect("stack length matches shape")
    }
}

/// Renders corner `i` of `quad` into channel `i`.
pub fn encode_targets(quad: &Quadrangle, size: usize, sigma: f64) -> HeatmapStack {
    let mut data = Vec::with_capacity(4 * size * size);
    for corner in quad.corners() {
        data.extend(render_gaussian_heatmap(corner, size, sigma));
    }
    HeatmapStack { size, data }
}

/// Arg-max pixel centre and its value. Ties go to the lowest row-major index
/// and NaNs are ignored. With `refine`, a 1-D quadratic through the peak and
/// its neighbours shifts each axis by at most half a pixel.
pub fn extract_peak(map: &[f32], size: usize, refine: bool) -> (Point2, f32) {
    assert_eq!(map.len(), size * size, "map is not {size}x{size}");
    let mut best = 0;
    let mut score = f32::NEG_INFINITY;
    for (i, &v) in map.iter().enumerate() {
        if v > score {
            score = v;
            best = i;
        }
    }
    if score == f32::NEG_INFINITY {
        return (Point2::new(0.0, 0.0), f32::NAN);
    }
    let (row, col) = (best / size, best % size);
    let mut p = Point2::new(col as f64, row as f64);
    if refine {
        let at = |r: usize, c: usize| map[r * size + c] as f64;
        let offset = |l: f64, c: f64, r: f64| {
            let curvature = l - 2.0 * c + r;
            if curvature < 0.0 {
                (0.5 * (l - r) / curvature).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        if col > 0 && col + 1 < size {
            p.x += offset(at(row, col - 1), at(row, col), at(row, col + 1));
        }
        if row > 0 && row + 1 < size {
            p.y += offset(at(row - 1, col), at(row, col), at(row + 1, col));
        }
    }
    (p, score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Raw peaks, returned even when the detection is invalid.
    pub quad: Quadrangle,
    pub scores: [f32; 4],
    /// All scores reach the threshold and the quadrangle is simple and upright.
    pub valid: bool,
}

impl Detection {
    /// Document-level confidence: the weakest corner.
    pub fn document_score(&self) -> f32 {
        self.scores.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

pub fn decode_quadrangle(stack: &HeatmapStack, threshold: f32, refine: bool) -> Detection {
    let mut corners = [Point2::default(); 4];
    let mut scores = [0.0f32; 4];
    for i in 0..4 {
        (corners[i], scores[i]) = extract_peak(stack.channel(i), stack.size, refine);
    }
    let quad = Quadrangle::from_corners(corners);
    let valid = scores.iter().all(|&s| s >= threshold) && quad.is_well_formed();
    Detection { quad, scores, valid }
}
