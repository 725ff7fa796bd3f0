use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::geometry::{estimate_homography_dlt, warp_image, Homography, Point2, Quadrangle};

/// Probabilities and ranges of the six augmentation operations.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Chance that each operation is applied, independently.
    pub probability: f64,
    /// Independent x/y scale range of the resize operation.
    pub resize_range: (f64, f64),
    pub max_rotation_degrees: f64,
    /// Largest displacement of an image corner, as a fraction of the side.
    pub max_perspective: f64,
    pub illumination_range: (f64, f64),
    /// Upper bound of the noise standard deviation, in 8-bit levels.
    pub max_noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            resize_range: (0.8, 1.2),
            max_rotation_degrees: 30.0,
            max_perspective: 0.06,
            illumination_range: (0.6, 1.4),
            max_noise_sigma: 8.0,
        }
    }
}

const RETRIES: usize = 5;

/// Augments with the default configuration. Returns the sample and the
/// geometric transform applied to its pixels and label.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> (Sample, Homography) {
    augment_with(sample, rng, &AugmentConfig::default())
}

/// Crop, resize, rotation and perspective are composed into one homography
/// and the image is resampled once; illumination and noise follow. Each
/// geometric step keeps all four corners in frame, or is skipped.
pub fn augment_with(sample: &Sample, rng: &mut impl Rng, config: &AugmentConfig) -> (Sample, Homography) {
    let chosen: [bool; 6] = std::array::from_fn(|_| rng.random_bool(config.probability.clamp(0.0, 1.0)));
    let size = sample.image.width();
    let s = (size - 1) as f64;
    let centre = Point2::new(s / 2.0, s / 2.0);
    let mut label = sample.label;
    let mut total = Homography::identity();
    let mut geometric = false;
    let mut push = |h: Homography, label: &mut Quadrangle| {
        *label = label.map(|p| h.apply(p));
        total = total.then(&h);
        geometric = true;
    };

    if chosen[0] {
        if let Some(h) = (0..RETRIES).find_map(|_| crop(&label, s, rng)) {
            push(h, &mut label);
        }
    }
    if chosen[1] {
        let (lo, hi) = config.resize_range;
        let h = retry(&label, s, rng, |rng| {
            let (sx, sy) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            Homography::translation(-centre.x, -centre.y)
                .then(&Homography::scaling(sx, sy))
                .then(&Homography::translation(centre.x, centre.y))
        });
        if let Some(h) = h {
            push(h, &mut label);
        }
    }
    if chosen[2] {
        let max = config.max_rotation_degrees.to_radians();
        if let Some(h) = retry(&label, s, rng, |rng| Homography::rotation(rng.random_range(-max..=max), centre)) {
            push(h, &mut label);
        }
    }
    if chosen[3] {
        let d = config.max_perspective * s;
        let frame = Quadrangle::rectangle(0.0, 0.0, s, s);
        let h = retry(&label, s, rng, |rng| {
            let moved = frame.map(|p| Point2::new(p.x + rng.random_range(-d..=d), p.y + rng.random_range(-d..=d)));
            estimate_homography_dlt(&frame.corners(), &moved.corners()).unwrap_or_else(|_| Homography::identity())
        });
        if let Some(h) = h {
            push(h, &mut label);
        }
    }

    let mut out = sample.clone();
    if geometric {
        out = apply_geometric(sample, &total);
        // Step-by-step corners, each already checked against the frame.
        out.label = label;
    }
    if chosen[4] {
        let (lo, hi) = config.illumination_range;
        let k = rng.random_range(lo..=hi);
        for px in out.image.pixels_mut() {
            px.0 = px.0.map(|v| (v as f64 * k).round().clamp(0.0, 255.0) as u8);
        }
    }
    if chosen[5] {
        let sigma = rng.random_range(0.0..=config.max_noise_sigma);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for px in out.image.pixels_mut() {
                px.0 = px.0.map(|v| (v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    (out, total)
}

/// Resamples the image through `h` (source to output pixel coordinates)
/// and maps the label and placement with it. Corners may leave the frame.
pub fn apply_geometric(sample: &Sample, h: &Homography) -> Sample {
    let (w, ht) = sample.image.dimensions();
    Sample {
        image: warp_image(&sample.image, h, w, ht).expect("geometric transforms are invertible"),
        label: sample.label.map(|p| h.apply(p)),
        class: sample.class,
        seed: sample.seed,
        placement: sample.placement.then(h),
    }
}

fn keeps_in_frame(h: &Homography, label: &Quadrangle, s: f64) -> bool {
    let moved = label.map(|p| h.apply(p));
    moved.is_well_formed() && moved.corners().iter().all(|p| p.x >= 0.0 && p.x <= s && p.y >= 0.0 && p.y <= s)
}

fn retry<R: Rng>(label: &Quadrangle, s: f64, rng: &mut R, mut draw: impl FnMut(&mut R) -> Homography) -> Option<Homography> {
    (0..RETRIES).map(|_| draw(rng)).find(|h| keeps_in_frame(h, label, s))
}

/// Square window containing every corner, scaled back to the full frame.
fn crop(label: &Quadrangle, s: f64, rng: &mut impl Rng) -> Option<Homography> {
    let c = label.corners();
    let (bx0, bx1) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.x), hi.max(p.x)));
    let (by0, by1) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
    let min_side = (bx1 - bx0).max(by1 - by0);
    if !(min_side > 0.0 && min_side < s) {
        return None;
    }
    let side = rng.random_range(min_side..=s);
    let x0 = rng.random_range((bx1 - side).max(0.0)..=bx0.min(s - side));
    let y0 = rng.random_range((by1 - side).max(0.0)..=by0.min(s - side));
    let k = s / side;
    let h = Homography::translation(-x0, -y0).then(&Homography::scaling(k, k));
    keeps_in_frame(&h, label, s).then_some(h)
}
