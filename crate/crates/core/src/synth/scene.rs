use image::{Rgb, RgbImage};
use rand::Rng;

use super::{render_document, rng_for, DocClass, Result, Sample, SynthError};
use crate::geometry::{estimate_homography_dlt, Homography, Point2, Quadrangle};

/// Largest accepted corner displacement, as a fraction of the card side.
pub const MAX_PERSPECTIVE: f64 = 0.25;
pub const PLACEMENT_ATTEMPTS: usize = 10;

/// Gradient, a few clutter rectangles and mild noise.
pub fn render_background(seed: u64, size: u32) -> RgbImage {
    let mut rng = rng_for(seed, 0xb6);
    let mut color = || [rng.random_range(20..235u8), rng.random_range(20..235u8), rng.random_range(20..235u8)];
    let (a, b) = (color(), color());
    let mut clutter: Vec<(u32, u32, u32, u32, [u8; 3])> = Vec::new();
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let n_clutter = rng.random_range(2..6);
    for _ in 0..n_clutter {
        let w = rng.random_range(size / 8..=size / 3);
        let h = rng.random_range(size / 8..=size / 3);
        let x = rng.random_range(0..size);
        let y = rng.random_range(0..size);
        let c = [rng.random_range(0..=255u8), rng.random_range(0..=255u8), rng.random_range(0..=255u8)];
        clutter.push((x, y, w, h, c));
    }
    let half = size as f64 / 2.0;
    let mut img = RgbImage::from_fn(size, size, |x, y| {
        let t = (((x as f64 - half) * dx + (y as f64 - half) * dy) / size as f64 + 0.5).clamp(0.0, 1.0);
        Rgb(std::array::from_fn(|c| (a[c] as f64 * (1.0 - t) + b[c] as f64 * t).round() as u8))
    });
    for (x, y, w, h, c) in clutter {
        for yy in y..(y + h).min(size) {
            for xx in x..(x + w).min(size) {
                img.put_pixel(xx, yy, Rgb(c));
            }
        }
    }
    for px in img.pixels_mut() {
        let n = rng.random_range(-6i16..=6);
        px.0 = px.0.map(|v| (v as i16 + n).clamp(0, 255) as u8);
    }
    img
}

fn unit_square() -> Quadrangle {
    Quadrangle::rectangle(0.0, 0.0, 1.0, 1.0)
}

/// Places a card: an upright rectangle of random size and position whose
/// corners are then each displaced by up to `perspective` times the card side.
fn place(card_ratio: f64, size: u32, perspective: f64, rng: &mut impl Rng) -> Quadrangle {
    let s = (size - 1) as f64;
    let long = rng.random_range(0.55..0.85) * s;
    let (w, h) = if card_ratio >= 1.0 { (long, long / card_ratio) } else { (long * card_ratio, long) };
    let (mx, my) = (perspective * w, perspective * h);
    let cx = rng.random_range((w / 2.0 + mx).min(s / 2.0)..=(s - w / 2.0 - mx).max(s / 2.0));
    let cy = rng.random_range((h / 2.0 + my).min(s / 2.0)..=(s - h / 2.0 - my).max(s / 2.0));
    let rect = Quadrangle::rectangle(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
    if perspective == 0.0 {
        return rect;
    }
    rect.map(|p| Point2::new(p.x + rng.random_range(-mx..=mx), p.y + rng.random_range(-my..=my)))
}

/// Renders `card` onto a procedural background of side `size`. The card's
/// outer edge (pixel borders, not centres) maps exactly onto the label.
pub fn composite_scene(
    card: &RgbImage,
    background_seed: u64,
    perspective: f64,
    size: u32,
) -> Result<(RgbImage, Quadrangle, Homography)> {
    if !(0.0..=MAX_PERSPECTIVE).contains(&perspective) {
        return Err(SynthError::Config(format!("perspective {perspective} outside [0, {MAX_PERSPECTIVE}]")));
    }
    if size < 8 {
        return Err(SynthError::Config(format!("scene size {size} is too small")));
    }
    let mut rng = rng_for(background_seed, 0x91ace);
    let ratio = card.width() as f64 / card.height() as f64;
    let mut last = String::new();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let quad = place(ratio, size, perspective, &mut rng);
        if !quad.in_frame(size as usize, size as usize) {
            last = format!("corner out of frame: {}", quad.to_json());
            continue;
        }
        if !(quad.is_well_formed() && quad.is_convex()) {
            last = format!("non-convex placement: {}", quad.to_json());
            continue;
        }
        let placement = estimate_homography_dlt(&unit_square().corners(), &quad.corners())?;
        let mut image = render_background(background_seed, size);
        paint_card(&mut image, card, &placement)?;
        return Ok((image, quad, placement));
    }
    Err(SynthError::Placement { attempts: PLACEMENT_ATTEMPTS, reason: last })
}

/// Draws the card with 2x2 supersampling so that its border is anti-aliased.
fn paint_card(scene: &mut RgbImage, card: &RgbImage, placement: &Homography) -> Result<()> {
    let inv = placement.inverse()?;
    let (cw, ch) = (card.width() as f64, card.height() as f64);
    const OFFSETS: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
    for (x, y, px) in scene.enumerate_pixels_mut() {
        let mut acc = [0.0f64; 3];
        let mut hits = 0;
        for (ox, oy) in OFFSETS {
            let uv = inv.apply(Point2::new(x as f64 + ox, y as f64 + oy));
            if !(uv.x >= 0.0 && uv.x <= 1.0 && uv.y >= 0.0 && uv.y <= 1.0) {
                continue;
            }
            let v = bilinear_clamped(card, uv.x * cw - 0.5, uv.y * ch - 0.5);
            for c in 0..3 {
                acc[c] += v[c];
            }
            hits += 1;
        }
        if hits > 0 {
            let bg = px.0;
            px.0 = std::array::from_fn(|c| {
                let v = (acc[c] + bg[c] as f64 * (4 - hits) as f64) / 4.0;
                v.round().clamp(0.0, 255.0) as u8
            });
        }
    }
    Ok(())
}

fn bilinear_clamped(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor(), y.floor());
    let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
    let (fx, fy) = (x - x0, y - y0);
    let p = |xx: f64, yy: f64| img.get_pixel(xx as u32, yy as u32).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    std::array::from_fn(|k| {
        (1.0 - fy) * ((1.0 - fx) * a[k] as f64 + fx * b[k] as f64) + fy * ((1.0 - fx) * c[k] as f64 + fx * d[k] as f64)
    })
}

impl Sample {
    /// Card of `class` from `seed`, composited at `size` with the given
    /// perspective magnitude.
    pub fn generate(class: DocClass, seed: u64, size: u32, perspective: f64) -> Result<Sample> {
        let style = class.style();
        let card = render_document(&style, seed, style.scale_for(size));
        let (image, label, placement) = composite_scene(&card, seed, perspective, size)?;
        Ok(Sample { image, label, class, seed, placement })
    }
}
