//! Synthetic structured documents: five card styles, scenes with known
//! placement homographies, label-consistent augmentation, and on-disk datasets.

mod augment;
mod dataset;
mod scene;

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Homography, Quadrangle};
use crate::tensor::Tensor;

pub use augment::{apply_geometric, augment, augment_with, AugmentConfig};
pub use dataset::{
    class_counts, generate_dataset, load_dataset, plan_splits, read_manifest, save_dataset, split_counts, ClassData, DataConfig,
    Dataset, DatasetSplit, Manifest, Split, DATASET_FORMAT_VERSION,
};
pub use scene::{composite_scene, render_background, MAX_PERSPECTIVE, PLACEMENT_ATTEMPTS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("placement failed after {attempts} attempts: {reason}")]
    Placement { attempts: usize, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {reason}")]
    Dataset { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// SplitMix64 finalizer, used to derive independent seeds from one.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DocClass {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "DL")]
    Dl,
    #[serde(rename = "P")]
    P,
    #[serde(rename = "RP")]
    Rp,
    #[serde(rename = "VRC")]
    Vrc,
}

impl DocClass {
    pub const ALL: [DocClass; 5] = [DocClass::Id, DocClass::Dl, DocClass::P, DocClass::Rp, DocClass::Vrc];
    /// Share of each class in the reference mix, in `ALL` order.
    pub const REFERENCE_MIX: [f64; 5] = [0.21, 0.19, 0.25, 0.14, 0.21];

    pub fn name(self) -> &'static str {
        match self {
            DocClass::Id => "ID",
            DocClass::Dl => "DL",
            DocClass::P => "P",
            DocClass::Rp => "RP",
            DocClass::Vrc => "VRC",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn style(self) -> DocClassStyle {
        let (units, palette, header, photo) = match self {
            DocClass::Id => ((8, 5), [[196, 216, 240], [28, 62, 138], [36, 40, 64]], 0.20, Some(PhotoSide::Left)),
            DocClass::Dl => ((13, 10), [[242, 196, 208], [168, 36, 92], [70, 28, 44]], 0.16, Some(PhotoSide::Left)),
            DocClass::P => ((7, 5), [[236, 224, 184], [118, 22, 34], [48, 40, 30]], 0.14, Some(PhotoSide::Left)),
            DocClass::Rp => ((7, 4), [[196, 236, 200], [24, 110, 58], [30, 56, 40]], 0.22, Some(PhotoSide::Right)),
            DocClass::Vrc => ((5, 7), [[246, 240, 196], [206, 118, 18], [60, 50, 20]], 0.12, None),
        };
        DocClassStyle { class: self, units, palette, header_fraction: header, photo }
    }

    /// Comma-separated class names, e.g. `ID,DL`.
    pub fn parse_list(text: &str) -> Result<Vec<DocClass>, String> {
        let mut out: Vec<DocClass> = Vec::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let c: DocClass = part.parse()?;
            if !out.contains(&c) {
                out.push(c);
            }
        }
        if out.is_empty() {
            return Err("empty class list".into());
        }
        out.sort();
        Ok(out)
    }

    pub fn list_name(classes: &[DocClass]) -> String {
        classes.iter().map(|c| c.name()).collect::<Vec<_>>().join("+")
    }
}

impl fmt::Display for DocClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DocClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        DocClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown class {s:?}; expected one of ID, DL, P, RP, VRC"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhotoSide {
    Left,
    Right,
}

/// Visual recipe of one document class.
#[derive(Debug, Clone, PartialEq)]
pub struct DocClassStyle {
    pub class: DocClass,
    /// Card width and height in layout units; the aspect ratio is their quotient.
    pub units: (u32, u32),
    /// Background, header band, ink.
    pub palette: [[u8; 3]; 3],
    pub header_fraction: f64,
    pub photo: Option<PhotoSide>,
}

impl DocClassStyle {
    pub fn aspect_ratio(&self) -> f64 {
        self.units.0 as f64 / self.units.1 as f64
    }

    /// Pixel size of a card rendered at `scale` pixels per unit.
    pub fn card_size(&self, scale: u32) -> (u32, u32) {
        (self.units.0 * scale, self.units.1 * scale)
    }

    /// Smallest scale whose longer side reaches `pixels`.
    pub fn scale_for(&self, pixels: u32) -> u32 {
        pixels.div_ceil(self.units.0.max(self.units.1)).max(1)
    }
}

fn jitter(c: [u8; 3], rng: &mut ChaCha8Rng, amount: i32) -> Rgb<u8> {
    Rgb(c.map(|v| (v as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8))
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

/// Card of `style` at `scale` pixels per layout unit: header band, photo
/// block, rows of text-like bars. Bit-identical for equal inputs.
pub fn render_document(style: &DocClassStyle, seed: u64, scale: u32) -> RgbImage {
    let mut rng = rng_for(seed, 0xca7d);
    let (w, h) = style.card_size(scale);
    let [base, header, ink] = style.palette;
    let base_c = jitter(base, &mut rng, 6);
    let mut img = RgbImage::from_pixel(w, h, base_c);
    // Faint diagonal guilloche so the background is not flat.
    let period = 3.0 + 2.0 * style.class.index() as f64;
    for (x, y, px) in img.enumerate_pixels_mut() {
        let t = ((x as f64 + 0.7 * y as f64) / period).sin();
        px.0 = px.0.map(|v| (v as f64 + 6.0 * t).clamp(0.0, 255.0) as u8);
    }
    let wf = |f: f64| (f * w as f64).round() as u32;
    let hf = |f: f64| (f * h as f64).round() as u32;

    let band = hf(style.header_fraction).max(1);
    fill(&mut img, 0, 0, w, band, jitter(header, &mut rng, 6));
    let title_len = rng.random_range(0.3..0.6);
    fill(&mut img, wf(0.06), band / 3, wf(0.06 + title_len), band * 2 / 3 + 1, Rgb(base));

    let (text_x0, text_x1) = match style.photo {
        Some(side) => {
            let pw = wf(0.28);
            let ph = hf(0.5);
            let py = band + hf(0.08) + rng.random_range(0..=hf(0.04));
            let px = match side {
                PhotoSide::Left => wf(0.05),
                PhotoSide::Right => w - wf(0.05) - pw,
            };
            let tone = rng.random_range(90..150u8);
            fill(&mut img, px, py, px + pw, py + ph, Rgb([tone, tone - 20, tone - 40]));
            // Head-and-shoulders silhouette.
            let (cx, cy, r) = (px as f64 + pw as f64 / 2.0, py as f64 + ph as f64 * 0.4, pw as f64 * 0.28);
            for y in py..(py + ph).min(h) {
                for x in px..(px + pw).min(w) {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let head = dx * dx + dy * dy < r * r;
                    let body = y as f64 > cy + r * 1.1 && dx.abs() < r * 1.6;
                    if head || body {
                        img.put_pixel(x, y, Rgb([tone / 3, tone / 3, tone / 2]));
                    }
                }
            }
            match side {
                PhotoSide::Left => (px + pw + wf(0.05), w - wf(0.05)),
                PhotoSide::Right => (wf(0.05), px - wf(0.05)),
            }
        }
        None => (wf(0.06), w - wf(0.06)),
    };

    let row_h = (h as f64 * 0.055).max(1.0);
    let mut y = band as f64 + row_h * 1.5;
    let ink_c = Rgb(ink);
    while y + row_h < h as f64 * 0.92 {
        let span = (text_x1.saturating_sub(text_x0)) as f64;
        let len = span * rng.random_range(0.35..1.0);
        let y0 = y.round() as u32;
        fill(&mut img, text_x0, y0, text_x0 + len.round() as u32, y0 + (row_h * 0.6).round().max(1.0) as u32, ink_c);
        y += row_h * 1.8;
    }
    if style.class == DocClass::Vrc {
        // Form grid.
        for k in 1..4 {
            let gx = wf(0.06 + 0.22 * k as f64);
            fill(&mut img, gx, band, gx + 1, hf(0.92), Rgb(header));
        }
    }
    if style.class == DocClass::P {
        // Machine-readable zone.
        let y0 = hf(0.86);
        fill(&mut img, wf(0.04), y0, wf(0.96), hf(0.95), Rgb([250, 250, 250]));
        for k in 0..2 {
            let yy = y0 + 1 + k * hf(0.045);
            fill(&mut img, wf(0.05), yy, wf(0.95), yy + hf(0.02).max(1), ink_c);
        }
    }
    // Thin edge in the header colour.
    let edge = Rgb(header);
    for x in 0..w {
        img.put_pixel(x, 0, edge);
        img.put_pixel(x, h - 1, edge);
    }
    for y in 0..h {
        img.put_pixel(0, y, edge);
        img.put_pixel(w - 1, y, edge);
    }
    img
}

/// One image with its corner label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub label: Quadrangle,
    pub class: DocClass,
    pub seed: u64,
    /// Maps the card's unit square (TL at (0,0), BR at (1,1)) onto the label.
    pub placement: Homography,
}

impl Sample {
    /// `[3, H, W]` with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        image_to_tensor(&self.image)
    }
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sizes agree")
}
