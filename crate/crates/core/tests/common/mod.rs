#![allow(dead_code)]

use image::RgbImage;
use rand::Rng;
use sdlnet::geometry::{Point2, Quadrangle};

/// Convex quadrangle with corners on a rotated ellipse, in role order.
pub fn random_convex_quad<R: Rng>(rng: &mut R, center: Point2, max_radius: f64) -> Quadrangle {
    loop {
        let rx = rng.random_range(0.3..1.0) * max_radius;
        let ry = rng.random_range(0.3..1.0) * max_radius;
        let tilt: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut angles: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let pts: Vec<Point2> = angles
            .iter()
            .map(|&a| {
                let (ex, ey) = (rx * a.cos(), ry * a.sin());
                let (s, c) = tilt.sin_cos();
                Point2::new(center.x + c * ex - s * ey, center.y + s * ex + c * ey)
            })
            .collect();
        // Increasing angle runs clockwise on screen: TL, TR, BR, BL.
        let q = Quadrangle::new(pts[0], pts[1], pts[3], pts[2]);
        if q.area() > 0.05 * max_radius * max_radius && q.is_well_formed() {
            return q;
        }
    }
}

pub fn smooth_image(width: u32, height: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        let (x, y) = (x as f64, y as f64);
        let v = |a: f64, b: f64, o: f64| (128.0 + 90.0 * (x / a + o).sin() * (y / b).cos()).round() as u8;
        image::Rgb([v(7.0, 9.0, 0.0), v(11.0, 5.0, 1.0), v(13.0, 17.0, 2.0)])
    })
}

/// Peak signal-to-noise ratio over the pixels where `mask` holds.
pub fn psnr_masked(a: &RgbImage, b: &RgbImage, mask: impl Fn(u32, u32) -> bool) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    let (mut se, mut n) = (0.0, 0usize);
    for (x, y, p) in a.enumerate_pixels() {
        if mask(x, y) {
            let q = b.get_pixel(x, y);
            for c in 0..3 {
                se += (p.0[c] as f64 - q.0[c] as f64).powi(2);
            }
            n += 3;
        }
    }
    assert!(n > 0, "empty mask");
    let mse = se / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    psnr_masked(a, b, |_, _| true)
}

/// Direct bilinear crop of `[x0, x1] x [y0, y1]` resized to `w x h`, with
/// the crop corners landing on the output corner pixel centres.
pub fn crop_resize(img: &RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |i, j| {
        let sx = x0 + i as f64 * (x1 - x0) / (w - 1) as f64;
        let sy = y0 + j as f64 * (y1 - y0) / (h - 1) as f64;
        let (ix, iy) = (sx.floor() as u32, sy.floor() as u32);
        let (fx, fy) = (sx - ix as f64, sy - iy as f64);
        let get = |x: u32, y: u32| img.get_pixel(x.min(img.width() - 1), y.min(img.height() - 1)).0;
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = (1.0 - fy) * ((1.0 - fx) * get(ix, iy)[c] as f64 + fx * get(ix + 1, iy)[c] as f64)
                + fy * ((1.0 - fx) * get(ix, iy + 1)[c] as f64 + fx * get(ix + 1, iy + 1)[c] as f64);
            out[c] = v.round() as u8;
        }
        image::Rgb(out)
    })
}
