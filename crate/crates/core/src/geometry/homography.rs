use image::RgbImage;
use nalgebra::{Matrix3, SMatrix, Vector3};

use super::{cross, GeometryError, Point2, Quadrangle, Result};

/// Projective map of the plane, stored with `h33 = 1` whenever `h33 != 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let h33 = m[(2, 2)];
        Self { m: if h33 != 0.0 { m / h33 } else { m } }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self::from_rows([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self::from_rows([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation by `angle` radians (clockwise on screen) about `center`.
    pub fn rotation(angle: f64, center: Point2) -> Self {
        let (s, c) = angle.sin_cos();
        let r = Self::from_rows([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]);
        Self::translation(-center.x, -center.y).then(&r).then(&Self::translation(center.x, center.y))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.m[(r, c)]))
    }

    /// Non-finite for points on the vanishing line.
    pub fn apply(&self, p: Point2) -> Point2 {
        let v = self.m * Vector3::new(p.x, p.y, 1.0);
        Point2::new(v.x / v.z, v.y / v.z)
    }

    /// `self` first, then `next`.
    pub fn then(&self, next: &Homography) -> Homography {
        Self::from_matrix(next.m * self.m)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let scale = self.m.abs().max();
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::Singular("matrix is zero or non-finite".into()));
        }
        let det = (self.m / scale).determinant();
        if det.abs() < 1e-12 {
            return Err(GeometryError::Singular(format!("relative determinant {det:.3e}")));
        }
        let inv = self.m.try_inverse().ok_or_else(|| GeometryError::Singular("inverse failed".into()))?;
        Ok(Self::from_matrix(inv))
    }
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(pts: &[Point2; 4]) -> Result<(Matrix3<f64>, [Point2; 4])> {
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mean = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / 4.0;
    if !(mean.is_finite() && mean > 1e-12) {
        return Err(GeometryError::Degenerate("points coincide or are non-finite".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    Ok((t, pts.map(|p| Point2::new(s * (p.x - cx), s * (p.y - cy)))))
}

fn check_collinear(pts: &[Point2; 4], which: &str) -> Result<()> {
    for (i, j, k) in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)] {
        let c = cross(pts[i], pts[j], pts[k]);
        if c.abs() < 1e-9 {
            return Err(GeometryError::Degenerate(format!(
                "{which} points {i}, {j}, {k} are collinear (normalized cross product {c:.3e})"
            )));
        }
    }
    Ok(())
}

/// Homography mapping each `src[i]` onto `dst[i]`, from the 8 equations of
/// four correspondences in normalized coordinates.
pub fn estimate_homography_dlt(src: &[Point2; 4], dst: &[Point2; 4]) -> Result<Homography> {
    let (ts, s) = normalizer(src)?;
    let (td, d) = normalizer(dst)?;
    check_collinear(&s, "source")?;
    check_collinear(&d, "destination")?;
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..4 {
        let (x, y, u, v) = (s[i].x, s[i].y, d[i].x, d[i].y);
        let r0 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        let r1 = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    // The ninth row stays zero; the null vector of the 8 equations is the
    // right singular vector of the smallest singular value.
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| GeometryError::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (smallest, second) = (order[0], order[1]);
    let ratio = svd.singular_values[second] / svd.singular_values[order[8]];
    if !(ratio > 1e-10) {
        return Err(GeometryError::Degenerate(format!("correspondences are rank deficient (singular value ratio {ratio:.3e})")));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().expect("similarity is invertible");
    let m = td_inv * hn * ts;
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::Degenerate("non-finite solution".into()));
    }
    Ok(Homography::from_matrix(m))
}

/// Width over height from the mean lengths of opposite edges, clamped to [0.2, 5].
pub fn estimate_aspect_ratio(quad: &Quadrangle) -> Result<f64> {
    let top = quad.tl.distance(quad.tr);
    let bottom = quad.bl.distance(quad.br);
    let left = quad.tl.distance(quad.bl);
    let right = quad.tr.distance(quad.br);
    if [top, bottom, left, right].iter().any(|&e| !(e > 1e-9)) {
        return Err(GeometryError::Argument(format!(
            "zero-length edge (top {top}, bottom {bottom}, left {left}, right {right})"
        )));
    }
    Ok(((top + bottom) / (left + right)).clamp(0.2, 5.0))
}

/// Bilinear sample at a pixel-centre coordinate; `None` outside the image.
fn sample(img: &RgbImage, x: f64, y: f64) -> Option<[f64; 3]> {
    const SLACK: f64 = 1e-9;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if !(x >= -SLACK && y >= -SLACK && x <= (w - 1) as f64 + SLACK && y <= (h - 1) as f64 + SLACK) {
        return None;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let px = |xx: usize, yy: usize| img.get_pixel(xx as u32, yy as u32).0;
    let (p00, p01, p10, p11) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
    Some(std::array::from_fn(|c| {
        let top = (1.0 - fx) * p00[c] as f64 + fx * p01[c] as f64;
        let bottom = (1.0 - fx) * p10[c] as f64 + fx * p11[c] as f64;
        (1.0 - fy) * top + fy * bottom
    }))
}

/// Resamples `image` through `h` (source to output coordinates) by inverse
/// mapping with bilinear interpolation. Output pixels whose preimage falls
/// outside the source are 0.
pub fn warp_image(image: &RgbImage, h: &Homography, out_width: u32, out_height: u32) -> Result<RgbImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(GeometryError::Argument("empty source image".into()));
    }
    let inv = h.inverse()?;
    let mut out = RgbImage::new(out_width, out_height);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let p = inv.apply(Point2::new(x as f64, y as f64));
        if let Some(v) = sample(image, p.x, p.y) {
            px.0 = v.map(|c| (c + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Warps the region inside `quad` onto an upright `round(ratio * h) x h`
/// rectangle whose corner pixel centres are the images of TL, TR, BL, BR.
/// Returns the image and the quad-to-rectangle homography.
pub fn rectify(image: &RgbImage, quad: &Quadrangle, target_height: u32) -> Result<(RgbImage, Homography)> {
    if target_height < 2 {
        return Err(GeometryError::Argument(format!("target height {target_height} is below 2")));
    }
    if !quad.is_simple() {
        return Err(GeometryError::Degenerate(format!("quadrangle {} is not simple", quad.to_json())));
    }
    let ratio = estimate_aspect_ratio(quad)?;
    let width = ((ratio * target_height as f64).round() as u32).max(2);
    let (w, h) = ((width - 1) as f64, (target_height - 1) as f64);
    let rect = Quadrangle::rectangle(0.0, 0.0, w, h);
    let hom = estimate_homography_dlt(&quad.corners(), &rect.corners())?;
    Ok((warp_image(image, &hom, width, target_height)?, hom))
}
