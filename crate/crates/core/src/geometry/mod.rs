//! Corner coordinates to pixels and back: heatmap targets, peak decoding,
//! quadrangle IoU, homographies and rectification.
//!
//! Integer coordinates are pixel centres: pixel `(row, col)` sits at
//! `x = col, y = row`, with `y` growing downwards.

mod heatmap;
mod homography;
mod iou;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use heatmap::{
    decode_quadrangle, default_sigma, encode_targets, extract_peak, render_gaussian_heatmap, Detection, HeatmapStack,
    DEFAULT_SCORE_THRESHOLD,
};
pub use homography::{estimate_aspect_ratio, estimate_homography_dlt, rectify, warp_image, Homography};
pub use iou::{quad_iou, quad_iou_raster_oracle, Iou};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("singular homography: {0}")]
    Singular(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// `(b - a) x (c - a)`; positive when `a -> b -> c` turns clockwise on screen.
pub(crate) fn cross(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Shoelace area, positive for clockwise-on-screen traversal. Coordinates are
/// taken relative to the first vertex to limit cancellation.
pub(crate) fn signed_area(poly: &[Point2]) -> f64 {
    let Some(&o) = poly.first() else { return 0.0 };
    let mut s = 0.0;
    for i in 1..poly.len().saturating_sub(1) {
        s += cross(o, poly[i], poly[i + 1]);
    }
    0.5 * s
}

/// Four document corners in role order. The roles, not the image axes,
/// carry the document's orientation.
///
/// JSON form: `{"tl":[x,y],"tr":[x,y],"bl":[x,y],"br":[x,y]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrangle {
    pub tl: Point2,
    pub tr: Point2,
    pub bl: Point2,
    pub br: Point2,
}

impl Quadrangle {
    pub const fn new(tl: Point2, tr: Point2, bl: Point2, br: Point2) -> Self {
        Self { tl, tr, bl, br }
    }

    /// Corners in role (and heatmap channel) order: TL, TR, BL, BR.
    pub fn from_corners(c: [Point2; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// Axis-aligned rectangle spanning `(x0, y0)` to `(x1, y1)`.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(Point2::new(x0, y0), Point2::new(x1, y0), Point2::new(x0, y1), Point2::new(x1, y1))
    }

    pub fn corners(&self) -> [Point2; 4] {
        [self.tl, self.tr, self.bl, self.br]
    }

    /// Boundary traversal TL -> TR -> BR -> BL.
    pub fn polygon(&self) -> [Point2; 4] {
        [self.tl, self.tr, self.br, self.bl]
    }

    pub fn map(&self, mut f: impl FnMut(Point2) -> Point2) -> Self {
        Self::from_corners(self.corners().map(&mut f))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        self.map(|p| Point2::new(p.x + dx, p.y + dy))
    }

    /// Positive when the traversal runs clockwise on screen, as for an
    /// upright document.
    pub fn signed_area(&self) -> f64 {
        signed_area(&self.polygon())
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn is_finite(&self) -> bool {
        self.corners().iter().all(|p| p.is_finite())
    }

    /// True when the traversal does not cross itself and encloses a positive area.
    pub fn is_simple(&self) -> bool {
        let [a, b, c, d] = self.polygon();
        self.is_finite() && self.area() > 1e-12 && !segments_cross(a, b, c, d) && !segments_cross(b, c, d, a)
    }

    /// Simple, and upright (not mirrored): what a document under any
    /// orientation-preserving view produces.
    pub fn is_well_formed(&self) -> bool {
        self.is_simple() && self.signed_area() > 0.0
    }

    pub fn is_convex(&self) -> bool {
        let p = self.polygon();
        let turns: Vec<f64> = (0..4).map(|i| cross(p[i], p[(i + 1) % 4], p[(i + 2) % 4])).collect();
        turns.iter().all(|&t| t >= 0.0) || turns.iter().all(|&t| t <= 0.0)
    }

    /// All corners inside `[0, width-1] x [0, height-1]`.
    pub fn in_frame(&self, width: usize, height: usize) -> bool {
        let (w, h) = ((width as f64) - 1.0, (height as f64) - 1.0);
        self.corners().iter().all(|p| p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("quadrangle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let q: Self = serde_json::from_str(text).map_err(|e| GeometryError::Argument(format!("quadrangle JSON: {e}")))?;
        if !q.is_finite() {
            return Err(GeometryError::Argument("quadrangle has non-finite coordinates".into()));
        }
        Ok(q)
    }
}

/// Whether segments `ab` and `cd` intersect, touching included.
fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: Point2, q: Point2, r: Point2| {
        r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    (d1 == 0.0 && on(c, d, a)) || (d2 == 0.0 && on(c, d, b)) || (d3 == 0.0 && on(a, b, c)) || (d4 == 0.0 && on(a, b, d))
}
