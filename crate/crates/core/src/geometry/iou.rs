use std::cmp::Ordering;

use super::{cross, signed_area, Point2, Quadrangle};

/// Grid used when a non-convex quadrangle forces the raster path.
const FALLBACK_GRID: usize = 1024;
const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// Set when either input has (near) zero area; `value` is then 0.
    pub degenerate: bool,
}

/// Intersection over union of two quadrangles. Convex pairs are clipped
/// exactly; anything else falls back to [`quad_iou_raster_oracle`].
pub fn quad_iou(a: &Quadrangle, b: &Quadrangle) -> Iou {
    if !a.is_finite() || !b.is_finite() || a.area() < MIN_AREA || b.area() < MIN_AREA {
        return Iou { value: 0.0, degenerate: true };
    }
    if a == b {
        return Iou { value: 1.0, degenerate: false };
    }
    if !(a.is_simple() && b.is_simple() && a.is_convex() && b.is_convex()) {
        return Iou { value: quad_iou_raster_oracle(a, b, FALLBACK_GRID), degenerate: false };
    }
    // Clip in a canonical order so that the result is exactly symmetric.
    let (p, q) = if canonical_cmp(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let inter = signed_area(&clip(&clockwise(p), &clockwise(q))).abs();
    let union = p.area() + q.area() - inter;
    Iou { value: (inter / union).clamp(0.0, 1.0), degenerate: false }
}

fn canonical_cmp(a: &Quadrangle, b: &Quadrangle) -> Ordering {
    let flat = |q: &Quadrangle| q.corners().map(|p| [p.x, p.y]).concat();
    flat(a).iter().zip(flat(b).iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

fn clockwise(q: &Quadrangle) -> Vec<Point2> {
    let mut p = q.polygon().to_vec();
    if signed_area(&p) < 0.0 {
        p.reverse();
    }
    p
}

/// Sutherland-Hodgman: `subject` clipped by the convex, clockwise-on-screen `clipper`.
fn clip(subject: &[Point2], clipper: &[Point2]) -> Vec<Point2> {
    let mut out = subject.to_vec();
    for i in 0..clipper.len() {
        if out.is_empty() {
            break;
        }
        let (e0, e1) = (clipper[i], clipper[(i + 1) % clipper.len()]);
        let input = std::mem::take(&mut out);
        let inside = |p: Point2| cross(e0, e1, p) >= 0.0;
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(intersect(prev, cur, e0, e1)),
                (false, true) => {
                    out.push(intersect(prev, cur, e0, e1));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    out
}

/// Point where segment `pq` meets the line through `e0, e1`.
fn intersect(p: Point2, q: Point2, e0: Point2, e1: Point2) -> Point2 {
    let dp = cross(e0, e1, p);
    let dq = cross(e0, e1, q);
    let t = dp / (dp - dq);
    Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Even-odd point-in-polygon test.
fn contains(poly: &[Point2; 4], p: Point2) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// IoU by counting the centres of a `grid x grid` lattice over the joint
/// bounding box that fall inside each quadrangle.
pub fn quad_iou_raster_oracle(a: &Quadrangle, b: &Quadrangle, grid: usize) -> f64 {
    let pts: Vec<Point2> = a.corners().into_iter().chain(b.corners()).collect();
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.x), hi.max(p.x)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
    if !(x1 > x0 && y1 > y0) || grid == 0 {
        return 0.0;
    }
    let (pa, pb) = (a.polygon(), b.polygon());
    let (dx, dy) = ((x1 - x0) / grid as f64, (y1 - y0) / grid as f64);
    let (mut inter, mut union) = (0u64, 0u64);
    for r in 0..grid {
        let y = y0 + (r as f64 + 0.5) * dy;
        for c in 0..grid {
            let p = Point2::new(x0 + (c as f64 + 0.5) * dx, y);
            let (ia, ib) = (contains(&pa, p), contains(&pb, p));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
