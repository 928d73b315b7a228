//! Area of a simple polygon inside an axis-aligned rectangle.
//!
//! The polygon boundary is integrated edge by edge: each edge contributes the
//! signed trapezoid area between the edge (clamped to the rectangle's y-range)
//! and the rectangle's bottom, over the part of the edge that lies within the
//! rectangle's x-range. Summing over a closed ring gives the exact area of the
//! intersection for convex and concave rings alike.

use super::PracticeError;

pub type Point = [f64; 2];

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.xmin < other.xmax && other.xmin < self.xmax && self.ymin < other.ymax && other.ymin < self.ymax
    }
}

/// Bounding box of a ring.
pub fn bounding_box(ring: &[Point]) -> Rect {
    let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in ring {
        r.xmin = r.xmin.min(p[0]);
        r.ymin = r.ymin.min(p[1]);
        r.xmax = r.xmax.max(p[0]);
        r.ymax = r.ymax.max(p[1]);
    }
    r
}

/// Shoelace signed area, positive for counter-clockwise rings.
pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc / 2.0
}

/// Drops a repeated closing vertex, as written by GeoJSON.
pub fn open_ring(mut ring: Vec<Point>) -> Vec<Point> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

fn orientation(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Checks that a ring has at least three vertices, a non-zero area, and no
/// intersections between non-adjacent edges.
pub fn validate_ring(ring: &[Point]) -> Result<(), PracticeError> {
    if ring.len() < 3 || !ring.iter().all(|p| p[0].is_finite() && p[1].is_finite()) {
        return Err(PracticeError::DegeneratePolygon);
    }
    let n = ring.len();
    for i in 0..n {
        let (a1, a2) = (ring[i], ring[(i + 1) % n]);
        if a1 == a2 {
            return Err(PracticeError::DegeneratePolygon);
        }
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(a1, a2, ring[j], ring[(j + 1) % n]) {
                return Err(PracticeError::NonSimplePolygon);
            }
        }
    }
    if signed_area(ring) == 0.0 {
        return Err(PracticeError::DegeneratePolygon);
    }
    Ok(())
}

/// Integral of `clamp(y(x), ymin, ymax) - ymin` along one edge over the
/// rectangle's x-range, signed by the direction of travel in x.
fn edge_trapezoid(a: Point, b: Point, rect: &Rect) -> f64 {
    let ([x0, y0], [x1, y1]) = (a, b);
    if x0 == x1 {
        return 0.0;
    }
    let lo = x0.min(x1).max(rect.xmin);
    let hi = x0.max(x1).min(rect.xmax);
    if lo >= hi {
        return 0.0;
    }
    let slope = (y1 - y0) / (x1 - x0);
    let height = |x: f64| (y0 + slope * (x - x0)).clamp(rect.ymin, rect.ymax) - rect.ymin;

    let mut breaks = [lo, hi, lo, lo];
    let mut len = 2;
    if y0 != y1 {
        for yc in [rect.ymin, rect.ymax] {
            let xc = x0 + (yc - y0) * (x1 - x0) / (y1 - y0);
            if xc > lo && xc < hi {
                breaks[len] = xc;
                len += 1;
            }
        }
    }
    let breaks = &mut breaks[..len];
    breaks.sort_by(f64::total_cmp);

    let mut integral = 0.0;
    for w in breaks.windows(2) {
        integral += 0.5 * (height(w[0]) + height(w[1])) * (w[1] - w[0]);
    }
    if x1 > x0 {
        integral
    } else {
        -integral
    }
}

/// Unsigned area of `ring ∩ rect`.
pub fn ring_rect_intersection_area(ring: &[Point], rect: &Rect) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc -= edge_trapezoid(ring[i], ring[(i + 1) % n], rect);
    }
    acc.abs()
}

/// Polygon with optional holes; all rings open (no repeated closing vertex).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<Point>,
    pub holes: Vec<Vec<Point>>,
}

impl Polygon {
    pub fn new(exterior: Vec<Point>) -> Self {
        Self { exterior, holes: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), PracticeError> {
        validate_ring(&self.exterior)?;
        for h in &self.holes {
            validate_ring(h)?;
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.exterior).abs() - self.holes.iter().map(|h| signed_area(h).abs()).sum::<f64>()
    }

    pub fn bounding_box(&self) -> Rect {
        bounding_box(&self.exterior)
    }

    pub fn intersection_area(&self, rect: &Rect) -> f64 {
        let outer = ring_rect_intersection_area(&self.exterior, rect);
        let holes: f64 = self.holes.iter().map(|h| ring_rect_intersection_area(h, rect)).sum();
        (outer - holes).max(0.0)
    }
}
