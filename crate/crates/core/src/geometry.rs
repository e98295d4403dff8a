//! Small planar geometry helpers shared by the oracle, renderer and metrics.

use crate::scene::{Extent, Point};

/// Distance from `p` to an oriented rectangle; zero inside.
pub fn point_box_distance(p: Point, center: Point, heading: f64, extent: Extent) -> f64 {
    let d = p - center;
    let (s, c) = heading.sin_cos();
    let lon = d.x * c + d.y * s;
    let lat = -d.x * s + d.y * c;
    let ex = (lon.abs() - extent.length / 2.0).max(0.0);
    let ey = (lat.abs() - extent.width / 2.0).max(0.0);
    ex.hypot(ey)
}

/// An oriented rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point,
    pub heading: f64,
    pub extent: Extent,
}

impl OrientedBox {
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.extent.length / 2.0, self.extent.width / 2.0);
        let f = Point::new(c, s) * hl;
        let l = Point::new(-s, c) * hw;
        let o = self.center;
        [o + f + l, o + f - l, o - f - l, o - f + l]
    }

    pub fn distance_to_point(&self, p: Point) -> f64 {
        point_box_distance(p, self.center, self.heading, self.extent)
    }
}

/// Gap between two oriented rectangles; zero when they overlap.
pub fn box_box_distance(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    // separating-axis test over the four edge normals
    let axes = [a.heading, a.heading + std::f64::consts::FRAC_PI_2, b.heading, b.heading + std::f64::consts::FRAC_PI_2];
    let separated = axes.iter().any(|&t| {
        let n = Point::new(t.cos(), t.sin());
        let proj = |pts: &[Point; 4]| {
            pts.iter()
                .map(|p| p.x * n.x + p.y * n.y)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let ((alo, ahi), (blo, bhi)) = (proj(&ca), proj(&cb));
        ahi < blo || bhi < alo
    });
    if !separated {
        return 0.0;
    }
    // disjoint convex polygons are closest at a vertex of one of them
    let ab = ca.iter().map(|&p| b.distance_to_point(p));
    let ba = cb.iter().map(|&p| a.distance_to_point(p));
    ab.chain(ba).fold(f64::INFINITY, f64::min)
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

pub fn point_polyline_distance(p: Point, line: &[Point]) -> f64 {
    match line {
        [] => f64::INFINITY,
        [only] => p.dist(*only),
        _ => line
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Mean pointwise distance of two equal-length point lists.
pub fn mean_distance(a: &[Point], b: &[Point]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(p, q)| p.dist(*q)).sum::<f64>() / a.len() as f64
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(mut a: f64) -> f64 {
    use std::f64::consts::PI;
    while a > PI {
        a -= 2.0 * PI;
    }
    while a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Resamples a polyline at `n` points evenly spaced in arc length.
pub fn resample(line: &[Point], n: usize) -> Vec<Point> {
    if line.is_empty() || n == 0 {
        return vec![Point::ORIGIN; n];
    }
    if line.len() == 1 || n == 1 {
        return vec![line[0]; n];
    }
    let mut cum = vec![0.0];
    for w in line.windows(2) {
        cum.push(cum.last().unwrap() + w[0].dist(w[1]));
    }
    let total = *cum.last().unwrap();
    (0..n)
        .map(|i| {
            let target = total * i as f64 / (n - 1) as f64;
            let j = cum.partition_point(|&c| c < target).clamp(1, line.len() - 1);
            let seg = cum[j] - cum[j - 1];
            let u = if seg > 0.0 { (target - cum[j - 1]) / seg } else { 0.0 };
            line[j - 1] + (line[j] - line[j - 1]) * u
        })
        .collect()
}
