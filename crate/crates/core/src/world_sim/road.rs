//! Road centerline as a densely sampled polyline with constant half-width.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::wrap_angle;

/// Map-frame pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn transform(&self) -> crate::geometry::Transform2 {
        crate::geometry::Transform2::from_pose(self.x, self.y, self.theta)
    }

    pub fn from_transform(t: &crate::geometry::Transform2) -> Self {
        Self::new(t.x(), t.y(), t.heading())
    }

    /// Map coordinates of a point given in this pose's body frame.
    pub fn to_map(&self, forward: f64, left: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * forward - s * left, self.y + s * forward + c * left)
    }
}

/// One piece of road: a straight or a circular arc (signed curvature).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub half_width: f64,
    pub points: Vec<[f64; 2]>,
    #[serde(skip)]
    arc: Vec<f64>,
}

/// Closest point on a road: arc length, signed lateral offset (left positive)
/// and tangent heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub lateral: f64,
    pub heading: f64,
    pub distance: f64,
}

impl Road {
    pub fn from_points(points: Vec<[f64; 2]>, half_width: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("road needs at least two centerline points"));
        }
        if !(half_width > 0.0) {
            return Err(invalid(format!("road half-width {half_width} must be positive")));
        }
        let mut arc = Vec::with_capacity(points.len());
        let mut s = 0.0;
        arc.push(0.0);
        for w in points.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if !(d > 0.0) {
                return Err(invalid("road centerline has repeated points"));
            }
            s += d;
            arc.push(s);
        }
        Ok(Self {
            half_width,
            points,
            arc,
        })
    }

    /// Chains segments from the origin heading along +x, sampling every `step` metres.
    pub fn from_segments(segments: &[Segment], half_width: f64, step: f64) -> Result<Self> {
        let mut pts = vec![[0.0, 0.0]];
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        for seg in segments {
            let n = (seg.length / step).ceil().max(1.0) as usize;
            let ds = seg.length / n as f64;
            for _ in 0..n {
                if seg.curvature == 0.0 {
                    x += ds * th.cos();
                    y += ds * th.sin();
                } else {
                    let r = 1.0 / seg.curvature;
                    let nt = th + ds * seg.curvature;
                    x += r * (nt.sin() - th.sin());
                    y -= r * (nt.cos() - th.cos());
                    th = nt;
                }
                pts.push([x, y]);
            }
        }
        Self::from_points(pts, half_width)
    }

    /// Rebuilds derived data after deserialization.
    pub fn restore(self) -> Result<Self> {
        Self::from_points(self.points, self.half_width)
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    fn segment_heading(&self, i: usize) -> f64 {
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Pose on the centerline at arc length `s`, extrapolating past the ends.
    pub fn point_at(&self, s: f64) -> Pose {
        let n = self.points.len();
        let i = match self.arc.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.clamp(1, n - 1) - 1,
        };
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.arc[i + 1] - self.arc[i];
        let t = (s - self.arc[i]) / len;
        Pose::new(
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            self.segment_heading(i),
        )
    }

    /// Pose at arc length `s` shifted `lateral` metres to the left.
    pub fn offset_pose(&self, s: f64, lateral: f64) -> Pose {
        let p = self.point_at(s);
        let (x, y) = p.to_map(0.0, lateral);
        Pose::new(x, y, p.theta)
    }

    fn project_segment(&self, i: usize, x: f64, y: f64) -> Projection {
        let (a, b) = (self.points[i], self.points[i + 1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (a[0] + t * dx, a[1] + t * dy);
        let len = len2.sqrt();
        let cross = (dx * (y - a[1]) - dy * (x - a[0])) / len;
        Projection {
            s: self.arc[i] + t * len,
            lateral: cross,
            heading: dy.atan2(dx),
            distance: (x - px).hypot(y - py),
        }
    }

    /// Closest centerline point over the whole road (first minimum wins).
    pub fn project(&self, x: f64, y: f64) -> Projection {
        self.project_within(x, y, 0, self.points.len() - 1)
    }

    /// Closest point restricted to segments `[lo, hi)`.
    fn project_within(&self, x: f64, y: f64, lo: usize, hi: usize) -> Projection {
        let mut best = self.project_segment(lo, x, y);
        for i in lo + 1..hi {
            let p = self.project_segment(i, x, y);
            if p.distance < best.distance {
                best = p;
            }
        }
        best
    }

    /// Segment index range whose points lie within `radius` of `(x, y)`.
    pub fn window(&self, x: f64, y: f64, radius: f64) -> Option<(usize, usize)> {
        let r2 = radius * radius;
        let near = |p: &[f64; 2]| (p[0] - x).powi(2) + (p[1] - y).powi(2) <= r2;
        let lo = self.points.iter().position(near)?;
        let hi = self.points.iter().rposition(near)?;
        Some((lo.saturating_sub(1), (hi + 1).min(self.points.len() - 1)))
    }

    pub fn project_in(&self, x: f64, y: f64, window: (usize, usize)) -> Projection {
        self.project_within(x, y, window.0, window.1.max(window.0 + 1))
    }

    /// Closest point among segments within `span` metres of arc length `s_hint`.
    pub fn project_around(&self, x: f64, y: f64, s_hint: f64, span: f64) -> Projection {
        let lo = self.arc.partition_point(|v| *v < s_hint - span).saturating_sub(1);
        let hi = self.arc.partition_point(|v| *v <= s_hint + span).min(self.points.len() - 1);
        self.project_within(x, y, lo.min(self.points.len() - 2), hi.max(lo + 1))
    }

    pub fn on_road(&self, x: f64, y: f64) -> bool {
        self.project(x, y).distance <= self.half_width
    }

    /// Heading difference of the road tangent at `s` relative to `theta`.
    pub fn heading_error(&self, s: f64, theta: f64) -> f64 {
        wrap_angle(self.point_at(s).theta - theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn arc_ends_where_circle_says() {
        let r = 40.0;
        let road = Road::from_segments(
            &[Segment {
                length: r * FRAC_PI_2,
                curvature: 1.0 / r,
            }],
            4.0,
            0.25,
        )
        .unwrap();
        let end = road.points.last().unwrap();
        assert!((end[0] - r).abs() < 1e-9 && (end[1] - r).abs() < 1e-9);
        assert!((road.length() - r * FRAC_PI_2).abs() < 1e-3);
    }

    #[test]
    fn projection_on_straight() {
        let road = Road::from_segments(&[Segment { length: 50.0, curvature: 0.0 }], 4.0, 0.5).unwrap();
        let p = road.project(12.3, 2.0);
        assert!((p.s - 12.3).abs() < 1e-12);
        assert!((p.lateral - 2.0).abs() < 1e-12);
        assert!(road.on_road(10.0, -3.9));
        assert!(!road.on_road(10.0, 4.1));
        let q = road.offset_pose(20.0, -3.5);
        assert!((q.x - 20.0).abs() < 1e-12 && (q.y + 3.5).abs() < 1e-12);
    }

    #[test]
    fn extrapolates_past_ends() {
        let road = Road::from_segments(&[Segment { length: 10.0, curvature: 0.0 }], 4.0, 1.0).unwrap();
        assert!((road.point_at(-5.0).x + 5.0).abs() < 1e-12);
        assert!((road.point_at(15.0).x - 15.0).abs() < 1e-12);
    }
}
