//! Oriented rectangles and separating-axis overlap tests.

use super::road::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(pose: Pose, length: f64, width: f64) -> Self {
        Self {
            center: [pose.x, pose.y],
            heading: pose.theta,
            half_length: length / 2.0,
            half_width: width / 2.0,
        }
    }

    pub fn inflated(mut self, margin: f64) -> Self {
        self.half_length += margin;
        self.half_width += margin;
        self
    }

    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [u, v] = self.axes();
        let (l, w) = (self.half_length, self.half_width);
        let at = |a: f64, b: f64| {
            [
                self.center[0] + a * u[0] + b * v[0],
                self.center[1] + a * u[1] + b * v[1],
            ]
        };
        [at(l, w), at(l, -w), at(-l, -w), at(-l, w)]
    }

    fn radius_along(&self, axis: [f64; 2]) -> f64 {
        let [u, v] = self.axes();
        self.half_length * (u[0] * axis[0] + u[1] * axis[1]).abs()
            + self.half_width * (v[0] * axis[0] + v[1] * axis[1]).abs()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [u, v] = self.axes();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (dx * u[0] + dy * u[1]).abs() <= self.half_length && (dx * v[0] + dy * v[1]).abs() <= self.half_width
    }
}

/// True when the rectangles share any point (touching counts).
pub fn overlaps(a: &OrientedBox, b: &OrientedBox) -> bool {
    let d = [b.center[0] - a.center[0], b.center[1] - a.center[1]];
    a.axes().into_iter().chain(b.axes()).all(|axis| {
        let dist = (d[0] * axis[0] + d[1] * axis[1]).abs();
        dist <= a.radius_along(axis) + b.radius_along(axis)
    })
}

/// Finite-difference velocities: forward differences, backward at the last tick.
pub fn velocities(poses: &[Pose], hz: f64) -> Vec<[f64; 2]> {
    let n = poses.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i + 1 < n { (i, i + 1) } else { (i.saturating_sub(1), i) };
            if a == b {
                [0.0, 0.0]
            } else {
                [(poses[b].x - poses[a].x) * hz, (poses[b].y - poses[a].y) * hz]
            }
        })
        .collect()
}

/// Footprint dimensions `(length, width)`.
pub type Dims = (f64, f64);

/// First tick at which the two tracks overlap.
pub fn first_overlap(a: &[Pose], a_dims: Dims, b: &[Pose], b_dims: Dims, margin: f64) -> Option<usize> {
    a.iter().zip(b).position(|(pa, pb)| {
        overlaps(
            &OrientedBox::new(*pa, a_dims.0, a_dims.1).inflated(margin),
            &OrientedBox::new(*pb, b_dims.0, b_dims.1),
        )
    })
}

/// First tick at which constant-velocity extrapolation of both tracks over
/// `horizon` seconds (sampled at `hz`) produces an overlap.
pub fn first_ttc_violation(
    a: &[Pose],
    a_dims: Dims,
    b: &[Pose],
    b_dims: Dims,
    hz: f64,
    horizon: f64,
    margin: f64,
) -> Option<usize> {
    let (va, vb) = (velocities(a, hz), velocities(b, hz));
    let steps = (horizon * hz).round() as usize;
    (0..a.len().min(b.len())).find(|&i| {
        (0..=steps).any(|k| {
            let t = k as f64 / hz;
            let pa = Pose::new(a[i].x + va[i][0] * t, a[i].y + va[i][1] * t, a[i].theta);
            let pb = Pose::new(b[i].x + vb[i][0] * t, b[i].y + vb[i][1] * t, b[i].theta);
            overlaps(
                &OrientedBox::new(pa, a_dims.0, a_dims.1).inflated(margin),
                &OrientedBox::new(pb, b_dims.0, b_dims.1),
            )
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn corner_inside(a: &OrientedBox, b: &OrientedBox) -> bool {
        a.corners().iter().any(|c| b.contains(c[0], c[1])) || b.corners().iter().any(|c| a.contains(c[0], c[1]))
    }

    #[test]
    fn hand_placed_boxes() {
        let a = OrientedBox::new(Pose::new(0.0, 0.0, 0.0), 4.0, 2.0);
        assert!(overlaps(&a, &OrientedBox::new(Pose::new(3.9, 0.0, 0.0), 4.0, 2.0)));
        assert!(!overlaps(&a, &OrientedBox::new(Pose::new(4.1, 0.0, 0.0), 4.0, 2.0)));
        assert!(!overlaps(&a, &OrientedBox::new(Pose::new(0.0, 2.1, 0.0), 4.0, 2.0)));
        // a diamond whose tip pokes into the long side
        let tip = 1.0 + 2f64.sqrt();
        assert!(overlaps(&a, &OrientedBox::new(Pose::new(0.0, tip - 0.05, FRAC_PI_4), 2.0, 2.0)));
        assert!(!overlaps(&a, &OrientedBox::new(Pose::new(0.0, tip + 0.05, FRAC_PI_4), 2.0, 2.0)));
        // crossing bars overlap with no corner inside the other box
        let bar = OrientedBox::new(Pose::new(0.0, 0.0, std::f64::consts::FRAC_PI_2), 10.0, 1.0);
        let flat = OrientedBox::new(Pose::new(0.0, 0.0, 0.0), 10.0, 1.0);
        assert!(overlaps(&bar, &flat));
        assert!(!corner_inside(&bar, &flat));
    }
}
