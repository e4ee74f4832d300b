//! Planar rigid-body algebra for ego motion.
//!
//! A [`RelativeAction`] is the frame-to-frame motion of the ego vehicle
//! expressed in the frame of the earlier pose: longitudinal `dx`, lateral `dy`
//! and yaw change `dtheta`. Chaining the corresponding homogeneous transforms
//! yields poses at `t + k` expressed in the frame at `t`.
//!
//! Everything here runs in `f64` regardless of model precision.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Frame-to-frame SE(2) motion `(dx, dy, dtheta)` in the frame of the earlier pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativeAction {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl RelativeAction {
    pub const ZERO: RelativeAction = RelativeAction {
        dx: 0.0,
        dy: 0.0,
        dtheta: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self { dx, dy, dtheta }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dtheta.is_finite()
    }

    /// Components in `(x, y, theta)` order.
    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.dtheta]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// The motion that undoes `self`.
    pub fn inverse(self) -> Result<Self> {
        Ok(pose_from_action(self)?.inverse().to_action())
    }
}

/// 3x3 homogeneous planar transform with an orthonormal rotation block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform2 {
    m: [[f64; 3]; 3],
}

impl Default for Transform2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Transform2 {
    pub const IDENTITY: Transform2 = Transform2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Builds the transform for a pose `(x, y, theta)`.
    pub fn from_pose(x: f64, y: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Transform2 {
            m: [[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(x: f64, y: f64) -> Self {
        Self::from_pose(x, y, 0.0)
    }

    pub fn rotation(theta: f64) -> Self {
        Self::from_pose(0.0, 0.0, theta)
    }

    /// Wraps a raw matrix, checking the bottom row and the rotation block.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("transform has non-finite entries"));
        }
        if m[2] != [0.0, 0.0, 1.0] {
            return Err(invalid("transform bottom row must be (0, 0, 1)"));
        }
        let t = Transform2 { m };
        let det = t.rotation_det();
        let ortho = m[0][0] * m[0][1] + m[1][0] * m[1][1];
        if (det - 1.0).abs() > 1e-9 || ortho.abs() > 1e-9 {
            return Err(invalid(format!(
                "rotation block is not orthonormal (det {det}, cross {ortho})"
            )));
        }
        Ok(t)
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn x(&self) -> f64 {
        self.m[0][2]
    }

    pub fn y(&self) -> f64 {
        self.m[1][2]
    }

    pub fn heading(&self) -> f64 {
        self.m[1][0].atan2(self.m[0][0])
    }

    pub fn rotation_det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Reads the transform back as `(dx, dy, dtheta)`.
    pub fn to_action(&self) -> RelativeAction {
        RelativeAction::new(self.x(), self.y(), self.heading())
    }

    pub fn inverse(&self) -> Self {
        let m = &self.m;
        // R^T, -R^T t
        let (r00, r01, r10, r11) = (m[0][0], m[1][0], m[0][1], m[1][1]);
        let (tx, ty) = (m[0][2], m[1][2]);
        Transform2 {
            m: [
                [r00, r01, -(r00 * tx + r01 * ty)],
                [r10, r11, -(r10 * tx + r11 * ty)],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    /// Maps a point from this frame into the parent frame.
    pub fn apply(&self, px: f64, py: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * px + m[0][1] * py + m[0][2],
            m[1][0] * px + m[1][1] * py + m[1][2],
        )
    }
}

impl std::ops::Mul for Transform2 {
    type Output = Transform2;

    fn mul(self, rhs: Transform2) -> Transform2 {
        compose(&self, &rhs)
    }
}

/// Poses at `t+1, t+2, ...` expressed in the frame at `t`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<Transform2>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn last(&self) -> Option<&Transform2> {
        self.poses.last()
    }

    /// Mirror image across the x-axis.
    pub fn mirrored(&self) -> Trajectory {
        Trajectory {
            poses: self
                .poses
                .iter()
                .map(|p| Transform2::from_pose(p.x(), -p.y(), -p.heading()))
                .collect(),
        }
    }
}

pub fn pose_from_action(a: RelativeAction) -> Result<Transform2> {
    if !a.is_finite() {
        return Err(invalid(format!("non-finite action {a:?}")));
    }
    Ok(Transform2::from_pose(a.dx, a.dy, a.dtheta))
}

/// Matrix product `a * b`.
pub fn compose(a: &Transform2, b: &Transform2) -> Transform2 {
    let (a, b) = (&a.m, &b.m);
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate().take(2) {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    m[2] = [0.0, 0.0, 1.0];
    Transform2 { m }
}

/// Running product of the action transforms; the k-th pose is `T_1 * ... * T_k`.
pub fn integrate(actions: &[RelativeAction]) -> Result<Trajectory> {
    if actions.is_empty() {
        return Err(invalid("cannot integrate an empty action list"));
    }
    let mut acc = Transform2::IDENTITY;
    let mut poses = Vec::with_capacity(actions.len());
    for &a in actions {
        acc = compose(&acc, &pose_from_action(a)?);
        poses.push(acc);
    }
    Ok(Trajectory { poses })
}

/// Frame-to-frame actions between consecutive poses: `p[k]^-1 * p[k+1]`.
pub fn relativize(absolute: &[Transform2]) -> Result<Vec<RelativeAction>> {
    if absolute.len() < 2 {
        return Err(invalid(format!(
            "relativize needs at least 2 poses, got {}",
            absolute.len()
        )));
    }
    Ok(absolute
        .windows(2)
        .map(|w| compose(&w[0].inverse(), &w[1]).to_action())
        .collect())
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn naive_matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    fn close(a: &Transform2, b: &[[f64; 3]; 3], tol: f64) -> bool {
        a.matrix()
            .iter()
            .flatten()
            .zip(b.iter().flatten())
            .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn pose_from_action_cases() {
        let id = pose_from_action(RelativeAction::ZERO).unwrap();
        assert_eq!(id, Transform2::IDENTITY);

        let t = pose_from_action(RelativeAction::new(1.0, 0.0, FRAC_PI_2)).unwrap();
        assert!(close(&t, &[[0.0, -1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], 1e-15));

        let t = pose_from_action(RelativeAction::new(0.5, -0.2, 0.1)).unwrap();
        let (c, s) = (0.1f64.cos(), 0.1f64.sin());
        assert!(close(&t, &[[c, -s, 0.5], [s, c, -0.2], [0.0, 0.0, 1.0]], 0.0));

        assert!(pose_from_action(RelativeAction::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(pose_from_action(RelativeAction::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn compose_cases() {
        let t = Transform2::from_pose(0.3, -1.2, 0.7);
        assert!(close(&compose(&Transform2::IDENTITY, &t), t.matrix(), 0.0));

        let r = compose(&Transform2::translation(1.0, 0.0), &Transform2::translation(0.0, 1.0));
        assert!(close(&r, Transform2::translation(1.0, 1.0).matrix(), 0.0));

        let a = Transform2::rotation(FRAC_PI_2);
        let b = Transform2::translation(1.0, 0.0);
        let oracle = naive_matmul(a.matrix(), b.matrix());
        let r = compose(&a, &b);
        assert!(close(&r, &oracle, 1e-15));
        assert!(r.x().abs() < 1e-15 && (r.y() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn integrate_cases() {
        let a = RelativeAction::new(0.4, 0.1, -0.2);
        let tr = integrate(&[a]).unwrap();
        assert_eq!(tr.poses, vec![pose_from_action(a).unwrap()]);

        let tr = integrate(&[RelativeAction::new(0.75, 0.0, 0.0); 6]).unwrap();
        for (k, p) in tr.poses.iter().enumerate() {
            assert!((p.x() - 0.75 * (k + 1) as f64).abs() < 1e-12);
            assert_eq!(p.y(), 0.0);
        }

        // brute-force product of the four quarter turns
        let step = Transform2::from_pose(1.0, 0.0, FRAC_PI_2);
        let mut oracle = *Transform2::IDENTITY.matrix();
        for _ in 0..4 {
            oracle = naive_matmul(&oracle, step.matrix());
        }
        let tr = integrate(&[RelativeAction::new(1.0, 0.0, FRAC_PI_2); 4]).unwrap();
        let last = tr.last().unwrap();
        assert!(close(last, &oracle, 1e-12));
        assert!(last.x().abs() < 1e-9 && last.y().abs() < 1e-9);
        assert!(last.heading().abs() < 1e-9);

        assert!(integrate(&[]).is_err());
    }

    #[test]
    fn relativize_cases() {
        let a = relativize(&[Transform2::IDENTITY, Transform2::IDENTITY]).unwrap();
        assert_eq!(a, vec![RelativeAction::ZERO]);

        let poses: Vec<_> = (0..3).map(|i| Transform2::translation(i as f64, 0.0)).collect();
        let a = relativize(&poses).unwrap();
        assert_eq!(a, vec![RelativeAction::new(1.0, 0.0, 0.0); 2]);

        assert!(relativize(&[Transform2::IDENTITY]).is_err());
    }

    #[test]
    fn from_matrix_rejects_bad_blocks() {
        assert!(Transform2::from_matrix(*Transform2::from_pose(1.0, 2.0, 0.3).matrix()).is_ok());
        assert!(Transform2::from_matrix([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(Transform2::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.1, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
        assert!((wrap_angle(2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn mirrored_matches_flipped_actions() {
        let acts = [
            RelativeAction::new(1.0, 0.2, 0.1),
            RelativeAction::new(0.8, -0.1, 0.3),
            RelativeAction::new(1.1, 0.05, -0.2),
        ];
        let flipped: Vec<_> = acts
            .iter()
            .map(|a| RelativeAction::new(a.dx, -a.dy, -a.dtheta))
            .collect();
        let m = integrate(&acts).unwrap().mirrored();
        let f = integrate(&flipped).unwrap();
        for (p, q) in m.poses.iter().zip(&f.poses) {
            assert!(close(p, q.matrix(), 1e-12));
        }
    }
}
