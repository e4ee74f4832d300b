//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::linalg::Float;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm above which gradients are rescaled; `<= 0` disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 5e-2,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_finite();
        if !ok {
            return Err(invalid(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One decoupled-weight-decay Adam update. Returns the pre-clip gradient norm.
///
/// `decay[i]` selects which parameters receive weight decay.
pub fn adamw_step<F: Float>(
    params: &mut [F],
    grads: &[F],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    decay: &[bool],
) -> Result<f64> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || decay.len() != n {
        return Err(invalid("optimizer buffers differ in length"));
    }
    let norm = grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::TrainingDiverged {
            step: state.step,
            reason: format!("gradient norm {norm}"),
        });
    }
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads[i].as_f64() * clip;
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mut p = params[i].as_f64();
        if decay[i] {
            p -= cfg.lr * cfg.weight_decay * p;
        }
        p -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        params[i] = F::from_f64(p);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::TrainingDiverged {
            step: state.step,
            reason: "non-finite parameter after update".into(),
        });
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_step_by_hand() {
        let cfg = AdamWConfig {
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.5f64];
        let mut st = OptimizerState::new(1);
        adamw_step(&mut p, &[0.2], &mut st, &cfg, &[true]).unwrap();
        // step 1: m_hat = g, v_hat = g^2, so the Adam move is lr * g / (|g| + eps)
        let want = 0.5 - 1e-4 * 5e-2 * 0.5 - 1e-4 * 0.2 / (0.2 + 1e-8);
        assert!((p[0] - want).abs() < 1e-12);

        let p1 = p[0];
        adamw_step(&mut p, &[-0.1], &mut st, &cfg, &[true]).unwrap();
        let m = 0.9 * 0.02 + 0.1 * -0.1;
        let v = 0.95 * 0.05 * 0.04 + 0.05 * 0.01;
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.95f64 * 0.95));
        let want = p1 - 1e-4 * 5e-2 * p1 - 1e-4 * mh / (vh.sqrt() + 1e-8);
        assert!((p[0] - want).abs() < 1e-12);
    }

    #[test]
    fn clipping_rescales_to_unit_norm() {
        let cfg = AdamWConfig::default();
        let mut st = OptimizerState::new(2);
        let mut p = vec![0.0f64; 2];
        let norm = adamw_step(&mut p, &[3.0, 4.0], &mut st, &cfg, &[false, false]).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        // first moment holds (1 - beta1) * clipped gradient
        assert!((st.m[0] - 0.1 * 0.6).abs() < 1e-12);
        assert!((st.m[1] - 0.1 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn no_decay_on_masked_params() {
        let cfg = AdamWConfig::default();
        let mut st = OptimizerState::new(2);
        let mut p = vec![1.0f64, 1.0];
        adamw_step(&mut p, &[0.0, 0.0], &mut st, &cfg, &[true, false]).unwrap();
        assert!((p[0] - (1.0 - 1e-4 * 5e-2)).abs() < 1e-15);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut st = OptimizerState::new(1);
        let mut p = vec![1.0f32];
        let err = adamw_step(&mut p, &[f32::NAN], &mut st, &AdamWConfig::default(), &[true]);
        assert!(matches!(err, Err(Error::TrainingDiverged { .. })));
    }
}
