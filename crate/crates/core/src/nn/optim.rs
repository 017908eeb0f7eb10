use serde::{Deserialize, Serialize};

use super::params::{round_f32, ParamTree, Precision};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
        }
    }
}

/// Bias-corrected Adam update at step `t` (1-based), then zeroes gradients.
///
/// Gradients are checked before anything is modified, so a failure leaves
/// the tree untouched.
pub fn adam_step(params: &mut ParamTree, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("adam step index must be ≥ 1".into()));
    }
    if let Some(p) = params.iter().find(|p| !p.grad.iter().all(|g| g.is_finite())) {
        return Err(Error::Training(format!("non-finite gradient in `{}`", p.name)));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let quantize = params.precision() == Precision::F32;
    for p in params.iter_mut() {
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = p.grad[i];
            let m = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let x = values[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            if quantize {
                p.m[i] = round_f32(m);
                p.v[i] = round_f32(v);
                values[i] = round_f32(x);
            } else {
                p.m[i] = m;
                p.v[i] = v;
                values[i] = x;
            }
            p.grad[i] = 0.0;
        }
    }
    params.set_step(t);
    Ok(())
}

/// Adam step using the tree's own step counter.
pub fn adam_next(params: &mut ParamTree, cfg: &AdamConfig) -> Result<()> {
    let t = params.step() + 1;
    adam_step(params, cfg, t)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when under the threshold).
pub fn clip_global_norm(params: &mut ParamTree, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || !max_norm.is_finite() {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = params.global_grad_norm();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    for p in params.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= factor);
    }
    Ok(factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_tree(x: f64) -> ParamTree {
        let mut t = ParamTree::with_precision(Precision::F64);
        t.insert("x", Tensor::row(vec![x]).unwrap()).unwrap();
        t
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut t = ParamTree::with_precision(Precision::F64);
        t.insert("w", Tensor::row(vec![0.3, -1.2, 7.0]).unwrap()).unwrap();
        let before = t.clone();
        adam_step(&mut t, &AdamConfig::new(1e-3, 1e-5), 1).unwrap();
        for (a, b) in t.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut t = scalar_tree(0.0);
        t.get_mut(t.id("x").unwrap()).grad[0] = 1.0;
        adam_step(&mut t, &AdamConfig::new(1e-4, 1e-5), 1).unwrap();
        let dx = t.value(t.id("x").unwrap()).data()[0];
        let expected = -1e-4 / (1.0 + 1e-5);
        assert!((dx - expected).abs() < 1e-18, "{dx} vs {expected}");
        assert!((dx + 9.99990e-5).abs() < 1e-10);
    }

    #[test]
    fn second_step_matches_scripted_oracle() {
        // scripted Adam, written out independently of adam_step
        let (lr, b1, b2, eps, g) = (1e-4_f64, 0.9_f64, 0.999_f64, 1e-5_f64, 0.37_f64);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x = 0.5;
        let mut deltas = vec![];
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let step = lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            x -= step;
            deltas.push(-step);
        }
        let mut t = scalar_tree(0.5);
        let id = t.id("x").unwrap();
        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        t.get_mut(id).grad[0] = g;
        adam_step(&mut t, &cfg, 1).unwrap();
        let after1 = t.value(id).data()[0];
        t.get_mut(id).grad[0] = g;
        adam_step(&mut t, &cfg, 2).unwrap();
        let after2 = t.value(id).data()[0];
        assert!(((after2 - after1) - deltas[1]).abs() < 1e-12);
        assert!((after2 - x).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut t = scalar_tree(0.0);
        t.get_mut(t.id("x").unwrap()).grad[0] = f64::NAN;
        let err = adam_step(&mut t, &AdamConfig::new(1e-4, 1e-5), 1).unwrap_err();
        assert!(err.to_string().contains("`x`"));
    }

    #[test]
    fn step_zero_rejected() {
        let mut t = scalar_tree(0.0);
        assert!(adam_step(&mut t, &AdamConfig::new(1e-4, 1e-5), 0).is_err());
    }

    #[test]
    fn clip_hand_cases() {
        let mut t = ParamTree::with_precision(Precision::F64);
        let id = t.insert("g", Tensor::row(vec![0.0, 0.0]).unwrap()).unwrap();
        t.get_mut(id).grad.copy_from_slice(&[3.0, 4.0]);
        let f = clip_global_norm(&mut t, 0.5).unwrap();
        assert!((f - 0.1).abs() < 1e-15);
        assert!((t.grad(id)[0] - 0.3).abs() < 1e-15 && (t.grad(id)[1] - 0.4).abs() < 1e-15);

        t.get_mut(id).grad.copy_from_slice(&[0.15, 0.2]);
        assert_eq!(clip_global_norm(&mut t, 0.5).unwrap(), 1.0);
        assert!(clip_global_norm(&mut t, 0.0).is_err());
    }
}
