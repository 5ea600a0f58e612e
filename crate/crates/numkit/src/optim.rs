// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.90;
pub const ADAM_BETA2: f32 = 0.99;
pub const ADAM_EPS: f32 = 1e-8;

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub name: String,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(name: impl Into<String>, numel: usize) -> Self {
        Self {
            name: name.into(),
            step: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn for_param(name: impl Into<String>, param: &Tensor) -> Self {
        Self::new(name, param.numel())
    }
}

/// One bias-corrected Adam update of `param` in place.
///
/// The state is left untouched when the gradient is rejected.
pub fn adam_step(state: &mut AdamState, param: &mut Tensor, grad: &Tensor, lr: f32) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.numel() {
        return Err(NumError::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if !grad.is_finite() {
        return Err(NumError::NonFiniteGradient {
            param: state.name.clone(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32) -> Tensor {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::vector(vec![0.5, -2.0]).unwrap();
        let mut st = AdamState::for_param("w", &p);
        for _ in 0..3 {
            adam_step(&mut st, &mut p, &Tensor::zeros(&[2]), 0.1).unwrap();
        }
        assert_eq!(p.data(), &[0.5, -2.0]);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(0.0);
        let mut st = AdamState::for_param("w", &p);
        adam_step(&mut st, &mut p, &scalar_param(1.0), 0.1).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn two_steps_match_hand_transcript() {
        // Hand-stepped in f64 with β1 = 0.9, β2 = 0.99, ε = 1e-8, lr = 0.1.
        let (b1, b2, eps, lr) = (0.9f64, 0.99f64, 1e-8f64, 0.1f64);
        let mut x = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 1.0f64), (2, -1.0f64)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        // -0.1 + 0.1/19
        assert!((x - (-0.1 + 0.1 / 19.0)).abs() < 1e-9);

        let mut p = scalar_param(0.0);
        let mut st = AdamState::for_param("w", &p);
        adam_step(&mut st, &mut p, &scalar_param(1.0), 0.1).unwrap();
        adam_step(&mut st, &mut p, &scalar_param(-1.0), 0.1).unwrap();
        assert!((p.data()[0] as f64 - x).abs() < 1e-6, "{} vs {x}", p.data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::for_param("encoder.weight", &p);
        let err = adam_step(&mut st, &mut p, &scalar_param(f32::NAN), 0.1).unwrap_err();
        assert_eq!(
            err,
            NumError::NonFiniteGradient {
                param: "encoder.weight".into()
            }
        );
        assert_eq!(st.step, 0);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn step_count_increments() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::for_param("w", &p);
        for i in 1..=5 {
            adam_step(&mut st, &mut p, &scalar_param(0.3), 0.01).unwrap();
            assert_eq!(st.step, i);
        }
    }
}
