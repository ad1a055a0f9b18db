use num_traits::Float;

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Float> AdamParams<T> {
    /// `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(lr: T, beta1: T) -> Self {
        AdamParams {
            lr,
            beta1,
            beta2: T::from(0.999).expect("representable"),
            eps: T::from(1e-8).expect("representable"),
        }
    }
}

/// One bias-corrected Adam update in place. `step` counts from 1.
///
/// Returns `Err` with the index of the first non-finite gradient entry and
/// leaves every array untouched in that case.
pub fn adam_update<T: Float>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    hp: &AdamParams<T>,
) -> Result<(), usize> {
    assert!(
        param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len(),
        "parameter, gradient and moment lengths differ"
    );
    assert!(step >= 1, "adam steps count from 1");
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(i);
    }
    let one = T::one();
    let t = step.min(i32::MAX as u64) as i32;
    let c1 = one - hp.beta1.powi(t);
    let c2 = one - hp.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (one - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (one - hp.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] = param[i] - hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

pub(crate) fn check_hyper(lr: f64, beta1: f64) -> crate::Result<()> {
    ensure!(
        lr >= 0.0 && lr.is_finite(),
        "learning rate must be non-negative, got {lr}"
    );
    ensure!((0.0..1.0).contains(&beta1), "beta1 must lie in [0, 1), got {beta1}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &AdamParams::new(0.1, 0.5)).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_keeps_parameter_and_decays_moments() {
        let (mut p, mut m, mut v) = ([0.7f32], [0.4f32], [0.2f32]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 3, &AdamParams::new(0.0, 0.5)).unwrap();
        assert_eq!(p[0], 0.7);
        assert!(m[0] < 0.4 && v[0] < 0.2);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let (mut p, mut m, mut v) = ([1.0f32, 2.0], [0.0; 2], [0.0; 2]);
        let r = adam_update(&mut p, &[0.5, f32::NAN], &mut m, &mut v, 1, &AdamParams::new(0.1, 0.5));
        assert_eq!(r, Err(1));
        assert_eq!(p, [1.0, 2.0]);
    }
}
