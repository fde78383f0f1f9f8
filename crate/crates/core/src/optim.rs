use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam optimizer state for an ordered parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], learning_rate: f64) -> Self {
        Self {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Rejects the step, leaving everything
/// untouched, when any gradient is non-finite.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gv;
            v[j] = b2 * v[j] + (1.0 - b2) * gv * gv;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *pv -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![Tensor::full(&[3], 0.5)];
        let mut s = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s).unwrap();
        assert_eq!(p[0], Tensor::full(&[3], 0.5));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::full(&[2], 1.0)];
        let mut s = AdamState::new(&p, 0.01);
        adam_step(&mut p, &[Tensor::new(vec![2], vec![3.0, -0.2]).unwrap()], &mut s).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-8);
        assert!((p[0].data()[1] - 1.01).abs() < 1e-7);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = vec![Tensor::full(&[2], 1.0)];
        let mut s = AdamState::new(&p, 0.0);
        adam_step(&mut p, &[Tensor::full(&[2], 7.0)], &mut s).unwrap();
        assert_eq!(p[0], Tensor::full(&[2], 1.0));
    }

    #[test]
    fn nan_gradient_rejected_without_side_effects() {
        let mut p = vec![Tensor::full(&[2], 1.0)];
        let mut s = AdamState::new(&p, 0.1);
        let err = adam_step(&mut p, &[Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap()], &mut s);
        assert!(err.is_err());
        assert_eq!(s.step, 0);
        assert_eq!(p[0], Tensor::full(&[2], 1.0));
        assert!(s.first_moment[0].data().iter().all(|&v| v == 0.0));
    }
}
