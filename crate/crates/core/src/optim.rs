use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Role of a trainable tensor; decides whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or dense weights (decayed).
    Weight,
    Bias,
    /// BN shift/scale; regularized by the sparsity loss instead.
    BnAffine,
}

/// Step schedule: the rate is divided by `factor` at each listed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    /// Zero-based epochs at which the decay takes effect.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 0.1, decay_epochs: vec![80, 120], factor: 10.0 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.initial / self.factor.powi(drops as i32)
    }
}

/// Nesterov SGD with decoupled per-kind weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub momentum: T,
    pub weight_decay: T,
    pub schedule: LrSchedule,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(momentum: T, weight_decay: T, schedule: LrSchedule) -> Self {
        OptimizerState { momentum, weight_decay, schedule, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn lr_at(&self, epoch: usize) -> T {
        T::lit(self.schedule.lr_at(epoch))
    }
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new(T::lit(0.9), T::lit(1e-4), LrSchedule::default())
    }
}

/// One Nesterov step:
/// `g' = g + wd * w` (weights only), `v = mu v + g'`, `w -= lr (g' + mu v)`.
pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    kinds: &[ParamKind],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: T,
) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != kinds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params, {} kinds, {} grads",
            params.len(),
            kinds.len(),
            grads.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::InvalidArgument("parameter count changed between steps".into()));
    }
    for (i, param) in params.iter_mut().enumerate() {
        let (grad, vel) = (&grads[i], &mut state.velocity[i]);
        if param.shape() != grad.shape() || param.shape() != vel.shape() {
            return Err(Error::shape(
                "sgd",
                format!("param {:?}, grad {:?}, velocity {:?}", param.shape(), grad.shape(), vel.shape()),
            ));
        }
        let wd = if kinds[i] == ParamKind::Weight { state.weight_decay } else { T::zero() };
        let mu = state.momentum;
        for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
            let g = g + wd * *w;
            *v = mu * *v + g;
            *w -= lr * (g + mu * *v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_recurrence_two_steps() {
        // loss w^2 from w = 1, mu = 0.9, lr = 0.1, no decay
        let mut w = Tensor::<f64>::scalar(1.0);
        let mut st = OptimizerState::new(0.9, 0.0, LrSchedule::default());
        for expected in [0.62, 0.2224] {
            let g = Tensor::scalar(2.0 * w.data()[0]);
            sgd_nesterov_step(&mut [&mut w], &[ParamKind::Weight], &[g], &mut st, 0.1).unwrap();
            assert!((w.data()[0] - expected).abs() < 1e-12, "{} vs {expected}", w.data()[0]);
        }
    }

    #[test]
    fn zero_gradient_only_decays_weights() {
        let mut w = Tensor::<f64>::scalar(2.0);
        let mut b = Tensor::<f64>::scalar(2.0);
        let mut st = OptimizerState::new(0.9, 1e-4, LrSchedule::default());
        let g = [Tensor::scalar(0.0), Tensor::scalar(0.0)];
        sgd_nesterov_step(&mut [&mut w, &mut b], &[ParamKind::Weight, ParamKind::BnAffine], &g, &mut st, 0.1).unwrap();
        assert_eq!(b.data()[0], 2.0);
        // g' = 2e-4, v = 2e-4, step = 0.1 * (2e-4 + 1.8e-4)
        assert!((w.data()[0] - (2.0 - 0.1 * 3.8e-4)).abs() < 1e-15);
    }

    #[test]
    fn schedule_divides_by_ten() {
        let s = LrSchedule { initial: 0.1, decay_epochs: vec![10, 15], factor: 10.0 };
        assert_eq!(s.lr_at(9), 0.1);
        assert_eq!(s.lr_at(10), 0.1 / 10.0);
        assert_eq!(s.lr_at(15), 0.1 / 100.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut w = Tensor::<f32>::scalar(1.0);
        let mut st = OptimizerState::default();
        let g = [Tensor::scalar(1.0)];
        assert!(sgd_nesterov_step(&mut [&mut w], &[ParamKind::Weight], &g, &mut st, 0.0).is_err());
        assert!(sgd_nesterov_step(&mut [&mut w], &[ParamKind::Weight], &[Tensor::zeros(&[2])], &mut st, 0.1).is_err());
    }
}
