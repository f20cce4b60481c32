//! Plain SGD with momentum and weight decay, plus the step-decay learning-rate
//! schedule used by all training loops.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A trainable tensor: value, accumulated gradient and momentum buffer all
/// share one shape; the buffer starts at zero.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape();
        Parameter {
            value,
            grad: Tensor::zeros(shape),
            momentum: Tensor::zeros(shape),
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.grad.sq_norm()
    }
}

/// Step decay: rate at epoch `e` is `base * factor^floor(e / period)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub period: u32,
}

impl LrSchedule {
    pub fn new(base: f64, factor: f64, period: u32) -> Result<Self> {
        if base <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {base}"
            )));
        }
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay factor must lie in (0, 1], got {factor}"
            )));
        }
        if period == 0 {
            return Err(Error::InvalidArgument("decay period must be positive".into()));
        }
        Ok(LrSchedule { base, factor, period })
    }

    pub fn constant(base: f64) -> Result<Self> {
        LrSchedule::new(base, 1.0, 1)
    }

    pub fn rate(&self, epoch: u32) -> f64 {
        self.base * self.factor.powi((epoch / self.period) as i32)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(schedule: LrSchedule, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            schedule,
            momentum,
            weight_decay,
        }
    }

    /// One update with the schedule's rate for `epoch`.
    pub fn step<T: Scalar>(&self, params: &mut [&mut Parameter<T>], epoch: u32) -> Result<()> {
        self.step_with_lr(params, self.schedule.rate(epoch))
    }

    /// Momentum update with weight decay applied to the gradient before the
    /// buffer (classical SGD; frameworks differ on this placement):
    ///   buf <- momentum * buf + (grad + wd * value)
    ///   value <- value - lr * buf
    /// With momentum = 0 and wd = 0 this is exactly `value -= lr * grad`.
    pub fn step_with_lr<T: Scalar>(&self, params: &mut [&mut Parameter<T>], lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let lr = T::from_f64(lr);
        let mom = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        for p in params.iter_mut() {
            let Parameter {
                value,
                grad,
                momentum,
            } = &mut **p;
            for ((v, g), m) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data().iter())
                .zip(momentum.data_mut().iter_mut())
            {
                let g = *g + wd * *v;
                *m = mom * *m + g;
                *v = *v - lr * *m;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new(Tensor::full([1, 1, 1, 1], v));
        p.grad.data_mut()[0] = g;
        p
    }

    #[test]
    fn plain_step_is_value_minus_lr_grad() {
        let mut p = scalar_param(1.0, 0.5);
        let sgd = Sgd::new(LrSchedule::constant(0.1).unwrap(), 0.0, 0.0);
        sgd.step_with_lr(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.value.data()[0], 0.95);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = scalar_param(3.25, 0.0);
        let sgd = Sgd::new(LrSchedule::constant(0.1).unwrap(), 0.9, 0.0);
        for _ in 0..5 {
            sgd.step_with_lr(&mut [&mut p], 0.1).unwrap();
        }
        assert_eq!(p.value.data()[0], 3.25);
    }

    #[test]
    fn quadratic_recursion_closed_form() {
        // f(theta) = theta^2 / 2, grad = theta; 5 plain steps at lr 0.1 from 1.0
        // give 0.9^5.
        let mut p = scalar_param(1.0, 0.0);
        let sgd = Sgd::new(LrSchedule::constant(0.1).unwrap(), 0.0, 0.0);
        for _ in 0..5 {
            let theta = p.value.data()[0];
            p.grad.data_mut()[0] = theta;
            sgd.step_with_lr(&mut [&mut p], 0.1).unwrap();
        }
        assert!((p.value.data()[0] - 0.9f64.powi(5)).abs() < 1e-15);
        assert!((p.value.data()[0] - 0.59049).abs() < 1e-12);
    }

    #[test]
    fn momentum_uses_buffer_then_updates_value() {
        let mut p = scalar_param(1.0, 1.0);
        let sgd = Sgd::new(LrSchedule::constant(1.0).unwrap(), 0.5, 0.0);
        sgd.step_with_lr(&mut [&mut p], 0.1).unwrap();
        // buf = 1.0, value = 1.0 - 0.1
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);
        p.grad.data_mut()[0] = 1.0;
        sgd.step_with_lr(&mut [&mut p], 0.1).unwrap();
        // buf = 0.5 + 1.0 = 1.5, value = 0.9 - 0.15
        assert!((p.value.data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_before_momentum_buffer() {
        let mut p = scalar_param(2.0, 0.0);
        let sgd = Sgd::new(LrSchedule::constant(1.0).unwrap(), 0.9, 0.1);
        sgd.step_with_lr(&mut [&mut p], 1.0).unwrap();
        // g = 0 + 0.1 * 2 = 0.2; buf = 0.2; value = 2 - 0.2
        assert!((p.value.data()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_piecewise_constant_and_non_increasing() {
        let s = LrSchedule::new(0.1, 0.2, 15).unwrap();
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(14), 0.1);
        assert!((s.rate(15) - 0.02).abs() < 1e-15);
        assert!((s.rate(30) - 0.004).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let r = s.rate(e);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(LrSchedule::new(0.0, 0.5, 1).is_err());
        assert!(LrSchedule::new(0.1, 0.0, 1).is_err());
        assert!(LrSchedule::new(0.1, 1.5, 1).is_err());
        let sgd = Sgd::new(LrSchedule::constant(0.1).unwrap(), 0.0, 0.0);
        let mut p = scalar_param(1.0, 1.0);
        assert!(sgd.step_with_lr(&mut [&mut p], 0.0).is_err());
        assert!(sgd.step_with_lr(&mut [&mut p], -0.1).is_err());
    }
}
