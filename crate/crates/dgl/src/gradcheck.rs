//! Central finite-difference verification of every backward pass.
//!
//! The check is meant to run in 64-bit mode: truncation error of the central
//! difference is O(eps^2) and roundoff O(ulp/eps), so eps around 1e-5 resolves
//! relative errors well below the 1e-5 acceptance threshold.

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::tensor::Scalar;
use rand::seq::SliceRandom;
use rayon::prelude::*;

/// Anything whose loss/gradient pair can be finite-difference checked: the
/// probe owns its input batch so `loss` is a pure function of the parameters
/// (batch-norm running statistics may move, but they do not enter the
/// train-mode loss).
pub trait GradCheckTarget<T: Scalar>: Clone + Send + Sync {
    /// Forward-only loss on the probe batch.
    fn loss(&mut self) -> Result<T>;
    /// Forward + backward; gradients accumulate into the parameters.
    fn loss_and_grad(&mut self) -> Result<T>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckCfg {
    /// Finite-difference step, also the relative-error denominator guard.
    pub eps: f64,
    /// Cap on checked entries per parameter tensor; `None` checks all.
    /// Sampling is deterministic from `seed`.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            eps: 1e-5,
            max_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub total_params: usize,
}

/// Compares analytic gradients against central differences and returns the
/// max over checked parameters of |analytic - fd| / (|fd| + eps).
pub fn gradient_check<T: Scalar, M: GradCheckTarget<T>>(
    target: &M,
    cfg: GradCheckCfg,
) -> Result<GradCheckReport> {
    let mut work = target.clone();
    for p in work.params_mut() {
        p.zero_grad();
    }
    let loss = work.loss_and_grad()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("gradient check loss".into()));
    }
    let analytic: Vec<Vec<f64>> = work
        .params_mut()
        .iter()
        .map(|p| p.grad.to_f64_vec())
        .collect();
    let total_params: usize = analytic.iter().map(|g| g.len()).sum();
    if total_params == 0 {
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            total_params: 0,
        });
    }

    let mut jobs: Vec<(usize, usize, f64)> = Vec::new();
    let mut rng = crate::seed::rng(cfg.seed, "gradcheck-sample", 0);
    for (pi, grads) in analytic.iter().enumerate() {
        match cfg.max_per_param {
            Some(cap) if grads.len() > cap => {
                let mut idx: Vec<usize> = (0..grads.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(cap);
                idx.sort_unstable();
                jobs.extend(idx.into_iter().map(|i| (pi, i, grads[i])));
            }
            _ => jobs.extend((0..grads.len()).map(|i| (pi, i, grads[i]))),
        }
    }

    let eps = cfg.eps;
    let max_rel = jobs
        .par_chunks(512.max(jobs.len() / 64))
        .map(|chunk| {
            let mut local = target.clone();
            let mut worst = 0.0f64;
            for &(pi, i, g) in chunk {
                let orig = local.params_mut()[pi].value.data()[i];
                let step = T::from_f64(eps);
                {
                    let mut params = local.params_mut();
                    params[pi].value.data_mut()[i] = orig + step;
                }
                let plus = local.loss().map(|l| l.as_f64())?;
                {
                    let mut params = local.params_mut();
                    params[pi].value.data_mut()[i] = orig - step;
                }
                let minus = local.loss().map(|l| l.as_f64())?;
                {
                    let mut params = local.params_mut();
                    params[pi].value.data_mut()[i] = orig;
                }
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite("finite-difference evaluation".into()));
                }
                let fd = (plus - minus) / (2.0 * eps);
                let rel = (g - fd).abs() / (fd.abs() + eps);
                worst = worst.max(rel);
            }
            Ok(worst)
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked: jobs.len(),
        total_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{LayerSpec, Stack};
    use crate::loss::cross_entropy;
    use crate::seed;
    use crate::tensor::Tensor;
    use rand::Rng;

    #[derive(Clone)]
    struct StackProbe {
        stack: Stack<f64>,
        input: Tensor<f64>,
        labels: Vec<usize>,
    }

    impl GradCheckTarget<f64> for StackProbe {
        fn loss(&mut self) -> Result<f64> {
            let logits = self.stack.forward(&self.input, true)?;
            Ok(cross_entropy(&logits, &self.labels)?.0)
        }
        fn loss_and_grad(&mut self) -> Result<f64> {
            let logits = self.stack.forward(&self.input, true)?;
            let (loss, grad) = cross_entropy(&logits, &self.labels)?;
            self.stack.backward(&grad)?;
            Ok(loss)
        }
        fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
            self.stack.params_mut()
        }
    }

    fn probe(specs: &[LayerSpec], shape: [usize; 4], labels: Vec<usize>, seed: u64) -> StackProbe {
        let mut rng = seed::rng(seed, "probe", 0);
        let stack = Stack::from_specs(specs, &mut rng);
        let input = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0));
        StackProbe { stack, input, labels }
    }

    #[test]
    fn single_dense_layer_grad_is_exact() {
        let p = probe(
            &[LayerSpec::Dense { in_features: 6, out_features: 3 }],
            [2, 6, 1, 1],
            vec![0, 2],
            11,
        );
        let report = gradient_check(&p, GradCheckCfg::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, report.total_params);
    }

    #[test]
    fn conv_bn_pool_stack_backward_matches_fd() {
        let p = probe(
            &[
                LayerSpec::Conv { in_channels: 2, out_channels: 3, kernel: 3 },
                LayerSpec::BatchNorm { channels: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::AvgPoolTo { target: 2 },
                LayerSpec::Dense { in_features: 12, out_features: 3 },
            ],
            [2, 2, 8, 8],
            vec![1, 2],
            5,
        );
        let report = gradient_check(&p, GradCheckCfg::default()).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn zero_parameter_model_reports_zero() {
        let p = probe(&[LayerSpec::Relu, LayerSpec::AvgPoolTo { target: 1 }], [2, 3, 4, 4], vec![0, 1], 2);
        let report = gradient_check(&p, GradCheckCfg::default()).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.total_params, 0);
    }

    #[test]
    fn subsampling_caps_checked_entries() {
        let p = probe(
            &[LayerSpec::Dense { in_features: 10, out_features: 10 }],
            [2, 10, 1, 1],
            vec![0, 3],
            7,
        );
        let report = gradient_check(
            &p,
            GradCheckCfg { max_per_param: Some(8), ..Default::default() },
        )
        .unwrap();
        // weight capped at 8, bias (10 entries) capped at 8
        assert_eq!(report.checked, 16);
        assert!(report.max_rel_error < 1e-6);
    }
}
