//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Probe settings for a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub probe_count: usize,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            probe_count: 32,
            fd_step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub skipped: usize,
    /// (tensor index, flat coordinate) of the worst probe.
    pub worst: Option<(usize, usize)>,
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

impl GradCheck {
    /// `f` maps the tensors to a scalar value and the analytic gradient with
    /// respect to each tensor.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
    {
        self.run_guarded(inputs, f, |_| false)
    }

    /// Like [`GradCheck::run`], but a probe is skipped when `skip` holds at
    /// the base point or at either perturbed point. Used to stay away from
    /// kinks of non-smooth functions.
    pub fn run_guarded<F, G>(&self, inputs: &[Tensor], f: F, skip: G) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
        G: Fn(&[Tensor]) -> bool,
    {
        if !(1e-7..=1e-4).contains(&self.fd_step) {
            return Err(Error::Domain(format!(
                "finite-difference step {} outside [1e-7, 1e-4]",
                self.fd_step
            )));
        }
        if inputs.is_empty() {
            return Err(Error::Domain("gradient check needs at least one tensor".into()));
        }
        let (value, grads) = f(inputs)?;
        if !value.is_finite() {
            return Err(Error::Evaluation(format!("non-finite value {value} at base point")));
        }
        if grads.len() != inputs.len() {
            return Err(Error::State(format!(
                "{} gradients for {} tensors",
                grads.len(),
                inputs.len()
            )));
        }
        for (i, (g, t)) in grads.iter().zip(inputs).enumerate() {
            if g.shape() != t.shape() {
                return Err(Error::dim(
                    "grad_check",
                    format!("gradient {i} has shape {:?}, tensor {:?}", g.shape(), t.shape()),
                ));
            }
        }
        let base_skip = skip(inputs);

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            probes: 0,
            skipped: 0,
            worst: None,
        };
        let mut work = inputs.to_vec();
        let eval = |w: &[Tensor]| -> Result<f64> {
            let v = f(w)?.0;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Evaluation(format!("non-finite value {v} at perturbed point")))
            }
        };
        for p in 0..self.probe_count {
            let ti = p % inputs.len();
            let ci = rng.gen_range(0..inputs[ti].len());
            let orig = inputs[ti].data()[ci];

            work[ti].data_mut()[ci] = orig + self.fd_step;
            let skip_plus = skip(&work);
            let f_plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - self.fd_step;
            let skip_minus = skip(&work);
            let f_minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;

            if base_skip || skip_plus || skip_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * self.fd_step);
            let err = relative_error(grads[ti].data()[ci], numeric);
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, ci));
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between `f`'s analytic gradient and central
/// differences over `probe_count` random coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], probe_count: usize, fd_step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    GradCheck {
        probe_count,
        fd_step,
        seed: 0,
    }
    .run(inputs, f)
    .map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sigmoid, softplus};

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Tensor::vector(vec![3.0]);
        let err = grad_check(
            |t| {
                let v = t[0].data()[0];
                Ok((v * v, vec![Tensor::vector(vec![2.0 * v])]))
            },
            &[x],
            4,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softplus_sum_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.4, -0.05]);
        let err = grad_check(
            |t| Ok((softplus(&t[0]).sum(), vec![t[0].map(sigmoid)])),
            &[x],
            16,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |t| Ok((t[0].dot(&t[0])?, vec![t[0].map(|v| 2.2 * v)])),
            &[x],
            4,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-3);
    }

    #[test]
    fn non_finite_value_is_an_evaluation_error() {
        let x = Tensor::vector(vec![1.0]);
        let r = grad_check(|t| Ok((f64::NAN, vec![t[0].clone()])), &[x], 1, 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::vector(vec![1.0]);
        let r = grad_check(|t| Ok((0.0, vec![t[0].clone()])), &[x], 1, 1e-2);
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
