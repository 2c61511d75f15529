//! Central-difference checks of every differentiable building block.
//!
//! Each component is checked on random inputs for a number of seeds. The
//! scalar objective of a layer is a random linear readout of its output, so
//! the upstream gradient is that readout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_backward, attention_forward, AttentionParams};
use crate::error::Result;
use crate::losses::{argmax, attention_hinge, softmax_cross_entropy};
use crate::tensor::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, GradCheck, GradCheckReport, Tensor,
};

pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seeds: u64,
    pub probes: usize,
    pub fd_step: f64,
    /// Scales every analytic gradient by `1 + 1e-3`, which must make the
    /// suite fail.
    pub perturb: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            probes: 24,
            fd_step: 1e-5,
            perturb: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub worst: f64,
    pub probes: usize,
    pub skipped: usize,
    pub seeds: u64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.worst < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so relu stays off its kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn readout(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

struct Checker {
    opts: SuiteOptions,
}

impl Checker {
    fn scale(&self, mut grads: Vec<Tensor>) -> Vec<Tensor> {
        if self.opts.perturb {
            for g in &mut grads {
                g.scale(1.0 + 1e-3);
            }
        }
        grads
    }

    fn component<S>(&self, name: &str, mut one_seed: S) -> Result<ComponentResult>
    where
        S: FnMut(&mut ChaCha8Rng, GradCheck) -> Result<GradCheckReport>,
    {
        let mut out = ComponentResult {
            name: name.to_owned(),
            worst: 0.0,
            probes: 0,
            skipped: 0,
            seeds: self.opts.seeds,
        };
        for seed in 0..self.opts.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9) ^ name.len() as u64);
            let gc = GradCheck {
                probe_count: self.opts.probes,
                fd_step: self.opts.fd_step,
                seed,
            };
            let r = one_seed(&mut rng, gc)?;
            out.worst = out.worst.max(r.max_rel_error);
            out.probes += r.probes;
            out.skipped += r.skipped;
        }
        Ok(out)
    }

    fn conv(&self) -> Result<ComponentResult> {
        self.component("conv", |rng, gc| {
            let stride = rng.gen_range(1..=2);
            let x = uniform(rng, &[7, 7, 2], -1.0, 1.0);
            let k = uniform(rng, &[3, 3, 2, 3], -1.0, 1.0);
            let b = uniform(rng, &[3], -1.0, 1.0);
            let out = (7 - 3) / stride + 1;
            let r = uniform(rng, &[out, out, 3], -1.0, 1.0);
            gc.run(&[x, k, b], |t| {
                let y = conv2d_forward(&t[0], &t[1], &t[2], stride)?;
                let g = conv2d_backward(&t[0], &t[1], &t[2], stride, &r)?;
                let grads = vec![g.input, g.params["kernels"].clone(), g.params["bias"].clone()];
                Ok((readout(&y, &r), self.scale(grads)))
            })
        })
    }

    fn linear(&self) -> Result<ComponentResult> {
        self.component("linear", |rng, gc| {
            let x = uniform(rng, &[6], -1.0, 1.0);
            let w = uniform(rng, &[4, 6], -1.0, 1.0);
            let b = uniform(rng, &[4], -1.0, 1.0);
            let r = uniform(rng, &[4], -1.0, 1.0);
            gc.run(&[x, w, b], |t| {
                let y = linear_forward(&t[0], &t[1], &t[2])?;
                let g = linear_backward(&t[0], &t[1], &t[2], &r)?;
                let grads = vec![g.input, g.params["weight"].clone(), g.params["bias"].clone()];
                Ok((readout(&y, &r), self.scale(grads)))
            })
        })
    }

    fn relu(&self) -> Result<ComponentResult> {
        self.component("relu", |rng, gc| {
            let x = off_kink(rng, &[4, 4, 3]);
            let r = uniform(rng, &[4, 4, 3], -1.0, 1.0);
            gc.run(&[x], |t| {
                let y = relu_forward(&t[0]);
                let g = relu_backward(&t[0], &r)?;
                Ok((readout(&y, &r), self.scale(vec![g])))
            })
        })
    }

    fn maxpool(&self) -> Result<ComponentResult> {
        self.component("maxpool", |rng, gc| {
            let x = uniform(rng, &[6, 6, 2], -1.0, 1.0);
            let r = uniform(rng, &[3, 3, 2], -1.0, 1.0);
            let (_, base) = maxpool2_forward(&x)?;
            let base = base.winners().to_vec();
            // Skip probes that move a window's winner.
            let moved = |t: &[Tensor]| maxpool2_forward(&t[0]).map_or(true, |(_, c)| c.winners() != base);
            gc.run_guarded(
                &[x],
                |t| {
                    let (y, cache) = maxpool2_forward(&t[0])?;
                    let g = maxpool2_backward(&cache, &r)?;
                    Ok((readout(&y, &r), self.scale(vec![g])))
                },
                moved,
            )
        })
    }

    fn softmax_ce(&self) -> Result<ComponentResult> {
        self.component("softmax_ce", |rng, gc| {
            let z = uniform(rng, &[5], -3.0, 3.0);
            let label = rng.gen_range(0..5);
            gc.run(&[z], |t| {
                let (l, g) = softmax_cross_entropy(t[0].data(), label)?;
                Ok((l, self.scale(vec![Tensor::new(vec![5], g)?])))
            })
        })
    }

    fn hinge(&self) -> Result<ComponentResult> {
        self.component("hinge", |rng, gc| {
            let delta = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            // Centre the scores so the hinge is active on most seeds.
            let u = uniform(rng, &[2, 4, 4], -1.5, 0.5 * delta + 0.2);
            let guard = 10.0 * gc.fd_step;
            let near_kink = move |t: &[Tensor]| {
                let d = t[0].data();
                let top = argmax(d);
                let runner_up = d
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != top)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                d[top] - runner_up < guard || (1.0 - delta * d[top]).abs() < guard
            };
            gc.run_guarded(
                &[u],
                |t| {
                    let (r, g) = attention_hinge(&t[0], delta);
                    Ok((r, self.scale(vec![g])))
                },
                near_kink,
            )
        })
    }

    fn attention(&self, k: usize) -> Result<ComponentResult> {
        let (d, c) = (4, 3);
        self.component(&format!("attention_pool_k{k}"), |rng, gc| {
            let mut inputs: Vec<Tensor> = (0..k).map(|_| uniform(rng, &[d, d, c], -1.0, 1.0)).collect();
            inputs.push(uniform(rng, &[c], -1.5, 1.5));
            inputs.push(uniform(rng, &[1], -1.0, 1.0));
            let r = uniform(rng, &[c], -1.0, 1.0);
            gc.run(&inputs, |t| {
                let maps = &t[..k];
                let params = AttentionParams {
                    w: t[k].data().to_vec(),
                    b: t[k + 1].data()[0],
                };
                let trace = attention_forward(maps, &params, 0.1)?;
                let g = attention_backward(&trace, maps, &params, &r)?;
                let mut grads = g.maps;
                grads.push(Tensor::vector(g.w));
                grads.push(Tensor::scalar(g.b));
                Ok((readout(&trace.pooled, &r), self.scale(grads)))
            })
        })
    }
}

/// Runs every component and returns one result per component, in a fixed
/// order.
pub fn run_grad_suite(opts: SuiteOptions) -> Result<Vec<ComponentResult>> {
    let ch = Checker { opts };
    Ok(vec![
        ch.conv()?,
        ch.linear()?,
        ch.relu()?,
        ch.maxpool()?,
        ch.softmax_ce()?,
        ch.hinge()?,
        ch.attention(1)?,
        ch.attention(2)?,
        ch.attention(3)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(perturb: bool) -> SuiteOptions {
        SuiteOptions {
            seeds: 3,
            perturb,
            ..SuiteOptions::default()
        }
    }

    #[test]
    fn fresh_build_passes() {
        let res = run_grad_suite(quick(false)).unwrap();
        assert_eq!(res.len(), 9);
        for r in &res {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn perturbed_gradients_fail() {
        let res = run_grad_suite(quick(true)).unwrap();
        // Components whose every probed gradient is zero cannot notice.
        let failing = res.iter().filter(|r| !r.passed()).count();
        assert!(failing >= 8, "{res:?}");
    }

    #[test]
    fn names_are_unique() {
        let res = run_grad_suite(SuiteOptions {
            seeds: 1,
            probes: 2,
            ..SuiteOptions::default()
        })
        .unwrap();
        let mut names: Vec<&str> = res.iter().map(|r| r.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), res.len());
    }
}
