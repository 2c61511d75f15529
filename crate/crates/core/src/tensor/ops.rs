use std::collections::BTreeMap;

use super::{LayerGrads, Tensor};
use crate::error::{Error, Result};

/// `ln(1 + e^x)`, switching to `x + ln(1 + e^-x)` above 30.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Logistic function; the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_dims(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    const OP: &str = "conv2d";
    let (h, w, cin) = input.hwc(OP)?;
    if h != w {
        return Err(Error::dim(OP, format!("input width {w} differs from height {h}")));
    }
    let (k, kw, kcin, cout) = match kernels.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return Err(Error::dim(OP, format!("kernels must be rank 4, got {s:?}"))),
    };
    if k != kw {
        return Err(Error::dim(OP, format!("kernel width {kw} differs from height {k}")));
    }
    if kcin != cin {
        return Err(Error::dim(
            OP,
            format!("kernel input-channel axis is {kcin}, input has {cin} channels"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(
            OP,
            format!("bias axis is {:?}, expected [{cout}]", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::dim(OP, "stride must be positive"));
    }
    if k > h {
        return Err(Error::dim(OP, format!("kernel side {k} exceeds input side {h}")));
    }
    let out = (h - k) / stride + 1;
    Ok((h, cin, k, cout, out))
}

/// Valid-padding cross-correlation with bias.
///
/// `input` is `[h, h, cin]`, `kernels` is `[k, k, cin, cout]`; the result is
/// `[o, o, cout]` with `o = (h - k) / stride + 1`.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let (h, cin, k, cout, out) = conv_dims(input, kernels, bias, stride)?;
    let x = input.data();
    let kd = kernels.data();
    let mut y = vec![0.0; out * out * cout];
    for oy in 0..out {
        for ox in 0..out {
            let dst = &mut y[(oy * out + ox) * cout..(oy * out + ox + 1) * cout];
            dst.copy_from_slice(bias.data());
            for ky in 0..k {
                for kx in 0..k {
                    let src = ((oy * stride + ky) * h + ox * stride + kx) * cin;
                    for ci in 0..cin {
                        let xv = x[src + ci];
                        let kbase = ((ky * k + kx) * cin + ci) * cout;
                        for (d, kv) in dst.iter_mut().zip(&kd[kbase..kbase + cout]) {
                            *d += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![out, out, cout], y)
}

/// Gradients of [`conv2d_forward`] for upstream gradient `grad_out`.
/// Parameter gradients are keyed `"kernels"` and `"bias"`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    let (h, cin, k, cout, out) = conv_dims(input, kernels, bias, stride)?;
    if grad_out.shape() != [out, out, cout] {
        return Err(Error::dim(
            "conv2d_backward",
            format!(
                "upstream gradient {:?}, expected [{out}, {out}, {cout}]",
                grad_out.shape()
            ),
        ));
    }
    let x = input.data();
    let kd = kernels.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gb = vec![0.0; cout];
    for oy in 0..out {
        for ox in 0..out {
            let go = &g[(oy * out + ox) * cout..(oy * out + ox + 1) * cout];
            for (b, v) in gb.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..k {
                for kx in 0..k {
                    let src = ((oy * stride + ky) * h + ox * stride + kx) * cin;
                    for ci in 0..cin {
                        let xv = x[src + ci];
                        let kbase = ((ky * k + kx) * cin + ci) * cout;
                        let mut acc = 0.0;
                        for co in 0..cout {
                            gk[kbase + co] += xv * go[co];
                            acc += kd[kbase + co] * go[co];
                        }
                        gx[src + ci] += acc;
                    }
                }
            }
        }
    }
    let mut params = BTreeMap::new();
    params.insert("kernels", Tensor::new(kernels.shape().to_vec(), gk)?);
    params.insert("bias", Tensor::new(vec![cout], gb)?);
    Ok(LayerGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        params,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.check_same_shape(grad_out, "relu_backward")?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Argmax routing recorded by [`maxpool2_forward`].
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl MaxPoolCache {
    /// Flat input index chosen by each output element.
    pub fn winners(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2×2 stride-2 max pooling. Odd trailing rows/columns are dropped; ties go
/// to the lowest linear input index.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
    let (h, w, c) = x.hwc("maxpool2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::dim(
            "maxpool2",
            format!("spatial dims {h}×{w} too small for 2×2 pooling"),
        ));
    }
    let d = x.data();
    let mut y = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let candidates = [
                    ((2 * i) * w + 2 * j) * c + ch,
                    ((2 * i) * w + 2 * j + 1) * c + ch,
                    ((2 * i + 1) * w + 2 * j) * c + ch,
                    ((2 * i + 1) * w + 2 * j + 1) * c + ch,
                ];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                y.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![oh, ow, c], y)?,
        MaxPoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward(cache: &MaxPoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::dim(
            "maxpool2_backward",
            format!(
                "upstream gradient has {} elements, cache routes {}",
                grad_out.len(),
                cache.argmax.len()
            ),
        ));
    }
    let mut gx = Tensor::zeros(&cache.input_shape);
    let dst = gx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        dst[idx] += g;
    }
    Ok(gx)
}

fn linear_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    const OP: &str = "linear";
    let (out, inp) = match weight.shape() {
        &[o, i] => (o, i),
        s => return Err(Error::dim(OP, format!("weight must be rank 2, got {s:?}"))),
    };
    if x.len() != inp {
        return Err(Error::dim(
            OP,
            format!("input length {} does not match weight column axis {inp}", x.len()),
        ));
    }
    if bias.shape() != [out] {
        return Err(Error::dim(
            OP,
            format!("bias axis is {:?}, expected [{out}]", bias.shape()),
        ));
    }
    Ok((out, inp))
}

/// `y = W x + bias` with `W` of shape `[out, in]`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out, inp) = linear_dims(x, weight, bias)?;
    let w = weight.data();
    let xs = x.data();
    let y = (0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            bias.data()[o] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::new(vec![out], y)
}

/// Parameter gradients keyed `"weight"` and `"bias"`; the input gradient keeps
/// the input's shape.
pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    let (out, inp) = linear_dims(x, weight, bias)?;
    if grad_out.len() != out {
        return Err(Error::dim(
            "linear_backward",
            format!("upstream gradient length {}, expected {out}", grad_out.len()),
        ));
    }
    let w = weight.data();
    let xs = x.data();
    let g = grad_out.data();
    let mut gw = vec![0.0; out * inp];
    let mut gx = vec![0.0; inp];
    for o in 0..out {
        let row = &w[o * inp..(o + 1) * inp];
        for i in 0..inp {
            gw[o * inp + i] = g[o] * xs[i];
            gx[i] += row[i] * g[o];
        }
    }
    let mut params = BTreeMap::new();
    params.insert("weight", Tensor::new(vec![out, inp], gw)?);
    params.insert("bias", Tensor::new(vec![out], g.to_vec())?);
    Ok(LayerGrads {
        input: Tensor::new(x.shape().to_vec(), gx)?,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop cross-correlation, written independently of the
    /// strided-slice implementation above.
    fn conv_oracle(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
        let s = input.shape();
        let ks = kernels.shape();
        let (h, cin, k, cout) = (s[0], s[2], ks[0], ks[3]);
        let out = (h - k) / stride + 1;
        let at = |t: &Tensor, idx: &[usize]| {
            let mut flat = 0;
            for (d, i) in t.shape().iter().zip(idx) {
                flat = flat * d + i;
            }
            t.data()[flat]
        };
        let mut y = Vec::new();
        for oy in 0..out {
            for ox in 0..out {
                for co in 0..cout {
                    let mut acc = at(bias, &[co]);
                    for ky in 0..k {
                        for kx in 0..k {
                            for ci in 0..cin {
                                acc += at(input, &[oy * stride + ky, ox * stride + kx, ci])
                                    * at(kernels, &[ky, kx, ci, co]);
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
        Tensor::new(vec![out, out, cout], y).unwrap()
    }

    #[test]
    fn softplus_reference_points() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus_scalar(50.0) - 50.0).abs() < 1e-12);
        let tiny = softplus_scalar(-50.0);
        assert!(tiny > 0.0 && tiny < 1e-20);
        assert!(softplus_scalar(-700.0) > 0.0);
        assert!(softplus_scalar(800.0).is_finite());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn conv_scalar_multiply_add() {
        let x = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::vector(vec![1.0]);
        assert_eq!(conv2d_forward(&x, &k, &b, 1).unwrap().data(), &[11.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[5, 5, 1], &mut rng);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::vector(vec![0.0]);
        assert_eq!(conv2d_forward(&x, &k, &b, 1).unwrap(), x);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        for (seed, stride) in [(0u64, 1usize), (1, 1), (2, 2), (3, 3)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[6, 6, 2], &mut rng);
            let k = random(&[3, 3, 2, 4], &mut rng);
            let b = random(&[4], &mut rng);
            let got = conv2d_forward(&x, &k, &b, stride).unwrap();
            let want = conv_oracle(&x, &k, &b, stride);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_errors_name_the_axis() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        let b = Tensor::zeros(&[1]);
        let err = conv2d_forward(&x, &k, &b, 1).unwrap_err().to_string();
        assert!(err.contains("input-channel"), "{err}");

        let k = Tensor::zeros(&[5, 5, 2, 1]);
        let err = conv2d_forward(&x, &k, &b, 1).unwrap_err().to_string();
        assert!(err.contains("exceeds"), "{err}");

        let x = Tensor::zeros(&[4, 5, 2]);
        let k = Tensor::zeros(&[3, 3, 2, 1]);
        let err = conv2d_forward(&x, &k, &b, 1).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn relu_and_maxpool_basics() {
        let x = Tensor::vector(vec![-3.0, 0.0, 2.5]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.5]);

        let c = Tensor::filled(&[4, 4, 3], 0.7);
        let (y, _) = maxpool2_forward(&c).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let c = Tensor::filled(&[2, 2, 1], 1.0);
        let (_, cache) = maxpool2_forward(&c).unwrap();
        let g = maxpool2_backward(&cache, &Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let x = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), x.data());
        let bad = Tensor::zeros(&[2]);
        assert!(linear_forward(&x, &w, &bad).is_err());
    }

    #[test]
    fn forward_ops_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[7, 7, 3], &mut rng);
        let k = random(&[3, 3, 3, 5], &mut rng);
        let b = random(&[5], &mut rng);
        let a = conv2d_forward(&x, &k, &b, 1).unwrap();
        let c = conv2d_forward(&x, &k, &b, 1).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
