//! Attention pooling over the feature maps of a grouped instance.
//!
//! For each image `k` in the group and each spatial cell `(i, j)`:
//!
//! ```text
//! u = w·x + b                      linear attention score
//! s = softplus(u)                  unnormalised score, > 0
//! a = (s + eps) / Σ_ij (s + eps)   normalised within image k
//! x̂ = a · x
//! h = 1/(d² K) Σ_ijk x̂            group representation
//! ```
//!
//! The normalising sum runs over the cells of one image only, so every
//! image contributes its own distribution over cells. The `1/(d² K)` factor
//! is kept as written even though `a` already sums to one per image.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus_scalar, Tensor};

thread_local! {
    static FORWARD_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`attention_forward`] calls made on the current thread.
pub fn forward_call_count() -> usize {
    FORWARD_CALLS.with(|c| c.get())
}

/// Weight and bias of the single shared attention detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl AttentionParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            w: vec![0.0; channels],
            b: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.w.len()
    }
}

/// Everything computed by [`attention_forward`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// `[K, d, d]`
    pub linear_scores: Tensor,
    /// `[K, d, d]`
    pub scores: Tensor,
    /// `[K, d, d]`
    pub normalized: Tensor,
    /// `[K, d, d, c]`
    pub attended: Tensor,
    /// `[c]`
    pub pooled: Tensor,
    pub epsilon: f64,
}

impl AttentionTrace {
    pub fn group_size(&self) -> usize {
        self.linear_scores.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.linear_scores.shape()[1]
    }

    /// Normalised attention map of image `k`, `d * d` values in row-major order.
    pub fn image_attention(&self, k: usize) -> &[f64] {
        let n = self.side() * self.side();
        &self.normalized.data()[k * n..(k + 1) * n]
    }
}

/// Gradients with respect to the group's feature maps and the detector.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub maps: Vec<Tensor>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl AttentionGrads {
    fn zeros(k: usize, d: usize, c: usize) -> Self {
        Self {
            maps: (0..k).map(|_| Tensor::zeros(&[d, d, c])).collect(),
            w: vec![0.0; c],
            b: 0.0,
        }
    }

    pub fn accumulate(&mut self, other: &AttentionGrads) -> Result<()> {
        if self.maps.len() != other.maps.len() || self.w.len() != other.w.len() {
            return Err(Error::dim("AttentionGrads::accumulate", "group or channel mismatch"));
        }
        for (a, b) in self.maps.iter_mut().zip(&other.maps) {
            a.add_assign(b)?;
        }
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        self.b += other.b;
        Ok(())
    }
}

/// Validates a group of feature maps and returns `(K, d, c)`.
pub fn group_dims(maps: &[Tensor]) -> Result<(usize, usize, usize)> {
    const OP: &str = "attention";
    let first = maps
        .first()
        .ok_or_else(|| Error::dim(OP, "group must contain at least one feature map"))?;
    let (d, w, c) = first.hwc(OP)?;
    if d != w {
        return Err(Error::dim(OP, format!("feature map is {d}×{w}, expected square")));
    }
    for (k, m) in maps.iter().enumerate().skip(1) {
        if m.shape() != first.shape() {
            return Err(Error::dim(
                OP,
                format!("map {k} has shape {:?}, map 0 has {:?}", m.shape(), first.shape()),
            ));
        }
    }
    Ok((maps.len(), d, c))
}

fn check_channels(params: &AttentionParams, c: usize) -> Result<()> {
    if params.channels() != c {
        return Err(Error::dim(
            "attention",
            format!(
                "detector weight has {} channels, feature maps have {c}",
                params.channels()
            ),
        ));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear attention scores `u = w·x + b`, shape `[K, d, d]`.
pub fn linear_scores(maps: &[Tensor], params: &AttentionParams) -> Result<Tensor> {
    let (k, d, c) = group_dims(maps)?;
    check_channels(params, c)?;
    let mut u = Vec::with_capacity(k * d * d);
    for m in maps {
        for x in m.data().chunks_exact(c) {
            u.push(dot(&params.w, x) + params.b);
        }
    }
    Tensor::new(vec![k, d, d], u)
}

/// Weights every cell's feature vector by `weights` (`[K, d, d]`) and pools
/// with the `1/(d² K)` factor. Returns the attended features and `h`.
pub fn attend_and_pool(maps: &[Tensor], weights: &Tensor) -> Result<(Tensor, Tensor)> {
    let (k, d, c) = group_dims(maps)?;
    if weights.shape() != [k, d, d] {
        return Err(Error::dim(
            "attend_and_pool",
            format!("weights {:?}, expected [{k}, {d}, {d}]", weights.shape()),
        ));
    }
    let mut attended = Vec::with_capacity(k * d * d * c);
    let mut h = vec![0.0; c];
    for (m, ws) in maps.iter().zip(weights.data().chunks_exact(d * d)) {
        for (x, &a) in m.data().chunks_exact(c).zip(ws) {
            for (acc, &v) in h.iter_mut().zip(x) {
                let xv = a * v;
                attended.push(xv);
                *acc += xv;
            }
        }
    }
    let scale = 1.0 / (d * d * k) as f64;
    for v in &mut h {
        *v *= scale;
    }
    Ok((
        Tensor::new(vec![k, d, d, c], attended)?,
        Tensor::new(vec![c], h)?,
    ))
}

pub fn attention_forward(
    maps: &[Tensor],
    params: &AttentionParams,
    epsilon: f64,
) -> Result<AttentionTrace> {
    FORWARD_CALLS.with(|n| n.set(n.get() + 1));
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Domain(format!("epsilon must be finite and ≥ 0, got {epsilon}")));
    }
    let (k, d, _) = group_dims(maps)?;
    let u = linear_scores(maps, params)?;
    let s = u.map(softplus_scalar);
    let cells = d * d;
    let mut a = Vec::with_capacity(k * cells);
    for img in s.data().chunks_exact(cells) {
        let z: f64 = img.iter().map(|v| v + epsilon).sum();
        if z == 0.0 || !z.is_finite() {
            return Err(Error::DivisionByZero("attention normalisation"));
        }
        a.extend(img.iter().map(|v| (v + epsilon) / z));
    }
    let a = Tensor::new(vec![k, d, d], a)?;
    let (attended, pooled) = attend_and_pool(maps, &a)?;
    Ok(AttentionTrace {
        linear_scores: u,
        scores: s,
        normalized: a,
        attended,
        pooled,
        epsilon,
    })
}

/// Backpropagates through the linear scores alone: given `dL/du`, returns
/// the gradients reaching the maps, `w` and `b`.
pub fn linear_score_backward(
    maps: &[Tensor],
    params: &AttentionParams,
    grad_u: &Tensor,
) -> Result<AttentionGrads> {
    let (k, d, c) = group_dims(maps)?;
    check_channels(params, c)?;
    if grad_u.shape() != [k, d, d] {
        return Err(Error::dim(
            "linear_score_backward",
            format!("grad_u {:?}, expected [{k}, {d}, {d}]", grad_u.shape()),
        ));
    }
    let mut grads = AttentionGrads::zeros(k, d, c);
    for ((m, gm), gus) in maps
        .iter()
        .zip(grads.maps.iter_mut())
        .zip(grad_u.data().chunks_exact(d * d))
    {
        for ((x, gx), &gu) in m
            .data()
            .chunks_exact(c)
            .zip(gm.data_mut().chunks_exact_mut(c))
            .zip(gus)
        {
            if gu == 0.0 {
                continue;
            }
            for ch in 0..c {
                gx[ch] += gu * params.w[ch];
                grads.w[ch] += gu * x[ch];
            }
            grads.b += gu;
        }
    }
    Ok(grads)
}

pub fn attention_backward(
    trace: &AttentionTrace,
    maps: &[Tensor],
    params: &AttentionParams,
    grad_h: &Tensor,
) -> Result<AttentionGrads> {
    let (k, d, c) = group_dims(maps)?;
    check_channels(params, c)?;
    if trace.linear_scores.shape() != [k, d, d] || trace.pooled.len() != c {
        return Err(Error::State(format!(
            "trace built for scores {:?} / {} channels, maps are [{k}, {d}, {d}] / {c}",
            trace.linear_scores.shape(),
            trace.pooled.len()
        )));
    }
    for (idx, m) in maps.iter().enumerate() {
        let u0 = dot(&params.w, &m.data()[..c]) + params.b;
        if u0.to_bits() != trace.linear_scores.data()[idx * d * d].to_bits() {
            return Err(Error::State(format!(
                "trace does not belong to these maps/params (image {idx})"
            )));
        }
    }
    if grad_h.len() != c {
        return Err(Error::dim(
            "attention_backward",
            format!("grad_h has {} entries, expected {c}", grad_h.len()),
        ));
    }

    let cells = d * d;
    let alpha = 1.0 / (cells * k) as f64;
    let g = grad_h.data();
    let mut grad_u = vec![0.0; k * cells];
    let mut grads = AttentionGrads::zeros(k, d, c);

    for img in 0..k {
        let xs = maps[img].data();
        let a = &trace.normalized.data()[img * cells..(img + 1) * cells];
        let s = &trace.scores.data()[img * cells..(img + 1) * cells];
        let u = &trace.linear_scores.data()[img * cells..(img + 1) * cells];
        let z: f64 = s.iter().map(|v| v + trace.epsilon).sum();
        let gx = grads.maps[img].data_mut();

        // dL/da_p = alpha * g·x_p, and x̂ = a x feeds x directly.
        let mut gamma = vec![0.0; cells];
        for p in 0..cells {
            let x = &xs[p * c..(p + 1) * c];
            gamma[p] = alpha * dot(g, x);
            for ch in 0..c {
                gx[p * c + ch] += alpha * a[p] * g[ch];
            }
        }
        // Quotient rule for a_p = t_p / Σ t.
        let mean_gamma: f64 = a.iter().zip(&gamma).map(|(ai, gi)| ai * gi).sum();
        for p in 0..cells {
            let dt = (gamma[p] - mean_gamma) / z;
            grad_u[img * cells + p] = dt * sigmoid(u[p]);
        }
    }
    let through_scores = linear_score_backward(maps, params, &Tensor::new(vec![k, d, d], grad_u)?)?;
    grads.accumulate(&through_scores)?;
    Ok(grads)
}

/// Plain global average over all cells of all images in the group.
pub fn average_pool_forward(maps: &[Tensor]) -> Result<Tensor> {
    let (k, d, c) = group_dims(maps)?;
    let mut h = vec![0.0; c];
    for m in maps {
        for x in m.data().chunks_exact(c) {
            for (acc, v) in h.iter_mut().zip(x) {
                *acc += v;
            }
        }
    }
    let scale = 1.0 / (d * d * k) as f64;
    for v in &mut h {
        *v *= scale;
    }
    Tensor::new(vec![c], h)
}

pub fn average_pool_backward(
    group_size: usize,
    side: usize,
    grad_h: &Tensor,
) -> Result<Vec<Tensor>> {
    if group_size == 0 || side == 0 {
        return Err(Error::dim("average_pool_backward", "empty group"));
    }
    let c = grad_h.len();
    let scale = 1.0 / (side * side * group_size) as f64;
    let cell: Vec<f64> = grad_h.data().iter().map(|g| g * scale).collect();
    let map = Tensor::new(
        vec![side, side, c],
        cell.iter().copied().cycle().take(side * side * c).collect(),
    )?;
    Ok(vec![map; group_size])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_maps(k: usize, d: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        (0..k)
            .map(|_| {
                Tensor::new(
                    vec![d, d, c],
                    (0..d * d * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn random_params(c: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams {
            w: (0..c).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            b: rng.gen_range(-1.0..1.0),
        }
    }

    /// Naive transcription of the pooling formulas with explicit indices.
    fn naive_pool(maps: &[Tensor], p: &AttentionParams, eps: f64) -> Vec<f64> {
        let k = maps.len();
        let s = maps[0].shape();
        let (d, c) = (s[0], s[2]);
        let x = |kk: usize, i: usize, j: usize, ch: usize| maps[kk].data()[(i * d + j) * c + ch];
        let score = |kk, i, j| {
            let mut u = p.b;
            for ch in 0..c {
                u += p.w[ch] * x(kk, i, j, ch);
            }
            (1.0 + u.exp()).ln()
        };
        let mut h = vec![0.0; c];
        for kk in 0..k {
            let mut denom = 0.0;
            for i in 0..d {
                for j in 0..d {
                    denom += score(kk, i, j) + eps;
                }
            }
            for i in 0..d {
                for j in 0..d {
                    let a = (score(kk, i, j) + eps) / denom;
                    for ch in 0..c {
                        h[ch] += a * x(kk, i, j, ch);
                    }
                }
            }
        }
        h.iter().map(|v| v / (d * d * k) as f64).collect()
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let maps = random_maps(2, 4, 3, &mut rng);
        let p = random_params(3, &mut rng);
        let trace = attention_forward(&maps, &p, 0.1).unwrap();
        let want = naive_pool(&maps, &p, 0.1);
        for (a, b) in trace.pooled.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn vanishing_scores_give_uniform_attention() {
        let maps = vec![Tensor::filled(&[4, 4, 2], 1.0)];
        let p = AttentionParams {
            w: vec![0.0, 0.0],
            b: -60.0,
        };
        let trace = attention_forward(&maps, &p, 0.1).unwrap();
        for &a in trace.normalized.data() {
            assert!((a - 1.0 / 16.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_input_scale_law() {
        let v = [0.5, -2.0, 3.0];
        let maps = vec![Tensor::new(vec![2, 2, 3], v.repeat(4)).unwrap()];
        let p = AttentionParams {
            w: vec![0.3, 0.1, -0.7],
            b: 0.2,
        };
        let trace = attention_forward(&maps, &p, 0.1).unwrap();
        for (h, x) in trace.pooled.data().iter().zip(v) {
            assert!((h - x / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_and_zero_normaliser() {
        let maps = vec![Tensor::zeros(&[2, 2, 3])];
        let r = attention_forward(&maps, &AttentionParams::zeros(2), 0.1);
        assert!(matches!(r, Err(Error::Dimension { .. })));

        let p = AttentionParams {
            w: vec![0.0; 3],
            b: -1000.0,
        };
        let r = attention_forward(&maps, &p, 0.0);
        assert!(matches!(r, Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn average_pool_cases() {
        let v = [1.0, 2.0, -3.0];
        let maps = vec![Tensor::new(vec![2, 2, 3], v.repeat(4)).unwrap(); 3];
        assert_eq!(average_pool_forward(&maps).unwrap().data(), &v);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_maps(1, 4, 3, &mut rng).remove(0);
        let neg = m.map(|x| -x);
        let h = average_pool_forward(&[m.clone(), neg]).unwrap();
        assert!(h.data().iter().all(|&x| x.abs() < 1e-15));

        let maps = random_maps(2, 4, 3, &mut rng);
        let h = average_pool_forward(&maps).unwrap();
        for ch in 0..3 {
            let mut acc = 0.0;
            for m in &maps {
                for cell in 0..16 {
                    acc += m.data()[cell * 3 + ch];
                }
            }
            assert!((h.data()[ch] - acc / 32.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_uniform_weights_reproduce_average_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(k, d) in &[(1, 4), (2, 4), (3, 8)] {
            let maps = random_maps(k, d, 3, &mut rng);
            let uniform = Tensor::filled(&[k, d, d], 1.0 / (d * d) as f64);
            let (_, mut h) = attend_and_pool(&maps, &uniform).unwrap();
            // Undo the extra 1/d² that uniform weights contribute.
            h.scale((d * d) as f64);
            assert_eq!(h, average_pool_forward(&maps).unwrap());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps = random_maps(2, 3, 2, &mut rng);
        let p = random_params(2, &mut rng);
        let tr = attention_forward(&maps, &p, 0.1).unwrap();
        let g = attention_backward(&tr, &maps, &p, &Tensor::zeros(&[2])).unwrap();
        assert!(g.maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(g.w.iter().all(|&v| v == 0.0));
        assert_eq!(g.b, 0.0);
    }

    #[test]
    fn mismatched_trace_is_a_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps = random_maps(2, 3, 2, &mut rng);
        let other = random_maps(2, 3, 2, &mut rng);
        let p = random_params(2, &mut rng);
        let tr = attention_forward(&maps, &p, 0.1).unwrap();
        let r = attention_backward(&tr, &other, &p, &Tensor::zeros(&[2]));
        assert!(matches!(r, Err(Error::State(_))));
        let r = attention_backward(&tr, &maps[..1], &p, &Tensor::zeros(&[2]));
        assert!(matches!(r, Err(Error::State(_))));
    }

    /// Probe vector q: f = q·h, so grad_h = q.
    fn probe_fn(
        k: usize,
        q: Vec<f64>,
        eps: f64,
    ) -> impl Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        move |t: &[Tensor]| {
            let maps = &t[..k];
            let p = AttentionParams {
                w: t[k].data().to_vec(),
                b: t[k + 1].data()[0],
            };
            let tr = attention_forward(maps, &p, eps)?;
            let q = Tensor::vector(q.clone());
            let f = tr.pooled.dot(&q)?;
            let g = attention_backward(&tr, maps, &p, &q)?;
            let mut out = g.maps;
            out.push(Tensor::vector(g.w));
            out.push(Tensor::scalar(g.b));
            Ok((f, out))
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 3;
            let maps = random_maps(k, 4, 3, &mut rng);
            let p = random_params(3, &mut rng);
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut inputs = maps;
            inputs.push(Tensor::vector(p.w.clone()));
            inputs.push(Tensor::scalar(p.b));
            let report = GradCheck {
                probe_count: 60,
                fd_step: 1e-5,
                seed,
            }
            .run(&inputs, probe_fn(k, q, 0.1))
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn detector_weight_gradient_with_equal_scores() {
        // w = 0 puts every cell at the same score; the gradient w.r.t. w is
        // still informative because moving w breaks the tie.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let maps = random_maps(2, 4, 3, &mut rng);
        let p = AttentionParams {
            w: vec![0.0; 3],
            b: 0.4,
        };
        let q = vec![0.7, -0.2, 0.5];
        let f = |w: &[f64]| {
            let pp = AttentionParams { w: w.to_vec(), b: p.b };
            attention_forward(&maps, &pp, 0.1)
                .unwrap()
                .pooled
                .dot(&Tensor::vector(q.clone()))
                .unwrap()
        };
        let tr = attention_forward(&maps, &p, 0.1).unwrap();
        let g = attention_backward(&tr, &maps, &p, &Tensor::vector(q.clone())).unwrap();
        let step = 1e-5;
        for ch in 0..3 {
            let mut wp = p.w.clone();
            wp[ch] += step;
            let mut wm = p.w.clone();
            wm[ch] -= step;
            let numeric = (f(&wp) - f(&wm)) / (2.0 * step);
            let rel = (g.w[ch] - numeric).abs() / (g.w[ch].abs() + numeric.abs()).max(1e-8);
            assert!(rel < 1e-6, "channel {ch}: {} vs {numeric}", g.w[ch]);
        }
    }
}
