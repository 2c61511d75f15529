//! Network parameters: convolutional extractor, attention detector and
//! linear classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_backward, attention_forward, average_pool_backward, average_pool_forward,
    AttentionParams, AttentionTrace,
};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, linear_forward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, MaxPoolCache, Tensor,
};
use crate::trainer::TrainConfig;

const KERNEL: usize = 3;

/// Layers below the pooling stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    /// Images are already feature maps.
    Identity,
    /// One conv3×3 → relu → maxpool2 block per entry, with that many
    /// output channels.
    Conv { channels: Vec<usize> },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::Conv { channels: vec![16] }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExtractorSpec::Identity => Ok(()),
            ExtractorSpec::Conv { channels } => {
                if channels.is_empty() || channels.len() > 2 {
                    return Err(Error::Config(format!(
                        "extractor needs 1 or 2 conv blocks, got {}",
                        channels.len()
                    )));
                }
                if channels.contains(&0) {
                    return Err(Error::Config("conv block with zero channels".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernels: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub spec: ExtractorSpec,
    pub input_side: usize,
    pub input_channels: usize,
    pub blocks: Vec<ConvBlock>,
}

/// Intermediate values of one image's extractor pass.
#[derive(Debug, Clone)]
pub struct ExtractorCache {
    steps: Vec<BlockCache>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor,
    pre_relu: Tensor,
    pool: MaxPoolCache,
}

impl Extractor {
    pub fn new(spec: &ExtractorSpec, input_side: usize, input_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::new();
        if let ExtractorSpec::Conv { channels } = spec {
            let mut cin = input_channels;
            let mut side = input_side;
            for &cout in channels {
                if side < KERNEL || (side - KERNEL + 1) < 2 {
                    return Err(Error::Config(format!(
                        "input side {input_side} too small for {} conv blocks",
                        channels.len()
                    )));
                }
                let fan_in = (KERNEL * KERNEL * cin) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let n = KERNEL * KERNEL * cin * cout;
                blocks.push(ConvBlock {
                    kernels: Tensor::new(
                        vec![KERNEL, KERNEL, cin, cout],
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    )?,
                    bias: Tensor::zeros(&[cout]),
                });
                side = (side - KERNEL + 1) / 2;
                cin = cout;
            }
        }
        Ok(Self {
            spec: spec.clone(),
            input_side,
            input_channels,
            blocks,
        })
    }

    pub fn feature_side(&self) -> usize {
        self.blocks
            .iter()
            .fold(self.input_side, |side, _| (side - KERNEL + 1) / 2)
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.input_channels, |b| b.bias.len())
    }

    /// Pixel-index coordinate of the receptive-field centre of feature cell
    /// `i` along one axis (pixel centres sit at integers).
    pub fn cell_center(&self, i: usize) -> f64 {
        let mut offset = 0.0;
        let mut stride = 1.0;
        for _ in &self.blocks {
            offset += (KERNEL as f64 - 1.0) / 2.0 * stride;
            offset += 0.5 * stride;
            stride *= 2.0;
        }
        offset + i as f64 * stride
    }

    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, ExtractorCache)> {
        if image.shape() != [self.input_side, self.input_side, self.input_channels] {
            return Err(Error::dim(
                "extractor",
                format!(
                    "image shape {:?}, model expects [{}, {}, {}]",
                    image.shape(),
                    self.input_side,
                    self.input_side,
                    self.input_channels
                ),
            ));
        }
        let mut x = image.clone();
        let mut steps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let pre = conv2d_forward(&x, &b.kernels, &b.bias, 1)?;
            let (pooled, pool) = maxpool2_forward(&relu_forward(&pre))?;
            steps.push(BlockCache {
                input: std::mem::replace(&mut x, pooled),
                pre_relu: pre,
                pool,
            });
        }
        Ok((x, ExtractorCache { steps }))
    }

    /// Accumulates parameter gradients for upstream `grad_features` into
    /// `grads` (one (kernels, bias) pair per block).
    pub fn backward(&self, cache: &ExtractorCache, grad_features: &Tensor, grads: &mut [(Tensor, Tensor)]) -> Result<()> {
        let mut g = grad_features.clone();
        for ((b, step), acc) in self.blocks.iter().zip(&cache.steps).zip(grads.iter_mut()).rev() {
            let g_relu = maxpool2_backward(&step.pool, &g)?;
            let g_pre = relu_backward(&step.pre_relu, &g_relu)?;
            let lg = conv2d_backward(&step.input, &b.kernels, &b.bias, 1, &g_pre)?;
            acc.0.add_assign(&lg.params["kernels"])?;
            acc.1.add_assign(&lg.params["bias"])?;
            g = lg.input;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub extractor: Extractor,
    pub attention: AttentionParams,
    /// `[C, c]`
    pub classifier_weight: Tensor,
    /// `[C]`
    pub classifier_bias: Tensor,
    pub class_count: usize,
    pub step: u64,
    pub config: TrainConfig,
}

/// Forward pass of one group, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct GroupForward {
    pub features: Vec<Tensor>,
    pub caches: Vec<ExtractorCache>,
    pub pooled: Tensor,
    pub trace: Option<AttentionTrace>,
}

/// Gradient buffers mirroring [`ModelState`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub extractor: Vec<(Tensor, Tensor)>,
    pub attention_w: Vec<f64>,
    pub attention_b: f64,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

impl ModelGrads {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            extractor: model
                .extractor
                .blocks
                .iter()
                .map(|b| (Tensor::zeros(b.kernels.shape()), Tensor::zeros(b.bias.shape())))
                .collect(),
            attention_w: vec![0.0; model.attention.w.len()],
            attention_b: 0.0,
            classifier_weight: Tensor::zeros(model.classifier_weight.shape()),
            classifier_bias: Tensor::zeros(model.classifier_bias.shape()),
        }
    }
}

impl ModelState {
    /// Fan-in-scaled uniform extractor and classifier weights, zero biases
    /// and a zero attention detector (uniform attention at the start).
    pub fn init(config: &TrainConfig, class_count: usize, input_side: usize, input_channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = Extractor::new(&config.extractor, input_side, input_channels, &mut rng)?;
        if extractor.feature_side() == 0 {
            return Err(Error::Config("extractor leaves no spatial cells".into()));
        }
        let c = extractor.feature_channels();
        let bound = (1.0 / c as f64).sqrt();
        let weight = Tensor::new(
            vec![class_count, c],
            (0..class_count * c).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?;
        Ok(Self {
            extractor,
            attention: AttentionParams::zeros(c),
            classifier_weight: weight,
            classifier_bias: Tensor::zeros(&[class_count]),
            class_count,
            step: 0,
            config: config.clone(),
        })
    }

    pub fn uses_attention(&self) -> bool {
        self.config.variant.attention()
    }

    /// Factor applied to the pooled representation before the classifier.
    ///
    /// Attention pooling carries an extra `1/d²` relative to plain average
    /// pooling; multiplying it back keeps both heads on the same scale, so
    /// uniform attention feeds the classifier exactly what average pooling
    /// would.
    pub fn feature_gain(&self) -> f64 {
        if self.uses_attention() {
            let d = self.extractor.feature_side();
            (d * d) as f64
        } else {
            1.0
        }
    }

    pub fn forward_group(&self, images: &[&Tensor]) -> Result<GroupForward> {
        let mut features = Vec::with_capacity(images.len());
        let mut caches = Vec::with_capacity(images.len());
        for img in images {
            let (f, c) = self.extractor.forward(img)?;
            features.push(f);
            caches.push(c);
        }
        let (pooled, trace) = if self.uses_attention() {
            let tr = attention_forward(&features, &self.attention, self.config.epsilon)?;
            (tr.pooled.clone(), Some(tr))
        } else {
            (average_pool_forward(&features)?, None)
        };
        Ok(GroupForward {
            features,
            caches,
            pooled,
            trace,
        })
    }

    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        let mut z = pooled.clone();
        z.scale(self.feature_gain());
        linear_forward(&z, &self.classifier_weight, &self.classifier_bias)
    }

    /// Backpropagates `grad_logits` (and optionally a gradient on the
    /// linear attention scores) from a group forward into `grads`.
    pub fn backward_group(
        &self,
        fwd: &GroupForward,
        grad_logits: Option<&[f64]>,
        grad_scores: Option<&Tensor>,
        grads: &mut ModelGrads,
    ) -> Result<()> {
        let k = fwd.features.len();
        let d = self.extractor.feature_side();
        let c = self.extractor.feature_channels();
        let gain = self.feature_gain();
        let mut grad_features: Vec<Tensor> = (0..k).map(|_| Tensor::zeros(&[d, d, c])).collect();

        if let Some(g) = grad_logits {
            let w = self.classifier_weight.data();
            let z: Vec<f64> = fwd.pooled.data().iter().map(|v| v * gain).collect();
            let gw = grads.classifier_weight.data_mut();
            let mut grad_h = vec![0.0; c];
            for (o, &go) in g.iter().enumerate() {
                grads.classifier_bias.data_mut()[o] += go;
                for i in 0..c {
                    gw[o * c + i] += go * z[i];
                    grad_h[i] += w[o * c + i] * go * gain;
                }
            }
            let grad_h = Tensor::vector(grad_h);
            match &fwd.trace {
                Some(tr) => {
                    let ag = attention_backward(tr, &fwd.features, &self.attention, &grad_h)?;
                    for (gf, gm) in grad_features.iter_mut().zip(&ag.maps) {
                        gf.add_assign(gm)?;
                    }
                    for (a, b) in grads.attention_w.iter_mut().zip(&ag.w) {
                        *a += b;
                    }
                    grads.attention_b += ag.b;
                }
                None => {
                    for (gf, gm) in grad_features.iter_mut().zip(average_pool_backward(k, d, &grad_h)?) {
                        gf.add_assign(&gm)?;
                    }
                }
            }
        }

        if let Some(gu) = grad_scores {
            let ag = crate::attention::linear_score_backward(&fwd.features, &self.attention, gu)?;
            for (gf, gm) in grad_features.iter_mut().zip(&ag.maps) {
                gf.add_assign(gm)?;
            }
            for (a, b) in grads.attention_w.iter_mut().zip(&ag.w) {
                *a += b;
            }
            grads.attention_b += ag.b;
        }

        if !self.extractor.blocks.is_empty() {
            for (cache, gf) in fwd.caches.iter().zip(&grad_features) {
                self.extractor.backward(cache, gf, &mut grads.extractor)?;
            }
        }
        Ok(())
    }

    /// Plain SGD step `θ -= lr * g`.
    pub fn apply(&mut self, grads: &ModelGrads, lr: f64) -> Result<()> {
        for (b, (gk, gb)) in self.extractor.blocks.iter_mut().zip(&grads.extractor) {
            b.kernels.axpy(-lr, gk)?;
            b.bias.axpy(-lr, gb)?;
        }
        for (w, g) in self.attention.w.iter_mut().zip(&grads.attention_w) {
            *w -= lr * g;
        }
        self.attention.b -= lr * grads.attention_b;
        self.classifier_weight.axpy(-lr, &grads.classifier_weight)?;
        self.classifier_bias.axpy(-lr, &grads.classifier_bias)?;
        self.step += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.extractor
            .blocks
            .iter()
            .all(|b| b.kernels.is_finite() && b.bias.is_finite())
            && self.attention.w.iter().all(|v| v.is_finite())
            && self.attention.b.is_finite()
            && self.classifier_weight.is_finite()
            && self.classifier_bias.is_finite()
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.extractor.blocks.iter().enumerate() {
            out.push((format!("extractor.{i}.kernels"), b.kernels.clone()));
            out.push((format!("extractor.{i}.bias"), b.bias.clone()));
        }
        out.push(("attention.w".into(), Tensor::vector(self.attention.w.clone())));
        out.push(("attention.b".into(), Tensor::scalar(self.attention.b)));
        out.push(("classifier.weight".into(), self.classifier_weight.clone()));
        out.push(("classifier.bias".into(), self.classifier_bias.clone()));
        out
    }
}
