//! Encoder, decoder, classifier and GAN function families.
//!
//! All components are deterministic functions of (input, parameters). The only
//! source of randomness is [`reparameterize`], which takes an explicit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, leaky_relu_backward, leaky_relu_inplace, Conv2d, ConvCache, Linear, Module, Param, ResDown, ResDownCache,
    ResUp, ResUpCache,
};
use crate::tensor::{sigmoid, Map, Scalar, Window};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Architecture hyperparameters shared by every component of a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_s: usize,
    pub latent_z: usize,
    /// Output width of each down-sampling block; depth = `len()`.
    pub encoder_widths: Vec<usize>,
    /// Base width followed by the output width of each up-sampling block;
    /// `len()` = encoder depth + 1.
    pub decoder_widths: Vec<usize>,
    pub classifier_hidden: usize,
    pub discriminator_widths: Vec<usize>,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            channels: 3,
            latent_s: 128,
            latent_z: 128,
            encoder_widths: vec![8, 16, 32, 32],
            decoder_widths: vec![32, 32, 16, 8, 4],
            classifier_hidden: 64,
            discriminator_widths: vec![8, 16, 32, 32],
            init_seed: 0,
        }
    }
}

impl NetConfig {
    /// Tiny variant for gradient checks: 8×8 inputs, two blocks.
    pub fn miniature() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            latent_s: 4,
            latent_z: 3,
            encoder_widths: vec![3, 4],
            decoder_widths: vec![4, 3, 2],
            classifier_hidden: 5,
            discriminator_widths: vec![2, 3],
            init_seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.encoder_widths.len();
        let bad = |m: &str| Err(Error::InvalidInput(format!("network config: {m}")));
        if depth == 0 || self.image_size == 0 || self.channels == 0 {
            return bad("image size, channels and encoder depth must be positive");
        }
        if self.image_size % (1 << depth) != 0 {
            return bad("image size must be divisible by 2^depth");
        }
        if self.decoder_widths.len() != depth + 1 {
            return bad("decoder widths must have encoder depth + 1 entries");
        }
        if self.discriminator_widths.is_empty() || self.image_size % (1 << self.discriminator_widths.len()) != 0 {
            return bad("discriminator depth incompatible with image size");
        }
        let all = [self.latent_s, self.latent_z, self.classifier_hidden];
        if all.contains(&0)
            || self.encoder_widths.contains(&0)
            || self.decoder_widths.contains(&0)
            || self.discriminator_widths.contains(&0)
        {
            return bad("all widths must be positive");
        }
        Ok(())
    }

    pub fn code_dim(&self) -> usize {
        self.latent_s + self.latent_z
    }
}

/// Diagonal Gaussian `N(mean, exp(log_var))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent<T> {
    pub mean: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Scalar> GaussianLatent<T> {
    pub fn new(mean: Vec<T>, log_var: Vec<T>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::shape("gaussian latent", mean.len(), log_var.len()));
        }
        if log_var.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("log-variance must be finite".into()));
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], log_var: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Draws `mean + exp(log_var / 2) ⊙ ε` with `ε ~ N(0, I)` from `noise_seed`.
///
/// Returns the sample and the noise used, so callers can backpropagate.
pub fn reparameterize<T: Scalar>(g: &GaussianLatent<T>, noise_seed: u64) -> (Vec<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let half = T::from_f64_lossy(0.5);
    let mut sample = Vec::with_capacity(g.dim());
    let mut noise = Vec::with_capacity(g.dim());
    for (&m, &lv) in g.mean.iter().zip(&g.log_var) {
        let e: f64 = StandardNormal.sample(&mut rng);
        let e = T::from_f64_lossy(e);
        sample.push(m + (lv * half).exp() * e);
        noise.push(e);
    }
    (sample, noise)
}

/// Gradient of [`reparameterize`] with respect to (mean, log_var).
pub fn reparameterize_backward<T: Scalar>(
    g: &GaussianLatent<T>,
    noise: &[T],
    d_sample: &[T],
) -> (Vec<T>, Vec<T>) {
    let half = T::from_f64_lossy(0.5);
    let d_mean = d_sample.to_vec();
    let d_log_var = g
        .log_var
        .iter()
        .zip(noise)
        .zip(d_sample)
        .map(|((&lv, &e), &d)| d * half * (lv * half).exp() * e)
        .collect();
    (d_mean, d_log_var)
}

/// Salient code `s` followed by background code `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub s: Vec<T>,
    pub z: Vec<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn concat(&self) -> Vec<T> {
        let mut v = self.s.clone();
        v.extend_from_slice(&self.z);
        v
    }
}

fn check_image<T: Scalar>(x: &Map<T>, channels: usize, size: usize, context: &'static str) -> Result<()> {
    if x.shape() != (channels, size, size) {
        return Err(Error::shape(
            context,
            format!("{channels}x{size}x{size}"),
            format!("{}x{}x{}", x.channels, x.height, x.width),
        ));
    }
    Ok(())
}

fn flatten_dim(widths: &[usize], image_size: usize) -> usize {
    let base = image_size >> widths.len();
    widths.last().copied().unwrap_or(0) * base * base
}

/// Probabilistic encoder: residual down-sampling stack, then linear heads for
/// mean and clamped log-variance.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub channels: usize,
    pub image_size: usize,
    pub blocks: Vec<ResDown<T>>,
    pub mean_head: Linear<T>,
    pub log_var_head: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    blocks: Vec<ResDownCache<T>>,
    feature_shape: (usize, usize, usize),
    features: Vec<T>,
    raw_log_var: Vec<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: rand::Rng>(channels: usize, image_size: usize, widths: &[usize], latent: usize, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut cin = channels;
        for &w in widths {
            blocks.push(ResDown::new(cin, w, rng));
            cin = w;
        }
        let feat = flatten_dim(widths, image_size);
        Self {
            channels,
            image_size,
            blocks,
            mean_head: Linear::new(feat, latent, 1.0, rng),
            log_var_head: Linear::new(feat, latent, 0.1, rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_head.outputs
    }

    pub fn forward(&self, x: &Map<T>) -> Result<(GaussianLatent<T>, EncoderCache<T>)> {
        check_image(x, self.channels, self.image_size, "encoder input")?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let (y, c) = block.forward(&h);
            caches.push(c);
            h = y;
        }
        let feature_shape = h.shape();
        let features = h.data;
        let mean = self.mean_head.forward(&features);
        let raw_log_var = self.log_var_head.forward(&features);
        let lo = T::from_f64_lossy(LOG_VAR_MIN);
        let hi = T::from_f64_lossy(LOG_VAR_MAX);
        let log_var = raw_log_var.iter().map(|&v| v.max(lo).min(hi)).collect();
        Ok((GaussianLatent { mean, log_var }, EncoderCache { blocks: caches, feature_shape, features, raw_log_var }))
    }

    pub fn encode(&self, x: &Map<T>) -> Result<GaussianLatent<T>> {
        self.forward(x).map(|(g, _)| g)
    }

    pub fn backward(
        &mut self,
        cache: &EncoderCache<T>,
        d_mean: &[T],
        d_log_var: &[T],
        need_input_grad: bool,
    ) -> Option<Map<T>> {
        let lo = T::from_f64_lossy(LOG_VAR_MIN);
        let hi = T::from_f64_lossy(LOG_VAR_MAX);
        let d_raw: Vec<T> = d_log_var
            .iter()
            .zip(&cache.raw_log_var)
            .map(|(&d, &r)| if r > lo && r < hi { d } else { T::zero() })
            .collect();
        let mut d_feat = self.mean_head.backward(&cache.features, d_mean);
        let d2 = self.log_var_head.backward(&cache.features, &d_raw);
        for (a, b) in d_feat.iter_mut().zip(&d2) {
            *a += *b;
        }
        let (c, h, w) = cache.feature_shape;
        let mut d = Map::from_vec(c, h, w, d_feat);
        let last = self.blocks.len() - 1;
        for (i, (block, bc)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            let need = i > 0 || need_input_grad;
            match block.backward(bc, &d, need) {
                Some(next) => d = next,
                None => {
                    debug_assert!(i == 0 && i <= last);
                    return None;
                }
            }
        }
        Some(d)
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.mean_head.visit(&join(prefix, "mean_head"), f);
        self.log_var_head.visit(&join(prefix, "log_var_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.mean_head.visit_mut(&join(prefix, "mean_head"), f);
        self.log_var_head.visit_mut(&join(prefix, "log_var_head"), f);
    }
}

/// Decoder: linear projection to a small feature map, residual transposed
/// up-sampling stack, 1×1 output convolution and sigmoid.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub code_dim: usize,
    pub out_channels: usize,
    pub base_size: usize,
    pub base_channels: usize,
    pub input: Linear<T>,
    pub blocks: Vec<ResUp<T>>,
    pub head: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    code: Vec<T>,
    base: Vec<T>,
    blocks: Vec<ResUpCache<T>>,
    head: ConvCache<T>,
    output: Map<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: rand::Rng>(code_dim: usize, out_channels: usize, image_size: usize, widths: &[usize], rng: &mut R) -> Self {
        let depth = widths.len() - 1;
        let base_size = image_size >> depth;
        let base_channels = widths[0];
        let input = Linear::new(code_dim, base_channels * base_size * base_size, 2f64.sqrt(), rng);
        let blocks = widths.windows(2).map(|w| ResUp::new(w[0], w[1], rng)).collect();
        let head = Conv2d::new(widths[depth], out_channels, Window::new(1, 1, 0), 1.0, rng);
        Self { code_dim, out_channels, base_size, base_channels, input, blocks, head }
    }

    pub fn forward(&self, code: &[T]) -> Result<(Map<T>, DecoderCache<T>)> {
        if code.len() != self.code_dim {
            return Err(Error::shape("decoder code", self.code_dim, code.len()));
        }
        let mut base = self.input.forward(code);
        leaky_relu_inplace(&mut base);
        let mut h = Map::from_vec(self.base_channels, self.base_size, self.base_size, base.clone());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&h);
            caches.push(c);
            h = y;
        }
        let (mut out, head) = self.head.forward(&h);
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok((out.clone(), DecoderCache { code: code.to_vec(), base, blocks: caches, head, output: out }))
    }

    pub fn decode(&self, code: &[T]) -> Result<Map<T>> {
        self.forward(code).map(|(y, _)| y)
    }

    pub fn backward(&mut self, cache: &DecoderCache<T>, d_out: &Map<T>) -> Vec<T> {
        let mut d = d_out.clone();
        for (g, &y) in d.data.iter_mut().zip(&cache.output.data) {
            *g *= y * (T::one() - y);
        }
        let mut d = self.head.backward(&cache.head, &d, true).expect("head grad");
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = block.backward(bc, &d);
        }
        let mut d_base = d.data;
        leaky_relu_backward(&cache.base, &mut d_base);
        self.input.backward(&cache.code, &d_base)
    }
}

impl<T: Scalar> Decoder<T> {
    /// Returns `D'` with `D'(u) = self(shift + scale ⊙ u)`.
    pub fn with_input_affine(&self, shift: &[T], scale: &[T]) -> Self {
        let mut out = self.clone();
        let (n_out, n_in) = (self.input.outputs, self.input.inputs);
        for o in 0..n_out {
            let row = &self.input.weight.value[o * n_in..(o + 1) * n_in];
            let mut b = self.input.bias.value[o];
            for i in 0..n_in {
                b += row[i] * shift[i];
                out.input.weight.value[o * n_in + i] = row[i] * scale[i];
            }
            out.input.bias.value[o] = b;
        }
        out
    }

    /// Inverse of [`Decoder::with_input_affine`]: `D'(x) = self((x - shift) / scale)`.
    pub fn without_input_affine(&self, shift: &[T], scale: &[T]) -> Self {
        let mut out = self.clone();
        let (n_out, n_in) = (self.input.outputs, self.input.inputs);
        for o in 0..n_out {
            let row = &self.input.weight.value[o * n_in..(o + 1) * n_in];
            let mut b = self.input.bias.value[o];
            for i in 0..n_in {
                let w = row[i] / scale[i];
                b -= w * shift[i];
                out.input.weight.value[o * n_in + i] = w;
            }
            out.input.bias.value[o] = b;
        }
        out
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Two-layer perceptron head producing `P(cells | mu_s)`.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct ClassifierCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
    pub probability: T,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: rand::Rng>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        Self { hidden: Linear::new(inputs, hidden, 2f64.sqrt(), rng), out: Linear::new(hidden, 1, 1.0, rng) }
    }

    pub fn forward(&self, mu_s: &[T]) -> Result<(T, ClassifierCache<T>)> {
        if mu_s.len() != self.hidden.inputs {
            return Err(Error::shape("classifier input", self.hidden.inputs, mu_s.len()));
        }
        let mut h = self.hidden.forward(mu_s);
        leaky_relu_inplace(&mut h);
        let p = sigmoid(self.out.forward(&h)[0]);
        Ok((p, ClassifierCache { input: mu_s.to_vec(), hidden: h, probability: p }))
    }

    pub fn probability(&self, mu_s: &[T]) -> Result<T> {
        self.forward(mu_s).map(|(p, _)| p)
    }

    /// Backward from `dL/dp`.
    pub fn backward(&mut self, cache: &ClassifierCache<T>, d_prob: T) -> Vec<T> {
        let p = cache.probability;
        let d_logit = d_prob * p * (T::one() - p);
        let mut dh = self.out.backward(&cache.hidden, &[d_logit]);
        leaky_relu_backward(&cache.hidden, &mut dh);
        self.hidden.backward(&cache.input, &dh)
    }
}

impl<T: Scalar> Module<T> for Classifier<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// GAN discriminator: residual down-sampling stack and a linear logit.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub channels: usize,
    pub image_size: usize,
    pub blocks: Vec<ResDown<T>>,
    pub head: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorCache<T> {
    blocks: Vec<ResDownCache<T>>,
    feature_shape: (usize, usize, usize),
    features: Vec<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: rand::Rng>(channels: usize, image_size: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut cin = channels;
        for &w in widths {
            blocks.push(ResDown::new(cin, w, rng));
            cin = w;
        }
        let head = Linear::new(flatten_dim(widths, image_size), 1, 1.0, rng);
        Self { channels, image_size, blocks, head }
    }

    pub fn forward(&self, x: &Map<T>) -> Result<(T, DiscriminatorCache<T>)> {
        check_image(x, self.channels, self.image_size, "discriminator input")?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let (y, c) = block.forward(&h);
            caches.push(c);
            h = y;
        }
        let logit = self.head.forward(&h.data)[0];
        Ok((logit, DiscriminatorCache { blocks: caches, feature_shape: h.shape(), features: h.data }))
    }

    pub fn logit(&self, x: &Map<T>) -> Result<T> {
        self.forward(x).map(|(l, _)| l)
    }

    pub fn backward(&mut self, cache: &DiscriminatorCache<T>, d_logit: T, need_input_grad: bool) -> Option<Map<T>> {
        let d_feat = self.head.backward(&cache.features, &[d_logit]);
        let (c, h, w) = cache.feature_shape;
        let mut d = Map::from_vec(c, h, w, d_feat);
        for (i, (block, bc)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            match block.backward(bc, &d, i > 0 || need_input_grad) {
                Some(next) => d = next,
                None => return None,
            }
        }
        Some(d)
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Component names, in checkpoint order.
pub const COMPONENTS: [&str; 8] = [
    "salient_encoder",
    "background_encoder",
    "image_decoder",
    "salient_map_decoder",
    "background_decoder",
    "classifier",
    "gan_generator",
    "gan_discriminator",
];

/// Every network of the framework, plus a version counter bumped on each
/// optimizer step.
#[derive(Clone, Debug)]
pub struct NetworkBundle<T> {
    pub config: NetConfig,
    pub salient_encoder: Encoder<T>,
    pub background_encoder: Encoder<T>,
    pub image_decoder: Decoder<T>,
    pub salient_map_decoder: Decoder<T>,
    pub background_decoder: Decoder<T>,
    pub classifier: Classifier<T>,
    pub gan_generator: Decoder<T>,
    pub gan_discriminator: Discriminator<T>,
    pub parameter_version: u64,
}

impl<T: Scalar> NetworkBundle<T> {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c = &config;
        let salient_encoder = Encoder::new(c.channels, c.image_size, &c.encoder_widths, c.latent_s, &mut rng);
        let background_encoder = Encoder::new(c.channels, c.image_size, &c.encoder_widths, c.latent_z, &mut rng);
        let image_decoder = Decoder::new(c.code_dim(), c.channels, c.image_size, &c.decoder_widths, &mut rng);
        let salient_map_decoder = Decoder::new(c.latent_s, 1, c.image_size, &c.decoder_widths, &mut rng);
        let background_decoder = Decoder::new(c.latent_z, c.channels, c.image_size, &c.decoder_widths, &mut rng);
        let classifier = Classifier::new(c.latent_s, c.classifier_hidden, &mut rng);
        let gan_generator = Decoder::new(c.code_dim(), c.channels, c.image_size, &c.decoder_widths, &mut rng);
        let gan_discriminator = Discriminator::new(c.channels, c.image_size, &c.discriminator_widths, &mut rng);
        Ok(Self {
            config,
            salient_encoder,
            background_encoder,
            image_decoder,
            salient_map_decoder,
            background_decoder,
            classifier,
            gan_generator,
            gan_discriminator,
            parameter_version: 0,
        })
    }

    pub fn component(&self, name: &str) -> Option<&dyn Module<T>> {
        Some(match name {
            "salient_encoder" => &self.salient_encoder,
            "background_encoder" => &self.background_encoder,
            "image_decoder" => &self.image_decoder,
            "salient_map_decoder" => &self.salient_map_decoder,
            "background_decoder" => &self.background_decoder,
            "classifier" => &self.classifier,
            "gan_generator" => &self.gan_generator,
            "gan_discriminator" => &self.gan_discriminator,
            _ => return None,
        })
    }

    pub fn component_mut(&mut self, name: &str) -> Option<&mut dyn Module<T>> {
        Some(match name {
            "salient_encoder" => &mut self.salient_encoder,
            "background_encoder" => &mut self.background_encoder,
            "image_decoder" => &mut self.image_decoder,
            "salient_map_decoder" => &mut self.salient_map_decoder,
            "background_decoder" => &mut self.background_decoder,
            "classifier" => &mut self.classifier,
            "gan_generator" => &mut self.gan_generator,
            "gan_discriminator" => &mut self.gan_discriminator,
            _ => return None,
        })
    }

    pub fn encode_salient(&self, x: &Map<T>) -> Result<GaussianLatent<T>> {
        self.salient_encoder.encode(x)
    }

    pub fn encode_background(&self, x: &Map<T>) -> Result<GaussianLatent<T>> {
        self.background_encoder.encode(x)
    }

    pub fn decode_image(&self, code: &LatentCode<T>) -> Result<Map<T>> {
        self.check_code(code)?;
        self.image_decoder.decode(&code.concat())
    }

    pub fn decode_salient_map(&self, mu_s: &[T]) -> Result<Map<T>> {
        self.salient_map_decoder.decode(mu_s)
    }

    pub fn decode_background(&self, mu_z: &[T]) -> Result<Map<T>> {
        self.background_decoder.decode(mu_z)
    }

    pub fn classify_cells(&self, mu_s: &[T]) -> Result<T> {
        self.classifier.probability(mu_s)
    }

    pub fn gan_generate(&self, code: &LatentCode<T>) -> Result<Map<T>> {
        self.check_code(code)?;
        self.gan_generator.decode(&code.concat())
    }

    pub fn gan_discriminate(&self, x: &Map<T>) -> Result<T> {
        self.gan_discriminator.logit(x)
    }

    /// Mean codes of both encoders for `x`.
    pub fn mean_code(&self, x: &Map<T>) -> Result<LatentCode<T>> {
        Ok(LatentCode { s: self.encode_salient(x)?.mean, z: self.encode_background(x)?.mean })
    }

    fn check_code(&self, code: &LatentCode<T>) -> Result<()> {
        if code.s.len() != self.config.latent_s || code.z.len() != self.config.latent_z {
            return Err(Error::shape(
                "latent code",
                format!("s={} z={}", self.config.latent_s, self.config.latent_z),
                format!("s={} z={}", code.s.len(), code.z.len()),
            ));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for name in COMPONENTS {
            self.component_mut(name).expect("known component").zero_grad();
        }
    }

    /// Flattened parameters of one component in visiting order.
    pub fn flat_params(&self, name: &str) -> Vec<T> {
        let mut out = Vec::new();
        if let Some(m) = self.component(name) {
            m.visit("", &mut |_, p| out.extend_from_slice(&p.value));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> NetworkBundle<U> {
        let mut out = NetworkBundle::<U>::new(self.config.clone()).expect("config already validated");
        for name in COMPONENTS {
            let src = self.flat_params(name);
            let mut i = 0;
            out.component_mut(name).expect("known").visit_mut("", &mut |_, p| {
                for v in p.value.iter_mut() {
                    *v = U::from_f64_lossy(src[i].as_f64());
                    i += 1;
                }
            });
        }
        out.parameter_version = self.parameter_version;
        out
    }
}

/// Converts an RGB or grayscale map in `[0,1]` from `u8` pixels.
pub fn image_to_map<T: Scalar>(pixels: &[u8], channels: usize, size: usize) -> Map<T> {
    let plane = size * size;
    let mut data = vec![T::zero(); channels * plane];
    let scale = T::from_f64_lossy(1.0 / 255.0);
    for i in 0..plane {
        for c in 0..channels {
            data[c * plane + i] = T::from_f64_lossy(pixels[i * channels + c] as f64) * scale;
        }
    }
    Map::from_vec(channels, size, size, data)
}

/// Inverse of [`image_to_map`], rounding to nearest.
pub fn map_to_image<T: Scalar>(map: &Map<T>) -> Vec<u8> {
    let plane = map.plane();
    let mut out = vec![0u8; plane * map.channels];
    for i in 0..plane {
        for c in 0..map.channels {
            let v = map.data[c * plane + i].as_f64().clamp(0.0, 1.0);
            out[i * map.channels + c] = (v * 255.0).round() as u8;
        }
    }
    out
}
