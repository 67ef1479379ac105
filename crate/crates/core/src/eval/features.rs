//! Feature extractor for toy-scale FID.
//!
//! A small residual CNN trained on the three-way toy task (tissue, TIL-only,
//! other-only). Its 64-d penultimate activations are the FID features.
//! Training is seeded, so the same seed always yields the same network.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_downstream_set, DownstreamClass};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu_backward, leaky_relu_inplace, Adam, Linear, Module, Param, ResDown, ResDownCache};
use crate::tensor::Map;

pub const FEATURE_DIM: usize = 64;
/// Seed of the shared feature network.
pub const FEATURE_SEED: u64 = 0x5EED_F1D;
/// Label shown next to FID values computed with these features.
pub const FID_LABEL: &str = "FID (toy-features)";

const WIDTHS: [usize; 3] = [8, 16, 16];
const PER_CLASS: usize = 60;
const EPOCHS: usize = 12;
const BATCH: usize = 12;

#[derive(Clone, Debug)]
pub struct FeatureNet {
    image_size: usize,
    blocks: Vec<ResDown<f32>>,
    fc: Linear<f32>,
    head: Linear<f32>,
}

struct Cache {
    blocks: Vec<ResDownCache<f32>>,
    last_shape: (usize, usize, usize),
    flat: Vec<f32>,
    feat: Vec<f32>,
}

/// 2×2 average pooling.
fn pool(x: &Map<f32>) -> Map<f32> {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Map::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let s = x.at(ch, 2 * y, 2 * xx) + x.at(ch, 2 * y + 1, 2 * xx) + x.at(ch, 2 * y, 2 * xx + 1) + x.at(ch, 2 * y + 1, 2 * xx + 1);
                out.data[(ch * oh + y) * ow + xx] = 0.25 * s;
            }
        }
    }
    out
}

impl FeatureNet {
    fn new(image_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut cin = 3;
        for &w in &WIDTHS {
            blocks.push(ResDown::new(cin, w, &mut rng));
            cin = w;
        }
        let side = image_size / 2 / (1 << WIDTHS.len());
        let flat = cin * side * side;
        Self {
            image_size,
            blocks,
            fc: Linear::new(flat, FEATURE_DIM, 2f64.sqrt(), &mut rng),
            head: Linear::new(FEATURE_DIM, DownstreamClass::ALL.len(), 1.0, &mut rng),
        }
    }

    fn forward(&self, x: &Map<f32>) -> Result<(Vec<f32>, Cache)> {
        let n = self.image_size;
        if x.shape() != (3, n, n) {
            return Err(Error::shape("feature net input", format!("(3, {n}, {n})"), format!("{:?}", x.shape())));
        }
        let mut h = pool(x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (o, c) = b.forward(&h);
            caches.push(c);
            h = o;
        }
        let last_shape = h.shape();
        let flat = h.data;
        let mut feat = self.fc.forward(&flat);
        leaky_relu_inplace(&mut feat);
        let logits = self.head.forward(&feat);
        Ok((logits, Cache { blocks: caches, last_shape, flat, feat }))
    }

    fn backward(&mut self, cache: &Cache, d_logits: &[f32]) {
        let mut d_feat = self.head.backward(&cache.feat, d_logits);
        leaky_relu_backward(&cache.feat, &mut d_feat);
        let d_flat = self.fc.backward(&cache.flat, &d_feat);
        let (c, h, w) = cache.last_shape;
        let mut d = Map::from_vec(c, h, w, d_flat);
        for i in (0..self.blocks.len()).rev() {
            match self.blocks[i].backward(&cache.blocks[i], &d, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Trains a feature network from scratch on freshly generated toy data.
    pub fn train(seed: u64) -> Result<Self> {
        let data = generate_downstream_set(PER_CLASS, seed)?;
        let maps: Vec<(Map<f32>, usize)> = data.iter().map(|(p, c)| (p.to_map(), c.index())).collect();
        let size = maps[0].0.height;
        let mut net = Self::new(size, seed);
        let mut opt = Adam::new(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let mut order: Vec<usize> = (0..maps.len()).collect();
        for _ in 0..EPOCHS {
            order.shuffle(&mut rng);
            for chunk in order.chunks(BATCH) {
                let scale = 1.0 / chunk.len() as f32;
                for &i in chunk {
                    let (x, y) = &maps[i];
                    let (logits, cache) = net.forward(x)?;
                    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let z: f32 = logits.iter().map(|l| (l - m).exp()).sum();
                    let d: Vec<f32> = logits
                        .iter()
                        .enumerate()
                        .map(|(k, l)| ((l - m).exp() / z - if k == *y { 1.0 } else { 0.0 }) * scale)
                        .collect();
                    net.backward(&cache, &d);
                }
                opt.step(&mut [&mut net]);
            }
        }
        Ok(net)
    }

    /// The shared network trained with [`FEATURE_SEED`].
    pub fn standard() -> &'static FeatureNet {
        static NET: OnceLock<FeatureNet> = OnceLock::new();
        NET.get_or_init(|| FeatureNet::train(FEATURE_SEED).expect("toy feature training cannot fail"))
    }

    pub fn embed(&self, x: &Map<f32>) -> Result<Vec<f64>> {
        let (_, cache) = self.forward(x)?;
        Ok(cache.feat.iter().map(|&v| v as f64).collect())
    }

    pub fn classify(&self, x: &Map<f32>) -> Result<usize> {
        let (logits, _) = self.forward(x)?;
        Ok((0..logits.len()).fold(0, |b, k| if logits[k] > logits[b] { k } else { b }))
    }
}

impl Module<f32> for FeatureNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}block{i}"), f);
        }
        self.fc.visit(&format!("{prefix}fc"), f);
        self.head.visit(&format!("{prefix}head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}block{i}"), f);
        }
        self.fc.visit_mut(&format!("{prefix}fc"), f);
        self.head.visit_mut(&format!("{prefix}head"), f);
    }
}

/// Features of every image, in order.
pub fn embed_for_fid(net: &FeatureNet, images: &[Map<f32>]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|x| net.embed(x)).collect()
}
