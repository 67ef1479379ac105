//! Loss terms of the three training stages, each with its analytic gradient.
//!
//! The elementary losses (`mse_loss`, `bce_loss`, `kl_standard_normal`,
//! `info_nce`, `negative_elbo`) are pure functions of their inputs. The stage
//! losses drive a [`NetworkBundle`] forward, reduce the terms, and (when asked)
//! accumulate parameter gradients into the bundle.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{reparameterize, reparameterize_backward, GaussianLatent, NetworkBundle};
use crate::tensor::{dot, norm, softplus, sigmoid, Map, Scalar};

pub const BCE_EPS: f64 = 1e-7;

/// Closed-form `KL(N(mean, diag exp(log_var)) || N(0, I))`.
pub fn kl_standard_normal<T: Scalar>(g: &GaussianLatent<T>) -> T {
    kl_standard_normal_grad(g).0
}

/// KL value and its gradient with respect to (mean, log_var).
pub fn kl_standard_normal_grad<T: Scalar>(g: &GaussianLatent<T>) -> (T, Vec<T>, Vec<T>) {
    let half = T::from_f64_lossy(0.5);
    let mut kl = T::zero();
    let mut d_log_var = Vec::with_capacity(g.dim());
    for (&m, &lv) in g.mean.iter().zip(&g.log_var) {
        let var = lv.exp();
        kl += half * (m * m + var - T::one() - lv);
        d_log_var.push(half * (var - T::one()));
    }
    (kl, g.mean.clone(), d_log_var)
}

fn same_len<T>(a: &[T], b: &[T], context: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(context, a.len(), b.len()));
    }
    Ok(())
}

/// Mean over all elements of the squared difference.
pub fn mse_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    same_len(pred, target, "mse operands")?;
    if pred.is_empty() {
        return Err(Error::InvalidInput("mse of empty tensors".into()));
    }
    let n = T::from_usize(pred.len()).expect("length fits");
    Ok(pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n)
}

pub fn mse_loss_grad<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    let loss = mse_loss(pred, target)?;
    let scale = T::from_f64_lossy(2.0 / pred.len() as f64);
    Ok((loss, pred.iter().zip(target).map(|(&p, &t)| scale * (p - t)).collect()))
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let eps = T::from_f64_lossy(BCE_EPS);
    if p < eps {
        (eps, true)
    } else if p > T::one() - eps {
        (T::one() - eps, true)
    } else {
        (p, false)
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[eps, 1-eps]`.
pub fn bce_loss<T: Scalar>(p: T, label: bool) -> T {
    let (p, _) = clamp_prob(p);
    if label {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// BCE value and `dL/dp` (zero where the clamp is active).
pub fn bce_loss_grad<T: Scalar>(p: T, label: bool) -> (T, T) {
    let (pc, clamped) = clamp_prob(p);
    let loss = bce_loss(p, label);
    let grad = if clamped {
        T::zero()
    } else if label {
        -T::one() / pc
    } else {
        T::one() / (T::one() - pc)
    };
    (loss, grad)
}

/// Gradients of [`info_nce`] with respect to each of its vector arguments.
#[derive(Clone, Debug)]
pub struct InfoNceGrad<T> {
    pub loss: T,
    pub anchor: Vec<T>,
    pub positives: Vec<Vec<T>>,
    pub negatives: Vec<Vec<T>>,
}

struct Cosine<T> {
    value: T,
    // d cos / d a, d cos / d b
    da: Vec<T>,
    db: Vec<T>,
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<Cosine<T>> {
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::InvalidInput("cosine similarity of a zero-norm vector".into()));
    }
    let value = dot(a, b) / (na * nb);
    let da = a.iter().zip(b).map(|(&ai, &bi)| bi / (na * nb) - value * ai / (na * na)).collect();
    let db = a.iter().zip(b).map(|(&ai, &bi)| ai / (na * nb) - value * bi / (nb * nb)).collect();
    Ok(Cosine { value, da, db })
}

/// Cosine-similarity InfoNCE averaged over positives:
///
/// `-(1/|P|) Σ_p ln[ e^{sim(a,p)/τ} / (e^{sim(a,p)/τ} + Σ_n e^{sim(a,n)/τ}) ]`
pub fn info_nce<T: Scalar>(anchor: &[T], positives: &[Vec<T>], negatives: &[Vec<T>], temperature: T) -> Result<T> {
    info_nce_grad(anchor, positives, negatives, temperature).map(|g| g.loss)
}

pub fn info_nce_grad<T: Scalar>(
    anchor: &[T],
    positives: &[Vec<T>],
    negatives: &[Vec<T>],
    temperature: T,
) -> Result<InfoNceGrad<T>> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput("info_nce needs at least one positive and one negative".into()));
    }
    if !(temperature > T::zero()) {
        return Err(Error::InvalidInput("info_nce temperature must be positive".into()));
    }
    for v in positives.iter().chain(negatives) {
        same_len(anchor, v, "info_nce vectors")?;
    }
    let inv_t = T::one() / temperature;
    let pos: Vec<Cosine<T>> = positives.iter().map(|p| cosine(anchor, p)).collect::<Result<_>>()?;
    let neg: Vec<Cosine<T>> = negatives.iter().map(|n| cosine(anchor, n)).collect::<Result<_>>()?;

    // Shared negative log-sum, stabilised by the largest logit in play.
    let neg_logits: Vec<T> = neg.iter().map(|c| c.value * inv_t).collect();
    let count = T::from_usize(positives.len()).expect("count fits");
    let mut loss = T::zero();
    let mut d_anchor = vec![T::zero(); anchor.len()];
    let mut d_pos = Vec::with_capacity(pos.len());
    let mut d_neg = vec![vec![T::zero(); anchor.len()]; neg.len()];
    for c in &pos {
        let lp = c.value * inv_t;
        let m = neg_logits.iter().copied().fold(lp, T::max);
        let ep = (lp - m).exp();
        let en: Vec<T> = neg_logits.iter().map(|&l| (l - m).exp()).collect();
        let denom = ep + en.iter().copied().sum::<T>();
        loss += -(lp - m - denom.ln());
        // d/d lp = -(1 - ep/denom); d/d ln = en/denom
        let g_pos = -(T::one() - ep / denom) * inv_t / count;
        let mut dp = vec![T::zero(); anchor.len()];
        for i in 0..anchor.len() {
            d_anchor[i] += g_pos * c.da[i];
            dp[i] = g_pos * c.db[i];
        }
        d_pos.push(dp);
        for (j, cn) in neg.iter().enumerate() {
            let g = en[j] / denom * inv_t / count;
            for i in 0..anchor.len() {
                d_anchor[i] += g * cn.da[i];
                d_neg[j][i] += g * cn.db[i];
            }
        }
    }
    Ok(InfoNceGrad { loss: loss / count, anchor: d_anchor, positives: d_pos, negatives: d_neg })
}

/// Per-sample negative ELBO: mean-pixel MSE plus λ-weighted KL terms of the
/// salient and background posteriors.
pub fn negative_elbo<T: Scalar>(
    x: &Map<T>,
    recon: &Map<T>,
    g_s: &GaussianLatent<T>,
    g_z: &GaussianLatent<T>,
    lambda1: T,
    lambda2: T,
) -> Result<T> {
    if x.shape() != recon.shape() {
        return Err(Error::shape("negative_elbo images", format!("{:?}", x.shape()), format!("{:?}", recon.shape())));
    }
    Ok(mse_loss(&recon.data, &x.data)? + lambda1 * kl_standard_normal(g_s) + lambda2 * kl_standard_normal(g_z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlSign {
    Plus,
    Minus,
}

impl KlSign {
    pub fn factor(self) -> f64 {
        match self {
            KlSign::Plus => 1.0,
            KlSign::Minus => -1.0,
        }
    }
}

impl fmt::Display for KlSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlSign::Plus => "plus",
            KlSign::Minus => "minus",
        })
    }
}

impl std::str::FromStr for KlSign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plus" | "+" => Ok(KlSign::Plus),
            "minus" | "-" => Ok(KlSign::Minus),
            other => Err(Error::InvalidInput(format!("kl sign must be plus or minus, got {other:?}"))),
        }
    }
}

/// Weights and switches shared by the stage losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub kl_sign: KlSign,
    pub salient_map_branch: bool,
    pub background_branch: bool,
    pub classifier_branch: bool,
    pub distill_weight: f64,
    pub recon_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            temperature: 0.1,
            kl_sign: KlSign::Plus,
            salient_map_branch: true,
            background_branch: true,
            classifier_branch: true,
            distill_weight: 0.1,
            recon_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1LossBreakdown {
    pub elbo_c: f64,
    pub elbo_b: f64,
    pub salient_map_mse: f64,
    pub background_mse: f64,
    pub bce: f64,
    pub total: f64,
}

impl Stage1LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("elbo_c", self.elbo_c),
            ("elbo_b", self.elbo_b),
            ("salient_map_mse", self.salient_map_mse),
            ("background_mse", self.background_mse),
            ("bce", self.bce),
            ("total", self.total),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2LossBreakdown {
    pub info_nce: f64,
    pub kl_s: f64,
    pub kl_sign: KlSign,
    pub total: f64,
}

impl Stage2LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 3] {
        [("info_nce", self.info_nce), ("kl_s", self.kl_s), ("total", self.total)]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLossBreakdown {
    pub loss_d: f64,
    pub loss_g: f64,
    pub adversarial_g: f64,
    pub distill: f64,
    pub recon: f64,
}

impl GanLossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("loss_d", self.loss_d),
            ("loss_g", self.loss_g),
            ("adversarial_g", self.adversarial_g),
            ("distill", self.distill),
            ("recon", self.recon),
        ]
    }
}

/// What the stage-1 networks produced for one sample. Targets live alongside
/// in [`Stage1Targets`].
#[derive(Clone, Debug)]
pub struct Stage1Outputs<T> {
    pub g_s: GaussianLatent<T>,
    pub g_z: GaussianLatent<T>,
    pub recon: Map<T>,
    pub salient_map: Option<Map<T>>,
    pub background: Option<Map<T>>,
    pub probability: Option<T>,
}

#[derive(Clone, Debug)]
pub struct Stage1Targets<'a, T> {
    pub image: &'a Map<T>,
    /// Present for composites only.
    pub mask: Option<&'a Map<T>>,
    pub background: Option<&'a Map<T>>,
    pub has_cells: bool,
}

/// Gradients of the stage-1 objective with respect to one sample's outputs,
/// already scaled by that sample's share of each batch mean.
#[derive(Clone, Debug)]
pub struct Stage1OutputGrads<T> {
    pub g_s_mean: Vec<T>,
    pub g_s_log_var: Vec<T>,
    pub g_z_mean: Vec<T>,
    pub g_z_log_var: Vec<T>,
    pub recon: Vec<T>,
    pub salient_map: Option<Vec<T>>,
    pub background: Option<Vec<T>>,
    pub probability: Option<T>,
}

/// Group sizes used to turn per-sample terms into batch means.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Counts {
    pub composites: usize,
    pub backgrounds: usize,
}

fn add_scaled<T: Scalar>(acc: &mut [T], g: &[T], s: T) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += s * v;
    }
}

/// Adds one sample's contribution to `breakdown` and returns its output
/// gradients. Composite samples feed `elbo_c`, the salient-map and background
/// branches; background samples feed `elbo_b`. Both feed the classifier.
pub fn stage1_sample_terms<T: Scalar>(
    out: &Stage1Outputs<T>,
    tgt: &Stage1Targets<'_, T>,
    counts: Stage1Counts,
    w: &LossWeights,
    breakdown: &mut Stage1LossBreakdown,
) -> Result<Stage1OutputGrads<T>> {
    let composite = tgt.mask.is_some();
    let group = if composite { counts.composites } else { counts.backgrounds };
    let all = counts.composites + counts.backgrounds;
    if group == 0 {
        return Err(Error::InvalidInput("stage-1 group count is zero".into()));
    }
    let share = 1.0 / group as f64;
    let share_t = T::from_f64_lossy(share);
    let l1 = T::from_f64_lossy(w.lambda1);
    let l2 = T::from_f64_lossy(w.lambda2);

    let elbo = negative_elbo(tgt.image, &out.recon, &out.g_s, &out.g_z, l1, l2)?;
    if composite {
        breakdown.elbo_c += elbo.as_f64() * share;
    } else {
        breakdown.elbo_b += elbo.as_f64() * share;
    }
    let (_, d_recon) = mse_loss_grad(&out.recon.data, &tgt.image.data)?;
    let (_, ks_m, ks_v) = kl_standard_normal_grad(&out.g_s);
    let (_, kz_m, kz_v) = kl_standard_normal_grad(&out.g_z);
    let mut grads = Stage1OutputGrads {
        g_s_mean: ks_m.iter().map(|&v| v * l1 * share_t).collect(),
        g_s_log_var: ks_v.iter().map(|&v| v * l1 * share_t).collect(),
        g_z_mean: kz_m.iter().map(|&v| v * l2 * share_t).collect(),
        g_z_log_var: kz_v.iter().map(|&v| v * l2 * share_t).collect(),
        recon: d_recon.iter().map(|&v| v * share_t).collect(),
        salient_map: None,
        background: None,
        probability: None,
    };

    if composite {
        if w.salient_map_branch {
            let (pred, mask) = match (&out.salient_map, tgt.mask) {
                (Some(p), Some(m)) => (p, m),
                _ => return Err(Error::InvalidInput("salient-map branch output or mask missing".into())),
            };
            let (l, g) = mse_loss_grad(&pred.data, &mask.data)?;
            breakdown.salient_map_mse += l.as_f64() * share;
            grads.salient_map = Some(g.iter().map(|&v| v * share_t).collect());
        }
        if w.background_branch {
            let (pred, bg) = match (&out.background, tgt.background) {
                (Some(p), Some(b)) => (p, b),
                _ => return Err(Error::InvalidInput("composite sample has no paired background".into())),
            };
            let (l, g) = mse_loss_grad(&pred.data, &bg.data)?;
            breakdown.background_mse += l.as_f64() * share;
            grads.background = Some(g.iter().map(|&v| v * share_t).collect());
        }
    }
    if w.classifier_branch {
        let p = out.probability.ok_or_else(|| Error::InvalidInput("classifier output missing".into()))?;
        let (l, g) = bce_loss_grad(p, tgt.has_cells);
        let s = 1.0 / all as f64;
        breakdown.bce += l.as_f64() * s;
        grads.probability = Some(g * T::from_f64_lossy(s));
    }
    Ok(grads)
}

impl Stage1LossBreakdown {
    pub fn finish(mut self) -> Self {
        self.total = self.elbo_c + self.elbo_b + self.salient_map_mse + self.background_mse + self.bce;
        self
    }
}

/// One composite of a synthetic pair with its salient mask and the clean
/// background it was pasted onto.
#[derive(Clone, Debug)]
pub struct CompositeSample<T> {
    pub composite: Map<T>,
    pub mask: Map<T>,
    pub background: Map<T>,
}

/// Noise seed for the reparameterised draw of sample `index`, latent `which`.
pub fn noise_seed(base: u64, index: usize, which: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(which.wrapping_mul(0x94D0_49BB_1331_11EB))
}

/// Full stage-1 objective over a batch of composites and background patches.
///
/// When `backprop` is set, gradients of `total` are accumulated into every
/// network of the bundle that took part (GAN heads excluded).
pub fn stage1_loss<T: Scalar>(
    batch_c: &[CompositeSample<T>],
    batch_b: &[Map<T>],
    nets: &mut NetworkBundle<T>,
    w: &LossWeights,
    seed: u64,
    backprop: bool,
) -> Result<Stage1LossBreakdown> {
    if batch_c.is_empty() && batch_b.is_empty() {
        return Err(Error::InvalidInput("empty stage-1 batch".into()));
    }
    for (i, c) in batch_c.iter().enumerate() {
        let (ch, h, wd) = c.composite.shape();
        if c.background.shape() != (ch, h, wd) || c.mask.shape() != (1, h, wd) {
            return Err(Error::InvalidInput(format!("composite {i} is not paired with a matching mask and background")));
        }
    }
    let counts = Stage1Counts { composites: batch_c.len(), backgrounds: batch_b.len() };
    let mut breakdown = Stage1LossBreakdown::default();
    let latent_s = nets.config.latent_s;

    let samples = batch_c
        .iter()
        .map(|c| (&c.composite, Some(c)))
        .chain(batch_b.iter().map(|b| (b, None)));
    for (index, (image, pair)) in samples.enumerate() {
        let composite = pair.is_some();
        let (g_s, cache_s) = nets.salient_encoder.forward(image)?;
        let (g_z, cache_z) = nets.background_encoder.forward(image)?;
        let (z, eps_z) = reparameterize(&g_z, noise_seed(seed, index, 1));
        // Background patches decode with the salient code switched off.
        let (s, eps_s) = if composite {
            reparameterize(&g_s, noise_seed(seed, index, 0))
        } else {
            (vec![T::zero(); latent_s], vec![T::zero(); latent_s])
        };
        let mut code = s.clone();
        code.extend_from_slice(&z);
        let (recon, cache_img) = nets.image_decoder.forward(&code)?;
        let map = match (composite && w.salient_map_branch, pair) {
            (true, Some(_)) => Some(nets.salient_map_decoder.forward(&g_s.mean)?),
            _ => None,
        };
        let bg = match (composite && w.background_branch, pair) {
            (true, Some(_)) => Some(nets.background_decoder.forward(&g_z.mean)?),
            _ => None,
        };
        let cls = if w.classifier_branch { Some(nets.classifier.forward(&g_s.mean)?) } else { None };

        let outputs = Stage1Outputs {
            g_s: g_s.clone(),
            g_z: g_z.clone(),
            recon,
            salient_map: map.as_ref().map(|(m, _)| m.clone()),
            background: bg.as_ref().map(|(b, _)| b.clone()),
            probability: cls.as_ref().map(|(p, _)| *p),
        };
        let targets = Stage1Targets {
            image,
            mask: pair.map(|p| &p.mask),
            background: pair.map(|p| &p.background),
            has_cells: composite,
        };
        let grads = stage1_sample_terms(&outputs, &targets, counts, w, &mut breakdown)?;
        if !backprop {
            continue;
        }

        let mut d_s_mean = grads.g_s_mean.clone();
        let mut d_s_log_var = grads.g_s_log_var.clone();
        let mut d_z_mean = grads.g_z_mean.clone();
        let mut d_z_log_var = grads.g_z_log_var.clone();

        let (ch, h, wd) = outputs.recon.shape();
        let d_code = nets.image_decoder.backward(&cache_img, &Map::from_vec(ch, h, wd, grads.recon));
        let (d_s, d_z) = d_code.split_at(latent_s);
        if composite {
            let (dm, dv) = reparameterize_backward(&g_s, &eps_s, d_s);
            add_scaled(&mut d_s_mean, &dm, T::one());
            add_scaled(&mut d_s_log_var, &dv, T::one());
        }
        let (dm, dv) = reparameterize_backward(&g_z, &eps_z, d_z);
        add_scaled(&mut d_z_mean, &dm, T::one());
        add_scaled(&mut d_z_log_var, &dv, T::one());

        if let (Some((m, cache)), Some(g)) = (&map, grads.salient_map) {
            let d = nets.salient_map_decoder.backward(cache, &Map::from_vec(m.channels, m.height, m.width, g));
            add_scaled(&mut d_s_mean, &d, T::one());
        }
        if let (Some((b, cache)), Some(g)) = (&bg, grads.background) {
            let d = nets.background_decoder.backward(cache, &Map::from_vec(b.channels, b.height, b.width, g));
            add_scaled(&mut d_z_mean, &d, T::one());
        }
        if let (Some((_, cache)), Some(g)) = (&cls, grads.probability) {
            let d = nets.classifier.backward(cache, g);
            add_scaled(&mut d_s_mean, &d, T::one());
        }
        nets.salient_encoder.backward(&cache_s, &d_s_mean, &d_s_log_var, false);
        nets.background_encoder.backward(&cache_z, &d_z_mean, &d_z_log_var, false);
    }
    Ok(breakdown.finish())
}

/// Density objective on salient means: InfoNCE with the first HIGH sample as
/// anchor, remaining HIGH samples as positives and LOW samples as negatives,
/// plus (or minus) the batch-mean salient KL. Only the salient encoder
/// receives gradients.
pub fn stage2_loss<T: Scalar>(
    batch_high: &[Map<T>],
    batch_low: &[Map<T>],
    nets: &mut NetworkBundle<T>,
    w: &LossWeights,
    backprop: bool,
) -> Result<Stage2LossBreakdown> {
    if batch_high.len() < 2 || batch_low.is_empty() {
        return Err(Error::InvalidInput(format!(
            "stage-2 batch needs >= 2 HIGH and >= 1 LOW samples, got {} and {}",
            batch_high.len(),
            batch_low.len()
        )));
    }
    let mut latents = Vec::with_capacity(batch_high.len() + batch_low.len());
    let mut caches = Vec::with_capacity(latents.capacity());
    for x in batch_high.iter().chain(batch_low) {
        let (g, c) = nets.salient_encoder.forward(x)?;
        latents.push(g);
        caches.push(c);
    }
    let nh = batch_high.len();
    let anchor = &latents[0].mean;
    let positives: Vec<Vec<T>> = latents[1..nh].iter().map(|g| g.mean.clone()).collect();
    let negatives: Vec<Vec<T>> = latents[nh..].iter().map(|g| g.mean.clone()).collect();
    let nce = info_nce_grad(anchor, &positives, &negatives, T::from_f64_lossy(w.temperature))?;

    let n = latents.len();
    let sign = T::from_f64_lossy(w.kl_sign.factor());
    let inv_n = T::from_f64_lossy(1.0 / n as f64);
    let mut kl_sum = 0.0;
    let mut d_means: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut d_log_vars: Vec<Vec<T>> = Vec::with_capacity(n);
    for g in &latents {
        let (kl, dm, dv) = kl_standard_normal_grad(g);
        kl_sum += kl.as_f64();
        d_means.push(dm.iter().map(|&v| v * sign * inv_n).collect());
        d_log_vars.push(dv.iter().map(|&v| v * sign * inv_n).collect());
    }
    let kl_s = kl_sum / n as f64;
    let info = nce.loss.as_f64();
    let breakdown = Stage2LossBreakdown { info_nce: info, kl_s, kl_sign: w.kl_sign, total: info + w.kl_sign.factor() * kl_s };
    if backprop {
        add_scaled(&mut d_means[0], &nce.anchor, T::one());
        for (i, g) in nce.positives.iter().enumerate() {
            add_scaled(&mut d_means[1 + i], g, T::one());
        }
        for (j, g) in nce.negatives.iter().enumerate() {
            add_scaled(&mut d_means[nh + j], g, T::one());
        }
        for ((cache, dm), dv) in caches.iter().zip(&d_means).zip(&d_log_vars) {
            nets.salient_encoder.backward(cache, dm, dv, false);
        }
    }
    Ok(breakdown)
}

/// Which half of the adversarial game receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanUpdate {
    /// Accumulate nothing.
    None,
    Discriminator,
    Generator,
}

/// One GAN training example: the real image, its frozen disentangled code
/// (`s ⊕ z`), and the frozen VAE decoder's rendering of that code.
#[derive(Clone, Debug)]
pub struct GanSample<T> {
    pub real: Map<T>,
    pub code: Vec<T>,
    pub vae_recon: Map<T>,
}

/// Non-saturating GAN losses. `loss_g` adds the distillation term tying the
/// generator to the VAE decoder and a reconstruction term towards the real
/// image, each weighted by [`LossWeights`].
pub fn gan_losses<T: Scalar>(
    batch: &[GanSample<T>],
    nets: &mut NetworkBundle<T>,
    w: &LossWeights,
    update: GanUpdate,
) -> Result<GanLossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty GAN batch".into()));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let inv_t = T::from_f64_lossy(inv_n);
    let mut out = GanLossBreakdown::default();
    let dw = T::from_f64_lossy(w.distill_weight);
    let rw = T::from_f64_lossy(w.recon_weight);
    for sample in batch {
        if sample.real.shape() != sample.vae_recon.shape() {
            return Err(Error::shape(
                "gan sample",
                format!("{:?}", sample.real.shape()),
                format!("{:?}", sample.vae_recon.shape()),
            ));
        }
        let (fake, g_cache) = nets.gan_generator.forward(&sample.code)?;
        if fake.shape() != sample.real.shape() {
            return Err(Error::shape("generator output", format!("{:?}", sample.real.shape()), format!("{:?}", fake.shape())));
        }
        let (real_logit, real_cache) = nets.gan_discriminator.forward(&sample.real)?;
        let (fake_logit, fake_cache) = nets.gan_discriminator.forward(&fake)?;
        // -ln σ(D(x)) - ln(1 - σ(D(G(c))))
        let ld = softplus(-real_logit) + softplus(fake_logit);
        let adv = softplus(-fake_logit);
        let (distill, d_distill) = mse_loss_grad(&fake.data, &sample.vae_recon.data)?;
        let (recon, d_recon) = mse_loss_grad(&fake.data, &sample.real.data)?;
        out.loss_d += ld.as_f64() * inv_n;
        out.adversarial_g += adv.as_f64() * inv_n;
        out.distill += distill.as_f64() * inv_n;
        out.recon += recon.as_f64() * inv_n;
        out.loss_g += (adv + dw * distill + rw * recon).as_f64() * inv_n;

        match update {
            GanUpdate::None => {}
            GanUpdate::Discriminator => {
                // d softplus(-l)/dl = -σ(-l); d softplus(l)/dl = σ(l)
                nets.gan_discriminator.backward(&real_cache, -sigmoid(-real_logit) * inv_t, false);
                nets.gan_discriminator.backward(&fake_cache, sigmoid(fake_logit) * inv_t, false);
            }
            GanUpdate::Generator => {
                let mut d_fake = nets
                    .gan_discriminator
                    .backward(&fake_cache, -sigmoid(-fake_logit) * inv_t, true)
                    .expect("input gradient requested");
                for ((d, &a), &b) in d_fake.data.iter_mut().zip(&d_distill).zip(&d_recon) {
                    *d += (dw * a + rw * b) * inv_t;
                }
                nets.gan_generator.backward(&g_cache, &d_fake);
            }
        }
    }
    if update == GanUpdate::Generator {
        // the generator step must not leak into the discriminator
        use crate::nn::Module;
        nets.gan_discriminator.zero_grad();
    }
    Ok(out)
}
