//! The three training stages and the λ sweep.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{sub_seed, AnnotatedPatch, Density, Group, Split, Splits, SyntheticPair, ToyDataset};
use crate::error::{Error, Result};
use crate::eval::features::FeatureNet;
use crate::eval::metrics::{fid, silhouette};
use crate::eval::{fid_features, salient_means};
use crate::networks::NetworkBundle;
use crate::nn::Adam;
use crate::objectives::{gan_losses, stage1_loss, stage2_loss, CompositeSample, GanSample, GanUpdate, Stage1LossBreakdown};
use crate::tensor::Map;

/// The λ values tried by [`sweep_lambda`] unless told otherwise.
pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];

/// Discriminator loss under this threshold counts towards a collapse warning.
pub const COLLAPSE_LOSS: f64 = 1e-4;
pub const COLLAPSE_STEPS: usize = 100;

const TAG_STAGE1: u64 = 1;
const TAG_STAGE2: u64 = 2;
const TAG_STAGE3: u64 = 3;
const TAG_VAL_NOISE: u64 = 99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
    Stage3,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Init => "init",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Stage::Init),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "stage3" => Ok(Stage::Stage3),
            other => Err(Error::InvalidInput(format!("unknown stage {other:?}"))),
        }
    }
}

/// A network bundle together with the last stage that trained it.
#[derive(Clone, Debug)]
pub struct Model {
    pub nets: NetworkBundle<f32>,
    pub stage: Stage,
}

impl Model {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { nets: NetworkBundle::new(cfg.net_config())?, stage: Stage::Init })
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        checkpoint::save(path, &self.nets, &self.stage.to_string(), &cfg.echo())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (nets, header) = checkpoint::load(path)?;
        let stage = header.stage.parse().map_err(|e| Error::format(path, e))?;
        Ok(Self { nets, stage })
    }

    fn require(&self, allowed: &[Stage], what: &str) -> Result<()> {
        if allowed.contains(&self.stage) {
            return Ok(());
        }
        let need: Vec<String> = allowed.iter().map(Stage::to_string).collect();
        Err(Error::Prerequisite(format!("{what} needs a {} checkpoint, got {}", need.join(" or "), self.stage)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: Stage,
    pub term: String,
    pub value: f64,
}

/// In-memory metrics trail, serialised as `step,stage,term,value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,stage,term,value";

    pub fn push(&mut self, step: usize, stage: Stage, term: &str, value: f64) {
        self.records.push(MetricRecord { step, stage, term: term.to_string(), value });
    }

    pub fn lines(&self) -> String {
        self.records.iter().map(|r| format!("{},{},{},{}\n", r.step, r.stage, r.term, r.value)).collect()
    }

    pub fn to_text(&self) -> String {
        format!("{}\n{}", Self::HEADER, self.lines())
    }

    /// Appends the records to `path`, writing the header first if the file is new.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let text = if fresh { self.to_text() } else { self.lines() };
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut log = Self::default();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line == Self::HEADER {
                continue;
            }
            let bad = || Error::InvalidInput(format!("metrics line {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            log.push(
                f[0].parse().map_err(|_| bad())?,
                f[1].parse()?,
                f[2],
                f[3].parse().map_err(|_| bad())?,
            );
        }
        Ok(log)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: Stage,
    /// Epoch whose weights were kept; 0 means the starting weights.
    pub best_epoch: usize,
    /// Selection metric of the kept weights.
    pub best_metric: f64,
    /// Validation terms before the first update.
    pub initial: Vec<(String, f64)>,
    /// Terms of the last epoch run.
    pub final_terms: Vec<(String, f64)>,
    pub trail: Vec<EpochRecord>,
    pub wall_seconds: f64,
    pub warnings: Vec<String>,
}

/// Labeled patches and synthetic pairs, split.
#[derive(Clone, Debug)]
pub struct CascadeData {
    pub patches: Vec<AnnotatedPatch>,
    pub splits: Splits<Vec<usize>>,
    pub pairs: Splits<Vec<SyntheticPair>>,
}

impl From<ToyDataset> for CascadeData {
    fn from(ds: ToyDataset) -> Self {
        Self { patches: ds.patches, splits: ds.splits, pairs: ds.pairs }
    }
}

fn capped(n: usize, cap: usize) -> usize {
    if cap == 0 {
        n
    } else {
        n.min(cap)
    }
}

impl CascadeData {
    pub fn patches_in(&self, split: Split) -> impl Iterator<Item = &AnnotatedPatch> {
        self.splits.get(split).iter().map(move |&i| &self.patches[i])
    }

    /// Patches of one group in split order, at most `cap` (0 = all).
    pub fn group_patches(&self, split: Split, group: Group, cap: usize) -> Vec<&AnnotatedPatch> {
        let all: Vec<_> = self.patches_in(split).filter(|p| p.patch.group() == Some(group)).collect();
        let n = capped(all.len(), cap);
        all.into_iter().take(n).collect()
    }

    pub fn density_patches(&self, split: Split, density: Density, cap: usize) -> Vec<&AnnotatedPatch> {
        let all: Vec<_> = self.patches_in(split).filter(|p| p.patch.density() == Some(density)).collect();
        let n = capped(all.len(), cap);
        all.into_iter().take(n).collect()
    }

    /// CELLS and BACKGROUND patches, `cap` split evenly between the groups.
    pub fn balanced_patches(&self, split: Split, cap: usize) -> Vec<&AnnotatedPatch> {
        let half = if cap == 0 { 0 } else { (cap / 2).max(1) };
        let mut out = self.group_patches(split, Group::Cells, half);
        out.extend(self.group_patches(split, Group::Background, half));
        out
    }
}

pub fn maps_of(patches: &[&AnnotatedPatch]) -> Vec<Map<f32>> {
    patches.iter().map(|p| p.patch.to_map()).collect()
}

fn composite_samples(pairs: &[SyntheticPair], cap: usize) -> Vec<CompositeSample<f32>> {
    pairs
        .iter()
        .take(capped(pairs.len(), cap))
        .map(|p| CompositeSample {
            composite: p.composite.to_map(),
            mask: p.salient_mask.to_map(),
            background: p.background.to_map(),
        })
        .collect()
}

fn diverged(step: usize, term: &str, value: f64) -> Error {
    Error::Diverged { step, term: term.to_string(), value }
}

/// Batch sizes of the two stage-1 halves.
fn halves(batch: usize) -> (usize, usize) {
    let c = (batch / 2).max(1);
    (c, batch.saturating_sub(c).max(1))
}

/// Mean stage-1 breakdown over a fixed evaluation set and fixed noise.
pub fn stage1_eval(
    nets: &mut NetworkBundle<f32>,
    cfg: &TrainConfig,
    pairs: &[CompositeSample<f32>],
    backgrounds: &[Map<f32>],
) -> Result<Stage1LossBreakdown> {
    let w = cfg.loss_weights();
    let (hc, hb) = halves(cfg.batch_size);
    let chunks = pairs.len().div_ceil(hc).max(backgrounds.len().div_ceil(hb)).max(1);
    let mut acc = Stage1LossBreakdown::default();
    let mut weight = 0.0;
    for k in 0..chunks {
        let c = pairs.get(k * hc..((k + 1) * hc).min(pairs.len())).unwrap_or(&[]);
        let b = backgrounds.get(k * hb..((k + 1) * hb).min(backgrounds.len())).unwrap_or(&[]);
        if c.is_empty() || b.is_empty() {
            continue;
        }
        let br = stage1_loss(c, b, nets, &w, sub_seed(cfg.seed, TAG_VAL_NOISE, k as u64), false)?;
        let share = (c.len() + b.len()) as f64;
        acc.elbo_c += br.elbo_c * share;
        acc.elbo_b += br.elbo_b * share;
        acc.salient_map_mse += br.salient_map_mse * share;
        acc.background_mse += br.background_mse * share;
        acc.bce += br.bce * share;
        weight += share;
    }
    if weight == 0.0 {
        return Err(Error::InvalidInput("stage-1 evaluation needs composites and backgrounds".into()));
    }
    acc.elbo_c /= weight;
    acc.elbo_b /= weight;
    acc.salient_map_mse /= weight;
    acc.background_mse /= weight;
    acc.bce /= weight;
    Ok(acc.finish())
}

fn named(terms: &[(&'static str, f64)], prefix: &str) -> Vec<(String, f64)> {
    terms.iter().map(|(k, v)| (format!("{prefix}{k}"), *v)).collect()
}

fn record(log: &mut MetricsLog, stage: Stage, epoch: usize, terms: &[(String, f64)]) {
    for (k, v) in terms {
        log.push(epoch, stage, k, *v);
    }
}

/// Stage 1: every network except the GAN heads on synthetic pairs and
/// background patches. Keeps the weights with the lowest validation total.
///
/// On divergence `model` is left at the best weights seen so far and the
/// error is returned.
pub fn train_stage1(cfg: &TrainConfig, data: &CascadeData, model: &mut Model, log: &mut MetricsLog) -> Result<StageResult> {
    cfg.validate()?;
    let started = Instant::now();
    let w = cfg.loss_weights();
    let (hc, hb) = halves(cfg.batch_size);
    let half_cap = if cfg.max_train_samples == 0 { 0 } else { (cfg.max_train_samples / 2).max(1) };
    let half_val = if cfg.max_val_samples == 0 { 0 } else { (cfg.max_val_samples / 2).max(1) };
    let train_c = composite_samples(&data.pairs.train, half_cap);
    let train_b = maps_of(&data.group_patches(Split::Train, Group::Background, half_cap));
    let val_c = composite_samples(&data.pairs.val, half_val);
    let val_b = maps_of(&data.group_patches(Split::Val, Group::Background, half_val));
    if train_c.is_empty() || train_b.is_empty() {
        return Err(Error::InvalidInput("stage 1 needs training pairs and background patches".into()));
    }

    let nets = &mut model.nets;
    let initial = stage1_eval(nets, cfg, &val_c, &val_b)?;
    let mut best = (initial.total, 0usize, nets.clone());
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, TAG_STAGE1, 0));
    let mut order_c: Vec<usize> = (0..train_c.len()).collect();
    let mut order_b: Vec<usize> = (0..train_b.len()).collect();
    let steps = train_c.len().div_ceil(hc);
    let mut trail = Vec::new();
    let mut global = 0usize;

    for epoch in 1..=cfg.epochs_stage1 {
        order_c.shuffle(&mut rng);
        order_b.shuffle(&mut rng);
        let mut sum = Stage1LossBreakdown::default();
        for k in 0..steps {
            let bc: Vec<CompositeSample<f32>> =
                order_c.iter().cycle().skip(k * hc).take(hc).map(|&i| train_c[i].clone()).collect();
            let bb: Vec<Map<f32>> = order_b.iter().cycle().skip(k * hb).take(hb).map(|&i| train_b[i].clone()).collect();
            global += 1;
            let br = stage1_loss(&bc, &bb, nets, &w, sub_seed(cfg.seed, TAG_STAGE1, global as u64), true)?;
            if !br.total.is_finite() {
                *nets = best.2;
                return Err(diverged(global, "total", br.total));
            }
            opt.step(&mut [
                &mut nets.salient_encoder,
                &mut nets.background_encoder,
                &mut nets.image_decoder,
                &mut nets.salient_map_decoder,
                &mut nets.background_decoder,
                &mut nets.classifier,
            ]);
            nets.parameter_version += 1;
            let f = 1.0 / steps as f64;
            sum.elbo_c += br.elbo_c * f;
            sum.elbo_b += br.elbo_b * f;
            sum.salient_map_mse += br.salient_map_mse * f;
            sum.background_mse += br.background_mse * f;
            sum.bce += br.bce * f;
        }
        let train = sum.finish();
        let val = stage1_eval(nets, cfg, &val_c, &val_b)?;
        if !val.total.is_finite() {
            *nets = best.2;
            return Err(diverged(global, "val_total", val.total));
        }
        let mut terms = named(&train.terms(), "");
        terms.extend(named(&val.terms(), "val_"));
        record(log, Stage::Stage1, epoch, &terms);
        log::info!("stage1 epoch {epoch}: total {:.5} val_total {:.5}", train.total, val.total);
        trail.push(EpochRecord { epoch, terms });
        if val.total < best.0 {
            best = (val.total, epoch, nets.clone());
        }
    }
    let (best_metric, best_epoch, kept) = best;
    *nets = kept;
    model.stage = Stage::Stage1;
    Ok(StageResult {
        stage: Stage::Stage1,
        best_epoch,
        best_metric,
        initial: named(&initial.terms(), "val_"),
        final_terms: trail.last().map(|r| r.terms.clone()).unwrap_or_default(),
        trail,
        wall_seconds: started.elapsed().as_secs_f64(),
        warnings: Vec::new(),
    })
}

/// Silhouette of salient means between HIGH (0) and LOW (1) images.
pub fn density_silhouette(nets: &NetworkBundle<f32>, high: &[Map<f32>], low: &[Map<f32>]) -> Result<f64> {
    let mut pts = salient_means(nets, high)?;
    pts.extend(salient_means(nets, low)?);
    let labels: Vec<usize> = (0..high.len()).map(|_| 0).chain((0..low.len()).map(|_| 1)).collect();
    silhouette(&pts, &labels)
}

/// Stage 2: fine-tunes the salient encoder alone on HIGH vs LOW patches and
/// keeps the weights with the best validation HIGH/LOW silhouette. The stage-1
/// validation loss is re-evaluated before and after to expose drift.
pub fn train_stage2(cfg: &TrainConfig, data: &CascadeData, model: &mut Model, log: &mut MetricsLog) -> Result<StageResult> {
    cfg.validate()?;
    model.require(&[Stage::Stage1], "stage 2")?;
    let started = Instant::now();
    let w = cfg.loss_weights();
    let half_cap = if cfg.max_train_samples == 0 { 0 } else { (cfg.max_train_samples / 2).max(1) };
    let half_val = if cfg.max_val_samples == 0 { 0 } else { (cfg.max_val_samples / 2).max(1) };
    let high = maps_of(&data.density_patches(Split::Train, Density::High, half_cap));
    let low = maps_of(&data.density_patches(Split::Train, Density::Low, half_cap));
    let val_high = maps_of(&data.density_patches(Split::Val, Density::High, half_val));
    let val_low = maps_of(&data.density_patches(Split::Val, Density::Low, half_val));
    if high.len() < 2 || low.is_empty() || val_high.len() < 2 || val_low.len() < 2 {
        return Err(Error::InvalidInput("stage 2 needs HIGH and LOW patches in both train and val".into()));
    }
    let drift_c = composite_samples(&data.pairs.val, half_val);
    let drift_b = maps_of(&data.group_patches(Split::Val, Group::Background, half_val));

    let nets = &mut model.nets;
    let before = stage1_eval(nets, cfg, &drift_c, &drift_b)?.total;
    let initial_ss = density_silhouette(nets, &val_high, &val_low)?;
    let mut best = (initial_ss, 0usize, nets.clone());
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, TAG_STAGE2, 0));
    let mut order_h: Vec<usize> = (0..high.len()).collect();
    let mut order_l: Vec<usize> = (0..low.len()).collect();
    let nh = cfg.stage2_high.min(high.len());
    let nl = cfg.stage2_low.min(low.len());
    let steps = high.len().div_ceil(nh);
    let mut trail = Vec::new();
    let mut global = 0usize;

    for epoch in 1..=cfg.epochs_stage2 {
        order_h.shuffle(&mut rng);
        order_l.shuffle(&mut rng);
        let (mut nce, mut kl, mut total) = (0.0, 0.0, 0.0);
        for k in 0..steps {
            let bh: Vec<Map<f32>> = order_h.iter().cycle().skip(k * nh).take(nh).map(|&i| high[i].clone()).collect();
            let bl: Vec<Map<f32>> = order_l.iter().cycle().skip(k * nl).take(nl).map(|&i| low[i].clone()).collect();
            global += 1;
            let br = stage2_loss(&bh, &bl, nets, &w, true)?;
            if !br.total.is_finite() {
                *nets = best.2;
                return Err(diverged(global, "total", br.total));
            }
            opt.step(&mut [&mut nets.salient_encoder]);
            nets.parameter_version += 1;
            nce += br.info_nce / steps as f64;
            kl += br.kl_s / steps as f64;
            total += br.total / steps as f64;
        }
        let ss = density_silhouette(nets, &val_high, &val_low)?;
        let terms = vec![
            ("info_nce".to_string(), nce),
            ("kl_s".to_string(), kl),
            ("total".to_string(), total),
            ("val_ss_density".to_string(), ss),
        ];
        record(log, Stage::Stage2, epoch, &terms);
        log::info!("stage2 epoch {epoch}: total {total:.5} val_ss_density {ss:.4}");
        trail.push(EpochRecord { epoch, terms });
        if ss > best.0 {
            best = (ss, epoch, nets.clone());
        }
    }
    let (best_metric, best_epoch, kept) = best;
    *nets = kept;
    let after = stage1_eval(nets, cfg, &drift_c, &drift_b)?.total;
    let last = cfg.epochs_stage2;
    log.push(last, Stage::Stage2, "stage1_val_total_before", before);
    log.push(last, Stage::Stage2, "stage1_val_total_after", after);
    let mut warnings = Vec::new();
    if after > before * 1.5 {
        warnings.push(format!("stage-1 validation loss drifted from {before:.5} to {after:.5}"));
    }
    model.stage = Stage::Stage2;
    Ok(StageResult {
        stage: Stage::Stage2,
        best_epoch,
        best_metric,
        initial: vec![("val_ss_density".to_string(), initial_ss), ("stage1_val_total".to_string(), before)],
        final_terms: trail.last().map(|r| r.terms.clone()).unwrap_or_default(),
        trail,
        wall_seconds: started.elapsed().as_secs_f64(),
        warnings,
    })
}

fn gan_samples(nets: &NetworkBundle<f32>, images: Vec<Map<f32>>) -> Result<Vec<GanSample<f32>>> {
    images
        .into_iter()
        .map(|real| {
            let code = nets.mean_code(&real)?;
            let vae_recon = nets.decode_image(&code)?;
            Ok(GanSample { real, code: code.concat(), vae_recon })
        })
        .collect()
}

/// Per-dimension mean and standard deviation of the training codes. Constant
/// dimensions keep unit scale.
fn code_stats(samples: &[GanSample<f32>]) -> (Vec<f32>, Vec<f32>) {
    let dim = samples[0].code.len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(&s.code) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; dim];
    for s in samples {
        for ((q, &v), m) in var.iter_mut().zip(&s.code).zip(&mean) {
            *q += (v as f64 - m).powi(2) / n;
        }
    }
    let scale = var.iter().map(|&q| if q.sqrt() > 1e-6 { q.sqrt() as f32 } else { 1.0 }).collect();
    (mean.iter().map(|&m| m as f32).collect(), scale)
}

fn standardize_codes(samples: &mut [GanSample<f32>], shift: &[f32], scale: &[f32]) {
    for s in samples {
        for ((v, m), k) in s.code.iter_mut().zip(shift).zip(scale) {
            *v = (*v - m) / k;
        }
    }
}

fn generator_fid(nets: &NetworkBundle<f32>, val: &[GanSample<f32>], real_features: &[Vec<f64>]) -> Result<f64> {
    let fakes = val.iter().map(|s| nets.gan_generator.decode(&s.code)).collect::<Result<Vec<_>>>()?;
    fid(real_features, &fid_features(&fakes)?)
}

/// Stage 3: generator and discriminator on frozen mean codes. Keeps the
/// trained generator with the lowest validation FID; the initial generator is
/// returned only when no epoch runs.
pub fn train_stage3(cfg: &TrainConfig, data: &CascadeData, model: &mut Model, log: &mut MetricsLog) -> Result<StageResult> {
    cfg.validate()?;
    if cfg.density_stage {
        model.require(&[Stage::Stage2], "stage 3")?;
    } else {
        model.require(&[Stage::Stage1, Stage::Stage2], "stage 3")?;
    }
    let started = Instant::now();
    let w = cfg.loss_weights();
    let nets = &mut model.nets;
    if cfg.gan_init_from_decoder {
        nets.gan_generator = nets.image_decoder.clone();
    }
    let mut train = gan_samples(nets, maps_of(&data.balanced_patches(Split::Train, cfg.max_train_samples)))?;
    let mut val = gan_samples(nets, maps_of(&data.balanced_patches(Split::Val, cfg.max_val_samples)))?;
    if train.is_empty() || val.len() < 2 {
        return Err(Error::InvalidInput("stage 3 needs training and validation images".into()));
    }
    // The generator trains on standardized codes and is folded back at the end.
    let (shift, scale) = code_stats(&train);
    standardize_codes(&mut train, &shift, &scale);
    standardize_codes(&mut val, &shift, &scale);
    nets.gan_generator = nets.gan_generator.with_input_affine(&shift, &scale);
    FeatureNet::standard();
    let real_val: Vec<Map<f32>> = val.iter().map(|s| s.real.clone()).collect();
    let real_features = fid_features(&real_val)?;

    let initial = generator_fid(nets, &val, &real_features)?;
    let mut best = (initial, 0usize, nets.gan_generator.clone());
    let mut opt_d = Adam::new(cfg.learning_rate);
    let mut opt_g = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, TAG_STAGE3, 0));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch_size.min(train.len());
    let steps = train.len().div_ceil(batch);
    let mut trail = Vec::new();
    let mut warnings = Vec::new();
    let mut quiet_d = 0usize;
    let mut global = 0usize;

    for epoch in 1..=cfg.epochs_stage3 {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        for k in 0..steps {
            let b: Vec<GanSample<f32>> = order.iter().cycle().skip(k * batch).take(batch).map(|&i| train[i].clone()).collect();
            global += 1;
            let d = gan_losses(&b, nets, &w, GanUpdate::Discriminator)?;
            if !d.loss_d.is_finite() {
                nets.gan_generator = best.2.without_input_affine(&shift, &scale);
                return Err(diverged(global, "loss_d", d.loss_d));
            }
            opt_d.step(&mut [&mut nets.gan_discriminator]);
            let g = gan_losses(&b, nets, &w, GanUpdate::Generator)?;
            if !g.loss_g.is_finite() {
                nets.gan_generator = best.2.without_input_affine(&shift, &scale);
                return Err(diverged(global, "loss_g", g.loss_g));
            }
            opt_g.step(&mut [&mut nets.gan_generator]);
            nets.parameter_version += 1;
            quiet_d = if d.loss_d < COLLAPSE_LOSS { quiet_d + 1 } else { 0 };
            if quiet_d == COLLAPSE_STEPS {
                let msg = format!("possible mode collapse: discriminator loss below {COLLAPSE_LOSS} for {COLLAPSE_STEPS} steps (step {global})");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            let t = [d.loss_d, g.loss_g, g.adversarial_g, g.distill, g.recon];
            for (s, v) in sums.iter_mut().zip(t) {
                *s += v / steps as f64;
            }
        }
        let score = generator_fid(nets, &val, &real_features)?;
        if !score.is_finite() {
            nets.gan_generator = best.2.without_input_affine(&shift, &scale);
            return Err(diverged(global, "val_fid", score));
        }
        let mut terms: Vec<(String, f64)> =
            ["loss_d", "loss_g", "adversarial_g", "distill", "recon"].iter().zip(sums).map(|(k, v)| (k.to_string(), v)).collect();
        terms.push(("val_fid".to_string(), score));
        record(log, Stage::Stage3, epoch, &terms);
        log::info!("stage3 epoch {epoch}: loss_d {:.4} loss_g {:.4} val_fid {score:.4}", sums[0], sums[1]);
        trail.push(EpochRecord { epoch, terms });
        if epoch == 1 || score < best.0 {
            best = (score, epoch, nets.gan_generator.clone());
        }
    }
    let (best_metric, best_epoch, kept) = best;
    nets.gan_generator = kept.without_input_affine(&shift, &scale);
    model.stage = Stage::Stage3;
    Ok(StageResult {
        stage: Stage::Stage3,
        best_epoch,
        best_metric,
        initial: vec![("val_fid".to_string(), initial)],
        final_terms: trail.last().map(|r| r.terms.clone()).unwrap_or_default(),
        trail,
        wall_seconds: started.elapsed().as_secs_f64(),
        warnings,
    })
}

/// Silhouette of salient means between CELLS (0) and BACKGROUND (1) images.
pub fn cells_silhouette(nets: &NetworkBundle<f32>, cells: &[Map<f32>], background: &[Map<f32>]) -> Result<f64> {
    let mut pts = salient_means(nets, cells)?;
    pts.extend(salient_means(nets, background)?);
    let labels: Vec<usize> = (0..cells.len()).map(|_| 0).chain((0..background.len()).map(|_| 1)).collect();
    silhouette(&pts, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub val_ss_salient: f64,
    pub val_total: f64,
}

/// Index of the row with the highest validation salient silhouette. Ties go
/// to the earlier row; rows with a NaN score are skipped.
pub fn select_lambda(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.val_ss_salient.is_nan() {
            continue;
        }
        if best.is_none_or(|b| r.val_ss_salient > rows[b].val_ss_salient) {
            best = Some(i);
        }
    }
    best
}

/// Stage 1 once per λ (λ₁ = λ₂ = λ), each from a fresh initialisation.
pub fn sweep_lambda(cfg: &TrainConfig, data: &CascadeData, grid: &[f64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("λ grid is empty".into()));
    }
    let half_val = if cfg.max_val_samples == 0 { 0 } else { (cfg.max_val_samples / 2).max(1) };
    let cells = maps_of(&data.group_patches(Split::Val, Group::Cells, half_val));
    let bg = maps_of(&data.group_patches(Split::Val, Group::Background, half_val));
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let run = TrainConfig { lambda1: lambda, lambda2: lambda, ..cfg.clone() };
        let mut model = Model::init(&run)?;
        let mut log = MetricsLog::default();
        let result = train_stage1(&run, data, &mut model, &mut log)?;
        let ss = cells_silhouette(&model.nets, &cells, &bg)?;
        log::info!("sweep λ={lambda}: val SS_S {ss:.4}");
        rows.push(SweepRow { lambda, val_ss_salient: ss, val_total: result.best_metric });
    }
    Ok(rows)
}
