//! Metrics on latent means, FID, qualitative probes and the report file.

pub mod features;
pub mod metrics;
pub mod probes;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sub_seed, Density, Group, Split};
use crate::error::{Error, Result};
use crate::networks::NetworkBundle;
use crate::tensor::Map;
use crate::training::{maps_of, CascadeData, Model, Stage};

use features::{embed_for_fid, FeatureNet, FID_LABEL};
use metrics::{fid, linear_probe_folds, silhouette, SoftmaxProbe, PROBE_L2};
use probes::{decode, interpolate, latent_swap, swap_montage, DecodePath, Space};

pub const FOLDS: usize = 5;

pub fn salient_means(nets: &NetworkBundle<f32>, images: &[Map<f32>]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|x| Ok(nets.encode_salient(x)?.mean.iter().map(|&v| v as f64).collect())).collect()
}

pub fn background_means(nets: &NetworkBundle<f32>, images: &[Map<f32>]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|x| Ok(nets.encode_background(x)?.mean.iter().map(|&v| v as f64).collect())).collect()
}

/// FID features from the shared toy feature network.
pub fn fid_features(images: &[Map<f32>]) -> Result<Vec<Vec<f64>>> {
    embed_for_fid(FeatureNet::standard(), images)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeScore {
    pub mean: f64,
    pub std: f64,
    pub folds: Vec<f64>,
}

impl ProbeScore {
    fn from_folds(folds: Vec<f64>) -> Self {
        let n = folds.len() as f64;
        let mean = folds.iter().sum::<f64>() / n;
        let std = (folds.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        Self { mean, std, folds }
    }
}

fn probe(points: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<ProbeScore> {
    Ok(ProbeScore::from_folds(linear_probe_folds(points, labels, FOLDS, seed)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub stage: Stage,
    pub decode_path: DecodePath,
    pub n_cells: usize,
    pub n_background: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub ss_salient: f64,
    pub ss_background: f64,
    pub ss_density: f64,
    pub clf_salient: ProbeScore,
    pub clf_background: ProbeScore,
    pub clf_density: ProbeScore,
    pub fid_vae: f64,
    /// `None` until a stage-3 generator exists.
    pub fid_gan: Option<f64>,
    pub downstream_accuracy: f64,
    pub downstream_control_accuracy: f64,
    /// Share of background images that a validation-fitted C/B probe calls
    /// CELLS after receiving a cell image's salient code.
    pub swap_cells_flip_rate: f64,
    /// Share of LOW images that the density probe calls HIGH after receiving
    /// a HIGH image's salient code.
    pub swap_density_cross_rate: f64,
    /// Share of non-decreasing steps of the density-probe score along
    /// LOW→HIGH salient interpolations.
    pub interp_monotone_rate: f64,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = match self.decode_path {
            DecodePath::Gan => "gan",
            DecodePath::Vae => "vae",
        };
        let score = |p: &ProbeScore| {
            let folds: Vec<String> = p.folds.iter().map(f64::to_string).collect();
            format!("mean={} std={} folds=[{}]", p.mean, p.std, folds.join(","))
        };
        let _ = writeln!(s, "stage: {}", self.stage);
        let _ = writeln!(s, "decode_path: {path}");
        let _ = writeln!(s, "n_cells: {}", self.n_cells);
        let _ = writeln!(s, "n_background: {}", self.n_background);
        let _ = writeln!(s, "n_high: {}", self.n_high);
        let _ = writeln!(s, "n_low: {}", self.n_low);
        let _ = writeln!(s, "ss_salient: {}", self.ss_salient);
        let _ = writeln!(s, "ss_background: {}", self.ss_background);
        let _ = writeln!(s, "ss_density: {}", self.ss_density);
        let _ = writeln!(s, "clf_salient: {}", score(&self.clf_salient));
        let _ = writeln!(s, "clf_background: {}", score(&self.clf_background));
        let _ = writeln!(s, "clf_density: {}", score(&self.clf_density));
        let _ = writeln!(s, "fid_features: {FID_LABEL}");
        let _ = writeln!(s, "fid_vae: {}", self.fid_vae);
        match self.fid_gan {
            Some(v) => {
                let _ = writeln!(s, "fid_gan: {v}");
            }
            None => {
                let _ = writeln!(s, "fid_gan: skipped (no stage-3 generator)");
            }
        }
        let _ = writeln!(s, "downstream_accuracy: {}", self.downstream_accuracy);
        let _ = writeln!(s, "downstream_control_accuracy: {}", self.downstream_control_accuracy);
        let _ = writeln!(s, "swap_cells_flip_rate: {}", self.swap_cells_flip_rate);
        let _ = writeln!(s, "swap_density_cross_rate: {}", self.swap_density_cross_rate);
        let _ = writeln!(s, "interp_monotone_rate: {}", self.interp_monotone_rate);
        s
    }
}

/// Splits a report file into its `key: value` fields.
pub fn parse_report(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::InvalidInput(format!("report line {}: expected `key: value`", i + 1)))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::InvalidInput(format!("report key {k} repeated")));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    /// Pairs drawn for each swap criterion.
    pub swap_pairs: usize,
    /// Pairs rendered as figures; each yields one swap and one interpolation montage.
    pub figure_pairs: usize,
    pub interp_steps: usize,
    /// Interpolations scored for monotonicity.
    pub interp_pairs: usize,
    pub downstream_per_class: usize,
    /// Cap on test images per group; 0 = all.
    pub max_test_samples: usize,
    /// Forces a decoding path; by default the generator is used once stage 3 ran.
    pub decode: Option<DecodePath>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            swap_pairs: 50,
            figure_pairs: 4,
            interp_steps: 7,
            interp_pairs: 20,
            downstream_per_class: 60,
            max_test_samples: 0,
            decode: None,
        }
    }
}

pub struct Evaluation {
    pub report: MetricsReport,
    /// `(file name, image)` of every montage.
    pub figures: Vec<(String, RgbImage)>,
}

const TAG_FOLDS: u64 = 11;
const TAG_SWAP: u64 = 12;
const TAG_DENSITY: u64 = 13;
const TAG_DOWNSTREAM: u64 = 14;

/// Seed the downstream transfer task receives for an evaluation seed.
pub fn downstream_seed(seed: u64) -> u64 {
    sub_seed(seed, TAG_DOWNSTREAM, 0)
}

/// Seeded pairing of two index ranges without repeats.
fn draw_pairs(na: usize, nb: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut a: Vec<usize> = (0..na).collect();
    let mut b: Vec<usize> = (0..nb).collect();
    a.shuffle(rng);
    b.shuffle(rng);
    a.into_iter().zip(b).take(n).collect()
}

fn labels(n0: usize, n1: usize) -> Vec<usize> {
    std::iter::repeat_n(0, n0).chain(std::iter::repeat_n(1, n1)).collect()
}

/// Log-odds of HIGH under a probe fitted with LOW = 0 and HIGH = 1.
fn high_score(p: &SoftmaxProbe, mu_s: &[f64]) -> f64 {
    let l = p.logits(mu_s);
    l[1] - l[0]
}

fn mean_f64(nets: &NetworkBundle<f32>, x: &Map<f32>) -> Result<Vec<f64>> {
    Ok(nets.encode_salient(x)?.mean.iter().map(|&v| v as f64).collect())
}

/// Every metric of the report on the test split, plus the figures.
pub fn evaluate_all(model: &Model, data: &CascadeData, opts: &EvalOptions) -> Result<Evaluation> {
    let nets = &model.nets;
    let half = if opts.max_test_samples == 0 { 0 } else { (opts.max_test_samples / 2).max(1) };
    let cells_p = data.group_patches(Split::Test, Group::Cells, half);
    let bg_p = data.group_patches(Split::Test, Group::Background, half);
    let high_p = data.density_patches(Split::Test, Density::High, half);
    let low_p = data.density_patches(Split::Test, Density::Low, half);
    let (cells, bg, high, low) = (maps_of(&cells_p), maps_of(&bg_p), maps_of(&high_p), maps_of(&low_p));
    if cells.len() < FOLDS || bg.len() < FOLDS || high.len() < FOLDS || low.len() < FOLDS {
        return Err(Error::InvalidInput(format!(
            "test split too small: {} cells, {} background, {} HIGH, {} LOW (need {FOLDS} each)",
            cells.len(),
            bg.len(),
            high.len(),
            low.len()
        )));
    }
    let fold_seed = sub_seed(opts.seed, TAG_FOLDS, 0);

    let mut s_cb = salient_means(nets, &cells)?;
    s_cb.extend(salient_means(nets, &bg)?);
    let mut z_cb = background_means(nets, &cells)?;
    z_cb.extend(background_means(nets, &bg)?);
    let y_cb = labels(cells.len(), bg.len());
    let mut s_hl = salient_means(nets, &low)?;
    s_hl.extend(salient_means(nets, &high)?);
    let y_hl = labels(low.len(), high.len());

    let everything: Vec<&Map<f32>> = cells.iter().chain(&bg).collect();
    let codes = everything.iter().map(|x| nets.mean_code(x)).collect::<Result<Vec<_>>>()?;
    let real: Vec<Map<f32>> = everything.iter().map(|&x| x.clone()).collect();
    let real_f = fid_features(&real)?;
    let vae = codes.iter().map(|c| nets.decode_image(c)).collect::<Result<Vec<_>>>()?;
    let fid_vae = fid(&real_f, &fid_features(&vae)?)?;
    let has_gan = model.stage == Stage::Stage3;
    let fid_gan = if has_gan {
        let gan = codes.iter().map(|c| nets.gan_generate(c)).collect::<Result<Vec<_>>>()?;
        Some(fid(&real_f, &fid_features(&gan)?)?)
    } else {
        None
    };
    let path = opts.decode.unwrap_or(if has_gan { DecodePath::Gan } else { DecodePath::Vae });

    // Cell salient code onto background images. The judge is a C/B probe
    // fitted on validation salient means of the current encoder; the stage-1
    // classifier head goes stale once stage 2 moves the encoder.
    let vc = maps_of(&data.group_patches(Split::Val, Group::Cells, half));
    let vb = maps_of(&data.group_patches(Split::Val, Group::Background, half));
    let mut v_pts = salient_means(nets, &vb)?;
    v_pts.extend(salient_means(nets, &vc)?);
    let cells_probe = SoftmaxProbe::fit(&v_pts, &labels(vb.len(), vc.len()), 2, PROBE_L2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(opts.seed, TAG_SWAP, 0));
    let cb_pairs = draw_pairs(cells.len(), bg.len(), opts.swap_pairs.max(opts.figure_pairs), &mut rng);
    let mut flips = 0usize;
    let mut figures = Vec::new();
    for (k, &(ci, bi)) in cb_pairs.iter().enumerate() {
        let grid = latent_swap(&cells[ci], &bg[bi], nets, path)?;
        if k < opts.swap_pairs {
            if cells_probe.predict(&mean_f64(nets, &grid.swapped[1])?) == 1 {
                flips += 1;
            }
        }
        if k < opts.figure_pairs {
            let (ida, idb) = (cells_p[ci].patch.id(), bg_p[bi].patch.id());
            figures.push((format!("swap_{ida}_{idb}.png"), swap_montage(&grid)?));
            let frames = interpolate(&cells[ci], &bg[bi], opts.interp_steps, Space::Salient, nets, path)?;
            let row: Vec<&Map<f32>> = frames.iter().collect();
            figures.push((format!("interp_{ida}_{idb}_{}.png", Space::Salient), probes::montage(&[row])?));
        }
    }
    let n_cb = cb_pairs.len().min(opts.swap_pairs).max(1);

    // HIGH salient code onto LOW images, judged by a probe fitted on validation means
    let vh = maps_of(&data.density_patches(Split::Val, Density::High, half));
    let vl = maps_of(&data.density_patches(Split::Val, Density::Low, half));
    let mut v_pts = salient_means(nets, &vl)?;
    v_pts.extend(salient_means(nets, &vh)?);
    let density_probe = SoftmaxProbe::fit(&v_pts, &labels(vl.len(), vh.len()), 2, PROBE_L2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(opts.seed, TAG_DENSITY, 0));
    let hl_pairs = draw_pairs(low.len(), high.len(), opts.swap_pairs.max(opts.interp_pairs), &mut rng);
    let mut crosses = 0usize;
    let (mut rising, mut transitions) = (0usize, 0usize);
    for (k, &(li, hi)) in hl_pairs.iter().enumerate() {
        if k < opts.swap_pairs {
            let grid = latent_swap(&low[li], &high[hi], nets, path)?;
            if density_probe.predict(&mean_f64(nets, &grid.swapped[0])?) == 1 {
                crosses += 1;
            }
        }
        if k < opts.interp_pairs {
            let a = nets.mean_code(&low[li])?;
            let b = nets.mean_code(&high[hi])?;
            let mut prev = None;
            for code in probes::interpolate_codes(&a, &b, opts.interp_steps, Space::Salient)? {
                let score = high_score(&density_probe, &mean_f64(nets, &decode(nets, &code, path)?)?);
                if let Some(p) = prev {
                    transitions += 1;
                    if score >= p {
                        rising += 1;
                    }
                }
                prev = Some(score);
            }
        }
    }
    let n_hl = hl_pairs.len().min(opts.swap_pairs).max(1);

    let down = probes::downstream_transfer(nets, opts.downstream_per_class, downstream_seed(opts.seed))?;

    let report = MetricsReport {
        stage: model.stage,
        decode_path: path,
        n_cells: cells.len(),
        n_background: bg.len(),
        n_high: high.len(),
        n_low: low.len(),
        ss_salient: silhouette(&s_cb, &y_cb)?,
        ss_background: silhouette(&z_cb, &y_cb)?,
        ss_density: silhouette(&s_hl, &y_hl)?,
        clf_salient: probe(&s_cb, &y_cb, fold_seed)?,
        clf_background: probe(&z_cb, &y_cb, fold_seed)?,
        clf_density: probe(&s_hl, &y_hl, fold_seed)?,
        fid_vae,
        fid_gan,
        downstream_accuracy: down.accuracy,
        downstream_control_accuracy: down.control_accuracy,
        swap_cells_flip_rate: flips as f64 / n_cb as f64,
        swap_density_cross_rate: crosses as f64 / n_hl as f64,
        interp_monotone_rate: if transitions == 0 { 0.0 } else { rising as f64 / transitions as f64 },
    };
    Ok(Evaluation { report, figures })
}

/// Writes the report and every figure under `dir` (figures in `dir/figures`).
pub fn write_evaluation(eval: &Evaluation, report_path: &Path, figures_dir: &Path) -> Result<()> {
    if let Some(parent) = report_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(report_path, eval.report.to_text()).map_err(|e| Error::io(report_path, e))?;
    fs::create_dir_all(figures_dir).map_err(|e| Error::io(figures_dir, e))?;
    for (name, img) in &eval.figures {
        let path = figures_dir.join(name);
        img.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
    }
    Ok(())
}
