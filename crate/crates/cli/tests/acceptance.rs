//! Acceptance criteria 1–9. Runs as a plain binary (`harness = false`) so
//! that every criterion prints its own PASS/FAIL line; the process exits
//! non-zero if any criterion fails.
//!
//! `cargo test --release -p sscvae-cli --test acceptance -- 1 4 9` runs a subset.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sscvae::config::TrainConfig;
use sscvae::data::{
    assemble_patches, extract_patches, generate_toy_dataset, label_from_stats, make_copy_paste_pair, split_balanced, CopyPasteOptions,
    Density, Group, Mask, Patch, Split, Tile, ToyConfig,
};
use sscvae::eval::metrics::{fid, linear_probe_cv, silhouette};
use sscvae::eval::probes::downstream_transfer;
use sscvae::eval::{downstream_seed, evaluate_all, EvalOptions, MetricsReport};
use sscvae::networks::{GaussianLatent, NetConfig, NetworkBundle};
use sscvae::objectives::{
    bce_loss, gan_losses, info_nce, kl_standard_normal, mse_loss, stage1_loss, stage2_loss, CompositeSample, GanSample, GanUpdate,
    LossWeights,
};
use sscvae::tensor::Map;
use sscvae::training::{train_stage1, train_stage2, train_stage3, CascadeData, MetricsLog, Model};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(limit: Duration, t: Instant) -> (bool, String) {
    let e = t.elapsed();
    (e <= limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- criterion 1

fn kl_monte_carlo(mean: &[f64], log_var: &[f64], n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n {
        let mut log_q = 0.0;
        let mut log_p = 0.0;
        for (&m, &lv) in mean.iter().zip(log_var) {
            let e: f64 = StandardNormal.sample(rng);
            let x = m + (0.5 * lv).exp() * e;
            log_q += -0.5 * ((2.0 * PI).ln() + lv + (x - m) * (x - m) / lv.exp());
            log_p += -0.5 * ((2.0 * PI).ln() + x * x);
        }
        acc += log_q - log_p;
    }
    acc / n as f64
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

fn info_nce_direct(a: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
    let neg_sum: f64 = neg.iter().map(|n| (cos(a, n) / tau).exp()).sum();
    let mut total = 0.0;
    for p in pos {
        let e = (cos(a, p) / tau).exp();
        total += -(e / (e + neg_sum)).ln();
    }
    total / pos.len() as f64
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_map(rng: &mut ChaCha8Rng, c: usize, size: usize) -> Map<f64> {
    Map::from_vec(c, size, size, (0..c * size * size).map(|_| rng.random_range(0.05..0.95)).collect())
}

fn mini_batch(rng: &mut ChaCha8Rng, n_c: usize, n_b: usize) -> (Vec<CompositeSample<f64>>, Vec<Map<f64>>) {
    let size = NetConfig::miniature().image_size;
    let comps = (0..n_c)
        .map(|_| {
            let mask: Vec<f64> = (0..size * size).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            CompositeSample { composite: rand_map(rng, 3, size), mask: Map::from_vec(1, size, size, mask), background: rand_map(rng, 3, size) }
        })
        .collect();
    let bgs = (0..n_b).map(|_| rand_map(rng, 3, size)).collect();
    (comps, bgs)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_kl = 0.0f64;
    for _ in 0..5 {
        let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let log_var: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let closed = kl_standard_normal(&GaussianLatent::new(mean.clone(), log_var.clone()).unwrap());
        let mc = kl_monte_carlo(&mean, &log_var, 100_000, &mut rng);
        worst_kl = worst_kl.max((closed - mc).abs() / closed);
    }
    let mut worst_direct = 0.0f64;
    for _ in 0..20 {
        let dim = rng.random_range(2..8);
        let a = rand_vec(&mut rng, dim);
        let pos: Vec<Vec<f64>> = (0..rng.random_range(1..4)).map(|_| rand_vec(&mut rng, dim)).collect();
        let neg: Vec<Vec<f64>> = (0..rng.random_range(1..5)).map(|_| rand_vec(&mut rng, dim)).collect();
        let tau = rng.random_range(0.05..1.0);
        worst_direct = worst_direct.max((info_nce(&a, &pos, &neg, tau).unwrap() - info_nce_direct(&a, &pos, &neg, tau)).abs());

        let p = rand_vec(&mut rng, dim * 3);
        let q = rand_vec(&mut rng, dim * 3);
        let direct = p.iter().zip(&q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / p.len() as f64;
        worst_direct = worst_direct.max((mse_loss(&p, &q).unwrap() - direct).abs());

        let prob: f64 = rng.random_range(1e-3..1.0 - 1e-3);
        let y = rng.random_bool(0.5);
        let direct = -(if y { prob.ln() } else { (1.0 - prob).ln() });
        worst_direct = worst_direct.max((bce_loss(prob, y) - direct).abs());
    }
    let mut nets = NetworkBundle::<f64>::new(NetConfig::miniature()).unwrap();
    let (comps, bgs) = mini_batch(&mut rng, 3, 2);
    let b = stage1_loss(&comps, &bgs, &mut nets, &LossWeights::default(), 5, false).unwrap();
    let sum_gap = (b.total - (b.elbo_c + b.elbo_b + b.salient_map_mse + b.background_mse + b.bce)).abs();
    let (fast, time) = within(Duration::from_secs(30), t);
    outcome(
        worst_kl <= 0.02 && worst_direct <= 1e-6 && sum_gap <= 1e-6 && fast,
        format!("kl vs MC worst rel {worst_kl:.4}; direct-formula worst {worst_direct:.1e}; stage-1 sum gap {sum_gap:.1e}; {time}"),
    )
}

// ---------------------------------------------------------------- criterion 2

const GRAD_COORDS: usize = 200;
const GRAD_H: f64 = 1e-4;
const GRAD_REL: f64 = 1e-3;
/// Gradients this small on both sides count as agreeing.
const GRAD_FLOOR: f64 = 1e-8;

fn perturb(nets: &mut NetworkBundle<f64>, component: &str, index: usize, delta: f64) {
    let mut i = 0;
    nets.component_mut(component).unwrap().visit_mut("", &mut |_, p| {
        if index >= i && index < i + p.len() {
            p.value[index - i] += delta;
        }
        i += p.len();
    });
}

fn analytic(nets: &NetworkBundle<f64>, component: &str) -> Vec<f64> {
    let mut g = Vec::new();
    nets.component(component).unwrap().visit("", &mut |_, p| g.extend_from_slice(&p.grad));
    g
}

fn central_difference<F>(nets: &mut NetworkBundle<f64>, component: &str, k: usize, h: f64, loss: &mut F) -> f64
where
    F: FnMut(&mut NetworkBundle<f64>, bool) -> f64,
{
    perturb(nets, component, k, h);
    let up = loss(nets, false);
    perturb(nets, component, k, -2.0 * h);
    let down = loss(nets, false);
    perturb(nets, component, k, h);
    (up - down) / (2.0 * h)
}

struct GradCheck {
    agreement: f64,
    redrawn: usize,
}

/// Compares analytic gradients with central differences at `GRAD_H` on
/// `GRAD_COORDS` sampled coordinates. A coordinate whose stencil straddles a
/// leaky-ReLU kink has no valid finite-difference reference; those are
/// recognised by the h and h/2 differences disagreeing (the analytic value
/// is not consulted) and replaced by a fresh draw.
fn grad_agreement<F>(nets: &mut NetworkBundle<f64>, components: &[&str], seed: u64, mut loss: F) -> GradCheck
where
    F: FnMut(&mut NetworkBundle<f64>, bool) -> f64,
{
    nets.zero_grad();
    loss(nets, true);
    let grads: Vec<Vec<f64>> = components.iter().map(|c| analytic(nets, c)).collect();
    let total: usize = grads.iter().map(Vec::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ok, mut checked, mut redrawn) = (0, 0, 0);
    while checked < GRAD_COORDS && redrawn < 10 * GRAD_COORDS {
        let mut k = rng.random_range(0..total);
        let mut c = 0;
        while k >= grads[c].len() {
            k -= grads[c].len();
            c += 1;
        }
        let numeric = central_difference(nets, components[c], k, GRAD_H, &mut loss);
        let half = central_difference(nets, components[c], k, GRAD_H / 2.0, &mut loss);
        let spread = (numeric - half).abs();
        if spread > GRAD_FLOOR && spread > GRAD_REL * numeric.abs().max(half.abs()) {
            redrawn += 1;
            continue;
        }
        checked += 1;
        let a = grads[c][k];
        let err = (a - numeric).abs();
        if err <= GRAD_FLOOR || err <= GRAD_REL * a.abs().max(numeric.abs()) {
            ok += 1;
        }
    }
    GradCheck { agreement: ok as f64 / GRAD_COORDS as f64, redrawn }
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let w = LossWeights { lambda1: 0.5, lambda2: 0.5, distill_weight: 0.3, recon_weight: 2.0, ..LossWeights::default() };
    let mut nets = NetworkBundle::<f64>::new(NetConfig::miniature()).unwrap();

    let (comps, bgs) = mini_batch(&mut rng, 3, 2);
    let stage1 = [
        "salient_encoder",
        "background_encoder",
        "image_decoder",
        "salient_map_decoder",
        "background_decoder",
        "classifier",
    ];
    let s1 = grad_agreement(&mut nets, &stage1, 1, |n, bp| stage1_loss(&comps, &bgs, n, &w, 9, bp).unwrap().total);

    let (high, low): (Vec<Map<f64>>, Vec<Map<f64>>) = ((0..3).map(|_| rand_map(&mut rng, 3, 8)).collect(), (0..3).map(|_| rand_map(&mut rng, 3, 8)).collect());
    let s2 = grad_agreement(&mut nets, &["salient_encoder"], 2, |n, bp| stage2_loss(&high, &low, n, &w, bp).unwrap().total);

    let code_dim = nets.config.code_dim();
    let gan_batch: Vec<GanSample<f64>> = (0..3)
        .map(|_| GanSample { real: rand_map(&mut rng, 3, 8), code: rand_vec(&mut rng, code_dim), vae_recon: rand_map(&mut rng, 3, 8) })
        .collect();
    let g = grad_agreement(&mut nets, &["gan_generator"], 3, |n, bp| {
        gan_losses(&gan_batch, n, &w, if bp { GanUpdate::Generator } else { GanUpdate::None }).unwrap().loss_g
    });
    let d = grad_agreement(&mut nets, &["gan_discriminator"], 4, |n, bp| {
        gan_losses(&gan_batch, n, &w, if bp { GanUpdate::Discriminator } else { GanUpdate::None }).unwrap().loss_d
    });
    let (fast, time) = within(Duration::from_secs(120), t);
    let checks = [("stage1", s1), ("stage2", s2), ("gan G", g), ("gan D", d)];
    let worst = checks.iter().map(|(_, c)| c.agreement).fold(1.0, f64::min);
    let summary: Vec<String> = checks.iter().map(|(n, c)| format!("{n} {:.3} ({} redrawn)", c.agreement, c.redrawn)).collect();
    outcome(worst >= 0.99 && fast, format!("agreement over {GRAD_COORDS} coords each: {}; h {GRAD_H:e}; {time}", summary.join(", ")))
}

// ---------------------------------------------------------------- criterion 3

fn silhouette_direct(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let d = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let k = labels.iter().max().unwrap() + 1;
    let mut s = 0.0;
    for i in 0..points.len() {
        let mean_to = |c: usize| {
            let others: Vec<usize> = (0..points.len()).filter(|&j| j != i && labels[j] == c).collect();
            others.iter().map(|&j| d(&points[i], &points[j])).sum::<f64>() / others.len() as f64
        };
        let a = mean_to(labels[i]);
        let b = (0..k).filter(|&c| c != labels[i]).map(mean_to).fold(f64::INFINITY, f64::min);
        s += if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
    }
    s / points.len() as f64
}

fn fid_direct(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let stats = |v: &[Vec<f64>]| {
        let (n, dim) = (v.len(), v[0].len());
        let m = DMatrix::from_fn(n, dim, |r, c| v[r][c]);
        let mu = m.row_mean();
        let centred = DMatrix::from_fn(n, dim, |r, c| m[(r, c)] - mu[c]);
        (mu, centred.transpose() * &centred / (n as f64 - 1.0))
    };
    let (m1, s1) = stats(x);
    let (m2, s2) = stats(y);
    let tr_sqrt: f64 = (&s1 * &s2).complex_eigenvalues().iter().map(|z| z.re.max(0.0).sqrt()).sum();
    (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut sil_gap = 0.0f64;
    let mut fid_gap = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(2..5);
        let dim = rng.random_range(1..5);
        let n = rng.random_range(2 * k..30);
        let labels: Vec<usize> = (0..n).map(|i| if i < 2 * k { i % k } else { rng.random_range(0..k) }).collect();
        let pts: Vec<Vec<f64>> = labels.iter().map(|&l| (0..dim).map(|_| l as f64 + rng.random_range(-1.5..1.5)).collect()).collect();
        sil_gap = sil_gap.max((silhouette(&pts, &labels).unwrap() - silhouette_direct(&pts, &labels)).abs());

        let dim = rng.random_range(1..5);
        let cloud = |rng: &mut ChaCha8Rng, n: usize, shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|j| shift * j as f64 + rng.random_range(-1.0..1.0) * (1.0 + j as f64)).collect()).collect()
        };
        let x = cloud(&mut rng, 40, 0.0);
        let y = cloud(&mut rng, 35, 0.7);
        fid_gap = fid_gap.max((fid(&x, &y).unwrap() - fid_direct(&x, &y)).abs());
    }
    let x: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(0.0..3.0)]).collect();
    let self_fid = fid(&x, &x).unwrap();
    let one_d = fid(&[vec![-1.0], vec![1.0]], &[vec![0.0], vec![2.0]]).unwrap();

    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for i in 0..200 {
        let c = i % 2;
        let shift = if c == 0 { -3.0 } else { 3.0 };
        pts.push(vec![shift + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        labels.push(c);
    }
    let (separable, _) = linear_probe_cv(&pts, &labels, 5, 1).unwrap();
    let noise: Vec<Vec<f64>> = (0..400).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let permuted: Vec<usize> = (0..400).map(|_| usize::from(rng.random_bool(0.5))).collect();
    let (chance, _) = linear_probe_cv(&noise, &permuted, 5, 1).unwrap();

    let (fast, time) = within(Duration::from_secs(60), t);
    outcome(
        sil_gap <= 1e-6 && fid_gap <= 1e-6 && self_fid.abs() <= 1e-9 && (one_d - 1.0).abs() <= 1e-9 && separable == 1.0 && (chance - 0.5).abs() <= 0.08 && fast,
        format!(
            "silhouette gap {sil_gap:.1e}, FID gap {fid_gap:.1e}, fid(X,X) {self_fid:.1e}, 1-d FID {one_d}, probe separable {separable:.3} permuted {chance:.3}; {time}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn solid(rgb: [u8; 3], seed: u64) -> image::RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image::RgbImage::from_fn(128, 128, |_, _| image::Rgb(rgb.map(|c| c.saturating_add(rng.random_range(0..20)))))
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cell = Patch { pixels: solid([90, 30, 120], 1), tile_id: "c".into(), grid_position: (0, 0), label: None };
    let bg = Patch { pixels: solid([230, 180, 200], 2), tile_id: "b".into(), grid_position: (0, 0), label: None };
    let mut mask = Mask::new(128, 128);
    for _ in 0..900 {
        mask.set(rng.random_range(0..128), rng.random_range(0..128), true);
    }
    let pair = make_copy_paste_pair(&cell, &mask, &bg, 3, CopyPasteOptions::default()).unwrap();
    let mut paste_exact = true;
    for (x, y, px) in pair.composite.pixels.enumerate_pixels() {
        let want = if mask.get(x, y) { cell.pixels.get_pixel(x, y) } else { bg.pixels.get_pixel(x, y) };
        paste_exact &= px == want;
    }

    let labels_ok = label_from_stats(0.10, 9).group == Group::Background
        && label_from_stats(0.1001, 0).group == Group::Cells
        && label_from_stats(0.2, 5).density == Density::High
        && label_from_stats(0.2, 4).density == Density::Low;

    let toy = generate_toy_dataset(&ToyConfig { n_tiles: 3, ..ToyConfig::default() }, 4).unwrap();
    let balanced = Split::ALL.iter().all(|&s| toy.manifest.count(s, Group::Cells) == toy.manifest.count(s, Group::Background));
    let mut imbalanced = toy.patches.iter().map(|p| p.patch.clone()).collect::<Vec<_>>();
    imbalanced.truncate(150);
    let (m, _) = split_balanced(&imbalanced, Default::default(), 5).unwrap();
    let rebalanced = Split::ALL.iter().all(|&s| m.count(s, Group::Cells) == m.count(s, Group::Background));

    let tile = Tile { pixels: solid([10, 200, 60], 6), source_id: "t".into(), native_magnification: "20x".into() };
    let tile = Tile { pixels: image::imageops::resize(&tile.pixels, 1024, 1024, image::imageops::FilterType::Nearest), ..tile };
    let tile = Tile {
        pixels: image::RgbImage::from_fn(1024, 1024, |x, y| {
            let p = tile.pixels.get_pixel(x, y);
            image::Rgb([p[0], (x % 251) as u8, (y % 241) as u8])
        }),
        ..tile
    };
    let patches = extract_patches(&tile).unwrap();
    let reassembled = patches.len() == 64 && assemble_patches(&patches, 1024) == tile.pixels;

    let (fast, time) = within(Duration::from_secs(30), t);
    outcome(
        paste_exact && labels_ok && balanced && rebalanced && reassembled && fast,
        format!(
            "paste exact {paste_exact}, label boundaries {labels_ok}, toy splits 1:1 {balanced}, surplus rebalanced {rebalanced}, tiling identity {reassembled}; {time}"
        ),
    )
}

// ---------------------------------------------------------- criteria 5 to 8

const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);
const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.conf");

struct EndToEnd {
    stage2: MetricsReport,
    stage3: MetricsReport,
    seconds: f64,
    downstream: (f64, f64, f64),
}

fn end_to_end() -> EndToEnd {
    let t = Instant::now();
    let cfg = TrainConfig::from_file(Path::new(CONFIG)).unwrap();
    let data: CascadeData = generate_toy_dataset(&ToyConfig::default(), cfg.seed).unwrap().into();
    println!("  toy benchmark: {} labelled patches", data.splits.train.len() + data.splits.val.len() + data.splits.test.len());
    let mut model = Model::init(&cfg).unwrap();
    let mut log = MetricsLog::default();
    let opts = EvalOptions { seed: cfg.seed, figure_pairs: 0, ..EvalOptions::default() };
    train_stage1(&cfg, &data, &mut model, &mut log).unwrap();
    println!("  stage 1 done at {:.0}s", t.elapsed().as_secs_f64());
    train_stage2(&cfg, &data, &mut model, &mut log).unwrap();
    println!("  stage 2 done at {:.0}s", t.elapsed().as_secs_f64());
    let stage2 = evaluate_all(&model, &data, &opts).unwrap().report;
    train_stage3(&cfg, &data, &mut model, &mut log).unwrap();
    println!("  stage 3 done at {:.0}s", t.elapsed().as_secs_f64());
    let stage3 = evaluate_all(&model, &data, &opts).unwrap().report;
    let seconds = t.elapsed().as_secs_f64();

    let td = Instant::now();
    let d = downstream_transfer(&model.nets, opts.downstream_per_class, downstream_seed(opts.seed)).unwrap();
    EndToEnd { stage2, stage3, seconds, downstream: (d.accuracy, d.control_accuracy, td.elapsed().as_secs_f64()) }
}

fn criterion_5(e: &EndToEnd) -> Outcome {
    let r = &e.stage2;
    let pass = r.ss_salient >= 0.25
        && r.ss_salient - r.ss_background >= 0.15
        && r.clf_salient.mean >= 0.85
        && r.clf_salient.mean - r.clf_background.mean >= 0.10
        && r.ss_density >= 0.15
        && r.clf_density.mean >= 0.75
        && e.seconds <= E2E_BUDGET.as_secs_f64();
    outcome(
        pass,
        format!(
            "ss_salient {:.3} ss_background {:.3} clf_salient {:.3} clf_background {:.3} ss_density {:.3} clf_density {:.3}; cascade+eval {:.0}s of {}s",
            r.ss_salient,
            r.ss_background,
            r.clf_salient.mean,
            r.clf_background.mean,
            r.ss_density,
            r.clf_density.mean,
            e.seconds,
            E2E_BUDGET.as_secs()
        ),
    )
}

fn criterion_6(e: &EndToEnd) -> Outcome {
    let r = &e.stage3;
    match r.fid_gan {
        Some(g) => outcome(g < r.fid_vae && e.seconds <= E2E_BUDGET.as_secs_f64(), format!("fid_gan {g:.2} vs fid_vae {:.2}", r.fid_vae)),
        None => outcome(false, "no stage-3 generator in the report"),
    }
}

fn criterion_7(e: &EndToEnd) -> Outcome {
    let r = &e.stage3;
    outcome(
        r.swap_cells_flip_rate >= 0.8 && r.swap_density_cross_rate >= 0.8,
        format!(
            "C/B flip rate {:.2}, HIGH/LOW crossing rate {:.2} (50 pairs each, generator path)",
            r.swap_cells_flip_rate, r.swap_density_cross_rate
        ),
    )
}

fn criterion_8(e: &EndToEnd) -> Outcome {
    let (acc, control, secs) = e.downstream;
    let r = &e.stage3;
    let consistent = acc == r.downstream_accuracy && control == r.downstream_control_accuracy;
    outcome(
        acc - control >= 0.10 && secs <= 180.0 && consistent,
        format!("trained {acc:.3} vs random-encoder control {control:.3}; {secs:.1}s; matches report {consistent}"),
    )
}

// ---------------------------------------------------------------- criterion 9

fn sscvae(args: &[&str], runs: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_sscvae"))
        .args(args)
        .env("SSCVAE_RUNS_DIR", runs)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "sscvae {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                // wall-clock seconds are the only intended difference
                if !rel.ends_with("_result.json") {
                    out.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let tiny = [
        "--set",
        "epochs_stage1=1",
        "--set",
        "epochs_stage2=1",
        "--set",
        "epochs_stage3=1",
        "--set",
        "batch_size=4",
        "--set",
        "max_train_samples=8",
        "--set",
        "max_val_samples=8",
        "--set",
        "stage2_high=3",
        "--set",
        "stage2_low=3",
    ];
    let mut trees = Vec::new();
    for rep in ["a", "b"] {
        let data = tmp.path().join(format!("data_{rep}"));
        let runs = tmp.path().join(format!("runs_{rep}"));
        let d = data.to_str().unwrap();
        sscvae(&["toy-gen", "--data", d, "--tiles", "4", "--seed", "3"], &runs);
        sscvae(&["prepare", "--data", d, "--seed", "3"], &runs);
        sscvae(&["synth-pairs", "--data", d, "--seed", "3"], &runs);
        let mut train = vec!["train", "all", "--data", d, "--run-id", "det", "--seed", "3"];
        train.extend(tiny);
        sscvae(&train, &runs);
        sscvae(&["eval", "--data", d, "--run-id", "det", "--seed", "3", "--pairs", "2", "--swap-pairs", "10"], &runs);
        let mut tree = tree_bytes(&data);
        tree.extend(tree_bytes(&runs.join("det")).into_iter().map(|(k, v)| (format!("run/{k}"), v)));
        trees.push(tree);
    }
    let files = trees[0].len();
    let names_match = trees[0].iter().map(|(k, _)| k).eq(trees[1].iter().map(|(k, _)| k));
    let differing: Vec<&str> = trees[0].iter().zip(&trees[1]).filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0.as_str()).collect();
    let has = |s: &str| trees[0].iter().any(|(k, _)| k.contains(s));
    let covered = has("checkpoints/stage3.ckpt") && has("run/report") && has("manifest.csv") && has("figures/");
    outcome(
        names_match && differing.is_empty() && covered,
        format!("{files} files compared across two full CLI runs; differing: {differing:?}"),
    )
}

// ---------------------------------------------------------------------- main

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!("criterion {n}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    for (n, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3), (4, criterion_4)] {
        if run(n) {
            report(n, f());
        }
    }
    if (5..=8).any(run) {
        let e = end_to_end();
        for (n, f) in [(5, criterion_5 as fn(&EndToEnd) -> Outcome), (6, criterion_6), (7, criterion_7), (8, criterion_8)] {
            if run(n) {
                report(n, f(&e));
            }
        }
    }
    if run(9) {
        report(9, criterion_9());
    }
    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
