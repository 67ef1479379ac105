use image::{Rgb, RgbImage};
use proptest::prelude::*;

use sscvae::data::{label_from_stats, make_copy_paste_pair, split_balanced, CopyPasteOptions, Density, Group, Mask, Patch, Split, SplitRatios};
use sscvae::eval::metrics::{fid, silhouette};
use sscvae::networks::GaussianLatent;
use sscvae::objectives::{bce_loss, info_nce, kl_standard_normal, mse_loss};

fn vecs(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), n)
}

fn nonzero(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, dim).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn patch(label: Option<(f64, u32)>, i: u32) -> Patch {
    Patch {
        pixels: RgbImage::new(1, 1),
        tile_id: "t".into(),
        grid_position: (i % 8, i / 8),
        label: label.map(|(r, t)| label_from_stats(r, t)),
    }
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_only_at_the_prior(
        mean in prop::collection::vec(-4.0f64..4.0, 1..8),
        seed in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let log_var: Vec<f64> = seed[..mean.len()].to_vec();
        let kl = kl_standard_normal(&GaussianLatent::new(mean.clone(), log_var.clone()).unwrap());
        prop_assert!(kl >= 0.0);
        let at_prior = mean.iter().chain(&log_var).all(|v| v.abs() < 1e-12);
        prop_assert_eq!(kl == 0.0, at_prior);
    }

    #[test]
    fn info_nce_ignores_order_and_vector_scale(
        anchor in nonzero(4),
        pos in prop::collection::vec(nonzero(4), 1..4),
        neg in prop::collection::vec(nonzero(4), 1..5),
        scale in 0.1f64..10.0,
        tau in 0.05f64..1.0,
    ) {
        let base = info_nce(&anchor, &pos, &neg, tau).unwrap();
        prop_assert!(base > 0.0);
        let mut neg_r = neg.clone();
        neg_r.reverse();
        let mut pos_r = pos.clone();
        pos_r.reverse();
        let scaled: Vec<f64> = anchor.iter().map(|v| v * scale).collect();
        prop_assert!((info_nce(&anchor, &pos_r, &neg_r, tau).unwrap() - base).abs() < 1e-10);
        prop_assert!((info_nce(&scaled, &pos, &neg, tau).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn mse_is_symmetric_and_bce_stays_finite(
        a in prop::collection::vec(-2.0f64..2.0, 1..20),
        p in 0.0f64..=1.0,
        y in any::<bool>(),
    ) {
        let b: Vec<f64> = a.iter().rev().copied().collect();
        prop_assert_eq!(mse_loss(&a, &b).unwrap(), mse_loss(&b, &a).unwrap());
        prop_assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let l = bce_loss(p, y);
        prop_assert!(l.is_finite() && l >= 0.0);
        prop_assert!(bce_loss(0.0f64, true).is_finite());
    }

    #[test]
    fn silhouette_is_bounded(pts in vecs(6..30, 3), labels_seed in prop::collection::vec(0usize..3, 30)) {
        let mut labels: Vec<usize> = labels_seed[..pts.len()].to_vec();
        labels[..6].copy_from_slice(&[0, 0, 1, 1, 2, 2]);
        let s = silhouette(&pts, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s), "{}", s);
    }

    #[test]
    fn fid_is_symmetric_and_translation_invariant(x in vecs(6..15, 2), y in vecs(6..15, 2), shift in -5.0f64..5.0) {
        let d = fid(&x, &y).unwrap();
        prop_assert!(d >= -1e-8);
        prop_assert!((d - fid(&y, &x).unwrap()).abs() < 1e-6 * (1.0 + d));
        let mv = |v: &Vec<Vec<f64>>| v.iter().map(|p| p.iter().map(|c| c + shift).collect()).collect::<Vec<Vec<f64>>>();
        prop_assert!((d - fid(&mv(&x), &mv(&y)).unwrap()).abs() < 1e-6 * (1.0 + d));
    }

    #[test]
    fn labels_follow_the_threshold_rules(ratio in 0.0f64..1.0, tils in 0u32..20) {
        let l = label_from_stats(ratio, tils);
        prop_assert_eq!(l.group == Group::Cells, ratio > 0.10);
        let expected = match (l.group, tils >= 5) {
            (Group::Background, _) => Density::NotApplicable,
            (Group::Cells, true) => Density::High,
            (Group::Cells, false) => Density::Low,
        };
        prop_assert_eq!(l.density, expected);
    }

    #[test]
    fn hard_paste_copies_exactly_the_masked_pixels(bits in prop::collection::vec(any::<bool>(), 64), seed in any::<u64>()) {
        let mut mask = Mask::new(8, 8);
        for (i, &b) in bits.iter().enumerate() {
            mask.set(i as u32 % 8, i as u32 / 8, b);
        }
        let cell = Patch { pixels: RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8, y as u8, 200])), ..patch(None, 0) };
        let bg = Patch { pixels: RgbImage::from_fn(8, 8, |x, y| Rgb([50, x as u8 * 3, y as u8 * 7])), ..patch(None, 1) };
        let pair = make_copy_paste_pair(&cell, &mask, &bg, seed, CopyPasteOptions::default()).unwrap();
        for (x, y, px) in pair.composite.pixels.enumerate_pixels() {
            let want = if mask.get(x, y) { cell.pixels.get_pixel(x, y) } else { bg.pixels.get_pixel(x, y) };
            prop_assert_eq!(px, want);
        }
        prop_assert_eq!(&pair.background.pixels, &bg.pixels);
    }

    #[test]
    fn balanced_splits_have_equal_groups(n_cells in 1u32..40, n_bg in 1u32..40, seed in any::<u64>()) {
        let patches: Vec<Patch> = (0..n_cells)
            .map(|i| patch(Some((0.5, i % 9)), i))
            .chain((0..n_bg).map(|i| patch(Some((0.01, 0)), 100 + i)))
            .collect();
        let (manifest, splits) = split_balanced(&patches, SplitRatios::default(), seed).unwrap();
        let n = n_cells.min(n_bg) as usize;
        prop_assert_eq!(manifest.entries.len(), 2 * n);
        for s in Split::ALL {
            prop_assert_eq!(manifest.count(s, Group::Cells), manifest.count(s, Group::Background));
        }
        let mut all: Vec<usize> = Split::ALL.iter().flat_map(|&s| splits.get(s).clone()).collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), 2 * n);
    }
}
