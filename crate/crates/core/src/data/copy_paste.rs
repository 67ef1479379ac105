use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sub_seed, AnnotatedPatch, Group, Mask, Patch, SyntheticPair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CopyPasteOptions {
    /// Width in pixels of an alpha ramp outside the mask. 0 means a hard paste.
    pub feather_radius: u32,
    /// Applies one seeded flip/transpose to the cell patch and its mask
    /// before pasting.
    pub random_dihedral: bool,
}

fn dihedral(img: &RgbImage, mask: &Mask, code: u8) -> (RgbImage, Mask) {
    let (w, h) = img.dimensions();
    let map = |x: u32, y: u32| -> (u32, u32) {
        let (mut sx, mut sy) = (x, y);
        if code & 1 != 0 {
            sx = w - 1 - sx;
        }
        if code & 2 != 0 {
            sy = h - 1 - sy;
        }
        if code & 4 != 0 {
            std::mem::swap(&mut sx, &mut sy);
        }
        (sx, sy)
    };
    let out = RgbImage::from_fn(w, h, |x, y| {
        let (sx, sy) = map(x, y);
        *img.get_pixel(sx, sy)
    });
    let mut m = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x, y);
            m.set(x, y, mask.get(sx, sy));
        }
    }
    (out, m)
}

/// Chebyshev distance to the nearest mask pixel, capped at `cap`.
fn distance_to_mask(mask: &Mask, cap: u32) -> Vec<u32> {
    let (w, h) = (mask.width(), mask.height());
    let mut dist = vec![u32::MAX; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                let x0 = x.saturating_sub(cap);
                let y0 = y.saturating_sub(cap);
                for yy in y0..(y + cap + 1).min(h) {
                    for xx in x0..(x + cap + 1).min(w) {
                        let d = x.abs_diff(xx).max(y.abs_diff(yy));
                        let slot = &mut dist[(yy * w + xx) as usize];
                        *slot = (*slot).min(d);
                    }
                }
            }
        }
    }
    dist
}

/// Pastes the masked pixels of `cell_patch` onto `bg_patch`.
///
/// The composite equals the cell patch inside the mask and the background
/// outside it (outside the feather ramp, when one is requested).
pub fn make_copy_paste_pair(
    cell_patch: &Patch,
    cell_mask: &Mask,
    bg_patch: &Patch,
    rng_seed: u64,
    options: CopyPasteOptions,
) -> Result<SyntheticPair> {
    if let Some(g) = cell_patch.group() {
        if g != Group::Cells {
            return Err(Error::InvalidInput(format!("cell patch {} is labeled {g}", cell_patch.id())));
        }
    }
    if let Some(g) = bg_patch.group() {
        if g != Group::Background {
            return Err(Error::InvalidInput(format!("background patch {} is labeled {g}", bg_patch.id())));
        }
    }
    let dims = cell_patch.pixels.dimensions();
    if bg_patch.pixels.dimensions() != dims {
        return Err(Error::shape("background patch", format!("{dims:?}"), format!("{:?}", bg_patch.pixels.dimensions())));
    }
    if (cell_mask.width(), cell_mask.height()) != dims {
        return Err(Error::InvalidInput(format!(
            "mask is {}x{} but the patch is {}x{}",
            cell_mask.width(),
            cell_mask.height(),
            dims.0,
            dims.1
        )));
    }
    if cell_mask.is_empty() {
        return Err(Error::InvalidInput("cell mask is empty".into()));
    }

    let (src, mask) = if options.random_dihedral {
        let code = ChaCha8Rng::seed_from_u64(rng_seed).random_range(0..8u8);
        dihedral(&cell_patch.pixels, cell_mask, code)
    } else {
        (cell_patch.pixels.clone(), cell_mask.clone())
    };

    let mut composite = bg_patch.pixels.clone();
    let r = options.feather_radius;
    let dist = if r > 0 { Some(distance_to_mask(&mask, r)) } else { None };
    for (i, (x, y, px)) in composite.enumerate_pixels_mut().enumerate() {
        if mask.get(x, y) {
            *px = *src.get_pixel(x, y);
        } else if let Some(d) = dist.as_ref().map(|d| d[i]).filter(|&d| d <= r) {
            let alpha = 1.0 - d as f32 / (r + 1) as f32;
            let s = src.get_pixel(x, y);
            for c in 0..3 {
                px.0[c] = (alpha * s.0[c] as f32 + (1.0 - alpha) * px.0[c] as f32).round() as u8;
            }
        }
    }

    Ok(SyntheticPair {
        composite: Patch {
            pixels: composite,
            tile_id: format!("pair{rng_seed}"),
            grid_position: (0, 0),
            label: None,
        },
        background: bg_patch.clone(),
        salient_mask: mask,
    })
}

/// Builds `n_pairs` composites from the CELLS and BACKGROUND patches among
/// `pool`. Cell patches are cycled in a seeded order and each is pasted
/// onto a randomly drawn background.
pub fn synthesize_pairs(
    patches: &[AnnotatedPatch],
    pool: &[usize],
    n_pairs: usize,
    options: CopyPasteOptions,
    seed: u64,
) -> Result<Vec<SyntheticPair>> {
    let mut cells: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&i| patches[i].patch.group() == Some(Group::Cells) && !patches[i].cell_mask.is_empty())
        .collect();
    let bgs: Vec<usize> = pool.iter().copied().filter(|&i| patches[i].patch.group() == Some(Group::Background)).collect();
    if n_pairs == 0 {
        return Ok(Vec::new());
    }
    if cells.is_empty() || bgs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "pair synthesis needs CELLS and BACKGROUND patches; got {} and {}",
            cells.len(),
            bgs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cells.shuffle(&mut rng);
    (0..n_pairs)
        .map(|k| {
            let c = &patches[cells[k % cells.len()]];
            let b = &patches[bgs[rng.random_range(0..bgs.len())]];
            let mut pair = make_copy_paste_pair(&c.patch, &c.cell_mask, &b.patch, sub_seed(seed, k as u64, 1), options)?;
            pair.composite.tile_id = format!("pair{k}_{}", c.patch.id());
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::label_from_stats;

    fn flat(rgb: [u8; 3], group_ratio: f64) -> Patch {
        Patch {
            pixels: RgbImage::from_pixel(16, 16, image::Rgb(rgb)),
            tile_id: "t".into(),
            grid_position: (0, 0),
            label: Some(label_from_stats(group_ratio, 0)),
        }
    }

    fn square_mask() -> Mask {
        let mut m = Mask::new(16, 16);
        for y in 4..8 {
            for x in 4..8 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn hard_paste_replaces_exactly_the_mask() {
        let cells = flat([10, 20, 30], 0.5);
        let bg = flat([200, 210, 220], 0.0);
        let m = square_mask();
        let pair = make_copy_paste_pair(&cells, &m, &bg, 1, CopyPasteOptions::default()).unwrap();
        for (x, y, p) in pair.composite.pixels.enumerate_pixels() {
            let want = if m.get(x, y) { [10, 20, 30] } else { [200, 210, 220] };
            assert_eq!(p.0, want, "pixel ({x},{y})");
        }
        assert_eq!(pair.salient_mask, m);
        assert_eq!(pair.background, bg);
    }

    #[test]
    fn seed_is_deterministic() {
        let cells = flat([10, 20, 30], 0.5);
        let bg = flat([200, 210, 220], 0.0);
        let opts = CopyPasteOptions { feather_radius: 0, random_dihedral: true };
        let a = make_copy_paste_pair(&cells, &square_mask(), &bg, 9, opts).unwrap();
        let b = make_copy_paste_pair(&cells, &square_mask(), &bg, 9, opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.salient_mask.area(), 16);
    }

    #[test]
    fn feather_touches_only_the_ring() {
        let cells = flat([0, 0, 0], 0.5);
        let bg = flat([200, 200, 200], 0.0);
        let opts = CopyPasteOptions { feather_radius: 2, random_dihedral: false };
        let pair = make_copy_paste_pair(&cells, &square_mask(), &bg, 0, opts).unwrap();
        assert_eq!(pair.composite.pixels.get_pixel(3, 5).0, [67, 67, 67]);
        assert_eq!(pair.composite.pixels.get_pixel(2, 5).0, [133, 133, 133]);
        assert_eq!(pair.composite.pixels.get_pixel(1, 5).0, [200, 200, 200]);
    }

    #[test]
    fn rejects_empty_or_misshapen_masks_and_wrong_groups() {
        let cells = flat([0, 0, 0], 0.5);
        let bg = flat([200, 200, 200], 0.0);
        let o = CopyPasteOptions::default();
        assert!(make_copy_paste_pair(&cells, &Mask::new(16, 16), &bg, 0, o).is_err());
        assert!(make_copy_paste_pair(&cells, &Mask::filled(20, 16), &bg, 0, o).is_err());
        assert!(make_copy_paste_pair(&bg, &square_mask(), &bg, 0, o).is_err());
        assert!(make_copy_paste_pair(&cells, &square_mask(), &cells, 0, o).is_err());
    }
}
