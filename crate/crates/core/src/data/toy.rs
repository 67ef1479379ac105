//! Procedural stand-in for annotated tissue tiles.
//!
//! Backgrounds come from two texture families (blotchy and striated) with
//! per-patch colour jitter. TILs are small, dark, round cells; other cells
//! are larger, paler ellipses. Every patch in a tile is rendered
//! independently and cells never straddle patch borders, so each patch's
//! label is fixed by construction and recovered exactly by
//! [`label_patch`](super::label_patch).

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    annotate_tile, split_balanced, sub_seed, synthesize_pairs, AnnotatedPatch, CellAnnotation, CellClass, CopyPasteOptions,
    DatasetManifest, Mask, Patch, SplitRatios, Splits, SyntheticPair, Tile, HIGH_TIL_COUNT, PATCH_SIZE,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n_tiles: usize,
    /// Tile side in patches.
    pub tile_patches: u32,
    pub cells_fraction: f64,
    /// Fraction of CELLS patches rendered with HIGH TIL density.
    pub high_fraction: f64,
    pub max_cells_per_patch: u32,
    /// Inclusive TIL count range for HIGH patches.
    pub high_tils: (u32, u32),
    /// Inclusive TIL count range for LOW patches.
    pub low_tils: (u32, u32),
    /// Range the total cell-area ratio of a CELLS patch is drawn from.
    pub cell_ratio_range: (f64, f64),
    pub split: (f64, f64, f64),
    /// Composites per CELLS patch in each split.
    pub pairs_per_cell_patch: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_tiles: 32,
            tile_patches: 8,
            cells_fraction: 0.5,
            high_fraction: 0.5,
            max_cells_per_patch: 24,
            high_tils: (6, 10),
            low_tils: (0, 3),
            cell_ratio_range: (0.13, 0.26),
            split: (0.6, 0.2, 0.2),
            pairs_per_cell_patch: 1,
        }
    }
}

impl ToyConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios { train: self.split.0, val: self.split.1, test: self.split.2 }
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.cells_fraction) || !frac_ok(self.high_fraction) {
            return Err(Error::InvalidInput("fractions must lie in [0, 1]".into()));
        }
        if self.n_tiles == 0 || self.tile_patches == 0 {
            return Err(Error::InvalidInput("need at least one tile of at least one patch".into()));
        }
        let (hlo, hhi) = self.high_tils;
        let (llo, lhi) = self.low_tils;
        if hlo > hhi || llo > lhi {
            return Err(Error::InvalidInput("TIL count ranges must be ordered".into()));
        }
        if self.high_fraction > 0.0 && hlo < HIGH_TIL_COUNT {
            return Err(Error::Infeasible(format!("HIGH patches need at least {HIGH_TIL_COUNT} TILs, range starts at {hlo}")));
        }
        if self.high_fraction < 1.0 && lhi >= HIGH_TIL_COUNT {
            return Err(Error::Infeasible(format!("LOW patches need fewer than {HIGH_TIL_COUNT} TILs, range ends at {lhi}")));
        }
        if self.high_fraction > 0.0 && self.max_cells_per_patch < hlo {
            return Err(Error::Infeasible(format!(
                "HIGH patches need {hlo} TILs but at most {} cells fit a patch",
                self.max_cells_per_patch
            )));
        }
        let (rlo, rhi) = self.cell_ratio_range;
        if !(rlo > super::CELL_RATIO_THRESHOLD && rlo <= rhi && rhi < 0.6) {
            return Err(Error::Infeasible(format!(
                "cell ratio range {:?} must lie above {} and below 0.6",
                self.cell_ratio_range,
                super::CELL_RATIO_THRESHOLD
            )));
        }
        // The largest OTHER cell covers just under 3% of a patch.
        let needed = (rlo / 0.029).ceil() as u32;
        if self.cells_fraction > 0.0 && self.max_cells_per_patch < needed {
            return Err(Error::Infeasible(format!(
                "max {} cells per patch cannot reach a cell ratio of {rlo}",
                self.max_cells_per_patch
            )));
        }
        self.ratios().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DownstreamClass {
    Tissue,
    TilOnly,
    OtherOnly,
}

impl DownstreamClass {
    pub const ALL: [DownstreamClass; 3] = [DownstreamClass::Tissue, DownstreamClass::TilOnly, DownstreamClass::OtherOnly];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub patches: Vec<AnnotatedPatch>,
    pub manifest: DatasetManifest,
    /// Indices into `patches` per split, CELLS first then BACKGROUND.
    pub splits: Splits<Vec<usize>>,
    pub pairs: Splits<Vec<SyntheticPair>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Background,
    High,
    Low,
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    let shared = rng.random_range(-amount..=amount);
    base.map(|c| c + shared + rng.random_range(-amount * 0.5..=amount * 0.5))
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn render_background(rng: &mut ChaCha8Rng, size: u32) -> RgbImage {
    let striated = rng.random_bool(0.5);
    let (base, tint) = if striated {
        ([206.0, 184.0, 222.0], [0.9, 0.8, 1.0])
    } else {
        ([228.0, 170.0, 196.0], [1.0, 1.2, 0.9])
    };
    let base = jitter(rng, base, 12.0);
    let waves: Vec<(f32, f32, f32, f32)> = if striated {
        let theta = rng.random_range(0.0..std::f32::consts::PI);
        let f = rng.random_range(0.35..0.6);
        let slow = rng.random_range(0.02..0.05);
        vec![
            (f * theta.cos(), f * theta.sin(), rng.random_range(0.0..6.3), rng.random_range(14.0..20.0)),
            (slow * theta.sin(), -slow * theta.cos(), rng.random_range(0.0..6.3), rng.random_range(6.0..10.0)),
        ]
    } else {
        (0..3)
            .map(|_| {
                let a = rng.random_range(0.0..std::f32::consts::TAU);
                let f = rng.random_range(0.03..0.09);
                (f * a.cos(), f * a.sin(), rng.random_range(0.0..6.3), rng.random_range(7.0..13.0))
            })
            .collect()
    };
    RgbImage::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f32, y as f32);
        let field: f32 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * xf + fy * yf + ph).sin()).sum();
        let noise = rng.random_range(-5.0..5.0);
        Rgb([0, 1, 2].map(|c| clamp_u8(base[c] + tint[c] * field + noise)))
    })
}

struct Cell {
    x0: u32,
    y0: u32,
    mask: Mask,
    class: CellClass,
}

fn ellipse(cx: f32, cy: f32, a: f32, b: f32, theta: f32) -> (u32, u32, Mask) {
    let r = a.max(b).ceil() + 1.0;
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let side = (2.0 * r + 1.0) as u32;
    let (s, c) = theta.sin_cos();
    let mut m = Mask::new(side, side);
    for j in 0..side {
        for i in 0..side {
            let dx = x0 as f32 + i as f32 + 0.5 - cx;
            let dy = y0 as f32 + j as f32 + 0.5 - cy;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                m.set(i, j, true);
            }
        }
    }
    (x0, y0, m)
}

fn sample_cell(rng: &mut ChaCha8Rng, class: CellClass) -> (f32, f32, f32) {
    match class {
        CellClass::Til => {
            let r = rng.random_range(4.5..6.0);
            (r, r * rng.random_range(0.9..1.0), rng.random_range(0.0..std::f32::consts::PI))
        }
        CellClass::Other => (rng.random_range(11.0..16.0), rng.random_range(6.5..9.5), rng.random_range(0.0..std::f32::consts::PI)),
    }
}

/// Tries to place one cell inside the patch without touching others.
fn place(rng: &mut ChaCha8Rng, class: CellClass, size: u32, occupied: &Mask) -> Option<Cell> {
    let (a, b, theta) = sample_cell(rng, class);
    let margin = a.max(b) + 2.0;
    for _ in 0..60 {
        let cx = rng.random_range(margin..size as f32 - margin);
        let cy = rng.random_range(margin..size as f32 - margin);
        let (x0, y0, mask) = ellipse(cx, cy, a, b, theta);
        if x0 + mask.width() > size || y0 + mask.height() > size {
            continue;
        }
        let mut overlap = 0;
        for j in 0..mask.height() {
            for i in 0..mask.width() {
                if mask.get(i, j) && occupied.get(x0 + i, y0 + j) {
                    overlap += 1;
                }
            }
        }
        if overlap == 0 {
            return Some(Cell { x0, y0, mask, class });
        }
    }
    None
}

fn stamp(occupied: &mut Mask, cell: &Cell) -> usize {
    let mut added = 0;
    for j in 0..cell.mask.height() {
        for i in 0..cell.mask.width() {
            if cell.mask.get(i, j) && !occupied.get(cell.x0 + i, cell.y0 + j) {
                occupied.set(cell.x0 + i, cell.y0 + j, true);
                added += 1;
            }
        }
    }
    added
}

fn paint(img: &mut RgbImage, rng: &mut ChaCha8Rng, cell: &Cell) {
    let base = match cell.class {
        CellClass::Til => jitter(rng, [62.0, 38.0, 112.0], 10.0),
        CellClass::Other => jitter(rng, [140.0, 76.0, 150.0], 12.0),
    };
    let (w, h) = (cell.mask.width() as f32, cell.mask.height() as f32);
    for j in 0..cell.mask.height() {
        for i in 0..cell.mask.width() {
            if cell.mask.get(i, j) {
                // Slightly darker towards the centre.
                let d = ((i as f32 + 0.5) / w - 0.5).hypot((j as f32 + 0.5) / h - 0.5);
                let shade = -18.0 * (1.0 - 2.0 * d).max(0.0);
                let noise = rng.random_range(-6.0..6.0);
                let px = img.get_pixel_mut(cell.x0 + i, cell.y0 + j);
                *px = Rgb([0, 1, 2].map(|c| clamp_u8(base[c] + shade + noise)));
            }
        }
    }
}

/// Renders one patch: background, then TILs, then other cells until the
/// target cell-area ratio is exceeded.
fn render_patch(
    rng: &mut ChaCha8Rng,
    n_tils: u32,
    other_until: Option<f64>,
    max_cells: u32,
) -> Option<(RgbImage, Vec<Cell>)> {
    let size = PATCH_SIZE;
    let mut img = render_background(rng, size);
    let mut occupied = Mask::new(size, size);
    let mut cells = Vec::new();
    let mut area = 0usize;
    for _ in 0..n_tils {
        let c = place(rng, CellClass::Til, size, &occupied)?;
        area += stamp(&mut occupied, &c);
        cells.push(c);
    }
    if let Some(target) = other_until {
        let total = (size * size) as f64;
        while (area as f64) / total <= target {
            if cells.len() as u32 >= max_cells {
                return None;
            }
            let c = place(rng, CellClass::Other, size, &occupied)?;
            area += stamp(&mut occupied, &c);
            cells.push(c);
        }
    }
    for c in &cells {
        paint(&mut img, rng, c);
    }
    Some((img, cells))
}

fn render_kind(rng: &mut ChaCha8Rng, kind: Kind, cfg: &ToyConfig) -> Result<(RgbImage, Vec<Cell>)> {
    for _ in 0..50 {
        let attempt = match kind {
            Kind::Background => render_patch(rng, 0, None, cfg.max_cells_per_patch),
            Kind::High | Kind::Low => {
                let (lo, hi) = if kind == Kind::High { cfg.high_tils } else { cfg.low_tils };
                let n = rng.random_range(lo..=hi);
                let target = rng.random_range(cfg.cell_ratio_range.0..=cfg.cell_ratio_range.1);
                render_patch(rng, n, Some(target), cfg.max_cells_per_patch)
            }
        };
        if let Some(out) = attempt {
            return Ok(out);
        }
    }
    Err(Error::Infeasible(format!(
        "could not place cells for a {kind:?} patch within {} cells",
        cfg.max_cells_per_patch
    )))
}

/// Renders `config.n_tiles` tiles with their cell annotations.
pub fn render_toy_tiles(config: &ToyConfig, seed: u64) -> Result<Vec<(Tile, Vec<CellAnnotation>)>> {
    config.validate()?;
    let k = config.tile_patches;
    let side = k * PATCH_SIZE;
    let mut out = Vec::with_capacity(config.n_tiles);
    for t in 0..config.n_tiles {
        let mut pixels = RgbImage::new(side, side);
        let mut anns = Vec::new();
        let mut next_id = 1u32;
        for idx in 0..k * k {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, t as u64, idx as u64));
            let kind = if rng.random_bool(config.cells_fraction) {
                if rng.random_bool(config.high_fraction) {
                    Kind::High
                } else {
                    Kind::Low
                }
            } else {
                Kind::Background
            };
            let (img, cells) = render_kind(&mut rng, kind, config)?;
            let (ox, oy) = ((idx % k) * PATCH_SIZE, (idx / k) * PATCH_SIZE);
            image::imageops::replace(&mut pixels, &img, ox as i64, oy as i64);
            for c in cells {
                anns.push(CellAnnotation::new((ox + c.x0, oy + c.y0), c.mask, c.class, next_id)?);
                next_id += 1;
            }
        }
        let tile = Tile { pixels, source_id: format!("toy{t:03}"), native_magnification: "synthetic".into() };
        out.push((tile, anns));
    }
    Ok(out)
}

/// Renders tiles, labels their patches, balances and splits them, and
/// synthesizes copy-paste pairs inside each split.
pub fn generate_toy_dataset(config: &ToyConfig, seed: u64) -> Result<ToyDataset> {
    let tiles = render_toy_tiles(config, seed)?;
    let mut patches = Vec::new();
    for (tile, anns) in &tiles {
        patches.extend(annotate_tile(tile, anns)?);
    }
    let plain: Vec<Patch> = patches.iter().map(|p| p.patch.clone()).collect();
    let (manifest, splits) = split_balanced(&plain, config.ratios(), super::split_seed(seed))?;
    let mut pairs = Splits::<Vec<SyntheticPair>>::default();
    for split in super::Split::ALL {
        let pool = splits.get(split);
        let n_cells = pool.iter().filter(|&&i| patches[i].patch.group() == Some(super::Group::Cells)).count();
        *pairs.get_mut(split) = synthesize_pairs(
            &patches,
            pool,
            n_cells * config.pairs_per_cell_patch,
            CopyPasteOptions::default(),
            super::pairs_seed(seed, split),
        )?;
    }
    Ok(ToyDataset { patches, manifest, splits, pairs })
}

/// Three-way labelled patches: plain tissue, TIL-only and other-only. Cell
/// areas of the two cell classes are drawn from similar ranges so that
/// colour mass alone does not separate them.
pub fn generate_downstream_set(n_per_class: usize, seed: u64) -> Result<Vec<(Patch, DownstreamClass)>> {
    let mut out = Vec::with_capacity(3 * n_per_class);
    for class in DownstreamClass::ALL {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 100 + class.index() as u64, i as u64));
            let img = loop {
                let attempt = match class {
                    DownstreamClass::Tissue => render_patch(&mut rng, 0, None, 0),
                    DownstreamClass::TilOnly => {
                        let n = rng.random_range(10..=16);
                        render_patch(&mut rng, n, None, 32)
                    }
                    DownstreamClass::OtherOnly => {
                        let target = rng.random_range(0.06..0.10);
                        render_patch(&mut rng, 0, Some(target), 32)
                    }
                };
                if let Some((img, _)) = attempt {
                    break img;
                }
            };
            out.push((
                Patch { pixels: img, tile_id: format!("down{}_{i}", class.index()), grid_position: (0, 0), label: None },
                class,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{label_patch, Density, Group, Split};

    fn small() -> ToyConfig {
        ToyConfig { n_tiles: 2, tile_patches: 4, ..ToyConfig::default() }
    }

    #[test]
    fn labels_match_the_rendered_kinds() {
        let tiles = render_toy_tiles(&small(), 5).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (tile, anns) in &tiles {
            for p in annotate_tile(tile, anns).unwrap() {
                let l = p.label();
                assert_eq!(l, label_patch(p.patch.grid_position, anns));
                match l.group {
                    Group::Background => assert_eq!(l.cell_area_ratio, 0.0),
                    Group::Cells => {
                        let (lo, hi) = small().cell_ratio_range;
                        assert!(l.cell_area_ratio > lo - 1e-9 && l.cell_area_ratio < hi + 0.05, "{}", l.cell_area_ratio);
                        match l.density {
                            Density::High => assert!((6..=10).contains(&l.til_count)),
                            Density::Low => assert!(l.til_count <= 3),
                            Density::NotApplicable => unreachable!(),
                        }
                    }
                }
                seen.insert(l.density);
            }
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_toy_dataset(&small(), 1).unwrap();
        let b = generate_toy_dataset(&small(), 1).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.pairs, b.pairs);
        let c = generate_toy_dataset(&small(), 2).unwrap();
        assert_ne!(a.patches[0].patch.pixels, c.patches[0].patch.pixels);
    }

    #[test]
    fn splits_are_balanced_and_pairs_stay_inside_their_split() {
        let d = generate_toy_dataset(&small(), 3).unwrap();
        for split in Split::ALL {
            assert_eq!(d.manifest.count(split, Group::Cells), d.manifest.count(split, Group::Background));
            let bgs: Vec<&RgbImage> = d
                .splits
                .get(split)
                .iter()
                .filter(|&&i| d.patches[i].label().group == Group::Background)
                .map(|&i| &d.patches[i].patch.pixels)
                .collect();
            for pair in d.pairs.get(split) {
                assert!(bgs.contains(&&pair.background.pixels));
                assert!(!pair.salient_mask.is_empty());
            }
        }
    }

    #[test]
    fn infeasible_requests_are_rejected() {
        let cfg = ToyConfig { max_cells_per_patch: 4, ..ToyConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Infeasible(_))));
        let cfg = ToyConfig { high_tils: (3, 8), ..ToyConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Infeasible(_))));
        let cfg = ToyConfig { cell_ratio_range: (0.05, 0.2), ..ToyConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Infeasible(_))));
    }

    #[test]
    fn downstream_classes_are_balanced() {
        let set = generate_downstream_set(4, 0).unwrap();
        assert_eq!(set.len(), 12);
        for class in DownstreamClass::ALL {
            assert_eq!(set.iter().filter(|(_, c)| *c == class).count(), 4);
        }
    }
}
