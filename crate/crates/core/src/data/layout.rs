//! On-disk layouts.
//!
//! Dataset directory (input to `prepare`):
//!
//! ```text
//! tiles/<id>.png                 RGB tile
//! annotations/<id>_mask.png      16-bit instance ids, 0 = no cell
//! annotations/<id>_classes.csv   instance_id,class
//! ```
//!
//! Prepared directory (output of `prepare`, input to everything else):
//!
//! ```text
//! manifest.csv
//! patches/<patch id>.png
//! cell_masks/<patch id>.png      CELLS patches only
//! pairs/<split>/<k>_{composite,background,mask}.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, RgbImage};

use super::{
    annotate_tile, resize_tile, AnnotatedPatch, CellAnnotation, CellClass, DatasetManifest, Group, Mask, Patch, Split, Splits,
    SyntheticPair, Tile, PATCH_SIZE, TILE_SIZE,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

type InstanceMap = ImageBuffer<Luma<u16>, Vec<u16>>;

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_rgb8())
}

fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    mask.to_gray().save(path).map_err(|source| Error::Image { path: path.into(), source })
}

fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
    Ok(Mask::from_gray(&img.to_luma8()))
}

/// Writes one annotated tile into the dataset directory layout.
pub fn write_tile(dir: &Path, tile: &Tile, annotations: &[CellAnnotation]) -> Result<()> {
    let tiles = dir.join("tiles");
    let anns = dir.join("annotations");
    mkdir(&tiles)?;
    mkdir(&anns)?;
    save_rgb(&tile.pixels, &tiles.join(format!("{}.png", tile.source_id)))?;

    let (w, h) = tile.pixels.dimensions();
    let mut ids = InstanceMap::new(w, h);
    let mut classes = String::from("instance_id,class\n");
    for a in annotations {
        if a.instance_id == 0 || a.instance_id > u16::MAX as u32 {
            return Err(Error::InvalidInput(format!("instance id {} does not fit a 16-bit mask", a.instance_id)));
        }
        for y in 0..a.mask.height() {
            for x in 0..a.mask.width() {
                if a.mask.get(x, y) {
                    ids.put_pixel(a.origin.0 + x, a.origin.1 + y, Luma([a.instance_id as u16]));
                }
            }
        }
        classes.push_str(&format!("{},{}\n", a.instance_id, a.cell_class));
    }
    let mask_path = anns.join(format!("{}_mask.png", tile.source_id));
    ids.save(&mask_path).map_err(|source| Error::Image { path: mask_path.clone(), source })?;
    let csv = anns.join(format!("{}_classes.csv", tile.source_id));
    fs::write(&csv, classes).map_err(|e| Error::io(&csv, e))
}

fn parse_classes(path: &Path) -> Result<BTreeMap<u16, CellClass>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, class) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, format!("line {}: expected instance_id,class", i + 1)))?;
        let id: u16 = id.trim().parse().map_err(|_| Error::format(path, format!("line {}: bad id {id:?}", i + 1)))?;
        let class: CellClass = class.parse().map_err(|e: Error| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.insert(id, class);
    }
    Ok(out)
}

/// Splits an instance-id raster into per-instance annotations.
fn instances(ids: &InstanceMap, classes: &BTreeMap<u16, CellClass>, origin: &Path) -> Result<Vec<CellAnnotation>> {
    let mut boxes: BTreeMap<u16, (u32, u32, u32, u32)> = BTreeMap::new();
    for (x, y, p) in ids.enumerate_pixels() {
        let id = p.0[0];
        if id == 0 {
            continue;
        }
        let b = boxes.entry(id).or_insert((x, y, x, y));
        b.0 = b.0.min(x);
        b.1 = b.1.min(y);
        b.2 = b.2.max(x);
        b.3 = b.3.max(y);
    }
    let mut out = Vec::with_capacity(boxes.len());
    for (id, (x0, y0, x1, y1)) in boxes {
        let class = *classes
            .get(&id)
            .ok_or_else(|| Error::format(origin, format!("instance {id} has no class entry")))?;
        let mut m = Mask::new(x1 - x0 + 1, y1 - y0 + 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if ids.get_pixel(x, y).0[0] == id {
                    m.set(x - x0, y - y0, true);
                }
            }
        }
        out.push(CellAnnotation::new((x0, y0), m, class, id as u32)?);
    }
    Ok(out)
}

/// Reads every tile in a dataset directory, resized to the working tile
/// size. Instance masks follow the tile with nearest-neighbour resampling.
pub fn read_dataset_dir(dir: &Path) -> Result<Vec<(Tile, Vec<CellAnnotation>)>> {
    let tiles_dir = dir.join("tiles");
    let mut names: Vec<PathBuf> = fs::read_dir(&tiles_dir)
        .map_err(|e| Error::io(&tiles_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidInput(format!("no tiles found in {}", tiles_dir.display())));
    }
    let mut out = Vec::with_capacity(names.len());
    for path in names {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let raw = Tile { pixels: load_rgb(&path)?, source_id: id.clone(), native_magnification: "unknown".into() };
        let (w, h) = raw.pixels.dimensions();
        let tile = resize_tile(&raw)?;

        let mask_path = dir.join("annotations").join(format!("{id}_mask.png"));
        let ids = image::open(&mask_path).map_err(|source| Error::Image { path: mask_path.clone(), source })?.to_luma16();
        if ids.dimensions() != (w, h) {
            return Err(Error::format(&mask_path, format!("mask is {:?} but tile is {w}x{h}", ids.dimensions())));
        }
        let ids = if w == TILE_SIZE {
            ids
        } else {
            imageops::resize(&ids, TILE_SIZE, TILE_SIZE, FilterType::Nearest)
        };
        let classes = parse_classes(&dir.join("annotations").join(format!("{id}_classes.csv")))?;
        let anns = instances(&ids, &classes, &mask_path)?;
        out.push((tile, anns));
    }
    Ok(out)
}

/// Labels all tiles into patches.
pub fn annotate_all(tiles: &[(Tile, Vec<CellAnnotation>)]) -> Result<Vec<AnnotatedPatch>> {
    let mut out = Vec::new();
    for (tile, anns) in tiles {
        out.extend(annotate_tile(tile, anns)?);
    }
    Ok(out)
}

/// Writes the manifest and the patches it lists.
pub fn write_prepared(dir: &Path, patches: &[AnnotatedPatch], manifest: &DatasetManifest, splits: &Splits<Vec<usize>>) -> Result<()> {
    mkdir(&dir.join("patches"))?;
    mkdir(&dir.join("cell_masks"))?;
    for split in Split::ALL {
        for &i in splits.get(split) {
            let p = &patches[i];
            save_rgb(&p.patch.pixels, &dir.join(p.patch.relative_path()))?;
            if p.label().group == Group::Cells {
                save_mask(&p.cell_mask, &dir.join("cell_masks").join(format!("{}.png", p.patch.id())))?;
            }
        }
    }
    manifest.write(&dir.join(MANIFEST_FILE))
}

fn patch_from_path(rel: &str) -> Result<(String, (u32, u32))> {
    let stem = Path::new(rel).file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let parse = || -> Option<(String, (u32, u32))> {
        let (rest, c) = stem.rsplit_once("_c")?;
        let (tile, r) = rest.rsplit_once("_r")?;
        Some((tile.to_string(), (r.parse().ok()?, c.parse().ok()?)))
    };
    parse().ok_or_else(|| Error::InvalidInput(format!("cannot recover tile and grid position from {rel:?}")))
}

/// A prepared directory loaded back into memory.
pub struct Prepared {
    pub patches: Vec<AnnotatedPatch>,
    pub manifest: DatasetManifest,
    pub splits: Splits<Vec<usize>>,
}

pub fn read_prepared(dir: &Path) -> Result<Prepared> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Prerequisite(format!("{} not found; run prepare first", manifest_path.display())));
    }
    let manifest = DatasetManifest::read(&manifest_path)?;
    let mut patches = Vec::with_capacity(manifest.entries.len());
    let mut splits = Splits::<Vec<usize>>::default();
    for e in &manifest.entries {
        let (tile_id, grid_position) = patch_from_path(&e.path)?;
        let pixels = load_rgb(&dir.join(&e.path))?;
        if pixels.dimensions() != (PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::format(dir.join(&e.path), format!("patch is {:?}", pixels.dimensions())));
        }
        let patch = Patch { pixels, tile_id, grid_position, label: Some(e.label) };
        let cell_mask = if e.label.group == Group::Cells {
            load_mask(&dir.join("cell_masks").join(format!("{}.png", patch.id())))?
        } else {
            Mask::new(PATCH_SIZE, PATCH_SIZE)
        };
        splits.get_mut(e.split).push(patches.len());
        patches.push(AnnotatedPatch { patch, cell_mask });
    }
    Ok(Prepared { patches, manifest, splits })
}

pub fn pairs_dir(dir: &Path, split: Split) -> PathBuf {
    dir.join("pairs").join(split.to_string())
}

pub fn write_pairs(dir: &Path, split: Split, pairs: &[SyntheticPair]) -> Result<()> {
    let out = pairs_dir(dir, split);
    if out.exists() {
        fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    mkdir(&out)?;
    for (k, p) in pairs.iter().enumerate() {
        save_rgb(&p.composite.pixels, &out.join(format!("{k:05}_composite.png")))?;
        save_rgb(&p.background.pixels, &out.join(format!("{k:05}_background.png")))?;
        save_mask(&p.salient_mask, &out.join(format!("{k:05}_mask.png")))?;
    }
    Ok(())
}

pub fn read_pairs(dir: &Path, split: Split) -> Result<Vec<SyntheticPair>> {
    let src = pairs_dir(dir, split);
    if !src.exists() {
        return Err(Error::Prerequisite(format!("{} not found; run synth-pairs first", src.display())));
    }
    let mut ks: Vec<String> = fs::read_dir(&src)
        .map_err(|e| Error::io(&src, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_composite.png")).map(str::to_string))
        .collect();
    ks.sort();
    ks.into_iter()
        .map(|k| {
            let mk = |pixels, role: &str| Patch { pixels, tile_id: format!("pair{k}_{role}"), grid_position: (0, 0), label: None };
            Ok(SyntheticPair {
                composite: mk(load_rgb(&src.join(format!("{k}_composite.png")))?, "composite"),
                background: mk(load_rgb(&src.join(format!("{k}_background.png")))?, "background"),
                salient_mask: load_mask(&src.join(format!("{k}_mask.png")))?,
            })
        })
        .collect()
}
