//! Patch extraction, labeling, copy-paste synthesis, the procedural toy
//! benchmark, and balanced splits.

mod copy_paste;
mod labeling;
pub mod layout;
mod manifest;
mod tiling;
pub mod toy;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::image_to_map;
use crate::tensor::{Map, Scalar};

pub use copy_paste::{make_copy_paste_pair, synthesize_pairs, CopyPasteOptions};
pub use labeling::{label_from_stats, label_patch, patch_cell_mask};
pub use manifest::{split_balanced, DatasetManifest, ManifestEntry, SplitRatios, MANIFEST_HEADER, MANIFEST_PREAMBLE};
pub use tiling::{assemble_patches, extract_patches, resize_tile};
pub use toy::{generate_downstream_set, generate_toy_dataset, render_toy_tiles, DownstreamClass, ToyConfig, ToyDataset};

pub const PATCH_SIZE: u32 = 128;
pub const TILE_SIZE: u32 = 1024;
/// Cell-area ratio above which a patch counts as CELLS (strict).
pub const CELL_RATIO_THRESHOLD: f64 = 0.10;
/// TIL instance count at or above which a CELLS patch counts as HIGH.
pub const HIGH_TIL_COUNT: u32 = 5;
/// Interpolation used when tiles are resized to [`TILE_SIZE`].
pub const RESIZE_KERNEL: &str = "bilinear";

/// Binary image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; (width * height) as usize] }
    }

    pub fn filled(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![true; (width * height) as usize] }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != (width * height) as usize {
            return Err(Error::shape("mask bits", width * height, bits.len()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[(y * self.width + x) as usize] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// Single-channel map holding 1 inside the mask and 0 elsewhere.
    pub fn to_map<T: Scalar>(&self) -> Map<T> {
        Map::from_vec(
            1,
            self.height as usize,
            self.width as usize,
            self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
    }

    pub fn to_gray(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width, self.height, |x, y| image::Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    pub fn from_gray(img: &image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self { width: w, height: h, bits: img.pixels().map(|p| p.0[0] >= 128).collect() }
    }
}

/// A source image with provenance. Pixels are 8-bit RGB.
#[derive(Clone, Debug)]
pub struct Tile {
    pub pixels: RgbImage,
    pub source_id: String,
    /// Carried through for provenance, never interpreted.
    pub native_magnification: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellClass {
    Til,
    Other,
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellClass::Til => "TIL",
            CellClass::Other => "OTHER",
        })
    }
}

impl FromStr for CellClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TIL" | "LYMPHOCYTE" => Ok(CellClass::Til),
            "OTHER" => Ok(CellClass::Other),
            other => Err(Error::InvalidInput(format!("unknown cell class {other:?}"))),
        }
    }
}

/// One annotated cell: a binary region whose top-left corner sits at
/// `origin` in tile coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CellAnnotation {
    pub origin: (u32, u32),
    pub mask: Mask,
    pub cell_class: CellClass,
    pub instance_id: u32,
}

impl CellAnnotation {
    pub fn new(origin: (u32, u32), mask: Mask, cell_class: CellClass, instance_id: u32) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::InvalidInput(format!("cell instance {instance_id} has an empty mask")));
        }
        Ok(Self { origin, mask, cell_class, instance_id })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Cells,
    Background,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Cells => "CELLS",
            Group::Background => "BACKGROUND",
        })
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CELLS" => Ok(Group::Cells),
            "BACKGROUND" => Ok(Group::Background),
            other => Err(Error::InvalidInput(format!("unknown group {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Density {
    High,
    Low,
    NotApplicable,
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Density::High => "HIGH",
            Density::Low => "LOW",
            Density::NotApplicable => "NA",
        })
    }
}

impl FromStr for Density {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HIGH" => Ok(Density::High),
            "LOW" => Ok(Density::Low),
            "NA" => Ok(Density::NotApplicable),
            other => Err(Error::InvalidInput(format!("unknown density {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchLabel {
    pub group: Group,
    pub cell_area_ratio: f64,
    pub til_count: u32,
    pub density: Density,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

/// A 128×128 crop with provenance and (once labeled) its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: RgbImage,
    pub tile_id: String,
    /// `(row, col)` in the tile's patch grid.
    pub grid_position: (u32, u32),
    pub label: Option<PatchLabel>,
}

impl Patch {
    /// Stable identifier used for file names and manifest paths.
    pub fn id(&self) -> String {
        format!("{}_r{}_c{}", self.tile_id, self.grid_position.0, self.grid_position.1)
    }

    pub fn relative_path(&self) -> String {
        format!("patches/{}.png", self.id())
    }

    pub fn group(&self) -> Option<Group> {
        self.label.map(|l| l.group)
    }

    pub fn density(&self) -> Option<Density> {
        self.label.map(|l| l.density)
    }

    pub fn to_map<T: Scalar>(&self) -> Map<T> {
        let (w, h) = self.pixels.dimensions();
        debug_assert_eq!(w, h);
        image_to_map(self.pixels.as_raw(), 3, h as usize)
    }
}

/// A labeled patch together with the union of its cell masks.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedPatch {
    pub patch: Patch,
    pub cell_mask: Mask,
}

impl AnnotatedPatch {
    pub fn label(&self) -> PatchLabel {
        self.patch.label.expect("annotated patches are labeled")
    }
}

/// Composite (cells pasted onto a clean background), that background, and
/// the pasted region.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub composite: Patch,
    pub background: Patch,
    pub salient_mask: Mask,
}

/// Cuts a tile into patches and labels each one from the tile's annotations.
pub fn annotate_tile(tile: &Tile, annotations: &[CellAnnotation]) -> Result<Vec<AnnotatedPatch>> {
    let side = tile.pixels.width();
    for a in annotations {
        if a.origin.0 + a.mask.width() > side || a.origin.1 + a.mask.height() > side {
            return Err(Error::InvalidInput(format!(
                "cell instance {} extends past tile {} ({side}px)",
                a.instance_id, tile.source_id
            )));
        }
    }
    Ok(extract_patches(tile)?
        .into_iter()
        .map(|mut patch| {
            let (cell_mask, tils) = patch_cell_mask(patch.grid_position, annotations);
            let ratio = cell_mask.area() as f64 / (PATCH_SIZE * PATCH_SIZE) as f64;
            patch.label = Some(label_from_stats(ratio, tils));
            AnnotatedPatch { patch, cell_mask }
        })
        .collect())
}

/// Derives an independent seed from a base seed and two indices.
pub(crate) fn sub_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut x = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the train/val/test assignment for a dataset seed.
pub fn split_seed(seed: u64) -> u64 {
    sub_seed(seed, 7, 7)
}

/// Seed of the pair synthesis inside one split.
pub fn pairs_seed(seed: u64, split: Split) -> u64 {
    let n = Split::ALL.iter().position(|&s| s == split).unwrap_or(0);
    sub_seed(seed, 11, n as u64)
}

/// One value per split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

impl<T> Splits<T> {
    pub fn get(&self, split: Split) -> &T {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut T {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}
