use image::imageops::{self, FilterType};
use image::RgbImage;

use super::{Patch, Tile, PATCH_SIZE, TILE_SIZE};
use crate::error::{Error, Result};

/// Resizes a square tile to `TILE_SIZE`×`TILE_SIZE` with bilinear
/// interpolation. Tiles already at that size are returned untouched.
pub fn resize_tile(tile: &Tile) -> Result<Tile> {
    let (w, h) = tile.pixels.dimensions();
    if w != h || w == 0 {
        return Err(Error::InvalidInput(format!("tile {} is {w}x{h}; tiles must be square", tile.source_id)));
    }
    if w == TILE_SIZE {
        return Ok(tile.clone());
    }
    Ok(Tile {
        pixels: imageops::resize(&tile.pixels, TILE_SIZE, TILE_SIZE, FilterType::Triangle),
        source_id: tile.source_id.clone(),
        native_magnification: tile.native_magnification.clone(),
    })
}

/// Cuts a square tile into non-overlapping `PATCH_SIZE` patches, row-major.
pub fn extract_patches(tile: &Tile) -> Result<Vec<Patch>> {
    let (w, h) = tile.pixels.dimensions();
    if w != h {
        return Err(Error::InvalidInput(format!("tile {} is {w}x{h}; tiles must be square", tile.source_id)));
    }
    if w == 0 || w % PATCH_SIZE != 0 {
        return Err(Error::InvalidInput(format!(
            "tile {} side {w} is not a multiple of {PATCH_SIZE}; resize it first",
            tile.source_id
        )));
    }
    let n = w / PATCH_SIZE;
    let mut out = Vec::with_capacity((n * n) as usize);
    for row in 0..n {
        for col in 0..n {
            let view = imageops::crop_imm(&tile.pixels, col * PATCH_SIZE, row * PATCH_SIZE, PATCH_SIZE, PATCH_SIZE);
            out.push(Patch {
                pixels: view.to_image(),
                tile_id: tile.source_id.clone(),
                grid_position: (row, col),
                label: None,
            });
        }
    }
    Ok(out)
}

/// Places patches back at their grid positions on a `side`×`side` canvas.
pub fn assemble_patches(patches: &[Patch], side: u32) -> RgbImage {
    let mut out = RgbImage::new(side, side);
    for p in patches {
        let (row, col) = p.grid_position;
        imageops::replace(&mut out, &p.pixels, (col * PATCH_SIZE) as i64, (row * PATCH_SIZE) as i64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_tile(side: u32, seed: u64) -> Tile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = RgbImage::from_fn(side, side, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        Tile { pixels, source_id: format!("t{seed}"), native_magnification: "40x".into() }
    }

    #[test]
    fn full_tile_gives_8x8_grid_in_row_major_order() {
        let patches = extract_patches(&noise_tile(1024, 1)).unwrap();
        assert_eq!(patches.len(), 64);
        for (i, p) in patches.iter().enumerate() {
            assert_eq!(p.grid_position, ((i / 8) as u32, (i % 8) as u32));
            assert_eq!(p.pixels.dimensions(), (128, 128));
        }
    }

    #[test]
    fn patch_sized_tile_is_identity() {
        let t = noise_tile(128, 2);
        let patches = extract_patches(&t).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].pixels, t.pixels);
    }

    #[test]
    fn reassembly_reproduces_tile() {
        let t = noise_tile(256, 3);
        let patches = extract_patches(&t).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(assemble_patches(&patches, 256), t.pixels);
    }

    #[test]
    fn non_square_or_unaligned_tiles_are_rejected() {
        let mut t = noise_tile(128, 4);
        t.pixels = RgbImage::new(256, 128);
        assert!(extract_patches(&t).is_err());
        assert!(resize_tile(&t).is_err());
        assert!(extract_patches(&noise_tile(200, 5)).is_err());
    }

    #[test]
    fn resize_brings_tiles_to_1024() {
        let t = resize_tile(&noise_tile(100, 6)).unwrap();
        assert_eq!(t.pixels.dimensions(), (1024, 1024));
        assert_eq!(extract_patches(&t).unwrap().len(), 64);
        let same = noise_tile(1024, 7);
        assert_eq!(resize_tile(&same).unwrap().pixels, same.pixels);
    }
}
