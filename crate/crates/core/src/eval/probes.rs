//! Latent swaps, interpolations, montages and the downstream transfer task.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};

use crate::data::{generate_downstream_set, DownstreamClass};
use crate::error::{Error, Result};
use crate::eval::metrics::{SoftmaxProbe, PROBE_L2};
use crate::networks::{map_to_image, Encoder, LatentCode, NetworkBundle};
use crate::tensor::Map;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Salient,
    Background,
    Both,
}

impl Space {
    pub const ALL: [Space; 3] = [Space::Salient, Space::Background, Space::Both];
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Salient => "SALIENT",
            Space::Background => "BACKGROUND",
            Space::Both => "BOTH",
        })
    }
}

impl FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SALIENT" => Ok(Space::Salient),
            "BACKGROUND" => Ok(Space::Background),
            "BOTH" => Ok(Space::Both),
            _ => Err(Error::InvalidInput(format!("unknown latent space {s:?}"))),
        }
    }
}

/// Which network renders codes back into images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodePath {
    Gan,
    Vae,
}

pub fn decode(nets: &NetworkBundle<f32>, code: &LatentCode<f32>, path: DecodePath) -> Result<Map<f32>> {
    match path {
        DecodePath::Gan => nets.gan_generate(code),
        DecodePath::Vae => nets.decode_image(code),
    }
}

#[derive(Clone, Debug)]
pub struct SwapGrid {
    pub originals: [Map<f32>; 2],
    pub reconstructions: [Map<f32>; 2],
    /// `swapped[0]` keeps A's background with B's salient code; `swapped[1]`
    /// the reverse.
    pub swapped: [Map<f32>; 2],
}

pub fn latent_swap(x_a: &Map<f32>, x_b: &Map<f32>, nets: &NetworkBundle<f32>, path: DecodePath) -> Result<SwapGrid> {
    if x_a.shape() != x_b.shape() {
        return Err(Error::shape("swap images", format!("{:?}", x_a.shape()), format!("{:?}", x_b.shape())));
    }
    let a = nets.mean_code(x_a)?;
    let b = nets.mean_code(x_b)?;
    let ab = LatentCode { s: b.s.clone(), z: a.z.clone() };
    let ba = LatentCode { s: a.s.clone(), z: b.z.clone() };
    Ok(SwapGrid {
        originals: [x_a.clone(), x_b.clone()],
        reconstructions: [decode(nets, &a, path)?, decode(nets, &b, path)?],
        swapped: [decode(nets, &ab, path)?, decode(nets, &ba, path)?],
    })
}

fn lerp(a: &[f32], b: &[f32], t: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| (1.0 - t) * x + t * y).collect()
}

/// Codes along the straight line from A to B in the chosen space. The other
/// space stays at A's code.
pub fn interpolate_codes(a: &LatentCode<f32>, b: &LatentCode<f32>, steps: usize, space: Space) -> Result<Vec<LatentCode<f32>>> {
    if steps < 2 {
        return Err(Error::InvalidInput(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    Ok((0..steps)
        .map(|i| {
            let t = i as f32 / (steps - 1) as f32;
            let s = if space == Space::Background { a.s.clone() } else { lerp(&a.s, &b.s, t) };
            let z = if space == Space::Salient { a.z.clone() } else { lerp(&a.z, &b.z, t) };
            LatentCode { s, z }
        })
        .collect())
}

pub fn interpolate(
    x_a: &Map<f32>,
    x_b: &Map<f32>,
    steps: usize,
    space: Space,
    nets: &NetworkBundle<f32>,
    path: DecodePath,
) -> Result<Vec<Map<f32>>> {
    let a = nets.mean_code(x_a)?;
    let b = nets.mean_code(x_b)?;
    interpolate_codes(&a, &b, steps, space)?.iter().map(|c| decode(nets, c, path)).collect()
}

const GAP: u32 = 2;

/// Images laid out row by row on a white canvas.
pub fn montage(rows: &[Vec<&Map<f32>>]) -> Result<RgbImage> {
    let first = rows.iter().flatten().next().ok_or_else(|| Error::InvalidInput("empty montage".into()))?;
    let (c, h, w) = first.shape();
    if c != 3 {
        return Err(Error::shape("montage image channels", 3, c));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (h, w) = (h as u32, w as u32);
    let mut canvas = RgbImage::from_pixel(cols * (w + GAP) + GAP, rows.len() as u32 * (h + GAP) + GAP, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (k, m) in row.iter().enumerate() {
            if m.shape() != (3, h as usize, w as usize) {
                return Err(Error::shape("montage tile", format!("(3, {h}, {w})"), format!("{:?}", m.shape())));
            }
            let px = map_to_image(m);
            let (x0, y0) = (GAP + k as u32 * (w + GAP), GAP + r as u32 * (h + GAP));
            for y in 0..h {
                for x in 0..w {
                    let i = ((y * w + x) * 3) as usize;
                    canvas.put_pixel(x0 + x, y0 + y, Rgb([px[i], px[i + 1], px[i + 2]]));
                }
            }
        }
    }
    Ok(canvas)
}

/// Originals, reconstructions and swaps as three columns, one row per image.
pub fn swap_montage(g: &SwapGrid) -> Result<RgbImage> {
    montage(&[
        vec![&g.originals[0], &g.reconstructions[0], &g.swapped[0]],
        vec![&g.originals[1], &g.reconstructions[1], &g.swapped[1]],
    ])
}

fn features(encoder: &Encoder<f32>, images: &[Map<f32>]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|x| Ok(encoder.encode(x)?.mean.iter().map(|&v| v as f64).collect())).collect()
}

/// Fits a linear head on frozen salient means of `train` and returns its
/// accuracy on `test`.
pub fn downstream_finetune(
    encoder: &Encoder<f32>,
    train: &[(Map<f32>, usize)],
    test: &[(Map<f32>, usize)],
    classes: usize,
) -> Result<f64> {
    let (xs, ys): (Vec<Map<f32>>, Vec<usize>) = train.iter().cloned().unzip();
    let head = SoftmaxProbe::fit(&features(encoder, &xs)?, &ys, classes, PROBE_L2)?;
    let (xt, yt): (Vec<Map<f32>>, Vec<usize>) = test.iter().cloned().unzip();
    for c in 0..classes {
        if !yt.contains(&c) {
            return Err(Error::InvalidInput(format!("downstream test set lacks class {c}")));
        }
    }
    Ok(head.accuracy(&features(encoder, &xt)?, &yt))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DownstreamResult {
    pub accuracy: f64,
    /// Same head on the salient encoder at its initial random weights.
    pub control_accuracy: f64,
}

/// The three-class transfer task on freshly generated toy patches: `per_class`
/// training and `per_class` test patches of each class.
pub fn downstream_transfer(nets: &NetworkBundle<f32>, per_class: usize, seed: u64) -> Result<DownstreamResult> {
    let set = generate_downstream_set(2 * per_class, seed)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen = [0usize; 3];
    for (p, class) in &set {
        let k = class.index();
        let item = (p.to_map(), k);
        if seen[k] < per_class {
            train.push(item);
        } else {
            test.push(item);
        }
        seen[k] += 1;
    }
    let classes = DownstreamClass::ALL.len();
    let control = NetworkBundle::<f32>::new(nets.config.clone())?;
    Ok(DownstreamResult {
        accuracy: downstream_finetune(&nets.salient_encoder, &train, &test, classes)?,
        control_accuracy: downstream_finetune(&control.salient_encoder, &train, &test, classes)?,
    })
}
