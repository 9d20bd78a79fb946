//! Procedural tissue-like images with nuclei masks, captions and labels, plus
//! the threshold segmenter used to extract masks from any image.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::numcore::{Rng, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 3;
pub const BLOB_OFFSET: f64 = -0.4;
pub const PIXEL_NOISE_STD: f64 = 0.02;
const BACKGROUND: [f64; 3] = [0.82, 0.64, 0.76];
const TEXTURE_AMPLITUDE: f64 = 0.06;
const MIN_GAP: f64 = 2.0;

/// Caption vocabulary. Index 0 is padding.
pub const VOCAB: [&str; 64] = [
    "<pad>", "a", "an", "the", "of", "on", "in", "with", "and", "field", "scatter", "cluster",
    "nuclei", "nucleus", "stroma", "tissue", "patch", "sparse", "medium", "dense", "fine",
    "coarse", "texture", "region", "round", "dark", "pale", "pink", "background", "few",
    "several", "many", "cells", "cell", "small", "large", "uniform", "irregular", "smooth",
    "grainy", "stained", "light", "deep", "scattered", "packed", "loose", "tight", "islands",
    "foci", "spots", "visible", "across", "throughout", "within", "near", "edge", "center",
    "mild", "moderate", "marked", "no", "one", "two", "three",
];

pub const VOCAB_SIZE: usize = VOCAB.len();

pub fn vocab_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Fine,
    Coarse,
}

impl Texture {
    pub fn word(self) -> &'static str {
        match self {
            Texture::Fine => "fine",
            Texture::Coarse => "coarse",
        }
    }
}

/// Density class for a nuclei count: 0 sparse (≤3), 1 medium (4–6), 2 dense (≥7).
pub fn density_class(count: usize) -> usize {
    match count {
        0..=3 => 0,
        4..=6 => 1,
        _ => 2,
    }
}

pub fn density_word(class: usize) -> &'static str {
    ["sparse", "medium", "dense"][class]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Blob {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.cx;
        let dy = y as f64 - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub caption_ids: Vec<usize>,
    pub label: usize,
    pub texture: Texture,
    pub blobs: Vec<Blob>,
    pub seed: u64,
}

impl SynthSample {
    pub fn caption(&self) -> String {
        caption_string(&self.caption_ids)
    }
}

pub fn caption_words(density: usize, texture: Texture) -> [&'static str; 8] {
    [
        "a",
        density_word(density),
        "scatter",
        "of",
        "nuclei",
        "on",
        texture.word(),
        "stroma",
    ]
}

/// Caption ids as a pure function of density and texture class.
pub fn caption_ids(density: usize, texture: Texture) -> Vec<usize> {
    caption_words(density, texture)
        .iter()
        .map(|w| vocab_id(w).expect("caption word in vocabulary"))
        .collect()
}

pub fn caption_string(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| VOCAB.get(i).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Rasterizes blob disks into a `[1×size×size]` binary mask.
pub fn rasterize(blobs: &[Blob], size: usize) -> Tensor {
    let mut m = Tensor::zeros(&[1, size, size]);
    for y in 0..size {
        for x in 0..size {
            if blobs.iter().any(|b| b.contains(x, y)) {
                m.data_mut()[y * size + x] = 1.0;
            }
        }
    }
    m
}

/// Latent-grid stride the disk anchors are aligned to.
const ANCHOR_STRIDE: usize = 4;

/// Anchor coordinates on one axis: block centres (`4i + 1.5`) or block
/// edges (`4i − 0.5`), restricted so a radius-`r` disk stays inside the image.
fn anchors(size: usize, r: f64, centres: bool) -> Vec<f64> {
    let offset = if centres { 1.5 } else { -0.5 };
    (0..=size / ANCHOR_STRIDE)
        .map(|i| (ANCHOR_STRIDE * i) as f64 + offset)
        .filter(|c| c - r >= -0.5 && c + r <= size as f64 - 0.5)
        .collect()
}

/// Draws a disk whose centre is aligned with the stride-4 pooling grid.
///
/// Radius 2 sits on a block centre, radius 4 on a block corner and radius 3 on
/// the midpoint of a block edge. These anchors maximise the overlap between
/// the disk and the blocks it covers by more than half, so the disk survives
/// 4× average pooling with little shape loss.
fn draw_blob(rng: &mut Rng, size: usize) -> Blob {
    let r = rng.int_inclusive(2, 4) as f64;
    let (x_centres, y_centres) = match r as i64 {
        2 => (true, true),
        4 => (false, false),
        _ => {
            let vertical = rng.below(2) == 0;
            (vertical, !vertical)
        }
    };
    let xs = anchors(size, r, x_centres);
    let ys = anchors(size, r, y_centres);
    Blob {
        cx: xs[rng.below(xs.len())],
        cy: ys[rng.below(ys.len())],
        r,
    }
}

fn place_blobs(rng: &mut Rng, count: usize, size: usize) -> Vec<Blob> {
    // Disks keep a gap of MIN_GAP pixels so each stays a separate component.
    'restart: loop {
        let mut blobs: Vec<Blob> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..200 {
                let cand = draw_blob(rng, size);
                let clear = blobs.iter().all(|b| {
                    let d = ((b.cx - cand.cx).powi(2) + (b.cy - cand.cy).powi(2)).sqrt();
                    d > b.r + cand.r + MIN_GAP
                });
                if clear {
                    blobs.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return blobs;
    }
}

fn texture_field(rng: &mut Rng, texture: Texture, size: usize) -> Vec<f64> {
    let (lo, hi) = match texture {
        Texture::Fine => (4.0, 7.0),
        Texture::Coarse => (18.0, 32.0),
    };
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = rng.uniform_range(lo, hi);
            let angle = rng.uniform_range(0.0, std::f64::consts::PI);
            let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
            (2.0 * std::f64::consts::PI / period, angle, phase)
        })
        .collect();
    let mut field = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let v: f64 = waves
                .iter()
                .map(|&(k, a, p)| (k * (x as f64 * a.cos() + y as f64 * a.sin()) + p).sin())
                .sum();
            field[y * size + x] = TEXTURE_AMPLITUDE * v / 3.0;
        }
    }
    field
}

/// Generates one sample with an explicit blob count (`1..=9` in the dataset).
pub fn gen_sample_with_count(seed: u64, count: usize) -> SynthSample {
    let root = Rng::new(seed);
    let mut layout_rng = root.split(1);
    let mut tex_rng = root.split(2);
    let mut noise_rng = root.split(3);
    let size = IMAGE_SIZE;

    let texture = if tex_rng.uniform() < 0.5 {
        Texture::Fine
    } else {
        Texture::Coarse
    };
    let blobs = place_blobs(&mut layout_rng, count, size);
    let mask = rasterize(&blobs, size);
    let field = texture_field(&mut tex_rng, texture, size);
    let mut image = Tensor::zeros(&[CHANNELS, size, size]);
    {
        let data = image.data_mut();
        for c in 0..CHANNELS {
            for p in 0..size * size {
                let mut v = BACKGROUND[c] + field[p] + BLOB_OFFSET * mask.data()[p];
                v += PIXEL_NOISE_STD * noise_rng.normal();
                data[c * size * size + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    let label = density_class(count);
    SynthSample {
        image,
        mask,
        caption_ids: caption_ids(label, texture),
        label,
        texture,
        blobs,
        seed,
    }
}

/// One sample; the blob count is drawn uniformly from `1..=9`.
pub fn gen_sample(seed: u64) -> SynthSample {
    let count = Rng::new(seed).split(0).int_inclusive(1, 9) as usize;
    gen_sample_with_count(seed, count)
}

/// Per-sample seed for index `i` of a dataset rooted at `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    Rng::new(seed).split(index as u64).next_u64()
}

pub fn gen_dataset(n: usize, seed: u64) -> Vec<SynthSample> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| gen_sample(sample_seed(seed, i)))
        .collect()
}

/// Lays out `tiles_x × tiles_y` generated samples as one large image.
pub fn gen_slide(seed: u64, tiles_x: usize, tiles_y: usize) -> (Tensor, Vec<SynthSample>) {
    let tiles = gen_dataset(tiles_x * tiles_y, seed);
    let images: Vec<Tensor> = tiles.iter().map(|s| s.image.clone()).collect();
    let slide = assemble_patches(&images, tiles_y, tiles_x).expect("uniform tiles");
    (slide, tiles)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Channel-mean intensity of a `[c×H×W]` image.
pub fn grayscale(image: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let [c, h, w] = image.shape() else {
        return shape_err(format!("expected [c×H×W], got {:?}", image.shape()));
    };
    let (c, h, w) = (*c, *h, *w);
    let plane = h * w;
    let mut g = vec![0.0; plane];
    for ch in 0..c {
        for (gv, v) in g.iter_mut().zip(&image.data()[ch * plane..(ch + 1) * plane]) {
            *gv += v / c as f64;
        }
    }
    Ok((g, h, w))
}

/// 3×3 median filter with edge clamping.
pub fn median_filter3(gray: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut win = [0.0; 9];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    win[k] = gray[yy * w + xx];
                    k += 1;
                }
            }
            out[y * w + x] = median(&mut win);
        }
    }
    out
}

/// Nuclei segmentation: 3×3 median filter, then threshold at
/// `background median - 0.2`.
pub fn segment_oracle(image: &Tensor) -> Result<Tensor> {
    let (gray, h, w) = grayscale(image)?;
    let filtered = median_filter3(&gray, h, w);
    let mut sorted = filtered.clone();
    let threshold = median(&mut sorted) - 0.2;
    let data = filtered
        .iter()
        .map(|&v| if v < threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// Number of 4-connected foreground components of a `[1×H×W]` (or `[H×W]`) mask.
pub fn count_components(mask: &Tensor) -> usize {
    let shape = mask.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if data[start] < 0.5 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if data[q] >= 0.5 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
    }
    count
}

/// Splits a `[c×H×W]` image into non-overlapping patches in row-major order.
pub fn split_patches(image: &Tensor, patch_h: usize, patch_w: usize) -> Result<Vec<Tensor>> {
    let [c, h, w] = image.shape() else {
        return shape_err(format!("expected [c×H×W], got {:?}", image.shape()));
    };
    let (c, h, w) = (*c, *h, *w);
    if patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0 {
        return shape_err(format!(
            "image {h}×{w} is not divisible into {patch_h}×{patch_w} patches"
        ));
    }
    let mut out = Vec::with_capacity((h / patch_h) * (w / patch_w));
    for py in 0..h / patch_h {
        for px in 0..w / patch_w {
            let mut data = Vec::with_capacity(c * patch_h * patch_w);
            for ch in 0..c {
                for y in 0..patch_h {
                    let row = ch * h * w + (py * patch_h + y) * w + px * patch_w;
                    data.extend_from_slice(&image.data()[row..row + patch_w]);
                }
            }
            out.push(Tensor::new(&[c, patch_h, patch_w], data)?);
        }
    }
    Ok(out)
}

/// Inverse of [`split_patches`] for a `rows × cols` grid.
pub fn assemble_patches(patches: &[Tensor], rows: usize, cols: usize) -> Result<Tensor> {
    if patches.len() != rows * cols || patches.is_empty() {
        return contract_err(format!(
            "{} patches do not fill a {rows}×{cols} grid",
            patches.len()
        ));
    }
    let [c, ph, pw] = patches[0].shape() else {
        return shape_err("patches must be [c×h×w]");
    };
    let (c, ph, pw) = (*c, *ph, *pw);
    let (h, w) = (rows * ph, cols * pw);
    let mut out = Tensor::zeros(&[c, h, w]);
    for (i, p) in patches.iter().enumerate() {
        if p.shape() != [c, ph, pw] {
            return shape_err("patches differ in shape");
        }
        let (py, px) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..ph {
                let dst = ch * h * w + (py * ph + y) * w + px * pw;
                let src = ch * ph * pw + y * pw;
                out.data_mut()[dst..dst + pw].copy_from_slice(&p.data()[src..src + pw]);
            }
        }
    }
    Ok(out)
}
