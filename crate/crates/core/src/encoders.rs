//! Frozen seeded encoders for the four conditioning modalities.
//!
//! None of these tensors are trainable. Each encoder is a pure function of its
//! seed and input, so repeated calls are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::numcore::{matmul, Rng, Tensor};
use crate::synthdata::grayscale;

/// Spatial stride of the image and layout autoencoders.
pub const VAE_STRIDE: usize = 4;
/// Width of the appearance feature vector.
pub const VISUAL_FEATURES: usize = 16;
pub const MAX_CAPTION_LEN: usize = 64;
/// Side in pixels of the aligned blocks the step histogram is taken within.
pub const TEXTURE_BLOCK: usize = 2 * VAE_STRIDE;
const HIST_EDGES: [f64; 9] = [0.005, 0.01, 0.02, 0.03, 0.05, 0.08, 0.12, 0.2, 0.3];
/// Image latents are centred on mid-grey before projection.
const PIXEL_CENTER: f64 = 0.5;
const LATENT_GAIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Layout,
    Embedding,
}

/// Tokens of one modality, `[n × d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub modality: Modality,
    pub tokens: Tensor,
    /// Patch grid `(rows, cols)` for spatial streams.
    pub grid: Option<(usize, usize)>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateEncoderParams {
    pub seed: u64,
    pub vocab_size: usize,
    pub d_model: usize,
    pub latent_channels: usize,
    pub patch_size: usize,
}

impl Default for SurrogateEncoderParams {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            vocab_size: crate::synthdata::VOCAB_SIZE,
            d_model: 32,
            latent_channels: 4,
            patch_size: 2,
        }
    }
}

/// Standard sinusoidal signal: `sin` on the first half, `cos` on the second.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// Sin/cos code for a position on a short axis, with frequencies evenly spaced
/// in `(0, π)`. Geometric frequencies waste most of the width on a 4-cell axis;
/// these keep distinct cells close to orthogonal.
pub fn axis_sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = std::f64::consts::PI * (i + 1) as f64 / (half + 1) as f64;
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// 2-D signal for a `rows × cols` patch grid: row code in the first half of the
/// width, column code in the second.
pub fn grid_position_signal(rows: usize, cols: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            data.extend(axis_sinusoid(r as f64, half));
            data.extend(axis_sinusoid(c as f64, dim - half));
        }
    }
    Tensor::new(&[rows * cols, dim], data).unwrap()
}

/// Average-pools each channel of `[c×H×W]` over `stride×stride` blocks.
pub fn avg_pool(x: &Tensor, stride: usize) -> Result<Tensor> {
    let [c, h, w] = x.shape() else {
        return shape_err(format!("expected [c×H×W], got {:?}", x.shape()));
    };
    let (c, h, w) = (*c, *h, *w);
    if h % stride != 0 || w % stride != 0 {
        return shape_err(format!("{h}×{w} is not divisible by stride {stride}"));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let inv = 1.0 / (stride * stride) as f64;
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                out.data_mut()[ch * oh * ow + (y / stride) * ow + x_ / stride] +=
                    x.data()[ch * h * w + y * w + x_] * inv;
            }
        }
    }
    Ok(out)
}

/// Applies `out[o] = Σ_i w[o][i]·(x[i] − center)` at every pixel.
fn channel_project(x: &Tensor, w: &Tensor, center: f64) -> Result<Tensor> {
    let [c, h, wd] = x.shape() else {
        return shape_err("expected [c×H×W]");
    };
    let (c, plane) = (*c, h * wd);
    let (out_c, in_c) = w.dims2()?;
    if in_c != c {
        return shape_err(format!("projection {:?} vs {c} channels", w.shape()));
    }
    let centered = Tensor::new(&[c, plane], x.data().iter().map(|v| v - center).collect())?;
    let y = matmul(w, &centered)?;
    debug_assert_eq!(y.shape(), [out_c, plane]);
    y.reshape(&[out_c, *h, *wd])
}

/// Extracts `p×p` patches of a `[c×H×W]` latent as rows of `c·p²` values,
/// ordered channel-major within each patch and row-major over the grid.
pub fn extract_patches(latent: &Tensor, p: usize) -> Result<(Tensor, (usize, usize))> {
    let [c, h, w] = latent.shape() else {
        return shape_err(format!("expected [c×H×W], got {:?}", latent.shape()));
    };
    let (c, h, w) = (*c, *h, *w);
    if p == 0 || h % p != 0 || w % p != 0 {
        return shape_err(format!("latent {h}×{w} is not divisible by patch size {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    let width = c * p * p;
    let mut data = Vec::with_capacity(gh * gw * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        data.push(latent.data()[ch * h * w + (gy * p + y) * w + gx * p + x]);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[gh * gw, width], data)?, (gh, gw)))
}

/// Inverse of [`extract_patches`].
pub fn fold_patches(
    rows: &Tensor,
    channels: usize,
    grid: (usize, usize),
    p: usize,
) -> Result<Tensor> {
    let (n, width) = rows.dims2()?;
    let (gh, gw) = grid;
    if n != gh * gw || width != channels * p * p {
        return shape_err(format!(
            "cannot fold {:?} into {channels} channels on a {gh}×{gw} grid of {p}×{p} patches",
            rows.shape()
        ));
    }
    let (h, w) = (gh * p, gw * p);
    let mut out = Tensor::zeros(&[channels, h, w]);
    let mut k = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..channels {
                for y in 0..p {
                    for x in 0..p {
                        out.data_mut()[ch * h * w + (gy * p + y) * w + gx * p + x] = rows.data()[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch tokenizer: raw patches followed by a frozen linear map.
#[derive(Clone, Debug)]
pub struct Patchifier {
    pub patch_size: usize,
    pub channels: usize,
    /// `[c·p² × d]`; `None` means the identity (`d = c·p²`).
    pub projection: Option<Tensor>,
}

impl Patchifier {
    pub fn identity(channels: usize, patch_size: usize) -> Self {
        Self {
            patch_size,
            channels,
            projection: None,
        }
    }

    pub fn seeded(rng: &mut Rng, channels: usize, patch_size: usize, d_model: usize) -> Self {
        let width = channels * patch_size * patch_size;
        let proj = rng.normal_scaled(&[width, d_model], 1.0 / (width as f64).sqrt());
        Self {
            patch_size,
            channels,
            projection: Some(proj),
        }
    }

    pub fn patchify(&self, latent: &Tensor, modality: Modality) -> Result<TokenStream> {
        if latent.shape().first() != Some(&self.channels) {
            return shape_err(format!(
                "patchify expects {} channels, got {:?}",
                self.channels,
                latent.shape()
            ));
        }
        let (raw, grid) = extract_patches(latent, self.patch_size)?;
        let tokens = match &self.projection {
            Some(w) => matmul(&raw, w)?,
            None => raw,
        };
        Ok(TokenStream {
            modality,
            tokens,
            grid: Some(grid),
        })
    }

    /// Only defined for the identity configuration.
    pub fn unpatchify(&self, stream: &TokenStream) -> Result<Tensor> {
        if self.projection.is_some() {
            return contract_err("unpatchify requires the identity projection");
        }
        let grid = stream
            .grid
            .ok_or_else(|| Error::Contract("stream has no patch grid".into()))?;
        fold_patches(&stream.tokens, self.channels, grid, self.patch_size)
    }
}

/// Pool-and-project autoencoder surrogate for images.
#[derive(Clone, Debug)]
pub struct ImageAutoencoder {
    /// `[latent_channels × 3]`.
    pub projection: Tensor,
    /// Left inverse of `projection`, `[3 × latent_channels]`.
    pub inverse: Tensor,
}

fn pseudo_inverse_tall(w: &Tensor) -> Result<Tensor> {
    // (WᵀW)⁻¹ Wᵀ for a full-column-rank W with few columns
    let wt = crate::numcore::transpose(w)?;
    let gram = matmul(&wt, w)?;
    let inv = invert_small(&gram)?;
    matmul(&inv, &wt)
}

fn invert_small(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2()?;
    if n != m {
        return shape_err("invert_small needs a square matrix");
    }
    let mut aug = vec![0.0; n * 2 * n];
    for i in 0..n {
        for j in 0..n {
            aug[i * 2 * n + j] = a.data()[i * n + j];
        }
        aug[i * 2 * n + n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| {
                aug[x * 2 * n + col]
                    .abs()
                    .partial_cmp(&aug[y * 2 * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if aug[pivot * 2 * n + col].abs() < 1e-12 {
            return Err(Error::Numeric("singular projection".into()));
        }
        for k in 0..2 * n {
            aug.swap(col * 2 * n + k, pivot * 2 * n + k);
        }
        let d = aug[col * 2 * n + col];
        for k in 0..2 * n {
            aug[col * 2 * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r * 2 * n + col];
                for k in 0..2 * n {
                    aug[r * 2 * n + k] -= f * aug[col * 2 * n + k];
                }
            }
        }
    }
    let data = (0..n)
        .flat_map(|i| aug[i * 2 * n + n..(i + 1) * 2 * n].to_vec())
        .collect();
    Tensor::new(&[n, n], data)
}

impl ImageAutoencoder {
    pub fn new(rng: &mut Rng, in_channels: usize, latent_channels: usize) -> Result<Self> {
        let projection = rng.normal_scaled(
            &[latent_channels, in_channels],
            LATENT_GAIN / (in_channels as f64).sqrt(),
        );
        let inverse = pseudo_inverse_tall(&projection)?;
        Ok(Self {
            projection,
            inverse,
        })
    }

    /// Strided average pool followed by the frozen channel projection.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let pooled = avg_pool(image, VAE_STRIDE)?;
        channel_project(&pooled, &self.projection, PIXEL_CENTER)
    }

    /// Inverse projection followed by nearest-neighbour upsampling.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let small = channel_project(latent, &self.inverse, 0.0)?;
        let [c, h, w] = small.shape() else { unreachable!() };
        let (c, h, w) = (*c, *h, *w);
        let (oh, ow) = (h * VAE_STRIDE, w * VAE_STRIDE);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out.data_mut()[ch * oh * ow + y * ow + x] =
                        small.data()[ch * h * w + (y / VAE_STRIDE) * w + x / VAE_STRIDE] + PIXEL_CENTER;
                }
            }
        }
        Ok(out)
    }
}

/// Bundle of every frozen encoder used by the denoiser.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub params: SurrogateEncoderParams,
    pub image_vae: ImageAutoencoder,
    pub image_patches: Patchifier,
    /// `[latent_channels × 1]`.
    pub layout_projection: Tensor,
    pub layout_patches: Patchifier,
    /// `[vocab × d]`.
    pub text_table: Tensor,
    /// `[VISUAL_FEATURES × d]`.
    pub visual_projection: Tensor,
}

impl Encoders {
    pub fn new(params: SurrogateEncoderParams) -> Result<Self> {
        if params.d_model == 0 || params.latent_channels == 0 || params.patch_size == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let root = Rng::new(params.seed);
        let c = params.latent_channels;
        let d = params.d_model;
        let image_vae = ImageAutoencoder::new(&mut root.split(1), 3, c)?;
        let image_patches = Patchifier::seeded(&mut root.split(2), c, params.patch_size, d);
        let layout_projection = root.split(3).normal_scaled(&[c, 1], LATENT_GAIN);
        let layout_patches = Patchifier::seeded(&mut root.split(4), c, params.patch_size, d);
        let text_table = root.split(5).normal_scaled(&[params.vocab_size, d], 1.0);
        let visual_projection = root.split(6).normal_scaled(&[VISUAL_FEATURES, d], 1.0);
        Ok(Self {
            params,
            image_vae,
            image_patches,
            layout_projection,
            layout_patches,
            text_table,
            visual_projection,
        })
    }

    /// Every frozen tensor, by name.
    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("enc.image_vae.projection".to_string(), &self.image_vae.projection),
            ("enc.image_vae.inverse".to_string(), &self.image_vae.inverse),
            ("enc.layout.projection".to_string(), &self.layout_projection),
            ("enc.text.table".to_string(), &self.text_table),
            ("enc.visual.projection".to_string(), &self.visual_projection),
        ];
        if let Some(p) = &self.image_patches.projection {
            v.push(("enc.image_patches.projection".to_string(), p));
        }
        if let Some(p) = &self.layout_patches.projection {
            v.push(("enc.layout_patches.projection".to_string(), p));
        }
        v
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        self.image_vae.encode(image)
    }

    pub fn decode_latent(&self, latent: &Tensor) -> Result<Tensor> {
        self.image_vae.decode(latent)
    }

    /// Image tokens of a latent (before any positional signal).
    pub fn patchify_latent(&self, latent: &Tensor) -> Result<TokenStream> {
        self.image_patches.patchify(latent, Modality::Image)
    }

    /// Layout latent `[c×h×w]` of a binary mask.
    pub fn layout_latent(&self, mask: &Tensor) -> Result<Tensor> {
        if mask.shape().len() != 3 || mask.shape()[0] != 1 {
            return shape_err(format!("layout mask must be [1×H×W], got {:?}", mask.shape()));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return contract_err("layout mask entries must be 0 or 1");
        }
        let pooled = avg_pool(mask, VAE_STRIDE)?;
        channel_project(&pooled, &self.layout_projection, 0.0)
    }

    pub fn encode_layout(&self, mask: &Tensor) -> Result<TokenStream> {
        let latent = self.layout_latent(mask)?;
        self.layout_patches.patchify(&latent, Modality::Layout)
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<TokenStream> {
        if ids.is_empty() || ids.len() > MAX_CAPTION_LEN {
            return contract_err(format!(
                "caption length {} outside 1..={MAX_CAPTION_LEN}",
                ids.len()
            ));
        }
        let d = self.params.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= self.params.vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: self.params.vocab_size,
                });
            }
            let pe = sinusoid(pos as f64, d);
            data.extend(self.text_table.row_slice(id).iter().zip(&pe).map(|(a, b)| a + b));
        }
        Ok(TokenStream {
            modality: Modality::Text,
            tokens: Tensor::new(&[ids.len(), d], data)?,
            grid: None,
        })
    }

    /// Appearance tokens: one token per global statistic.
    pub fn encode_visual(&self, image: &Tensor) -> Result<TokenStream> {
        let f = visual_features(image)?;
        let d = self.params.d_model;
        let mut data = Vec::with_capacity(VISUAL_FEATURES * d);
        for (k, fk) in f.iter().enumerate() {
            data.extend(self.visual_projection.row_slice(k).iter().map(|u| fk * u));
        }
        Ok(TokenStream {
            modality: Modality::Embedding,
            tokens: Tensor::new(&[VISUAL_FEATURES, d], data)?,
            grid: None,
        })
    }
}

/// Spatially global appearance statistics of a `[3×H×W]` image, measured at
/// latent-cell resolution (after `VAE_STRIDE` average pooling): channel means,
/// channel variances and a histogram of absolute grey-level steps between
/// cells inside aligned `TEXTURE_BLOCK`-pixel blocks. Nothing here depends on
/// where a block sits, so permuting aligned blocks (or mirroring) leaves it
/// unchanged, and an image and its autoencoder reconstruction agree exactly.
pub fn visual_features(image: &Tensor) -> Result<Vec<f64>> {
    let [c, h, w] = image.shape() else {
        return shape_err(format!("expected [c×H×W], got {:?}", image.shape()));
    };
    let (c, h, w) = (*c, *h, *w);
    if c != 3 {
        return shape_err(format!("visual encoder expects 3 channels, got {c}"));
    }
    if h % TEXTURE_BLOCK != 0 || w % TEXTURE_BLOCK != 0 {
        return shape_err(format!("{h}×{w} is not divisible by {TEXTURE_BLOCK}"));
    }
    let cells = avg_pool(image, VAE_STRIDE)?;
    let (h, w) = (h / VAE_STRIDE, w / VAE_STRIDE);
    let plane = h * w;
    let mut f = Vec::with_capacity(VISUAL_FEATURES);
    let mut vars = Vec::with_capacity(3);
    for ch in 0..3 {
        let px = &cells.data()[ch * plane..(ch + 1) * plane];
        // shifted accumulation keeps a constant channel at exactly zero variance
        let shift = px[0];
        let s1 = px.iter().map(|v| v - shift).sum::<f64>() / plane as f64;
        let s2 = px.iter().map(|v| (v - shift) * (v - shift)).sum::<f64>() / plane as f64;
        f.push(shift + s1);
        vars.push((s2 - s1 * s1).max(0.0));
    }
    f.extend(vars);

    let (gray, _, _) = grayscale(&cells)?;
    let group = TEXTURE_BLOCK / VAE_STRIDE;
    let mut hist = [0.0; HIST_EDGES.len() + 1];
    let mut total = 0.0;
    let mut add = |v: f64| {
        let bin = HIST_EDGES.iter().position(|&e| v < e).unwrap_or(HIST_EDGES.len());
        hist[bin] += 1.0;
        total += 1.0;
    };
    for y in 0..h {
        for x in 0..w {
            if (x + 1) % group != 0 {
                add((gray[y * w + x + 1] - gray[y * w + x]).abs());
            }
            if (y + 1) % group != 0 {
                add((gray[(y + 1) * w + x] - gray[y * w + x]).abs());
            }
        }
    }
    f.extend(hist.iter().map(|v| v / total));
    debug_assert_eq!(f.len(), VISUAL_FEATURES);
    Ok(f)
}
