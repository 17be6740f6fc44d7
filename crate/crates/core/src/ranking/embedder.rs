//! Toy images and a linear embedder over mask-weighted pooled colour.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mask::{band_edge_slopes, MaskParams, Rect};
use crate::error::{Error, Result};
use crate::model::Embedding;

/// Total mask mass below which pooling falls back to a uniform average.
pub const MIN_MASK_MASS: f64 = 1e-9;

/// A small `height x width x channels` raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// Planted object location, used only for evaluation.
    pub truth: Option<Rect>,
}

impl ToyImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim(height * width * channels, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite pixel".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            truth: None,
        })
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Normalized x coordinate of a column's pixel centre.
    pub fn col_center(&self, col: usize) -> f64 {
        (col as f64 + 0.5) / self.width as f64
    }

    /// Normalized y coordinate of a row's pixel centre.
    pub fn row_center(&self, row: usize) -> f64 {
        (row as f64 + 0.5) / self.height as f64
    }
}

/// Linear map from pooled channel statistics to an L2-normalized embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEmbedder {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToyEmbedder {
    pub fn random(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("positive scale");
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect(),
            bias: (0..out_dim).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub pooled: Vec<f64>,
    pub pre_norm: Vec<f64>,
    pub norm: f64,
    pub embedding: Vec<f64>,
    /// Per-column horizontal mask factors.
    band_x: Vec<f64>,
    /// Per-row vertical mask factors.
    band_y: Vec<f64>,
    mass: f64,
    pub fallback: bool,
}

impl Forward {
    pub fn to_embedding(&self) -> Result<Embedding> {
        Embedding::new(self.embedding.iter().map(|&v| v as f32).collect())
    }
}

/// Mask-weighted average colour per channel.
///
/// The mask factorizes into a column term times a row term, so the weights
/// are evaluated once per column and once per row.
pub fn masked_pool(image: &ToyImage, mask: &MaskParams) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64, bool) {
    let band_x: Vec<f64> = (0..image.width).map(|c| mask.band_x(image.col_center(c))).collect();
    let band_y: Vec<f64> = (0..image.height).map(|r| mask.band_y(image.row_center(r))).collect();
    let mass = band_x.iter().sum::<f64>() * band_y.iter().sum::<f64>();
    let mut pooled = vec![0.0; image.channels];
    let fallback = !(mass > MIN_MASK_MASS);
    for (r, &wy) in band_y.iter().enumerate() {
        for (c, &wx) in band_x.iter().enumerate() {
            let w = if fallback { 1.0 } else { wy * wx };
            for (p, v) in pooled.iter_mut().zip(image.pixel(r, c)) {
                *p += w * v;
            }
        }
    }
    let denom = if fallback {
        (image.width * image.height) as f64
    } else {
        mass
    };
    for p in &mut pooled {
        *p /= denom;
    }
    (pooled, band_x, band_y, mass, fallback)
}

/// Mask the image, pool, project and L2-normalize.
pub fn embed_masked(image: &ToyImage, mask: &MaskParams, embedder: &ToyEmbedder) -> Result<Forward> {
    if image.channels != embedder.in_dim {
        return Err(Error::dim(embedder.in_dim, image.channels));
    }
    let (pooled, band_x, band_y, mass, fallback) = masked_pool(image, mask);
    let mut pre_norm = embedder.bias.clone();
    for (o, z) in pre_norm.iter_mut().enumerate() {
        let row = &embedder.weights[o * embedder.in_dim..(o + 1) * embedder.in_dim];
        *z += row.iter().zip(&pooled).map(|(w, u)| w * u).sum::<f64>();
    }
    let norm = pre_norm.iter().map(|z| z * z).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidValue("embedder output is the zero vector".into()));
    }
    let embedding = pre_norm.iter().map(|z| z / norm).collect();
    Ok(Forward {
        pooled,
        pre_norm,
        norm,
        embedding,
        band_x,
        band_y,
        mass,
        fallback,
    })
}

/// Gradients of one image's contribution.
#[derive(Clone, Debug, Default)]
pub(crate) struct ImageGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `d/d(x_l, x_r, y_t, y_b)`
    pub mask: [f64; 4],
}

/// Back-propagates `d loss / d embedding` through normalization, the linear
/// map, pooling and the mask.
pub(crate) fn backward(
    image: &ToyImage,
    mask: &MaskParams,
    embedder: &ToyEmbedder,
    fwd: &Forward,
    grad_embedding: &[f64],
) -> ImageGrad {
    let out = embedder.out_dim;
    let inp = embedder.in_dim;

    // f = z / |z|  =>  dL/dz = (g - f (f . g)) / |z|
    let dot: f64 = fwd.embedding.iter().zip(grad_embedding).map(|(f, g)| f * g).sum();
    let grad_z: Vec<f64> = fwd
        .embedding
        .iter()
        .zip(grad_embedding)
        .map(|(f, g)| (g - f * dot) / fwd.norm)
        .collect();

    let mut weights = vec![0.0; out * inp];
    let mut grad_u = vec![0.0; inp];
    for o in 0..out {
        for i in 0..inp {
            weights[o * inp + i] = grad_z[o] * fwd.pooled[i];
            grad_u[i] += embedder.weights[o * inp + i] * grad_z[o];
        }
    }

    let mut mask_grad = [0.0; 4];
    if !fwd.fallback {
        // u_c = sum_p m_p I_pc / S  =>  dL/dm_p = sum_c g_c (I_pc - u_c) / S
        let base: f64 = grad_u.iter().zip(&fwd.pooled).map(|(g, u)| g * u).sum();
        // Row sums of dL/dm weighted by the vertical factor, and vice versa.
        let mut per_col = vec![0.0; image.width];
        let mut per_row = vec![0.0; image.height];
        for r in 0..image.height {
            for c in 0..image.width {
                let px = image.pixel(r, c);
                let g = (px.iter().zip(&grad_u).map(|(v, g)| v * g).sum::<f64>() - base) / fwd.mass;
                per_col[c] += g * fwd.band_y[r];
                per_row[r] += g * fwd.band_x[c];
            }
        }
        let k = mask.k;
        let rect = &mask.rect;
        for (c, &acc) in per_col.iter().enumerate() {
            let (d_lo, d_hi) = band_edge_slopes(k, image.col_center(c), rect.x_l, rect.x_r);
            mask_grad[0] += acc * d_lo;
            mask_grad[1] += acc * d_hi;
        }
        for (r, &acc) in per_row.iter().enumerate() {
            let (d_lo, d_hi) = band_edge_slopes(k, image.row_center(r), rect.y_t, rect.y_b);
            mask_grad[2] += acc * d_lo;
            mask_grad[3] += acc * d_hi;
        }
    }

    ImageGrad {
        weights,
        bias: grad_z,
        mask: mask_grad,
    }
}
