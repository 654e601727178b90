//! Face-verifier stand-in: differentiable alignment, a seeded random-feature
//! embedding network, and cosine similarity.
//!
//! `align` center-crops the largest square and resizes it bilinearly to
//! 112×112 (half-pixel centers, edge clamp). The surrogate average-pools the
//! crop, subtracts mid-gray, applies `affine → tanh → affine` and normalizes.
//! Every stage has a hand-written backward pass.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Pose};
use crate::error::{Error, Result};
use crate::renderer::{render, Image, RenderOptions};
use crate::rng::substream;
use crate::scene::Scene;

pub const EMBEDDING_DIM: usize = 512;
pub const ALIGNED_SIDE: usize = 112;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    /// L2-normalizes `raw`.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        let n = l2(&raw);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Numeric(format!("cannot normalize a vector of norm {n}")));
        }
        Ok(Embedding {
            values: raw.into_iter().map(|v| v / n).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(e1 · e2) / (‖e1‖ ‖e2‖)`, clamped into `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("dimension mismatch {} vs {}", a.dim(), b.dim())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite()) {
        return Err(Error::invalid("cosine similarity of a zero or non-finite vector"));
    }
    Ok((dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0))
}

/// Square crop resampled to a fixed side.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedImage {
    pub side: usize,
    /// `side * side * 3` values, row-major.
    pub pixels: Vec<f64>,
}

impl AlignedImage {
    pub fn to_image(&self) -> Image {
        Image {
            width: self.side,
            height: self.side,
            pixels: self.pixels.clone(),
        }
    }
}

/// Bilinear taps for one output axis: `(i0, i1, w0, w1)` per output index.
fn taps(src_len: usize, src_offset: usize, dst_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let frac = s - i0 as f64;
            if frac == 0.0 {
                (src_offset + i0, src_offset + i0, 1.0, 0.0)
            } else {
                (src_offset + i0, src_offset + i0 + 1, 1.0 - frac, frac)
            }
        })
        .collect()
}

fn crop_taps(width: usize, height: usize, side: usize) -> (Vec<(usize, usize, f64, f64)>, Vec<(usize, usize, f64, f64)>) {
    let crop = width.min(height);
    let xs = taps(crop, (width - crop) / 2, side);
    let ys = taps(crop, (height - crop) / 2, side);
    (xs, ys)
}

/// Center crop to the largest square, then bilinear resize to `side`.
pub fn align_to(image: &Image, side: usize) -> AlignedImage {
    let (xs, ys) = crop_taps(image.width, image.height, side);
    let w = image.width;
    let src = &image.pixels;
    let mut pixels = Vec::with_capacity(side * side * 3);
    for &(y0, y1, wy0, wy1) in &ys {
        for &(x0, x1, wx0, wx1) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| src[3 * (y * w + x) + c];
                let v = if wy1 == 0.0 && wx1 == 0.0 {
                    at(x0, y0)
                } else {
                    wy0 * (wx0 * at(x0, y0) + wx1 * at(x1, y0)) + wy1 * (wx0 * at(x0, y1) + wx1 * at(x1, y1))
                };
                pixels.push(v);
            }
        }
    }
    AlignedImage { side, pixels }
}

pub fn align(image: &Image) -> AlignedImage {
    align_to(image, ALIGNED_SIDE)
}

/// Transpose of [`align_to`]: maps `dL/daligned` to `dL/dimage`.
pub fn align_backward(width: usize, height: usize, side: usize, d_aligned: &[f64]) -> Vec<f64> {
    let (xs, ys) = crop_taps(width, height, side);
    let mut out = vec![0.0; width * height * 3];
    let mut k = 0;
    for &(y0, y1, wy0, wy1) in &ys {
        for &(x0, x1, wx0, wx1) in &xs {
            for c in 0..3 {
                let g = d_aligned[k];
                k += 1;
                if g == 0.0 {
                    continue;
                }
                out[3 * (y0 * width + x0) + c] += g * wy0 * wx0;
                out[3 * (y0 * width + x1) + c] += g * wy0 * wx1;
                out[3 * (y1 * width + x0) + c] += g * wy1 * wx0;
                out[3 * (y1 * width + x1) + c] += g * wy1 * wx1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(alias = "a")]
    A,
    #[serde(alias = "b")]
    B,
}

impl Architecture {
    pub fn shape(self) -> EmbedderShape {
        match self {
            Architecture::A => EmbedderShape {
                side: ALIGNED_SIDE,
                pool: 8,
                hidden: 1024,
                dim: EMBEDDING_DIM,
            },
            Architecture::B => EmbedderShape {
                side: ALIGNED_SIDE,
                pool: 16,
                hidden: 768,
                dim: EMBEDDING_DIM,
            },
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::A => "A",
            Architecture::B => "B",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Architecture::A),
            "B" | "b" => Ok(Architecture::B),
            _ => Err(Error::invalid(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedderShape {
    pub side: usize,
    pub pool: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl EmbedderShape {
    pub fn cells(&self) -> usize {
        self.side / self.pool
    }

    pub fn input_dim(&self) -> usize {
        self.cells() * self.cells() * 3
    }
}

/// Seeded two-layer random-feature network. Weights are a pure function of
/// `(seed, shape)`.
#[derive(Debug, Clone)]
pub struct SurrogateEmbedder {
    pub seed: u64,
    pub architecture: Option<Architecture>,
    pub shape: EmbedderShape,
    /// `hidden × input_dim`, row-major.
    w1: Vec<f64>,
    /// `dim × hidden`, row-major.
    w2: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    pub embedding: Embedding,
    activations: Vec<f64>,
    raw_norm: f64,
}

fn gaussian_block(seed: u64, tag: u64, rows: usize, cols: usize) -> Vec<f64> {
    let mut rng = substream(seed, 0xE3B0_0000 + tag, (rows * cols) as u64);
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        })
        .collect()
}

impl SurrogateEmbedder {
    pub fn new(seed: u64, architecture: Architecture) -> Self {
        let mut e = Self::with_shape(seed, architecture.shape());
        e.architecture = Some(architecture);
        e
    }

    /// Custom shapes exist for small gradient checks.
    pub fn with_shape(seed: u64, shape: EmbedderShape) -> Self {
        assert!(shape.pool > 0 && shape.side % shape.pool == 0, "pool must divide side");
        let tag = (shape.pool as u64) << 32 | shape.hidden as u64;
        SurrogateEmbedder {
            seed,
            architecture: None,
            shape,
            w1: gaussian_block(seed, 2 * tag, shape.hidden, shape.input_dim()),
            w2: gaussian_block(seed, 2 * tag + 1, shape.dim, shape.hidden),
        }
    }

    pub fn align(&self, image: &Image) -> AlignedImage {
        align_to(image, self.shape.side)
    }

    /// Mid-gray-centered average-pooled features.
    fn pool(&self, aligned: &AlignedImage) -> Vec<f64> {
        let EmbedderShape { side, pool, .. } = self.shape;
        let cells = self.shape.cells();
        let mut out = vec![0.0; cells * cells * 3];
        for y in 0..side {
            for x in 0..side {
                let cell = (y / pool) * cells + x / pool;
                for c in 0..3 {
                    out[3 * cell + c] += aligned.pixels[3 * (y * side + x) + c];
                }
            }
        }
        let inv = 1.0 / (pool * pool) as f64;
        out.iter_mut().for_each(|v| *v = *v * inv - 0.5);
        out
    }

    pub fn forward(&self, aligned: &AlignedImage) -> Result<EmbedTrace> {
        if aligned.side != self.shape.side || aligned.pixels.len() != self.shape.side * self.shape.side * 3 {
            return Err(Error::invalid(format!(
                "aligned image side {} does not match embedder side {}",
                aligned.side, self.shape.side
            )));
        }
        let x = self.pool(aligned);
        let n_in = x.len();
        let activations: Vec<f64> = self
            .w1
            .chunks_exact(n_in)
            .map(|row| dot(row, &x).tanh())
            .collect();
        let raw: Vec<f64> = self
            .w2
            .chunks_exact(self.shape.hidden)
            .map(|row| dot(row, &activations))
            .collect();
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding activations".into()));
        }
        let raw_norm = l2(&raw);
        Ok(EmbedTrace {
            embedding: Embedding::normalized(raw)?,
            activations,
            raw_norm,
        })
    }

    pub fn embed(&self, aligned: &AlignedImage) -> Result<Embedding> {
        Ok(self.forward(aligned)?.embedding)
    }

    pub fn embed_image(&self, image: &Image) -> Result<Embedding> {
        self.embed(&self.align(image))
    }

    /// `dL/daligned` given `dL/dembedding` at the forward point in `trace`.
    pub fn backward(&self, trace: &EmbedTrace, d_embedding: &[f64]) -> Vec<f64> {
        let e = &trace.embedding.values;
        let radial = dot(e, d_embedding);
        // normalization Jacobian (I - ê êᵀ) / ‖z‖
        let g_raw: Vec<f64> = e
            .iter()
            .zip(d_embedding)
            .map(|(ei, gi)| (gi - ei * radial) / trace.raw_norm)
            .collect();
        let hidden = self.shape.hidden;
        let mut g_act = vec![0.0; hidden];
        for (row, g) in self.w2.chunks_exact(hidden).zip(&g_raw) {
            if *g != 0.0 {
                for (acc, w) in g_act.iter_mut().zip(row) {
                    *acc += g * w;
                }
            }
        }
        for (g, a) in g_act.iter_mut().zip(&trace.activations) {
            *g *= 1.0 - a * a;
        }
        let n_in = self.shape.input_dim();
        let mut g_x = vec![0.0; n_in];
        for (row, g) in self.w1.chunks_exact(n_in).zip(&g_act) {
            for (acc, w) in g_x.iter_mut().zip(row) {
                *acc += g * w;
            }
        }
        let EmbedderShape { side, pool, .. } = self.shape;
        let cells = self.shape.cells();
        let inv = 1.0 / (pool * pool) as f64;
        let mut out = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                let cell = (y / pool) * cells + x / pool;
                for c in 0..3 {
                    out.push(g_x[3 * cell + c] * inv);
                }
            }
        }
        out
    }

    /// `dL/daligned`; recomputes the forward pass.
    pub fn embed_backward(&self, aligned: &AlignedImage, d_embedding: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward(aligned)?;
        Ok(self.backward(&trace, d_embedding))
    }

    /// Embedding of a full render plus a closure-free backward to image space.
    pub fn image_forward(&self, image: &Image) -> Result<(AlignedImage, EmbedTrace)> {
        let aligned = self.align(image);
        let trace = self.forward(&aligned)?;
        Ok((aligned, trace))
    }

    pub fn image_backward(&self, image: &Image, trace: &EmbedTrace, d_embedding: &[f64]) -> Vec<f64> {
        let d_aligned = self.backward(trace, d_embedding);
        align_backward(image.width, image.height, self.shape.side, &d_aligned)
    }
}

/// `embed(align(render(scene, view, pose)))` of the unmasked scene.
pub fn reference_embedding(
    embedder: &SurrogateEmbedder,
    scene: &Scene,
    view: &CameraView,
    pose: &Pose,
    opts: &RenderOptions,
) -> Result<Embedding> {
    let (image, _) = render(scene, view, pose, opts)?;
    embedder.embed_image(&image)
}
