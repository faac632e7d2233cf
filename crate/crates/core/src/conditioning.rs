//! Conditioning signals: caption embedding, time embedding, granularity
//! embedding, and their additive fusion.

use candle_core::{DType, Device, Tensor};
use candle_nn::{linear, Linear, Module, VarBuilder};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::granularity::Granularity;

/// Time step used for every forward pass of the single-step predictor.
pub const GED_TIMESTEP: u32 = 1;

/// Number of diffusion steps the time-step strategy maps `[0, 1]` onto.
pub const TIMESTEP_RANGE: u32 = 1000;

/// Sentence appended to the caption by the text-prompt strategy.
pub fn granularity_prompt(g: f64) -> String {
    format!(
        "Edge granularity denotes different levels of detail, please extract the edges with the granularity of {g}."
    )
}

/// A caption embedding of shape `(len, dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub data: Array2<f32>,
    pub caption: String,
}

impl TextEmbedding {
    /// `(1, len, dim)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (l, d) = self.data.dim();
        let flat: Vec<f32> = self.data.iter().copied().collect();
        Ok(Tensor::from_vec(flat, (1, l, d), device)?.to_dtype(dtype)?)
    }
}

/// Deterministic stand-in for a frozen text encoder.
///
/// Each caption seeds a generator through a SHA-256 digest; rows are
/// standardized to zero mean and unit variance. The output never depends on
/// trainable state, so no gradient can reach it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderStub {
    pub len: usize,
    pub dim: usize,
}

impl Default for TextEncoderStub {
    fn default() -> Self {
        Self { len: 77, dim: 1024 }
    }
}

impl TextEncoderStub {
    pub fn new(len: usize, dim: usize) -> Self {
        Self { len, dim }
    }

    pub fn embed_caption(&self, caption: &str) -> TextEmbedding {
        let mut hasher = Sha256::new();
        if caption.is_empty() {
            hasher.update(b"ged/null-caption");
        } else {
            hasher.update(b"ged/caption:");
            hasher.update(caption.as_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut data: Array2<f32> =
            Array2::from_shape_simple_fn((self.len, self.dim), || StandardNormal.sample(&mut rng));
        for mut row in data.rows_mut() {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
            let std = var.sqrt().max(1e-12);
            row.mapv_inplace(|v| (v - mean) / std);
        }
        TextEmbedding {
            data,
            caption: caption.to_string(),
        }
    }

    pub fn null_embedding(&self) -> TextEmbedding {
        self.embed_caption("")
    }
}

/// Sinusoidal embedding of an integer step: `dim / 2` cosines followed by
/// `dim / 2` sines with geometrically spaced frequencies.
pub fn sinusoidal_embedding(t: u32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.cos() as f32;
        out[half + i] = arg.sin() as f32;
    }
    out
}

/// Elementwise sum of the time and granularity embeddings.
pub fn fuse(f_t: &Tensor, f_g: &Tensor) -> Result<Tensor> {
    if f_t.dims() != f_g.dims() {
        return Err(invalid(format!(
            "cannot fuse embeddings of shape {:?} and {:?}",
            f_t.dims(),
            f_g.dims()
        )));
    }
    Ok((f_t + f_g)?)
}

/// Sinusoidal features followed by a two-layer projection.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    freq_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(freq_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            freq_dim,
            fc1: linear(freq_dim, out_dim, vb.pp("fc1"))?,
            fc2: linear(out_dim, out_dim, vb.pp("fc2"))?,
        })
    }

    pub fn raw(&self, steps: &[u32], dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f32> = steps
            .iter()
            .flat_map(|&t| sinusoidal_embedding(t, self.freq_dim))
            .collect();
        Ok(Tensor::from_vec(flat, (steps.len(), self.freq_dim), device)?.to_dtype(dtype)?)
    }

    /// `(B, out_dim)` for one step per batch row.
    pub fn forward(&self, steps: &[u32], dtype: DType, device: &Device) -> Result<Tensor> {
        let raw = self.raw(steps, dtype, device)?;
        Ok(self.fc2.forward(&self.fc1.forward(&raw)?.silu()?)?)
    }
}

/// Two fully connected layers with a SiLU between them, mapping a scalar
/// granularity to the time-embedding width.
#[derive(Debug, Clone)]
pub struct GranularityEncoder {
    fc1: Linear,
    fc2: Linear,
    out_dim: usize,
}

impl GranularityEncoder {
    pub fn new(out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(1, out_dim, vb.pp("fc1"))?,
            fc2: linear(out_dim, out_dim, vb.pp("fc2"))?,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Encodes a `(B, 1)` tensor of granularity values.
    pub fn forward_values(&self, g: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(g)?.silu()?)?)
    }

    /// `(B, out_dim)`; rows for the disabled sentinel are exactly zero.
    pub fn forward(&self, granularities: &[Granularity], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut values = Vec::with_capacity(granularities.len());
        let mut keep = Vec::with_capacity(granularities.len());
        for g in granularities {
            match *g {
                Granularity::Level(v) => {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(invalid(format!("granularity {v} outside [0, 1]")));
                    }
                    values.push(v);
                    keep.push(1.0);
                }
                Granularity::Disabled => {
                    values.push(0.0);
                    keep.push(0.0);
                }
            }
        }
        let b = granularities.len();
        let values = Tensor::from_vec(values, (b, 1), device)?.to_dtype(dtype)?;
        let encoded = self.forward_values(&values)?;
        if keep.iter().all(|&k| k == 1.0) {
            return Ok(encoded);
        }
        let keep = Tensor::from_vec(keep, (b, 1), device)?.to_dtype(dtype)?;
        // `where_cond` instead of a multiply so the disabled rows are exact
        // zeros even if the encoder output were non-finite.
        let zeros = encoded.zeros_like()?;
        let mask = keep.ne(0.0)?.broadcast_as(encoded.shape())?;
        Ok(mask.where_cond(&encoded, &zeros)?)
    }
}

/// How granularity reaches the denoiser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityStrategy {
    /// Appended to the caption as a sentence.
    TextPrompt,
    /// Replaces the time step with `round(g · 1000)`.
    TimeStep,
    /// Encoded by two FC layers and added to the time embedding.
    #[default]
    Encoding,
}

/// Inputs to one denoiser evaluation after applying a strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConditioning {
    pub caption: String,
    pub timestep: u32,
    /// What the granularity encoder receives.
    pub granularity: Granularity,
}

impl GranularityStrategy {
    pub fn resolve(&self, caption: &str, g: Granularity) -> ResolvedConditioning {
        match (self, g) {
            (GranularityStrategy::Encoding, _) | (_, Granularity::Disabled) => ResolvedConditioning {
                caption: caption.to_string(),
                timestep: GED_TIMESTEP,
                granularity: if *self == GranularityStrategy::Encoding { g } else { Granularity::Disabled },
            },
            (GranularityStrategy::TimeStep, Granularity::Level(v)) => ResolvedConditioning {
                caption: caption.to_string(),
                timestep: (v * TIMESTEP_RANGE as f64).round() as u32,
                granularity: Granularity::Disabled,
            },
            (GranularityStrategy::TextPrompt, Granularity::Level(v)) => {
                let prompt = granularity_prompt(v);
                let caption = if caption.is_empty() {
                    prompt
                } else {
                    format!("{caption} {prompt}")
                };
                ResolvedConditioning {
                    caption,
                    timestep: GED_TIMESTEP,
                    granularity: Granularity::Disabled,
                }
            }
        }
    }
}
