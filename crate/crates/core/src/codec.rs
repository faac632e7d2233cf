//! Frozen analytic codec between pixel space and the 4-channel latent space
//! at 1/8 resolution.
//!
//! Each 8×8 block is split into four 4×4 quadrants whose mean signals `q`
//! (signal = `2·lum − 1`) are projected onto four fixed block filters:
//!
//! * channel 0: block mean,
//! * channel 1: horizontal response (right half minus left half),
//! * channel 2: vertical response (bottom half minus top half),
//! * channel 3: diagonal response (main diagonal minus anti-diagonal).
//!
//! Each channel is multiplied by a fixed standardization constant. The
//! projection rows are orthogonal, so decoding applies the scaled transpose
//! and reproduces the quadrant means exactly: `encode(decode(z)) == z`.

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DOWNSAMPLE: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
const QUADRANT: usize = DOWNSAMPLE / 2;

/// Rows act on quadrant means ordered (top-left, top-right, bottom-left, bottom-right).
const FILTERS: [[f32; 4]; 4] = [
    [0.25, 0.25, 0.25, 0.25],
    [-0.25, 0.25, -0.25, 0.25],
    [-0.25, -0.25, 0.25, 0.25],
    [0.25, -0.25, -0.25, 0.25],
];

/// Per-channel standardization applied after projection.
const CHANNEL_SCALE: [f32; 4] = [1.0, 2.0, 2.0, 2.0];

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Analytic,
}

/// Codec description stored inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub channels: usize,
    pub downsample: usize,
    pub filters: [[f32; 4]; 4],
    pub channel_scale: [f32; 4],
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::Analytic,
            channels: LATENT_CHANNELS,
            downsample: DOWNSAMPLE,
            filters: FILTERS,
            channel_scale: CHANNEL_SCALE,
        }
    }
}

/// A latent grid `(H/8, W/8, 4)` in channel-last layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    pub data: Array3<f32>,
    /// Pixel shape before any padding; decode crops back to it.
    pub source_shape: (usize, usize),
}

impl LatentMap {
    pub fn new(data: Array3<f32>, source_shape: (usize, usize)) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != LATENT_CHANNELS {
            return Err(invalid(format!("latent has {c} channels, expected {LATENT_CHANNELS}")));
        }
        if source_shape.0 > h * DOWNSAMPLE || source_shape.1 > w * DOWNSAMPLE {
            return Err(invalid(format!(
                "source shape {source_shape:?} exceeds latent extent {}x{}",
                h * DOWNSAMPLE,
                w * DOWNSAMPLE
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("latent contains non-finite values"));
        }
        Ok(Self { data, source_shape })
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }

    /// Channel-first tensor of shape `(1, 4, h, w)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w, c) = self.data.dim();
        let flat: Vec<f32> = self.data.iter().copied().collect();
        Ok(Tensor::from_vec(flat, (1, h, w, c), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(dtype)?)
    }

    /// Inverse of [`LatentMap::to_tensor`] for one batch row of `(B, 4, h, w)`.
    pub fn from_tensor(t: &Tensor, row: usize, source_shape: (usize, usize)) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let hwc = t
            .get(row)?
            .permute((1, 2, 0))?
            .contiguous()?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let data = Array3::from_shape_vec((h, w, c), hwc).map_err(|e| invalid(e.to_string()))?;
        LatentMap::new(data, source_shape)
    }

    /// Flattened channel-last row-major values.
    pub fn flat(&self) -> Vec<f32> {
        self.data.iter().copied().collect()
    }
}

/// The frozen analytic codec. Its parameters are compile-time constants.
#[derive(Clone, Debug, Default)]
pub struct AnalyticCodec {
    config: CodecConfig,
}

impl AnalyticCodec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_config(config: CodecConfig) -> Result<Self> {
        if config != CodecConfig::default() {
            return Err(invalid("codec constants differ from this build's analytic codec"));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    /// Every constant the codec uses, flattened; compared bitwise by the
    /// freeze checks.
    pub fn parameters(&self) -> Vec<f32> {
        self.config
            .filters
            .iter()
            .flatten()
            .chain(self.config.channel_scale.iter())
            .copied()
            .collect()
    }

    pub fn encode_image(&self, image: &Array3<f32>) -> Result<LatentMap> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(invalid(format!("image has {c} channels, expected 3")));
        }
        let signal = Array2::from_shape_fn((h, w), |(y, x)| {
            let lum: f32 = (0..3).map(|k| LUMA[k] * image[[y, x, k]]).sum();
            2.0 * lum - 1.0
        });
        self.encode_signal(&signal)
    }

    /// Replicates the binary map to three channels, rescales it to `[-1, 1]`
    /// and encodes it like an image.
    pub fn encode_edge(&self, edge_map: &Array2<u8>) -> Result<LatentMap> {
        let signal = edge_map.mapv(|v| if v != 0 { 1.0 } else { -1.0 });
        self.encode_signal(&signal)
    }

    /// Linear projection of a `[-1, 1]` signal; dims must be multiples of 8.
    pub fn encode_signal(&self, signal: &Array2<f32>) -> Result<LatentMap> {
        let (h, w) = signal.dim();
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(invalid(format!(
                "{h}x{w} is not divisible by {DOWNSAMPLE}; pad reflectively first"
            )));
        }
        let (lh, lw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        let mut data = Array3::<f32>::zeros((lh, lw, LATENT_CHANNELS));
        let norm = (QUADRANT * QUADRANT) as f32;
        for by in 0..lh {
            for bx in 0..lw {
                let mut q = [0.0f32; 4];
                for (i, qv) in q.iter_mut().enumerate() {
                    let y0 = by * DOWNSAMPLE + (i / 2) * QUADRANT;
                    let x0 = bx * DOWNSAMPLE + (i % 2) * QUADRANT;
                    *qv = signal.slice(s![y0..y0 + QUADRANT, x0..x0 + QUADRANT]).sum() / norm;
                }
                for ch in 0..LATENT_CHANNELS {
                    let r: f32 = (0..4).map(|i| self.config.filters[ch][i] * q[i]).sum();
                    data[[by, bx, ch]] = r * self.config.channel_scale[ch];
                }
            }
        }
        LatentMap::new(data, (h, w))
    }

    /// Scaled transpose of the projection: the signal in `[-1, 1]` (before
    /// clamping), at the padded resolution.
    pub fn decode_signal(&self, latent: &LatentMap) -> Array2<f32> {
        let (lh, lw, _) = latent.data.dim();
        let mut out = Array2::<f32>::zeros((lh * DOWNSAMPLE, lw * DOWNSAMPLE));
        for by in 0..lh {
            for bx in 0..lw {
                let coeffs: Vec<f32> = (0..LATENT_CHANNELS)
                    .map(|ch| latent.data[[by, bx, ch]] / self.config.channel_scale[ch])
                    .collect();
                for i in 0..4 {
                    // Rows have squared norm 1/4, so the inverse is 4 × transpose.
                    let q: f32 = (0..4).map(|ch| 4.0 * self.config.filters[ch][i] * coeffs[ch]).sum();
                    let y0 = by * DOWNSAMPLE + (i / 2) * QUADRANT;
                    let x0 = bx * DOWNSAMPLE + (i % 2) * QUADRANT;
                    out.slice_mut(s![y0..y0 + QUADRANT, x0..x0 + QUADRANT]).fill(q);
                }
            }
        }
        out
    }

    /// Decodes to an edge probability map of the source shape: the decoded
    /// three channels are identical so their mean is the decoded signal,
    /// mapped by `(x + 1) / 2` and clamped to `[0, 1]`.
    pub fn decode_to_edge(&self, latent: &LatentMap) -> Array2<f32> {
        let (h, w) = latent.source_shape;
        self.decode_signal(latent)
            .slice(s![0..h, 0..w])
            .mapv(|x| ((x + 1.0) / 2.0).clamp(0.0, 1.0))
    }

    /// Differentiable batch encode of `(B, 1, H, W)` signals in `[-1, 1]`
    /// into `(B, 4, H/8, W/8)`.
    pub fn encode_signal_tensor(&self, signal: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = signal.dims4()?;
        if c != 1 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(invalid(format!("bad signal tensor shape {:?}", signal.dims())));
        }
        let (qh, qw) = (h / QUADRANT, w / QUADRANT);
        let q = signal.avg_pool2d(QUADRANT)?; // (B, 1, 2h, 2w)
        let q = q
            .reshape((b, qh / 2, 2, qw / 2, 2))?
            .permute((0, 2, 4, 1, 3))?
            .reshape((b, 4, qh / 2, qw / 2))?;
        let kernel = self.projection_kernel(false, signal.dtype(), signal.device())?;
        Ok(q.conv2d(&kernel, 0, 1, 1, 1)?)
    }

    /// Differentiable batch decode of `(B, 4, h, w)` latents to edge maps
    /// `(B, 8h, 8w)` in `[0, 1]` at the padded resolution.
    pub fn decode_to_edge_tensor(&self, latent: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = latent.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(invalid(format!("latent tensor has {c} channels")));
        }
        let kernel = self.projection_kernel(true, latent.dtype(), latent.device())?;
        let q = latent.conv2d(&kernel, 0, 1, 1, 1)?; // (B, 4 quadrants, h, w)
        let q = q
            .reshape((b, 2, 2, h, w))?
            .permute((0, 3, 1, 4, 2))?
            .reshape((b, 1, 2 * h, 2 * w))?;
        let signal = q.upsample_nearest2d(h * DOWNSAMPLE, w * DOWNSAMPLE)?;
        let edge = ((signal + 1.0)? / 2.0)?.clamp(0.0, 1.0)?;
        Ok(edge.squeeze(1)?)
    }

    /// 1×1 conv kernel `(out, in, 1, 1)`: projection (quadrants → channels)
    /// or its inverse (channels → quadrants).
    fn projection_kernel(&self, inverse: bool, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut k = [0.0f32; 16];
        for ch in 0..4 {
            for i in 0..4 {
                let f = self.config.filters[ch][i];
                let scale = self.config.channel_scale[ch];
                if inverse {
                    k[i * 4 + ch] = 4.0 * f / scale;
                } else {
                    k[ch * 4 + i] = f * scale;
                }
            }
        }
        Ok(Tensor::from_vec(k.to_vec(), (4, 4, 1, 1), device)?.to_dtype(dtype)?)
    }
}

/// Reflect-pads an H×W×C image so both dims are multiples of `multiple`.
pub fn pad_reflect(image: &Array3<f32>, multiple: usize) -> Array3<f32> {
    let (h, w, c) = image.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    Array3::from_shape_fn((ph, pw, c), |(y, x, k)| image[[reflect(y, h), reflect(x, w), k]])
}

/// Binary maps rescaled to `[-1, 1]` as a `(B, 1, H, W)` tensor.
pub fn edge_maps_to_signal_tensor(maps: &[Array2<u8>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = maps
        .first()
        .ok_or_else(|| invalid("no edge maps"))?
        .dim();
    let mut flat = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dim() != (h, w) {
            return Err(invalid("edge maps differ in shape"));
        }
        flat.extend(m.iter().map(|&v| if v != 0 { 1.0f32 } else { -1.0 }));
    }
    Ok(Tensor::from_vec(flat, (maps.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks latents into a `(B, 4, h, w)` tensor.
pub fn stack_latents(latents: &[LatentMap], dtype: DType, device: &Device) -> Result<Tensor> {
    let rows = latents
        .iter()
        .map(|l| l.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&rows, 0)?)
}
