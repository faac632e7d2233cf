use ndarray::{s, Array2, Array3, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, GranularitySample, LabelPool};
use crate::error::{invalid, Result};

/// Edge maps drawn per training image, i.e. the micro-batch size.
pub const SAMPLES_PER_IMAGE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// (height, width) of the training window.
    pub crop_size: (usize, usize),
    pub enable_scale: bool,
    pub enable_flip: bool,
    /// When off the window is centred instead of random.
    pub enable_crop: bool,
    /// Scale factors are drawn uniformly from this range. Upscaling only, so
    /// an image that fits the crop unscaled always fits after scaling.
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: (320, 320),
            enable_scale: true,
            enable_flip: true,
            enable_crop: true,
            scale_range: (1.0, 1.25),
        }
    }
}

/// One augmented image window plus its granularity samples.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub id: String,
    pub image: Array3<f32>,
    pub samples: Vec<GranularitySample>,
    /// Top-left corner of the window in the (scaled) source.
    pub window: (usize, usize),
    pub scale: f64,
    pub flipped: bool,
    /// Window area over the unscaled source area. Edge-pixel counts of the
    /// window scale roughly by this factor relative to the full image.
    pub area_fraction: f64,
}

/// Builds the label pool for `sample` and draws one batch from it.
pub fn train_batch<R: Rng + ?Sized>(
    sample: &AnnotatedImage,
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<TrainBatch> {
    let pool = LabelPool::build(sample)?;
    train_batch_from_pool(sample, &pool, rng, config)
}

pub fn train_batch_from_pool<R: Rng + ?Sized>(
    sample: &AnnotatedImage,
    pool: &LabelPool,
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<TrainBatch> {
    if pool.is_empty() {
        return Err(invalid(format!("{}: empty label pool", sample.id)));
    }
    let (h0, w0) = (sample.height(), sample.width());
    let (ch, cw) = config.crop_size;
    if ch == 0 || cw == 0 {
        return Err(invalid("crop size must be positive"));
    }

    let scale = if config.enable_scale {
        let (lo, hi) = config.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid(format!("bad scale range {:?}", config.scale_range)));
        }
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    } else {
        1.0
    };
    let (h, w) = (
        ((h0 as f64 * scale).round() as usize).max(1),
        ((w0 as f64 * scale).round() as usize).max(1),
    );
    if ch > h || cw > w {
        return Err(invalid(format!(
            "{}: image {h}x{w} (scale {scale:.3}) smaller than crop {ch}x{cw}",
            sample.id
        )));
    }

    let picks: Vec<usize> = if pool.len() >= SAMPLES_PER_IMAGE {
        index::sample(rng, pool.len(), SAMPLES_PER_IMAGE).into_vec()
    } else {
        (0..SAMPLES_PER_IMAGE).map(|_| rng.gen_range(0..pool.len())).collect()
    };

    let (y0, x0) = if config.enable_crop {
        (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw))
    } else {
        ((h - ch) / 2, (w - cw) / 2)
    };
    let flipped = config.enable_flip && rng.gen_bool(0.5);

    let scaled_image = if scale != 1.0 {
        resize_bilinear(&sample.image, h, w)
    } else {
        sample.image.clone()
    };
    let mut image = scaled_image.slice(s![y0..y0 + ch, x0..x0 + cw, ..]).to_owned();
    if flipped {
        image.invert_axis(Axis(1));
    }

    let samples = picks
        .into_iter()
        .map(|i| {
            let map = if scale != 1.0 {
                resize_nearest(&pool.maps[i], h, w)
            } else {
                pool.maps[i].clone()
            };
            let mut window = map.slice(s![y0..y0 + ch, x0..x0 + cw]).to_owned();
            if flipped {
                window.invert_axis(Axis(1));
            }
            GranularitySample {
                edge_map: window,
                granularity: pool.granularities[i],
                subset: pool.subsets[i].clone(),
            }
        })
        .collect();

    Ok(TrainBatch {
        id: sample.id.clone(),
        image,
        samples,
        window: (y0, x0),
        scale,
        flipped,
        area_fraction: (ch * cw) as f64 / (h0 * w0) as f64,
    })
}

pub(crate) fn resize_bilinear(image: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (h0, w0, c) = image.dim();
    let sy = h0 as f32 / h as f32;
    let sx = w0 as f32 / w as f32;
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h0 - 1) as f32);
        let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w0 - 1) as f32);
        let (y1, x1) = (fy.floor() as usize, fx.floor() as usize);
        let (y2, x2) = ((y1 + 1).min(h0 - 1), (x1 + 1).min(w0 - 1));
        let (ty, tx) = (fy - y1 as f32, fx - x1 as f32);
        let top = image[[y1, x1, ch]] * (1.0 - tx) + image[[y1, x2, ch]] * tx;
        let bottom = image[[y2, x1, ch]] * (1.0 - tx) + image[[y2, x2, ch]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

pub(crate) fn resize_nearest(map: &Array2<u8>, h: usize, w: usize) -> Array2<u8> {
    let (h0, w0) = map.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y * h0) / h).min(h0 - 1);
        let sx = ((x * w0) / w).min(w0 - 1);
        map[[sy, sx]]
    })
}
