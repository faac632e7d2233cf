//! Single-pass edge prediction and granularity sweeps.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use ndarray::{Array2, Array3};

use crate::codec::{pad_reflect, AnalyticCodec, LatentMap, DOWNSAMPLE};
use crate::conditioning::TextEncoderStub;
use crate::denoiser::Denoiser;
use crate::error::{invalid, Result};
use crate::granularity::Granularity;
use crate::imageio::save_prob16;

#[derive(Clone, Debug, PartialEq)]
pub struct EdgePrediction {
    pub image_id: String,
    pub granularity: Granularity,
    /// Source-shaped probabilities in `[0, 1]`.
    pub prob_map: Array2<f32>,
}

impl EdgePrediction {
    pub fn file_name(&self) -> String {
        prediction_file_name(&self.image_id, self.granularity)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file_name());
        save_prob16(&path, &self.prob_map)?;
        Ok(path)
    }
}

/// `<id>_g050.png` style names.
pub fn prediction_file_name(image_id: &str, g: Granularity) -> String {
    format!("{image_id}_{}.png", g.file_tag())
}

pub struct Predictor {
    model: Denoiser,
    codec: AnalyticCodec,
    text: TextEncoderStub,
}

impl Predictor {
    pub fn new(model: Denoiser, codec: AnalyticCodec) -> Self {
        let text = TextEncoderStub::new(model.config().text_len, model.config().text_dim);
        Self { model, codec, text }
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    /// Pixel multiple the input is reflect-padded to.
    pub fn pad_multiple(&self) -> usize {
        DOWNSAMPLE * self.model.config().latent_multiple()
    }

    fn encode(&self, image: &Array3<f32>) -> Result<LatentMap> {
        let (h, w, c) = image.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(invalid(format!("expected a non-empty HxWx3 image, got {:?}", image.dim())));
        }
        let padded = pad_reflect(image, self.pad_multiple());
        let mut latent = self.codec.encode_image(&padded)?;
        latent.source_shape = (h, w);
        Ok(latent)
    }

    /// Runs the denoiser once on a batch of granularities for one image.
    fn run(&self, image: &Array3<f32>, caption: &str, grans: &[Granularity]) -> Result<Vec<Array2<f32>>> {
        let latent = self.encode(image)?;
        let dtype = self.model.dtype();
        let dev = self.model.device();
        let strategy = self.model.config().strategy;
        let n = grans.len();

        let z = latent.to_tensor(dtype, dev)?.repeat((n, 1, 1, 1))?;
        let mut steps = Vec::with_capacity(n);
        let mut enc = Vec::with_capacity(n);
        let mut texts = Vec::with_capacity(n);
        for &g in grans {
            let r = strategy.resolve(caption, g);
            steps.push(r.timestep);
            enc.push(r.granularity);
            texts.push(self.text.embed_caption(&r.caption).to_tensor(dtype, dev)?);
        }
        let text = Tensor::cat(&texts, 0)?;
        let out = self.model.forward_tensor(&z, &steps, &text, &enc)?;
        (0..n)
            .map(|row| {
                let pred = LatentMap::from_tensor(&out, row, latent.source_shape)?;
                Ok(self.codec.decode_to_edge(&pred))
            })
            .collect()
    }

    /// Encode, one denoiser evaluation at `t = 1`, decode, crop.
    pub fn predict(&self, image: &Array3<f32>, image_id: &str, g: Granularity, caption: &str) -> Result<EdgePrediction> {
        let prob_map = self.run(image, caption, &[g])?.pop().expect("one prediction");
        Ok(EdgePrediction {
            image_id: image_id.to_string(),
            granularity: g,
            prob_map,
        })
    }

    /// `m` predictions on the grid `k / (m - 1)`, ordered by granularity.
    pub fn sweep(&self, image: &Array3<f32>, image_id: &str, m: usize, caption: &str) -> Result<Vec<EdgePrediction>> {
        let grid = Granularity::grid(m)?;
        let maps = self.run(image, caption, &grid)?;
        Ok(grid
            .into_iter()
            .zip(maps)
            .map(|(granularity, prob_map)| EdgePrediction {
                image_id: image_id.to_string(),
                granularity,
                prob_map,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UNetConfig;
    use crate::imageio::load_prob;
    use candle_core::{DType, Device};

    fn predictor() -> Predictor {
        let config = UNetConfig {
            base_channels: 8,
            norm_groups: 4,
            attention_heads: 2,
            text_len: 4,
            text_dim: 16,
            ..UNetConfig::default()
        };
        Predictor::new(Denoiser::new(config, DType::F32, &Device::Cpu).unwrap(), AnalyticCodec::new())
    }

    fn image(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0)
    }

    #[test]
    fn predict_pads_and_crops() {
        let p = predictor();
        let before = p.model().forward_count();
        let pred = p.predict(&image(37, 50), "a", Granularity::Level(0.5), "").unwrap();
        assert_eq!(pred.prob_map.dim(), (37, 50));
        assert!(pred.prob_map.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(p.model().forward_count() - before, 1);
        assert_eq!(pred.file_name(), "a_g050.png");
    }

    #[test]
    fn sweep_counts_and_orders() {
        let p = predictor();
        let before = p.model().forward_count();
        let preds = p.sweep(&image(32, 32), "b", 11, "").unwrap();
        assert_eq!(p.model().forward_count() - before, 11);
        let gs: Vec<f64> = preds.iter().map(|e| e.granularity.value().unwrap()).collect();
        assert!(gs.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(preds[10].file_name(), "b_g100.png");
        assert!(p.sweep(&image(32, 32), "b", 1, "").is_err());
    }

    #[test]
    fn deterministic_and_saved_as_16_bit() {
        let p = predictor();
        let a = p.predict(&image(32, 40), "c", Granularity::Level(0.3), "x").unwrap();
        let b = p.predict(&image(32, 40), "c", Granularity::Level(0.3), "x").unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = a.save(dir.path()).unwrap();
        let back = load_prob(&path).unwrap();
        let err = a
            .prob_map
            .iter()
            .zip(back.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 65535.0 + 1e-6);
    }
}
