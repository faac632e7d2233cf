//! Losses, the optimizer schedule and the training loop.

mod losses;

pub use losses::{
    latent_mse, latent_pairwise_distances, loss_mse, loss_ord, pair_indices, pairwise_distances,
    predicted_granularity, GranularityBounds, LossBreakdown,
};

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::codec::{edge_maps_to_signal_tensor, AnalyticCodec};
use crate::conditioning::TextEncoderStub;
use crate::dataset::{train_batch_from_pool, AnnotatedImage, AugmentConfig, LabelPool, TrainBatch};
use crate::denoiser::Denoiser;
use crate::error::{invalid, GedError, Result};
use crate::granularity::Granularity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    /// Optimizer updates; each consumes `accumulation` micro-batches.
    pub total_steps: usize,
    pub accumulation: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    /// Keep the decode inside the granularity term on the gradient path.
    pub differentiable_decode: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_start: 5e-5,
            lr_end: 5e-6,
            total_steps: 5000,
            accumulation: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            differentiable_decode: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.accumulation == 0 {
            return Err(invalid("total_steps and accumulation must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return Err(invalid(format!(
                "learning rates must satisfy 0 < lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        Ok(())
    }

    /// Linear decay from `lr_start` at update 0 to `lr_end` at the last update.
    pub fn learning_rate(&self, update: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_start;
        }
        let frac = (update.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64;
        self.lr_start + (self.lr_end - self.lr_start) * frac
    }
}

/// One optimizer update's worth of logged losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub mse: f64,
    pub ord_pairwise: f64,
    pub ord_gran: f64,
    pub total: f64,
}

/// Owns the model, the frozen codec and the optimizer state.
pub struct Trainer {
    model: Denoiser,
    codec: AnalyticCodec,
    text: TextEncoderStub,
    config: OptimConfig,
    bounds: Option<GranularityBounds>,
    trainable: Vec<Var>,
    optimizer: AdamW,
    accumulated: Option<GradStore>,
    pending: usize,
    updates: usize,
    micro_steps: usize,
}

impl Trainer {
    /// `bounds` are the dataset edge-pixel-count bounds; `None` (or equal
    /// bounds) disables the granularity term.
    pub fn new(model: Denoiser, codec: AnalyticCodec, config: OptimConfig, bounds: Option<(u64, u64)>) -> Result<Self> {
        config.validate()?;
        let bounds = match bounds {
            Some((lo, hi)) if lo < hi => Some(GranularityBounds::new(lo, hi)?),
            _ => None,
        };
        let trainable: Vec<Var> = model.trainable_vars().into_iter().map(|(_, v)| v).collect();
        let params = ParamsAdamW {
            lr: config.lr_start,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
        };
        let optimizer = AdamW::new(trainable.clone(), params)?;
        let text = TextEncoderStub::new(model.config().text_len, model.config().text_dim);
        Ok(Self {
            model,
            codec,
            text,
            config,
            bounds,
            trainable,
            optimizer,
            accumulated: None,
            pending: 0,
            updates: 0,
            micro_steps: 0,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn codec(&self) -> &AnalyticCodec {
        &self.codec
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Optimizer updates applied so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Forward pass and loss terms for one micro-batch, without touching
    /// gradients or optimizer state.
    pub fn compute_losses(&self, batch: &TrainBatch, caption: &str) -> Result<(Tensor, LossBreakdown)> {
        let dtype = self.model.dtype();
        let dev = self.model.device().clone();
        let n = batch.samples.len();
        if n == 0 {
            return Err(invalid("empty training batch"));
        }

        let z_i = self.codec.encode_image(&batch.image)?.to_tensor(dtype, &dev)?;
        let z_i = z_i.repeat((n, 1, 1, 1))?;
        let maps: Vec<_> = batch.samples.iter().map(|s| s.edge_map.clone()).collect();
        let z_e = self
            .codec
            .encode_signal_tensor(&edge_maps_to_signal_tensor(&maps, dtype, &dev)?)?;

        let strategy = self.model.config().strategy;
        let mut steps = Vec::with_capacity(n);
        let mut grans = Vec::with_capacity(n);
        let mut texts = Vec::with_capacity(n);
        let mut cache: HashMap<String, Tensor> = HashMap::new();
        for s in &batch.samples {
            let r = strategy.resolve(caption, s.granularity);
            steps.push(r.timestep);
            grans.push(r.granularity);
            let t = match cache.get(&r.caption) {
                Some(t) => t.clone(),
                None => {
                    let t = self.text.embed_caption(&r.caption).to_tensor(dtype, &dev)?;
                    cache.insert(r.caption.clone(), t.clone());
                    t
                }
            };
            texts.push(t);
        }
        let text = Tensor::cat(&texts, 0)?;

        let pred = self.model.forward_tensor(&z_i, &steps, &text, &grans)?;
        let mse = loss_mse(&pred, &z_e)?;

        let targets: Option<Vec<f64>> = batch
            .samples
            .iter()
            .map(|s| match s.granularity {
                Granularity::Level(v) => Some(v),
                Granularity::Disabled => None,
            })
            .collect();
        let (ord_pairwise, ord_gran) = match (targets, self.bounds) {
            (Some(g), Some(bounds)) if n >= 2 => {
                let decode_input = if self.config.differentiable_decode {
                    pred.clone()
                } else {
                    pred.detach()
                };
                let bounds = bounds.scaled(batch.area_fraction);
                let g_hat = predicted_granularity(&decode_input, &self.codec, bounds)?;
                loss_ord(&pred, &z_e, &g_hat, &g)?
            }
            _ => {
                let zero = mse.zeros_like()?;
                (zero.clone(), zero)
            }
        };

        let total = ((&mse + &ord_pairwise)? + &ord_gran)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let breakdown = LossBreakdown::new(scalar(&mse)?, scalar(&ord_pairwise)?, scalar(&ord_gran)?);
        Ok((total, breakdown))
    }

    /// One micro-batch: forward, backward and gradient accumulation. Every
    /// `accumulation` calls the averaged, clipped gradient is applied.
    pub fn train_step(&mut self, batch: &TrainBatch, caption: &str) -> Result<LossBreakdown> {
        let (total, breakdown) = self.compute_losses(batch, caption)?;
        if !breakdown.is_finite() {
            return Err(GedError::NonFiniteLoss {
                step: self.micro_steps,
                mse: breakdown.mse,
                ord_pairwise: breakdown.ord_pairwise,
                ord_gran: breakdown.ord_gran,
            });
        }
        let scaled = (total / self.config.accumulation as f64)?;
        let grads = scaled.backward()?;
        self.accumulate(grads)?;
        self.micro_steps += 1;
        self.pending += 1;
        if self.pending == self.config.accumulation {
            self.apply_update()?;
        }
        Ok(breakdown)
    }

    fn accumulate(&mut self, mut grads: GradStore) -> Result<()> {
        let Some(acc) = self.accumulated.as_mut() else {
            self.accumulated = Some(grads);
            return Ok(());
        };
        for var in &self.trainable {
            if let Some(g) = grads.remove(var.as_tensor()) {
                let sum = match acc.get(var.as_tensor()) {
                    Some(prev) => (prev + g)?,
                    None => g,
                };
                acc.insert(var.as_tensor(), sum);
            }
        }
        Ok(())
    }

    fn apply_update(&mut self) -> Result<()> {
        let Some(mut grads) = self.accumulated.take() else {
            return Ok(());
        };
        self.pending = 0;
        if self.config.grad_clip > 0.0 {
            let mut sq = 0.0f64;
            for var in &self.trainable {
                if let Some(g) = grads.get(var.as_tensor()) {
                    sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(GedError::NonFiniteLoss {
                    step: self.micro_steps,
                    mse: f64::NAN,
                    ord_pairwise: f64::NAN,
                    ord_gran: f64::NAN,
                });
            }
            if norm > self.config.grad_clip {
                let factor = self.config.grad_clip / norm;
                for var in &self.trainable {
                    if let Some(g) = grads.remove(var.as_tensor()) {
                        grads.insert(var.as_tensor(), (g * factor)?);
                    }
                }
            }
        }
        self.optimizer.set_learning_rate(self.config.learning_rate(self.updates));
        self.optimizer.step(&grads)?;
        self.updates += 1;
        Ok(())
    }
}

/// Training loop settings beyond the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Write a checkpoint every this many updates (0 disables).
    pub checkpoint_every: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Where the loop writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Runs `trainer.config().total_steps` optimizer updates over `data`,
/// drawing one image per micro-batch. Returns one log record per update.
pub fn train_loop<R: Rng>(
    trainer: &mut Trainer,
    data: &[AnnotatedImage],
    captions: &HashMap<String, String>,
    loop_config: &LoopConfig,
    outputs: &TrainOutputs,
    rng: &mut R,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(invalid("no training images"));
    }
    let pools = data.iter().map(LabelPool::build).collect::<Result<Vec<_>>>()?;
    let mut log = match &outputs.log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Some(BufWriter::new(File::create(path)?))
        }
        None => None,
    };

    let total = trainer.config().total_steps;
    let accumulation = trainer.config().accumulation;
    let mut records = Vec::with_capacity(total);
    for step in 0..total {
        let lr = trainer.config().learning_rate(step);
        let mut parts = Vec::with_capacity(accumulation);
        for _ in 0..accumulation {
            let i = rng.gen_range(0..data.len());
            let batch = train_batch_from_pool(&data[i], &pools[i], rng, &loop_config.augment)?;
            let caption = captions.get(&data[i].id).map(String::as_str).unwrap_or("");
            parts.push(trainer.train_step(&batch, caption)?);
        }
        let mean = LossBreakdown::mean(&parts);
        let record = StepLog {
            step,
            lr,
            mse: mean.mse,
            ord_pairwise: mean.ord_pairwise,
            ord_gran: mean.ord_gran,
            total: mean.total,
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        on_step(&record);
        records.push(record);

        let done = step + 1;
        if let Some(path) = &outputs.checkpoint {
            let periodic = loop_config.checkpoint_every > 0 && done % loop_config.checkpoint_every == 0;
            if periodic && done < total {
                let p = periodic_path(path, done);
                save_checkpoint(&p, trainer.model(), trainer.codec(), Some(done))?;
                log::info!("checkpoint {}", p.display());
            }
        }
    }
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(path, trainer.model(), trainer.codec(), Some(total))?;
        log::info!("checkpoint {}", path.display());
    }
    Ok(records)
}

/// `model.safetensors` → `model.step000100.safetensors`.
pub fn periodic_path(path: &Path, step: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("safetensors");
    path.with_file_name(format!("{stem}.step{step:06}.{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_sample;
    use crate::dataset::SynthConfig;
    use crate::denoiser::{build_finetune_mask, FinetuneMode, UNetConfig};
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(dtype: DType, mode: FinetuneMode) -> Denoiser {
        let config = UNetConfig {
            base_channels: 8,
            norm_groups: 4,
            attention_heads: 2,
            text_len: 4,
            text_dim: 16,
            ..UNetConfig::default()
        };
        let mask = build_finetune_mask(&config, mode);
        Denoiser::with_mask(config, mask, dtype, &Device::Cpu).unwrap()
    }

    fn synth_batch(seed: u64) -> TrainBatch {
        let cfg = SynthConfig {
            height: 64,
            width: 64,
            ..SynthConfig::default()
        };
        let sample = synth_sample(seed, 0, &cfg).unwrap();
        let aug = AugmentConfig {
            crop_size: (32, 32),
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::dataset::train_batch(&sample, &mut rng, &aug).unwrap()
    }

    #[test]
    fn schedule_is_linear_and_monotone() {
        let c = OptimConfig::default();
        assert_eq!(c.learning_rate(0), 5e-5);
        assert!((c.learning_rate(4999) - 5e-6).abs() < 1e-18);
        let lrs: Vec<f64> = (0..5000).map(|k| c.learning_rate(k)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let bad = OptimConfig { lr_end: 1e-3, ..OptimConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn update_happens_after_accumulation() {
        let model = tiny_model(DType::F32, FinetuneMode::Partial);
        let config = OptimConfig { accumulation: 2, total_steps: 10, ..OptimConfig::default() };
        let mut trainer = Trainer::new(model, AnalyticCodec::new(), config, Some((100, 2000))).unwrap();
        let batch = synth_batch(1);
        let snapshot = |t: &Trainer| -> Vec<f32> {
            t.model().trainable_vars()[0].1.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        let before = snapshot(&trainer);
        let l = trainer.train_step(&batch, "").unwrap();
        assert!((l.total - (l.mse + l.ord_pairwise + l.ord_gran)).abs() <= 1e-12 * l.total.abs());
        assert_eq!(snapshot(&trainer), before);
        assert_eq!(trainer.updates(), 0);
        trainer.train_step(&batch, "").unwrap();
        assert_eq!(trainer.updates(), 1);
        assert_ne!(snapshot(&trainer), before);
    }

    #[test]
    fn degenerate_bounds_skip_ordinal_granularity() {
        let model = tiny_model(DType::F32, FinetuneMode::Partial);
        let trainer = Trainer::new(model, AnalyticCodec::new(), OptimConfig::default(), Some((5, 5))).unwrap();
        let (_, l) = trainer.compute_losses(&synth_batch(2), "").unwrap();
        assert_eq!(l.ord_pairwise, 0.0);
        assert_eq!(l.ord_gran, 0.0);
    }

    #[test]
    fn permuting_samples_keeps_total() {
        let model = tiny_model(DType::F64, FinetuneMode::Partial);
        let trainer = Trainer::new(model, AnalyticCodec::new(), OptimConfig::default(), Some((100, 2000))).unwrap();
        let batch = synth_batch(3);
        let mut permuted = batch.clone();
        permuted.samples.reverse();
        permuted.samples.swap(0, 1);
        let (_, a) = trainer.compute_losses(&batch, "cat").unwrap();
        let (_, b) = trainer.compute_losses(&permuted, "cat").unwrap();
        assert!((a.total - b.total).abs() < 1e-12 * a.total);
    }

    #[test]
    fn granularity_term_reaches_prediction_through_decode() {
        let codec = AnalyticCodec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..4 * 4 * 2 * 2).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let pred = Var::from_vec(v, (4, 4, 2, 2), &Device::Cpu).unwrap();
        let bounds = GranularityBounds::new(10, 200).unwrap();
        let g_hat = predicted_granularity(pred.as_tensor(), &codec, bounds).unwrap();
        let target = pred.as_tensor().detach();
        let (_, ord_gran) = loss_ord(pred.as_tensor(), &target, &g_hat, &[0.0, 0.2, 0.5, 1.0]).unwrap();
        let grads = ord_gran.backward().unwrap();
        let g = grads.get(pred.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap();
        assert!(g.to_scalar::<f64>().unwrap() > 0.0);
    }

    #[test]
    fn periodic_names() {
        let p = periodic_path(Path::new("/tmp/run/model.safetensors"), 100);
        assert_eq!(p, Path::new("/tmp/run/model.step000100.safetensors"));
    }
}
