use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{AnalyticCodec, LatentMap};
use crate::error::{invalid, GedError, Result};

/// Loss terms of one micro-batch. `total` is the plain sum of the others.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub ord_pairwise: f64,
    pub ord_gran: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mse: f64, ord_pairwise: f64, ord_gran: f64) -> Self {
        Self {
            mse,
            ord_pairwise,
            ord_gran,
            total: mse + ord_pairwise + ord_gran,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mse.is_finite() && self.ord_pairwise.is_finite() && self.ord_gran.is_finite() && self.total.is_finite()
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown::new(sum(|l| l.mse), sum(|l| l.ord_pairwise), sum(|l| l.ord_gran))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(invalid(format!("shape mismatch {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target)?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Unordered pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn pair_indices(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// L2 distances between the rows of a `(N, ...)` tensor for every pair from
/// [`pair_indices`]. The square root is guarded so identical rows give a
/// zero gradient instead of NaN.
pub fn pairwise_distances(latents: &Tensor) -> Result<Tensor> {
    let n = latents.dim(0)?;
    if n < 2 {
        return Err(invalid(format!("need at least 2 latents, got {n}")));
    }
    let flat = latents.flatten_from(1)?;
    let pairs = pair_indices(n);
    let dev = latents.device();
    let left: Vec<u32> = pairs.iter().map(|p| p.0 as u32).collect();
    let right: Vec<u32> = pairs.iter().map(|p| p.1 as u32).collect();
    let a = flat.index_select(&Tensor::new(left, dev)?, 0)?;
    let b = flat.index_select(&Tensor::new(right, dev)?, 0)?;
    let sq = (a - b)?.sqr()?.sum(1)?;
    let positive = sq.gt(0.0)?;
    let safe = positive.where_cond(&sq, &sq.ones_like()?)?;
    Ok(positive.where_cond(&safe.sqrt()?, &sq.zeros_like()?)?)
}

/// Dataset edge-pixel-count bounds, rescaled to the area of a crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GranularityBounds {
    pub count_min: f64,
    pub count_max: f64,
}

impl GranularityBounds {
    pub fn new(count_min: u64, count_max: u64) -> Result<Self> {
        if count_min >= count_max {
            return Err(GedError::DegenerateGranularity { count: count_min });
        }
        Ok(Self {
            count_min: count_min as f64,
            count_max: count_max as f64,
        })
    }

    /// Bounds for a window covering `area_fraction` of the source image.
    pub fn scaled(&self, area_fraction: f64) -> Self {
        Self {
            count_min: self.count_min * area_fraction,
            count_max: self.count_max * area_fraction,
        }
    }

    pub fn normalize(&self, sum: f64) -> f64 {
        (sum - self.count_min) / (self.count_max - self.count_min)
    }
}

/// `ĝ = (Σ decode(ẑ) − min) / (max − min)` per row of `(N, 4, h, w)`.
/// Not clamped, so gradients reach the prediction through the decoder.
pub fn predicted_granularity(pred: &Tensor, codec: &AnalyticCodec, bounds: GranularityBounds) -> Result<Tensor> {
    let decoded = codec.decode_to_edge_tensor(pred)?;
    let sums = decoded.flatten_from(1)?.sum(1)?;
    let span = bounds.count_max - bounds.count_min;
    Ok(((sums - bounds.count_min)? / span)?)
}

/// `(ord_pairwise, ord_gran)`: mean squared mismatch of pairwise latent
/// distances, and mean squared granularity error.
pub fn loss_ord(pred: &Tensor, target: &Tensor, g_hat: &Tensor, g: &[f64]) -> Result<(Tensor, Tensor)> {
    same_shape(pred, target)?;
    let n = pred.dim(0)?;
    if g_hat.dims() != [n] || g.len() != n {
        return Err(invalid(format!(
            "{n} latents with {:?} predicted and {} target granularities",
            g_hat.dims(),
            g.len()
        )));
    }
    let d_pred = pairwise_distances(pred)?;
    let d_gt = pairwise_distances(target)?;
    let ord_pairwise = (d_pred - d_gt)?.sqr()?.mean_all()?;
    let g = Tensor::new(g, pred.device())?.to_dtype(g_hat.dtype())?;
    let ord_gran = (g_hat - g)?.sqr()?.mean_all()?;
    Ok((ord_pairwise, ord_gran))
}

/// [`loss_mse`] on latent maps, evaluated in f64.
pub fn latent_mse(pred: &LatentMap, target: &LatentMap) -> Result<f64> {
    let dev = candle_core::Device::Cpu;
    let a = pred.to_tensor(DType::F64, &dev)?;
    let b = target.to_tensor(DType::F64, &dev)?;
    Ok(loss_mse(&a, &b)?.to_scalar::<f64>()?)
}

/// [`pairwise_distances`] on latent maps, evaluated in f64.
pub fn latent_pairwise_distances(latents: &[LatentMap]) -> Result<Vec<f64>> {
    if latents.len() < 2 {
        return Err(invalid(format!("need at least 2 latents, got {}", latents.len())));
    }
    if latents.iter().any(|l| l.data.dim() != latents[0].data.dim()) {
        return Err(invalid("latents differ in shape"));
    }
    let t = crate::codec::stack_latents(latents, DType::F64, &candle_core::Device::Cpu)?;
    Ok(pairwise_distances(&t)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn mse_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(&mut rng, &[2, 4, 3, 5]);
        assert_eq!(loss_mse(&z, &z).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let shifted = (&z + 1.0).unwrap();
        let one = loss_mse(&shifted, &z).unwrap().to_scalar::<f64>().unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let w = random(&mut rng, &[2, 4, 3, 5]);
        let (a, b) = (values(&z), values(&w));
        let oracle = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        let got = loss_mse(&z, &w).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!(loss_mse(&z, &random(&mut rng, &[2, 4, 3, 4])).is_err());
    }

    #[test]
    fn pairwise_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random(&mut rng, &[1, 4, 2, 2]);
        let same = Tensor::cat(&[&z, &z, &z, &z], 0).unwrap();
        assert_eq!(values(&pairwise_distances(&same).unwrap()), vec![0.0; 6]);

        let mut bumped = values(&z);
        bumped[5] += 2.0;
        let bumped = Tensor::from_vec(bumped, (1, 4, 2, 2), &Device::Cpu).unwrap();
        let two = pairwise_distances(&Tensor::cat(&[&z, &bumped], 0).unwrap()).unwrap();
        assert!((values(&two)[0] - 2.0).abs() < 1e-12);

        let set = random(&mut rng, &[4, 4, 3, 3]);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| values(&set.get(i).unwrap())).collect();
        let got = values(&pairwise_distances(&set).unwrap());
        let mut k = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                let d = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((got[k] - d).abs() < 1e-12);
                k += 1;
            }
        }
        assert!(pairwise_distances(&z).is_err());
    }

    #[test]
    fn zero_distance_has_finite_gradient() {
        let z = Var::from_tensor(&Tensor::ones((2, 4, 1, 1), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let d = pairwise_distances(z.as_tensor()).unwrap().sum_all().unwrap();
        let grads = d.backward().unwrap();
        let g = values(grads.get(z.as_tensor()).unwrap());
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predicted_granularity_examples() {
        let codec = AnalyticCodec::new();
        let bounds = GranularityBounds::new(0, 1000).unwrap();
        // Latent of an all-zero edge map decodes to zeros.
        let zero_map = ndarray::Array2::<u8>::zeros((16, 16));
        let z0 = codec.encode_edge(&zero_map).unwrap().to_tensor(DType::F64, &Device::Cpu).unwrap();
        let g0 = values(&predicted_granularity(&z0, &codec, bounds).unwrap());
        assert!(g0[0].abs() < 1e-12);

        // Decoded sum equal to count_max gives 1.
        let mut map = zero_map.clone();
        for x in 0..16 {
            map[[3, x]] = 1;
            map[[9, x]] = 1;
        }
        let z = codec.encode_edge(&map).unwrap().to_tensor(DType::F64, &Device::Cpu).unwrap();
        let g = values(&predicted_granularity(&z, &codec, GranularityBounds::new(0, 32).unwrap()).unwrap());
        assert!((g[0] - 1.0).abs() < 1e-9);

        // Random latent against the array decoder.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array3::from_shape_fn((3, 2, 4), |_| rng.gen_range(-1.5f32..1.5));
        let latent = LatentMap::new(data, (24, 16)).unwrap();
        let sum: f64 = codec.decode_to_edge(&latent).iter().map(|&v| v as f64).sum();
        let t = latent.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let b = GranularityBounds::new(10, 90).unwrap();
        let got = values(&predicted_granularity(&t, &codec, b).unwrap())[0];
        assert!((got - (sum - 10.0) / 80.0).abs() < 1e-5);

        assert!(matches!(
            GranularityBounds::new(7, 7),
            Err(GedError::DegenerateGranularity { count: 7 })
        ));
    }

    #[test]
    fn ord_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random(&mut rng, &[4, 4, 2, 2]);
        let g_hat = Tensor::new(&[0.0, 0.3, 0.6, 1.0], &Device::Cpu).unwrap();
        let (p, g) = loss_ord(&z, &z, &g_hat, &[0.0, 0.3, 0.6, 1.0]).unwrap();
        assert_eq!(p.to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(g.to_scalar::<f64>().unwrap(), 0.0);

        // A translated copy keeps every pairwise distance.
        let moved = (&z + 3.5).unwrap();
        let (p, _) = loss_ord(&moved, &z, &g_hat, &[0.0, 0.3, 0.6, 1.0]).unwrap();
        assert!(p.to_scalar::<f64>().unwrap() < 1e-20);

        assert!(loss_ord(&z, &z, &g_hat, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn breakdown_sums_parts() {
        let l = LossBreakdown::new(0.1, 0.2, 0.3);
        assert_eq!(l.total, 0.1 + 0.2 + 0.3);
        let m = LossBreakdown::mean(&[l, LossBreakdown::new(0.3, 0.0, 0.1)]);
        assert!((m.mse - 0.2).abs() < 1e-15);
    }
}
