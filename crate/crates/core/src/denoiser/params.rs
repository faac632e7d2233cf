use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use super::group_of;

/// Variable store that initializes parameters deterministically from a seed
/// and the parameter name, and hands out detached tensors for frozen groups
/// so they never receive gradients.
pub(crate) struct MaskedBackend {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    trainable: BTreeSet<String>,
    seed: u64,
}

impl MaskedBackend {
    pub(crate) fn new(vars: Arc<Mutex<BTreeMap<String, Var>>>, trainable: BTreeSet<String>, seed: u64) -> Self {
        Self { vars, trainable, seed }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn init(&self, shape: &Shape, name: &str, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng_for(name);
        let uniform = |lo: f64, up: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let d = Uniform::new(lo, up);
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let normal = |mean: f64, std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let d = Normal::new(mean, std).expect("finite std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => uniform(lo, up, &mut rng),
            Init::Randn { mean, stdev } => normal(mean, stdev, &mut rng),
            Init::Kaiming { dist, fan, non_linearity } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(-bound, bound, &mut rng)
                    }
                    NormalOrUniform::Normal => normal(0.0, std, &mut rng),
                }
            }
        }
    }
}

impl SimpleBackend for MaskedBackend {
    fn get(&self, shape: Shape, name: &str, init: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut vars = self.vars.lock().expect("parameter lock");
        let var = match vars.get(name) {
            Some(var) => {
                if var.shape() != &shape {
                    candle_core::bail!("parameter `{name}` has shape {:?}, expected {shape:?}", var.shape())
                }
                var.clone()
            }
            None => {
                let values = self.init(&shape, name, init);
                let t = Tensor::from_vec(values, shape.clone(), dev)?.to_dtype(dtype)?;
                let var = Var::from_tensor(&t)?;
                vars.insert(name.to_string(), var.clone());
                var
            }
        };
        if self.trainable.contains(&group_of(name)) {
            Ok(var.as_tensor().clone())
        } else {
            Ok(var.as_tensor().detach())
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().expect("parameter lock").contains_key(name)
    }
}
