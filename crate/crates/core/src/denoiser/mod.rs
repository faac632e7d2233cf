//! The conditional U-Net that maps latent image features straight to a
//! latent edge map in one evaluation.
//!
//! The network input is the latent image alone; there is no noisy-latent
//! input channel. Parameters are organised in named groups (`conv_in`,
//! `down.<s>`, `mid`, `up.<s>`, `time_embed`, `gran_embed`) and a
//! [`FinetuneMask`] decides which groups receive gradients.

mod blocks;
mod params;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Module, VarBuilder};
use serde::{Deserialize, Serialize};

use self::blocks::{head_norm, stage_conv, Conv, CrossAttention, DownStage, ResBlock, UpStage};
use self::params::MaskedBackend;
use crate::codec::{LatentMap, LATENT_CHANNELS};
use crate::conditioning::{fuse, GranularityEncoder, GranularityStrategy, TextEmbedding, TimeEmbedding};
use crate::error::{invalid, Result};
use crate::granularity::Granularity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub stage_multipliers: Vec<usize>,
    /// Stage indices whose blocks attend to the caption embedding.
    pub attention_stages: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm_groups: usize,
    pub attention_heads: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub strategy: GranularityStrategy,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            stage_multipliers: vec![1, 2, 4],
            attention_stages: vec![2],
            in_channels: LATENT_CHANNELS,
            out_channels: LATENT_CHANNELS,
            norm_groups: 8,
            attention_heads: 4,
            text_len: 77,
            text_dim: 1024,
            strategy: GranularityStrategy::Encoding,
            init_seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != LATENT_CHANNELS || self.out_channels != LATENT_CHANNELS {
            return Err(invalid(format!(
                "in/out channels must both be {LATENT_CHANNELS}, got {}/{}",
                self.in_channels, self.out_channels
            )));
        }
        if self.stage_multipliers.len() < 2 {
            return Err(invalid("the U-Net needs at least 2 stages"));
        }
        if self.base_channels == 0 || self.stage_multipliers.contains(&0) {
            return Err(invalid("channel counts must be positive"));
        }
        for c in self.stage_channels() {
            if c % self.norm_groups != 0 {
                return Err(invalid(format!(
                    "{c} channels not divisible into {} norm groups",
                    self.norm_groups
                )));
            }
            if c % self.attention_heads != 0 {
                return Err(invalid(format!(
                    "{c} channels not divisible into {} attention heads",
                    self.attention_heads
                )));
            }
        }
        if let Some(&s) = self.attention_stages.iter().find(|&&s| s >= self.stages()) {
            return Err(invalid(format!("attention stage {s} does not exist")));
        }
        if self.base_channels % 2 != 0 {
            return Err(invalid("base channels must be even for the sinusoidal embedding"));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_multipliers.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stage_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    /// Width of the time embedding and the granularity embedding.
    pub fn embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Latent height and width must be multiples of this.
    pub fn latent_multiple(&self) -> usize {
        1 << (self.stages() - 1)
    }

    /// Every parameter group, encoder to decoder, then the embeddings.
    pub fn groups(&self) -> Vec<String> {
        let s = self.stages();
        let mut g = vec!["conv_in".to_string()];
        g.extend((0..s).map(|i| format!("down.{i}")));
        g.push("mid".to_string());
        g.extend((0..s).map(|i| format!("up.{i}")));
        g.push(TIME_EMBED.to_string());
        g.push(GRAN_EMBED.to_string());
        g
    }
}

pub const TIME_EMBED: &str = "time_embed";
pub const GRAN_EMBED: &str = "gran_embed";

/// Parameter group of a dotted parameter name.
pub fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match first {
        "down" | "up" => format!("{first}.{}", parts.next().unwrap_or_default()),
        _ => first.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Last two decoder stages plus the time and granularity embeddings.
    Partial,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneMask {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl FinetuneMask {
    pub fn from_groups<S: AsRef<str>>(config: &UNetConfig, trainable: &[S]) -> Result<Self> {
        let all: BTreeSet<String> = config.groups().into_iter().collect();
        let mut chosen = BTreeSet::new();
        for name in trainable {
            let name = name.as_ref();
            if !all.contains(name) {
                return Err(invalid(format!("unknown parameter group `{name}`")));
            }
            chosen.insert(name.to_string());
        }
        let frozen = all.difference(&chosen).cloned().collect();
        Ok(Self { trainable: chosen, frozen })
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.trainable.contains(group)
    }
}

pub fn build_finetune_mask(config: &UNetConfig, mode: FinetuneMode) -> FinetuneMask {
    let groups = match mode {
        FinetuneMode::Full => config.groups(),
        FinetuneMode::Partial => {
            let s = config.stages();
            vec![
                format!("up.{}", s - 2),
                format!("up.{}", s - 1),
                TIME_EMBED.to_string(),
                GRAN_EMBED.to_string(),
            ]
        }
    };
    FinetuneMask::from_groups(config, &groups).expect("built-in groups exist")
}

#[derive(Debug, Clone)]
struct UNet {
    conv_in: Conv,
    down: Vec<DownStage>,
    mid: (ResBlock, Option<CrossAttention>, ResBlock),
    up: Vec<UpStage>,
    time_embed: TimeEmbedding,
    gran_embed: GranularityEncoder,
}

impl UNet {
    fn new(config: &UNetConfig, vb: VarBuilder) -> Result<Self> {
        let chans = config.stage_channels();
        let s = config.stages();
        let emb = config.embed_dim();
        let groups = config.norm_groups;
        let attends = |stage: usize| config.attention_stages.contains(&stage);
        let attention = |c: usize, vb: VarBuilder| {
            CrossAttention::new(c, config.text_dim, config.attention_heads, groups, vb)
        };

        let conv_in = stage_conv(config.in_channels, chans[0], 1, vb.pp("conv_in"))?;
        let mut down = Vec::with_capacity(s);
        let mut c_prev = chans[0];
        for (i, &c) in chans.iter().enumerate() {
            let vb = vb.pp(format!("down.{i}"));
            down.push(DownStage {
                res: ResBlock::new(c_prev, c, emb, groups, vb.pp("res"))?,
                attn: if attends(i) { Some(attention(c, vb.pp("attn"))?) } else { None },
                downsample: if i + 1 < s { Some(stage_conv(c, c, 2, vb.pp("down"))?) } else { None },
            });
            c_prev = c;
        }

        let c_low = chans[s - 1];
        let mid = (
            ResBlock::new(c_low, c_low, emb, groups, vb.pp("mid.res1"))?,
            if attends(s - 1) { Some(attention(c_low, vb.pp("mid.attn"))?) } else { None },
            ResBlock::new(c_low, c_low, emb, groups, vb.pp("mid.res2"))?,
        );

        let mut up = Vec::with_capacity(s);
        let mut c_prev = c_low;
        for j in 0..s {
            let stage = s - 1 - j;
            let c = chans[stage];
            let vb = vb.pp(format!("up.{j}"));
            let last = j + 1 == s;
            up.push(UpStage {
                res: ResBlock::new(c_prev + c, c, emb, groups, vb.pp("res"))?,
                attn: if attends(stage) { Some(attention(c, vb.pp("attn"))?) } else { None },
                upsample: if last { None } else { Some(stage_conv(c, c, 1, vb.pp("up"))?) },
                head: if last {
                    Some((
                        head_norm(groups, c, vb.pp("out_norm"))?,
                        stage_conv(c, config.out_channels, 1, vb.pp("out_conv"))?,
                    ))
                } else {
                    None
                },
            });
            c_prev = c;
        }

        Ok(Self {
            conv_in,
            down,
            mid,
            up,
            time_embed: TimeEmbedding::new(config.base_channels, emb, vb.pp(TIME_EMBED))?,
            gran_embed: GranularityEncoder::new(emb, vb.pp(GRAN_EMBED))?,
        })
    }

    fn forward(&self, z: &Tensor, emb: &Tensor, context: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for stage in &self.down {
            let (next, skip) = stage.forward(&h, emb, context)?;
            skips.push(skip);
            h = next;
        }
        let (res1, attn, res2) = &self.mid;
        h = res1.forward(&h, emb)?;
        if let Some(attn) = attn {
            h = attn.forward(&h, context)?;
        }
        h = res2.forward(&h, emb)?;
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            h = stage.forward(&h, &skip, emb, context)?;
        }
        Ok(h)
    }
}

/// The denoising U-Net with its parameters, finetune mask and a counter of
/// single-sample network evaluations.
#[derive(Debug)]
pub struct Denoiser {
    config: UNetConfig,
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    mask: FinetuneMask,
    net: UNet,
    dtype: DType,
    device: Device,
    forward_passes: AtomicU64,
}

impl Denoiser {
    /// Freshly initialized network with the partial finetune mask.
    pub fn new(config: UNetConfig, dtype: DType, device: &Device) -> Result<Self> {
        let mask = build_finetune_mask(&config, FinetuneMode::Partial);
        Self::with_mask(config, mask, dtype, device)
    }

    pub fn with_mask(config: UNetConfig, mask: FinetuneMask, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let vars = Arc::new(Mutex::new(BTreeMap::new()));
        let net = Self::build(&config, &vars, &mask, dtype, device)?;
        Ok(Self {
            config,
            vars,
            mask,
            net,
            dtype,
            device: device.clone(),
            forward_passes: AtomicU64::new(0),
        })
    }

    fn build(
        config: &UNetConfig,
        vars: &Arc<Mutex<BTreeMap<String, Var>>>,
        mask: &FinetuneMask,
        dtype: DType,
        device: &Device,
    ) -> Result<UNet> {
        let backend = MaskedBackend::new(vars.clone(), mask.trainable.clone(), config.init_seed);
        let vb = VarBuilder::from_backend(Box::new(backend), dtype, device.clone());
        UNet::new(config, vb)
    }

    pub fn set_mask(&mut self, mask: FinetuneMask) -> Result<()> {
        let expected: BTreeSet<String> = self.config.groups().into_iter().collect();
        let covered: BTreeSet<String> = mask.trainable.union(&mask.frozen).cloned().collect();
        if covered != expected || !mask.trainable.is_disjoint(&mask.frozen) {
            return Err(invalid("finetune mask does not partition this model's groups"));
        }
        self.net = Self::build(&self.config, &self.vars, &mask, self.dtype, &self.device)?;
        self.mask = mask;
        Ok(())
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn mask(&self) -> &FinetuneMask {
        &self.mask
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Single-sample network evaluations so far (a batch of `B` counts `B`).
    pub fn forward_count(&self) -> u64 {
        self.forward_passes.load(Ordering::SeqCst)
    }

    /// All parameters sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("parameter lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(name, _)| self.mask.is_trainable(&group_of(name)))
            .collect()
    }

    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        let vars = if trainable_only { self.trainable_vars() } else { self.named_vars() };
        vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites a parameter's value; shapes must agree.
    pub fn set_parameter(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.vars.lock().expect("parameter lock");
        let var = vars
            .get(name)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(invalid(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Batched forward pass.
    ///
    /// `z_i` is `(B, 4, h, w)`, `text` is `(B, L, D)` (or `(1, L, D)`,
    /// broadcast), `steps` and `granularities` have one entry per row.
    pub fn forward_tensor(
        &self,
        z_i: &Tensor,
        steps: &[u32],
        text: &Tensor,
        granularities: &[Granularity],
    ) -> Result<Tensor> {
        let (b, c, h, w) = z_i.dims4()?;
        if c != self.config.in_channels {
            return Err(invalid(format!("latent has {c} channels, model expects {}", self.config.in_channels)));
        }
        let m = self.config.latent_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(invalid(format!("latent {h}x{w} is not a multiple of {m}")));
        }
        if steps.len() != b || granularities.len() != b {
            return Err(invalid(format!(
                "batch of {b} with {} steps and {} granularities",
                steps.len(),
                granularities.len()
            )));
        }
        let (tb, l, d) = text.dims3()?;
        if l != self.config.text_len || d != self.config.text_dim {
            return Err(invalid(format!(
                "text embedding is {l}x{d}, model expects {}x{}",
                self.config.text_len, self.config.text_dim
            )));
        }
        let text = match tb {
            _ if tb == b => text.clone(),
            1 => text.broadcast_as((b, l, d))?.contiguous()?,
            _ => return Err(invalid(format!("text batch {tb} does not match latent batch {b}"))),
        };
        let z_i = z_i.to_dtype(self.dtype)?;
        let text = text.to_dtype(self.dtype)?;

        let f_t = self.net.time_embed.forward(steps, self.dtype, &self.device)?;
        let f_g = self.net.gran_embed.forward(granularities, self.dtype, &self.device)?;
        let emb = fuse(&f_t, &f_g)?;
        let out = self.net.forward(&z_i, &emb, &text)?;
        self.forward_passes.fetch_add(b as u64, Ordering::SeqCst);
        Ok(out)
    }

    /// Time embedding `f_t` for the given steps, `(B, D_t)`.
    pub fn time_embedding(&self, steps: &[u32]) -> Result<Tensor> {
        self.net.time_embed.forward(steps, self.dtype, &self.device)
    }

    /// Granularity embedding `f_g`, `(B, D_t)`; zero rows for the sentinel.
    pub fn granularity_embedding(&self, granularities: &[Granularity]) -> Result<Tensor> {
        self.net.gran_embed.forward(granularities, self.dtype, &self.device)
    }

    /// One prediction: `ẑ_e = U(z_i, f_t ⊕ f_g, f_l)`.
    pub fn forward(&self, z_i: &LatentMap, t: u32, f_l: &TextEmbedding, g: Granularity) -> Result<LatentMap> {
        let z = z_i.to_tensor(self.dtype, &self.device)?;
        let text = f_l.to_tensor(self.dtype, &self.device)?;
        let out = self.forward_tensor(&z, &[t], &text, &[g])?;
        LatentMap::from_tensor(&out, 0, z_i.source_shape)
    }
}
