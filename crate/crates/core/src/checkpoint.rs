//! Single-file checkpoints: safetensors payload with every named U-Net
//! parameter as little-endian f32, plus JSON metadata for the model config,
//! codec constants and finetune mask.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::codec::{AnalyticCodec, CodecConfig};
use crate::denoiser::{Denoiser, FinetuneMask, UNetConfig};
use crate::error::{GedError, Result};

pub const FORMAT: &str = "ged-checkpoint-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub config: UNetConfig,
    pub codec: CodecConfig,
    pub mask: FinetuneMask,
    pub step: Option<usize>,
}

fn bad(msg: impl Into<String>) -> GedError {
    GedError::Checkpoint(msg.into())
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(path: &Path, model: &Denoiser, codec: &AnalyticCodec, step: Option<usize>) -> Result<()> {
    let mut buffers = Vec::new();
    for (name, var) in model.named_vars() {
        let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name, var.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| bad(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("config".to_string(), serde_json::to_string(model.config())?);
    meta.insert("codec".to_string(), serde_json::to_string(codec.config())?);
    meta.insert("mask".to_string(), serde_json::to_string(model.mask())?);
    if let Some(step) = step {
        meta.insert("step".to_string(), step.to_string());
    }
    let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| bad(e.to_string()))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().as_ref().ok_or_else(|| bad("checkpoint has no metadata"))?;
    let field = |key: &str| meta.get(key).ok_or_else(|| bad(format!("checkpoint metadata lacks `{key}`")));
    if field("format")? != FORMAT {
        return Err(bad(format!("unsupported checkpoint format `{}`", field("format")?)));
    }
    let step = match meta.get("step") {
        Some(s) => Some(s.parse().map_err(|_| bad(format!("bad step `{s}`")))?),
        None => None,
    };
    Ok(CheckpointMeta {
        config: serde_json::from_str(field("config")?)?,
        codec: serde_json::from_str(field("codec")?)?,
        mask: serde_json::from_str(field("mask")?)?,
        step,
    })
}

/// Rebuilds the model and codec. Parameter names and shapes must match the
/// stored config exactly.
pub fn load_checkpoint(path: &Path, dtype: DType, device: &Device) -> Result<(Denoiser, AnalyticCodec, CheckpointMeta)> {
    if !path.exists() {
        return Err(GedError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let meta = read_meta(&bytes)?;
    let codec = AnalyticCodec::from_config(meta.codec.clone())?;
    let model = Denoiser::with_mask(meta.config.clone(), meta.mask.clone(), dtype, device)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;

    let expected: BTreeSet<String> = model.named_vars().into_iter().map(|(n, _)| n).collect();
    let stored: BTreeSet<String> = st.names().into_iter().cloned().collect();
    if expected != stored {
        let missing: Vec<_> = expected.difference(&stored).collect();
        let extra: Vec<_> = stored.difference(&expected).collect();
        return Err(bad(format!("parameter mismatch: missing {missing:?}, unexpected {extra:?}")));
    }
    for name in &expected {
        let view = st.tensor(name).map_err(|e| bad(e.to_string()))?;
        if view.dtype() != Dtype::F32 {
            return Err(bad(format!("parameter `{name}` is {:?}, expected F32", view.dtype())));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), device)?;
        model.set_parameter(name, &t)?;
    }
    Ok((model, codec, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{build_finetune_mask, FinetuneMode};

    fn tiny() -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            norm_groups: 4,
            attention_heads: 2,
            text_len: 4,
            text_dim: 16,
            ..UNetConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        let config = UNetConfig { init_seed: 7, ..tiny() };
        let mask = build_finetune_mask(&config, FinetuneMode::Full);
        let model = Denoiser::with_mask(config.clone(), mask.clone(), DType::F32, &Device::Cpu).unwrap();
        let name = model.named_vars()[0].0.clone();
        let shape = model.named_vars()[0].1.dims().to_vec();
        model.set_parameter(&name, &Tensor::full(0.125f32, shape, &Device::Cpu).unwrap()).unwrap();
        save_checkpoint(&path, &model, &AnalyticCodec::new(), Some(12)).unwrap();

        let (loaded, codec, meta) = load_checkpoint(&path, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(meta.config, config);
        assert_eq!(meta.mask, mask);
        assert_eq!(meta.step, Some(12));
        assert_eq!(codec.parameters(), AnalyticCodec::new().parameters());
        for ((na, va), (nb, vb)) in model.named_vars().iter().zip(loaded.named_vars().iter()) {
            assert_eq!(na, nb);
            let a = va.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = vb.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "{na}");
        }
        assert!(!path.with_extension("safetensors.tmp").exists());
    }

    #[test]
    fn missing_and_corrupt_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.safetensors");
        assert!(matches!(
            load_checkpoint(&path, DType::F32, &Device::Cpu),
            Err(GedError::MissingFile(_))
        ));
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path, DType::F32, &Device::Cpu),
            Err(GedError::Checkpoint(_))
        ));
    }
}
