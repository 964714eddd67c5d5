//! Checkpoint files: one line of compact JSON header, then raw
//! little-endian `f32` parameter data in manifest order.

use super::{Extension, ModelConfig, Seq2SeqModel};
use crate::error::{Error, Result};
use crate::tensor::Float;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const FORMAT: &str = "graftmt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    /// Residual/norm ordering of every layer.
    pub norm_placement: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub extensions: Vec<Extension>,
    pub manifest: Vec<ManifestEntry>,
    /// Caller-defined metadata (training step, selection score, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn to_bytes<F: Float>(model: &Seq2SeqModel<F>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(model.params().len());
    let mut offset = 0;
    for (_, path, t) in model.params().iter() {
        manifest.push(ManifestEntry {
            path: path.to_string(),
            shape: t.shape().to_vec(),
            offset,
            trainable: t.requires_grad(),
        });
        offset += t.numel() * 4;
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        norm_placement: "post".into(),
        seed: model.seed(),
        config: model.config().clone(),
        extensions: model.extensions().to_vec(),
        manifest,
        meta,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset);
    for (_, _, t) in model.params().iter() {
        for &x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<F: Float>(bytes: &[u8]) -> Result<(Seq2SeqModel<F>, Header)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    if header.norm_placement != "post" {
        return Err(Error::Format(format!(
            "unsupported norm placement `{}`",
            header.norm_placement
        )));
    }
    let data = &bytes[nl + 1..];
    let mut model = Seq2SeqModel::<F>::rebuild(header.config.clone(), &header.extensions, header.seed)?;
    if model.params().len() != header.manifest.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, structure has {}",
            header.manifest.len(),
            model.params().len()
        )));
    }
    for e in &header.manifest {
        let t = model
            .params_mut()
            .by_path_mut(&e.path)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", e.path)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "`{}` has shape {:?} in the file but {:?} in the model",
                e.path,
                e.shape,
                t.shape()
            )));
        }
        let end = e.offset + t.numel() * 4;
        let raw = data
            .get(e.offset..end)
            .ok_or_else(|| Error::Format(format!("data for `{}` is truncated", e.path)))?;
        for (x, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *x = F::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
        t.set_requires_grad(e.trainable);
    }
    Ok((model, header))
}

pub fn save<F: Float>(model: &Seq2SeqModel<F>, path: &Path, meta: serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load<F: Float>(path: &Path) -> Result<(Seq2SeqModel<F>, Header)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterConfig, AdapterKind, AdapterPlacement};
    use crate::freeze::FreezePolicy;
    use crate::input_module::InputModuleConfig;

    fn model() -> Seq2SeqModel<f32> {
        let config = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 64,
            max_positions: 16,
            ..ModelConfig::toy(30)
        };
        let mut m = Seq2SeqModel::build(config, 9).unwrap();
        m.graft(InputModuleConfig::toy(16, 20)).unwrap();
        m.insert_adapters(AdapterPlacement::Encoder, AdapterConfig::toy(AdapterKind::Glu))
            .unwrap();
        m.apply_policy(&FreezePolicy::recipe("bart-frozen", 2).unwrap());
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model();
        let meta = serde_json::json!({"step": 3});
        let a = to_bytes(&m, meta.clone()).unwrap();
        let (back, header) = from_bytes::<f32>(&a).unwrap();
        assert_eq!(header.meta, meta);
        assert_eq!(back.layout(), m.layout());
        assert_eq!(to_bytes(&back, meta).unwrap(), a);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let a = to_bytes(&model(), serde_json::Value::Null).unwrap();
        assert!(from_bytes::<f32>(&a[..a.len() - 4]).is_err());
        assert!(from_bytes::<f32>(b"{}").is_err());
        let text = String::from_utf8_lossy(&a[..a.iter().position(|&b| b == b'\n').unwrap()])
            .replace("\"post\"", "\"pre\"");
        let mut bad = text.into_bytes();
        bad.push(b'\n');
        assert!(from_bytes::<f32>(&bad).is_err());
    }
}
