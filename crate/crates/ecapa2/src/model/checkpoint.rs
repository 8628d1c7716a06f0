//! Checkpoint serialization: a JSON header line describing the config and
//! tensor table, followed by every tensor's values as little-endian f32.

use super::{architecture, Ecapa2Config, Ecapa2Model, ParamStore};
use crate::error::{data_err, Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const FORMAT_VERSION: u32 = 1;
/// Upper bound on total stored elements (512 MB of f32 payload).
const MAX_ELEMENTS: usize = 1 << 27;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: Ecapa2Config,
    tensors: Vec<TensorMeta>,
}

/// Serialize a model. Tensor payloads follow the header newline in table
/// order; offsets are in f32 elements from the start of the payload.
pub fn checkpoint_to_bytes(model: &Ecapa2Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for (name, entry) in model.params.iter() {
        let len = entry.tensor.numel();
        tensors.push(TensorMeta {
            name: name.to_string(),
            shape: entry.tensor.shape.clone(),
            offset,
            len,
            trainable: entry.trainable,
        });
        offset += len;
    }
    let header = Header { format_version: FORMAT_VERSION, config: model.config.clone(), tensors };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    out.push(b'\n');
    out.reserve(offset * 4);
    for (_, entry) in model.params.iter() {
        for &v in &entry.tensor.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Deserialize and validate a checkpoint. The tensor table must match the
/// layout the stored config implies, name for name and shape for shape.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Ecapa2Model> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| data_err("checkpoint without header line".to_string()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| data_err(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(data_err(format!(
            "checkpoint format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    header.config.validate()?;

    let specs = architecture(&header.config);
    if specs.len() != header.tensors.len() {
        return Err(data_err(format!(
            "checkpoint lists {} tensors, config implies {}",
            header.tensors.len(),
            specs.len()
        )));
    }
    let mut expected_offset = 0usize;
    for (spec, meta) in specs.iter().zip(&header.tensors) {
        if spec.name != meta.name || spec.shape != meta.shape || spec.trainable != meta.trainable {
            return Err(data_err(format!(
                "checkpoint tensor '{}' does not match the config layout",
                meta.name
            )));
        }
        let numel: usize = meta.shape.iter().product();
        if meta.len != numel || meta.offset != expected_offset {
            return Err(data_err(format!(
                "checkpoint tensor '{}' has inconsistent extent",
                meta.name
            )));
        }
        expected_offset = expected_offset
            .checked_add(numel)
            .filter(|&t| t <= MAX_ELEMENTS)
            .ok_or_else(|| data_err("checkpoint payload too large".to_string()))?;
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != expected_offset * 4 {
        return Err(data_err(format!(
            "checkpoint payload holds {} bytes, table implies {}",
            payload.len(),
            expected_offset * 4
        )));
    }

    let mut store = ParamStore::new();
    for meta in &header.tensors {
        let mut data = Vec::with_capacity(meta.len);
        for i in 0..meta.len {
            let at = (meta.offset + i) * 4;
            let raw: [u8; 4] = payload[at..at + 4].try_into().unwrap();
            let v = f32::from_le_bytes(raw) as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint tensor '{}'", meta.name)));
            }
            data.push(v);
        }
        let tensor = Tensor::new(data, &meta.shape)?;
        store.insert(&meta.name, tensor, meta.trainable)?;
    }
    Ok(Ecapa2Model { config: header.config, params: store })
}

pub fn save_checkpoint(model: &Ecapa2Model, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Ecapa2Model> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Ecapa2Model {
        let config = Ecapa2Config {
            lfe_stages: vec![(1, 3, 2)],
            gfe_channels: 6,
            res2net_scale: 2,
            res2net_kernel: 3,
            cas_attention_dim: 4,
            embedding_dim: 5,
            input_bins: 8,
            striding_enabled: true,
            fwse_hidden: 2,
        };
        Ecapa2Model::new(config, 42).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_exact_after_first_save(){
        let model = tiny_model();
        let bytes = checkpoint_to_bytes(&model).unwrap();
        let loaded = model_from_bytes(&bytes).unwrap();
        let again = checkpoint_to_bytes(&loaded).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.len(), model.params.len());
    }

    #[test]
    fn values_survive_modulo_f32_quantization() {
        let model = tiny_model();
        let loaded = model_from_bytes(&checkpoint_to_bytes(&model).unwrap()).unwrap();
        for ((na, a), (nb, b)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            for (&x, &y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert_eq!(x as f32, y as f32, "tensor {na}");
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let model = tiny_model();
        let good = checkpoint_to_bytes(&model).unwrap();

        assert!(model_from_bytes(b"not a checkpoint").is_err());
        assert!(model_from_bytes(b"{}\n").is_err());

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 5);
        assert!(model_from_bytes(&truncated).is_err());

        // NaN payload bits.
        let mut nan = good.clone();
        let nl = nan.iter().position(|&b| b == b'\n').unwrap();
        nan[nl + 1..nl + 5].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(model_from_bytes(&nan).is_err());

        // A header whose tensor table disagrees with its own config.
        let text = String::from_utf8(good[..nl].to_vec()).unwrap();
        let renamed = text.replacen("lfe.0.0.conv1.kernel", "lfe.0.0.conv9.kernel", 1);
        let mut bad = renamed.into_bytes();
        bad.push(b'\n');
        bad.extend_from_slice(&good[nl + 1..]);
        assert!(model_from_bytes(&bad).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.num_params(), model.num_params());
    }
}
