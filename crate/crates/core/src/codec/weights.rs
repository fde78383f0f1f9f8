//! `ELFW` weight files: named f32 tensors, upcast to f64 on load.
//!
//! Besides the parameters, a file carries the model configuration
//! (`config.<key>`, one value each) and the normalization statistics
//! (`norm.<name>.mean`, `norm.<name>.variance`, `norm.<name>.state`).

use super::config::ModelConfig;
use super::frame::Reader;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"ELFW";
pub const WEIGHTS_VERSION: u8 = 1;

/// Serializes `(name, tensor)` pairs in order.
pub fn write_tensors(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(Error::Format(format!("tensor {name:?} cannot be stored")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let fmt = |e: Error| match e {
        Error::Corrupt(m) => Error::Format(format!("weights: {m}")),
        e => e,
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(fmt)? != WEIGHTS_MAGIC {
        return Err(Error::Format("not an ELFW weight file".into()));
    }
    let version = r.u8().map_err(fmt)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let count = r.u32().map_err(fmt)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u16().map_err(fmt)? as usize;
        let name = std::str::from_utf8(r.take(n).map_err(fmt)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8().map_err(fmt)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().map_err(fmt)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} has an impossible shape")))?;
        let raw = r.take(numel * 4).map_err(fmt)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

/// Every stored tensor of a model, in file order.
pub fn model_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let mut pairs = model.config.to_pairs();
    pairs.push(("init_seed", model.config.init_seed as f64));
    for (k, v) in pairs {
        out.push((format!("config.{k}"), Tensor::scalar(v)));
    }
    for (name, s) in model.norms.iter_named() {
        let c = s.channels();
        out.push((format!("norm.{name}.mean"), Tensor::new(vec![c], s.mean.clone()).unwrap()));
        out.push((format!("norm.{name}.variance"), Tensor::new(vec![c], s.variance.clone()).unwrap()));
        out.push((
            format!("norm.{name}.state"),
            Tensor::new(vec![2], vec![s.step_count as f64, s.frozen as u8 as f64]).unwrap(),
        ));
    }
    for (name, t) in model.params.names().iter().zip(model.params.values()) {
        out.push((name.clone(), t.clone()));
    }
    out
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    write_tensors(&model_tensors(model))
}

/// Rebuilds a model from a weight file's bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let tensors = read_tensors(bytes)?;
    let mut pairs = BTreeMap::new();
    for (name, t) in &tensors {
        if let Some(k) = name.strip_prefix("config.") {
            if t.numel() != 1 {
                return Err(Error::Format(format!("{name} must hold one value")));
            }
            pairs.insert(k.to_string(), t.data()[0]);
        }
    }
    let config = ModelConfig::from_pairs(&pairs)?;
    let mut model = Model::new(config)?;
    let mut seen = vec![false; model.params.len()];
    for (name, t) in tensors {
        if name.starts_with("config.") {
            continue;
        }
        if let Some(rest) = name.strip_prefix("norm.") {
            let (set, field) = rest
                .rsplit_once('.')
                .ok_or_else(|| Error::Format(format!("bad norm tensor {name:?}")))?;
            let stats = model
                .norms
                .get_mut(set)
                .ok_or_else(|| Error::Format(format!("unknown norm set {set:?}")))?;
            let c = stats.channels();
            let want = if field == "state" { 2 } else { c };
            if t.shape() != [want] {
                return Err(Error::Format(format!("{name}: shape {:?}, expected [{want}]", t.shape())));
            }
            match field {
                "mean" => stats.mean = t.into_data(),
                "variance" => stats.variance = t.into_data(),
                "state" => {
                    stats.step_count = t.data()[0] as u64;
                    stats.frozen = t.data()[1] != 0.0;
                }
                _ => return Err(Error::Format(format!("unknown norm field {name:?}"))),
            }
            continue;
        }
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name:?}")))?;
        if model.params.get(id).shape() != t.shape() {
            return Err(Error::Format(format!(
                "{name}: shape {:?}, model expects {:?}",
                t.shape(),
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = t;
        seen[id] = true;
    }
    if let Some(id) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("missing tensor {:?}", model.params.name(id))));
    }
    Ok(model)
}

/// Rounds every stored value to f32, so an in-memory model behaves exactly
/// like the same model after a save/load cycle.
pub fn round_to_storage(model: &mut Model) {
    for t in model.params.values_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    for s in [
        &mut model.norms.intra,
        &mut model.norms.flow,
        &mut model.norms.residue,
        &mut model.norms.predictor,
    ] {
        for v in s.mean.iter_mut().chain(s.variance.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

/// First 8 bytes of the SHA-256 of the serialized weights, little-endian.
pub fn model_hash(model: &Model) -> Result<u64> {
    let digest = Sha256::digest(model_to_bytes(model)?);
    Ok(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_stable() {
        let mut cfg = ModelConfig::tiny();
        cfg.init_seed = 9;
        let mut m = Model::new(cfg).unwrap();
        m.norms.flow.mean[3] = 0.25;
        m.norms.flow.step_count = 17;
        m.norms.intra.freeze();
        round_to_storage(&mut m);
        let bytes = model_to_bytes(&m).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.norms, m.norms);
        assert_eq!(back.params.values(), m.params.values());
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
        assert_eq!(model_hash(&back).unwrap(), model_hash(&m).unwrap());
    }

    #[test]
    fn hash_tracks_weights() {
        let a = Model::new(ModelConfig::tiny()).unwrap();
        let mut b = a.clone();
        b.params.get_mut(0).data_mut()[0] += 0.5;
        assert_ne!(model_hash(&a).unwrap(), model_hash(&b).unwrap());
    }

    #[test]
    fn layout_is_little_endian_f32() {
        let bytes = write_tensors(&[("w".into(), Tensor::new(vec![2], vec![1.0, -2.5]).unwrap())]).unwrap();
        let mut want = b"ELFW\x01".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'w');
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(read_tensors(&bytes).unwrap()[0].1.data(), &[1.0, -2.5]);
    }

    #[test]
    fn malformed_files_are_format_errors() {
        assert!(matches!(read_tensors(b"ELFX\x01\0\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(read_tensors(b"ELFW\x01\x05\0\0\0"), Err(Error::Format(_))));
        let mut huge = b"ELFW\x01\x01\0\0\0\x01\0w\x02".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(read_tensors(&huge), Err(Error::Format(_))));
    }
}
