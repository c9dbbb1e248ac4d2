use std::path::{Path, PathBuf};

use super::config::ModelConfig;
use super::model::SurvMambaModel;
use crate::error::{Error, Result};
use crate::hierarchy::GroupingConfig;
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";

/// Little-endian layout: magic, `u32` count, then per parameter `u32` name
/// length, name bytes, `u32` rank, `u64` dims, `f64` payload.
pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * store.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(self.path, format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::parse(self.path, "dimension overflows usize"))
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, "not a checkpoint (bad magic)"));
    }
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(path, format!("{name}: shape overflows")))?;
        let payload = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::parse(path, "payload overflows"))?,
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

/// Model config is stored next to the weights as `<ckpt>.json`.
pub fn config_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_checkpoint(model: &SurvMambaModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_params(&model.store)).map_err(|e| Error::io(path, e))?;
    model.config.save(&config_path(path))
}

/// Copy checkpoint tensors into a store with the same names and shapes.
pub fn restore_params(store: &mut ParamStore, params: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::parse(
            path,
            format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                store.len()
            ),
        ));
    }
    for (name, t) in params {
        let slot = store
            .by_name_mut(&name)
            .ok_or_else(|| Error::parse(path, format!("unexpected parameter {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::parse(
                path,
                format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                ),
            ));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Rebuild the architecture for `grouping` and `d_raw`, then load weights.
pub fn load_checkpoint(path: &Path, d_raw: usize, grouping: &GroupingConfig) -> Result<SurvMambaModel> {
    let config = ModelConfig::load(&config_path(path))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_params(&bytes, path)?;
    let mut model = SurvMambaModel::new(&config, d_raw, grouping, 0)?;
    restore_params(&mut model.store, params, path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_of_one_scalar() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::scalar(1.5)).unwrap();
        let bytes = encode_params(&store);
        let mut expect = b"SMCK".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'a');
        expect.extend_from_slice(&0u32.to_le_bytes());
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expect);
        let back = decode_params(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, vec![("a".to_string(), Tensor::scalar(1.5))]);
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[2, 3])).unwrap();
        let bytes = encode_params(&store);
        let p = Path::new("m.ckpt");
        assert!(decode_params(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_params(&bad, p).is_err());
        bad = bytes;
        bad.push(0);
        assert!(decode_params(&bad, p).is_err());
    }
}
