//! Binary checkpoints: `PRNK`, a u32 version, a u64 entry count, then per
//! entry a u32 name length, the UTF-8 name, a u32 rank, u64 dims and
//! little-endian f64 values.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PRNK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for p in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Reads every entry of a checkpoint into a fresh store.
pub fn load_params(path: &Path) -> Result<ParamStore> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u64("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64("shape").map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (buf.len() - r.pos) / 8)
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading values of {name}")))?;
        let data: Vec<f64> = r
            .take(n * 8, &name)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.add(name, value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last entry", buf.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    save_params(&model.params, path)
}

/// Loads a checkpoint into a model built from `config`. Every parameter of
/// the config must be present with the expected shape.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Model> {
    let store = load_params(path)?;
    let mut model = Model::constant(config.clone(), 0.0)?;
    model.load_values(&store)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::record::TraderRecord;

    fn config(d: usize) -> ModelConfig {
        ModelConfig {
            d_k: d,
            n_heads: 2,
            ff_width: 8,
            n_self_layers: 1,
            n_cross_layers: 1,
            n_continuous: 2,
            vocab_sizes: vec![3],
            dropout: 0.0,
        }
    }

    fn group() -> Vec<TraderRecord> {
        (0..4)
            .map(|i| TraderRecord {
                account_id: i,
                period: 0,
                market: 0,
                continuous: vec![0.1 * i as f64, 0.9 - 0.2 * i as f64],
                categorical: vec![(i % 3) as u32],
                next_total_pl: 0.0,
                next_profit_20: 0.0,
                future_return: 0.0,
                label: 0,
            })
            .collect()
    }

    #[test]
    fn round_trip_gives_identical_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::new(config(8), 3).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path, &config(8)).unwrap();
        assert_eq!(back.params, m.params);
        let g = group();
        let refs: Vec<&TraderRecord> = g.iter().collect();
        let (a, b) = (m.score_group(&refs).unwrap(), back.score_group(&refs).unwrap());
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::new(config(4), 0).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [3, 10, 40, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path, &config(4)), Err(Error::Checkpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::new(config(4), 0).unwrap(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, &config(4)).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn width_mismatch_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::new(config(8), 0).unwrap(), &path).unwrap();
        let err = load_checkpoint(&path, &config(4)).unwrap_err().to_string();
        assert!(err.contains("shape mismatch for embed.cls"), "{err}");
    }
}
