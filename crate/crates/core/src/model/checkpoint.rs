//! Flat named-array checkpoints: a magic tag, the model config as JSON, then
//! every parameter as (name, shape, little-endian f64 data) in registration
//! order. Writing is fully deterministic, so equal models produce equal files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{KatConfig, KatModel};
use crate::tensor::ParamStore;

const MAGIC: &[u8; 8] = b"KATCKPT1";

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &KatConfig, params: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let cfg_json = serde_json::to_vec(cfg)?;
    w.write_all(&(cfg_json.len() as u64).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (_, name, tensor) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape.len() as u64).to_le_bytes())?;
        for &dim in &tensor.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(KatConfig, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint file".into()));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let cfg: KatConfig = serde_json::from_slice(&cfg_buf)?;
    let n = read_u64(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("checkpoint has a non-UTF-8 parameter name".into()))?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        arrays.push((name, shape, data));
    }
    Ok((cfg, arrays))
}

impl KatModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.cfg, &self.params)
    }

    /// Rebuild a model from a checkpoint. Every parameter in the file must
    /// match a model parameter by name and shape, and cover the model
    /// completely.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (cfg, arrays) = load_checkpoint(path)?;
        let mut model = KatModel::new(cfg, 0)?;
        if arrays.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                arrays.len(),
                model.params.len()
            )));
        }
        for (name, shape, data) in arrays {
            let id = model
                .params
                .id_of(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name} in checkpoint")))?;
            let t = model.params.get_mut(id);
            if t.shape != shape {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {shape:?} vs model {:?}",
                    t.shape
                )));
            }
            t.data = data;
        }
        Ok(model)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> KatConfig {
        KatConfig {
            vocab_size: 13,
            d_model: 8,
            n_heads: 2,
            ff_dim: 12,
            enc_layers: 1,
            dec_layers: 1,
            ke_layers: 1,
            max_src_len: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = KatModel::new(cfg(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = KatModel::load(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        for ((_, na, ta), (_, nb, tb)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            // bitwise equality, not approximate
            let a: Vec<u64> = ta.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = tb.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{na}");
        }
    }

    #[test]
    fn identical_models_serialize_to_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        KatModel::new(cfg(), 7).unwrap().save(&p1).unwrap();
        KatModel::new(cfg(), 7).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"JUNKJUNKandmore").unwrap();
        assert!(matches!(KatModel::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn load_rejects_truncated_file() {
        let model = KatModel::new(cfg(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(KatModel::load(&path).is_err());
    }

    #[test]
    fn parameter_names_carry_partition_prefixes_on_disk() {
        let model = KatModel::new(cfg(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("named.ckpt");
        model.save(&path).unwrap();
        let (_, arrays) = load_checkpoint(&path).unwrap();
        assert!(arrays.iter().any(|(n, _, _)| n == "theta_d.tok_emb"));
        assert!(arrays.iter().any(|(n, _, _)| n == "theta_k.kib.0.wq"));
        assert!(arrays.iter().any(|(n, _, _)| n == "theta_a.ctrl.0.w"));
        assert!(arrays
            .iter()
            .all(|(n, _, _)| crate::model::Partition::of(n).is_some()));
    }
}
