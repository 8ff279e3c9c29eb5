//! Checkpoint file format.
//!
//! Layout: magic `LIDC`, version u32, 32-byte config digest, then a
//! sequence of records `(name_len u32, name utf-8, rank u32, dims u32 x
//! rank, float32 little-endian payload)` until end of file. Tensors are
//! written in sorted name order, so a given parameter set always produces
//! identical bytes.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::params::tensor_specs;
use super::tensor::{ParameterSet, Tensor};

const MAGIC: &[u8; 4] = b"LIDC";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<std::fs::File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    put(&mut w, MAGIC)?;
    put(&mut w, &VERSION.to_le_bytes())?;
    put(&mut w, &cfg.digest())?;
    for (name, t) in params.iter() {
        put(&mut w, &(name.len() as u32).to_le_bytes())?;
        put(&mut w, name.as_bytes())?;
        put(&mut w, &(t.dims().len() as u32).to_le_bytes())?;
        for &d in t.dims() {
            put(&mut w, &(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            put(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A checkpoint as stored: its config digest and raw tensors.
pub struct RawCheckpoint {
    pub digest: [u8; 32],
    pub params: ParameterSet<f32>,
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 4];
    r.read_exact(&mut head)
        .map_err(|e| Error::io(path, e))?;
    if &head != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(|e| Error::io(path, e))?;
    let mut params = ParameterSet::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: invalid tensor name", path.display())))?;
        r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > 3 {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {name} has rank {rank}",
                path.display()
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
            dims.push(u32::from_le_bytes(word) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(&dims, data));
    }
    Ok(RawCheckpoint { digest, params })
}

/// Strict load: the stored digest must match `cfg` and every tensor must
/// have the expected name and shape.
pub fn load_params(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ParameterSet<f32>> {
    let path = path.as_ref();
    let raw = read_checkpoint(path)?;
    if raw.digest != cfg.digest() {
        return Err(Error::Checkpoint(format!(
            "{}: config digest mismatch (pass reinit_head to transfer across head sizes)",
            path.display()
        )));
    }
    verify_shapes(&raw.params, cfg, path)?;
    Ok(raw.params)
}

pub(crate) fn verify_shapes(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    path: &Path,
) -> Result<()> {
    let specs = tensor_specs(cfg);
    if specs.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} tensors stored, {} expected",
            path.display(),
            params.len(),
            specs.len()
        )));
    }
    for spec in specs {
        match params.try_get(&spec.name) {
            Some(t) if t.dims() == spec.dims.as_slice() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor {} has shape {:?}, expected {:?}",
                    path.display(),
                    spec.name,
                    t.dims(),
                    spec.dims
                )))
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "{}: missing tensor {}",
                    path.display(),
                    spec.name
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig::tiny();
        let params = init_params::<f32>(&cfg, 3);
        save_checkpoint(&path, &cfg, &params).unwrap();
        let back = load_params(&path, &cfg).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let params = init_params::<f32>(&cfg, 5);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &cfg, &params).unwrap();
        save_checkpoint(&p2, &cfg, &params).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn digest_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig::tiny();
        save_checkpoint(&path, &cfg, &init_params::<f32>(&cfg, 0)).unwrap();
        let other = ModelConfig::tiny().with_classes(8);
        let err = load_params(&path, &other).unwrap_err();
        assert!(err.to_string().contains("digest mismatch"));
    }
}
