//! Versioned binary checkpoint container for model parameters.
//!
//! Layout: magic, format version, a `kind` tag identifying the model type,
//! a JSON configuration blob, then named f64 arrays. Everything is
//! little-endian; loading verifies magic, version, and kind before touching
//! parameters, and parameter names and shapes must match the receiving
//! model exactly.

use crate::error::{Error, Result};
use crate::nn::Params;
use ndarray::ArrayD;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MARIONET";
pub const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::missing(format!("checkpoint not found: {}", path.display()))
    } else {
        Error::io(path.display().to_string(), e)
    }
}

/// Save `params` under a model `kind` tag with an arbitrary JSON config.
pub fn save(path: &Path, kind: &str, config: &serde_json::Value, params: &Params) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let kind_bytes = kind.as_bytes();
    buf.extend_from_slice(&(kind_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(kind_bytes);
    let config_bytes = serde_json::to_vec(config)?;
    buf.extend_from_slice(&(config_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config_bytes);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, array) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
        for &d in array.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in array.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    inner: std::io::BufReader<std::fs::File>,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::validation(format!("truncated checkpoint: {}", self.path.display())))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.bytes(len)?)
            .map_err(|_| Error::validation(format!("corrupt checkpoint: {}", self.path.display())))
    }
}

/// Load a checkpoint, returning its config and named arrays. The `kind`
/// must match what was saved.
pub fn load(path: &Path, kind: &str) -> Result<(serde_json::Value, Vec<(String, ArrayD<f64>)>)> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader { path, inner: std::io::BufReader::new(file) };
    if r.bytes(8)?.as_slice() != MAGIC {
        return Err(Error::validation(format!("not a checkpoint file: {}", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::validation(format!(
            "checkpoint {} has format version {version}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let kind_len = r.u32()? as usize;
    let stored_kind = r.string(kind_len)?;
    if stored_kind != kind {
        return Err(Error::validation(format!(
            "checkpoint {} holds a '{stored_kind}' model, expected '{kind}'",
            path.display()
        )));
    }
    let config_len = r.u64()? as usize;
    let config: serde_json::Value = serde_json::from_slice(&r.bytes(config_len)?)?;
    let n_arrays = r.u64()? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(r.bytes(8)?.try_into().unwrap()));
        }
        let array = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|_| Error::validation(format!("corrupt checkpoint: {}", path.display())))?;
        arrays.push((name, array));
    }
    Ok((config, arrays))
}

/// Load a checkpoint directly into an existing parameter set. Every stored
/// array must exist with the same shape, and every parameter must be
/// covered.
pub fn load_into(path: &Path, kind: &str, params: &mut Params) -> Result<serde_json::Value> {
    let (config, arrays) = load(path, kind)?;
    if arrays.len() != params.len() {
        return Err(Error::validation(format!(
            "checkpoint {} holds {} arrays but the model has {} parameters",
            path.display(),
            arrays.len(),
            params.len()
        )));
    }
    for (name, array) in arrays {
        params
            .set_by_name(&name, array)
            .map_err(|e| Error::validation(format!("checkpoint {}: {e}", path.display())))?;
    }
    Ok(config)
}
