//! `DACK` checkpoints: magic, version, config text, then parameters sorted
//! by name, each as name, shape and little-endian `f64` data. All integers
//! are little-endian `u32`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelError, ParamStore, PipelineConfig, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"DACK";
pub const CKPT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(cfg: &PipelineConfig, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut out, CKPT_VERSION as usize);
    let text = cfg.to_string();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, params.tensors.len());
    for (name, t) in &params.tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(ModelError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more of {})",
                self.at,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| ModelError::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(PipelineConfig, ParamStore)> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(ModelError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION as usize {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let cfg = PipelineConfig::parse_text(r.text("config")?)?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let name = r.text("parameter name")?.to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(ModelError::Checkpoint(format!(
                "parameter {name} out of order"
            )));
        }
        let rank = r.u32()?;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name.clone(), Tensor::new(shape, data)?);
        last = Some(name);
    }
    if r.at != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    let params = ParamStore { tensors };
    params.check_against(&cfg)?;
    Ok((cfg, params))
}

pub fn save_checkpoint(path: &Path, cfg: &PipelineConfig, params: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, params)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(PipelineConfig, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
