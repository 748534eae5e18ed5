//! On-disk formats: canonical dataset CSV, binary checkpoints and the
//! latent dump CSV.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PIRLCKPT"
//! version  u32      1
//! seed     u64
//! spec     u32 length + UTF-8 JSON of the ModelSpec
//! count    u32      number of tensors
//! tensor   u32 rank, rank x u64 dims, prod(dims) x f64
//! ```
//!
//! Tensors appear in the flat order of `ModelParams::tensors`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pirl_core::analysis::LatentDump;
use pirl_core::data::{self, Dataset};
use pirl_core::models::{self, ModelParams, ModelSpec};
use pirl_core::Tensor;

use crate::error::{format_err, io_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    data::parse_csv(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_file(path, data::to_csv(dataset)?.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let spec = serde_json::to_string(&params.spec).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.seed.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<ModelParams> {
    let fail = |reason: String| format_err(path, reason);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(fail)? != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32().map_err(fail)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let seed = r.u64().map_err(fail)?;
    let spec_len = r.u32().map_err(fail)? as usize;
    let spec: ModelSpec =
        serde_json::from_slice(r.take(spec_len).map_err(fail)?).map_err(|e| fail(format!("model spec: {e}")))?;
    let mut params = models::build(&spec, seed)?;
    let count = r.u32().map_err(fail)? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(fail(format!("{count} tensors stored, spec needs {}", slots.len())));
    }
    for (i, slot) in slots.iter_mut().enumerate() {
        let rank = r.u32().map_err(fail)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        if shape != slot.shape() {
            return Err(fail(format!(
                "tensor {i} has shape {shape:?}, spec needs {:?}",
                slot.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8).map_err(fail)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        **slot = Tensor::new(shape, values)?;
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    write_file(path, &encode_checkpoint(params)?)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(path, &bytes)
}

pub fn latent_dump_csv(dump: &LatentDump) -> String {
    let mut out = String::from("subject_id,label,split");
    for k in 0..dump.latent_dim() {
        write!(out, ",e{k}").unwrap();
    }
    out.push_str(",pc1,pc2\n");
    for row in &dump.rows {
        write!(out, "{},{},{}", row.subject_id, row.label, row.split.name()).unwrap();
        for v in &row.latent {
            write!(out, ",{v}").unwrap();
        }
        writeln!(out, ",{},{}", row.pc1, row.pc2).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use pirl_core::models::Preset;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let spec = ModelSpec::preset(Preset::Clas, 64, 3).unwrap();
        let params = models::build(&spec, 11).unwrap();
        let bytes = encode_checkpoint(&params).unwrap();
        let back = decode_checkpoint(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let spec = ModelSpec::preset(Preset::Clas, 64, 3).unwrap();
        let bytes = encode_checkpoint(&models::build(&spec, 1).unwrap()).unwrap();
        let p = Path::new("mem");
        assert!(decode_checkpoint(p, &bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(p, b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(p, &extra).is_err());
    }
}
