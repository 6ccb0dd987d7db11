//! Binary parameter checkpoints.
//!
//! Little-endian: magic `S2VP`, u16 version, u32 tensor count; then per
//! tensor a u32 name length, the UTF-8 name, u8 rank, u32 extents and the
//! values as 32-bit floats.

use std::io::Write;
use std::path::Path;

use super::optim::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;
use crate::io::ByteReader;

pub const MAGIC: &[u8; 4] = b"S2VP";
pub const VERSION: u16 = 1;

pub fn encode(params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<ParamSet<f32>> {
    let mut r = ByteReader::new(bytes, origin);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?.to_vec()).map_err(|_| r.error("tensor name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| r.error(e.to_string()))?;
        params.push(name, t);
    }
    r.finish()?;
    Ok(params)
}

pub fn write(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<ParamSet<f32>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}
