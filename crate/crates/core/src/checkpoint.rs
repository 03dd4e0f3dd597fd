//! Binary parameter checkpoints.
//!
//! Layout: `b"MOME"`, format version (`u32` LE), then one record per
//! parameter until end of file: name length (`u32` LE), UTF-8 name, rank
//! (`u32` LE), each dim (`u64` LE), and the `f64` LE payload in row-major
//! order.

use std::io::{ErrorKind, Read, Write};

use crate::error::{MomeError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MOME";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &ParamSet, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for id in params.ids() {
        write_tensor(&mut w, params.name(id), params.value(id))?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let name = name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads records until a clean end of file.
pub fn read_params<R: Read>(mut r: R) -> Result<ParamSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| MomeError::Format("truncated checkpoint header".into()))?;
    if &magic != MAGIC {
        return Err(MomeError::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(MomeError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut params = ParamSet::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let (name, tensor) = read_record(&mut r, u32::from_le_bytes(len) as usize).map_err(|e| match e {
            MomeError::Io(io) if io.kind() == ErrorKind::UnexpectedEof => {
                MomeError::Format("truncated checkpoint record".into())
            }
            other => other,
        })?;
        params.insert(name, tensor)?;
    }
    Ok(params)
}

fn read_record<R: Read>(r: &mut R, name_len: usize) -> Result<(String, Tensor)> {
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| MomeError::Format("parameter name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}
