//! `S2AM` tensor bundles.
//!
//! Layout (little endian): magic `S2AM`, version `u32 = 1`, tensor count
//! `u32`, then per tensor: name length `u16`, UTF-8 name, `ndim: u8`,
//! `ndim` dims as `u32`, and the binary32 payload.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"S2AM";
pub const VERSION: u32 = 1;

fn fmt_err(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn write_bundle<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("too many dims: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[ndim])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim too large: {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(fmt_err)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_bundle<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt_err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(fmt_err)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name).map_err(fmt_err)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut nd = [0u8; 1];
        r.read_exact(&mut nd).map_err(fmt_err)?;
        let mut shape = Vec::with_capacity(nd[0] as usize);
        for _ in 0..nd[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        // Refuse absurd sizes before allocating.
        if n > (1 << 30) {
            return Err(Error::Format(format!("tensor {name} too large")));
        }
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(fmt_err)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_bundle(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    write_bundle(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_bundle(BufReader::new(File::open(path)?))
}
