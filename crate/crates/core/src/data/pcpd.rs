//! `PCPD` dataset files.
//!
//! ```text
//! "PCPD" | version u32 = 1 | record count u64
//! per record: n u32 | part_count u16 | stage u8 | n x (x, y, z f32, label u16)
//! ```
//!
//! All integers and floats are little-endian. A record with `part_count = 0`
//! is an unlabelled cloud; its label fields are written as zero.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AnnotatedCloud, Stage};
use crate::error::{Error, Result};
use crate::geometry::{PartLabelMap, PointSet};

pub const MAGIC: &[u8; 4] = b"PCPD";
pub const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn eof_as_format(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        format_err("dataset truncated")
    } else {
        Error::Io(e)
    }
}

pub fn write_dataset<W: Write>(mut w: W, clouds: &[AnnotatedCloud]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(clouds.len() as u64).to_le_bytes())?;
    for c in clouds {
        let n = u32::try_from(c.len()).map_err(|_| format_err("cloud too large"))?;
        let parts = c.part_count();
        let parts = u16::try_from(parts).map_err(|_| format_err(format!("{parts} parts exceed u16")))?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&parts.to_le_bytes())?;
        w.write_all(&[c.stage as u8])?;
        let labels = c.labels.as_ref().map(|l| l.labels());
        let mut buf = Vec::with_capacity(c.len() * 14);
        for (i, p) in c.points.coords().iter().enumerate() {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            let l = labels.map_or(0, |l| l[i] as u16);
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<AnnotatedCloud>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_format)?;
    if &magic != MAGIC {
        return Err(format_err("bad magic, not a PCPD dataset"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(eof_as_format)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(format_err(format!("unsupported PCPD version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(eof_as_format)?;
    let count = u64::from_le_bytes(b8);
    let mut clouds = Vec::new();
    for id in 0..count {
        let mut head = [0u8; 7];
        r.read_exact(&mut head).map_err(eof_as_format)?;
        let n = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
        let parts = u16::from_le_bytes(head[4..6].try_into().unwrap()) as usize;
        let stage = Stage::from_u8(head[6]).ok_or_else(|| format_err(format!("record {id}: unknown stage {}", head[6])))?;
        if n == 0 {
            return Err(format_err(format!("record {id} has no points")));
        }
        if n > 1 << 26 {
            return Err(format_err(format!("record {id}: implausible point count {n}")));
        }
        let mut buf = vec![0u8; n * 14];
        r.read_exact(&mut buf).map_err(eof_as_format)?;
        let mut coords = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for rec in buf.chunks_exact(14) {
            let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
            coords.push([f(0), f(4), f(8)]);
            labels.push(u16::from_le_bytes(rec[12..14].try_into().unwrap()) as u32);
        }
        let points = PointSet::new(coords).map_err(|e| format_err(format!("record {id}: {e}")))?;
        let labels = if parts == 0 {
            None
        } else {
            Some(PartLabelMap::new(labels, parts).map_err(|e| format_err(format!("record {id}: {e}")))?)
        };
        clouds.push(AnnotatedCloud { id, points, labels, stage });
    }
    Ok(clouds)
}

pub fn dataset_write(clouds: &[AnnotatedCloud], path: impl AsRef<Path>) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), clouds)
}

pub fn dataset_read(path: impl AsRef<Path>) -> Result<Vec<AnnotatedCloud>> {
    read_dataset(BufReader::new(File::open(path)?))
}
