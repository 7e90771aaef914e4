//! `GENIRIDX` binary format, little-endian:
//!
//! ```text
//! magic    8 bytes  "GENIRIDX"
//! version  u32      1
//! dim      u32
//! count    u64
//! count × { id_len u16, id UTF-8 bytes, dim × f32 }
//! ```
//!
//! No padding and no checksum. Locators are not stored; loaded records use
//! their id as locator.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{IndexError, IndexSnapshot};
use crate::embedding::Embedding;

pub const FILE_MAGIC: &[u8; 8] = b"GENIRIDX";
pub const FILE_VERSION: u32 = 1;

pub fn write_index<W: Write>(index: &IndexSnapshot<f32>, mut w: W) -> Result<(), IndexError> {
    w.write_all(FILE_MAGIC)?;
    w.write_all(&FILE_VERSION.to_le_bytes())?;
    let dim = u32::try_from(index.dim())
        .map_err(|_| IndexError::Corrupt(format!("dim {} exceeds u32", index.dim())))?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(index.len() as u64).to_le_bytes())?;
    let mut row = Vec::with_capacity(index.dim() * 4);
    for i in 0..index.len() {
        let id = index.id_at(i).as_bytes();
        // ids are validated to fit in u16 at build
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        row.clear();
        for x in index.vector_at(i) {
            row.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_index(index: &IndexSnapshot<f32>, path: impl AsRef<Path>) -> Result<(), IndexError> {
    let f = File::create(path)?;
    write_index(index, BufWriter::new(f))
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), IndexError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => IndexError::TruncatedFile,
        _ => IndexError::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, IndexError> {
    let mut b = [0u8; 2];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IndexError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, IndexError> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads an index. When `expected_dim` is given, a file of another width is
/// rejected with `DimensionMismatch`.
pub fn read_index<R: Read>(
    mut r: R,
    expected_dim: Option<usize>,
) -> Result<IndexSnapshot<f32>, IndexError> {
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if &magic != FILE_MAGIC {
        return Err(IndexError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != FILE_VERSION {
        return Err(IndexError::UnsupportedVersion(version));
    }
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 {
        return Err(IndexError::Corrupt("dim is zero".into()));
    }
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(IndexError::DimensionMismatch {
                expected,
                actual: dim,
            });
        }
    }
    let count = read_u64(&mut r)?;
    let count = usize::try_from(count)
        .map_err(|_| IndexError::Corrupt(format!("count {count} exceeds address space")))?;
    // cap the up-front reservation; a corrupt count must not allocate wildly
    let mut index = IndexSnapshot::with_capacity(dim, count.min(1 << 16));
    let mut row = vec![0u8; dim * 4];
    for _ in 0..count {
        let id_len = read_u16(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        read_exact_or_truncated(&mut r, &mut id)?;
        let id = String::from_utf8(id)
            .map_err(|e| IndexError::Corrupt(format!("id is not UTF-8: {e}")))?;
        if id.is_empty() {
            return Err(IndexError::InvalidId(id));
        }
        read_exact_or_truncated(&mut r, &mut row)?;
        let values: Vec<f32> = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let values = Embedding::from_unit_unchecked(values)
            .map_err(|e| IndexError::BadEmbedding {
                id: id.clone(),
                source: e,
            })?
            .into_vec();
        index.push(id.clone(), id, values)?;
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(index),
        _ => Err(IndexError::Corrupt("trailing bytes after last record".into())),
    }
}

pub fn load_index(path: impl AsRef<Path>) -> Result<IndexSnapshot<f32>, IndexError> {
    let f = File::open(path)?;
    read_index(BufReader::new(f), None)
}
