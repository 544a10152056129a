//! Sectioned binary container for f64 matrices.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "CLPN"
//! version u32      1
//! count   u32      number of sections
//! per section:
//!   name_len u16, name bytes (utf-8)
//!   rows u64, dim u64
//!   elem u8        1 = f64 little-endian
//!   payload        rows * dim * 8 bytes
//! ```
//!
//! Writes take an exclusive advisory lock on the target and fsync before
//! returning; round trips are bit-exact.

use super::StoreError;
use crate::numkernel::Matrix;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::os::fd::AsRawFd;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"CLPN";
pub const FORMAT_VERSION: u32 = 1;
pub const ELEM_F64_LE: u8 = 1;

/// A section: a name and its matrix payload.
pub type NamedMatrix = (String, Matrix);

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io { path: path.to_path_buf(), source }
}

/// Writes sections in order. Names must be unique and nonempty; the file
/// is fsynced before return.
pub fn write_embeddings(path: &Path, sections: &[NamedMatrix]) -> Result<(), StoreError> {
    if sections.is_empty() || sections.iter().any(|(n, _)| n.is_empty()) {
        return Err(StoreError::EmptySections);
    }
    for (i, (name, _)) in sections.iter().enumerate() {
        if sections[..i].iter().any(|(n, _)| n == name) {
            return Err(StoreError::DuplicateSection(name.clone()));
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    // advisory exclusive lock for the duration of the write
    let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) };
    if rc != 0 {
        return Err(io_err(path, std::io::Error::last_os_error()));
    }
    let mut w = BufWriter::new(&file);
    (|| -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(sections.len() as u32).to_le_bytes())?;
        for (name, m) in sections {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            w.write_all(&[ELEM_F64_LE])?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))?;
    drop(w);
    file.sync_all().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads all sections, validating magic, version, element type and exact
/// payload lengths. Trailing bytes after the final section are rejected.
pub fn read_embeddings(path: &Path) -> Result<Vec<NamedMatrix>, StoreError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| StoreError::BadSectionName)?;
        let rows = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let mut elem = [0u8; 1];
        read_exact(&mut r, &mut elem)?;
        if elem[0] != ELEM_F64_LE {
            return Err(StoreError::UnsupportedElemType(elem[0]));
        }
        let len = rows.checked_mul(dim).ok_or(StoreError::Truncated)?;
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            read_exact(&mut r, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        if out.iter().any(|(n, _): &NamedMatrix| n == &name) {
            return Err(StoreError::DuplicateSection(name));
        }
        out.push((name, Matrix::from_vec(rows, dim, data)?));
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(StoreError::TrailingBytes),
        Err(e) => return Err(io_err(path, e)),
    }
    Ok(out)
}

/// Finds a section by name.
pub fn find_section<'a>(
    sections: &'a [NamedMatrix],
    name: &str,
) -> Result<&'a Matrix, StoreError> {
    sections
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m)
        .ok_or_else(|| StoreError::MissingSection(name.to_string()))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|_| StoreError::Truncated)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, StoreError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, StoreError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
