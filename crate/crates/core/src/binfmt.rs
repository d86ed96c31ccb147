//! Little-endian binary primitives shared by the checkpoint and membership
//! matrix formats, plus the content hash used for artifact compatibility
//! checks.
//!
//! Every versioned binary starts with the magic `SBLM`, a `u32` format
//! version, and a `u8` payload kind. Strings and byte blocks are
//! length-prefixed with a `u32`. All integers and floats are little-endian.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SBLM";
pub const FORMAT_VERSION: u32 = 1;

/// Payload kinds distinguishing the binaries that share the container format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Checkpoint = 1,
    MembershipMatrix = 2,
}

pub fn write_magic(w: &mut impl Write, kind: Kind) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[kind as u8])
}

pub fn read_magic(r: &mut impl Read, expect: Kind) -> Result<()> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {} (this build reads {})",
            version, FORMAT_VERSION
        )));
    }
    let mut kind = [0u8; 1];
    read_exact(r, &mut kind)?;
    if kind[0] != expect as u8 {
        return Err(Error::Format(format!(
            "payload kind {} where {} was expected",
            kind[0], expect as u8
        )));
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated file: {}", e)))
}

pub fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("unreasonable string length {}", len)));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("non-UTF-8 string: {}", e)))
}

/// Writes a tensor as a rank, the dimensions, and the row-major f32 payload.
pub fn write_tensor_f32(w: &mut impl Write, shape: &[usize], data: &[f32]) -> io::Result<()> {
    write_u32(w, shape.len() as u32)?;
    for &d in shape {
        write_u64(w, d as u64)?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_f32(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f32>)> {
    let rank = read_u32(r)? as usize;
    if rank > 4 {
        return Err(Error::Format(format!("unreasonable tensor rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let len: usize = shape.iter().product();
    if len > 1 << 30 {
        return Err(Error::Format(format!("unreasonable tensor size {}", len)));
    }
    let mut data = Vec::with_capacity(len);
    let mut b = [0u8; 4];
    for _ in 0..len {
        read_exact(r, &mut b)?;
        data.push(f32::from_le_bytes(b));
    }
    Ok((shape, data))
}

/// 64-bit FNV-1a over raw bytes. Used to stamp vocab/lexicon/config content
/// into checkpoint headers; it is an integrity check, not a cryptographic one.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Content hash of a file on disk.
pub fn hash_file(path: &std::path::Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(fnv1a(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magic_round_trip() {
        let mut buf = Vec::new();
        write_magic(&mut buf, Kind::Checkpoint).unwrap();
        read_magic(&mut &buf[..], Kind::Checkpoint).unwrap();
        assert!(read_magic(&mut &buf[..], Kind::MembershipMatrix).is_err());
    }

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let data = vec![0.5f32, -1.25, 3.0e-8, f32::MIN_POSITIVE];
        let mut buf = Vec::new();
        write_tensor_f32(&mut buf, &[2, 2], &data).unwrap();
        let (shape, back) = read_tensor_f32(&mut &buf[..]).unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(
            data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncation_is_a_format_error() {
        let mut buf = Vec::new();
        write_magic(&mut buf, Kind::Checkpoint).unwrap();
        buf.truncate(3);
        assert!(matches!(
            read_magic(&mut &buf[..], Kind::Checkpoint),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn fnv1a_known_value() {
        // Reference value for "hello" from the FNV-1a specification.
        assert_eq!(fnv1a(b"hello"), 0xa430d84680aabd0b);
    }
}
