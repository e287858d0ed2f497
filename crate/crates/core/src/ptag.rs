//! PTAG binary tag files.
//!
//! Layout, all little-endian:
//!
//! | bytes  | field                 |
//! |--------|-----------------------|
//! | 0..4   | magic `"PTAG"`        |
//! | 4..6   | version, `u16` = 1    |
//! | 6..10  | resolution_ps, `u32`  |
//! | 10..18 | tag count, `u64`      |
//!
//! followed by `count` 16-byte records: `u64` time, `u8` channel, 7 zero bytes.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::tagstream::{TagError, TagStream};

pub const MAGIC: &[u8; 4] = b"PTAG";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 18;
pub const RECORD_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum PtagError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"PTAG\"")]
    BadMagic([u8; 4]),
    #[error("unsupported PTAG version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated: header needs {HEADER_LEN} bytes, got {0}")]
    TruncatedHeader(usize),
    #[error("file truncated: header announces {expected} tags but only {available} complete records follow")]
    TruncatedRecord { expected: u64, available: u64 },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("record {0} has nonzero padding")]
    NonZeroPadding(u64),
    #[error("resolution of 0 ps or above u32::MAX cannot be encoded")]
    BadResolution,
    #[error("payload violates stream invariants: {0}")]
    Unsorted(TagError),
}

/// Encodes a stream into PTAG bytes.
pub fn encode(stream: &TagStream) -> Result<Vec<u8>, PtagError> {
    let res = u32::try_from(stream.resolution_ps()).map_err(|_| PtagError::BadResolution)?;
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    write_to(&mut out, stream, res)?;
    Ok(out)
}

fn write_to<W: Write>(w: &mut W, stream: &TagStream, res: u32) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&res.to_le_bytes())?;
    w.write_all(&(stream.len() as u64).to_le_bytes())?;
    let mut rec = [0u8; RECORD_LEN];
    for tag in stream.iter() {
        rec[..8].copy_from_slice(&tag.t_ps.to_le_bytes());
        rec[8] = tag.channel;
        w.write_all(&rec)?;
    }
    Ok(())
}

/// Decodes PTAG bytes, rejecting anything that is not a valid stream.
pub fn decode(bytes: &[u8]) -> Result<TagStream, PtagError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(PtagError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(PtagError::TruncatedHeader(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(PtagError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(PtagError::UnsupportedVersion(version));
    }
    let res = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if res == 0 {
        return Err(PtagError::BadResolution);
    }
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    let available = (payload.len() / RECORD_LEN) as u64;
    if available < count {
        return Err(PtagError::TruncatedRecord {
            expected: count,
            available,
        });
    }
    let used = count as usize * RECORD_LEN;
    if payload.len() > used {
        return Err(PtagError::TrailingBytes(payload.len() - used));
    }
    let mut times = Vec::with_capacity(count as usize);
    let mut channels = Vec::with_capacity(count as usize);
    for (i, rec) in payload.chunks_exact(RECORD_LEN).enumerate() {
        if rec[9..].iter().any(|&b| b != 0) {
            return Err(PtagError::NonZeroPadding(i as u64));
        }
        times.push(u64::from_le_bytes(rec[..8].try_into().unwrap()));
        channels.push(rec[8]);
    }
    TagStream::from_columns(times, channels, res as u64).map_err(PtagError::Unsorted)
}

pub fn write_tag_file(stream: &TagStream, path: impl AsRef<Path>) -> Result<(), PtagError> {
    let res = u32::try_from(stream.resolution_ps()).map_err(|_| PtagError::BadResolution)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_to(&mut w, stream, res)?;
    w.flush()?;
    Ok(())
}

pub fn read_tag_file(path: impl AsRef<Path>) -> Result<TagStream, PtagError> {
    decode(&fs::read(path)?)
}
