//! Binary snapshots of weight vectors and pruning masks.
//!
//! Both formats are deliberately dumb: a magic tag, a format version,
//! explicit lengths, then little-endian payload. Dumb formats make
//! byte-identical reruns easy to verify with a checksum and keep the
//! reader honest about truncation and corruption.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::pruning::PruningMask;

const WEIGHTS_MAGIC: &[u8; 4] = b"FLWV";
const MASK_MAGIC: &[u8; 4] = b"FLMK";
const FORMAT_VERSION: u8 = 1;

/// Refuse to allocate for obviously corrupt length fields (a desk-scale
/// model is orders of magnitude smaller).
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a {expected} snapshot (magic {got:02x?})")]
    BadMagic {
        expected: &'static str,
        got: [u8; 4],
    },
    #[error("unsupported snapshot format version {0}")]
    UnsupportedVersion(u8),
    #[error("snapshot declares an implausible element count {0}")]
    ImplausibleLength(u64),
    #[error("mask ratio {0} outside [0, 1]")]
    BadRatio(f64),
}

/// Serializes a weight vector.
pub fn write_weights<W: Write>(mut sink: W, weights: &[f64]) -> Result<(), SnapshotError> {
    sink.write_all(WEIGHTS_MAGIC)?;
    sink.write_all(&[FORMAT_VERSION])?;
    sink.write_all(&(weights.len() as u64).to_le_bytes())?;
    for &w in weights {
        sink.write_all(&w.to_le_bytes())?;
    }
    Ok(())
}

/// Deserializes a weight vector written by [`write_weights`].
pub fn read_weights<R: Read>(mut source: R) -> Result<Vec<f64>, SnapshotError> {
    check_header(&mut source, WEIGHTS_MAGIC, "weight")?;
    let count = read_u64(&mut source)?;
    if count > MAX_ELEMENTS {
        return Err(SnapshotError::ImplausibleLength(count));
    }
    let mut weights = Vec::with_capacity(count as usize);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        source.read_exact(&mut buf)?;
        weights.push(f64::from_le_bytes(buf));
    }
    Ok(weights)
}

/// Serializes a mask: bit length, recorded ratio, then keep-bits packed
/// eight per byte, least significant bit first.
pub fn write_mask<W: Write>(mut sink: W, mask: &PruningMask) -> Result<(), SnapshotError> {
    sink.write_all(MASK_MAGIC)?;
    sink.write_all(&[FORMAT_VERSION])?;
    sink.write_all(&(mask.len() as u64).to_le_bytes())?;
    sink.write_all(&mask.ratio().to_le_bytes())?;
    let mut packed = vec![0u8; mask.len().div_ceil(8)];
    for (i, &keep) in mask.keep().iter().enumerate() {
        if keep {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    sink.write_all(&packed)?;
    Ok(())
}

/// Deserializes a mask written by [`write_mask`].
pub fn read_mask<R: Read>(mut source: R) -> Result<PruningMask, SnapshotError> {
    check_header(&mut source, MASK_MAGIC, "mask")?;
    let count = read_u64(&mut source)?;
    if count > MAX_ELEMENTS {
        return Err(SnapshotError::ImplausibleLength(count));
    }
    let mut ratio_buf = [0u8; 8];
    source.read_exact(&mut ratio_buf)?;
    let ratio = f64::from_le_bytes(ratio_buf);
    if !(0.0..=1.0).contains(&ratio) {
        return Err(SnapshotError::BadRatio(ratio));
    }
    let mut packed = vec![0u8; (count as usize).div_ceil(8)];
    source.read_exact(&mut packed)?;
    let keep = (0..count as usize)
        .map(|i| packed[i / 8] & (1 << (i % 8)) != 0)
        .collect();
    Ok(PruningMask::from_parts(keep, ratio))
}

/// [`write_weights`] to a file, buffered.
pub fn save_weights<P: AsRef<Path>>(path: P, weights: &[f64]) -> Result<(), SnapshotError> {
    let mut sink = BufWriter::new(File::create(path)?);
    write_weights(&mut sink, weights)?;
    sink.flush()?;
    Ok(())
}

/// [`read_weights`] from a file, buffered.
pub fn load_weights<P: AsRef<Path>>(path: P) -> Result<Vec<f64>, SnapshotError> {
    read_weights(BufReader::new(File::open(path)?))
}

/// [`write_mask`] to a file, buffered.
pub fn save_mask<P: AsRef<Path>>(path: P, mask: &PruningMask) -> Result<(), SnapshotError> {
    let mut sink = BufWriter::new(File::create(path)?);
    write_mask(&mut sink, mask)?;
    sink.flush()?;
    Ok(())
}

/// [`read_mask`] from a file, buffered.
pub fn load_mask<P: AsRef<Path>>(path: P) -> Result<PruningMask, SnapshotError> {
    read_mask(BufReader::new(File::open(path)?))
}

fn check_header<R: Read>(
    source: &mut R,
    magic: &'static [u8; 4],
    kind: &'static str,
) -> Result<(), SnapshotError> {
    let mut got = [0u8; 4];
    source.read_exact(&mut got)?;
    if &got != magic {
        return Err(SnapshotError::BadMagic {
            expected: kind,
            got,
        });
    }
    let mut version = [0u8; 1];
    source.read_exact(&mut version)?;
    if version[0] != FORMAT_VERSION {
        return Err(SnapshotError::UnsupportedVersion(version[0]));
    }
    Ok(())
}

fn read_u64<R: Read>(source: &mut R) -> Result<u64, SnapshotError> {
    let mut buf = [0u8; 8];
    source.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
