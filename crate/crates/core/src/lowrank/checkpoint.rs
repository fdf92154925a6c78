//! Binary checkpoint of factored layers.
//!
//! Layout (all integers `u32` little-endian, all reals `f64` little-endian):
//!
//! ```text
//! "DLRT" | version = 1 | layer count
//! per layer: m | n | r | U (m·r, row-major) | S (r·r) | V (n·r)
//! ```
//!
//! The network checkpoint in [`crate::nn::checkpoint`] extends this layout.

use std::io::{Read, Write};

use crate::error::{DlrtError, Result};
use crate::linalg::Matrix;
use crate::lowrank::LowRankState;

pub const MAGIC: &[u8; 4] = b"DLRT";
pub const VERSION: u32 = 1;

pub fn write_states<W: Write>(w: &mut W, states: &[LowRankState]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, len_u32(states.len())?)?;
    for st in states {
        write_state(w, st)?;
    }
    Ok(())
}

pub fn read_states<R: Read>(r: &mut R) -> Result<Vec<LowRankState>> {
    let version = read_header(r)?;
    if version != VERSION {
        return Err(DlrtError::Format(format!(
            "expected checkpoint version {VERSION}, found {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    (0..count).map(|_| read_state(r)).collect()
}

pub(crate) fn write_state<W: Write>(w: &mut W, st: &LowRankState) -> Result<()> {
    let (m, n) = st.dims();
    for d in [m, n, st.rank()] {
        write_u32(w, len_u32(d)?)?;
    }
    write_f64s(w, st.u().as_slice())?;
    write_f64s(w, st.s().as_slice())?;
    write_f64s(w, st.v().as_slice())
}

pub(crate) fn read_state<R: Read>(r: &mut R) -> Result<LowRankState> {
    let m = read_u32(r)? as usize;
    let n = read_u32(r)? as usize;
    let rank = read_u32(r)? as usize;
    let u = read_matrix(r, m, rank)?;
    let s = read_matrix(r, rank, rank)?;
    let v = read_matrix(r, n, rank)?;
    LowRankState::new(u, s, v)
}

/// Reads the magic bytes and returns the version field.
pub(crate) fn read_header<R: Read>(r: &mut R) -> Result<u32> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(DlrtError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    read_u32(r)
}

pub(crate) fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| DlrtError::Format(format!("dimension {n} exceeds u32")))
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DlrtError::Truncated("checkpoint ended early".into()),
        _ => DlrtError::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let bytes = len
        .checked_mul(8)
        .ok_or_else(|| DlrtError::Format("checkpoint array length overflows".into()))?;
    let mut buf = vec![0u8; bytes];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub(crate) fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| DlrtError::Format(format!("{rows}x{cols} overflows")))?;
    Matrix::from_vec(rows, cols, read_f64s(r, len)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::init_lowrank;

    #[test]
    fn round_trip_is_bit_exact() {
        let states = vec![
            init_lowrank(6, 4, 2, 1).unwrap(),
            init_lowrank(3, 5, 3, 2).unwrap(),
        ];
        let mut buf = Vec::new();
        write_states(&mut buf, &states).unwrap();
        assert_eq!(&buf[..4], b"DLRT");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &6u32.to_le_bytes());
        let back = read_states(&mut buf.as_slice()).unwrap();
        assert_eq!(back, states);
        let mut again = Vec::new();
        write_states(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(
            read_states(&mut &b"NOPE\x01\0\0\0"[..]),
            Err(DlrtError::Format(_))
        ));
        let mut buf = Vec::new();
        write_states(&mut buf, &[init_lowrank(4, 4, 2, 0).unwrap()]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_states(&mut buf.as_slice()),
            Err(DlrtError::Truncated(_))
        ));
    }
}
