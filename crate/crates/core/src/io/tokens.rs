//! Calibration token file: magic `TOK1`, `u32` sequence count, then per
//! sequence a `u32` length and that many `u32` token ids, all little-endian.

use std::path::Path;

use super::container::Reader;
use super::{io_err, write_atomic, IoError};

pub const MAGIC: &[u8; 4] = b"TOK1";

pub fn write_tokens(path: &Path, sequences: &[Vec<u32>]) -> Result<(), IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(sequences.len() as u32).to_le_bytes());
    for seq in sequences {
        out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for id in seq {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn read_tokens(path: &Path) -> Result<Vec<Vec<u32>>, IoError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            offset: 0,
            found: magic.to_vec(),
            expected: "TOK1",
        });
    }
    let count = r.u32("sequence count")?;
    let mut sequences = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32("sequence length")? as usize;
        let raw = r.take(len * 4, "token ids")?;
        sequences.push(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if r.offset != bytes.len() {
        return Err(IoError::TrailingBytes {
            path: path.to_path_buf(),
            offset: r.offset,
            trailing: bytes.len() - r.offset,
        });
    }
    Ok(sequences)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seqs.tok");
        let data = vec![vec![1u32, 2, 3], vec![], vec![255, 0]];
        write_tokens(&path, &data).unwrap();
        assert_eq!(read_tokens(&path).unwrap(), data);
    }

    #[test]
    fn token_reader_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tok");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            read_tokens(&path),
            Err(IoError::BadMagic { offset: 0, .. })
        ));
    }
}
