//! Token-stream and ranked-subset files.
//!
//! Binary token stream: `"FRTK"`, version `u32`, vocab size `u32`, token
//! count `u64`, then that many `u32` ids, all little-endian. The text form
//! is whitespace-separated decimal ids.
//!
//! Ranked-subset file: one decimal id per line, most frequent first.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TOKEN_STREAM_MAGIC: &[u8; 4] = b"FRTK";
pub const TOKEN_STREAM_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    /// Vocabulary size from the binary header; text streams carry none.
    pub vocab_size: Option<usize>,
    pub ids: Vec<u32>,
}

pub fn write_token_stream(path: &Path, vocab_size: u32, ids: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(TOKEN_STREAM_MAGIC)?;
    w.write_all(&TOKEN_STREAM_VERSION.to_le_bytes())?;
    w.write_all(&vocab_size.to_le_bytes())?;
    w.write_all(&(ids.len() as u64).to_le_bytes())?;
    for id in ids {
        w.write_all(&id.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_token_stream(path: &Path, text: bool) -> Result<TokenStream> {
    let bytes = fs::read(path)?;
    let name = path.display();
    if text {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Format(format!("{name}: text token stream is not UTF-8")))?;
        let ids = parse_ids(text).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        return Ok(TokenStream { vocab_size: None, ids });
    }
    if bytes.len() < HEADER_LEN || &bytes[..4] != TOKEN_STREAM_MAGIC {
        return Err(Error::Format(format!("{name}: bad magic, not an FRTK token stream")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != TOKEN_STREAM_VERSION {
        return Err(Error::Format(format!("{name}: unsupported token stream version {version}")));
    }
    let vocab_size = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if body.len() as u64 != count.saturating_mul(4) {
        return Err(Error::Format(format!(
            "{name}: header declares {count} tokens but body holds {} bytes",
            body.len()
        )));
    }
    let ids = body
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(TokenStream {
        vocab_size: Some(vocab_size),
        ids,
    })
}

/// Whitespace- or comma-separated decimal ids.
pub fn parse_ids(text: &str) -> std::result::Result<Vec<u32>, String> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| format!("bad token id {s:?}")))
        .collect()
}

pub fn write_ranked_file(path: &Path, ids: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ranked_file(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse::<u32>().map_err(|_| {
                Error::Format(format!("{}: line {}: bad token id {l:?}", path.display(), n + 1))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_stream_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.frtk");
        write_token_stream(&p, 10, &[1, 2, 9]).unwrap();
        let s = read_token_stream(&p, false).unwrap();
        assert_eq!(s.vocab_size, Some(10));
        assert_eq!(s.ids, vec![1, 2, 9]);

        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_token_stream(&p, false), Err(Error::Format(_))));
        fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(read_token_stream(&p, false), Err(Error::Format(_))));
    }

    #[test]
    fn text_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        fs::write(&p, "0 0\n3\t1\n").unwrap();
        assert_eq!(read_token_stream(&p, true).unwrap().ids, vec![0, 0, 3, 1]);
        fs::write(&p, "0 x").unwrap();
        assert!(matches!(read_token_stream(&p, true), Err(Error::Format(_))));
    }

    #[test]
    fn ranked_file_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.txt");
        write_ranked_file(&p, &[0, 3, 1, 2]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "0\n3\n1\n2\n");
        assert_eq!(read_ranked_file(&p).unwrap(), vec![0, 3, 1, 2]);
    }
}
