//! Binary window cache: magic `WDNW`, u32 version, u32 window_len,
//! u32 count, then per record u32 label, u8 split, window_len f32, all
//! little-endian.

use std::fs;
use std::path::Path;

use super::manifest::Split;
use super::WindowedExample;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"WDNW";
pub const CACHE_VERSION: u32 = 1;

pub fn encode_cache(window_len: usize, windows: &[WindowedExample]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + windows.len() * (5 + 4 * window_len));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(window_len as u32).to_le_bytes());
    out.extend_from_slice(&(windows.len() as u32).to_le_bytes());
    for w in windows {
        if w.window.len() != window_len {
            return Err(Error::Data(format!(
                "window of clip {} has length {}, cache expects {window_len}",
                w.clip_id,
                w.window.len()
            )));
        }
        out.extend_from_slice(&(w.label as u32).to_le_bytes());
        out.push(w.split.code());
        for v in &w.window {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a cache image. Clip ids are not stored and come back as the
/// record index.
pub fn decode_cache(bytes: &[u8]) -> Result<(usize, Vec<WindowedExample>)> {
    let bad = |m: String| Err(Error::Decode(format!("window cache: {m}")));
    if bytes.len() < 16 {
        return bad("header truncated".into());
    }
    if &bytes[0..4] != CACHE_MAGIC {
        return bad("bad magic".into());
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(4) != CACHE_VERSION {
        return bad(format!("unsupported version {}", word(4)));
    }
    let (len, count) = (word(8) as usize, word(12) as usize);
    let record = 5 + 4 * len;
    if bytes.len() != 16 + count * record {
        return bad(format!(
            "{} bytes for {count} records of {record} bytes",
            bytes.len() - 16
        ));
    }
    let mut out = Vec::with_capacity(count);
    for (i, rec) in bytes[16..].chunks_exact(record).enumerate() {
        let label = u32::from_le_bytes(rec[0..4].try_into().unwrap()) as usize;
        let Some(split) = Split::from_code(rec[4]) else {
            return bad(format!("record {i} has split code {}", rec[4]));
        };
        let window = rec[5..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(WindowedExample {
            window,
            label,
            split,
            clip_id: i,
        });
    }
    Ok((len, out))
}

pub fn write_cache(
    path: impl AsRef<Path>,
    window_len: usize,
    windows: &[WindowedExample],
) -> Result<()> {
    fs::write(path, encode_cache(window_len, windows)?)?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<(usize, Vec<WindowedExample>)> {
    decode_cache(&fs::read(path)?)
}
