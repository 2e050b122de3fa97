//! RIFF/WAVE PCM-16 decoding and mono encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded audio in `[-1, 1]`, downmixed to mono.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_path: String,
    pub label: usize,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Decodes a PCM-16 mono or stereo WAV image. Stereo frames become the
/// mean of both channels; samples are scaled by 1/32768.
pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<f32>, u32)> {
    let bad = |msg: String| Err(Error::Decode(msg));
    if bytes.len() < 12 {
        return bad(format!("RIFF header truncated ({} bytes)", bytes.len()));
    }
    if &bytes[0..4] != b"RIFF" {
        return bad("missing RIFF magic".into());
    }
    if &bytes[8..12] != b"WAVE" {
        return bad("RIFF form type is not WAVE".into());
    }
    let mut pos = 12;
    let mut format: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let Some(end) = end else {
                    return bad("fmt chunk truncated".into());
                };
                if size < 16 {
                    return bad(format!("fmt chunk too short ({size} bytes)"));
                }
                let fmt = &bytes[body..end];
                let mut tag = u16_at(fmt, 0);
                if tag == WAVE_FORMAT_EXTENSIBLE && fmt.len() >= 26 {
                    tag = u16_at(fmt, 24);
                }
                if tag != WAVE_FORMAT_PCM {
                    return bad(format!("audio_format {tag} is not PCM"));
                }
                let channels = u16_at(fmt, 2);
                if channels != 1 && channels != 2 {
                    return bad(format!(
                        "num_channels {channels} unsupported (mono or stereo only)"
                    ));
                }
                let rate = u32_at(fmt, 4);
                if rate == 0 {
                    return bad("sample_rate is 0".into());
                }
                let bits = u16_at(fmt, 14);
                if bits != 16 {
                    return bad(format!("bits_per_sample {bits} unsupported (16 only)"));
                }
                format = Some((channels, rate));
            }
            b"data" => {
                let Some((channels, rate)) = format else {
                    return bad("data chunk precedes fmt chunk".into());
                };
                let Some(end) = end else {
                    return bad(format!(
                        "data chunk declares {size} bytes but only {} remain",
                        bytes.len() - body
                    ));
                };
                let frame = 2 * channels as usize;
                let data = &bytes[body..end];
                if data.len() < frame {
                    return bad("data chunk holds no samples".into());
                }
                let scale = 1.0 / 32768.0;
                let samples = data
                    .chunks_exact(frame)
                    .map(|f| {
                        if channels == 1 {
                            i16::from_le_bytes([f[0], f[1]]) as f32 * scale
                        } else {
                            let l = i16::from_le_bytes([f[0], f[1]]) as i32;
                            let r = i16::from_le_bytes([f[2], f[3]]) as i32;
                            (l + r) as f32 * 0.5 * scale
                        }
                    })
                    .collect();
                return Ok((samples, rate));
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body.saturating_add(size).saturating_add(size & 1);
    }
    if format.is_none() {
        bad("no fmt chunk".into())
    } else {
        bad("no data chunk".into())
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (samples, sample_rate) =
        decode_wav(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    Ok(AudioClip {
        samples,
        sample_rate,
        source_path: path.display().to_string(),
        label: 0,
    })
}

/// Quantizes to signed 16-bit, rounding to nearest and saturating.
pub fn quantize_pcm16(x: f32) -> i16 {
    (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Canonical 44-byte-header mono PCM-16 image.
pub fn encode_wav_pcm16(pcm: &[i16], sample_rate: u32) -> Vec<u8> {
    let data_len = (pcm.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + pcm.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in pcm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let pcm: Vec<i16> = samples.iter().map(|&s| quantize_pcm16(s)).collect();
    fs::write(path, encode_wav_pcm16(&pcm, sample_rate))?;
    Ok(())
}
