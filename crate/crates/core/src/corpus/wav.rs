//! 16-bit mono PCM WAV reading and writing.
//!
//! Anything other than 16-bit signed mono PCM is rejected rather than
//! converted; resampling and codec support are out of scope.

use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

const PCM_SCALE: f32 = 32768.0;

/// Load a RIFF/WAVE file. Sample `s` maps to `s / 32768` exactly.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    let utt_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav(&bytes, utt_id)
}

pub fn decode_wav(bytes: &[u8], utt_id: String) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut off = 12usize;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let body_start = off + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("chunk extends past end of file".into()))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk too short".into()));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {} // skip unknown chunks
        }
        // Chunks are word-aligned.
        off = body_end + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if format != 1 {
        return Err(Error::Unsupported(format!(
            "WAV format tag {format}, only PCM (1) supported"
        )));
    }
    if channels != 1 {
        return Err(Error::Unsupported(format!(
            "{channels} channels, only mono supported"
        )));
    }
    if bits != 16 {
        return Err(Error::Unsupported(format!(
            "{bits}-bit samples, only 16-bit supported"
        )));
    }
    if rate == 0 {
        return Err(Error::Format("sample rate 0".into()));
    }
    if data.len() % 2 != 0 {
        return Err(Error::Format("data chunk has odd byte length".into()));
    }

    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / PCM_SCALE)
        .collect();
    Ok(Waveform {
        utt_id,
        samples,
        sample_rate: rate,
    })
}

/// Write a canonical 16-bit mono PCM WAV. Samples are scaled by 32768,
/// rounded to nearest, and clamped to the i16 range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    wave.validate()?;
    std::fs::write(path, encode_wav(wave))?;
    Ok(())
}

pub fn encode_wav(wave: &Waveform) -> Vec<u8> {
    let data_len = wave.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &wave.samples {
        let q = (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}
