//! Minimal RIFF/WAVE reader for 16 kHz mono PCM16.

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

fn err(msg: impl Into<String>) -> Error {
    Error::Wav(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parse a PCM16 mono 16 kHz WAV file. Samples are scaled by `1/32768`.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(err("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(err("truncated fmt chunk"));
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (encoding, channels, rate, bits) = format.ok_or_else(|| err("data chunk before fmt chunk"))?;
                if encoding != 1 {
                    return Err(err(format!("unsupported encoding {encoding}, expected PCM (1)")));
                }
                if bits != 16 {
                    return Err(err(format!("unsupported bit depth {bits}, expected 16")));
                }
                if channels != 1 {
                    return Err(err(format!("expected mono, found {channels} channels")));
                }
                if rate != SAMPLE_RATE {
                    return Err(err(format!("sample rate {rate}, expected {SAMPLE_RATE}")));
                }
                let available = bytes.len() - body;
                if available < size {
                    return Err(err(format!("data chunk declares {size} bytes, only {available} present")));
                }
                let samples = bytes[body..body + size - size % 2]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(AudioClip {
                    samples,
                    sample_rate: rate,
                    speaker_label: String::new(),
                    utterance_id: String::new(),
                });
            }
            _ => {}
        }
        pos = body + size + size % 2;
    }
    Err(err("no data chunk"))
}
