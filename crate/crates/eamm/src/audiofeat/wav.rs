//! Minimal RIFF/WAVE ingestion: PCM 16-bit mono at 16 kHz, nothing else.

use super::{AudioError, SAMPLE_RATE};
use std::io::Write;

/// Mono waveform in [-1, 1] at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Wraps samples assumed to be at the ingestion rate.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self, AudioError> {
        Ok(Waveform { samples, sample_rate: SAMPLE_RATE })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn chunk_id(bytes: &[u8], pos: usize) -> Result<&[u8], AudioError> {
    bytes
        .get(pos..pos + 4)
        .ok_or_else(|| AudioError::MalformedHeader("truncated chunk id".to_string()))
}

fn read_u32(bytes: &[u8], pos: usize) -> Result<u32, AudioError> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| AudioError::MalformedHeader("truncated u32".to_string()))
}

fn read_u16(bytes: &[u8], pos: usize) -> Result<u16, AudioError> {
    bytes
        .get(pos..pos + 2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| AudioError::MalformedHeader("truncated u16".to_string()))
}

/// Parses a RIFF/WAVE byte stream. Samples are scaled by 1/32768.
pub fn read_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    if chunk_id(bytes, 0)? != b"RIFF" {
        return Err(AudioError::MalformedHeader("missing RIFF tag".to_string()));
    }
    if chunk_id(bytes, 8)? != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing WAVE tag".to_string()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = chunk_id(bytes, pos)?;
        let size = read_u32(bytes, pos + 4)? as usize;
        let body = bytes.get(pos + 8..pos + 8 + size).ok_or_else(|| {
            AudioError::MalformedHeader(format!("chunk {id:?} overruns file"))
        })?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::MalformedHeader("fmt chunk too short".to_string()));
                }
                format = Some((
                    read_u16(bytes, pos + 8)?,      // format tag
                    read_u16(bytes, pos + 10)?,     // channels
                    read_u32(bytes, pos + 12)?,     // sample rate
                    read_u16(bytes, pos + 22)?,     // bits per sample
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }
    let Some((tag, channels, rate, bits)) = format else {
        return Err(AudioError::MalformedHeader("missing fmt chunk".to_string()));
    };
    if tag != 1 {
        return Err(AudioError::UnsupportedCodec(tag));
    }
    if channels != 1 {
        return Err(AudioError::UnsupportedChannels(channels));
    }
    if rate != SAMPLE_RATE {
        return Err(AudioError::UnsupportedRate(rate));
    }
    if bits != 16 {
        return Err(AudioError::UnsupportedBitDepth(bits));
    }
    let Some(data) = data else {
        return Err(AudioError::MalformedHeader("missing data chunk".to_string()));
    };
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform { samples, sample_rate: rate })
}

/// Writes PCM 16-bit mono at 16 kHz; values are clamped then scaled by
/// 32767 and rounded.
pub fn write_wav_pcm16<W: Write>(w: &mut W, samples: &[f64]) -> std::io::Result<()> {
    let data_len = (samples.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&SAMPLE_RATE.to_le_bytes())?;
    w.write_all(&(SAMPLE_RATE * 2).to_le_bytes())?; // byte rate
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?; // bits per sample
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_wav(format_tag: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format_tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2).to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn one_sample_scaling_law() {
        let v: i16 = 12345;
        let bytes = tiny_wav(1, 1, 16_000, 16, &v.to_le_bytes());
        let w = read_wav(&bytes).unwrap();
        assert_eq!(w.samples(), &[12345.0 / 32768.0]);
    }

    #[test]
    fn sixteen_k_samples_is_one_second() {
        let data = vec![0u8; 16_000 * 2];
        let w = read_wav(&tiny_wav(1, 1, 16_000, 16, &data)).unwrap();
        assert!((w.duration_seconds() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stereo_is_a_channel_error() {
        let bytes = tiny_wav(1, 2, 16_000, 16, &[0, 0, 0, 0]);
        assert!(matches!(
            read_wav(&bytes),
            Err(AudioError::UnsupportedChannels(2))
        ));
    }

    #[test]
    fn wrong_rate_and_codec_are_distinct_errors() {
        let bytes = tiny_wav(1, 1, 44_100, 16, &[0, 0]);
        assert!(matches!(
            read_wav(&bytes),
            Err(AudioError::UnsupportedRate(44_100))
        ));
        let bytes = tiny_wav(3, 1, 16_000, 16, &[0, 0]);
        assert!(matches!(read_wav(&bytes), Err(AudioError::UnsupportedCodec(3))));
    }

    #[test]
    fn garbage_is_a_malformed_header() {
        assert!(matches!(
            read_wav(b"not a wav"),
            Err(AudioError::MalformedHeader(_))
        ));
    }

    #[test]
    fn write_read_round_trip() {
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 / 50.0 - 1.0) * 0.9).collect();
        let mut buf = Vec::new();
        write_wav_pcm16(&mut buf, &samples).unwrap();
        let back = read_wav(&buf).unwrap();
        assert_eq!(back.samples().len(), 100);
        for (a, b) in samples.iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }
}
