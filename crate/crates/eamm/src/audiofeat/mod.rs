//! Audio ingestion and MFCC features.
//!
//! The feature contract: 16 kHz mono input, 28 MFCC coefficients per 10 ms
//! hop (window = hop = 160 samples), grouped into one 28x12 matrix per
//! 25 FPS video frame.

mod mfcc;
mod wav;

pub use mfcc::{mfcc, HopMatrix, MFCC_COEFFS};
pub use wav::{read_wav, write_wav_pcm16, Waveform};

use std::io::{Read, Write};
use thiserror::Error;

/// Hops per second with the 10 ms hop.
pub const HOPS_PER_SECOND: usize = 100;
/// Video frame rate the features align to.
pub const VIDEO_FPS: usize = 25;
/// Hops per aligned frame window.
pub const HOPS_PER_FRAME: usize = 12;
/// Required ingestion sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed wav header: {0}")]
    MalformedHeader(String),
    #[error("unsupported codec: format tag {0} (need PCM = 1)")]
    UnsupportedCodec(u16),
    #[error("unsupported sample rate {0} Hz (need {SAMPLE_RATE})")]
    UnsupportedRate(u32),
    #[error("unsupported channel count {0} (need mono)")]
    UnsupportedChannels(u16),
    #[error("unsupported bit depth {0} (need 16)")]
    UnsupportedBitDepth(u16),
    #[error("malformed feature blob: {0}")]
    MalformedBlob(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-video-frame MFCC features: T matrices of 28 coefficients x 12 hops.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccClip {
    /// Row-major 28x12 matrix per frame.
    frames: Vec<Vec<f64>>,
}

impl MfccClip {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Flat 28x12 row-major matrix for frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t]
    }

    pub const FRAME_LEN: usize = MFCC_COEFFS * HOPS_PER_FRAME;

    /// Raw little-endian f32 blob: magic `EAMA`, u32 frame count, u32 28,
    /// u32 12, then the frames in order.
    pub fn write_blob<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"EAMA")?;
        w.write_all(&(self.frames.len() as u32).to_le_bytes())?;
        w.write_all(&(MFCC_COEFFS as u32).to_le_bytes())?;
        w.write_all(&(HOPS_PER_FRAME as u32).to_le_bytes())?;
        for frame in &self.frames {
            for v in frame {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Self, AudioError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[0..4] != b"EAMA" {
            return Err(AudioError::MalformedBlob("bad magic".to_string()));
        }
        let t = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let coeffs = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let hops = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        if coeffs != MFCC_COEFFS || hops != HOPS_PER_FRAME {
            return Err(AudioError::MalformedBlob(format!(
                "unexpected layout {coeffs}x{hops}"
            )));
        }
        let mut raw = vec![0u8; t * coeffs * hops * 4];
        r.read_exact(&mut raw)?;
        let frames = (0..t)
            .map(|f| {
                let base = f * coeffs * hops * 4;
                (0..coeffs * hops)
                    .map(|i| {
                        f32::from_le_bytes(
                            raw[base + i * 4..base + i * 4 + 4].try_into().unwrap(),
                        ) as f64
                    })
                    .collect()
            })
            .collect();
        Ok(MfccClip { frames })
    }
}

/// Index of the hop whose center is nearest the center of video frame `t`
/// (ties go to the lower hop). Frame centers sit at (t+0.5)/25 s, hop
/// centers at (h+0.5)/100 s, so the nearest hop center is between hops
/// 4t+1 and 4t+2, and the tie rule picks 4t+1.
pub fn nearest_hop(frame: usize) -> usize {
    4 * frame + 1
}

/// Groups hop-level coefficients into per-frame 28x12 matrices.
///
/// Frame `t` takes the 12 hops at offsets -6..=+5 around [`nearest_hop`];
/// hops outside the audio are zero-padded. The frame count is
/// `floor(duration * 25)` where duration is implied by the hop count.
pub fn frame_align(hops: &HopMatrix) -> MfccClip {
    // hops.len() hops at 100/s cover hops.len()/100 seconds of audio, each
    // second contributing 25 frames.
    let frame_count = hops.len() * VIDEO_FPS / HOPS_PER_SECOND;
    let mut frames = Vec::with_capacity(frame_count);
    for t in 0..frame_count {
        let center = nearest_hop(t) as isize;
        let mut frame = vec![0.0; MFCC_COEFFS * HOPS_PER_FRAME];
        for (slot, offset) in (-6..6).enumerate() {
            let h = center + offset;
            if h < 0 || h as usize >= hops.len() {
                continue;
            }
            let coeffs = hops.hop(h as usize);
            for c in 0..MFCC_COEFFS {
                frame[c * HOPS_PER_FRAME + slot] = coeffs[c];
            }
        }
        frames.push(frame);
    }
    MfccClip { frames }
}

/// Full pipeline: waveform to frame-aligned features.
pub fn features_for_waveform(w: &Waveform) -> MfccClip {
    frame_align(&mfcc(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_of_audio_yields_25_frames_of_28x12() {
        let w = Waveform::from_samples(vec![0.0; SAMPLE_RATE as usize]).unwrap();
        let clip = features_for_waveform(&w);
        assert_eq!(clip.frame_count(), 25);
        assert_eq!(clip.frame(0).len(), 28 * 12);
    }

    #[test]
    fn first_frame_is_left_zero_padded() {
        // Hops -5..0 for frame 0 land before the audio, so the first 5 hop
        // slots of every coefficient row stay zero. Use a loud signal so
        // in-range hops are clearly nonzero.
        let samples: Vec<f64> = (0..SAMPLE_RATE as usize)
            .map(|i| 0.9 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin())
            .collect();
        let w = Waveform::from_samples(samples).unwrap();
        let clip = features_for_waveform(&w);
        let frame0 = clip.frame(0);
        for c in 0..MFCC_COEFFS {
            for slot in 0..5 {
                assert_eq!(frame0[c * HOPS_PER_FRAME + slot], 0.0);
            }
        }
        // Slot 5 corresponds to hop 0, which is real data.
        assert!(frame0[5].abs() > 0.0);
    }

    #[test]
    fn constant_hops_make_identical_interior_frames() {
        let hops = HopMatrix::from_rows(vec![vec![1.5; MFCC_COEFFS]; 200]);
        let clip = frame_align(&hops);
        assert_eq!(clip.frame_count(), 50);
        // Interior frames see no padding and are all equal.
        for t in 2..48 {
            assert_eq!(clip.frame(t), clip.frame(2));
        }
    }

    #[test]
    fn forty_ms_delay_shifts_hop_selection_by_four() {
        // Interior frames of a delayed clip pick hops exactly 4 later.
        let mut rows = Vec::new();
        for h in 0..300 {
            rows.push(vec![h as f64; MFCC_COEFFS]);
        }
        let hops = HopMatrix::from_rows(rows.clone());
        let clip = frame_align(&hops);
        // Simulated 40 ms delay: 4 hops of silence prepended.
        let mut delayed_rows = vec![vec![-1.0; MFCC_COEFFS]; 4];
        delayed_rows.extend(rows);
        let delayed = frame_align(&HopMatrix::from_rows(delayed_rows));
        for t in 2..20 {
            // Frame t of the delayed clip equals frame t-1 of the original:
            // both select 12 consecutive hops starting 4 earlier in content.
            let orig = clip.frame(t);
            let del = delayed.frame(t + 1);
            assert_eq!(orig, del);
        }
    }

    #[test]
    fn blob_round_trip() {
        let hops = HopMatrix::from_rows(vec![vec![0.25; MFCC_COEFFS]; 100]);
        let clip = frame_align(&hops);
        let mut buf = Vec::new();
        clip.write_blob(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"EAMA");
        let back = MfccClip::read_blob(&mut buf.as_slice()).unwrap();
        assert_eq!(back.frame_count(), clip.frame_count());
        assert_eq!(back.frame(3), clip.frame(3));
    }
}
