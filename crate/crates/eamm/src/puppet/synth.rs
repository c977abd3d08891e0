//! Sequence synthesis: states from emotion templates and audio envelopes,
//! plus the deterministic speech-like waveform generator.

use super::{
    emotion_template, ground_truth_keypoints, render, EmotionLabel, PoseVec, PuppetError,
    PuppetIdentity, PuppetState, FPS,
};
use crate::audiofeat::SAMPLE_RATE;
use crate::motion::{Image, KeypointSet};
use rand::Rng;

/// One synthesized frame with its exact ground truth.
pub struct SynthFrame {
    pub image: Image,
    pub keypoints: KeypointSet,
    pub state: PuppetState,
}

/// Renders a sequence: `mouth_open(t)` follows the audio envelope, the
/// emotion template drives brows/eyes/curl through its attack-sustain
/// envelope, and the pose trajectory is applied verbatim. Deterministic.
pub fn synth_sequence(
    id: &PuppetIdentity,
    emotion: EmotionLabel,
    audio_env: &[f64],
    pose_traj: &[PoseVec],
    height: usize,
    width: usize,
) -> Result<Vec<SynthFrame>, PuppetError> {
    if audio_env.len() != pose_traj.len() {
        return Err(PuppetError::Contract(format!(
            "envelope has {} frames, pose trajectory {}",
            audio_env.len(),
            pose_traj.len()
        )));
    }
    let template = emotion_template(emotion.category, emotion.intensity);
    let mut frames = Vec::with_capacity(audio_env.len());
    for (t, (&env, &pose)) in audio_env.iter().zip(pose_traj).enumerate() {
        let offsets = template.offsets_at(t);
        let neutral = PuppetState::neutral();
        let state = PuppetState {
            mouth_open: env.clamp(0.0, 1.0),
            mouth_curl: (neutral.mouth_curl + offsets[3]).clamp(-1.0, 1.0),
            brow_raise: (neutral.brow_raise + offsets[0]).clamp(-1.0, 1.0),
            brow_tilt: (neutral.brow_tilt + offsets[1]).clamp(-1.0, 1.0),
            eye_open: (neutral.eye_open + offsets[2]).clamp(0.0, 1.0),
            pose,
        };
        let image = render(id, &state, height, width)?;
        let keypoints = ground_truth_keypoints(id, &state);
        frames.push(SynthFrame { image, keypoints, state });
    }
    Ok(frames)
}

/// Smooth random envelope in [0.05, 0.95]: three sinusoids around 0.5.
pub fn smooth_envelope<R: Rng>(frames: usize, rng: &mut R) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.10..0.30),
                rng.gen_range(0.4..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    (0..frames)
        .map(|t| {
            let sec = t as f64 / FPS as f64;
            let mut v = 0.5;
            for (a, f, p) in &comps {
                v += a * (std::f64::consts::TAU * f * sec + p).sin();
            }
            v.clamp(0.05, 0.95)
        })
        .collect()
}

/// Smooth random pose trajectory; `amplitude` in [0, 1] scales all motion.
pub fn smooth_pose_trajectory<R: Rng>(
    frames: usize,
    amplitude: f64,
    rng: &mut R,
) -> Vec<PoseVec> {
    let mut component = |range: f64| {
        let a = range * amplitude * rng.gen_range(0.3..1.0);
        let f = rng.gen_range(0.2..1.2);
        let p = rng.gen_range(0.0..std::f64::consts::TAU);
        move |sec: f64| a * (std::f64::consts::TAU * f * sec + p).sin()
    };
    let roll = component(0.20);
    let yaw = component(0.12);
    let pitch = component(0.12);
    let tx = component(0.10);
    let ty = component(0.10);
    let scale = component(0.12);
    (0..frames)
        .map(|t| {
            let sec = t as f64 / FPS as f64;
            PoseVec {
                roll: roll(sec),
                yaw_shear: yaw(sec),
                pitch_shear: pitch(sec),
                tx: tx(sec),
                ty: ty(sec),
                scale: 1.0 + scale(sec),
            }
        })
        .collect()
}

/// Deterministic speech-like waveform: a three-harmonic voice at the
/// identity's base frequency, amplitude-modulated by the per-frame envelope
/// (linearly interpolated to sample rate).
pub fn synth_speech(envelope: &[f64], base_freq: f64) -> Vec<f64> {
    let samples_per_frame = SAMPLE_RATE as usize / FPS;
    let total = envelope.len() * samples_per_frame;
    let mut out = Vec::with_capacity(total);
    for n in 0..total {
        let tsec = n as f64 / SAMPLE_RATE as f64;
        // Envelope value at this sample, interpolating between frame centers.
        let fpos = (n as f64 / samples_per_frame as f64 - 0.5).max(0.0);
        let f0 = (fpos.floor() as usize).min(envelope.len() - 1);
        let f1 = (f0 + 1).min(envelope.len() - 1);
        let frac = fpos - f0 as f64;
        let env = envelope[f0] * (1.0 - frac) + envelope[f1] * frac;
        let voice = 0.60 * (std::f64::consts::TAU * base_freq * tsec).sin()
            + 0.25 * (std::f64::consts::TAU * 2.1 * base_freq * tsec + 1.3).sin()
            + 0.15 * (std::f64::consts::TAU * 3.7 * base_freq * tsec + 2.1).sin();
        out.push((0.85 * env * voice).clamp(-1.0, 1.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puppet::EmotionCategory;
    use rand::SeedableRng;

    #[test]
    fn neutral_zero_envelope_identity_pose_gives_constant_frames() {
        let id = PuppetIdentity::canonical();
        let env = vec![0.0; 5];
        let poses = vec![PoseVec::IDENTITY; 5];
        let frames =
            synth_sequence(&id, EmotionLabel::neutral(), &env, &poses, 32, 32).unwrap();
        for f in &frames[1..] {
            assert_eq!(f.image.data(), frames[0].image.data());
            assert_eq!(f.keypoints, frames[0].keypoints);
        }
    }

    #[test]
    fn surprised_full_intensity_hits_brow_raise_sustain() {
        let id = PuppetIdentity::canonical();
        let env = vec![0.3; 12];
        let poses = vec![PoseVec::IDENTITY; 12];
        let label = EmotionLabel::new(EmotionCategory::Surprised, 1.0).unwrap();
        let frames = synth_sequence(&id, label, &env, &poses, 32, 32).unwrap();
        assert!(frames[10].state.brow_raise >= 0.8);
    }

    #[test]
    fn same_inputs_give_byte_identical_sequences() {
        let id = PuppetIdentity::canonical();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let env = smooth_envelope(8, &mut rng);
        let poses = smooth_pose_trajectory(8, 0.7, &mut rng);
        let label = EmotionLabel::new(EmotionCategory::Happy, 0.9).unwrap();
        let a = synth_sequence(&id, label, &env, &poses, 32, 32).unwrap();
        let b = synth_sequence(&id, label, &env, &poses, 32, 32).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.image.data(), fb.image.data());
        }
    }

    #[test]
    fn speech_energy_tracks_envelope() {
        let envelope = vec![0.1, 0.1, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1];
        let speech = synth_speech(&envelope, 170.0);
        assert_eq!(speech.len(), 8 * 640);
        let frame_rms = |f: usize| -> f64 {
            let s = &speech[f * 640..(f + 1) * 640];
            (s.iter().map(|v| v * v).sum::<f64>() / 640.0).sqrt()
        };
        assert!(frame_rms(3) > 3.0 * frame_rms(0));
    }

    #[test]
    fn envelope_and_pose_stay_in_valid_ranges() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for _ in 0..20 {
            let env = smooth_envelope(40, &mut rng);
            assert!(env.iter().all(|v| (0.05..=0.95).contains(v)));
            let poses = smooth_pose_trajectory(40, 1.0, &mut rng);
            for p in poses {
                p.validate().unwrap();
            }
        }
    }
}
