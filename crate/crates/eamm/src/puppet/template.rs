//! Authored emotion templates: sustained state offsets per category plus an
//! attack envelope. The full table is documented in the README.

use super::EmotionCategory;

/// Sustained state offsets at intensity 1, in order:
/// `(brow_raise, brow_tilt, eye_open, mouth_curl)`.
pub const TEMPLATE_TABLE: [(EmotionCategory, [f64; 4]); 8] = [
    (EmotionCategory::Neutral, [0.0, 0.0, 0.0, 0.0]),
    (EmotionCategory::Happy, [0.20, 0.0, -0.05, 0.80]),
    (EmotionCategory::Angry, [-0.45, -0.70, -0.10, -0.30]),
    (EmotionCategory::Sad, [-0.10, 0.55, -0.15, -0.55]),
    (EmotionCategory::Surprised, [0.90, 0.0, 0.25, 0.0]),
    (EmotionCategory::Fear, [0.55, 0.35, 0.25, -0.20]),
    (EmotionCategory::Disgust, [-0.30, -0.35, -0.20, 0.25]),
    (EmotionCategory::Contempt, [0.10, -0.50, -0.05, 0.40]),
];

/// Attack length in frames (25 FPS) before the sustain level is reached.
pub const ATTACK_FRAMES: [(EmotionCategory, usize); 8] = [
    (EmotionCategory::Neutral, 1),
    (EmotionCategory::Happy, 6),
    (EmotionCategory::Angry, 5),
    (EmotionCategory::Sad, 10),
    (EmotionCategory::Surprised, 3),
    (EmotionCategory::Fear, 4),
    (EmotionCategory::Disgust, 7),
    (EmotionCategory::Contempt, 8),
];

/// State-offset trajectory generator for one emotion at one intensity.
#[derive(Clone, Copy, Debug)]
pub struct EmotionTemplate {
    sustained: [f64; 4],
    intensity: f64,
    attack: usize,
}

impl EmotionTemplate {
    /// Attack-sustain envelope value at frame `t`.
    pub fn envelope(&self, t: usize) -> f64 {
        ((t + 1) as f64 / self.attack as f64).min(1.0)
    }

    /// Offsets `(brow_raise, brow_tilt, eye_open, mouth_curl)` at frame `t`.
    pub fn offsets_at(&self, t: usize) -> [f64; 4] {
        let e = self.intensity * self.envelope(t);
        [
            self.sustained[0] * e,
            self.sustained[1] * e,
            self.sustained[2] * e,
            self.sustained[3] * e,
        ]
    }

    /// Sustained offsets (the envelope at its plateau).
    pub fn sustained(&self) -> [f64; 4] {
        [
            self.sustained[0] * self.intensity,
            self.sustained[1] * self.intensity,
            self.sustained[2] * self.intensity,
            self.sustained[3] * self.intensity,
        ]
    }
}

/// Total function over the eight categories.
pub fn emotion_template(category: EmotionCategory, intensity: f64) -> EmotionTemplate {
    let sustained = TEMPLATE_TABLE
        .iter()
        .find(|(c, _)| *c == category)
        .map(|(_, o)| *o)
        .expect("table covers all categories");
    let attack = ATTACK_FRAMES
        .iter()
        .find(|(c, _)| *c == category)
        .map(|(_, a)| *a)
        .expect("table covers all categories");
    EmotionTemplate { sustained, intensity: intensity.clamp(0.0, 1.0), attack }
}
