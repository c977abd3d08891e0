//! Procedural synthetic face with exact analytic ground truth.
//!
//! Every rendered frame comes with the keypoints, jacobians, pose, and
//! emotion label that produced it, so the puppet serves as dataset,
//! pose source, and keypoint teacher at once.
//!
//! Geometry: a head ellipse plus five facial parts (two brow+eye clusters,
//! one mouth) drawn as signed-distance shapes. Each part is deformed by a
//! local affine anchored at its control keypoint; the whole head then gets
//! the global pose affine. Keypoints 0-2 are the face-interior controllers
//! (left cluster, right cluster, mouth); 3-9 ride the head outline and
//! depend on pose alone.

mod dataset;
mod synth;
mod template;

pub use dataset::{
    load_manifest, load_sequence, write_dataset, DatasetSpec, LoadedSequence, ManifestEntry,
    SequenceMeta, Split,
};
pub use synth::{smooth_envelope, smooth_pose_trajectory, synth_sequence, synth_speech};
pub use template::{emotion_template, EmotionTemplate, ATTACK_FRAMES, TEMPLATE_TABLE};

use crate::geom::{Mat2, Rect, Vec2};
use crate::motion::{Image, KeypointSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of puppet keypoints.
pub const NUM_KEYPOINTS: usize = 10;
/// Indices of the face-interior controllers, by construction.
pub const FACE_KEYPOINTS: [usize; 3] = [0, 1, 2];
/// Frames per second of every synthesized sequence.
pub const FPS: usize = 25;

#[derive(Debug, Error)]
pub enum PuppetError {
    #[error("{field} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Motion(#[from] crate::motion::MotionError),
}

fn check_range(
    field: &'static str,
    value: f64,
    lo: f64,
    hi: f64,
) -> Result<(), PuppetError> {
    if !(lo..=hi).contains(&value) || !value.is_finite() {
        return Err(PuppetError::OutOfRange { field, value, lo, hi });
    }
    Ok(())
}

/// Dimensionless shape factors and colors of one synthetic subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuppetIdentity {
    pub face_width: f64,
    pub face_height: f64,
    pub eye_spacing: f64,
    pub feature_scale: f64,
    pub skin_rgb: [f64; 3],
    pub feature_rgb: [f64; 3],
    /// Fundamental voice frequency used by the speech synthesizer.
    pub base_freq: f64,
}

impl PuppetIdentity {
    pub fn validate(&self) -> Result<(), PuppetError> {
        check_range("face_width", self.face_width, 0.7, 1.3)?;
        check_range("face_height", self.face_height, 0.7, 1.3)?;
        check_range("eye_spacing", self.eye_spacing, 0.7, 1.3)?;
        check_range("feature_scale", self.feature_scale, 0.7, 1.3)?;
        for c in self.skin_rgb.iter().chain(self.feature_rgb.iter()) {
            check_range("color", *c, 0.0, 1.0)?;
        }
        Ok(())
    }

    /// A middle-of-the-range identity.
    pub fn canonical() -> Self {
        PuppetIdentity {
            face_width: 1.0,
            face_height: 1.0,
            eye_spacing: 1.0,
            feature_scale: 1.0,
            skin_rgb: [0.82, 0.67, 0.55],
            feature_rgb: [0.15, 0.11, 0.10],
            base_freq: 170.0,
        }
    }

    /// Samples an identity uniformly inside the valid ranges.
    pub fn sample<R: rand::Rng>(rng: &mut R) -> Self {
        PuppetIdentity {
            face_width: rng.gen_range(0.75..1.25),
            face_height: rng.gen_range(0.75..1.25),
            eye_spacing: rng.gen_range(0.75..1.25),
            feature_scale: rng.gen_range(0.75..1.25),
            skin_rgb: [
                rng.gen_range(0.55..0.95),
                rng.gen_range(0.45..0.8),
                rng.gen_range(0.35..0.7),
            ],
            feature_rgb: [
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
            ],
            base_freq: rng.gen_range(110.0..260.0),
        }
    }
}

/// Head pose: roll (radians), shear-approximated yaw/pitch, translation in
/// normalized units, isotropic scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseVec {
    pub roll: f64,
    pub yaw_shear: f64,
    pub pitch_shear: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl PoseVec {
    pub const IDENTITY: PoseVec = PoseVec {
        roll: 0.0,
        yaw_shear: 0.0,
        pitch_shear: 0.0,
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
    };

    pub fn validate(&self) -> Result<(), PuppetError> {
        check_range("roll", self.roll, -0.8, 0.8)?;
        check_range("yaw_shear", self.yaw_shear, -0.35, 0.35)?;
        check_range("pitch_shear", self.pitch_shear, -0.35, 0.35)?;
        check_range("tx", self.tx, -0.3, 0.3)?;
        check_range("ty", self.ty, -0.3, 0.3)?;
        check_range("scale", self.scale, 0.6, 1.4)?;
        Ok(())
    }

    /// Linear part: `scale * R(roll) * Shear(yaw, pitch)`.
    pub fn linear(&self) -> Mat2 {
        let shear = Mat2::new(1.0, self.yaw_shear, self.pitch_shear, 1.0);
        Mat2::rotation(self.roll).mul_mat(shear).scale(self.scale)
    }

    pub fn translation(&self) -> Vec2 {
        Vec2::new(self.tx, self.ty)
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.roll, self.yaw_shear, self.pitch_shear, self.tx, self.ty, self.scale]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        PoseVec {
            roll: v[0],
            yaw_shear: v[1],
            pitch_shear: v[2],
            tx: v[3],
            ty: v[4],
            scale: v[5],
        }
    }
}

/// Full face state for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuppetState {
    pub mouth_open: f64,
    pub mouth_curl: f64,
    pub brow_raise: f64,
    pub brow_tilt: f64,
    pub eye_open: f64,
    pub pose: PoseVec,
}

impl PuppetState {
    /// Resting face: eyes three-quarters open, everything else zero.
    pub fn neutral() -> Self {
        PuppetState {
            mouth_open: 0.0,
            mouth_curl: 0.0,
            brow_raise: 0.0,
            brow_tilt: 0.0,
            eye_open: NEUTRAL_EYE_OPEN,
            pose: PoseVec::IDENTITY,
        }
    }

    pub fn validate(&self) -> Result<(), PuppetError> {
        check_range("mouth_open", self.mouth_open, 0.0, 1.0)?;
        check_range("mouth_curl", self.mouth_curl, -1.0, 1.0)?;
        check_range("brow_raise", self.brow_raise, -1.0, 1.0)?;
        check_range("brow_tilt", self.brow_tilt, -1.0, 1.0)?;
        check_range("eye_open", self.eye_open, 0.0, 1.0)?;
        self.pose.validate()
    }
}

/// Eye openness at rest; the eye part affine is identity exactly there.
pub const NEUTRAL_EYE_OPEN: f64 = 0.75;

/// One of the eight emotion categories with an intensity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub category: EmotionCategory,
    pub intensity: f64,
}

impl EmotionLabel {
    pub fn new(category: EmotionCategory, intensity: f64) -> Result<Self, PuppetError> {
        check_range("intensity", intensity, 0.0, 1.0)?;
        Ok(EmotionLabel { category, intensity })
    }

    pub fn neutral() -> Self {
        EmotionLabel { category: EmotionCategory::Neutral, intensity: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionCategory {
    Neutral,
    Happy,
    Angry,
    Sad,
    Surprised,
    Fear,
    Disgust,
    Contempt,
}

impl EmotionCategory {
    pub const ALL: [EmotionCategory; 8] = [
        EmotionCategory::Neutral,
        EmotionCategory::Happy,
        EmotionCategory::Angry,
        EmotionCategory::Sad,
        EmotionCategory::Surprised,
        EmotionCategory::Fear,
        EmotionCategory::Disgust,
        EmotionCategory::Contempt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EmotionCategory::Neutral => "neutral",
            EmotionCategory::Happy => "happy",
            EmotionCategory::Angry => "angry",
            EmotionCategory::Sad => "sad",
            EmotionCategory::Surprised => "surprised",
            EmotionCategory::Fear => "fear",
            EmotionCategory::Disgust => "disgust",
            EmotionCategory::Contempt => "contempt",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, PuppetError> {
        EmotionCategory::ALL
            .iter()
            .find(|c| c.name() == name)
            .copied()
            .ok_or_else(|| PuppetError::Contract(format!("unknown emotion {name:?}")))
    }

    /// Stable index used by the classifier tie-break.
    pub fn index(&self) -> usize {
        EmotionCategory::ALL.iter().position(|c| c == self).unwrap()
    }
}

// Canonical geometry, in head-frame normalized units before identity
// scaling. y grows down.
const HEAD_RX: f64 = 0.52;
const HEAD_RY: f64 = 0.68;
const CLUSTER_X: f64 = 0.26;
const CLUSTER_Y: f64 = -0.22;
const MOUTH_Y: f64 = 0.34;
const BROW_OFFSET_Y: f64 = -0.10;
const EYE_OFFSET_Y: f64 = 0.05;
const OUTLINE_RADIUS: f64 = 1.12;

/// Mouth vertical travel per unit of `mouth_open` in the keypoint position.
pub const MOUTH_OPEN_POS_GAIN: f64 = 0.045;
/// Mouth vertical travel per unit of `mouth_curl`.
pub const MOUTH_CURL_POS_GAIN: f64 = -0.035;

struct PartPlacement {
    anchor: Vec2,
    offset: Vec2,
    affine: Mat2,
}

/// Anchor + state-dependent placement of the three facial parts plus the
/// seven outline anchors. Index matches the keypoint index.
fn part_placements(id: &PuppetIdentity, st: &PuppetState) -> Vec<PartPlacement> {
    let (fw, fh) = (id.face_width, id.face_height);
    let eye_scale = 0.25 + st.eye_open;
    let cluster_x = CLUSTER_X * id.eye_spacing * fw;
    let brow_dy = -0.06 * st.brow_raise;
    let left = PartPlacement {
        anchor: Vec2::new(-cluster_x, CLUSTER_Y * fh),
        offset: Vec2::new(0.0, brow_dy + 0.012 * st.brow_tilt),
        affine: Mat2::rotation(0.35 * st.brow_tilt).mul_mat(Mat2::diag(1.0, eye_scale)),
    };
    let right = PartPlacement {
        anchor: Vec2::new(cluster_x, CLUSTER_Y * fh),
        offset: Vec2::new(0.0, brow_dy - 0.012 * st.brow_tilt),
        affine: Mat2::rotation(-0.35 * st.brow_tilt).mul_mat(Mat2::diag(1.0, eye_scale)),
    };
    let mouth = PartPlacement {
        anchor: Vec2::new(0.0, MOUTH_Y * fh),
        offset: Vec2::new(
            0.0,
            MOUTH_OPEN_POS_GAIN * st.mouth_open + MOUTH_CURL_POS_GAIN * st.mouth_curl,
        ),
        affine: Mat2::new(
            1.0 + 0.22 * st.mouth_curl,
            0.0,
            0.18 * st.mouth_curl,
            1.0 + 1.2 * st.mouth_open,
        ),
    };
    let mut parts = vec![left, right, mouth];
    for i in 0..7 {
        let angle = -std::f64::consts::FRAC_PI_2 + i as f64 * (2.0 * std::f64::consts::PI / 7.0);
        parts.push(PartPlacement {
            anchor: Vec2::new(
                OUTLINE_RADIUS * HEAD_RX * fw * angle.cos(),
                OUTLINE_RADIUS * HEAD_RY * fh * angle.sin(),
            ),
            offset: Vec2::ZERO,
            affine: Mat2::IDENTITY,
        });
    }
    parts
}

/// Exact ground-truth keypoints: `x_k = G (anchor_k + offset_k(st)) + t`,
/// `J_k = G A_k(st)`.
pub fn ground_truth_keypoints(id: &PuppetIdentity, st: &PuppetState) -> KeypointSet {
    let g = st.pose.linear();
    let t = st.pose.translation();
    let parts = part_placements(id, st);
    let x = parts
        .iter()
        .map(|p| g.mul_vec(p.anchor.add(p.offset)).add(t))
        .collect();
    let j = parts.iter().map(|p| g.mul_mat(p.affine)).collect();
    KeypointSet::new(x, j).expect("puppet jacobians are well conditioned")
}

/// Inner-face box (identity pose) containing the three face-interior
/// keypoints with margin, excluding the outline anchors.
pub fn face_box(id: &PuppetIdentity) -> Rect {
    let cluster_x = CLUSTER_X * id.eye_spacing * id.face_width;
    Rect::new(
        Vec2::new(-(cluster_x + 0.10), CLUSTER_Y * id.face_height - 0.12),
        Vec2::new(cluster_x + 0.10, MOUTH_Y * id.face_height + 0.10),
    )
}

// Signed-distance helpers.

// First-order distance estimate (implicit value over gradient norm), tight
// even for thin ellipses.
fn sd_ellipse(q: Vec2, rx: f64, ry: f64) -> f64 {
    let k = ((q.x / rx) * (q.x / rx) + (q.y / ry) * (q.y / ry)).sqrt();
    if k < 1e-9 {
        return -rx.min(ry);
    }
    let grad = ((q.x / (rx * rx)) * (q.x / (rx * rx))
        + (q.y / (ry * ry)) * (q.y / (ry * ry)))
        .sqrt()
        / k;
    (k - 1.0) / grad.max(1e-9)
}

fn sd_round_box(q: Vec2, half: Vec2, round: f64) -> f64 {
    let dx = q.x.abs() - half.x;
    let dy = q.y.abs() - half.y;
    let outside = Vec2::new(dx.max(0.0), dy.max(0.0)).norm();
    outside + dx.max(dy).min(0.0) - round
}

fn smoothstep_coverage(sd: f64, aa: f64) -> f64 {
    let t = ((aa - sd) / (2.0 * aa)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

const BACKGROUND_RGB: [f64; 3] = [0.09, 0.10, 0.12];

/// Renders the puppet at the given state. Deterministic; every part is
/// positioned by the same placements that define the ground-truth keypoints.
pub fn render(
    id: &PuppetIdentity,
    st: &PuppetState,
    height: usize,
    width: usize,
) -> Result<Image, PuppetError> {
    id.validate()?;
    st.validate()?;
    let g = st.pose.linear();
    let t = st.pose.translation();
    let g_inv = g.inverse();
    let parts = part_placements(id, st);
    let part_invs: Vec<Mat2> = parts.iter().take(3).map(|p| p.affine.inverse()).collect();

    let (fw, fh, fs) = (id.face_width, id.face_height, id.feature_scale);
    let brow_half = Vec2::new(0.125 * fs, 0.018 * fs);
    let eye_r = (0.085 * fs, 0.055 * fs);
    let mouth_r = (0.16 * fs, 0.035 * fs);
    let aa = 1.5 * 2.0 / height as f64;
    // Darker shades of the identity colors for eye and mouth interiors.
    let eye_rgb = id.feature_rgb;
    let mouth_rgb = [
        (id.feature_rgb[0] + 0.25).min(1.0),
        id.feature_rgb[1] * 0.6,
        id.feature_rgb[2] * 0.6,
    ];

    let mut data = Vec::with_capacity(height * width * 3);
    for row in 0..height {
        for col in 0..width {
            let p = crate::motion::pixel_center(row, col, height, width);
            let local = g_inv.mul_vec(p.sub(t));
            let mut rgb = BACKGROUND_RGB;

            let head = sd_ellipse(local, HEAD_RX * fw, HEAD_RY * fh);
            blend(&mut rgb, id.skin_rgb, smoothstep_coverage(head, aa));

            // Brow + eye clusters.
            for (k, inv) in part_invs.iter().enumerate().take(2) {
                let center = parts[k].anchor.add(parts[k].offset);
                let q = inv.mul_vec(local.sub(center));
                let brow = sd_round_box(
                    q.sub(Vec2::new(0.0, BROW_OFFSET_Y)),
                    brow_half,
                    0.012 * fs,
                );
                blend(&mut rgb, id.feature_rgb, smoothstep_coverage(brow, aa));
                let eye = sd_ellipse(q.sub(Vec2::new(0.0, EYE_OFFSET_Y)), eye_r.0, eye_r.1);
                blend(&mut rgb, eye_rgb, smoothstep_coverage(eye, aa));
            }

            // Mouth, with the quadratic curl bend (second-order only, so the
            // keypoint jacobian is untouched at the anchor).
            {
                let center = parts[2].anchor.add(parts[2].offset);
                let q = part_invs[2].mul_vec(local.sub(center));
                let bend = st.mouth_curl * 0.08 * ((q.x / mouth_r.0) * (q.x / mouth_r.0) - 0.5);
                let qb = Vec2::new(q.x, q.y + bend);
                let mouth = sd_ellipse(qb, mouth_r.0, mouth_r.1);
                blend(&mut rgb, mouth_rgb, smoothstep_coverage(mouth, aa));
            }

            data.extend_from_slice(&rgb);
        }
    }
    Ok(Image::new(height, width, data)?)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], coverage: f64) {
    for ch in 0..3 {
        dst[ch] = dst[ch] * (1.0 - coverage) + src[ch] * coverage;
    }
}

/// The 14 named landmarks decoded from a keypoint set: each landmark is
/// `x_k + J_k * local_offset`, so generated keypoint trajectories yield
/// landmark trajectories without a detector.
pub const LANDMARK_NAMES: [&str; 14] = [
    "mouth_left",
    "mouth_right",
    "mouth_center",
    "brow_left",
    "brow_right",
    "eye_left",
    "eye_right",
    "outline_0",
    "outline_1",
    "outline_2",
    "outline_3",
    "outline_4",
    "outline_5",
    "outline_6",
];

/// Landmark indices that belong to the mouth subset.
pub const MOUTH_LANDMARKS: [usize; 3] = [0, 1, 2];

/// (keypoint index, part-local offset) for each landmark.
pub fn landmark_bindings(id: &PuppetIdentity) -> Vec<(usize, Vec2)> {
    let fs = id.feature_scale;
    let mut out = vec![
        (2, Vec2::new(-0.16 * fs, 0.0)),
        (2, Vec2::new(0.16 * fs, 0.0)),
        (2, Vec2::ZERO),
        (0, Vec2::new(0.0, BROW_OFFSET_Y)),
        (1, Vec2::new(0.0, BROW_OFFSET_Y)),
        (0, Vec2::new(0.0, EYE_OFFSET_Y)),
        (1, Vec2::new(0.0, EYE_OFFSET_Y)),
    ];
    for k in 3..NUM_KEYPOINTS {
        out.push((k, Vec2::ZERO));
    }
    out
}

/// Decodes the named landmarks from one keypoint set.
pub fn decode_landmarks(id: &PuppetIdentity, set: &KeypointSet) -> Vec<Vec2> {
    landmark_bindings(id)
        .iter()
        .map(|(k, off)| set.x[*k].add(set.j[*k].mul_vec(*off)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_identity_pose_keypoints_have_identity_jacobians() {
        let id = PuppetIdentity::canonical();
        let set = ground_truth_keypoints(&id, &PuppetState::neutral());
        assert_eq!(set.len(), NUM_KEYPOINTS);
        for k in 0..NUM_KEYPOINTS {
            assert!(set.j[k].sub_mat(Mat2::IDENTITY).to_array().iter().all(|v| v.abs() < 1e-12));
        }
        // Canonical anchor positions.
        assert!((set.x[2].x).abs() < 1e-12);
        assert!((set.x[2].y - MOUTH_Y).abs() < 1e-12);
    }

    #[test]
    fn global_scale_multiplies_positions_and_jacobians() {
        let id = PuppetIdentity::canonical();
        let mut st = PuppetState::neutral();
        st.pose.scale = 1.2;
        let set = ground_truth_keypoints(&id, &st);
        let base = ground_truth_keypoints(&id, &PuppetState::neutral());
        for k in 0..NUM_KEYPOINTS {
            assert!(set.x[k].sub(base.x[k].scale(1.2)).norm() < 1e-12);
            let expect = base.j[k].scale(1.2);
            assert!(set.j[k].sub_mat(expect).to_array().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn keypoints_are_exactly_pose_equivariant() {
        let id = PuppetIdentity::canonical();
        let mut st = PuppetState::neutral();
        st.mouth_open = 0.6;
        st.brow_raise = 0.4;
        st.mouth_curl = -0.5;
        let neutral_pose = ground_truth_keypoints(&id, &st);

        let pose = PoseVec {
            roll: 0.3,
            yaw_shear: 0.1,
            pitch_shear: -0.15,
            tx: 0.1,
            ty: -0.2,
            scale: 1.15,
        };
        st.pose = pose;
        let posed = ground_truth_keypoints(&id, &st);

        let g = pose.linear();
        let t = pose.translation();
        for k in 0..NUM_KEYPOINTS {
            let expect_x = g.mul_vec(neutral_pose.x[k]).add(t);
            assert!(posed.x[k].sub(expect_x).norm() < 1e-12);
            let expect_j = g.mul_mat(neutral_pose.j[k]);
            assert!(posed.j[k]
                .sub_mat(expect_j)
                .to_array()
                .iter()
                .all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn mouth_curl_sweep_moves_only_the_mouth_keypoint() {
        let id = PuppetIdentity::canonical();
        let base = ground_truth_keypoints(&id, &PuppetState::neutral());
        for curl in [-1.0, -0.4, 0.3, 0.9] {
            let mut st = PuppetState::neutral();
            st.mouth_curl = curl;
            let set = ground_truth_keypoints(&id, &st);
            for k in 0..NUM_KEYPOINTS {
                let moved = set.x[k].sub(base.x[k]).norm() > 1e-12
                    || set.j[k]
                        .sub_mat(base.j[k])
                        .to_array()
                        .iter()
                        .any(|v| v.abs() > 1e-12);
                assert_eq!(moved, k == 2, "keypoint {k} at curl {curl}");
            }
        }
    }

    #[test]
    fn only_face_keypoints_respond_to_emotion_state() {
        let id = PuppetIdentity::canonical();
        let base = ground_truth_keypoints(&id, &PuppetState::neutral());
        let mut st = PuppetState::neutral();
        st.brow_raise = 0.8;
        st.brow_tilt = -0.6;
        st.eye_open = 0.2;
        st.mouth_curl = 0.7;
        st.mouth_open = 0.9;
        let set = ground_truth_keypoints(&id, &st);
        for k in 3..NUM_KEYPOINTS {
            assert!(set.x[k].sub(base.x[k]).norm() < 1e-15);
            assert!(set.j[k]
                .sub_mat(base.j[k])
                .to_array()
                .iter()
                .all(|v| v.abs() < 1e-15));
        }
        for k in FACE_KEYPOINTS {
            let changed = set.x[k].sub(base.x[k]).norm() > 1e-6
                || set.j[k]
                    .sub_mat(base.j[k])
                    .to_array()
                    .iter()
                    .any(|v| v.abs() > 1e-6);
            assert!(changed, "face keypoint {k} should respond");
        }
    }

    #[test]
    fn render_is_deterministic() {
        let id = PuppetIdentity::canonical();
        let st = PuppetState::neutral();
        let a = render(&id, &st, 64, 64).unwrap();
        let b = render(&id, &st, 64, 64).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mouth_open_changes_only_the_mouth_region() {
        let id = PuppetIdentity::canonical();
        let mut open = PuppetState::neutral();
        open.mouth_open = 1.0;
        let closed_img = render(&id, &PuppetState::neutral(), 64, 64).unwrap();
        let open_img = render(&id, &open, 64, 64).unwrap();

        // Generous mouth bounding box in normalized coordinates.
        let mouth_box = Rect::new(Vec2::new(-0.35, 0.15), Vec2::new(0.35, 0.62));
        let mut inside_energy = 0.0;
        for row in 0..64 {
            for col in 0..64 {
                let p = crate::motion::pixel_center(row, col, 64, 64);
                let d: f64 = closed_img
                    .pixel(row, col)
                    .iter()
                    .zip(open_img.pixel(row, col))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                if mouth_box.contains(p) {
                    inside_energy += d;
                } else {
                    assert!(d < 1e-12, "pixel outside mouth box changed at ({row},{col})");
                }
            }
        }
        assert!(inside_energy > 0.1, "mouth region should visibly change");
    }

    #[test]
    fn pure_translation_matches_warped_neutral_render() {
        let id = PuppetIdentity::canonical();
        let mut st = PuppetState::neutral();
        st.pose.tx = 0.1;
        let shifted = render(&id, &st, 64, 64).unwrap();
        let base = render(&id, &PuppetState::neutral(), 64, 64).unwrap();
        // tx = 0.1 is 3.2 pixels at W = 64; compare against a bilinear shift
        // of the neutral render away from the borders.
        let mut worst = 0.0f64;
        for row in 2..62 {
            for col in 2..62 {
                let p = crate::motion::pixel_center(row, col, 64, 64);
                let src = crate::motion::sample_bilinear(
                    &base,
                    Vec2::new(p.x - 0.1, p.y),
                );
                for ch in 0..3 {
                    worst = worst.max((shifted.pixel(row, col)[ch] - src[ch]).abs());
                }
            }
        }
        // Bilinear resampling of anti-aliased edges differs by up to the
        // edge contrast across one pixel.
        assert!(worst < 0.35, "worst pixel difference {worst}");
    }

    #[test]
    fn face_box_contains_face_keypoints_and_excludes_outline() {
        for seed in 0..10u64 {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let id = PuppetIdentity::sample(&mut rng);
            let rect = face_box(&id);
            let set = ground_truth_keypoints(&id, &PuppetState::neutral());
            for k in FACE_KEYPOINTS {
                assert!(rect.contains(set.x[k]), "face keypoint {k} outside box");
            }
            for k in 3..NUM_KEYPOINTS {
                assert!(!rect.contains(set.x[k]), "outline keypoint {k} inside box");
            }
        }
    }

    #[test]
    fn out_of_range_state_is_rejected() {
        let id = PuppetIdentity::canonical();
        let mut st = PuppetState::neutral();
        st.mouth_open = 1.5;
        assert!(matches!(
            render(&id, &st, 32, 32),
            Err(PuppetError::OutOfRange { .. })
        ));
    }
}
