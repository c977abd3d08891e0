//! Keypoint + jacobian motion representation and warp-field geometry.
//!
//! A face in motion is summarized by N keypoints in normalized image
//! coordinates plus one 2x2 jacobian per keypoint describing the local
//! affine motion of its neighbourhood. Flows between a source and a driving
//! set are blended per pixel by Gaussian-softmax masks into a dense
//! backward-warp field.

mod diffgeo;
mod flow;
mod image;

pub use diffgeo::{compose_flow_graph, warp_image_graph, FlowGraph};
pub use flow::{
    compose_dense_flow, default_bg_logit, discover_face_related, face_mask_energy,
    keypoint_flow, sample_bilinear, warp_image, DenseFlow, DEFAULT_SIGMA,
};
pub use image::Image;

use crate::geom::{Mat2, Vec2};
use thiserror::Error;

/// Determinant threshold below which a jacobian is considered degenerate.
pub const RIDGE_DET_THRESHOLD: f64 = 1e-3;
/// Ridge added to a degenerate jacobian before inversion.
pub const RIDGE_EPS: f64 = 1e-4;
const RIDGE_MAX_APPLICATIONS: u32 = 64;

/// Errors raised by motion geometry.
#[derive(Debug, Error)]
pub enum MotionError {
    #[error("degenerate jacobian at keypoint {index}: det {det:e} after ridge guard")]
    DegenerateJacobian { index: usize, det: f64 },
    #[error("sequence length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed ppm: {0}")]
    MalformedPpm(String),
    #[error("malformed flow blob: {0}")]
    MalformedBlob(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Adds `RIDGE_EPS * I` if the determinant is below the threshold. When one
/// ridge is not enough (a matrix near the zero matrix, say) the ridge
/// doubles on each further application until the determinant clears the
/// threshold. Returns the number of applications.
pub fn ridge_guard(j: &mut Mat2, index: usize) -> Result<u32, MotionError> {
    let mut applications = 0;
    let mut ridge = RIDGE_EPS;
    while j.det().abs() < RIDGE_DET_THRESHOLD {
        if applications >= RIDGE_MAX_APPLICATIONS {
            return Err(MotionError::DegenerateJacobian { index, det: j.det() });
        }
        j.a += ridge;
        j.d += ridge;
        ridge *= 2.0;
        applications += 1;
    }
    Ok(applications)
}

/// N keypoints in normalized [-1, 1]^2 coordinates (x right, y down) with
/// their local affine jacobians. Construction applies the ridge guard so
/// every stored jacobian is invertible.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub x: Vec<Vec2>,
    pub j: Vec<Mat2>,
}

impl KeypointSet {
    pub fn new(x: Vec<Vec2>, j: Vec<Mat2>) -> Result<Self, MotionError> {
        Self::new_with_guard_count(x, j).map(|(s, _)| s)
    }

    pub fn new_with_guard_count(
        x: Vec<Vec2>,
        mut j: Vec<Mat2>,
    ) -> Result<(Self, u32), MotionError> {
        if x.is_empty() || x.len() != j.len() {
            return Err(MotionError::Contract(format!(
                "keypoint set needs matching non-empty x ({}) and j ({})",
                x.len(),
                j.len()
            )));
        }
        if x.iter().any(|p| !p.is_finite()) || j.iter().any(|m| !m.is_finite()) {
            return Err(MotionError::Contract(
                "non-finite keypoint or jacobian".to_string(),
            ));
        }
        let mut guards = 0;
        for (k, m) in j.iter_mut().enumerate() {
            guards += ridge_guard(m, k)?;
        }
        Ok((KeypointSet { x, j }, guards))
    }

    /// All keypoints at the given positions with identity jacobians.
    pub fn identity_at(points: Vec<Vec2>) -> Self {
        let j = vec![Mat2::IDENTITY; points.len()];
        KeypointSet { x: points, j }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Flat 6N vector: per keypoint `x, y, j00, j01, j10, j11`. This is the
    /// CSV layout.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 6);
        for k in 0..self.len() {
            out.push(self.x[k].x);
            out.push(self.x[k].y);
            out.extend_from_slice(&self.j[k].to_array());
        }
        out
    }

    pub fn from_flat(values: &[f64]) -> Result<Self, MotionError> {
        if values.len() % 6 != 0 || values.is_empty() {
            return Err(MotionError::Contract(format!(
                "flat keypoint vector length {} is not a positive multiple of 6",
                values.len()
            )));
        }
        let n = values.len() / 6;
        let mut x = Vec::with_capacity(n);
        let mut j = Vec::with_capacity(n);
        for k in 0..n {
            let v = &values[k * 6..(k + 1) * 6];
            x.push(Vec2::new(v[0], v[1]));
            j.push(Mat2::new(v[2], v[3], v[4], v[5]));
        }
        KeypointSet::new(x, j)
    }

    /// Block layout used by the motion decoder head: all 2N coordinates
    /// first, then all 4N row-major jacobian entries.
    pub fn to_motion_row(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 6);
        for p in &self.x {
            out.push(p.x);
            out.push(p.y);
        }
        for m in &self.j {
            out.extend_from_slice(&m.to_array());
        }
        out
    }

    pub fn from_motion_row(values: &[f64]) -> Result<Self, MotionError> {
        if values.len() % 6 != 0 || values.is_empty() {
            return Err(MotionError::Contract(format!(
                "motion row length {} is not a positive multiple of 6",
                values.len()
            )));
        }
        let n = values.len() / 6;
        let x = (0..n)
            .map(|k| Vec2::new(values[2 * k], values[2 * k + 1]))
            .collect();
        let j = (0..n)
            .map(|k| {
                let v = &values[2 * n + 4 * k..2 * n + 4 * k + 4];
                Mat2::new(v[0], v[1], v[2], v[3])
            })
            .collect();
        KeypointSet::new(x, j)
    }

    /// Max absolute coordinate/jacobian difference, for closeness asserts.
    pub fn max_abs_diff(&self, other: &KeypointSet) -> f64 {
        let mut d: f64 = 0.0;
        for k in 0..self.len() {
            d = d.max((self.x[k].x - other.x[k].x).abs());
            d = d.max((self.x[k].y - other.x[k].y).abs());
            let (a, b) = (self.j[k].to_array(), other.j[k].to_array());
            for i in 0..4 {
                d = d.max((a[i] - b[i]).abs());
            }
        }
        d
    }
}

/// Additive delta on a subset of keypoints: indices are sorted and unique.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    indices: Vec<usize>,
    pub dx: Vec<Vec2>,
    pub dj: Vec<Mat2>,
}

impl Displacement {
    pub fn new(indices: Vec<usize>, dx: Vec<Vec2>, dj: Vec<Mat2>) -> Result<Self, MotionError> {
        if indices.len() != dx.len() || indices.len() != dj.len() {
            return Err(MotionError::Contract(
                "displacement component lengths disagree".to_string(),
            ));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MotionError::Contract(
                "displacement indices must be sorted and unique".to_string(),
            ));
        }
        Ok(Displacement { indices, dx, dj })
    }

    pub fn zero(indices: Vec<usize>) -> Result<Self, MotionError> {
        let n = indices.len();
        Displacement::new(indices, vec![Vec2::ZERO; n], vec![Mat2::new(0.0, 0.0, 0.0, 0.0); n])
    }

    /// Difference `a - b` restricted to the given keypoint indices.
    pub fn between(
        a: &KeypointSet,
        b: &KeypointSet,
        indices: &[usize],
    ) -> Result<Self, MotionError> {
        if a.len() != b.len() {
            return Err(MotionError::LengthMismatch { expected: a.len(), got: b.len() });
        }
        let mut dx = Vec::with_capacity(indices.len());
        let mut dj = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= a.len() {
                return Err(MotionError::Contract(format!(
                    "displacement index {k} out of range for {} keypoints",
                    a.len()
                )));
            }
            dx.push(a.x[k].sub(b.x[k]));
            dj.push(a.j[k].sub_mat(b.j[k]));
        }
        Displacement::new(indices.to_vec(), dx, dj)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn negated(&self) -> Displacement {
        Displacement {
            indices: self.indices.clone(),
            dx: self.dx.iter().map(|v| v.scale(-1.0)).collect(),
            dj: self.dj.iter().map(|m| m.scale(-1.0)).collect(),
        }
    }

    /// Exact element-wise sum over the union of affected indices.
    pub fn compose(&self, other: &Displacement) -> Displacement {
        let mut indices: Vec<usize> = self
            .indices
            .iter()
            .chain(other.indices.iter())
            .cloned()
            .collect();
        indices.sort_unstable();
        indices.dedup();
        let mut dx = vec![Vec2::ZERO; indices.len()];
        let mut dj = vec![Mat2::new(0.0, 0.0, 0.0, 0.0); indices.len()];
        for src in [self, other] {
            for (pos, &k) in src.indices.iter().enumerate() {
                let slot = indices.binary_search(&k).expect("index in union");
                dx[slot] = dx[slot].add(src.dx[pos]);
                dj[slot] = dj[slot].add_mat(src.dj[pos]);
            }
        }
        Displacement { indices, dx, dj }
    }
}

/// Applies a displacement: affected keypoints get `x + dx`, `J + dJ`; the
/// ridge guard is re-applied to the sums.
pub fn apply_displacement(
    base: &KeypointSet,
    d: &Displacement,
) -> Result<KeypointSet, MotionError> {
    let mut x = base.x.clone();
    let mut j = base.j.clone();
    for (pos, &k) in d.indices.iter().enumerate() {
        if k >= base.len() {
            return Err(MotionError::Contract(format!(
                "displacement index {k} out of range for {} keypoints",
                base.len()
            )));
        }
        x[k] = x[k].add(d.dx[pos]);
        j[k] = j[k].add_mat(d.dj[pos]);
        ridge_guard(&mut j[k], k)?;
    }
    Ok(KeypointSet { x, j })
}

/// The exploratory transfer: per frame, the deviation between emotional and
/// neutral representations on the face-related indices is added onto the
/// target sequence. Reproduces the raw additive experiment, artifacts
/// included.
pub fn transfer_displacement_naive(
    emo: &[KeypointSet],
    neutral: &[KeypointSet],
    target: &[KeypointSet],
    face_idx: &[usize],
) -> Result<Vec<KeypointSet>, MotionError> {
    if emo.len() != neutral.len() || emo.len() != target.len() {
        return Err(MotionError::LengthMismatch { expected: emo.len(), got: target.len() });
    }
    emo.iter()
        .zip(neutral)
        .zip(target)
        .map(|((e, n), t)| {
            let d = Displacement::between(e, n, face_idx)?;
            apply_displacement(t, &d)
        })
        .collect()
}

/// Normalized coordinates of the center of pixel (row, col).
pub fn pixel_center(row: usize, col: usize, height: usize, width: usize) -> Vec2 {
    Vec2::new(
        (col as f64 + 0.5) / width as f64 * 2.0 - 1.0,
        (row as f64 + 0.5) / height as f64 * 2.0 - 1.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_set() -> KeypointSet {
        KeypointSet::identity_at(vec![
            Vec2::new(-0.5, -0.5),
            Vec2::new(0.5, -0.5),
            Vec2::new(-0.5, 0.5),
            Vec2::new(0.5, 0.5),
        ])
    }

    #[test]
    fn zero_displacement_is_identity() {
        let s = square_set();
        let d = Displacement::zero(vec![0, 2]).unwrap();
        let out = apply_displacement(&s, &d).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn displacement_and_inverse_cancel() {
        let s = square_set();
        let d = Displacement::new(
            vec![1, 3],
            vec![Vec2::new(0.1, -0.2), Vec2::new(0.05, 0.07)],
            vec![Mat2::new(0.1, 0.02, -0.03, 0.2), Mat2::new(0.0, 0.1, 0.1, 0.0)],
        )
        .unwrap();
        let fwd = apply_displacement(&s, &d).unwrap();
        let back = apply_displacement(&fwd, &d.negated()).unwrap();
        assert!(back.max_abs_diff(&s) < 1e-15);
    }

    #[test]
    fn sequential_application_equals_composed_displacement() {
        let s = square_set();
        // Dyadic values keep float addition exact here.
        let d1 = Displacement::new(
            vec![0, 1],
            vec![Vec2::new(0.25, -0.5), Vec2::new(0.125, 0.0)],
            vec![Mat2::new(0.25, 0.0, 0.0, 0.5), Mat2::new(0.0, 0.125, 0.0, 0.0)],
        )
        .unwrap();
        let d2 = Displacement::new(
            vec![1, 2],
            vec![Vec2::new(0.5, 0.25), Vec2::new(-0.25, 0.125)],
            vec![Mat2::new(0.125, 0.0, 0.25, 0.0), Mat2::new(0.0, 0.0, 0.0, 0.25)],
        )
        .unwrap();
        let seq = apply_displacement(&apply_displacement(&s, &d1).unwrap(), &d2).unwrap();
        let composed = apply_displacement(&s, &d1.compose(&d2)).unwrap();
        assert_eq!(seq, composed);
    }

    #[test]
    fn ridge_guard_counts_and_restores_invertibility() {
        let mut j = Mat2::new(0.0, 0.0, 0.0, 0.0);
        let n = ridge_guard(&mut j, 0).unwrap();
        assert!(n > 0);
        assert!(j.det().abs() >= 1e-6);
    }

    #[test]
    fn displacement_rejects_unsorted_indices() {
        assert!(Displacement::zero(vec![2, 1]).is_err());
        assert!(Displacement::zero(vec![1, 1]).is_err());
    }

    #[test]
    fn transfer_with_equal_emo_and_neutral_returns_target() {
        let seq = vec![square_set(), square_set()];
        let out = transfer_displacement_naive(&seq, &seq, &seq, &[0, 1]).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn transfer_with_target_equal_neutral_substitutes_emotional_points() {
        let neutral = vec![square_set()];
        let mut emo_set = square_set();
        emo_set.x[1] = Vec2::new(0.7, -0.3);
        emo_set.j[1] = Mat2::new(1.5, 0.0, 0.0, 0.8);
        let emo = vec![emo_set.clone()];
        let out = transfer_displacement_naive(&emo, &neutral, &neutral, &[1]).unwrap();
        assert_eq!(out[0].x[1], emo_set.x[1]);
        assert_eq!(out[0].j[1], emo_set.j[1]);
        assert_eq!(out[0].x[0], neutral[0].x[0]);
    }

    #[test]
    fn flat_round_trip() {
        let s = square_set();
        let flat = s.to_flat();
        assert_eq!(flat.len(), 24);
        let back = KeypointSet::from_flat(&flat).unwrap();
        assert_eq!(back, s);
    }
}
