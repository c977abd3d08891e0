//! Dense backward-warp fields from keypoint motion.

use std::io::{Read, Write};

use super::{pixel_center, Image, KeypointSet, MotionError};
use crate::geom::{Mat2, Rect, Vec2};

/// Per-pixel backward source coordinates plus the per-keypoint blend masks
/// that produced them (index N is the background component).
#[derive(Clone, Debug)]
pub struct DenseFlow {
    pub height: usize,
    pub width: usize,
    /// Row-major H*W coordinates in normalized space (may exit [-1, 1];
    /// sampling clamps).
    pub coords: Vec<Vec2>,
    /// (N+1) planes of H*W blend weights, keypoints first, background last.
    pub masks: Vec<Vec<f64>>,
    /// Ridge-guard applications performed while inverting driving jacobians.
    pub guard_count: u32,
}

impl DenseFlow {
    pub fn num_keypoints(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn coord(&self, row: usize, col: usize) -> Vec2 {
        self.coords[row * self.width + col]
    }

    /// Raw little-endian f32 blob: 16-byte header (magic `EAMF`, u32 height,
    /// width, channels) then channel-planar data — coord-x plane, coord-y
    /// plane, then one plane per mask.
    pub fn write_blob<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let channels = 2 + self.masks.len();
        w.write_all(b"EAMF")?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(channels as u32).to_le_bytes())?;
        let plane = |w: &mut W, values: &mut dyn Iterator<Item = f64>| -> std::io::Result<()> {
            for v in values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            Ok(())
        };
        plane(w, &mut self.coords.iter().map(|c| c.x))?;
        plane(w, &mut self.coords.iter().map(|c| c.y))?;
        for mask in &self.masks {
            plane(w, &mut mask.iter().cloned())?;
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Self, MotionError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[0..4] != b"EAMF" {
            return Err(MotionError::MalformedBlob("bad magic".to_string()));
        }
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        if channels < 3 {
            return Err(MotionError::MalformedBlob(format!(
                "need at least 3 channels, got {channels}"
            )));
        }
        let plane_len = height * width;
        let mut raw = vec![0u8; plane_len * channels * 4];
        r.read_exact(&mut raw)?;
        let read_plane = |idx: usize| -> Vec<f64> {
            let base = idx * plane_len * 4;
            (0..plane_len)
                .map(|i| {
                    f32::from_le_bytes(raw[base + i * 4..base + i * 4 + 4].try_into().unwrap())
                        as f64
                })
                .collect()
        };
        let xs = read_plane(0);
        let ys = read_plane(1);
        let coords = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| Vec2::new(x, y))
            .collect();
        let masks = (2..channels).map(read_plane).collect();
        Ok(DenseFlow { height, width, coords, masks, guard_count: 0 })
    }
}

/// Guarded inverse of a driving jacobian: the ridge is added until the
/// determinant clears the threshold. Returns the inverse and the number of
/// ridge applications.
fn guarded_inverse(j: Mat2, index: usize) -> Result<(Mat2, u32), MotionError> {
    let mut j = j;
    let guards = super::ridge_guard(&mut j, index)?;
    Ok((j.inverse(), guards))
}

/// First-order flow of keypoint `k` evaluated at normalized point `z`:
/// `x_src_k + J_src_k (J_drv_k)^-1 (z - x_drv_k)`. Exact at the anchor:
/// `z = x_drv_k` maps to `x_src_k`.
pub fn keypoint_flow(
    src: &KeypointSet,
    drv: &KeypointSet,
    k: usize,
    z: Vec2,
) -> Result<Vec2, MotionError> {
    if k >= src.len() || k >= drv.len() {
        return Err(MotionError::Contract(format!(
            "keypoint index {k} out of range"
        )));
    }
    let (inv, _) = guarded_inverse(drv.j[k], k)?;
    let m = src.j[k].mul_mat(inv);
    Ok(src.x[k].add(m.mul_vec(z.sub(drv.x[k]))))
}

/// Composes the dense backward-warp field from per-keypoint flows blended by
/// Gaussian-softmax masks.
///
/// Per pixel center `z`, mask logits are `-|z - x_drv_k|^2 / (2 sigma^2)`
/// for the keypoints and `bg_logit` for the background; the flow is the
/// mask-weighted sum of each keypoint flow plus the background identity.
pub fn compose_dense_flow(
    src: &KeypointSet,
    drv: &KeypointSet,
    height: usize,
    width: usize,
    sigma: f64,
    bg_logit: f64,
) -> Result<DenseFlow, MotionError> {
    if height < 8 || width < 8 {
        return Err(MotionError::Contract(format!(
            "flow field needs at least 8x8 pixels, got {height}x{width}"
        )));
    }
    if src.len() != drv.len() {
        return Err(MotionError::LengthMismatch { expected: src.len(), got: drv.len() });
    }
    let n = src.len();
    let mut guard_count = 0;
    let transforms: Vec<Mat2> = (0..n)
        .map(|k| {
            let (inv, guards) = guarded_inverse(drv.j[k], k)?;
            guard_count += guards;
            Ok(src.j[k].mul_mat(inv))
        })
        .collect::<Result<_, MotionError>>()?;

    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut coords = vec![Vec2::ZERO; height * width];
    let mut masks = vec![vec![0.0; height * width]; n + 1];
    let mut logits = vec![0.0; n + 1];
    for row in 0..height {
        for col in 0..width {
            let z = pixel_center(row, col, height, width);
            for k in 0..n {
                logits[k] = -z.sub(drv.x[k]).norm_sq() * inv_two_sigma_sq;
            }
            logits[n] = bg_logit;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            let mut weights = vec![0.0; n + 1];
            for (k, &l) in logits.iter().enumerate() {
                let e = (l - max).exp();
                weights[k] = e;
                total += e;
            }
            let idx = row * width + col;
            let mut out = Vec2::ZERO;
            for k in 0..n {
                let w = weights[k] / total;
                masks[k][idx] = w;
                let flow = src.x[k].add(transforms[k].mul_vec(z.sub(drv.x[k])));
                out = out.add(flow.scale(w));
            }
            let wbg = weights[n] / total;
            masks[n][idx] = wbg;
            coords[idx] = out.add(z.scale(wbg));
        }
    }
    Ok(DenseFlow { height, width, coords, masks, guard_count })
}

/// Backward bilinear warp of `src` along `flow`, with border clamping.
pub fn warp_image(src: &Image, flow: &DenseFlow) -> Result<Image, MotionError> {
    if src.height() != flow.height || src.width() != flow.width {
        return Err(MotionError::Contract(format!(
            "flow {}x{} does not match image {}x{}",
            flow.height,
            flow.width,
            src.height(),
            src.width()
        )));
    }
    let (h, w) = (flow.height, flow.width);
    let mut data = vec![0.0; h * w * 3];
    for row in 0..h {
        for col in 0..w {
            let c = flow.coord(row, col);
            let rgb = sample_bilinear(src, c);
            let o = (row * w + col) * 3;
            data[o..o + 3].copy_from_slice(&rgb);
        }
    }
    Image::new(h, w, data)
}

/// Bilinear sample at a normalized coordinate with border clamping. Matches
/// the differentiable sampler bit for bit.
pub fn sample_bilinear(src: &Image, c: Vec2) -> [f64; 3] {
    let (w, h) = (src.width(), src.height());
    let (px, py) = crate::diffmath::pixel_coords(c.x, c.y, w, h);
    let (x0, x1, fx) = crate::diffmath::bilinear_cell(px, w);
    let (y0, y1, fy) = crate::diffmath::bilinear_cell(py, h);
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let v00 = src.data()[(y0 * w + x0) * 3 + ch];
        let v01 = src.data()[(y0 * w + x1) * 3 + ch];
        let v10 = src.data()[(y1 * w + x0) * 3 + ch];
        let v11 = src.data()[(y1 * w + x1) * 3 + ch];
        let top = v00 + fx * (v01 - v00);
        let bot = v10 + fx * (v11 - v10);
        *o = top + fy * (bot - top);
    }
    out
}

/// Ranks keypoints by mean mask energy inside `face_box` (averaged over the
/// probe flows) and returns the top three indices, sorted ascending. Ties
/// break toward the lowest index.
pub fn discover_face_related(
    flows: &[DenseFlow],
    face_box: Rect,
) -> Result<Vec<usize>, MotionError> {
    let Some(first) = flows.first() else {
        return Err(MotionError::Contract("no probe flows given".to_string()));
    };
    let n = first.num_keypoints();
    if n < 3 {
        return Err(MotionError::Contract(format!(
            "need at least 3 keypoints to discover face-related ones, got {n}"
        )));
    }
    let mut energy = vec![0.0; n];
    for flow in flows {
        if flow.num_keypoints() != n {
            return Err(MotionError::LengthMismatch {
                expected: n,
                got: flow.num_keypoints(),
            });
        }
        let mut inside = 0usize;
        let mut acc = vec![0.0; n];
        for row in 0..flow.height {
            for col in 0..flow.width {
                let z = pixel_center(row, col, flow.height, flow.width);
                if face_box.contains(z) {
                    inside += 1;
                    let idx = row * flow.width + col;
                    for k in 0..n {
                        acc[k] += flow.masks[k][idx];
                    }
                }
            }
        }
        if inside == 0 {
            return Err(MotionError::Contract(
                "face box contains no pixel centers".to_string(),
            ));
        }
        for k in 0..n {
            energy[k] += acc[k] / inside as f64;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        energy[b]
            .partial_cmp(&energy[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = order[..3].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// Mean mask energy per keypoint inside a box (probe average), exposed for
/// diagnostics.
pub fn face_mask_energy(flows: &[DenseFlow], face_box: Rect) -> Result<Vec<f64>, MotionError> {
    let Some(first) = flows.first() else {
        return Err(MotionError::Contract("no probe flows given".to_string()));
    };
    let n = first.num_keypoints();
    let mut energy = vec![0.0; n];
    for flow in flows {
        let mut inside = 0usize;
        let mut acc = vec![0.0; n];
        for row in 0..flow.height {
            for col in 0..flow.width {
                let z = pixel_center(row, col, flow.height, flow.width);
                if face_box.contains(z) {
                    inside += 1;
                    let idx = row * flow.width + col;
                    for k in 0..n {
                        acc[k] += flow.masks[k][idx];
                    }
                }
            }
        }
        if inside == 0 {
            return Err(MotionError::Contract(
                "face box contains no pixel centers".to_string(),
            ));
        }
        for k in 0..n {
            energy[k] += acc[k] / (inside as f64 * flows.len() as f64);
        }
    }
    Ok(energy)
}

/// Default mask sharpness in normalized units.
pub const DEFAULT_SIGMA: f64 = 0.15;

/// Default background logit: the squared-distance logit a keypoint would
/// produce at range 0.4 with the default sigma.
pub fn default_bg_logit(sigma: f64) -> f64 {
    -(0.4 * 0.4) / (2.0 * sigma * sigma)
}
