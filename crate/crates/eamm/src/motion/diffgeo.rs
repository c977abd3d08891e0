//! Differentiable flow composition and warping on the autodiff tape.
//!
//! Mirrors [`super::compose_dense_flow`] and [`super::warp_image`] exactly,
//! but with the driving keypoints and jacobians as graph nodes so gradients
//! flow back into the predictor that produced them. The source set stays
//! constant (it describes the fixed source image).

use super::{pixel_center, Image, KeypointSet, MotionError, RIDGE_DET_THRESHOLD, RIDGE_EPS};
use crate::diffmath::{DiffError, Graph, NodeId, Tensor};

/// Graph handles for a composed dense flow.
pub struct FlowGraph {
    /// `[h*w, 2]` backward coordinates.
    pub coords: NodeId,
    /// `[h*w, n+1]` softmax mask stack (background last).
    pub masks: NodeId,
    /// Ridge-guard applications performed on the driving jacobians.
    pub guard_count: u32,
}

/// Builds the dense flow with the driving motion taken from a flat `[1, 6n]`
/// prediction row (per keypoint `x, y, j00, j01, j10, j11`).
pub fn compose_flow_graph(
    g: &mut Graph,
    src: &KeypointSet,
    drv_row: NodeId,
    height: usize,
    width: usize,
    sigma: f64,
    bg_logit: f64,
) -> Result<FlowGraph, MotionError> {
    if height < 8 || width < 8 {
        return Err(MotionError::Contract(format!(
            "flow field needs at least 8x8 pixels, got {height}x{width}"
        )));
    }
    let n = src.len();
    if g.value(drv_row).cols() != 6 * n || g.value(drv_row).rows() != 1 {
        return Err(MotionError::Contract(format!(
            "driving row shape {:?} does not match {} keypoints",
            g.value(drv_row).shape(),
            n
        )));
    }
    let mut build = || -> Result<FlowGraph, DiffError> {
        let pixels = height * width;
        let mut grid = Vec::with_capacity(pixels * 2);
        for row in 0..height {
            for col in 0..width {
                let z = pixel_center(row, col, height, width);
                grid.push(z.x);
                grid.push(z.y);
            }
        }
        let grid = g.constant(Tensor::new(vec![pixels, 2], grid)?);

        let mut guard_count = 0;
        let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
        let mut logit_cols = Vec::with_capacity(n + 1);
        let mut flows = Vec::with_capacity(n);
        for k in 0..n {
            let x_d = g.slice_cols(drv_row, 2 * k, 2 * k + 2)?;
            let j_d_flat = g.slice_cols(drv_row, 2 * n + 4 * k, 2 * n + 4 * k + 4)?;
            let mut j_d = g.reshape(j_d_flat, &[2, 2])?;
            // Ridge guard, applied as graph ops so gradients stay honest.
            let mut ridge_eps = RIDGE_EPS;
            loop {
                let v = g.value(j_d).data();
                let det = v[0] * v[3] - v[1] * v[2];
                if det.abs() >= RIDGE_DET_THRESHOLD {
                    break;
                }
                if guard_count >= 64 {
                    return Err(DiffError::Contract(format!(
                        "jacobian {k} stayed degenerate under the ridge guard"
                    )));
                }
                let ridge = g.constant(Tensor::new(
                    vec![2, 2],
                    vec![ridge_eps, 0.0, 0.0, ridge_eps],
                )?);
                j_d = g.add(j_d, ridge)?;
                ridge_eps *= 2.0;
                guard_count += 1;
            }
            let inv = g.inv2x2(j_d)?;
            let j_s = g.constant(Tensor::new(vec![2, 2], src.j[k].to_array().to_vec())?);
            let m = g.matmul(j_s, inv)?;
            // Row-vector convention: (z - x_d) M^T.
            let m_t = g.transpose(m);
            let rel = g.sub_row(grid, x_d)?;
            let mapped = g.matmul(rel, m_t)?;
            let x_s = g.constant(Tensor::new(vec![1, 2], vec![src.x[k].x, src.x[k].y])?);
            let flow_k = g.add_row(mapped, x_s)?;
            flows.push(flow_k);

            let sq = g.mul(rel, rel)?;
            let dist_sq = g.row_sum(sq);
            logit_cols.push(g.scale(dist_sq, -inv_two_sigma_sq));
        }
        let bg = g.constant(Tensor::from_parts(vec![pixels, 1], vec![bg_logit; pixels]));
        logit_cols.push(bg);
        let logits = g.concat_cols(&logit_cols)?;
        let masks = g.softmax(logits)?;

        let mut coords: Option<NodeId> = None;
        for (k, flow_k) in flows.iter().enumerate() {
            let w_k = g.slice_cols(masks, k, k + 1)?;
            let weighted = g.mul_col(*flow_k, w_k)?;
            coords = Some(match coords {
                Some(acc) => g.add(acc, weighted)?,
                None => weighted,
            });
        }
        let w_bg = g.slice_cols(masks, n, n + 1)?;
        let bg_term = g.mul_col(grid, w_bg)?;
        let coords = g.add(coords.expect("n >= 1"), bg_term)?;

        Ok(FlowGraph { coords, masks, guard_count })
    };
    build().map_err(|e| MotionError::Contract(e.to_string()))
}

/// Differentiable backward warp: bilinear-samples the constant source image
/// at the flow coordinates. Returns an `[h*w, 3]` node.
pub fn warp_image_graph(
    g: &mut Graph,
    src: &Image,
    coords: NodeId,
) -> Result<NodeId, MotionError> {
    let tensor = g.constant(src.to_tensor());
    g.bilinear_sample(tensor, coords, src.height(), src.width())
        .map_err(|e| MotionError::Contract(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Mat2, Vec2};
    use crate::motion::{compose_dense_flow, warp_image};
    use rand::Rng;
    use rand::SeedableRng;

    fn random_set(n: usize, rng: &mut impl Rng) -> KeypointSet {
        let x = (0..n)
            .map(|_| Vec2::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7)))
            .collect();
        let j = (0..n)
            .map(|_| {
                Mat2::new(
                    1.0 + rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                    1.0 + rng.gen_range(-0.25..0.25),
                )
            })
            .collect();
        KeypointSet::new(x, j).unwrap()
    }

    #[test]
    fn graph_flow_matches_pure_composition() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        for trial in 0..5 {
            let src = random_set(6, &mut rng);
            let drv = random_set(6, &mut rng);
            let sigma = 0.18;
            let bg = super::super::flow::default_bg_logit(sigma);
            let pure = compose_dense_flow(&src, &drv, 12, 12, sigma, bg).unwrap();

            let mut g = Graph::new();
            let row = g.constant(Tensor::new(vec![1, 36], drv.to_motion_row()).unwrap());
            let flow = compose_flow_graph(&mut g, &src, row, 12, 12, sigma, bg).unwrap();
            let coords = g.value(flow.coords);
            let masks = g.value(flow.masks);
            for p in 0..144 {
                assert!(
                    (coords.data()[2 * p] - pure.coords[p].x).abs() < 1e-12,
                    "trial {trial} pixel {p}"
                );
                assert!((coords.data()[2 * p + 1] - pure.coords[p].y).abs() < 1e-12);
                for k in 0..7 {
                    assert!((masks.at(p, k) - pure.masks[k][p]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn graph_warp_matches_pure_warp() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(56);
        let data: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(16, 16, data).unwrap();
        let src = random_set(4, &mut rng);
        let drv = random_set(4, &mut rng);
        let sigma = 0.15;
        let bg = super::super::flow::default_bg_logit(sigma);
        let pure_flow = compose_dense_flow(&src, &drv, 16, 16, sigma, bg).unwrap();
        let pure_warp = warp_image(&img, &pure_flow).unwrap();

        let mut g = Graph::new();
        let row = g.constant(Tensor::new(vec![1, 24], drv.to_motion_row()).unwrap());
        let flow = compose_flow_graph(&mut g, &src, row, 16, 16, sigma, bg).unwrap();
        let warped = warp_image_graph(&mut g, &img, flow.coords).unwrap();
        let v = g.value(warped);
        for (a, b) in v.data().iter().zip(pure_warp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_gradient_matches_finite_differences() {
        // End-to-end through masks, inversion, and bilinear sampling.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(57);
        let data: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(8, 8, data).unwrap();
        let target: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let src = random_set(3, &mut rng);
        let drv = random_set(3, &mut rng);

        let params = vec![(
            "drv".to_string(),
            Tensor::new(vec![1, 18], drv.to_motion_row()).unwrap(),
        )];
        let img_c = img.clone();
        let src_c = src.clone();
        let report = crate::diffmath::grad_check(
            move |g, ids| {
                let flow = compose_flow_graph(&mut *g, &src_c, ids[0], 8, 8, 0.2, -2.0)
                    .map_err(|e| DiffError::Contract(e.to_string()))?;
                let warped = warp_image_graph(&mut *g, &img_c, flow.coords)
                    .map_err(|e| DiffError::Contract(e.to_string()))?;
                let t = g.constant(Tensor::new(vec![64, 3], target.clone())?);
                g.l1_mean(warped, t)
            },
            &params,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel error {} failures {:?}",
            report.max_rel_error,
            &report.failures[..report.failures.len().min(5)]
        );
    }
}
