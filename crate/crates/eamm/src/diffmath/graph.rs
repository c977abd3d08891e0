//! Eager autodiff tape.

use std::collections::HashMap;

use super::{DiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    RowSum(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Softmax(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
    Transpose(NodeId),
    Inv2x2(NodeId),
    L1Mean(NodeId, NodeId),
    PosEnc(NodeId, usize),
    BilinearSample {
        src: NodeId,
        coords: NodeId,
        height: usize,
        width: usize,
    },
    BoxDown2 {
        input: NodeId,
        height: usize,
        width: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode tape. Operations evaluate eagerly; [`Graph::backward`]
/// replays them in reverse accumulating gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Named trainable leaves inserted so far, in insertion order.
    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable named leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.params.push((name.to_string(), id));
        id
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), DiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), data, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), data, needs))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), data, needs))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a);
        let data = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect());
        let needs = self.needs(a);
        self.push(Op::Scale(a, s), data, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::from_parts(vec![m, n], out), needs))
    }

    /// Broadcast add of a `[1, n]` row over every row of `[m, n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        self.row_broadcast_shapes("add_row", a, row)?;
        let out = row_broadcast(self.value(a), self.value(row), |x, y| x + y);
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AddRow(a, row), out, needs))
    }

    /// Broadcast subtract of a `[1, n]` row from every row of `[m, n]`.
    pub fn sub_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        self.row_broadcast_shapes("sub_row", a, row)?;
        let out = row_broadcast(self.value(a), self.value(row), |x, y| x - y);
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Op::SubRow(a, row), out, needs))
    }

    fn row_broadcast_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        row: NodeId,
    ) -> Result<(), DiffError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Broadcast multiply of an `[m, 1]` column over every column of `[m, n]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId, DiffError> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(DiffError::ShapeMismatch {
                op: "mul_col",
                lhs: av.shape().to_vec(),
                rhs: cv.shape().to_vec(),
            });
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let c = cv.data()[i];
            for j in 0..n {
                out[i * n + j] = av.data()[i * n + j] * c;
            }
        }
        let needs = self.needs(a) || self.needs(col);
        Ok(self.push(Op::MulCol(a, col), Tensor::from_parts(vec![m, n], out), needs))
    }

    /// `[m, n] -> [m, 1]` sum along each row.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let out: Vec<f64> = (0..m)
            .map(|i| v.data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        let needs = self.needs(a);
        self.push(Op::RowSum(a), Tensor::from_parts(vec![m, 1], out), needs)
    }

    /// Full reduction to a scalar sum.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), needs)
    }

    /// Full reduction to the element mean.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let needs = self.needs(a);
        let m = s / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m), needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = unary_map(self.value(a), f64::tanh);
        let needs = self.needs(a);
        self.push(Op::Tanh(a), out, needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = unary_map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), out, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = unary_map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        let needs = self.needs(a);
        self.push(Op::Relu(a), out, needs)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let out = unary_map(self.value(a), f64::sin);
        let needs = self.needs(a);
        self.push(Op::Sin(a), out, needs)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let out = unary_map(self.value(a), f64::cos);
        let needs = self.needs(a);
        self.push(Op::Cos(a), out, needs)
    }

    /// Row-wise softmax. `-inf` logits get exactly zero weight; at least one
    /// finite logit per row is required.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(DiffError::Contract(
                    "softmax row has no finite logit".to_string(),
                ));
            }
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax(a), Tensor::from_parts(vec![m, n], out), needs))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Contract("concat of zero tensors".to_string()));
        }
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += self.value(p).cols();
        }
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let n = v.cols();
            for i in 0..m {
                out[i * total + offset..i * total + offset + n]
                    .copy_from_slice(&v.data()[i * n..(i + 1) * n]);
            }
            offset += n;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_parts(vec![m, total], out),
            needs,
        ))
    }

    /// Column range `[start, end)` of a 2-D tensor.
    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        if start >= end || end > n {
            return Err(DiffError::BadShape {
                reason: format!("slice [{start}, {end}) out of {n} columns"),
            });
        }
        let w = end - start;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&v.data()[i * n + start..i * n + end]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::SliceCols(a, start, end),
            Tensor::from_parts(vec![m, w], out),
            needs,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let out = self.value(a).reshaped(shape.to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), out, needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v.data()[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(Op::Transpose(a), Tensor::from_parts(vec![n, m], out), needs)
    }

    /// Inverse of a 2x2 matrix.
    pub fn inv2x2(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        if v.shape() != [2, 2] {
            return Err(DiffError::BadShape {
                reason: format!("inv2x2 expects [2, 2], got {:?}", v.shape()),
            });
        }
        let d = v.data();
        let det = d[0] * d[3] - d[1] * d[2];
        if det == 0.0 {
            return Err(DiffError::Contract("inv2x2 of a singular matrix".to_string()));
        }
        let inv_det = 1.0 / det;
        let out = Tensor::from_parts(
            vec![2, 2],
            vec![d[3] * inv_det, -d[1] * inv_det, -d[2] * inv_det, d[0] * inv_det],
        );
        let needs = self.needs(a);
        Ok(self.push(Op::Inv2x2(a), out, needs))
    }

    /// Mean absolute difference. The subgradient at zero is zero.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("l1_mean", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.numel() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::L1Mean(a, b), Tensor::scalar(s / n), needs))
    }

    /// Positional encoding: each scalar `x` expands to
    /// `sin(2^j pi x), cos(2^j pi x)` for `j = 0..levels`, all levels of one
    /// scalar before the next scalar.
    pub fn positional_encode(&mut self, a: NodeId, levels: usize) -> Result<NodeId, DiffError> {
        if levels == 0 {
            return Err(DiffError::Contract(
                "positional encoding needs at least one frequency".to_string(),
            ));
        }
        let v = self.value(a);
        let (m, k) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * k * 2 * levels];
        let width = 2 * levels * k;
        for i in 0..m {
            for e in 0..k {
                let x = v.data()[i * k + e];
                for j in 0..levels {
                    let w = (1u64 << j) as f64 * std::f64::consts::PI;
                    out[i * width + e * 2 * levels + 2 * j] = (w * x).sin();
                    out[i * width + e * 2 * levels + 2 * j + 1] = (w * x).cos();
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::PosEnc(a, levels),
            Tensor::from_parts(vec![m, width], out),
            needs,
        ))
    }

    /// Backward bilinear sampling of `src` (an `[h*w, c]` image tensor) at
    /// `coords` (`[p, 2]` normalized coordinates, clamped at the border).
    /// Gradients flow to `coords` only; `src` must be a constant.
    pub fn bilinear_sample(
        &mut self,
        src: NodeId,
        coords: NodeId,
        height: usize,
        width: usize,
    ) -> Result<NodeId, DiffError> {
        let (sv, cv) = (self.value(src), self.value(coords));
        if sv.rows() != height * width {
            return Err(DiffError::BadShape {
                reason: format!(
                    "bilinear_sample src has {} rows, expected {}x{}",
                    sv.rows(),
                    height,
                    width
                ),
            });
        }
        if cv.cols() != 2 {
            return Err(DiffError::BadShape {
                reason: format!("bilinear_sample coords must be [p, 2], got {:?}", cv.shape()),
            });
        }
        if self.needs(src) {
            return Err(DiffError::Contract(
                "bilinear_sample source must be constant".to_string(),
            ));
        }
        let channels = sv.cols();
        let p = cv.rows();
        let mut out = vec![0.0; p * channels];
        for i in 0..p {
            let (px, py) = pixel_coords(cv.data()[2 * i], cv.data()[2 * i + 1], width, height);
            let (x0, x1, fx) = bilinear_cell(px, width);
            let (y0, y1, fy) = bilinear_cell(py, height);
            for ch in 0..channels {
                let v00 = sv.data()[(y0 * width + x0) * channels + ch];
                let v01 = sv.data()[(y0 * width + x1) * channels + ch];
                let v10 = sv.data()[(y1 * width + x0) * channels + ch];
                let v11 = sv.data()[(y1 * width + x1) * channels + ch];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[i * channels + ch] = top + fy * (bot - top);
            }
        }
        let needs = self.needs(coords);
        Ok(self.push(
            Op::BilinearSample { src, coords, height, width },
            Tensor::from_parts(vec![p, channels], out),
            needs,
        ))
    }

    /// 2x2 box-average downsampling of an `[h*w, c]` image tensor.
    pub fn box_down2(
        &mut self,
        input: NodeId,
        height: usize,
        width: usize,
    ) -> Result<NodeId, DiffError> {
        let v = self.value(input);
        if height % 2 != 0 || width % 2 != 0 || v.rows() != height * width {
            return Err(DiffError::BadShape {
                reason: format!(
                    "box_down2 needs even {}x{} matching {} rows",
                    height,
                    width,
                    v.rows()
                ),
            });
        }
        let channels = v.cols();
        let (oh, ow) = (height / 2, width / 2);
        let mut out = vec![0.0; oh * ow * channels];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..channels {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += v.data()[((2 * oy + dy) * width + 2 * ox + dx) * channels + ch];
                        }
                    }
                    out[(oy * ow + ox) * channels + ch] = acc * 0.25;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Op::BoxDown2 { input, height, width },
            Tensor::from_parts(vec![oh * ow, channels], out),
            needs,
        ))
    }

    /// One LSTM step with fused gate weights (gate order `i, f, g, o`).
    ///
    /// `x` is `[1, d_in]`, `h`/`c` are `[1, d_h]`; `w_x` is `[d_in, 4*d_h]`,
    /// `w_h` is `[d_h, 4*d_h]`, `bias` is `[1, 4*d_h]`.
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        weights: &LstmWeights,
    ) -> Result<(NodeId, NodeId), DiffError> {
        let d_h = self.value(h).cols();
        if self.value(weights.w_x).cols() != 4 * d_h
            || self.value(weights.w_h).cols() != 4 * d_h
            || self.value(weights.w_h).rows() != d_h
            || self.value(weights.bias).cols() != 4 * d_h
            || self.value(weights.w_x).rows() != self.value(x).cols()
            || self.value(c).cols() != d_h
        {
            return Err(DiffError::ShapeMismatch {
                op: "lstm_cell",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(weights.w_x).shape().to_vec(),
            });
        }
        let xz = self.matmul(x, weights.w_x)?;
        let hz = self.matmul(h, weights.w_h)?;
        let z0 = self.add(xz, hz)?;
        let z = self.add_row(z0, weights.bias)?;
        let i_pre = self.slice_cols(z, 0, d_h)?;
        let f_pre = self.slice_cols(z, d_h, 2 * d_h)?;
        let g_pre = self.slice_cols(z, 2 * d_h, 3 * d_h)?;
        let o_pre = self.slice_cols(z, 3 * d_h, 4 * d_h)?;
        let i = self.sigmoid(i_pre);
        let f = self.sigmoid(f_pre);
        let g = self.tanh(g_pre);
        let o = self.sigmoid(o_pre);
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c_next = self.add(fc, ig)?;
        let c_act = self.tanh(c_next);
        let h_next = self.mul(o, c_act)?;
        Ok((h_next, c_next))
    }

    /// MLP with the given activation between layers (not after the last).
    pub fn mlp(
        &mut self,
        mut x: NodeId,
        layers: &[(NodeId, NodeId)],
        hidden: fn(&mut Graph, NodeId) -> NodeId,
    ) -> Result<NodeId, DiffError> {
        for (idx, (w, b)) in layers.iter().enumerate() {
            let z = self.matmul(x, *w)?;
            x = self.add_row(z, *b)?;
            if idx + 1 < layers.len() {
                x = hidden(self, x);
            }
        }
        Ok(x)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per node that
    /// participates in the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |out| add_assign(out, g.data()));
                self.accum(grads, *b, |out| add_assign(out, g.data()));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |out| add_assign(out, g.data()));
                self.accum(grads, *b, |out| sub_assign(out, g.data()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |out| {
                    for ((o, gv), bvv) in out.iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * bvv;
                    }
                });
                self.accum(grads, *b, |out| {
                    for ((o, gv), avv) in out.iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * avv;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, |out| {
                    for (o, gv) in out.iter_mut().zip(g.data()) {
                        *o += gv * s;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G * B^T
                self.accum(grads, *a, |out| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g.data()[i * n + j] * bv.data()[p * n + j];
                            }
                            out[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T * G
                self.accum(grads, *b, |out| {
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                out[p * n + j] += aip * g.data()[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.value(*a).cols();
                let m = self.value(*a).rows();
                self.accum(grads, *a, |out| add_assign(out, g.data()));
                self.accum(grads, *row, |out| {
                    for i in 0..m {
                        for j in 0..n {
                            out[j] += g.data()[i * n + j];
                        }
                    }
                });
            }
            Op::SubRow(a, row) => {
                let n = self.value(*a).cols();
                let m = self.value(*a).rows();
                self.accum(grads, *a, |out| add_assign(out, g.data()));
                self.accum(grads, *row, |out| {
                    for i in 0..m {
                        for j in 0..n {
                            out[j] -= g.data()[i * n + j];
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let (m, n) = (av.rows(), av.cols());
                self.accum(grads, *a, |out| {
                    for i in 0..m {
                        let c = cv.data()[i];
                        for j in 0..n {
                            out[i * n + j] += g.data()[i * n + j] * c;
                        }
                    }
                });
                self.accum(grads, *col, |out| {
                    for i in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g.data()[i * n + j] * av.data()[i * n + j];
                        }
                        out[i] += acc;
                    }
                });
            }
            Op::RowSum(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                self.accum(grads, *a, |out| {
                    for i in 0..m {
                        let gi = g.data()[i];
                        for j in 0..n {
                            out[i * n + j] += gi;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(grads, *a, |out| {
                    for o in out.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let gv = g.item() / self.value(*a).numel() as f64;
                self.accum(grads, *a, |out| {
                    for o in out.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accum(grads, *a, |out| {
                    for ((o, gv), yv) in out.iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accum(grads, *a, |out| {
                    for ((o, gv), yv) in out.iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accum(grads, *a, |out| {
                    for ((o, gv), xv) in out.iter_mut().zip(g.data()).zip(x.data()) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sin(a) => {
                let x = self.value(*a);
                self.accum(grads, *a, |out| {
                    for ((o, gv), xv) in out.iter_mut().zip(g.data()).zip(x.data()) {
                        *o += gv * xv.cos();
                    }
                });
            }
            Op::Cos(a) => {
                let x = self.value(*a);
                self.accum(grads, *a, |out| {
                    for ((o, gv), xv) in out.iter_mut().zip(g.data()).zip(x.data()) {
                        *o -= gv * xv.sin();
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                self.accum(grads, *a, |out| {
                    for i in 0..m {
                        let yrow = &y.data()[i * n..(i + 1) * n];
                        let grow = &g.data()[i * n..(i + 1) * n];
                        let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..n {
                            out[i * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).cols();
                    let off = offset;
                    self.accum(grads, p, |out| {
                        for i in 0..m {
                            for j in 0..n {
                                out[i * n + j] += g.data()[i * total + off + j];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceCols(a, start, end) => {
                let n = self.value(*a).cols();
                let m = self.value(*a).rows();
                let (start, w) = (*start, *end - *start);
                self.accum(grads, *a, |out| {
                    for i in 0..m {
                        for j in 0..w {
                            out[i * n + start + j] += g.data()[i * w + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |out| add_assign(out, g.data()));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                self.accum(grads, *a, |out| {
                    for i in 0..m {
                        for j in 0..n {
                            out[i * n + j] += g.data()[j * m + i];
                        }
                    }
                });
            }
            Op::Inv2x2(a) => {
                // d/dA of A^-1: grad_A = -B^T G B^T with B = A^-1.
                let b = node.value.data();
                let gd = g.data();
                let bt = [b[0], b[2], b[1], b[3]];
                let gb = [
                    gd[0] * bt[0] + gd[1] * bt[2],
                    gd[0] * bt[1] + gd[1] * bt[3],
                    gd[2] * bt[0] + gd[3] * bt[2],
                    gd[2] * bt[1] + gd[3] * bt[3],
                ];
                let res = [
                    -(bt[0] * gb[0] + bt[1] * gb[2]),
                    -(bt[0] * gb[1] + bt[1] * gb[3]),
                    -(bt[2] * gb[0] + bt[3] * gb[2]),
                    -(bt[2] * gb[1] + bt[3] * gb[3]),
                ];
                self.accum(grads, *a, |out| add_assign(out, &res));
            }
            Op::L1Mean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.item() / av.numel() as f64;
                self.accum(grads, *a, |out| {
                    for ((o, x), y) in out.iter_mut().zip(av.data()).zip(bv.data()) {
                        *o += scale * sign_zero(x - y);
                    }
                });
                self.accum(grads, *b, |out| {
                    for ((o, x), y) in out.iter_mut().zip(av.data()).zip(bv.data()) {
                        *o -= scale * sign_zero(x - y);
                    }
                });
            }
            Op::PosEnc(a, levels) => {
                let x = self.value(*a);
                let (m, k) = (x.rows(), x.cols());
                let levels = *levels;
                let width = 2 * levels * k;
                self.accum(grads, *a, |out| {
                    for i in 0..m {
                        for e in 0..k {
                            let xv = x.data()[i * k + e];
                            let mut acc = 0.0;
                            for j in 0..levels {
                                let w = (1u64 << j) as f64 * std::f64::consts::PI;
                                let gs = g.data()[i * width + e * 2 * levels + 2 * j];
                                let gc = g.data()[i * width + e * 2 * levels + 2 * j + 1];
                                acc += w * ((w * xv).cos() * gs - (w * xv).sin() * gc);
                            }
                            out[i * k + e] += acc;
                        }
                    }
                });
            }
            Op::BilinearSample { src, coords, height, width } => {
                let sv = self.value(*src);
                let cv = self.value(*coords);
                let channels = sv.cols();
                let p = cv.rows();
                let (height, width) = (*height, *width);
                self.accum(grads, *coords, |out| {
                    for i in 0..p {
                        let cx = cv.data()[2 * i];
                        let cy = cv.data()[2 * i + 1];
                        let (px, py) = pixel_coords(cx, cy, width, height);
                        let (x0, x1, fx) = bilinear_cell(px, width);
                        let (y0, y1, fy) = bilinear_cell(py, height);
                        // Clamped samples have zero derivative past the border.
                        let dx_scale = if px > 0.0 && px < (width - 1) as f64 {
                            width as f64 * 0.5
                        } else {
                            0.0
                        };
                        let dy_scale = if py > 0.0 && py < (height - 1) as f64 {
                            height as f64 * 0.5
                        } else {
                            0.0
                        };
                        let mut gx = 0.0;
                        let mut gy = 0.0;
                        for ch in 0..channels {
                            let gv = g.data()[i * channels + ch];
                            if gv == 0.0 {
                                continue;
                            }
                            let v00 = sv.data()[(y0 * width + x0) * channels + ch];
                            let v01 = sv.data()[(y0 * width + x1) * channels + ch];
                            let v10 = sv.data()[(y1 * width + x0) * channels + ch];
                            let v11 = sv.data()[(y1 * width + x1) * channels + ch];
                            let dfx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
                            let dfy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
                            gx += gv * dfx;
                            gy += gv * dfy;
                        }
                        out[2 * i] += gx * dx_scale;
                        out[2 * i + 1] += gy * dy_scale;
                    }
                });
            }
            Op::BoxDown2 { input, height, width } => {
                let channels = self.value(*input).cols();
                let (height, width) = (*height, *width);
                let ow = width / 2;
                self.accum(grads, *input, |out| {
                    for oy in 0..height / 2 {
                        for ox in 0..ow {
                            for ch in 0..channels {
                                let gv = g.data()[(oy * ow + ox) * channels + ch] * 0.25;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        out[((2 * oy + dy) * width + 2 * ox + dx) * channels
                                            + ch] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn accum<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Tensor>], id: NodeId, f: F) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

/// Fused LSTM gate weights (gate order `i, f, g, o` along columns).
#[derive(Clone, Copy)]
pub struct LstmWeights {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub bias: NodeId,
}

/// Ordered named parameter tensors; the master copy owned by a trainer.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Insertion-ordered iteration; the order is the serialization order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn unary_map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
}

fn row_broadcast(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = f(a.data()[i * n + j], row.data()[j]);
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

fn add_assign(out: &mut [f64], src: &[f64]) {
    for (o, s) in out.iter_mut().zip(src) {
        *o += s;
    }
}

fn sub_assign(out: &mut [f64], src: &[f64]) {
    for (o, s) in out.iter_mut().zip(src) {
        *o -= s;
    }
}

fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Normalized coordinate to continuous pixel coordinate. Pixel (i, j) sits
/// at normalized ((j+0.5)/W*2-1, (i+0.5)/H*2-1), so the inverse is
/// px = (cx+1)/2*W - 0.5.
pub(crate) fn pixel_coords(cx: f64, cy: f64, width: usize, height: usize) -> (f64, f64) {
    (
        (cx + 1.0) * 0.5 * width as f64 - 0.5,
        (cy + 1.0) * 0.5 * height as f64 - 0.5,
    )
}

pub(crate) fn bilinear_cell(p: f64, size: usize) -> (usize, usize, f64) {
    let clamped = p.clamp(0.0, (size - 1) as f64);
    let x0 = clamped.floor() as usize;
    let x1 = (x0 + 1).min(size - 1);
    (x0, x1, clamped - x0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[3.0, -1.5, 2.0, 0.25]));
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data(), g.value(a).data());
    }

    #[test]
    fn matmul_hand_checked() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn l1_mean_identical_is_zero_and_offset_is_mean() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[4, 5], 0.7));
        let b = g.constant(Tensor::full(&[4, 5], 0.7));
        let z = g.l1_mean(a, b).unwrap();
        assert_eq!(g.value(z).item(), 0.0);

        let c = g.constant(Tensor::full(&[4, 5], 0.6));
        let d = g.l1_mean(a, c).unwrap();
        assert!((g.value(d).item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn l1_mean_matches_loop_oracle() {
        let mut rng = crate::diffmath::adam::test_rng(7);
        let a = Tensor::rand_uniform(&[3, 7], -2.0, 2.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 7], -2.0, 2.0, &mut rng);
        let mut expected = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            expected += (x - y).abs();
        }
        expected /= 21.0;
        let mut g = Graph::new();
        let an = g.constant(a);
        let bn = g.constant(b);
        let out = g.l1_mean(an, bn).unwrap();
        assert_eq!(g.value(out).item(), expected);
    }

    #[test]
    fn positional_encode_zero_and_one() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 1], &[0.0]));
        let enc = g.positional_encode(p, 6).unwrap();
        let expect: Vec<f64> = (0..6).flat_map(|_| [0.0, 1.0]).collect();
        assert_eq!(g.value(enc).data(), expect.as_slice());

        let one = g.constant(t(&[1, 1], &[1.0]));
        let enc1 = g.positional_encode(one, 1).unwrap();
        let v = g.value(enc1).data();
        assert!(v[0].abs() < 1e-15, "sin(pi) ~ 0, got {}", v[0]);
        assert!((v[1] + 1.0).abs() < 1e-15, "cos(pi) = -1, got {}", v[1]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.1, 5.0, -3.0, 2.0, 2.0, 2.0]));
        let s = g.softmax(a).unwrap();
        let v = g.value(s);
        for i in 0..2 {
            let sum: f64 = (0..3).map(|j| v.at(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!((0..3).all(|j| v.at(i, j) > 0.0));
        }
    }

    #[test]
    fn softmax_neg_infinity_gets_zero_weight() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_parts(
            vec![1, 3],
            vec![0.0, f64::NEG_INFINITY, 1.0],
        ));
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).at(0, 1), 0.0);
    }

    #[test]
    fn lstm_zero_params_zero_inputs_gives_zero_state() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h = g.constant(Tensor::zeros(&[1, 4]));
        let c = g.constant(Tensor::zeros(&[1, 4]));
        let w = LstmWeights {
            w_x: g.constant(Tensor::zeros(&[3, 16])),
            w_h: g.constant(Tensor::zeros(&[4, 16])),
            bias: g.constant(Tensor::zeros(&[1, 16])),
        };
        let (h2, c2) = g.lstm_cell(x, h, c, &w).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_forget_gate_preserves_cell() {
        let d_h = 4;
        let mut bias = vec![0.0; 16];
        // Forget gate saturated open, input gate saturated closed.
        for j in 0..d_h {
            bias[j] = -1000.0;
            bias[d_h + j] = 1000.0;
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h = g.constant(Tensor::zeros(&[1, 4]));
        let c = g.constant(t(&[1, 4], &[0.3, -0.2, 0.9, 0.05]));
        let w = LstmWeights {
            w_x: g.constant(Tensor::zeros(&[3, 16])),
            w_h: g.constant(Tensor::zeros(&[4, 16])),
            bias: g.constant(Tensor::new(vec![1, 16], bias).unwrap()),
        };
        let (_, c2) = g.lstm_cell(x, h, c, &w).unwrap();
        assert_eq!(g.value(c2).data(), g.value(c).data());
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.constant(t(&[2, 2], &[0.3, 1.7, -0.4, 0.9]));
            let b = g.constant(t(&[2, 2], &[1.1, -0.6, 0.2, 0.8]));
            let m = g.matmul(a, b).unwrap();
            let s = g.softmax(m).unwrap();
            let t = g.tanh(s);
            let out = g.mean(t);
            g.value(out).item()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.backward(a),
            Err(DiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn gradient_linearity_under_graph_sum() {
        let mut rng = crate::diffmath::adam::test_rng(11);
        let theta = Tensor::rand_uniform(&[1, 6], -1.0, 1.0, &mut rng);

        // Combined graph: loss = mean(tanh(theta)) + mean(theta * theta)
        let mut g = Graph::new();
        let p = g.param("theta", theta.clone());
        let t1 = g.tanh(p);
        let f = g.mean(t1);
        let sq = g.mul(p, p).unwrap();
        let h = g.mean(sq);
        let total = g.add(f, h).unwrap();
        let combined = g.backward(total).unwrap();
        let combined = combined.get(p).unwrap().clone();

        // Separate graphs, summed after the fact.
        let mut g1 = Graph::new();
        let p1 = g1.param("theta", theta.clone());
        let t1 = g1.tanh(p1);
        let f1 = g1.mean(t1);
        let grad_f = g1.backward(f1).unwrap();
        let mut g2 = Graph::new();
        let p2 = g2.param("theta", theta);
        let sq2 = g2.mul(p2, p2).unwrap();
        let h2 = g2.mean(sq2);
        let grad_h = g2.backward(h2).unwrap();

        for i in 0..6 {
            let split = grad_f.get(p1).unwrap().data()[i] + grad_h.get(p2).unwrap().data()[i];
            assert!((combined.data()[i] - split).abs() < 1e-12);
        }
    }
}
