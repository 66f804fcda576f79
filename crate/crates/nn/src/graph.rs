//! Reverse-mode autodiff on a flat tape.
//!
//! Operations append nodes in execution order, so the tape order is a
//! topological order and `backward` is a single reverse sweep that visits
//! each node exactly once. Values are kept for every node; gradients are
//! allocated only along paths that reach a parameter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conv;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },
    #[error("backward target must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("dropout rate must be in [0, 1), got {0}")]
    BadDropoutRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    ConcatCols(NodeId, NodeId),
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    DepthwiseConv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    PointwiseConv2d {
        x: NodeId,
        w: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor,
        var: Tensor,
        train: bool,
    },
    GlobalAvgPool(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Softmax(NodeId),
    BceLoss {
        p: NodeId,
        targets: Vec<usize>,
    },
    Reshape(NodeId),
}

pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    ran_backward: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, details: String) -> GraphError {
    GraphError::Shape { op, details }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    fn track(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&NodeId(i)| self.needs_grad[i])
    }

    /// Constant input: no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf: `backward` accumulates its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(shape_err(
                "add",
                format!(
                    "{:?} vs {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            ));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.values[a.0].shape(), data);
        let track = self.track(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, track))
    }

    /// (N, M) + (M): broadcast a row vector over every row.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.values[x.0].shape().to_vec();
        let bs = self.values[b.0].shape().to_vec();
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(shape_err("add_row", format!("{xs:?} + {bs:?}")));
        }
        let (n, m) = (xs[0], xs[1]);
        let mut data = self.values[x.0].data().to_vec();
        let bv = self.values[b.0].data();
        for row in 0..n {
            for col in 0..m {
                data[row * m + col] += bv[col];
            }
        }
        let value = Tensor::from_vec(&xs, data);
        let track = self.track(&[x, b]);
        Ok(self.push(Op::AddRow(x, b), value, track))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(shape_err(
                "mul",
                format!(
                    "{:?} vs {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            ));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.values[a.0].shape(), data);
        let track = self.track(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, track))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.values[x.0].data().iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(self.values[x.0].shape(), data);
        let track = self.track(&[x]);
        self.push(Op::Scale(x, c), value, track)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.values[x.0].data().iter().sum();
        let track = self.track(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(total), track)
    }

    /// (N, K) x (K, M) -> (N, M)
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let ashape = self.values[a.0].shape().to_vec();
        let bshape = self.values[b.0].shape().to_vec();
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(shape_err("matmul", format!("{ashape:?} x {bshape:?}")));
        }
        let (n, k, m) = (ashape[0], ashape[1], bshape[1]);
        let value = matmul_raw(&self.values[a.0], &self.values[b.0], n, k, m);
        let track = self.track(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), value, track))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.values[x.0].data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_vec(self.values[x.0].shape(), data);
        let track = self.track(&[x]);
        self.push(Op::Relu(x), value, track)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.values[x.0]
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let value = Tensor::from_vec(self.values[x.0].shape(), data);
        let track = self.track(&[x]);
        self.push(Op::Sigmoid(x), value, track)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.values[x.0].data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::from_vec(self.values[x.0].shape(), data);
        let track = self.track(&[x]);
        self.push(Op::Tanh(x), value, track)
    }

    /// Columns [start, end) of a (N, M) tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, GraphError> {
        let shape = self.values[x.0].shape().to_vec();
        if shape.len() != 2 || start >= end || end > shape[1] {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}, {end}) of {shape:?}"),
            ));
        }
        let (n, m) = (shape[0], shape[1]);
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(n * (end - start));
        for row in 0..n {
            data.extend_from_slice(&src[row * m + start..row * m + end]);
        }
        let value = Tensor::from_vec(&[n, end - start], data);
        let track = self.track(&[x]);
        Ok(self.push(Op::SliceCols { x, start, end }, value, track))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let ashape = self.values[a.0].shape().to_vec();
        let bshape = self.values[b.0].shape().to_vec();
        if ashape.len() != 2 || bshape.len() != 2 || ashape[0] != bshape[0] {
            return Err(shape_err("concat_cols", format!("{ashape:?} | {bshape:?}")));
        }
        let (n, ma, mb) = (ashape[0], ashape[1], bshape[1]);
        let mut data = Vec::with_capacity(n * (ma + mb));
        for row in 0..n {
            data.extend_from_slice(&self.values[a.0].data()[row * ma..(row + 1) * ma]);
            data.extend_from_slice(&self.values[b.0].data()[row * mb..(row + 1) * mb]);
        }
        let value = Tensor::from_vec(&[n, ma + mb], data);
        let track = self.track(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), value, track))
    }

    /// Rows of a (N, M) tensor by index, in the given order.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, GraphError> {
        let shape = self.values[x.0].shape().to_vec();
        if shape.len() != 2 || rows.iter().any(|&r| r >= shape[0]) {
            return Err(shape_err("gather_rows", format!("rows of {shape:?}")));
        }
        let m = shape[1];
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(&src[r * m..(r + 1) * m]);
        }
        let value = Tensor::from_vec(&[rows.len(), m], data);
        let track = self.track(&[x]);
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            value,
            track,
        ))
    }

    /// SAME-padded convolution, x: (N, Ci, H, W), w: (Co, Ci, kh, kw).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId, GraphError> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err("conv2d", format!("{xs:?} * {ws:?} stride {stride}")));
        }
        let value = conv::conv2d_forward(&self.values[x.0], &self.values[w.0], stride);
        let track = self.track(&[x, w]);
        Ok(self.push(Op::Conv2d { x, w, stride }, value, track))
    }

    /// SAME-padded depthwise convolution, x: (N, C, H, W), w: (C, kh, kw).
    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
    ) -> Result<NodeId, GraphError> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        if xs.len() != 4 || ws.len() != 3 || xs[1] != ws[0] || stride == 0 {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("{xs:?} * {ws:?} stride {stride}"),
            ));
        }
        let value = conv::depthwise_forward(&self.values[x.0], &self.values[w.0], stride);
        let track = self.track(&[x, w]);
        Ok(self.push(Op::DepthwiseConv2d { x, w, stride }, value, track))
    }

    /// 1x1 convolution as a per-sample channel mixing, w: (Co, Ci).
    pub fn pointwise_conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        if xs.len() != 4 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("pointwise_conv2d", format!("{xs:?} * {ws:?}")));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        let hw = h * wd;
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let mut data = vec![0.0; n * co * hw];
        for ni in 0..n {
            for coi in 0..co {
                let out = &mut data[(ni * co + coi) * hw..(ni * co + coi + 1) * hw];
                for cii in 0..ci {
                    let weight = wv[coi * ci + cii];
                    let plane = &xv[(ni * ci + cii) * hw..(ni * ci + cii + 1) * hw];
                    for (o, p) in out.iter_mut().zip(plane) {
                        *o += weight * p;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, co, h, wd], data);
        let track = self.track(&[x, w]);
        Ok(self.push(Op::PointwiseConv2d { x, w }, value, track))
    }

    /// Batch-statistics normalization (training mode). Returns the output
    /// node plus the per-channel batch mean and (biased) variance so the
    /// caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, Tensor, Tensor), GraphError> {
        let (mean, var) = batch_stats(&self.values[x.0])
            .ok_or_else(|| shape_err("batch_norm", format!("{:?}", self.values[x.0].shape())))?;
        let id = self.batch_norm_with(x, gamma, beta, mean.clone(), var.clone(), true)?;
        Ok((id, mean, var))
    }

    /// Running-statistics normalization (eval mode): a fixed affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Tensor,
        var: &Tensor,
    ) -> Result<NodeId, GraphError> {
        self.batch_norm_with(x, gamma, beta, mean.clone(), var.clone(), false)
    }

    fn batch_norm_with(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor,
        var: Tensor,
        train: bool,
    ) -> Result<NodeId, GraphError> {
        let xs = self.values[x.0].shape().to_vec();
        let c = match xs.len() {
            2 | 4 => xs[1],
            _ => return Err(shape_err("batch_norm", format!("rank {} input", xs.len()))),
        };
        for (name, t) in [
            ("gamma", &self.values[gamma.0]),
            ("beta", &self.values[beta.0]),
        ] {
            if t.shape() != [c] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} shape {:?}, want [{c}]", t.shape()),
                ));
            }
        }
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(shape_err("batch_norm", "stats shape".to_string()));
        }
        let plane = plane_size(&xs);
        let xv = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut data = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            let ch = (i / plane) % c;
            let xhat = (v - mean.data()[ch]) / (var.data()[ch] + BN_EPS).sqrt();
            data.push(g[ch] * xhat + b[ch]);
        }
        let value = Tensor::from_vec(&xs, data);
        let track = self.track(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            },
            value,
            track,
        ))
    }

    /// (N, C, H, W) -> (N, C) spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("{xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = (h * w) as f64;
        let xv = self.values[x.0].data();
        let mut data = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let s: f64 = xv[plane * h * w..(plane + 1) * h * w].iter().sum();
            data.push(s / hw);
        }
        let value = Tensor::from_vec(&[n, c], data);
        let track = self.track(&[x]);
        Ok(self.push(Op::GlobalAvgPool(x), value, track))
    }

    /// Inverted dropout: zero a fraction `rate` of elements and scale
    /// survivors by 1/(1-rate). Training-time only; eval forward simply
    /// omits the op.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, GraphError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GraphError::BadDropoutRate(rate));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.values[x.0].numel())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = self.values[x.0]
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::from_vec(self.values[x.0].shape(), data);
        let track = self.track(&[x]);
        Ok(self.push(Op::Dropout { x, mask }, value, track))
    }

    /// Row-wise softmax over the class axis of (N, C).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 2 {
            return Err(shape_err("softmax", format!("{xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let xv = self.values[x.0].data();
        let mut data = Vec::with_capacity(n * c);
        for row in 0..n {
            let r = &xv[row * c..(row + 1) * c];
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = r.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / total));
        }
        let value = Tensor::from_vec(&xs, data);
        let track = self.track(&[x]);
        Ok(self.push(Op::Softmax(x), value, track))
    }

    /// Cross entropy of one-hot targets against probabilities (N, C),
    /// averaged over the batch.
    pub fn bce_loss(&mut self, p: NodeId, targets: &[usize]) -> Result<NodeId, GraphError> {
        let ps = self.values[p.0].shape().to_vec();
        if ps.len() != 2 || targets.len() != ps[0] || targets.iter().any(|&t| t >= ps[1]) {
            return Err(shape_err(
                "bce_loss",
                format!("probs {ps:?}, {} targets", targets.len()),
            ));
        }
        let (n, c) = (ps[0], ps[1]);
        let pv = self.values[p.0].data();
        let mut total = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            total -= pv[row * c + t].max(f64::MIN_POSITIVE).ln();
        }
        let value = Tensor::scalar(total / n as f64);
        let track = self.track(&[p]);
        Ok(self.push(
            Op::BceLoss {
                p,
                targets: targets.to_vec(),
            },
            value,
            track,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        if shape.iter().product::<usize>() != self.values[x.0].numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.values[x.0].shape()),
            ));
        }
        let value = self.values[x.0].reshaped(shape);
        let track = self.track(&[x]);
        Ok(self.push(Op::Reshape(x), value, track))
    }

    /// Fully connected layer: x (N, F) * w (F, U) + b (U).
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// One LSTM step. Gate order in the fused weight matrices is
    /// (input, forget, cell, output); sigmoid gates, tanh squashing.
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        weights: &LstmWeights,
        units: usize,
    ) -> Result<(NodeId, NodeId), GraphError> {
        let xw = self.matmul(x, weights.w)?;
        let hr = self.matmul(h, weights.r)?;
        let pre = self.add(xw, hr)?;
        let gates = self.add_row(pre, weights.b)?;
        let i_lin = self.slice_cols(gates, 0, units)?;
        let f_lin = self.slice_cols(gates, units, 2 * units)?;
        let g_lin = self.slice_cols(gates, 2 * units, 3 * units)?;
        let o_lin = self.slice_cols(gates, 3 * units, 4 * units)?;
        let i = self.sigmoid(i_lin);
        let f = self.sigmoid(f_lin);
        let g = self.tanh(g_lin);
        let o = self.sigmoid(o_lin);
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c_next = self.add(fc, ig)?;
        let c_act = self.tanh(c_next);
        let h_next = self.mul(o, c_act)?;
        Ok((h_next, c_next))
    }

    /// Run an LSTM over `steps` (each (B, F)) and return the final hidden
    /// state (B, units). `reverse` walks the sequence backward in time.
    pub fn lstm_last_hidden(
        &mut self,
        steps: &[NodeId],
        weights: &LstmWeights,
        units: usize,
        reverse: bool,
    ) -> Result<NodeId, GraphError> {
        if steps.is_empty() {
            return Err(shape_err("lstm", "empty sequence".to_string()));
        }
        let batch = self.values[steps[0].0].dim(0);
        let mut h = self.input(Tensor::zeros(&[batch, units]));
        let mut c = self.input(Tensor::zeros(&[batch, units]));
        let order: Vec<NodeId> = if reverse {
            steps.iter().rev().cloned().collect()
        } else {
            steps.to_vec()
        };
        for x in order {
            let (h2, c2) = self.lstm_cell(x, h, c, weights, units)?;
            h = h2;
            c = c2;
        }
        Ok(h)
    }

    /// Bidirectional wrapper: one pass forward in time, one backward,
    /// concatenating the final hidden states to (B, 2 * units).
    pub fn bidirectional_lstm(
        &mut self,
        steps: &[NodeId],
        forward: &LstmWeights,
        backward: &LstmWeights,
        units: usize,
    ) -> Result<NodeId, GraphError> {
        let hf = self.lstm_last_hidden(steps, forward, units, false)?;
        let hb = self.lstm_last_hidden(steps, backward, units, true)?;
        self.concat_cols(hf, hb)
    }

    /// Reverse sweep from a scalar loss. Gradients land on every tracked
    /// node and are read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        if self.ran_backward {
            return Err(GraphError::BackwardTwice);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(GraphError::NonScalarLoss(
                self.values[loss.0].shape().to_vec(),
            ));
        }
        self.ran_backward = true;
        self.grads[loss.0] = Some(Tensor::from_vec(
            self.values[loss.0].shape(),
            vec![1.0],
        ));

        for i in (0..self.ops.len()).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn add_grad_slice(&mut self, id: NodeId, f: impl FnOnce(&mut Tensor)) {
        if !self.needs_grad[id.0] {
            return;
        }
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(Tensor::zeros(self.values[id.0].shape()));
        }
        f(self.grads[id.0].as_mut().unwrap());
    }

    fn propagate(&mut self, i: usize, dy: &Tensor) {
        // Op is moved out temporarily to appease the borrow checker; it is
        // restored before returning.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &src in [a, b].into_iter() {
                    self.add_grad_slice(src, |g| {
                        for (gd, d) in g.data_mut().iter_mut().zip(dy.data()) {
                            *gd += d;
                        }
                    });
                }
            }
            Op::AddRow(x, b) => {
                self.add_grad_slice(*x, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *gd += d;
                    }
                });
                let m = self.values[b.0].numel();
                self.add_grad_slice(*b, |g| {
                    for (j, d) in dy.data().iter().enumerate() {
                        g.data_mut()[j % m] += d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.values[a.0].data().to_vec();
                let bv = self.values[b.0].data().to_vec();
                self.add_grad_slice(*a, |g| {
                    for ((gd, d), other) in g.data_mut().iter_mut().zip(dy.data()).zip(&bv) {
                        *gd += d * other;
                    }
                });
                self.add_grad_slice(*b, |g| {
                    for ((gd, d), other) in g.data_mut().iter_mut().zip(dy.data()).zip(&av) {
                        *gd += d * other;
                    }
                });
            }
            Op::Scale(x, cf) => {
                let cf = *cf;
                self.add_grad_slice(*x, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *gd += cf * d;
                    }
                });
            }
            Op::Sum(x) => {
                let d = dy.item();
                self.add_grad_slice(*x, |g| {
                    for gd in g.data_mut() {
                        *gd += d;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (n, k) = (self.values[a.0].dim(0), self.values[a.0].dim(1));
                let m = self.values[b.0].dim(1);
                // da = dy * b^T
                let bv = &self.values[b.0];
                let mut da = vec![0.0; n * k];
                for row in 0..n {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for col in 0..m {
                            acc += dy.data()[row * m + col] * bv.data()[kk * m + col];
                        }
                        da[row * k + kk] = acc;
                    }
                }
                // db = a^T * dy
                let av = &self.values[a.0];
                let mut db = vec![0.0; k * m];
                for row in 0..n {
                    for kk in 0..k {
                        let a_val = av.data()[row * k + kk];
                        if a_val == 0.0 {
                            continue;
                        }
                        let dst = &mut db[kk * m..(kk + 1) * m];
                        let src = &dy.data()[row * m..(row + 1) * m];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += a_val * s;
                        }
                    }
                }
                self.add_grad_slice(*a, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(&da) {
                        *gd += d;
                    }
                });
                self.add_grad_slice(*b, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(&db) {
                        *gd += d;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.values[x.0].data().to_vec();
                self.add_grad_slice(*x, |g| {
                    for ((gd, d), v) in g.data_mut().iter_mut().zip(dy.data()).zip(&xv) {
                        if *v > 0.0 {
                            *gd += d;
                        }
                    }
                });
            }
            Op::Sigmoid(_) | Op::Tanh(_) => {
                let yv = self.values[i].data().to_vec();
                let x = match &op {
                    Op::Sigmoid(x) | Op::Tanh(x) => *x,
                    _ => unreachable!(),
                };
                let is_sigmoid = matches!(op, Op::Sigmoid(_));
                self.add_grad_slice(x, |g| {
                    for ((gd, d), y) in g.data_mut().iter_mut().zip(dy.data()).zip(&yv) {
                        let local = if is_sigmoid { y * (1.0 - y) } else { 1.0 - y * y };
                        *gd += d * local;
                    }
                });
            }
            Op::SliceCols { x, start, end } => {
                let m = self.values[x.0].dim(1);
                let width = end - start;
                let start = *start;
                self.add_grad_slice(*x, |g| {
                    for (row, chunk) in dy.data().chunks_exact(width).enumerate() {
                        for (j, d) in chunk.iter().enumerate() {
                            g.data_mut()[row * m + start + j] += d;
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ma = self.values[a.0].dim(1);
                let mb = self.values[b.0].dim(1);
                self.add_grad_slice(*a, |g| {
                    for (row, chunk) in dy.data().chunks_exact(ma + mb).enumerate() {
                        for (j, d) in chunk[..ma].iter().enumerate() {
                            g.data_mut()[row * ma + j] += d;
                        }
                    }
                });
                self.add_grad_slice(*b, |g| {
                    for (row, chunk) in dy.data().chunks_exact(ma + mb).enumerate() {
                        for (j, d) in chunk[ma..].iter().enumerate() {
                            g.data_mut()[row * mb + j] += d;
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let m = self.values[x.0].dim(1);
                self.add_grad_slice(*x, |g| {
                    for (out_row, &src_row) in rows.iter().enumerate() {
                        for j in 0..m {
                            g.data_mut()[src_row * m + j] += dy.data()[out_row * m + j];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, stride } => {
                let (dx, dw) =
                    conv::conv2d_backward(&self.values[x.0], &self.values[w.0], dy, *stride);
                self.add_grad_slice(*x, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(dx.data()) {
                        *gd += d;
                    }
                });
                self.add_grad_slice(*w, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(dw.data()) {
                        *gd += d;
                    }
                });
            }
            Op::DepthwiseConv2d { x, w, stride } => {
                let (dx, dw) =
                    conv::depthwise_backward(&self.values[x.0], &self.values[w.0], dy, *stride);
                self.add_grad_slice(*x, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(dx.data()) {
                        *gd += d;
                    }
                });
                self.add_grad_slice(*w, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(dw.data()) {
                        *gd += d;
                    }
                });
            }
            Op::PointwiseConv2d { x, w } => {
                let xs = self.values[x.0].shape().to_vec();
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let co = self.values[w.0].dim(0);
                let hw = h * wd;
                let xv = self.values[x.0].data().to_vec();
                let wv = self.values[w.0].data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for ni in 0..n {
                    for coi in 0..co {
                        let dyp = &dy.data()[(ni * co + coi) * hw..(ni * co + coi + 1) * hw];
                        for cii in 0..ci {
                            let plane = (ni * ci + cii) * hw;
                            let weight = wv[coi * ci + cii];
                            let mut acc = 0.0;
                            for (k, d) in dyp.iter().enumerate() {
                                dx[plane + k] += weight * d;
                                acc += d * xv[plane + k];
                            }
                            dw[coi * ci + cii] += acc;
                        }
                    }
                }
                self.add_grad_slice(*x, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(&dx) {
                        *gd += d;
                    }
                });
                self.add_grad_slice(*w, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(&dw) {
                        *gd += d;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            } => {
                let xs = self.values[x.0].shape().to_vec();
                let c = xs[1];
                let plane = plane_size(&xs);
                let count = (self.values[x.0].numel() / c) as f64;
                let xv = self.values[x.0].data();
                let gv = self.values[gamma.0].data().to_vec();

                // xhat and per-channel reductions of dy and dy*xhat
                let mut xhat = vec![0.0; xv.len()];
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (k, &v) in xv.iter().enumerate() {
                    let ch = (k / plane) % c;
                    let h = (v - mean.data()[ch]) / (var.data()[ch] + BN_EPS).sqrt();
                    xhat[k] = h;
                    sum_dy[ch] += dy.data()[k];
                    sum_dy_xhat[ch] += dy.data()[k] * h;
                }

                let train = *train;
                let mean_t = mean.clone();
                let var_t = var.clone();
                self.add_grad_slice(*x, |g| {
                    for (k, gd) in g.data_mut().iter_mut().enumerate() {
                        let ch = (k / plane) % c;
                        let inv_std = 1.0 / (var_t.data()[ch] + BN_EPS).sqrt();
                        let d = dy.data()[k];
                        if train {
                            *gd += gv[ch]
                                * inv_std
                                * (d - sum_dy[ch] / count - xhat[k] * sum_dy_xhat[ch] / count);
                        } else {
                            *gd += gv[ch] * inv_std * d;
                        }
                    }
                });
                let _ = mean_t;
                self.add_grad_slice(*gamma, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(&sum_dy_xhat) {
                        *gd += d;
                    }
                });
                self.add_grad_slice(*beta, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(&sum_dy) {
                        *gd += d;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.values[x.0].shape().to_vec();
                let hw = xs[2] * xs[3];
                let scale = 1.0 / hw as f64;
                self.add_grad_slice(*x, |g| {
                    for (plane_idx, d) in dy.data().iter().enumerate() {
                        let dst = &mut g.data_mut()[plane_idx * hw..(plane_idx + 1) * hw];
                        for gd in dst {
                            *gd += d * scale;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.add_grad_slice(*x, |g| {
                    for ((gd, d), m) in g.data_mut().iter_mut().zip(dy.data()).zip(mask) {
                        *gd += d * m;
                    }
                });
            }
            Op::Softmax(x) => {
                let yv = self.values[i].data().to_vec();
                let cdim = self.values[i].dim(1);
                self.add_grad_slice(*x, |g| {
                    for row in 0..yv.len() / cdim {
                        let y = &yv[row * cdim..(row + 1) * cdim];
                        let d = &dy.data()[row * cdim..(row + 1) * cdim];
                        let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                        let dst = &mut g.data_mut()[row * cdim..(row + 1) * cdim];
                        for (k, gd) in dst.iter_mut().enumerate() {
                            *gd += y[k] * (d[k] - dot);
                        }
                    }
                });
            }
            Op::BceLoss { p, targets } => {
                let cdim = self.values[p.0].dim(1);
                let n = targets.len() as f64;
                let pv = self.values[p.0].data().to_vec();
                let d = dy.item();
                self.add_grad_slice(*p, |g| {
                    for (row, &t) in targets.iter().enumerate() {
                        let prob = pv[row * cdim + t].max(f64::MIN_POSITIVE);
                        g.data_mut()[row * cdim + t] -= d / (n * prob);
                    }
                });
            }
            Op::Reshape(x) => {
                self.add_grad_slice(*x, |g| {
                    for (gd, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *gd += d;
                    }
                });
            }
        }
        self.ops[i] = op;
    }
}

/// Fused LSTM parameter handles: input kernel (F, 4U), recurrent kernel
/// (U, 4U), bias (4U).
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w: NodeId,
    pub r: NodeId,
    pub b: NodeId,
}

fn plane_size(shape: &[usize]) -> usize {
    shape[2..].iter().product::<usize>().max(1)
}

/// Per-channel mean and biased variance over all non-channel axes of a
/// rank-2 or rank-4 tensor.
fn batch_stats(x: &Tensor) -> Option<(Tensor, Tensor)> {
    let shape = x.shape();
    if shape.len() != 2 && shape.len() != 4 {
        return None;
    }
    let c = shape[1];
    let plane = plane_size(shape);
    let count = (x.numel() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        mean[(i / plane) % c] += v;
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = (i / plane) % c;
        var[ch] += (v - mean[ch]) * (v - mean[ch]);
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    Some((Tensor::from_vec(&[c], mean), Tensor::from_vec(&[c], var)))
}

fn matmul_raw(a: &Tensor, b: &Tensor, n: usize, k: usize, m: usize) -> Tensor {
    let mut out = vec![0.0; n * m];
    let av = a.data();
    let bv = b.data();
    for row in 0..n {
        for kk in 0..k {
            let a_val = av[row * k + kk];
            if a_val == 0.0 {
                continue;
            }
            let src = &bv[kk * m..(kk + 1) * m];
            let dst = &mut out[row * m..(row + 1) * m];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a_val * s;
            }
        }
    }
    Tensor::from_vec(&[n, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(2.0));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(GraphError::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.backward(w),
            Err(GraphError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(
            &[3, 4],
            vec![0.0, 1.0, -2.0, 0.5, 100.0, 100.0, 100.0, 100.0, -5.0, 0.0, 5.0, 3.0],
        ));
        let y = g.softmax(x).unwrap();
        for row in 0..3 {
            let s: f64 = g.value(y).data()[row * 4..(row + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for &p in &g.value(y).data()[row * 4..(row + 1) * 4] {
                assert!(p > 0.0 && p < 1.0);
            }
        }
        // symmetric logits -> uniform
        let x = g.input(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_zero_at_negative_and_origin() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[1, 4], vec![-2.0, -0.5, 0.0, 3.0]));
        let y = g.relu(x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_eval_identity_train_scaling()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.param(Tensor::filled(&[1, 10_000], 1.0));
        // rate 0 is the identity (same node comes back)
        let same = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x);
        let rate = 0.25;
        let y = g.dropout(x, rate, &mut rng).unwrap();
        let kept: Vec<f64> = g.value(y).data().iter().cloned().filter(|&v| v != 0.0).collect();
        let frac_zero = 1.0 - kept.len() as f64 / 10_000.0;
        assert!((frac_zero - rate).abs() < 0.02, "zeroed {frac_zero}");
        for v in kept {
            assert!((v - 1.0 / (1.0 - rate)).abs() < 1e-12);
        }
        assert!(matches!(
            g.dropout(x, 1.0, &mut rng),
            Err(GraphError::BadDropoutRate(_))
        ));
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i % 17) as f64 * 1.3 - 4.0).collect();
        let x = g.input(Tensor::from_vec(&[2, 3, 4, 4], data));
        let gamma = g.param(Tensor::filled(&[3], 1.0));
        let beta = g.param(Tensor::zeros(&[3]));
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta).unwrap();
        assert_eq!(mean.numel(), 3);
        assert_eq!(var.numel(), 3);
        // per-channel output mean ~ 0 and variance ~ 1 (pre-affine since
        // gamma = 1, beta = 0)
        let yv = g.value(y).data();
        let plane = 16;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2 * 3 * 16)
                .filter(|i| (i / plane) % 3 == ch)
                .map(|i| yv[i])
                .collect();
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "channel {ch} mean {m}");
            assert!((v - 1.0).abs() < 1e-6, "channel {ch} var {v}");
        }
    }

    #[test]
    fn batch_norm_eval_is_affine() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let gamma = g.input(Tensor::from_vec(&[2], vec![2.0, 0.5]));
        let beta = g.input(Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mean = Tensor::from_vec(&[2], vec![1.0, 3.0]);
        let var = Tensor::from_vec(&[2], vec![4.0, 1.0]);
        let y = g.batch_norm_eval(x, gamma, beta, &mean, &var).unwrap();
        let want = [
            1.0 + 2.0 * (1.0 - 1.0) / (4.0f64 + BN_EPS).sqrt(),
            1.0 + 2.0 * (2.0 - 1.0) / (4.0f64 + BN_EPS).sqrt(),
            -1.0 + 0.5 * (3.0 - 3.0) / (1.0f64 + BN_EPS).sqrt(),
            -1.0 + 0.5 * (4.0 - 3.0) / (1.0f64 + BN_EPS).sqrt(),
        ];
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_identity_kernel_passthrough() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(
            &[1, 2, 3, 4],
            (0..24).map(|i| i as f64 * 0.3 - 2.0).collect(),
        ));
        let mut w = Tensor::zeros(&[2, 3, 3]);
        w.data_mut()[1 * 3 + 1] = 1.0;
        w.data_mut()[9 + 1 * 3 + 1] = 1.0;
        let w = g.input(w);
        let y = g.depthwise_conv2d(x, w, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn bce_loss_uniform_prediction_is_ln2() {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_vec(&[4, 2], vec![0.5; 8]));
        let loss = g.bce_loss(p, &[0, 1, 0, 1]).unwrap();
        assert!((g.value(loss).item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_and_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(
            &[4, 2],
            vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0, 30.0, 31.0],
        ));
        let picked = g.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(g.value(picked).data(), &[20.0, 21.0, 0.0, 1.0]);
        let a = g.slice_cols(x, 0, 1).unwrap();
        let b = g.slice_cols(x, 1, 2).unwrap();
        let back = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn disconnected_param_has_no_grad() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(1.0));
        let unused = g.param(Tensor::scalar(5.0));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_some());
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn shape_errors_reported() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.matmul(b, b).is_err());
        assert!(g.slice_cols(a, 2, 2).is_err());
        let c = g.input(Tensor::zeros(&[2, 2, 2]));
        assert!(g.softmax(c).is_err());
    }
}
