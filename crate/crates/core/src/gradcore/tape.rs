//! Wengert tape: eager forward primitives that record themselves, replayed in
//! exact reverse order by a single backward pass.

use std::cell::Cell;

use super::kernels::{
    col2im_acc, im2col, matmul_acc, matmul_transa_acc, matmul_transb_acc, softmax_rows_inplace,
    ConvGeom,
};
use super::{all_finite, cast, GradError, NodeId, Real};

thread_local! {
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Count of backward passes completed on the current thread. Lets tests
/// assert the one-backward-per-replay economy of shared-gradient training
/// without interference from concurrently running test threads.
pub fn backward_pass_count() -> u64 {
    BACKWARD_PASSES.with(|c| c.get())
}

struct Node<E> {
    data: Vec<E>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum Op<E> {
    Affine { x: usize, mul: E, out: usize },
    Add { a: usize, b: usize, out: usize },
    AddBias { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize, out: usize },
    BatMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        out: usize,
    },
    Relu { x: usize, out: usize },
    Gelu { x: usize, out: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom, col: Vec<E>, out: usize },
    MaxPool2d { x: usize, size: usize, stride: usize, argmax: Vec<u32>, out: usize },
    Reshape { x: usize, out: usize },
    SwapAxes12 { x: usize, dims: [usize; 4], out: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        rows: usize,
        dim: usize,
        mean: Vec<E>,
        rstd: Vec<E>,
        out: usize,
    },
    Softmax { x: usize, rows: usize, dim: usize, out: usize },
    SoftmaxXent {
        logits: usize,
        labels: Vec<usize>,
        rows: usize,
        classes: usize,
        probs: Vec<E>,
        out: usize,
    },
    SelectClassSum { x: usize, labels: Vec<usize>, classes: usize, out: usize },
    PrependToken { seq: usize, token: usize, n: usize, t: usize, d: usize, out: usize },
    TakeToken { x: usize, n: usize, t: usize, d: usize, index: usize, out: usize },
    SumAll { x: usize, out: usize },
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients<E: Real> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Real> Gradients<E> {
    pub fn get(&self, id: NodeId) -> Option<&[E]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<E>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Tape<E: Real> {
    nodes: Vec<Node<E>>,
    steps: Vec<Op<E>>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), steps: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf(
        &mut self,
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<NodeId, GradError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GradError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} vs {} elements", shape, data.len()),
            });
        }
        if !all_finite(&data) {
            return Err(GradError::NonFinite { op: "leaf", pass: "forward" });
        }
        self.nodes.push(Node { data, shape, needs_grad: requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push(
        &mut self,
        op_name: &'static str,
        data: Vec<E>,
        shape: Vec<usize>,
        needs_grad: bool,
    ) -> Result<usize, GradError> {
        if !all_finite(&data) {
            return Err(GradError::NonFinite { op: op_name, pass: "forward" });
        }
        self.nodes.push(Node { data, shape, needs_grad });
        Ok(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// out = x * mul + add, elementwise with scalar constants.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId, GradError> {
        let m = cast::<E>(mul);
        let a = cast::<E>(add);
        let data: Vec<E> = self.nodes[x.0].data.iter().map(|&v| v * m + a).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(&[x.0]);
        let out = self.push("affine", data, shape, ng)?;
        self.steps.push(Op::Affine { x: x.0, mul: m, out });
        Ok(NodeId(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(GradError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, b.0]);
        let out = self.push("add", data, shape, ng)?;
        self.steps.push(Op::Add { a: a.0, b: b.0, out });
        Ok(NodeId(out))
    }

    /// Broadcast add: `b`'s shape must be a suffix of `a`'s shape.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let ashape = &self.nodes[a.0].shape;
        let bshape = &self.nodes[b.0].shape;
        let suffix_ok = bshape.len() <= ashape.len()
            && ashape[ashape.len() - bshape.len()..] == bshape[..];
        if !suffix_ok || self.nodes[b.0].data.is_empty() {
            return Err(GradError::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} not a suffix of {:?}", bshape, ashape),
            });
        }
        let bn = self.nodes[b.0].data.len();
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.nodes[b.0].data[i % bn])
            .collect();
        let shape = ashape.clone();
        let ng = self.needs(&[a.0, b.0]);
        let out = self.push("add_bias", data, shape, ng)?;
        self.steps.push(Op::AddBias { a: a.0, b: b.0, out });
        Ok(NodeId(out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(GradError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, b.0]);
        let out = self.push("mul", data, shape, ng)?;
        self.steps.push(Op::Mul { a: a.0, b: b.0, out });
        Ok(NodeId(out))
    }

    /// 2-D matrix product [m,k] @ [k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} @ {:?}", ashape, bshape),
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let mut data = vec![E::zero(); m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut data, m, k, n);
        let ng = self.needs(&[a.0, b.0]);
        let out = self.push("matmul", data, vec![m, n], ng)?;
        self.steps.push(Op::MatMul { a: a.0, b: b.0, m, k, n, out });
        Ok(NodeId(out))
    }

    /// Batched matmul over the leading dimension: [B,m,k] @ [B,k,n], or
    /// [B,m,k] @ [B,n,k] with `trans_b`.
    pub fn batmatmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId, GradError> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ashape.len() != 3 || bshape.len() != 3 || ashape[0] != bshape[0] {
            return Err(GradError::ShapeMismatch {
                op: "batmatmul",
                detail: format!("{:?} @ {:?}", ashape, bshape),
            });
        }
        let batch = ashape[0];
        let (m, k) = (ashape[1], ashape[2]);
        let n = if trans_b { bshape[1] } else { bshape[2] };
        let k_b = if trans_b { bshape[2] } else { bshape[1] };
        if k != k_b {
            return Err(GradError::ShapeMismatch {
                op: "batmatmul",
                detail: format!("{:?} @ {:?} (trans_b={})", ashape, bshape, trans_b),
            });
        }
        let mut data = vec![E::zero(); batch * m * n];
        for i in 0..batch {
            let av = &self.nodes[a.0].data[i * m * k..(i + 1) * m * k];
            let bv = &self.nodes[b.0].data[i * k * n..(i + 1) * k * n];
            let cv = &mut data[i * m * n..(i + 1) * m * n];
            if trans_b {
                matmul_transb_acc(av, bv, cv, m, k, n);
            } else {
                matmul_acc(av, bv, cv, m, k, n);
            }
        }
        let ng = self.needs(&[a.0, b.0]);
        let out = self.push("batmatmul", data, vec![batch, m, n], ng)?;
        self.steps.push(Op::BatMatMul { a: a.0, b: b.0, batch, m, k, n, trans_b, out });
        Ok(NodeId(out))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let data: Vec<E> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(&[x.0]);
        let out = self.push("relu", data, shape, ng)?;
        self.steps.push(Op::Relu { x: x.0, out });
        Ok(NodeId(out))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let data: Vec<E> = self.nodes[x.0].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(&[x.0]);
        let out = self.push("gelu", data, shape, ng)?;
        self.steps.push(Op::Gelu { x: x.0, out });
        Ok(NodeId(out))
    }

    /// NHWC convolution with a square [k,k,c_in,c_out] kernel.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GradError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || xs[3] != ws[2] {
            return Err(GradError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?} kernel {:?}", xs, ws),
            });
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ws[3], ws[0], stride, pad).ok_or(
            GradError::InvalidArg { op: "conv2d", detail: "kernel exceeds padded input".into() },
        )?;
        let col = im2col(&self.nodes[x.0].data, &geom);
        let positions = geom.out_positions();
        let mut data = vec![E::zero(); positions * geom.c_out];
        matmul_acc(&col, &self.nodes[w.0].data, &mut data, positions, geom.patch_len(), geom.c_out);
        let ng = self.needs(&[x.0, w.0]);
        // the unrolled patch matrix is only needed for the weight gradient
        let saved_col = if self.nodes[w.0].needs_grad { col } else { Vec::new() };
        let out = self.push("conv2d", data, vec![geom.n, geom.oh, geom.ow, geom.c_out], ng)?;
        self.steps.push(Op::Conv2d { x: x.0, w: w.0, geom, col: saved_col, out });
        Ok(NodeId(out))
    }

    pub fn maxpool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId, GradError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || size == 0 || stride == 0 || xs[1] < size || xs[2] < size {
            return Err(GradError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("input {:?}, window {}x{}", xs, size, size),
            });
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - size) / stride + 1;
        let ow = (w - size) / stride + 1;
        let mut data = vec![E::zero(); n * oh * ow * c];
        let mut argmax = vec![0u32; n * oh * ow * c];
        let src = &self.nodes[x.0].data;
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = E::neg_infinity();
                        let mut best_idx = 0usize;
                        for ky in 0..size {
                            for kx in 0..size {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                let idx = ((img * h + iy) * w + ix) * c + ch;
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((img * oh + oy) * ow + ox) * c + ch;
                        data[o] = best;
                        argmax[o] = best_idx as u32;
                    }
                }
            }
        }
        let ng = self.needs(&[x.0]);
        let out = self.push("maxpool2d", data, vec![n, oh, ow, c], ng)?;
        self.steps.push(Op::MaxPool2d { x: x.0, size, stride, argmax, out });
        Ok(NodeId(out))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: Vec<usize>) -> Result<NodeId, GradError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(GradError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[x.0].shape, new_shape),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.needs(&[x.0]);
        let out = self.push("reshape", data, new_shape, ng)?;
        self.steps.push(Op::Reshape { x: x.0, out });
        Ok(NodeId(out))
    }

    /// [d0,d1,d2,d3] -> [d0,d2,d1,d3] axis swap (token/head shuffling).
    pub fn swap_axes_1_2(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(GradError::ShapeMismatch {
                op: "swap_axes_1_2",
                detail: format!("need 4-d input, got {:?}", xs),
            });
        }
        let dims = [xs[0], xs[1], xs[2], xs[3]];
        let data = swap_axes_1_2_copy(&self.nodes[x.0].data, dims);
        let ng = self.needs(&[x.0]);
        let out = self.push("swap_axes_1_2", data, vec![xs[0], xs[2], xs[1], xs[3]], ng)?;
        self.steps.push(Op::SwapAxes12 { x: x.0, dims, out });
        Ok(NodeId(out))
    }

    /// Layer normalization over the last dimension, with [dim] gamma/beta.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, GradError> {
        let xs = self.nodes[x.0].shape.clone();
        let dim = *xs.last().ok_or(GradError::ShapeMismatch {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        if self.nodes[gamma.0].shape != [dim] || self.nodes[beta.0].shape != [dim] {
            return Err(GradError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} beta {:?} for dim {}",
                    self.nodes[gamma.0].shape, self.nodes[beta.0].shape, dim
                ),
            });
        }
        let rows = self.nodes[x.0].data.len() / dim;
        let epsv = cast::<E>(eps);
        let mut mean = vec![E::zero(); rows];
        let mut rstd = vec![E::zero(); rows];
        let mut data = vec![E::zero(); rows * dim];
        let inv_dim = E::one() / cast::<E>(dim as f64);
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * dim..(r + 1) * dim];
            let mut mu = E::zero();
            for &v in row {
                mu = mu + v;
            }
            mu = mu * inv_dim;
            let mut var = E::zero();
            for &v in row {
                let d = v - mu;
                var = var + d * d;
            }
            var = var * inv_dim;
            let rs = E::one() / (var + epsv).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for (j, &v) in row.iter().enumerate() {
                data[r * dim + j] =
                    (v - mu) * rs * self.nodes[gamma.0].data[j] + self.nodes[beta.0].data[j];
            }
        }
        let ng = self.needs(&[x.0, gamma.0, beta.0]);
        let out = self.push("layer_norm", data, xs, ng)?;
        self.steps.push(Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, rows, dim, mean, rstd, out });
        Ok(NodeId(out))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let xs = self.nodes[x.0].shape.clone();
        let dim = *xs.last().ok_or(GradError::ShapeMismatch {
            op: "softmax",
            detail: "scalar input".into(),
        })?;
        let rows = self.nodes[x.0].data.len() / dim;
        let mut data = self.nodes[x.0].data.clone();
        softmax_rows_inplace(&mut data, rows, dim);
        let ng = self.needs(&[x.0]);
        let out = self.push("softmax", data, xs, ng)?;
        self.steps.push(Op::Softmax { x: x.0, rows, dim, out });
        Ok(NodeId(out))
    }

    /// Mean softmax cross-entropy of [rows, classes] logits against labels.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, GradError> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(GradError::ShapeMismatch {
                op: "softmax_xent",
                detail: format!("logits {:?} vs {} labels", shape, labels.len()),
            });
        }
        let (rows, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(GradError::InvalidArg {
                op: "softmax_xent",
                detail: format!("label {} out of range for {} classes", bad, classes),
            });
        }
        let mut probs = self.nodes[logits.0].data.clone();
        softmax_rows_inplace(&mut probs, rows, classes);
        let mut total = E::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &self.nodes[logits.0].data[r * classes..(r + 1) * classes];
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sumexp = E::zero();
            for &v in row.iter() {
                sumexp = sumexp + (v - mx).exp();
            }
            total = total + (mx + sumexp.ln() - row[y]);
        }
        let loss = total / cast::<E>(rows as f64);
        let ng = self.needs(&[logits.0]);
        let saved = if ng { probs } else { Vec::new() };
        let out = self.push("softmax_xent", vec![loss], vec![], ng)?;
        self.steps.push(Op::SoftmaxXent {
            logits: logits.0,
            labels: labels.to_vec(),
            rows,
            classes,
            probs: saved,
            out,
        });
        Ok(NodeId(out))
    }

    /// Scalar sum of the label-indexed entry of each row.
    pub fn select_class_sum(
        &mut self,
        x: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, GradError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(GradError::ShapeMismatch {
                op: "select_class_sum",
                detail: format!("input {:?} vs {} labels", shape, labels.len()),
            });
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(GradError::InvalidArg {
                op: "select_class_sum",
                detail: format!("label {} out of range for {} classes", bad, classes),
            });
        }
        let mut total = E::zero();
        for (r, &y) in labels.iter().enumerate() {
            total = total + self.nodes[x.0].data[r * classes + y];
        }
        let ng = self.needs(&[x.0]);
        let out = self.push("select_class_sum", vec![total], vec![], ng)?;
        self.steps.push(Op::SelectClassSum { x: x.0, labels: labels.to_vec(), classes, out });
        Ok(NodeId(out))
    }

    /// Prepends a learned [d] token to every sequence of a [n,t,d] batch.
    pub fn prepend_token(&mut self, seq: NodeId, token: NodeId) -> Result<NodeId, GradError> {
        let ss = self.nodes[seq.0].shape.clone();
        let ts = self.nodes[token.0].shape.clone();
        if ss.len() != 3 || ts != [ss[2]] {
            return Err(GradError::ShapeMismatch {
                op: "prepend_token",
                detail: format!("seq {:?} token {:?}", ss, ts),
            });
        }
        let (n, t, d) = (ss[0], ss[1], ss[2]);
        let mut data = vec![E::zero(); n * (t + 1) * d];
        for i in 0..n {
            let dst = i * (t + 1) * d;
            data[dst..dst + d].copy_from_slice(&self.nodes[token.0].data);
            data[dst + d..dst + (t + 1) * d]
                .copy_from_slice(&self.nodes[seq.0].data[i * t * d..(i + 1) * t * d]);
        }
        let ng = self.needs(&[seq.0, token.0]);
        let out = self.push("prepend_token", data, vec![n, t + 1, d], ng)?;
        self.steps.push(Op::PrependToken { seq: seq.0, token: token.0, n, t, d, out });
        Ok(NodeId(out))
    }

    /// Extracts token `index` from every [n,t,d] sequence, giving [n,d].
    pub fn take_token(&mut self, x: NodeId, index: usize) -> Result<NodeId, GradError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 || index >= xs[1] {
            return Err(GradError::ShapeMismatch {
                op: "take_token",
                detail: format!("input {:?}, token {}", xs, index),
            });
        }
        let (n, t, d) = (xs[0], xs[1], xs[2]);
        let mut data = vec![E::zero(); n * d];
        for i in 0..n {
            let src = (i * t + index) * d;
            data[i * d..(i + 1) * d]
                .copy_from_slice(&self.nodes[x.0].data[src..src + d]);
        }
        let ng = self.needs(&[x.0]);
        let out = self.push("take_token", data, vec![n, d], ng)?;
        self.steps.push(Op::TakeToken { x: x.0, n, t, d, index, out });
        Ok(NodeId(out))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let mut total = E::zero();
        for &v in &self.nodes[x.0].data {
            total = total + v;
        }
        let ng = self.needs(&[x.0]);
        let out = self.push("sum_all", vec![total], vec![], ng)?;
        self.steps.push(Op::SumAll { x: x.0, out });
        Ok(NodeId(out))
    }

    /// Smallest distance to a non-differentiable kink (relu threshold,
    /// max-pool tie) observed anywhere on the tape. Finite-difference checks
    /// use it to reject instances where the numeric derivative is undefined.
    pub fn kink_margin(&self) -> f64 {
        let mut relu_out = vec![false; self.nodes.len()];
        for op in &self.steps {
            if let Op::Relu { out, .. } = op {
                relu_out[*out] = true;
            }
        }
        let mut margin = f64::INFINITY;
        for op in &self.steps {
            match op {
                Op::Relu { x, .. } => {
                    for &v in &self.nodes[*x].data {
                        margin = margin.min(v.to_f64().unwrap().abs());
                    }
                }
                Op::MaxPool2d { x, size, stride, argmax, out } => {
                    // When the pool input is a relu output, entries clipped to
                    // zero cannot move under small perturbations, so ties with
                    // them are not kinks; the relu margins already measure the
                    // distance to any clip boundary.
                    let clip_floor = relu_out[*x];
                    // distance between winner and runner-up per window
                    let xs = &self.nodes[*x].shape;
                    let (h, w, c) = (xs[1], xs[2], xs[3]);
                    let os = &self.nodes[*out].shape;
                    let (oh, ow) = (os[1], os[2]);
                    let src = &self.nodes[*x].data;
                    for (o, &best_idx) in argmax.iter().enumerate() {
                        let ch = o % c;
                        let ox = (o / c) % ow;
                        let oy = (o / (c * ow)) % oh;
                        let img = o / (c * ow * oh);
                        let best = self.nodes[*out].data[o].to_f64().unwrap();
                        let mut second = f64::NEG_INFINITY;
                        for ky in 0..*size {
                            for kx in 0..*size {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                let idx = ((img * h + iy) * w + ix) * c + ch;
                                if idx == best_idx as usize {
                                    continue;
                                }
                                let v = src[idx].to_f64().unwrap();
                                if clip_floor && v <= 0.0 {
                                    continue;
                                }
                                if v > second {
                                    second = v;
                                }
                            }
                        }
                        if second.is_finite() && !(clip_floor && best <= 0.0) {
                            margin = margin.min(best - second);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse replay from a scalar root. Consumes the tape, so a second
    /// backward over the same graph is impossible by construction.
    pub fn backward(mut self, root: NodeId) -> Result<Gradients<E>, GradError> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(GradError::InvalidArg {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", self.nodes[root.0].shape),
            });
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![E::one()]);

        for step in self.steps.iter().rev() {
            backward_step(step, &self.nodes, &mut grads);
        }

        // intermediates were dropped as they were consumed; what remains are
        // the requested leaf gradients, which must be finite
        for g in grads.iter().flatten() {
            if !all_finite(g) {
                return Err(GradError::NonFinite { op: "backward", pass: "backward" });
            }
        }
        self.steps.clear();
        BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
        Ok(Gradients { grads })
    }
}

fn gelu_fwd<E: Real>(x: E) -> E {
    // tanh approximation, matching the derivative used in backward
    let c0 = cast::<E>(0.797_884_560_802_865_4);
    let c1 = cast::<E>(0.044_715);
    let half = cast::<E>(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_bwd<E: Real>(x: E) -> E {
    let c0 = cast::<E>(0.797_884_560_802_865_4);
    let c1 = cast::<E>(0.044_715);
    let half = cast::<E>(0.5);
    let three = cast::<E>(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c0 * (E::one() + three * c1 * x * x)
}

fn swap_axes_1_2_copy<E: Real>(src: &[E], dims: [usize; 4]) -> Vec<E> {
    let [d0, d1, d2, d3] = dims;
    let mut out = vec![E::zero(); src.len()];
    for b in 0..d0 {
        for t in 0..d1 {
            for h in 0..d2 {
                let s = ((b * d1 + t) * d2 + h) * d3;
                let d = ((b * d2 + h) * d1 + t) * d3;
                out[d..d + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
    out
}

fn acc_into<E: Real>(slot: &mut Option<Vec<E>>, len: usize) -> &mut [E] {
    slot.get_or_insert_with(|| vec![E::zero(); len])
}

fn backward_step<E: Real>(op: &Op<E>, nodes: &[Node<E>], grads: &mut Vec<Option<Vec<E>>>) {
    match op {
        Op::Affine { x, mul, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let g = acc_into(&mut grads[*x], d.len());
                for (gv, dv) in g.iter_mut().zip(&d) {
                    *gv = *gv + *mul * *dv;
                }
            }
        }
        Op::Add { a, b, out } => {
            let Some(d) = grads[*out].take() else { return };
            for &src in &[*a, *b] {
                if nodes[src].needs_grad {
                    let g = acc_into(&mut grads[src], d.len());
                    for (gv, dv) in g.iter_mut().zip(&d) {
                        *gv = *gv + *dv;
                    }
                }
            }
        }
        Op::AddBias { a, b, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*a].needs_grad {
                let g = acc_into(&mut grads[*a], d.len());
                for (gv, dv) in g.iter_mut().zip(&d) {
                    *gv = *gv + *dv;
                }
            }
            if nodes[*b].needs_grad {
                let bn = nodes[*b].data.len();
                let g = acc_into(&mut grads[*b], bn);
                for (i, dv) in d.iter().enumerate() {
                    g[i % bn] = g[i % bn] + *dv;
                }
            }
        }
        Op::Mul { a, b, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*a].needs_grad {
                let g = acc_into(&mut grads[*a], d.len());
                for ((gv, dv), bv) in g.iter_mut().zip(&d).zip(&nodes[*b].data) {
                    *gv = *gv + *dv * *bv;
                }
            }
            if nodes[*b].needs_grad {
                let g = acc_into(&mut grads[*b], d.len());
                for ((gv, dv), av) in g.iter_mut().zip(&d).zip(&nodes[*a].data) {
                    *gv = *gv + *dv * *av;
                }
            }
        }
        Op::MatMul { a, b, m, k, n, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*a].needs_grad {
                let g = acc_into(&mut grads[*a], m * k);
                // dA += dC @ B^T; B is [k,n] so this is the trans-b product
                matmul_transb_acc(&d, &nodes[*b].data, g, *m, *n, *k);
            }
            if nodes[*b].needs_grad {
                let g = acc_into(&mut grads[*b], k * n);
                matmul_transa_acc(&nodes[*a].data, &d, g, *m, *k, *n);
            }
        }
        Op::BatMatMul { a, b, batch, m, k, n, trans_b, out } => {
            let Some(d) = grads[*out].take() else { return };
            for i in 0..*batch {
                let dv = &d[i * m * n..(i + 1) * m * n];
                let av = &nodes[*a].data[i * m * k..(i + 1) * m * k];
                let bv = &nodes[*b].data[i * k * n..(i + 1) * k * n];
                if nodes[*a].needs_grad {
                    let g = acc_into(&mut grads[*a], batch * m * k);
                    let gv = &mut g[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // C = A @ B^T with B [n,k]: dA += dC @ B
                        matmul_acc(dv, bv, gv, *m, *n, *k);
                    } else {
                        matmul_transb_acc(dv, bv, gv, *m, *n, *k);
                    }
                }
                if nodes[*b].needs_grad {
                    let g = acc_into(&mut grads[*b], batch * k * n);
                    let gv = &mut g[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // dB += dC^T @ A, shapes [n,m] @ [m,k]
                        matmul_transa_acc(dv, av, gv, *m, *n, *k);
                    } else {
                        matmul_transa_acc(av, dv, gv, *m, *k, *n);
                    }
                }
            }
        }
        Op::Relu { x, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let g = acc_into(&mut grads[*x], d.len());
                for ((gv, dv), xv) in g.iter_mut().zip(&d).zip(&nodes[*x].data) {
                    if *xv > E::zero() {
                        *gv = *gv + *dv;
                    }
                }
            }
        }
        Op::Gelu { x, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let g = acc_into(&mut grads[*x], d.len());
                for ((gv, dv), xv) in g.iter_mut().zip(&d).zip(&nodes[*x].data) {
                    *gv = *gv + *dv * gelu_bwd(*xv);
                }
            }
        }
        Op::Conv2d { x, w, geom, col, out } => {
            let Some(d) = grads[*out].take() else { return };
            let positions = geom.out_positions();
            let plen = geom.patch_len();
            if nodes[*w].needs_grad {
                let g = acc_into(&mut grads[*w], plen * geom.c_out);
                matmul_transa_acc(col, &d, g, positions, plen, geom.c_out);
            }
            if nodes[*x].needs_grad {
                let mut dcol = vec![E::zero(); positions * plen];
                matmul_transb_acc(&d, &nodes[*w].data, &mut dcol, positions, geom.c_out, plen);
                let g = acc_into(&mut grads[*x], nodes[*x].data.len());
                col2im_acc(&dcol, g, geom);
            }
        }
        Op::MaxPool2d { x, argmax, out, .. } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let g = acc_into(&mut grads[*x], nodes[*x].data.len());
                for (o, &idx) in argmax.iter().enumerate() {
                    g[idx as usize] = g[idx as usize] + d[o];
                }
            }
        }
        Op::Reshape { x, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let g = acc_into(&mut grads[*x], d.len());
                for (gv, dv) in g.iter_mut().zip(&d) {
                    *gv = *gv + *dv;
                }
            }
        }
        Op::SwapAxes12 { x, dims, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let [d0, d1, d2, d3] = *dims;
                let back = swap_axes_1_2_copy(&d, [d0, d2, d1, d3]);
                let g = acc_into(&mut grads[*x], back.len());
                for (gv, dv) in g.iter_mut().zip(&back) {
                    *gv = *gv + *dv;
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, rows, dim, mean, rstd, out } => {
            let Some(d) = grads[*out].take() else { return };
            let dimf = cast::<E>(*dim as f64);
            let gamma_v = &nodes[*gamma].data;
            for r in 0..*rows {
                let xrow = &nodes[*x].data[r * dim..(r + 1) * dim];
                let drow = &d[r * dim..(r + 1) * dim];
                let (mu, rs) = (mean[r], rstd[r]);
                if nodes[*gamma].needs_grad {
                    let g = acc_into(&mut grads[*gamma], *dim);
                    for j in 0..*dim {
                        g[j] = g[j] + drow[j] * (xrow[j] - mu) * rs;
                    }
                }
                if nodes[*beta].needs_grad {
                    let g = acc_into(&mut grads[*beta], *dim);
                    for j in 0..*dim {
                        g[j] = g[j] + drow[j];
                    }
                }
                if nodes[*x].needs_grad {
                    let mut sum_dy = E::zero();
                    let mut sum_dy_xhat = E::zero();
                    for j in 0..*dim {
                        let dy = drow[j] * gamma_v[j];
                        let xhat = (xrow[j] - mu) * rs;
                        sum_dy = sum_dy + dy;
                        sum_dy_xhat = sum_dy_xhat + dy * xhat;
                    }
                    let g = acc_into(&mut grads[*x], rows * dim);
                    for j in 0..*dim {
                        let dy = drow[j] * gamma_v[j];
                        let xhat = (xrow[j] - mu) * rs;
                        g[r * dim + j] = g[r * dim + j]
                            + rs * (dy - sum_dy / dimf - xhat * sum_dy_xhat / dimf);
                    }
                }
            }
        }
        Op::Softmax { x, rows, dim, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let y = &nodes[*out].data;
                let g = acc_into(&mut grads[*x], rows * dim);
                for r in 0..*rows {
                    let yr = &y[r * dim..(r + 1) * dim];
                    let dr = &d[r * dim..(r + 1) * dim];
                    let mut s = E::zero();
                    for j in 0..*dim {
                        s = s + dr[j] * yr[j];
                    }
                    for j in 0..*dim {
                        g[r * dim + j] = g[r * dim + j] + yr[j] * (dr[j] - s);
                    }
                }
            }
        }
        Op::SoftmaxXent { logits, labels, rows, classes, probs, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*logits].needs_grad {
                let scale = d[0] / cast::<E>(*rows as f64);
                let g = acc_into(&mut grads[*logits], rows * classes);
                for r in 0..*rows {
                    for j in 0..*classes {
                        let idx = r * classes + j;
                        let target = if labels[r] == j { E::one() } else { E::zero() };
                        g[idx] = g[idx] + scale * (probs[idx] - target);
                    }
                }
            }
        }
        Op::SelectClassSum { x, labels, classes, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let g = acc_into(&mut grads[*x], nodes[*x].data.len());
                for (r, &y) in labels.iter().enumerate() {
                    g[r * classes + y] = g[r * classes + y] + d[0];
                }
            }
        }
        Op::PrependToken { seq, token, n, t, d: dm, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*token].needs_grad {
                let g = acc_into(&mut grads[*token], *dm);
                for i in 0..*n {
                    let base = i * (t + 1) * dm;
                    for j in 0..*dm {
                        g[j] = g[j] + d[base + j];
                    }
                }
            }
            if nodes[*seq].needs_grad {
                let g = acc_into(&mut grads[*seq], n * t * dm);
                for i in 0..*n {
                    let src = i * (t + 1) * dm + dm;
                    let dst = i * t * dm;
                    for j in 0..t * dm {
                        g[dst + j] = g[dst + j] + d[src + j];
                    }
                }
            }
        }
        Op::TakeToken { x, n, t, d: dm, index, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let g = acc_into(&mut grads[*x], n * t * dm);
                for i in 0..*n {
                    let dst = (i * t + index) * dm;
                    for j in 0..*dm {
                        g[dst + j] = g[dst + j] + d[i * dm + j];
                    }
                }
            }
        }
        Op::SumAll { x, out } => {
            let Some(d) = grads[*out].take() else { return };
            if nodes[*x].needs_grad {
                let g = acc_into(&mut grads[*x], nodes[*x].data.len());
                for gv in g.iter_mut() {
                    *gv = *gv + d[0];
                }
            }
        }
    }
}
