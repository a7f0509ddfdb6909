//! Minimal dense-tensor engine with reverse-mode gradients.
//!
//! Tensors are immutable 2-D f64 arrays linked into an operation graph via
//! `Rc`. Calling [`Tensor::backward`] on a scalar walks the graph in reverse
//! topological order and accumulates gradients for every tensor created with
//! `requires_grad`. Every operation checks its output for NaN/Inf and fails
//! fast naming the offending op.
//!
//! The op set is exactly what the message-passing models need: matmul,
//! row-broadcast bias, elementwise arithmetic, tanh/relu, column concat,
//! row gather/scatter (segment sums and means keyed by edge endpoints), and
//! a fused class-weighted cross-entropy head.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Tensor, Tensor),
    Add(Tensor, Tensor),
    /// [m,n] + broadcast [1,n]
    AddBias(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    /// t * (1 + s) with s a learnable 1x1 scalar
    ScaleOnePlus(Tensor, Tensor),
    Tanh(Tensor),
    Relu(Tensor),
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
    GatherRows(Tensor, Rc<Vec<u32>>),
    /// Row i of the input is summed into output row seg[i].
    SegmentSum(Tensor, Rc<Vec<u32>>),
    /// Like SegmentSum but divided by the segment size (empty segments stay 0).
    SegmentMean(Tensor, Rc<Vec<u32>>, Rc<Vec<f64>>),
    /// Mean over all rows, accumulated in the given row order so that the
    /// result is bit-identical under node relabeling.
    MeanRowsOrdered(Tensor),
    /// Repeat a [1,n] row m times.
    BroadcastRow(Tensor, usize),
    /// Row i of output takes from `a` when mask[i] != 0, else from `b`.
    SelectRows(Tensor, Tensor, Rc<Vec<u8>>),
    SumAll(Tensor),
    WeightedCrossEntropy {
        logits: Tensor,
        labels: Rc<Vec<u8>>,
        class_weights: [f64; 2],
    },
}

#[derive(Debug)]
struct TensorInner {
    id: u64,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    // NaN and Inf both propagate through the absolute sum.
    let probe: f64 = data.iter().map(|v| v.abs()).sum();
    if probe.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    fn new(
        op_name: &'static str,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Tensor> {
        debug_assert_eq!(data.len(), rows * cols);
        check_finite(op_name, &data)?;
        Ok(Tensor {
            inner: Rc::new(TensorInner { id: fresh_id(), rows, cols, data, op, requires_grad }),
        })
    }

    pub fn leaf(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Tensor::new("leaf", rows, cols, data, Op::Leaf, requires_grad)
    }

    pub fn constant(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(rows, cols, data, false)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::leaf(rows, cols, vec![0.0; rows * cols], false).expect("zeros are finite")
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::leaf(1, 1, vec![v], false)
    }

    pub fn from_matrix(m: &Matrix) -> Result<Tensor> {
        Tensor::leaf(m.rows(), m.cols(), m.data().to_vec(), false)
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows(), self.cols(), self.data().to_vec())
            .expect("tensor dims are consistent")
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.inner.rows, self.inner.cols]
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a 1x1 tensor.
    pub fn value(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar, got {}x{}",
                self.rows(),
                self.cols()
            )));
        }
        Ok(self.inner.data[0])
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols() != rhs.rows() {
            return Err(Error::Shape(format!(
                "matmul: {}x{} * {}x{}",
                self.rows(),
                self.cols(),
                rhs.rows(),
                rhs.cols()
            )));
        }
        let data = mm(self.data(), rhs.data(), self.rows(), self.cols(), rhs.cols());
        let rg = self.requires_grad() || rhs.requires_grad();
        Tensor::new("matmul", self.rows(), rhs.cols(), data, Op::Matmul(self.clone(), rhs.clone()), rg)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "add")?;
        let data: Vec<f64> =
            self.data().iter().zip(rhs.data()).map(|(a, b)| a + b).collect();
        let rg = self.requires_grad() || rhs.requires_grad();
        Tensor::new("add", self.rows(), self.cols(), data, Op::Add(self.clone(), rhs.clone()), rg)
    }

    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows() != 1 || bias.cols() != self.cols() {
            return Err(Error::Shape(format!(
                "add_bias: {}x{} + {}x{}",
                self.rows(),
                self.cols(),
                bias.rows(),
                bias.cols()
            )));
        }
        let n = self.cols();
        let b = bias.data();
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        let rg = self.requires_grad() || bias.requires_grad();
        Tensor::new("add_bias", self.rows(), n, data, Op::AddBias(self.clone(), bias.clone()), rg)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        let data: Vec<f64> =
            self.data().iter().zip(rhs.data()).map(|(a, b)| a * b).collect();
        let rg = self.requires_grad() || rhs.requires_grad();
        Tensor::new("mul", self.rows(), self.cols(), data, Op::Mul(self.clone(), rhs.clone()), rg)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        Tensor::new("scale", self.rows(), self.cols(), data, Op::Scale(self.clone(), c), self.requires_grad())
    }

    /// self * (1 + eps) where eps is a 1x1 tensor (learnable GIN epsilon).
    pub fn scale_one_plus(&self, eps: &Tensor) -> Result<Tensor> {
        let e = eps.value()?;
        let factor = 1.0 + e;
        let data: Vec<f64> = self.data().iter().map(|a| a * factor).collect();
        let rg = self.requires_grad() || eps.requires_grad();
        Tensor::new(
            "scale_one_plus",
            self.rows(),
            self.cols(),
            data,
            Op::ScaleOnePlus(self.clone(), eps.clone()),
            rg,
        )
    }

    pub fn tanh_act(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a.tanh()).collect();
        Tensor::new("tanh", self.rows(), self.cols(), data, Op::Tanh(self.clone()), self.requires_grad())
    }

    pub fn relu_act(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a.max(0.0)).collect();
        Tensor::new("relu", self.rows(), self.cols(), data, Op::Relu(self.clone()), self.requires_grad())
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let rows = parts[0].rows();
        for p in parts {
            if p.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row mismatch {} vs {}",
                    rows,
                    p.rows()
                )));
            }
        }
        let cols: usize = parts.iter().map(Tensor::cols).sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            let pc = p.cols();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&p.data()[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let rg = parts.iter().any(Tensor::requires_grad);
        Tensor::new("concat_cols", rows, cols, data, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let cols = parts[0].cols();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {} vs {}",
                    cols,
                    p.cols()
                )));
            }
        }
        let rows: usize = parts.iter().map(Tensor::rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let rg = parts.iter().any(Tensor::requires_grad);
        Tensor::new("concat_rows", rows, cols, data, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&self, idx: Rc<Vec<u32>>) -> Result<Tensor> {
        let c = self.cols();
        let mut data = vec![0.0; idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            let i = i as usize;
            if i >= self.rows() {
                return Err(Error::IndexOutOfRange { index: i, len: self.rows() });
            }
            data[r * c..(r + 1) * c].copy_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let rows = idx.len();
        Tensor::new("gather_rows", rows, c, data, Op::GatherRows(self.clone(), idx), self.requires_grad())
    }

    pub fn segment_sum(&self, seg: Rc<Vec<u32>>, n_out: usize) -> Result<Tensor> {
        if seg.len() != self.rows() {
            return Err(Error::Shape(format!(
                "segment_sum: {} segment ids for {} rows",
                seg.len(),
                self.rows()
            )));
        }
        let c = self.cols();
        let mut data = vec![0.0; n_out * c];
        for (r, &s) in seg.iter().enumerate() {
            let s = s as usize;
            if s >= n_out {
                return Err(Error::IndexOutOfRange { index: s, len: n_out });
            }
            let src = &self.data()[r * c..(r + 1) * c];
            let dst = &mut data[s * c..(s + 1) * c];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        Tensor::new("segment_sum", n_out, c, data, Op::SegmentSum(self.clone(), seg), self.requires_grad())
    }

    pub fn segment_mean(&self, seg: Rc<Vec<u32>>, n_out: usize) -> Result<Tensor> {
        if seg.len() != self.rows() {
            return Err(Error::Shape(format!(
                "segment_mean: {} segment ids for {} rows",
                seg.len(),
                self.rows()
            )));
        }
        let mut counts = vec![0.0f64; n_out];
        for &s in seg.iter() {
            let s = s as usize;
            if s >= n_out {
                return Err(Error::IndexOutOfRange { index: s, len: n_out });
            }
            counts[s] += 1.0;
        }
        let inv: Rc<Vec<f64>> =
            Rc::new(counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect());
        let c = self.cols();
        let mut data = vec![0.0; n_out * c];
        for (r, &s) in seg.iter().enumerate() {
            let s = s as usize;
            let src = &self.data()[r * c..(r + 1) * c];
            let dst = &mut data[s * c..(s + 1) * c];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        for (i, &w) in inv.iter().enumerate() {
            for v in &mut data[i * c..(i + 1) * c] {
                *v *= w;
            }
        }
        Tensor::new(
            "segment_mean",
            n_out,
            c,
            data,
            Op::SegmentMean(self.clone(), seg, inv),
            self.requires_grad(),
        )
    }

    /// Mean over rows, summed in the supplied order. `order` must be a
    /// permutation of the row indices.
    pub fn mean_rows_ordered(&self, order: Rc<Vec<u32>>) -> Result<Tensor> {
        if order.len() != self.rows() {
            return Err(Error::Shape(format!(
                "mean_rows_ordered: order has {} entries for {} rows",
                order.len(),
                self.rows()
            )));
        }
        if self.rows() == 0 {
            return Err(Error::Empty("mean_rows_ordered"));
        }
        let c = self.cols();
        let mut data = vec![0.0; c];
        for &r in order.iter() {
            let r = r as usize;
            if r >= self.rows() {
                return Err(Error::IndexOutOfRange { index: r, len: self.rows() });
            }
            for (d, v) in data.iter_mut().zip(&self.data()[r * c..(r + 1) * c]) {
                *d += v;
            }
        }
        let inv = 1.0 / self.rows() as f64;
        for v in &mut data {
            *v *= inv;
        }
        Tensor::new("mean_rows", 1, c, data, Op::MeanRowsOrdered(self.clone()), self.requires_grad())
    }

    pub fn broadcast_row(&self, m: usize) -> Result<Tensor> {
        if self.rows() != 1 {
            return Err(Error::Shape(format!(
                "broadcast_row: expected 1x{}, got {}x{}",
                self.cols(),
                self.rows(),
                self.cols()
            )));
        }
        let c = self.cols();
        let mut data = vec![0.0; m * c];
        for r in 0..m {
            data[r * c..(r + 1) * c].copy_from_slice(self.data());
        }
        Tensor::new("broadcast_row", m, c, data, Op::BroadcastRow(self.clone(), m), self.requires_grad())
    }

    /// Per-row selection: rows with mask != 0 come from `self`, others from `other`.
    pub fn select_rows(&self, other: &Tensor, mask: Rc<Vec<u8>>) -> Result<Tensor> {
        self.same_shape(other, "select_rows")?;
        if mask.len() != self.rows() {
            return Err(Error::Shape(format!(
                "select_rows: {} mask entries for {} rows",
                mask.len(),
                self.rows()
            )));
        }
        let c = self.cols();
        let mut data = vec![0.0; self.len()];
        for (r, &m) in mask.iter().enumerate() {
            let src = if m != 0 { self.data() } else { other.data() };
            data[r * c..(r + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
        }
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::new(
            "select_rows",
            self.rows(),
            c,
            data,
            Op::SelectRows(self.clone(), other.clone(), mask),
            rg,
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        Tensor::new("sum_all", 1, 1, vec![s], Op::SumAll(self.clone()), self.requires_grad())
    }

    /// Mean over rows of `weight(label) * (-log softmax(logits)[label])`.
    /// Logits must be [m, 2]; labels index the true class (0 or 1).
    pub fn weighted_cross_entropy(&self, labels: &[u8], class_weights: [f64; 2]) -> Result<Tensor> {
        if self.cols() != 2 {
            return Err(Error::Shape(format!(
                "weighted_cross_entropy expects 2 logit columns, got {}",
                self.cols()
            )));
        }
        if self.rows() == 0 {
            return Err(Error::Empty("weighted_cross_entropy batch"));
        }
        if labels.len() != self.rows() {
            return Err(Error::Shape(format!(
                "weighted_cross_entropy: {} labels for {} rows",
                labels.len(),
                self.rows()
            )));
        }
        if class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument(
                "class weights must be positive".to_string(),
            ));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y > 1 {
                return Err(Error::InvalidArgument(format!("label {y} out of range")));
            }
            let z0 = self.data()[2 * r];
            let z1 = self.data()[2 * r + 1];
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let zy = if y == 0 { z0 } else { z1 };
            total += class_weights[y as usize] * (lse - zy);
        }
        let loss = total / self.rows() as f64;
        Tensor::new(
            "weighted_cross_entropy",
            1,
            1,
            vec![loss],
            Op::WeightedCrossEntropy {
                logits: self.clone(),
                labels: Rc::new(labels.to_vec()),
                class_weights,
            },
            self.requires_grad(),
        )
    }

    fn op_inputs(&self) -> Vec<&Tensor> {
        match &self.inner.op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) => vec![a],
            Op::ScaleOnePlus(a, e) => vec![a, e],
            Op::Tanh(a) | Op::Relu(a) => vec![a],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().collect(),
            Op::GatherRows(a, _) => vec![a],
            Op::SegmentSum(a, _) => vec![a],
            Op::SegmentMean(a, _, _) => vec![a],
            Op::MeanRowsOrdered(a) => vec![a],
            Op::BroadcastRow(a, _) => vec![a],
            Op::SelectRows(a, b, _) => vec![a, b],
            Op::SumAll(a) => vec![a],
            Op::WeightedCrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Reverse-mode gradients of a scalar with respect to every
    /// `requires_grad` tensor reachable from it.
    pub fn backward(&self) -> Result<GradStore> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "backward expects a scalar loss, got {}x{}",
                self.rows(),
                self.cols()
            )));
        }

        // Iterative post-order DFS; branches that do not require gradients
        // are never entered.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                topo.push(node);
                continue;
            }
            if visited.contains_key(&node.id()) || !node.requires_grad() {
                continue;
            }
            visited.insert(node.id(), ());
            stack.push((node.clone(), true));
            for input in node.op_inputs() {
                if input.requires_grad() && !visited.contains_key(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in topo.iter().rev() {
            let Some(grad) = grads.get(&node.id()).cloned() else {
                continue;
            };
            node.accumulate_input_grads(&grad, &mut grads)?;
        }

        Ok(GradStore { grads })
    }

    fn accumulate_input_grads(
        &self,
        grad: &[f64],
        grads: &mut HashMap<u64, Vec<f64>>,
    ) -> Result<()> {
        let mut add_to = |t: &Tensor, contrib: Vec<f64>| {
            if !t.requires_grad() {
                return;
            }
            let slot = grads.entry(t.id()).or_insert_with(|| vec![0.0; t.len()]);
            for (s, c) in slot.iter_mut().zip(&contrib) {
                *s += c;
            }
        };

        match &self.inner.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if a.requires_grad() {
                    add_to(a, mm_bt(grad, b.data(), a.rows(), b.cols(), b.rows()));
                }
                if b.requires_grad() {
                    add_to(b, mm_at(a.data(), grad, a.rows(), a.cols(), self.cols()));
                }
            }
            Op::Add(a, b) => {
                add_to(a, grad.to_vec());
                add_to(b, grad.to_vec());
            }
            Op::AddBias(a, b) => {
                add_to(a, grad.to_vec());
                if b.requires_grad() {
                    let n = b.cols();
                    let mut gb = vec![0.0; n];
                    for row in grad.chunks(n) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    add_to(b, gb);
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    add_to(a, grad.iter().zip(b.data()).map(|(g, v)| g * v).collect());
                }
                if b.requires_grad() {
                    add_to(b, grad.iter().zip(a.data()).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale(a, c) => {
                add_to(a, grad.iter().map(|g| g * c).collect());
            }
            Op::ScaleOnePlus(a, e) => {
                let factor = 1.0 + e.data()[0];
                if a.requires_grad() {
                    add_to(a, grad.iter().map(|g| g * factor).collect());
                }
                if e.requires_grad() {
                    let ge: f64 = grad.iter().zip(a.data()).map(|(g, v)| g * v).sum();
                    add_to(e, vec![ge]);
                }
            }
            Op::Tanh(a) => {
                add_to(
                    a,
                    grad.iter()
                        .zip(self.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                );
            }
            Op::Relu(a) => {
                add_to(
                    a,
                    grad.iter()
                        .zip(a.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::ConcatCols(parts) => {
                let rows = self.rows();
                let total = self.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = p.cols();
                    if p.requires_grad() {
                        let mut gp = vec![0.0; rows * pc];
                        for r in 0..rows {
                            gp[r * pc..(r + 1) * pc].copy_from_slice(
                                &grad[r * total + offset..r * total + offset + pc],
                            );
                        }
                        add_to(p, gp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.len();
                    if p.requires_grad() {
                        add_to(p, grad[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = a.cols();
                let mut ga = vec![0.0; a.len()];
                for (r, &i) in idx.iter().enumerate() {
                    let i = i as usize;
                    for (g, v) in ga[i * c..(i + 1) * c].iter_mut().zip(&grad[r * c..(r + 1) * c]) {
                        *g += v;
                    }
                }
                add_to(a, ga);
            }
            Op::SegmentSum(a, seg) => {
                let c = a.cols();
                let mut ga = vec![0.0; a.len()];
                for (r, &s) in seg.iter().enumerate() {
                    let s = s as usize;
                    ga[r * c..(r + 1) * c].copy_from_slice(&grad[s * c..(s + 1) * c]);
                }
                add_to(a, ga);
            }
            Op::SegmentMean(a, seg, inv) => {
                let c = a.cols();
                let mut ga = vec![0.0; a.len()];
                for (r, &s) in seg.iter().enumerate() {
                    let s = s as usize;
                    let w = inv[s];
                    for (g, v) in ga[r * c..(r + 1) * c].iter_mut().zip(&grad[s * c..(s + 1) * c]) {
                        *g = v * w;
                    }
                }
                add_to(a, ga);
            }
            Op::MeanRowsOrdered(a) => {
                let c = a.cols();
                let inv = 1.0 / a.rows() as f64;
                let mut ga = vec![0.0; a.len()];
                for r in 0..a.rows() {
                    for (g, v) in ga[r * c..(r + 1) * c].iter_mut().zip(grad) {
                        *g = v * inv;
                    }
                }
                add_to(a, ga);
            }
            Op::BroadcastRow(a, m) => {
                let c = a.cols();
                let mut ga = vec![0.0; c];
                for r in 0..*m {
                    for (g, v) in ga.iter_mut().zip(&grad[r * c..(r + 1) * c]) {
                        *g += v;
                    }
                }
                add_to(a, ga);
            }
            Op::SelectRows(a, b, mask) => {
                let c = a.cols();
                if a.requires_grad() {
                    let mut ga = vec![0.0; a.len()];
                    for (r, &m) in mask.iter().enumerate() {
                        if m != 0 {
                            ga[r * c..(r + 1) * c].copy_from_slice(&grad[r * c..(r + 1) * c]);
                        }
                    }
                    add_to(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; b.len()];
                    for (r, &m) in mask.iter().enumerate() {
                        if m == 0 {
                            gb[r * c..(r + 1) * c].copy_from_slice(&grad[r * c..(r + 1) * c]);
                        }
                    }
                    add_to(b, gb);
                }
            }
            Op::SumAll(a) => {
                add_to(a, vec![grad[0]; a.len()]);
            }
            Op::WeightedCrossEntropy { logits, labels, class_weights } => {
                let g = grad[0];
                let m = logits.rows() as f64;
                let mut gl = vec![0.0; logits.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let z0 = logits.data()[2 * r];
                    let z1 = logits.data()[2 * r + 1];
                    let mx = z0.max(z1);
                    let e0 = (z0 - mx).exp();
                    let e1 = (z1 - mx).exp();
                    let denom = e0 + e1;
                    let p0 = e0 / denom;
                    let p1 = e1 / denom;
                    let w = class_weights[y as usize] * g / m;
                    gl[2 * r] = w * (p0 - if y == 0 { 1.0 } else { 0.0 });
                    gl[2 * r + 1] = w * (p1 - if y == 1 { 1.0 } else { 0.0 });
                }
                add_to(logits, gl);
            }
        }
        Ok(())
    }
}

/// Gradients keyed by tensor id, produced by [`Tensor::backward`].
#[derive(Debug)]
pub struct GradStore {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradStore {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn get_by_id(&self, id: u64) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }
}

/// Row-wise softmax of a 2-column logit matrix (no gradient tracking).
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if logits.cols() != 2 {
        return Err(Error::Shape(format!(
            "softmax_rows expects 2 columns, got {}",
            logits.cols()
        )));
    }
    let mut out = Matrix::zeros(logits.rows(), 2);
    for r in 0..logits.rows() {
        let z0 = logits.get(r, 0);
        let z1 = logits.get(r, 1);
        if !z0.is_finite() || !z1.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let m = z0.max(z1);
        let e0 = (z0 - m).exp();
        let e1 = (z1 - m).exp();
        let denom = e0 + e1;
        out.set(r, 0, e0 / denom);
        out.set(r, 1, e1 / denom);
    }
    Ok(out)
}

// Row-major matmul kernels. The i-k-j order keeps the inner loop contiguous.

/// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// C[m,k] = G[m,n] * B[k,n]^T
fn mm_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *cv = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * G[m,n]
fn mm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += aik * gv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::leaf(rows, cols, data, true).unwrap()
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = leaf(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn nan_is_rejected_with_op_name() {
        let a = Tensor::leaf(1, 1, vec![f64::NAN], false);
        assert!(matches!(a.unwrap_err(), Error::NonFinite { op: "leaf" }));
        let big = Tensor::leaf(1, 1, vec![1e308], true).unwrap();
        let err = big.mul(&big).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = leaf(2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let loss = x.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn unreached_parameter_has_no_grad_entry() {
        let x = leaf(1, 2, vec![1.0, 2.0]);
        let unused = leaf(1, 2, vec![3.0, 4.0]);
        let loss = x.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&unused).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = leaf(2, 2, vec![1.0; 4]);
        assert!(x.backward().is_err());
    }

    #[test]
    fn matmul_gradients() {
        // loss = sum(A*B); dA = ones * B^T, dB = A^T * ones
        let a = leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let loss = a.matmul(&b).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(&b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        let x = leaf(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let idx = Rc::new(vec![2u32, 0, 2]);
        let g = x.gather_rows(idx).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        // Row 2 was gathered twice.
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn segment_sum_groups_rows() {
        let x = leaf(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let seg = Rc::new(vec![1u32, 0, 1, 1]);
        let s = x.segment_sum(seg, 3).unwrap();
        assert_eq!(s.data(), &[2.0, 8.0, 0.0]);
    }

    #[test]
    fn segment_mean_handles_empty_segments() {
        let x = leaf(2, 1, vec![4.0, 8.0]);
        let seg = Rc::new(vec![0u32, 0]);
        let m = x.segment_mean(seg, 2).unwrap();
        assert_eq!(m.data(), &[6.0, 0.0]);
        let grads = m.sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn select_rows_routes_gradients() {
        let a = leaf(2, 1, vec![1.0, 2.0]);
        let b = leaf(2, 1, vec![10.0, 20.0]);
        let mask = Rc::new(vec![1u8, 0]);
        let s = a.select_rows(&b, mask).unwrap();
        assert_eq!(s.data(), &[1.0, 20.0]);
        let grads = s.sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(&a).unwrap(), &[1.0, 0.0]);
        assert_eq!(grads.get(&b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_ln2_loss() {
        let logits = Tensor::leaf(3, 2, vec![0.0; 6], true).unwrap();
        let loss = logits.weighted_cross_entropy(&[0, 1, 0], [1.0, 1.0]).unwrap();
        assert!((loss.value().unwrap() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let logits = Tensor::leaf(1, 2, vec![50.0, -50.0], true).unwrap();
        let loss = logits.weighted_cross_entropy(&[0], [1.0, 1.0]).unwrap();
        assert!(loss.value().unwrap() < 1e-12);
    }

    #[test]
    fn weighted_ce_matches_scalar_loop() {
        let data = vec![0.3, -1.2, 2.0, 0.1, -0.7, 0.9, 1.4, 1.4];
        let labels = [1u8, 0, 1, 0];
        let weights = [1.0, 5.0];
        let logits = Tensor::leaf(4, 2, data.clone(), true).unwrap();
        let loss = logits.weighted_cross_entropy(&labels, weights).unwrap();

        let mut expected = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let z = [data[2 * r], data[2 * r + 1]];
            let denom = z[0].exp() + z[1].exp();
            let p = z[y as usize].exp() / denom;
            expected += weights[y as usize] * (-p.ln());
        }
        expected /= labels.len() as f64;
        assert!((loss.value().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let logits = Tensor::leaf(0, 2, vec![], true).unwrap();
        assert!(logits.weighted_cross_entropy(&[], [1.0, 1.0]).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x = leaf(2, 2, vec![0.5, -1.0, 2.0, 0.25]);
        let w = leaf(2, 2, vec![1.0, 2.0, -0.5, 0.75]);
        let y = x.matmul(&w).unwrap();
        let l1 = y.sum_all().unwrap();
        let l2 = y.tanh_act().unwrap().sum_all().unwrap();
        let sum = l1.add(&l2).unwrap();

        let g_sum = sum.backward().unwrap();
        let g1 = l1.backward().unwrap();
        let g2 = l2.backward().unwrap();
        let lhs = g_sum.get(&w).unwrap();
        let a = g1.get(&w).unwrap();
        let b = g2.get(&w).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs[i] - (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Matrix::from_vec(3, 2, vec![2.0, 0.0, -30.0, 40.0, 0.0, 0.0]).unwrap();
        let p = softmax_rows(&logits).unwrap();
        for r in 0..3 {
            let s = p.get(r, 0) + p.get(r, 1);
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.get(r, 0) > 0.0 && p.get(r, 0) < 1.0);
        }
        assert!((p.get(0, 0) - (2.0f64.exp() / (2.0f64.exp() + 1.0))).abs() < 1e-12);
    }
}
