//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Tape`] records a define-by-run graph of array operations; [`Tape::backward`]
//! walks it once in reverse and returns the adjoint of every node reachable from
//! a scalar root. The tape is rebuilt on every forward pass, which is what the
//! adaptive ODE solver needs: the number of recorded steps varies per sample.
//!
//! All arithmetic is f64. Model sizes in this crate are tiny, so clarity and
//! exactness win over throughput everywhere.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFiniteInput { op: &'static str },
    #[error("backward: root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("array: shape {shape:?} implies {expected} elements, got {got}")]
    BadShape {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("gradient_check: function returned non-finite value")]
    NonFiniteFunction,
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
}

/// Dense row-major array of f64 with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NumArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NumArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AdError::BadShape {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(NumArray { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        NumArray {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        NumArray {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        NumArray {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        NumArray::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Queryable NaN/Inf predicate; arrays may hold non-finite values, ops reject them.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Scalar payload of a shape-product-1 array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element of a 2-D array.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rows_cols on rank-{} array", self.shape.len()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// (m x n) + (n,): the row vector is added to every row.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise; one operand may be scalar-shaped and broadcasts.
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    /// Softmax over the last axis, computed with max subtraction.
    Softmax(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Square(NodeId),
    /// Concatenation along axis 0; inputs must agree on trailing dims.
    Concat(Vec<NodeId>),
    /// Rows [start, end) of the input (elements, for rank-1).
    Slice(NodeId, usize, usize),
    /// Entries where the mask is false are replaced by the fill constant;
    /// no gradient flows through filled entries.
    MaskedFill(NodeId, Vec<bool>),
    Reshape(NodeId),
    /// 'Same'-padded 1-D convolution along the last axis.
    /// input (c_in x n), weight (c_out, c_in, k), bias (c_out) -> (c_out x n).
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Average pooling with window 2 along the last axis (n must be even).
    AvgPool2(NodeId),
    /// Nearest-neighbour upsampling by 2 along the last axis.
    Upsample2(NodeId),
}

struct Node {
    op: Op,
    value: NumArray,
}

/// Adjoints produced by a backward pass. Nodes the root does not depend on
/// report a zero array of the node's shape.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<NumArray>>,
    shapes: Vec<Vec<usize>>,
}

impl Adjoints {
    /// Adjoint of `id`, zeros if the root does not depend on it.
    pub fn wrt(&self, id: NodeId) -> NumArray {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => NumArray::zeros(self.shapes[id.0].clone()),
        }
    }

    pub fn is_populated(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

/// Define-by-run tape. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &NumArray {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: NumArray) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, ids: &[NodeId]) -> Result<(), AdError> {
        for id in ids {
            if !self.nodes[id.0].value.is_finite() {
                return Err(AdError::NonFiniteInput { op });
            }
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: NumArray) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("add", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(AdError::ShapeMismatch {
                op: "add",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        Ok(self.push(Op::Add(a, b), NumArray { shape, data }))
    }

    /// (m x n) + row (n): broadcast along rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("add_row", &[a, row])?;
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if va.shape.len() != 2 || vr.shape.len() != 1 || va.shape[1] != vr.shape[0] {
            return Err(AdError::ShapeMismatch {
                op: "add_row",
                lhs: va.shape.clone(),
                rhs: vr.shape.clone(),
            });
        }
        let n = va.shape[1];
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + vr.data[i % n])
            .collect();
        let shape = va.shape.clone();
        Ok(self.push(Op::AddRow(a, row), NumArray { shape, data }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("sub", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(AdError::ShapeMismatch {
                op: "sub",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let shape = va.shape.clone();
        Ok(self.push(Op::Sub(a, b), NumArray { shape, data }))
    }

    /// Elementwise product. Either operand may have shape product 1, in which
    /// case it broadcasts over the other.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("mul", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.len() == 1 {
            let s = va.data[0];
            NumArray {
                shape: vb.shape.clone(),
                data: vb.data.iter().map(|y| s * y).collect(),
            }
        } else if vb.len() == 1 {
            let s = vb.data[0];
            NumArray {
                shape: va.shape.clone(),
                data: va.data.iter().map(|x| x * s).collect(),
            }
        } else if va.shape == vb.shape {
            NumArray {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
            }
        } else {
            return Err(AdError::ShapeMismatch {
                op: "mul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        };
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId, AdError> {
        if !c.is_finite() {
            return Err(AdError::NonFiniteInput { op: "scalar_mul" });
        }
        self.check_finite("scalar_mul", &[a])?;
        let va = &self.nodes[a.0].value;
        let value = NumArray {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| c * x).collect(),
        };
        Ok(self.push(Op::ScalarMul(a, c), value))
    }

    /// (m x k) . (k x n) -> (m x n), or (m x k) . (k,) -> (m,).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("matmul", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || AdError::ShapeMismatch {
            op: "matmul",
            lhs: va.shape.clone(),
            rhs: vb.shape.clone(),
        };
        if va.shape.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (va.shape[0], va.shape[1]);
        let value = match vb.shape.len() {
            2 => {
                if vb.shape[0] != k {
                    return Err(mismatch());
                }
                let n = vb.shape[1];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let x = va.data[i * k + l];
                        if x == 0.0 {
                            continue;
                        }
                        let brow = &vb.data[l * n..(l + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, y) in orow.iter_mut().zip(brow) {
                            *o += x * y;
                        }
                    }
                }
                NumArray {
                    shape: vec![m, n],
                    data: out,
                }
            }
            1 => {
                if vb.shape[0] != k {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += va.data[i * k + l] * vb.data[l];
                    }
                    out[i] = acc;
                }
                NumArray {
                    shape: vec![m],
                    data: out,
                }
            }
            _ => return Err(mismatch()),
        };
        Ok(self.push(Op::Matmul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("transpose", &[a])?;
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 2 {
            return Err(AdError::ShapeMismatch {
                op: "transpose",
                lhs: va.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (va.shape[0], va.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data[i * n + j];
            }
        }
        Ok(self.push(
            Op::Transpose(a),
            NumArray {
                shape: vec![n, m],
                data: out,
            },
        ))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("tanh", &[a])?;
        let va = &self.nodes[a.0].value;
        let value = NumArray {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x.tanh()).collect(),
        };
        Ok(self.push(Op::Tanh(a), value))
    }

    /// Softmax over the last axis. Max subtraction keeps the exponentials in range;
    /// entries at -1e9 (the masked-fill constant) underflow to exactly zero.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("softmax", &[a])?;
        let va = &self.nodes[a.0].value;
        let n = *va.shape.last().ok_or(AdError::EmptyInput { op: "softmax" })?;
        if n == 0 {
            return Err(AdError::EmptyInput { op: "softmax" });
        }
        let mut data = va.data.clone();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                denom += *x;
            }
            for x in row.iter_mut() {
                *x /= denom;
            }
        }
        let shape = va.shape.clone();
        Ok(self.push(Op::Softmax(a), NumArray { shape, data }))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("mean", &[a])?;
        let va = &self.nodes[a.0].value;
        if va.is_empty() {
            return Err(AdError::EmptyInput { op: "mean" });
        }
        let m = va.data.iter().sum::<f64>() / va.len() as f64;
        Ok(self.push(Op::Mean(a), NumArray::scalar(m)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("sum", &[a])?;
        let s = self.nodes[a.0].value.data.iter().sum::<f64>();
        Ok(self.push(Op::Sum(a), NumArray::scalar(s)))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("square", &[a])?;
        let va = &self.nodes[a.0].value;
        let value = NumArray {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x * x).collect(),
        };
        Ok(self.push(Op::Square(a), value))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        if parts.is_empty() {
            return Err(AdError::EmptyInput { op: "concat" });
        }
        self.check_finite("concat", parts)?;
        let first = &self.nodes[parts[0].0].value;
        let trailing: Vec<usize> = first.shape[1..].to_vec();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape.len() != first.shape.len() || v.shape[1..] != trailing[..] {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: v.shape.clone(),
                });
            }
            rows += v.shape[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        Ok(self.push(Op::Concat(parts.to_vec()), NumArray { shape, data }))
    }

    /// Rows [start, end) along axis 0.
    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, AdError> {
        self.check_finite("slice", &[a])?;
        let va = &self.nodes[a.0].value;
        let rows = va.shape[0];
        if start > end || end > rows {
            return Err(AdError::ShapeMismatch {
                op: "slice",
                lhs: va.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let row_len: usize = va.shape[1..].iter().product::<usize>().max(1);
        let mut shape = va.shape.clone();
        shape[0] = end - start;
        let data = va.data[start * row_len..end * row_len].to_vec();
        Ok(self.push(Op::Slice(a, start, end), NumArray { shape, data }))
    }

    /// Entries with `mask[i] == false` become `fill`; gradient is zero there.
    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool], fill: f64) -> Result<NodeId, AdError> {
        if !fill.is_finite() {
            return Err(AdError::NonFiniteInput { op: "masked_fill" });
        }
        self.check_finite("masked_fill", &[a])?;
        let va = &self.nodes[a.0].value;
        if mask.len() != va.len() {
            return Err(AdError::ShapeMismatch {
                op: "masked_fill",
                lhs: va.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let data = va
            .data
            .iter()
            .zip(mask)
            .map(|(x, &keep)| if keep { *x } else { fill })
            .collect();
        let shape = va.shape.clone();
        Ok(self.push(Op::MaskedFill(a, mask.to_vec()), NumArray { shape, data }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, AdError> {
        self.check_finite("reshape", &[a])?;
        let va = &self.nodes[a.0].value;
        let expected: usize = shape.iter().product();
        if expected != va.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: va.shape.clone(),
                rhs: shape,
            });
        }
        let data = va.data.clone();
        Ok(self.push(Op::Reshape(a), NumArray { shape, data }))
    }

    /// 'Same'-padded conv along the last axis with odd kernel width.
    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("conv1d", &[input, weight, bias])?;
        let (vi, vw, vb) = (
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        );
        let bad = || AdError::ShapeMismatch {
            op: "conv1d",
            lhs: vi.shape.clone(),
            rhs: vw.shape.clone(),
        };
        if vi.shape.len() != 2 || vw.shape.len() != 3 || vb.shape.len() != 1 {
            return Err(bad());
        }
        let (c_in, n) = (vi.shape[0], vi.shape[1]);
        let (c_out, w_in, k) = (vw.shape[0], vw.shape[1], vw.shape[2]);
        if w_in != c_in || vb.shape[0] != c_out || k % 2 == 0 {
            return Err(bad());
        }
        let half = (k / 2) as isize;
        let mut out = vec![0.0; c_out * n];
        for co in 0..c_out {
            for i in 0..n {
                let mut acc = vb.data[co];
                for ci in 0..c_in {
                    for t in 0..k {
                        let src = i as isize + t as isize - half;
                        if src >= 0 && (src as usize) < n {
                            acc += vw.data[(co * c_in + ci) * k + t] * vi.data[ci * n + src as usize];
                        }
                    }
                }
                out[co * n + i] = acc;
            }
        }
        Ok(self.push(
            Op::Conv1d { input, weight, bias },
            NumArray {
                shape: vec![c_out, n],
                data: out,
            },
        ))
    }

    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("avg_pool2", &[a])?;
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 2 || va.shape[1] % 2 != 0 {
            return Err(AdError::ShapeMismatch {
                op: "avg_pool2",
                lhs: va.shape.clone(),
                rhs: vec![],
            });
        }
        let (c, n) = (va.shape[0], va.shape[1]);
        let mut out = vec![0.0; c * n / 2];
        for ch in 0..c {
            for i in 0..n / 2 {
                out[ch * n / 2 + i] = 0.5 * (va.data[ch * n + 2 * i] + va.data[ch * n + 2 * i + 1]);
            }
        }
        Ok(self.push(
            Op::AvgPool2(a),
            NumArray {
                shape: vec![c, n / 2],
                data: out,
            },
        ))
    }

    pub fn upsample2(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_finite("upsample2", &[a])?;
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 2 {
            return Err(AdError::ShapeMismatch {
                op: "upsample2",
                lhs: va.shape.clone(),
                rhs: vec![],
            });
        }
        let (c, n) = (va.shape[0], va.shape[1]);
        let mut out = vec![0.0; c * n * 2];
        for ch in 0..c {
            for i in 0..n {
                out[ch * 2 * n + 2 * i] = va.data[ch * n + i];
                out[ch * 2 * n + 2 * i + 1] = va.data[ch * n + i];
            }
        }
        Ok(self.push(
            Op::Upsample2(a),
            NumArray {
                shape: vec![c, n * 2],
                data: out,
            },
        ))
    }

    /// Populate adjoints of every node the scalar `root` depends on.
    /// Values on the tape are untouched; call repeatedly for different roots.
    pub fn backward(&self, root: NodeId) -> Result<Adjoints, AdError> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(AdError::NonScalarRoot {
                shape: root_val.shape.clone(),
            });
        }
        let mut grads: Vec<Option<NumArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(NumArray::scalar(1.0));

        // Reverse topological order is just reverse tape order.
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Adjoints { grads, shapes })
    }

    fn add_grad(grads: &mut [Option<NumArray>], id: NodeId, delta: NumArray) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &NumArray, grads: &mut [Option<NumArray>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                Self::add_grad(grads, *a, g.clone());
                let n = self.nodes[row.0].value.len();
                let mut gr = vec![0.0; n];
                for (i, x) in g.data.iter().enumerate() {
                    gr[i % n] += x;
                }
                Self::add_grad(grads, *row, NumArray::vector(gr));
            }
            Op::Sub(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                let neg = NumArray {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|x| -x).collect(),
                };
                Self::add_grad(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if va.len() == 1 {
                    let da = g.data.iter().zip(&vb.data).map(|(x, y)| x * y).sum();
                    Self::add_grad(grads, *a, NumArray::scalar(da));
                    let s = va.data[0];
                    let db = NumArray {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|x| s * x).collect(),
                    };
                    Self::add_grad(grads, *b, db);
                } else if vb.len() == 1 {
                    let s = vb.data[0];
                    let da = NumArray {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|x| s * x).collect(),
                    };
                    Self::add_grad(grads, *a, da);
                    let db = g.data.iter().zip(&va.data).map(|(x, y)| x * y).sum();
                    Self::add_grad(grads, *b, NumArray::scalar(db));
                } else {
                    let da = NumArray {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
                    };
                    let db = NumArray {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect(),
                    };
                    Self::add_grad(grads, *a, da);
                    Self::add_grad(grads, *b, db);
                }
            }
            Op::ScalarMul(a, c) => {
                let da = NumArray {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|x| c * x).collect(),
                };
                Self::add_grad(grads, *a, da);
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape[0], va.shape[1]);
                // dA = G . B^T, dB = A^T . G, with (k,) treated as (k x 1).
                let (gr, gc) = g.rows_cols();
                let (_, bn) = vb.rows_cols();
                debug_assert_eq!(gr * gc, g.len());
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; vb.len()];
                let n = if vb.shape.len() == 1 { 1 } else { bn };
                // g viewed as (m x n)
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            da[i * k + l] += gij * vb.data[l * n + j];
                            db[l * n + j] += va.data[i * k + l] * gij;
                        }
                    }
                }
                Self::add_grad(
                    grads,
                    *a,
                    NumArray {
                        shape: va.shape.clone(),
                        data: da,
                    },
                );
                Self::add_grad(
                    grads,
                    *b,
                    NumArray {
                        shape: vb.shape.clone(),
                        data: db,
                    },
                );
            }
            Op::Transpose(a) => {
                let va = &self.nodes[a.0].value;
                let (m, n) = (va.shape[0], va.shape[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g.data[i * m + j];
                    }
                }
                Self::add_grad(
                    grads,
                    *a,
                    NumArray {
                        shape: va.shape.clone(),
                        data: da,
                    },
                );
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let da = NumArray {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect(),
                };
                Self::add_grad(grads, *a, da);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let n = *y.shape.last().unwrap();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let ys = &y.data[r * n..(r + 1) * n];
                    let gs = &g.data[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for i in 0..n {
                        da[r * n + i] = ys[i] * (gs[i] - dot);
                    }
                }
                let shape = self.nodes[a.0].value.shape.clone();
                Self::add_grad(grads, *a, NumArray { shape, data: da });
            }
            Op::Mean(a) => {
                let va = &self.nodes[a.0].value;
                let c = g.data[0] / va.len() as f64;
                let da = NumArray {
                    shape: va.shape.clone(),
                    data: vec![c; va.len()],
                };
                Self::add_grad(grads, *a, da);
            }
            Op::Sum(a) => {
                let va = &self.nodes[a.0].value;
                let da = NumArray {
                    shape: va.shape.clone(),
                    data: vec![g.data[0]; va.len()],
                };
                Self::add_grad(grads, *a, da);
            }
            Op::Square(a) => {
                let va = &self.nodes[a.0].value;
                let da = NumArray {
                    shape: va.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&va.data)
                        .map(|(gi, xi)| 2.0 * xi * gi)
                        .collect(),
                };
                Self::add_grad(grads, *a, da);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let vp = &self.nodes[p.0].value;
                    let len = vp.len();
                    let da = NumArray {
                        shape: vp.shape.clone(),
                        data: g.data[offset..offset + len].to_vec(),
                    };
                    Self::add_grad(grads, *p, da);
                    offset += len;
                }
            }
            Op::Slice(a, start, _end) => {
                let va = &self.nodes[a.0].value;
                let row_len: usize = va.shape[1..].iter().product::<usize>().max(1);
                let mut da = vec![0.0; va.len()];
                da[start * row_len..start * row_len + g.len()].copy_from_slice(&g.data);
                Self::add_grad(
                    grads,
                    *a,
                    NumArray {
                        shape: va.shape.clone(),
                        data: da,
                    },
                );
            }
            Op::MaskedFill(a, mask) => {
                let da = NumArray {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(mask)
                        .map(|(x, &keep)| if keep { *x } else { 0.0 })
                        .collect(),
                };
                let shape = self.nodes[a.0].value.shape.clone();
                Self::add_grad(
                    grads,
                    *a,
                    NumArray {
                        shape,
                        data: da.data,
                    },
                );
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape.clone();
                Self::add_grad(
                    grads,
                    *a,
                    NumArray {
                        shape,
                        data: g.data.clone(),
                    },
                );
            }
            Op::Conv1d { input, weight, bias } => {
                let (vi, vw) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
                let (c_in, n) = (vi.shape[0], vi.shape[1]);
                let (c_out, _, k) = (vw.shape[0], vw.shape[1], vw.shape[2]);
                let half = (k / 2) as isize;
                let mut di = vec![0.0; vi.len()];
                let mut dw = vec![0.0; vw.len()];
                let mut db = vec![0.0; c_out];
                for co in 0..c_out {
                    for i in 0..n {
                        let go = g.data[co * n + i];
                        if go == 0.0 {
                            continue;
                        }
                        db[co] += go;
                        for ci in 0..c_in {
                            for t in 0..k {
                                let src = i as isize + t as isize - half;
                                if src >= 0 && (src as usize) < n {
                                    let w_idx = (co * c_in + ci) * k + t;
                                    let x_idx = ci * n + src as usize;
                                    dw[w_idx] += go * vi.data[x_idx];
                                    di[x_idx] += go * vw.data[w_idx];
                                }
                            }
                        }
                    }
                }
                Self::add_grad(
                    grads,
                    *input,
                    NumArray {
                        shape: vi.shape.clone(),
                        data: di,
                    },
                );
                Self::add_grad(
                    grads,
                    *weight,
                    NumArray {
                        shape: vw.shape.clone(),
                        data: dw,
                    },
                );
                Self::add_grad(grads, *bias, NumArray::vector(db));
            }
            Op::AvgPool2(a) => {
                let va = &self.nodes[a.0].value;
                let (c, n) = (va.shape[0], va.shape[1]);
                let mut da = vec![0.0; va.len()];
                for ch in 0..c {
                    for i in 0..n / 2 {
                        let go = 0.5 * g.data[ch * n / 2 + i];
                        da[ch * n + 2 * i] += go;
                        da[ch * n + 2 * i + 1] += go;
                    }
                }
                Self::add_grad(
                    grads,
                    *a,
                    NumArray {
                        shape: va.shape.clone(),
                        data: da,
                    },
                );
            }
            Op::Upsample2(a) => {
                let va = &self.nodes[a.0].value;
                let (c, n) = (va.shape[0], va.shape[1]);
                let mut da = vec![0.0; va.len()];
                for ch in 0..c {
                    for i in 0..n {
                        da[ch * n + i] = g.data[ch * 2 * n + 2 * i] + g.data[ch * 2 * n + 2 * i + 1];
                    }
                }
                Self::add_grad(
                    grads,
                    *a,
                    NumArray {
                        shape: va.shape.clone(),
                        data: da,
                    },
                );
            }
        }
    }
}

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its entries)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Check reverse-mode gradients of a scalar function against central finite
/// differences. `eval` must return the function value; `grad` must return the
/// reverse-mode gradient for each named parameter, aligned with `params`.
///
/// Relative error uses a floor of 1e-6 in the denominator so near-zero
/// gradients are compared on an absolute scale that finite differences can
/// actually resolve.
pub fn gradient_check<E, G>(
    eval: E,
    grad: G,
    params: &[(String, NumArray)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, AdError>
where
    E: Fn(&[(String, NumArray)]) -> Result<f64, AdError>,
    G: Fn(&[(String, NumArray)]) -> Result<Vec<NumArray>, AdError>,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "eps {eps} outside supported range"
    );
    let analytic = grad(params)?;
    let mut work: Vec<(String, NumArray)> = params.to_vec();
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    for (pi, (name, arr)) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..arr.len() {
            let orig = arr.data()[i];
            work[pi].1.data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[pi].1.data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[pi].1.data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(AdError::NonFiniteFunction);
            }
            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic[pi].data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((an - fd).abs() / denom);
        }
        max_rel = max_rel.max(worst);
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        pass: max_rel <= tol,
    })
}
