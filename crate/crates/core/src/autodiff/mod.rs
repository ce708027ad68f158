//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records one forward computation as a topologically ordered
//! node list; [`Tape::backward`] walks it once in reverse, accumulating
//! gradients into every node on a `requires_grad` path. [`Tensor`] is the
//! plain value type used for parameters and inputs outside the tape; a
//! tape node holds its value, its recording, and (after backward) its
//! gradient. Tensor values are immutable once recorded; recording and
//! backward are single-threaded per tape, so independent tapes may run
//! concurrently.
//!
//! The op set is exactly what the registration model and its losses need:
//! no general broadcasting, no higher-order derivatives.

mod adam;

pub use adam::{AdamConfig, AdamState};

use crate::error::Error;
use crate::kernels;
use crate::scalar::Scalar;
use crate::Result;

/// Dense value: a shape and row-major data. Construction validates that
/// the shape product matches the data length and that every value is
/// finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a rank-2 tensor (or 1 for rank-1).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape (creation order).
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        // (mean, inv_std) per row, cached at forward time
        stats: Vec<(T, T)>,
    },
    Matmul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        alpha: T,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    ReduceSum(Var),
    ReduceMean(Var),
    SoftmaxRows(Var),
    SqdistMatrix(Var, Var),
    MinRows { x: Var, argmin: Vec<usize> },
    MinCols { x: Var, argmin: Vec<usize> },
    GatherRows { x: Var, indices: Vec<usize> },
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recorded computation graph. Nodes are appended in execution order, so
/// every input index precedes its consumer and one reverse sweep visits
/// each node exactly once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, or zeros when `v` did not participate in the
    /// backward pass.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.nodes[v.0].data.len()],
        }
    }

    // ── leaves ────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, requires_grad)
    }

    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, data: &[T], requires_grad: bool) -> Var {
        assert_eq!(data.len(), rows * cols);
        self.push(data.to_vec(), vec![rows, cols], Op::Leaf, requires_grad)
    }

    // ── elementwise and shape ops ─────────────────────────────────────

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Scale(x, c), ng)
    }

    /// x[n x d] + bias[d], bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "add_row_bias lhs")?;
        if self.nodes[bias.0].shape != [d] {
            return Err(Error::Dimension(format!(
                "add_row_bias: bias {:?} does not match width {d}",
                self.nodes[bias.0].shape
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for row in data.chunks_exact_mut(d) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(data, vec![n, d], Op::AddRowBias(x, bias), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Relu(x), ng)
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "layer_norm input")?;
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: affine params must have shape [{d}]"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut data = vec![T::zero(); n * d];
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v - mean;
                    c * c
                })
                .sum::<T>()
                * inv_d;
            let inv_std = (var + eps).sqrt().recip();
            stats.push((mean, inv_std));
            let out = &mut data[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(data, vec![n, d], Op::LayerNorm { x, gamma, beta, stats }, ng))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what}: expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── matrix products ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, false, b, false, T::one())
    }

    /// alpha * op(a) * op(b); `trans_*` treats the operand's buffer as the
    /// transpose of the logical factor (no copy is made).
    pub fn matmul_ext(
        &mut self,
        a: Var,
        trans_a: bool,
        b: Var,
        trans_b: bool,
        alpha: T,
    ) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul lhs")?;
        let (br, bc) = self.matrix_dims(b, "matmul rhs")?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions {k} vs {kb} (lhs {ar}x{ac}{}, rhs {br}x{bc}{})",
                if trans_a { "^T" } else { "" },
                if trans_b { "^T" } else { "" },
            )));
        }
        let mut data = vec![T::zero(); m * n];
        kernels::matmul_into(
            trans_a,
            trans_b,
            m,
            k,
            n,
            alpha,
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            T::zero(),
            &mut data,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            data,
            vec![m, n],
            Op::Matmul { a, b, trans_a, trans_b, alpha, m, k, n },
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "transpose")?;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = xd[i * m + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![m, n], Op::Transpose(x), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols: no parts".into()));
        }
        let (n, _) = self.matrix_dims(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (pn, pc) = self.matrix_dims(p, "concat_cols part")?;
            if pn != n {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts differ ({pn} vs {n})"
                )));
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = vec![T::zero(); n * total];
        let mut off = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = &self.nodes[p.0].data;
            for i in 0..n {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            data,
            vec![n, total],
            Op::ConcatCols { parts: parts.to_vec(), widths },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "slice_cols")?;
        if start + len > d {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {}) out of width {d}",
                start + len
            )));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len].copy_from_slice(&xd[i * d + start..i * d + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![n, len], Op::SliceCols { x, start, len }, ng))
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].data.iter().copied().sum();
        let ng = self.needs(x);
        self.push(vec![s], vec![1], Op::ReduceSum(x), ng)
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let s: T = self.nodes[x.0].data.iter().copied().sum();
        let ng = self.needs(x);
        self.push(
            vec![s * T::from_f64(1.0 / n as f64)],
            vec![1],
            Op::ReduceMean(x),
            ng,
        )
    }

    // ── softmax family ────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax of `logits` with each column reweighted by a
    /// strictly positive constant: out_ij = exp(x_ij) w_j / sum_t exp(x_it) w_t.
    /// Computed with row-max subtraction. The weights receive no gradient.
    pub fn weighted_softmax(&mut self, logits: Var, weights: &[T]) -> Result<Var> {
        let (_, m) = self.matrix_dims(logits, "weighted_softmax logits")?;
        if weights.len() != m {
            return Err(Error::Dimension(format!(
                "weighted_softmax: {} weights for {m} columns",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= T::zero()) {
            return Err(Error::Domain(
                "weighted_softmax: weights must be strictly positive and finite".into(),
            ));
        }
        self.softmax_impl(logits, Some(weights))
    }

    fn softmax_impl(&mut self, x: Var, weights: Option<&[T]>) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "softmax input")?;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = &mut data[i * m..(i + 1) * m];
            let mut denom = T::zero();
            match weights {
                Some(w) => {
                    for j in 0..m {
                        let e = (row[j] - max).exp() * w[j];
                        out[j] = e;
                        denom = denom + e;
                    }
                }
                None => {
                    for j in 0..m {
                        let e = (row[j] - max).exp();
                        out[j] = e;
                        denom = denom + e;
                    }
                }
            }
            let inv = denom.recip();
            for v in out.iter_mut() {
                *v = *v * inv;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![n, m], Op::SoftmaxRows(x), ng))
    }

    // ── point-set ops ─────────────────────────────────────────────────

    /// Matrix of squared Euclidean distances between two n x 3 / m x 3
    /// coordinate tensors; differentiable in both.
    pub fn sqdist_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da) = self.matrix_dims(a, "sqdist_matrix lhs")?;
        let (m, db) = self.matrix_dims(b, "sqdist_matrix rhs")?;
        if da != 3 || db != 3 {
            return Err(Error::Dimension(format!(
                "sqdist_matrix: expected 3 columns, got {da} and {db}"
            )));
        }
        let mut data = vec![T::zero(); n * m];
        kernels::sqdist_matrix_into(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![n, m], Op::SqdistMatrix(a, b), ng))
    }

    /// Row-wise minimum with hard (argmin) gradient routing; ties keep the
    /// lowest index.
    pub fn min_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "min_rows")?;
        if m == 0 {
            return Err(Error::Dimension("min_rows: empty rows".into()));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(n);
        let mut argmin = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mut best = row[0];
            let mut arg = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < best {
                    best = v;
                    arg = j;
                }
            }
            data.push(best);
            argmin.push(arg);
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![n], Op::MinRows { x, argmin }, ng))
    }

    pub fn min_cols(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "min_cols")?;
        if n == 0 {
            return Err(Error::Dimension("min_cols: empty columns".into()));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = xd[0..m].to_vec();
        let mut argmin = vec![0usize; m];
        for i in 1..n {
            for j in 0..m {
                let v = xd[i * m + j];
                if v < data[j] {
                    data[j] = v;
                    argmin[j] = i;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![m], Op::MinCols { x, argmin }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather_rows: index {bad} out of {n} rows"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            data,
            vec![indices.len(), d],
            Op::GatherRows { x, indices: indices.to_vec() },
            ng,
        ))
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// node on a path from a `requires_grad` leaf to the root; untouched
    /// nodes keep no gradient (read back as zeros).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.data.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward: root must be scalar, got shape {:?}",
                root_node.shape
            )));
        }
        if !root_node.data[0].is_finite() {
            return Err(Error::NonFinite("backward root value".into()));
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(before, *a, |dst| add_assign(dst, g));
                    accumulate(before, *b, |dst| add_assign(dst, g));
                }
                Op::Sub(a, b) => {
                    accumulate(before, *a, |dst| add_assign(dst, g));
                    accumulate(before, *b, |dst| sub_assign(dst, g));
                }
                Op::Mul(a, b) => {
                    // a and b may alias; accumulate one side at a time so
                    // the x*x square case picks up both contributions.
                    let bd = before[b.0].data.clone();
                    accumulate(before, *a, |dst| {
                        for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(&bd) {
                            *d = *d + gv * bv;
                        }
                    });
                    let ad = before[a.0].data.clone();
                    accumulate(before, *b, |dst| {
                        for ((d, &gv), &av) in dst.iter_mut().zip(g).zip(&ad) {
                            *d = *d + gv * av;
                        }
                    });
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(before, *x, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d = *d + gv * c;
                        }
                    });
                }
                Op::AddRowBias(x, bias) => {
                    accumulate(before, *x, |dst| add_assign(dst, g));
                    let d = before[bias.0].data.len();
                    accumulate(before, *bias, |dst| {
                        for row in g.chunks_exact(d) {
                            for (dv, &gv) in dst.iter_mut().zip(row) {
                                *dv = *dv + gv;
                            }
                        }
                    });
                }
                Op::Relu(x) => {
                    let xd = &before[x.0].data;
                    let mask: Vec<T> = xd
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(before, *x, |dst| add_assign(dst, &mask));
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let d = before[gamma.0].data.len();
                    let n = stats.len();
                    let xd = before[x.0].data.clone();
                    let gd = before[gamma.0].data.clone();
                    let inv_d = T::from_f64(1.0 / d as f64);

                    let mut dx = vec![T::zero(); n * d];
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    for i in 0..n {
                        let (mean, inv_std) = stats[i];
                        let xr = &xd[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * inv_std;
                            let dxhat = gr[j] * gd[j];
                            dgamma[j] = dgamma[j] + gr[j] * xhat;
                            dbeta[j] = dbeta[j] + gr[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        let out = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * inv_std;
                            let dxhat = gr[j] * gd[j];
                            out[j] =
                                inv_std * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                    accumulate(before, *x, |dst| add_assign(dst, &dx));
                    accumulate(before, *gamma, |dst| add_assign(dst, &dgamma));
                    accumulate(before, *beta, |dst| add_assign(dst, &dbeta));
                }
                Op::Matmul { a, b, trans_a, trans_b, alpha, m, k, n } => {
                    let (a, b, trans_a, trans_b, alpha, m, k, n) =
                        (*a, *b, *trans_a, *trans_b, *alpha, *m, *k, *n);
                    if before[a.0].needs_grad {
                        let bd = before[b.0].data.clone();
                        accumulate(before, a, |dst| {
                            // d op(A) = alpha * g * op(B)^T, mapped back to
                            // the buffer layout of A.
                            if !trans_a {
                                kernels::matmul_into(
                                    false, !trans_b, m, n, k, alpha, g, &bd, T::one(), dst,
                                );
                            } else {
                                kernels::matmul_into(
                                    trans_b, true, k, n, m, alpha, &bd, g, T::one(), dst,
                                );
                            }
                        });
                    }
                    if before[b.0].needs_grad {
                        let ad = before[a.0].data.clone();
                        accumulate(before, b, |dst| {
                            if !trans_b {
                                kernels::matmul_into(
                                    !trans_a, false, k, m, n, alpha, &ad, g, T::one(), dst,
                                );
                            } else {
                                kernels::matmul_into(
                                    true, trans_a, n, m, k, alpha, g, &ad, T::one(), dst,
                                );
                            }
                        });
                    }
                }
                Op::Transpose(x) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let mut gt = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            gt[j * m + i] = g[i * n + j];
                        }
                    }
                    accumulate(before, *x, |dst| add_assign(dst, &gt));
                }
                Op::ConcatCols { parts, widths } => {
                    let n = node.shape[0];
                    let total = node.shape[1];
                    let mut off = 0usize;
                    for (&p, &w) in parts.iter().zip(widths) {
                        let mut gp = vec![T::zero(); n * w];
                        for i in 0..n {
                            gp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        accumulate(before, p, |dst| add_assign(dst, &gp));
                        off += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (start, len) = (*start, *len);
                    let n = node.shape[0];
                    let d = before[x.0].shape[1];
                    accumulate(before, *x, |dst| {
                        for i in 0..n {
                            for j in 0..len {
                                dst[i * d + start + j] = dst[i * d + start + j] + g[i * len + j];
                            }
                        }
                    });
                }
                Op::ReduceSum(x) => {
                    let gv = g[0];
                    accumulate(before, *x, |dst| {
                        for d in dst.iter_mut() {
                            *d = *d + gv;
                        }
                    });
                }
                Op::ReduceMean(x) => {
                    let count = before[x.0].data.len();
                    let gv = g[0] * T::from_f64(1.0 / count as f64);
                    accumulate(before, *x, |dst| {
                        for d in dst.iter_mut() {
                            *d = *d + gv;
                        }
                    });
                }
                Op::SoftmaxRows(x) => {
                    // ds = s * (g - <g, s>_row); the column weights cancel.
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let s = &node.data;
                    let mut dx = vec![T::zero(); n * m];
                    for i in 0..n {
                        let sr = &s[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let dot: T = sr.iter().zip(gr).map(|(&sv, &gv)| sv * gv).sum();
                        let out = &mut dx[i * m..(i + 1) * m];
                        for j in 0..m {
                            out[j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(before, *x, |dst| add_assign(dst, &dx));
                }
                Op::SqdistMatrix(a, b) => {
                    let (a, b) = (*a, *b);
                    let n = node.shape[0];
                    let m = node.shape[1];
                    let ad = before[a.0].data.clone();
                    let bd = before[b.0].data.clone();
                    let two = T::from_f64(2.0);
                    if before[a.0].needs_grad {
                        // dA_i = 2 * (rowsum_i(g) * a_i - (g B)_i)
                        let mut gb = vec![T::zero(); n * 3];
                        kernels::matmul_into(false, false, n, m, 3, T::one(), g, &bd, T::zero(), &mut gb);
                        accumulate(before, a, |dst| {
                            for i in 0..n {
                                let rs: T = g[i * m..(i + 1) * m].iter().copied().sum();
                                for c in 0..3 {
                                    dst[i * 3 + c] =
                                        dst[i * 3 + c] + two * (rs * ad[i * 3 + c] - gb[i * 3 + c]);
                                }
                            }
                        });
                    }
                    if before[b.0].needs_grad {
                        // dB_j = 2 * (colsum_j(g) * b_j - (g^T A)_j)
                        let mut ga = vec![T::zero(); m * 3];
                        kernels::matmul_into(true, false, m, n, 3, T::one(), g, &ad, T::zero(), &mut ga);
                        let mut colsum = vec![T::zero(); m];
                        for i in 0..n {
                            for j in 0..m {
                                colsum[j] = colsum[j] + g[i * m + j];
                            }
                        }
                        accumulate(before, b, |dst| {
                            for j in 0..m {
                                for c in 0..3 {
                                    dst[j * 3 + c] = dst[j * 3 + c]
                                        + two * (colsum[j] * bd[j * 3 + c] - ga[j * 3 + c]);
                                }
                            }
                        });
                    }
                }
                Op::MinRows { x, argmin } => {
                    let m = before[x.0].shape[1];
                    let argmin = argmin.clone();
                    accumulate(before, *x, |dst| {
                        for (i, &j) in argmin.iter().enumerate() {
                            dst[i * m + j] = dst[i * m + j] + g[i];
                        }
                    });
                }
                Op::MinCols { x, argmin } => {
                    let m = before[x.0].shape[1];
                    let argmin = argmin.clone();
                    accumulate(before, *x, |dst| {
                        for (j, &i) in argmin.iter().enumerate() {
                            dst[i * m + j] = dst[i * m + j] + g[j];
                        }
                    });
                }
                Op::GatherRows { x, indices } => {
                    let d = before[x.0].shape[1];
                    let indices = indices.clone();
                    accumulate(before, *x, |dst| {
                        for (t, &i) in indices.iter().enumerate() {
                            for j in 0..d {
                                dst[i * d + j] = dst[i * d + j] + g[t * d + j];
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn sub_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d - s;
    }
}

/// Run `f` on the gradient buffer of `v`, allocating it lazily; no-op when
/// the node does not require gradients.
fn accumulate<T: Scalar>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    let node = &mut nodes[v.0];
    if !node.needs_grad {
        return;
    }
    let len = node.data.len();
    let grad = node.grad.get_or_insert_with(|| vec![T::zero(); len]);
    f(grad);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0f64; 4]).is_ok());
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0f64, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.leaf_matrix(2, 2, &[1.0, 0.0, 0.0, 1.0], false);
        let m = tape.leaf_matrix(2, 2, &[5.0, -1.0, 2.5, 3.0], false);
        let c = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(c), tape.value(m));

        let a = tape.leaf_matrix(2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let b = tape.leaf_matrix(2, 1, &[1.0, 1.0], false);
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf_matrix(2, 3, &[0.0; 6], false);
        let b = tape.leaf_matrix(2, 2, &[0.0; 4], false);
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradients_match_analytic() {
        // C = A B, loss = sum(C): dA = 1 * B^T summed => each dA_ij = sum_j B[j, :]
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf_matrix(2, 2, &[1.0, 2.0, 3.0, 4.0], true);
        let b = tape.leaf_matrix(2, 2, &[5.0, 6.0, 7.0, 8.0], true);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.reduce_sum(c);
        tape.backward(loss).unwrap();
        // dA = ones(2,2) * B^T
        assert_eq!(tape.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        // dB = A^T * ones(2,2)
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(1, 2, &[-1.0, 2.0], false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn weighted_softmax_direct_substitution() {
        // logits [0, 0], weights [2, 1] -> [2/3, 1/3]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(1, 2, &[0.0, 0.0], false);
        let s = tape.weighted_softmax(x, &[2.0, 1.0]).unwrap();
        let v = tape.value(s);
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_softmax_uniform_equals_plain() {
        let mut tape = Tape::<f64>::new();
        let logits = [0.3, -1.2, 2.0, 0.0, 0.5, -0.5];
        let x = tape.leaf_matrix(2, 3, &logits, false);
        let plain = tape.softmax_rows(x).unwrap();
        let weighted = tape.weighted_softmax(x, &[0.7, 0.7, 0.7]).unwrap();
        for (&p, &w) in tape.value(plain).iter().zip(tape.value(weighted)) {
            assert!((p - w).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_softmax_scale_invariant_in_weights() {
        let mut tape = Tape::<f64>::new();
        let logits = [1.0, 2.0, -0.5];
        let x = tape.leaf_matrix(1, 3, &logits, false);
        let w1 = tape.weighted_softmax(x, &[0.5, 1.0, 0.25]).unwrap();
        let w2 = tape.weighted_softmax(x, &[0.5 * 7.3, 7.3, 0.25 * 7.3]).unwrap();
        for (&a, &b) in tape.value(w1).iter().zip(tape.value(w2)) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn weighted_softmax_rejects_non_positive_weights() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(1, 2, &[0.0, 0.0], false);
        assert!(matches!(
            tape.weighted_softmax(x, &[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            tape.weighted_softmax(x, &[-1.0, 1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(2, 4, &[10.0, -3.0, 0.2, 5.0, 100.0, 100.0, 100.0, 100.0], false);
        let s = tape.weighted_softmax(x, &[0.1, 0.9, 0.4, 0.6]).unwrap();
        for row in tape.value(s).chunks_exact(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sqdist_matrix_zero_diagonal() {
        let mut tape = Tape::<f64>::new();
        let pts = [0.1, 0.2, 0.3, -0.5, 0.0, 1.0];
        let a = tape.leaf_matrix(2, 3, &pts, false);
        let d = tape.sqdist_matrix(a, a).unwrap();
        let v = tape.value(d);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[1] - v[2]).abs() < 1e-15);
    }

    #[test]
    fn min_rows_ties_pick_lowest_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(1, 3, &[2.0, 1.0, 1.0], true);
        let m = tape.min_rows(x).unwrap();
        assert_eq!(tape.value(m), &[1.0]);
        let s = tape.reduce_sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_participating_leaf_has_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(1, 2, &[1.0, 2.0], true);
        let unused = tape.leaf_matrix(1, 2, &[3.0, 4.0], true);
        let y = tape.reduce_sum(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_or_zeros(unused), vec![0.0, 0.0]);
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn diamond_graph_sums_path_gradients() {
        // y = sum(x + x.scale(2)) => dy/dx = 3 per element
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(1, 2, &[1.0, -1.0], true);
        let p1 = tape.scale(x, 2.0);
        let p2 = tape.add(x, p1).unwrap();
        let y = tape.reduce_sum(p2);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(1, 2, &[1.0, 2.0], true);
        assert!(matches!(tape.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_rejects_non_finite_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(1, 1, &[1e308], true);
        let sq = tape.mul(x, x).unwrap(); // overflows to inf
        let s = tape.reduce_sum(sq);
        assert!(matches!(tape.backward(s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gather_and_concat_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_matrix(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let picked = tape.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(picked), &[5.0, 6.0, 1.0, 2.0]);
        let a = tape.slice_cols(x, 0, 1).unwrap();
        let b = tape.slice_cols(x, 1, 1).unwrap();
        let back = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }
}
