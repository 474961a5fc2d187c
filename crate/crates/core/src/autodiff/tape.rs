use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::sparse::Neighborhoods;
use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Threshold below which a norm is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, S),
    LeakyRelu(usize, S),
    Relu(usize),
    NegLogSigmoid(usize),
    Sqrt(usize),
    Sum(usize),
    SumSquares(usize),
    GatherRows(usize, Arc<[usize]>),
    RowDot(usize, usize),
    RowMax(usize, Vec<usize>),
    RowMean(usize),
    NormalizeRows(usize, Vec<S>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SegmentSoftmax(usize, Arc<Neighborhoods>),
    SegmentCenter(usize, Arc<Neighborhoods>),
    Aggregate(usize, usize, Arc<Neighborhoods>),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    trainable: bool,
}

/// Append-only record of tensor operations supporting one reverse sweep.
///
/// Nodes are pushed in evaluation order, so every node's parents precede it.
/// Values are computed eagerly; [`Tape::backward`] walks the list in reverse.
#[derive(Debug)]
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
    swept: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Allow another backward sweep over the recorded nodes.
    pub fn reset(&mut self) {
        self.swept = false;
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Value of `v`. Panics if `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {} is not attached to tape {}",
                v.index, self.id
            )));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor<S> {
        &self.nodes[i].value
    }

    fn matrix_dims(&self, i: usize, what: &str) -> Result<(usize, usize)> {
        match self.val(i).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (r, k) = self.matrix_dims(ia, "matmul")?;
        let (k2, c) = self.matrix_dims(ib, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: [{r}, {k}] x [{k2}, {c}] inner extents disagree"
            )));
        }
        let out = matmul_raw(self.val(ia).data(), self.val(ib).data(), r, k, c);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMul(ia, ib), false))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.matrix_dims(ia, "transpose")?;
        let out = transpose_raw(self.val(ia).data(), r, c);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(ia), false))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let t = Tensor::new(shape.to_vec(), self.val(ia).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(ia), false))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<(usize, usize, Tensor<S>)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, what)?;
        let (ta, tb) = (self.val(ia), self.val(ib));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(ta.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(ia, ib), false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(ia, ib), false))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(ia, ib), false))
    }

    /// Sum of a list of same-shaped values.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Shape("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `a[r, :] + bias` for every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (r, c) = self.matrix_dims(ia, "add_row")?;
        if self.val(ib).shape() != [c] {
            return Err(Error::Shape(format!(
                "add_row: bias shape {:?} does not match row width {c}",
                self.val(ib).shape()
            )));
        }
        let b = self.val(ib).data();
        let mut data = self.val(ia).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(ia, ib), false))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|x| x * factor);
        Ok(self.push(t, Op::Scale(ia, factor), false))
    }

    /// `max(x, slope * x)` elementwise. The derivative at 0 uses `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|x| if x > S::zero() { x } else { x * slope });
        Ok(self.push(t, Op::LeakyRelu(ia, slope), false))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|x| if x > S::zero() { x } else { S::zero() });
        Ok(self.push(t, Op::Relu(ia), false))
    }

    /// `-ln(sigmoid(x))` elementwise, evaluated without overflow.
    pub fn neg_log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(neg_log_sigmoid);
        Ok(self.push(t, Op::NegLogSigmoid(ia), false))
    }

    /// Square root of a non-negative scalar. The gradient is zero when the
    /// result does not exceed [`NORM_EPS`].
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if let Some(bad) = self.val(ia).data().iter().find(|&&x| x < S::zero()) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        let t = self.val(ia).map(|x| x.sqrt());
        Ok(self.push(t, Op::Sqrt(ia), false))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: S = self.val(ia).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), false))
    }

    /// Sum of squared entries, as a rank-0 tensor.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: S = self.val(ia).data().iter().map(|&x| x * x).sum();
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(ia), false))
    }

    /// Inner product of two same-shaped tensors, as a rank-0 tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    /// Select rows (or vector entries) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let ia = self.check(a)?;
        let src = self.val(ia);
        let (rows, width) = src.row_layout();
        if src.rank() == 0 {
            return Err(Error::Shape("gather_rows on a scalar".into()));
        }
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return Err(Error::Shape(format!("gather_rows: row {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(index.len() * width);
        for &r in index.iter() {
            data.extend_from_slice(src.row(r));
        }
        let shape = if src.rank() == 1 {
            vec![index.len()]
        } else {
            vec![index.len(), width]
        };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::GatherRows(ia, index), false))
    }

    /// Contiguous row range `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let index: Arc<[usize]> = (start..end).collect();
        self.gather_rows(a, index)
    }

    /// Per-row inner product of two `[r, c]` matrices, giving `[r]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "row_dot")?;
        let (r, _) = self.matrix_dims(ia, "row_dot")?;
        let (ta, tb) = (self.val(ia), self.val(ib));
        let data = (0..r)
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(&x, &y)| x * y).sum())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::RowDot(ia, ib), false))
    }

    /// Per-row maximum of a `[r, c]` matrix (c ≥ 1). Ties go to the first column.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.matrix_dims(ia, "row_max")?;
        if c == 0 {
            return Err(Error::Shape("row_max over zero columns".into()));
        }
        let t = self.val(ia);
        let mut arg = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        Ok(self.push(Tensor::vector(data), Op::RowMax(ia, arg), false))
    }

    /// Per-row mean of a `[r, c]` matrix (c ≥ 1).
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.matrix_dims(ia, "row_mean")?;
        if c == 0 {
            return Err(Error::Shape("row_mean over zero columns".into()));
        }
        let t = self.val(ia);
        let n = S::of_usize(c);
        let data = (0..r).map(|i| t.row(i).iter().copied().sum::<S>() / n).collect();
        Ok(self.push(Tensor::vector(data), Op::RowMean(ia), false))
    }

    /// Scale each row of a matrix to unit Euclidean norm; rows whose norm is
    /// at most [`NORM_EPS`] pass through unchanged.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.matrix_dims(ia, "normalize_rows")?;
        let t = self.val(ia);
        let eps = S::of(NORM_EPS);
        let mut norms = Vec::with_capacity(r);
        let mut data = t.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let n = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            if n > eps {
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
            norms.push(n);
        }
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::NormalizeRows(ia, norms), false))
    }

    /// Unit-normalize a vector; a vector with norm at most [`NORM_EPS`] is returned as is.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.val(ia).shape().to_vec();
        let n = self.val(ia).len();
        let m = self.reshape(a, &[1, n])?;
        let y = self.normalize_rows(m)?;
        self.reshape(y, &shape)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of an empty list".into()))?;
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = self.matrix_dims(i, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape(format!("concat_cols: row counts {rows} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(idx), false))
    }

    /// Vertical concatenation of vectors, or of matrices with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of an empty list".into()))?;
        let rank = self.val(first).rank();
        let width = self.val(first).cols();
        if rank == 0 {
            return Err(Error::Shape("concat_rows on scalars".into()));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let t = self.val(i);
            if t.rank() != rank || t.cols() != width {
                return Err(Error::Shape(format!(
                    "concat_rows: shape {:?} incompatible with {:?}",
                    t.shape(),
                    self.val(first).shape()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let shape = if rank == 1 { vec![rows] } else { vec![rows, width] };
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(idx), false))
    }

    fn check_segments(&self, ia: usize, seg: &Neighborhoods, what: &str) -> Result<()> {
        let t = self.val(ia);
        if t.rank() != 1 {
            return Err(Error::Shape(format!("{what} expects a vector, got {:?}", t.shape())));
        }
        if !seg.partitions(t.len()) {
            return Err(Error::Shape(format!(
                "{what}: segments do not partition {} entries",
                t.len()
            )));
        }
        Ok(())
    }

    /// Softmax within each segment of a vector, with max subtraction.
    pub fn segment_softmax(&mut self, a: Var, segments: Arc<Neighborhoods>) -> Result<Var> {
        let ia = self.check(a)?;
        self.check_segments(ia, &segments, "segment_softmax")?;
        let x = self.val(ia).data();
        let mut out = vec![S::zero(); x.len()];
        for r in 0..segments.num_rows() {
            let slots = segments.slots(r);
            if slots.is_empty() {
                continue;
            }
            let m = slots.iter().map(|&s| x[s]).fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for &s in slots {
                let e = (x[s] - m).exp();
                out[s] = e;
                z += e;
            }
            for &s in slots {
                out[s] /= z;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::SegmentSoftmax(ia, segments), false))
    }

    /// Softmax over a whole non-empty vector.
    pub fn softmax_over_set(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let n = self.val(ia).len();
        if n == 0 {
            return Err(Error::Domain("softmax over an empty set".into()));
        }
        self.segment_softmax(a, Arc::new(Neighborhoods::single(n)))
    }

    /// Subtract each segment's mean from its entries.
    pub fn segment_center(&mut self, a: Var, segments: Arc<Neighborhoods>) -> Result<Var> {
        let ia = self.check(a)?;
        self.check_segments(ia, &segments, "segment_center")?;
        let x = self.val(ia).data();
        let mut out = x.to_vec();
        for r in 0..segments.num_rows() {
            let slots = segments.slots(r);
            if slots.is_empty() {
                continue;
            }
            let mean = slots.iter().map(|&s| x[s]).sum::<S>() / S::of_usize(slots.len());
            for &s in slots {
                out[s] = x[s] - mean;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::SegmentCenter(ia, segments), false))
    }

    /// Weighted neighbor sum: `out[r] = Σ weights[slot] * x[col]` over the
    /// entries of row `r` in `pattern`. Rows without entries are zero.
    pub fn aggregate(&mut self, weights: Var, x: Var, pattern: Arc<Neighborhoods>) -> Result<Var> {
        let (iw, ix) = (self.check(weights)?, self.check(x)?);
        let (xr, d) = self.matrix_dims(ix, "aggregate")?;
        let w = self.val(iw);
        if w.rank() != 1 {
            return Err(Error::Shape(format!("aggregate weights must be a vector, got {:?}", w.shape())));
        }
        if !pattern.has_cols() {
            return Err(Error::Shape("aggregate pattern lacks column indices".into()));
        }
        if pattern.max_slot().is_some_and(|s| s >= w.len()) {
            return Err(Error::Consistency(format!(
                "aggregate pattern references weight slot {} but only {} weights exist",
                pattern.max_slot().unwrap(),
                w.len()
            )));
        }
        if pattern.max_col().is_some_and(|c| c >= xr) {
            return Err(Error::Shape(format!(
                "aggregate pattern references row {} of a {xr}-row operand",
                pattern.max_col().unwrap()
            )));
        }
        let xv = self.val(ix);
        let wv = w.data();
        let rows = pattern.num_rows();
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let o = &mut out[r * d..(r + 1) * d];
            for (&s, &c) in pattern.slots(r).iter().zip(pattern.cols(r)) {
                let ws = wv[s];
                for (acc, &v) in o.iter_mut().zip(xv.row(c)) {
                    *acc += ws * v;
                }
            }
        }
        Ok(self.push(Tensor::matrix(rows, d, out)?, Op::Aggregate(iw, ix, pattern), false))
    }

    /// Reverse sweep from a rank-0 `loss`. Every trainable leaf receives a
    /// gradient of its own shape (zero if the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        let il = self.check(loss)?;
        if self.val(il).rank() != 0 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(il).shape()
            )));
        }
        if self.swept {
            return Err(Error::Tape("backward already ran on this tape; call reset() first".into()));
        }
        self.swept = true;

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::scalar(S::one()));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor<S>>], p: usize, d: Tensor<S>| {
            debug_assert_eq!(d.len(), self.nodes[p].value.len());
            match &mut grads[p] {
                Some(e) => e.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        let with_shape = |p: usize, data: Vec<S>| {
            Tensor::new(self.nodes[p].value.shape().to_vec(), data).expect("gradient shape")
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (r, k) = (ta.shape()[0], ta.shape()[1]);
                let c = tb.shape()[1];
                let bt = transpose_raw(tb.data(), k, c);
                let da = matmul_raw(gd, &bt, r, c, k);
                let at = transpose_raw(ta.data(), r, k);
                let db = matmul_raw(&at, gd, k, r, c);
                acc(grads, *a, with_shape(*a, da));
                acc(grads, *b, with_shape(*b, db));
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                acc(grads, *a, with_shape(*a, transpose_raw(gd, r, c)));
            }
            Op::Reshape(a) => acc(grads, *a, with_shape(*a, gd.to_vec())),
            Op::Add(a, b) => {
                acc(grads, *a, with_shape(*a, gd.to_vec()));
                acc(grads, *b, with_shape(*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, with_shape(*a, gd.to_vec()));
                acc(grads, *b, with_shape(*b, gd.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                let da = gd.iter().zip(tb).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(ta).map(|(&g, &x)| g * x).collect();
                acc(grads, *a, with_shape(*a, da));
                acc(grads, *b, with_shape(*b, db));
            }
            Op::AddRow(a, b) => {
                let c = self.val(*b).len();
                let mut db = vec![S::zero(); c];
                for row in gd.chunks(c.max(1)) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(grads, *a, with_shape(*a, gd.to_vec()));
                acc(grads, *b, with_shape(*b, db));
            }
            Op::Scale(a, f) => acc(grads, *a, with_shape(*a, gd.iter().map(|&x| x * *f).collect())),
            Op::LeakyRelu(a, slope) => {
                let x = self.val(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > S::zero() { g } else { g * *slope })
                    .collect();
                acc(grads, *a, with_shape(*a, d));
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                acc(grads, *a, with_shape(*a, d));
            }
            Op::NegLogSigmoid(a) => {
                // d/dx -ln σ(x) = -σ(-x)
                let x = self.val(*a).data();
                let d = gd.iter().zip(x).map(|(&g, &x)| -g * sigmoid(-x)).collect();
                acc(grads, *a, with_shape(*a, d));
            }
            Op::Sqrt(a) => {
                let eps = S::of(NORM_EPS);
                let y = node.value.data();
                let two = S::of(2.0);
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > eps { g / (two * y) } else { S::zero() })
                    .collect();
                acc(grads, *a, with_shape(*a, d));
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                acc(grads, *a, with_shape(*a, vec![gd[0]; n]));
            }
            Op::SumSquares(a) => {
                let two = S::of(2.0);
                let d = self.val(*a).data().iter().map(|&x| two * x * gd[0]).collect();
                acc(grads, *a, with_shape(*a, d));
            }
            Op::GatherRows(a, index) => {
                let src = self.val(*a);
                let width = src.cols();
                let mut d = vec![S::zero(); src.len()];
                for (k, &r) in index.iter().enumerate() {
                    for j in 0..width {
                        d[r * width + j] += gd[k * width + j];
                    }
                }
                acc(grads, *a, with_shape(*a, d));
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let c = ta.cols();
                let mut da = vec![S::zero(); ta.len()];
                let mut db = vec![S::zero(); tb.len()];
                for (r, &gr) in gd.iter().enumerate() {
                    for j in 0..c {
                        da[r * c + j] = gr * tb.data()[r * c + j];
                        db[r * c + j] = gr * ta.data()[r * c + j];
                    }
                }
                acc(grads, *a, with_shape(*a, da));
                acc(grads, *b, with_shape(*b, db));
            }
            Op::RowMax(a, arg) => {
                let c = self.val(*a).cols();
                let mut d = vec![S::zero(); self.val(*a).len()];
                for (r, &j) in arg.iter().enumerate() {
                    d[r * c + j] = gd[r];
                }
                acc(grads, *a, with_shape(*a, d));
            }
            Op::RowMean(a) => {
                let c = self.val(*a).cols();
                let n = S::of_usize(c);
                let d = (0..self.val(*a).len()).map(|k| gd[k / c] / n).collect();
                acc(grads, *a, with_shape(*a, d));
            }
            Op::NormalizeRows(a, norms) => {
                let eps = S::of(NORM_EPS);
                let y = &node.value;
                let c = y.cols();
                let mut d = gd.to_vec();
                for (r, &n) in norms.iter().enumerate() {
                    if n <= eps {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let proj: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                acc(grads, *a, with_shape(*a, d));
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc(grads, p, with_shape(p, d));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    acc(grads, p, with_shape(p, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = node.value.data();
                let mut d = vec![S::zero(); y.len()];
                for r in 0..seg.num_rows() {
                    let slots = seg.slots(r);
                    let inner: S = slots.iter().map(|&s| y[s] * gd[s]).sum();
                    for &s in slots {
                        d[s] = y[s] * (gd[s] - inner);
                    }
                }
                acc(grads, *a, with_shape(*a, d));
            }
            Op::SegmentCenter(a, seg) => {
                let mut d = gd.to_vec();
                for r in 0..seg.num_rows() {
                    let slots = seg.slots(r);
                    if slots.is_empty() {
                        continue;
                    }
                    let mean = slots.iter().map(|&s| gd[s]).sum::<S>() / S::of_usize(slots.len());
                    for &s in slots {
                        d[s] = gd[s] - mean;
                    }
                }
                acc(grads, *a, with_shape(*a, d));
            }
            Op::Aggregate(w, x, pattern) => {
                let (tw, tx) = (self.val(*w), self.val(*x));
                let d = tx.cols();
                let mut dw = vec![S::zero(); tw.len()];
                let mut dx = vec![S::zero(); tx.len()];
                for r in 0..pattern.num_rows() {
                    let gr = &gd[r * d..(r + 1) * d];
                    for (&s, &c) in pattern.slots(r).iter().zip(pattern.cols(r)) {
                        let xr = tx.row(c);
                        dw[s] += gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>();
                        let ws = tw.data()[s];
                        for (dd, &gv) in dx[c * d..(c + 1) * d].iter_mut().zip(gr) {
                            *dd += ws * gv;
                        }
                    }
                }
                acc(grads, *w, with_shape(*w, dw));
                acc(grads, *x, with_shape(*x, dx));
            }
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `-ln σ(x) = ln(1 + e^{-x})`, stable for large |x|.
pub(crate) fn neg_log_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}
