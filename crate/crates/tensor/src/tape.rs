use crate::attention::{self, AttentionInputs, AttentionWeights};
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::segments::Segments;
use crate::tensor::{softmax_strided, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// Per row: (mean, 1/std).
        stats: Vec<(T, T)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        norm: T,
        smoothing: T,
    },
    Attention(Box<AttentionRecord<T>>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Unfold {
        x: Var,
        sources: Vec<Option<usize>>,
    },
    SelectRows {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
}

struct AttentionRecord<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_segments: Segments,
    k_segments: Segments,
    key_valid: Option<Vec<bool>>,
    weights: AttentionWeights<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run recording of a computation.
///
/// Every operation appends a node whose operands precede it, so node order is
/// a topological order and backward is a single reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only accumulated for leaves created with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Attention probabilities recorded by [`Tape::attention`].
    pub fn attention_weights(&self, v: Var) -> Option<&AttentionWeights<T>> {
        match &self.nodes[v.0].op {
            Op::Attention(rec) => Some(&rec.weights),
            _ => None,
        }
    }

    /// Every attention node in recording order.
    pub fn attention_records(&self) -> impl Iterator<Item = (Var, &AttentionWeights<T>)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Attention(rec) => Some((Var(i), &rec.weights)),
            _ => None,
        })
    }

    /// Clears leaf gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        self.leaf_grads.clear();
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, operands: &[Var]) -> Var {
        debug_assert!(
            value.all_finite() || !operands.iter().all(|o| self.value(*o).all_finite()),
            "non-finite output from finite inputs"
        );
        let needs_grad = operands.iter().any(|o| self.nodes[o.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `x[.., c] + row[c]`, broadcasting the row over all leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols {
            return Err(TensorError::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            for (a, &b) in chunk.iter_mut().zip(r) {
                *a += b;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant factor array (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(TensorError::Shape {
                op: "mul_const",
                left: self.shape(x).to_vec(),
                right: vec![factors.len()],
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(&a, &f)| a * f)
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, factors), &[x]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).data().iter().map(|&a| a * c).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { T::zero() })
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let (outer, n, inner) = self.value(x).split_axis(axis)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            },
            &[x],
        ))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).cols();
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= T::zero() {
            return Err(TensorError::Invalid("layer_norm eps must be positive".into()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let inv_d = T::from_usize(d).expect("width").recip();
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        let mut stats = Vec::with_capacity(src.len() / d);
        for (row, out) in src.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = (var + eps).sqrt().recip();
            for j in 0..d {
                out[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            &[x, gain, bias],
        ))
    }

    /// Weighted mean negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`: `Σ w_i·nll_i / Σ w_i` (0 when all weights are 0).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        self.cross_entropy_smoothed(logits, targets, weights, T::zero())
    }

    /// [`Tape::cross_entropy`] against the smoothed target distribution
    /// `(1 - smoothing)·onehot + smoothing/V`.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        smoothing: T,
    ) -> Result<Var> {
        if !(smoothing >= T::zero() && smoothing < T::one()) {
            return Err(TensorError::Invalid("label smoothing must lie in [0, 1)".into()));
        }
        let v = self.value(logits).cols();
        let rows = self.value(logits).rows();
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Index {
                what: "vocabulary",
                index: bad,
                size: v,
            });
        }
        if weights.iter().any(|&w| w < T::zero() || !w.is_finite()) {
            return Err(TensorError::Invalid("position weights must be finite and >= 0".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_strided(&mut probs, rows, v, 1);
        let total_w: T = weights.iter().copied().sum();
        let norm = if total_w > T::zero() {
            total_w.recip()
        } else {
            T::zero()
        };
        let src = self.value(logits).data();
        let mut loss = T::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == T::zero() {
                continue;
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            let target = if smoothing == T::zero() {
                row[t]
            } else {
                let mean = row.iter().copied().sum::<T>() / T::from_usize(v).expect("vocab size");
                (T::one() - smoothing) * row[t] + smoothing * mean
            };
            loss += w * (lse - target);
        }
        let out = Tensor::scalar(loss * norm);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                norm,
                smoothing,
            },
            &[logits],
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `[Σ tq, d]`, `k`/`v` are `[Σ tk, d]`; segment `s` of the queries
    /// attends only to segment `s` of the keys. Keys flagged invalid in
    /// `key_valid` receive exactly zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segments: &Segments,
        k_segments: &Segments,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let d = self.value(q).cols();
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!("width {d} not divisible by {heads} heads")));
        }
        if self.shape(k) != self.shape(v) || self.value(k).cols() != d {
            return Err(TensorError::Shape {
                op: "attention",
                left: self.shape(k).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        if q_segments.total() != self.value(q).rows()
            || k_segments.total() != self.value(k).rows()
            || q_segments.len() != k_segments.len()
            || key_valid.is_some_and(|m| m.len() != k_segments.total())
        {
            return Err(TensorError::Shape {
                op: "attention segments",
                left: q_segments.lengths(),
                right: k_segments.lengths(),
            });
        }
        let inputs = AttentionInputs {
            q: self.value(q).data(),
            k: self.value(k).data(),
            v: self.value(v).data(),
            width: d,
            heads,
            q_segments,
            k_segments,
            key_valid,
        };
        let (out, weights) = attention::forward(&inputs)?;
        let out = Tensor::new(vec![q_segments.total(), d], out)?;
        let rec = AttentionRecord {
            q,
            k,
            v,
            heads,
            q_segments: q_segments.clone(),
            k_segments: k_segments.clone(),
            key_valid: key_valid.map(<[bool]>::to_vec),
            weights,
        };
        Ok(self.push(out, Op::Attention(Box::new(rec)), &[q, k, v]))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    what: "table rows",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Strided 1-D window extraction per segment (the data movement half of a
    /// convolution). Each output row concatenates `kernel` input rows centred
    /// on `stride * j`; rows outside the segment read as zeros. Returns the
    /// unfolded matrix and its segments (`ceil(len / stride)` rows each).
    pub fn unfold(
        &mut self,
        x: Var,
        segments: &Segments,
        kernel: usize,
        stride: usize,
    ) -> Result<(Var, Segments)> {
        if kernel % 2 == 0 || stride == 0 {
            return Err(TensorError::Invalid(format!(
                "unfold needs an odd kernel and positive stride, got {kernel}/{stride}"
            )));
        }
        let c = self.value(x).cols();
        if segments.total() != self.value(x).rows() {
            return Err(TensorError::Shape {
                op: "unfold",
                left: self.shape(x).to_vec(),
                right: segments.lengths(),
            });
        }
        let pad = kernel / 2;
        let mut sources = Vec::new();
        let mut out_lens = Vec::with_capacity(segments.len());
        for r in segments.ranges() {
            let len = r.len();
            let out_len = len.div_ceil(stride);
            out_lens.push(out_len);
            for j in 0..out_len {
                for i in 0..kernel {
                    let pos = (j * stride + i) as isize - pad as isize;
                    sources.push((pos >= 0 && (pos as usize) < len).then(|| r.start + pos as usize));
                }
            }
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(sources.len() * c);
        for s in &sources {
            match s {
                Some(row) => data.extend_from_slice(&src[row * c..(row + 1) * c]),
                None => data.extend(std::iter::repeat_n(T::zero(), c)),
            }
        }
        let out_segments = Segments::from_lengths(&out_lens);
        if out_segments.total() == 0 {
            return Err(TensorError::Invalid("unfold of empty input".into()));
        }
        let out = Tensor::new(vec![out_segments.total(), kernel * c], data)?;
        Ok((self.push(out, Op::Unfold { x, sources }, &[x]), out_segments))
    }

    /// Row-wise merge: `out[i] = if take_a[i] { a[i] } else { b[i] }`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let c = self.value(a).cols();
        if take_a.len() != self.value(a).rows() {
            return Err(TensorError::Shape {
                op: "select_rows",
                left: self.shape(a).to_vec(),
                right: vec![take_a.len()],
            });
        }
        let mut data = Vec::with_capacity(self.value(a).len());
        for (i, &from_a) in take_a.iter().enumerate() {
            let src = if from_a { a } else { b };
            data.extend_from_slice(&self.value(src).data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                a,
                b,
                take_a: take_a.to_vec(),
            },
            &[a, b],
        ))
    }

    /// Reverse sweep from a scalar loss, populating gradients of every
    /// differentiable leaf reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(TensorError::DeadTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Vec<T>>> = Vec::new();
        leaf_grads.resize_with(self.nodes.len(), || None);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, g, &mut grads, &mut leaf_grads, i);
        }
        self.leaf_grads = leaf_grads;
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut [Option<Vec<T>>],
        index: usize,
    ) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => leaf_grads[index] = Some(g),
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let [m, k] = av.dims2("matmul").expect("2d");
                let n = bv.cols();
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |buf| {
                    T::gemm(m, n, k, &g, (n, 1), bv.data(), (1, n), buf, (k, 1), true)
                });
                acc(*b, &mut |buf| {
                    T::gemm(k, m, n, av.data(), (1, k), &g, (n, 1), buf, (n, 1), true)
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |buf| add_into(buf, &g));
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |buf| add_into(buf, &g));
                acc(*row, &mut |buf| {
                    let c = buf.len();
                    for chunk in g.chunks_exact(c) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                acc(*a, &mut |buf| {
                    for ((o, &gi), &y) in buf.iter_mut().zip(&g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(&g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::MulConst(x, f) => acc(*x, &mut |buf| {
                for ((o, &gi), &fi) in buf.iter_mut().zip(&g).zip(f) {
                    *o += gi * fi;
                }
            }),
            Op::Scale(x, c) => acc(*x, &mut |buf| {
                for (o, &gi) in buf.iter_mut().zip(&g) {
                    *o += gi * *c;
                }
            }),
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                acc(*x, &mut |buf| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(&g).zip(xv) {
                        if xi > T::zero() {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            } => {
                let y = node.value.data();
                let (outer, n, inner) = (*outer, *n, *inner);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gain.0].value.data();
                let d = gv.len();
                let inv_d = T::from_usize(d).expect("width").recip();
                acc(*x, &mut |buf| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xs = &xv[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        // dxhat = g * gain; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * rstd;
                            let dxh = gs[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat;
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let out = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * rstd;
                            out[j] += rstd * (gs[j] * gv[j] - m1 - xhat * m2);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * (xv[r * d + j] - mean) * rstd;
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for chunk in g.chunks_exact(d) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                norm,
                smoothing,
            } => {
                let v = self.nodes[logits.0].value.cols();
                let scale = g[0] * *norm;
                let spread = *smoothing / T::from_usize(v).expect("vocab size");
                acc(*logits, &mut |buf| {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let f = scale * w;
                        let row = &mut buf[i * v..(i + 1) * v];
                        for (o, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *o += f * (p - spread);
                        }
                        row[t] -= f * (T::one() - *smoothing);
                    }
                });
            }
            Op::Attention(rec) => {
                let inputs = AttentionInputs {
                    q: self.nodes[rec.q.0].value.data(),
                    k: self.nodes[rec.k.0].value.data(),
                    v: self.nodes[rec.v.0].value.data(),
                    width: self.nodes[rec.q.0].value.cols(),
                    heads: rec.heads,
                    q_segments: &rec.q_segments,
                    k_segments: &rec.k_segments,
                    key_valid: rec.key_valid.as_deref(),
                };
                let grads_qkv = attention::backward(&inputs, &rec.weights, &g);
                acc(rec.q, &mut |buf| add_into(buf, &grads_qkv.dq));
                acc(rec.k, &mut |buf| add_into(buf, &grads_qkv.dk));
                acc(rec.v, &mut |buf| add_into(buf, &grads_qkv.dv));
            }
            Op::Gather { table, ids } => {
                let c = self.nodes[table.0].value.cols();
                acc(*table, &mut |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Unfold { x, sources } => {
                let c = self.nodes[x.0].value.cols();
                acc(*x, &mut |buf| {
                    for (i, s) in sources.iter().enumerate() {
                        if let Some(row) = s {
                            add_into(&mut buf[row * c..(row + 1) * c], &g[i * c..(i + 1) * c]);
                        }
                    }
                });
            }
            Op::SelectRows { a, b, take_a } => {
                let c = node.value.cols();
                for (v, want) in [(a, true), (b, false)] {
                    acc(*v, &mut |buf| {
                        for (i, &from_a) in take_a.iter().enumerate() {
                            if from_a == want {
                                add_into(&mut buf[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                            }
                        }
                    });
                }
            }
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
