use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::segments::Segments;
use crate::tensor::softmax_rows;

/// Attention probabilities saved by a forward pass, one `[heads, tq, tk]`
/// block per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    heads: usize,
    blocks: Vec<Block>,
    data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    offset: usize,
    queries: usize,
    keys: usize,
}

impl<T: Float> AttentionWeights<T> {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn segments(&self) -> usize {
        self.blocks.len()
    }

    /// `(queries, keys)` of a segment.
    pub fn dims(&self, segment: usize) -> (usize, usize) {
        let b = self.blocks[segment];
        (b.queries, b.keys)
    }

    /// Weight row `w[t, ·]` for one head of one segment.
    pub fn row(&self, segment: usize, head: usize, query: usize) -> &[T] {
        let b = self.blocks[segment];
        let start = b.offset + (head * b.queries + query) * b.keys;
        &self.data[start..start + b.keys]
    }

    fn head_block(&self, segment: usize, head: usize) -> &[T] {
        let b = self.blocks[segment];
        let size = b.queries * b.keys;
        let start = b.offset + head * size;
        &self.data[start..start + size]
    }
}

pub(crate) struct AttentionInputs<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub width: usize,
    pub heads: usize,
    pub q_segments: &'a Segments,
    pub k_segments: &'a Segments,
    pub key_valid: Option<&'a [bool]>,
}

impl<T: Float> AttentionInputs<'_, T> {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn scale(&self) -> T {
        T::from_usize(self.head_dim()).expect("head dim").sqrt().recip()
    }
}

pub(crate) fn forward<T: Float>(
    inp: &AttentionInputs<'_, T>,
) -> Result<(Vec<T>, AttentionWeights<T>)> {
    let d = inp.width;
    let dh = inp.head_dim();
    let scale = inp.scale();
    let mut out = vec![T::zero(); inp.q_segments.total() * d];
    let mut blocks = Vec::with_capacity(inp.q_segments.len());
    let mut total = 0;
    for s in 0..inp.q_segments.len() {
        let (tq, tk) = (inp.q_segments.seg_len(s), inp.k_segments.seg_len(s));
        blocks.push(Block {
            offset: total,
            queries: tq,
            keys: tk,
        });
        total += inp.heads * tq * tk;
    }
    let mut data = vec![T::zero(); total];

    for (s, block) in blocks.iter().enumerate() {
        let qr = inp.q_segments.range(s);
        let kr = inp.k_segments.range(s);
        let (tq, tk) = (block.queries, block.keys);
        if tq == 0 {
            continue;
        }
        let valid = inp.key_valid.map(|m| &m[kr.clone()]);
        if tk == 0 || valid.is_some_and(|v| !v.iter().any(|&x| x)) {
            return Err(TensorError::NoValidKeys { segment: s });
        }
        for h in 0..inp.heads {
            let p = &mut data[block.offset + h * tq * tk..block.offset + (h + 1) * tq * tk];
            T::gemm(
                tq,
                dh,
                tk,
                &inp.q[qr.start * d + h * dh..],
                (d, 1),
                &inp.k[kr.start * d + h * dh..],
                (1, d),
                p,
                (tk, 1),
                false,
            );
            for row in p.chunks_exact_mut(tk) {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = match valid {
                        Some(v) if !v[j] => T::neg_infinity(),
                        _ => *x * scale,
                    };
                }
            }
            softmax_rows(p, tk);
            debug_assert!(p.chunks_exact(tk).all(|r| {
                let sum: f64 = r.iter().map(|x| x.to_f64_lossy()).sum();
                (sum - 1.0).abs() < 1e-5
            }));
            T::gemm(
                tq,
                tk,
                dh,
                p,
                (tk, 1),
                &inp.v[kr.start * d + h * dh..],
                (d, 1),
                &mut out[qr.start * d + h * dh..],
                (d, 1),
                false,
            );
        }
    }
    Ok((
        out,
        AttentionWeights {
            heads: inp.heads,
            blocks,
            data,
        },
    ))
}

pub(crate) struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

pub(crate) fn backward<T: Float>(
    inp: &AttentionInputs<'_, T>,
    weights: &AttentionWeights<T>,
    d_out: &[T],
) -> AttentionGrads<T> {
    let d = inp.width;
    let dh = inp.head_dim();
    let scale = inp.scale();
    let mut dq = vec![T::zero(); inp.q.len()];
    let mut dk = vec![T::zero(); inp.k.len()];
    let mut dv = vec![T::zero(); inp.v.len()];
    let mut ds = Vec::new();
    for s in 0..weights.segments() {
        let (tq, tk) = weights.dims(s);
        if tq == 0 {
            continue;
        }
        let qr = inp.q_segments.range(s);
        let kr = inp.k_segments.range(s);
        for h in 0..inp.heads {
            let p = weights.head_block(s, h);
            let go = &d_out[qr.start * d + h * dh..];
            // dV_h = Pᵀ dO_h
            T::gemm(
                tk,
                tq,
                dh,
                p,
                (1, tk),
                go,
                (d, 1),
                &mut dv[kr.start * d + h * dh..],
                (d, 1),
                true,
            );
            // dP = dO_h V_hᵀ
            ds.clear();
            ds.resize(tq * tk, T::zero());
            T::gemm(
                tq,
                dh,
                tk,
                go,
                (d, 1),
                &inp.v[kr.start * d + h * dh..],
                (1, d),
                &mut ds,
                (tk, 1),
                false,
            );
            for (dp_row, p_row) in ds.chunks_exact_mut(tk).zip(p.chunks_exact(tk)) {
                let dot: T = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in dp_row.iter_mut().zip(p_row) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            // dQ_h = dS K_h, dK_h = dSᵀ Q_h
            T::gemm(
                tq,
                tk,
                dh,
                &ds,
                (tk, 1),
                &inp.k[kr.start * d + h * dh..],
                (d, 1),
                &mut dq[qr.start * d + h * dh..],
                (d, 1),
                true,
            );
            T::gemm(
                tk,
                tq,
                dh,
                &ds,
                (1, tk),
                &inp.q[qr.start * d + h * dh..],
                (d, 1),
                &mut dk[kr.start * d + h * dh..],
                (d, 1),
                true,
            );
        }
    }
    AttentionGrads { dq, dk, dv }
}
