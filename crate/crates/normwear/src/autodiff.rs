//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Each forward operation appends a node holding its output tensor plus the
//! information backward needs (input ids, cached intermediates such as
//! attention weights). `backward` walks the tape once in reverse and returns
//! per-node gradients. Node evaluation order is the construction order and
//! every reduction uses a fixed summation order, so forward and backward are
//! bit-reproducible.
//!
//! The op set is exactly what the encoder/decoder/alignment graphs need; it
//! is not a general tensor library. All gradients are validated against
//! central finite differences in the test module below.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Node id on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    MulElem {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    /// x (R x C) + v (1 x C) broadcast over rows.
    AddRowBroadcast {
        x: Var,
        v: Var,
    },
    /// x scaled by the single entry of a 1x1 node.
    MulScalarNode {
        x: Var,
        s: Var,
    },
    Gelu {
        x: Var,
    },
    /// Row-wise layer normalization with 1xC gain and bias.
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    SoftmaxRows {
        x: Var,
    },
    LogSoftmaxRows {
        x: Var,
    },
    /// Multi-head attention core over already-projected q/k/v.
    /// Caches the per-head attention weights (stacked vertically).
    Mha {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        attn: Tensor<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    /// base with rows idx[j] replaced by src row j.
    ScatterRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    /// 1xC row repeated n times.
    RepeatRow {
        v: Var,
        n: usize,
    },
    MeanRows {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    /// Sum over columns per row -> R x 1.
    SumRowwise {
        x: Var,
    },
    /// Mean of the main diagonal of a square matrix -> 1 x 1.
    DiagMean {
        x: Var,
    },
    Square {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Recip {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    /// Same data, new shape (row-major layout preserved).
    Reshape {
        x: Var,
    },
    /// 1-D convolution, stride 1, same (zero) padding.
    /// x: Cin x L, w: Cout x (Cin*kernel), b: Cout x 1. Caches the im2col matrix.
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        xcol: Tensor<T>,
    },
    /// Per-row (feature-channel) normalization over columns with Rx1 gain/bias.
    /// `frozen` carries running statistics for inference mode.
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        frozen: Option<(Arc<Tensor<T>>, Arc<Tensor<T>>)>,
    },
    /// Row-wise dot product of two equally shaped matrices -> R x 1.
    RowDot {
        a: Var,
        b: Var,
    },
    /// Row-wise L2 norm -> R x 1.
    RowL2 {
        x: Var,
    },
}

pub(crate) struct Node<T> {
    pub value: Arc<Tensor<T>>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_node[v.0].take()
    }
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node[v.0].as_ref()
    }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows, t.cols)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf. The tensor is shared, not copied.
    pub fn leaf(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = self.value(a).matmul(self.value(b), ta, tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "add shape mismatch");
        let mut value = ta.clone();
        value.add_assign(tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x - y).collect();
        let value = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub { a, b }, ng)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MulElem { a, b }, ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "div shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x / y).collect();
        let value = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Div { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(value, Op::Scale { x, c }, ng)
    }

    pub fn add_row_broadcast(&mut self, x: Var, v: Var) -> Var {
        let (tx, tv) = (self.value(x), self.value(v));
        assert_eq!(tv.rows, 1, "broadcast vector must be 1 x C");
        assert_eq!(tx.cols, tv.cols, "broadcast width mismatch");
        let mut value = tx.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                value.data[r * tx.cols + c] += tv.data[c];
            }
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(value, Op::AddRowBroadcast { x, v }, ng)
    }

    pub fn mul_scalar_node(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!((sv.rows, sv.cols), (1, 1), "scalar node must be 1x1");
        let c = sv.data[0];
        let value = self.value(x).map(|v| v * c);
        let ng = self.needs(x) || self.needs(s);
        self.push(value, Op::MulScalarNode { x, s }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let ng = self.needs(x);
        self.push(value, Op::Gelu { x }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(tg.rows, 1);
        assert_eq!(tb.rows, 1);
        assert_eq!(tg.cols, tx.cols);
        assert_eq!(tb.cols, tx.cols);
        let epst = T::from_f64(eps);
        let mut value = Tensor::zeros(tx.rows, tx.cols);
        let n = T::from_f64(tx.cols as f64);
        for r in 0..tx.rows {
            let row = tx.row(r);
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean / n;
            let mut var = T::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var / n;
            let inv = T::ONE / (var + epst).sqrt();
            for c in 0..tx.cols {
                value.data[r * tx.cols + c] = (row[c] - mean) * inv * tg.data[c] + tb.data[c];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, eps }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows_value(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::SoftmaxRows { x }, ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut value = Tensor::zeros(tx.rows, tx.cols);
        for r in 0..tx.rows {
            let row = tx.row(r);
            let mut m = row[0];
            for &v in row {
                m = m.max_val(v);
            }
            let mut sum = T::ZERO;
            for &v in row {
                sum += (v - m).exp();
            }
            let lse = m + sum.ln();
            for c in 0..tx.cols {
                value.data[r * tx.cols + c] = row[c] - lse;
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::LogSoftmaxRows { x }, ng)
    }

    /// Attention core: q (Pq x E), k/v (Pk x E), E divisible by `heads`.
    /// Scores are scaled by 1/sqrt(head_dim); output is Pq x E. The
    /// per-head products run as strided gemm calls on the packed layout.
    pub fn mha(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let e = tq.cols;
        assert_eq!(tk.cols, e);
        assert_eq!(tv.cols, e);
        assert_eq!(tk.rows, tv.rows);
        assert!(e % heads == 0, "hidden {} not divisible by heads {}", e, heads);
        let dh = e / heads;
        let (pq, pk) = (tq.rows, tk.rows);
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut attn = Tensor::zeros(heads * pq, pk);
        let mut out: Tensor<T> = Tensor::zeros(pq, e);
        let es = e as isize;
        for h in 0..heads {
            let off = h * dh;
            // scores = Qh Kh^T * scale (Kh^T read with swapped strides)
            let scores = &mut attn.data[h * pq * pk..(h + 1) * pq * pk];
            unsafe {
                T::gemm(
                    pq,
                    dh,
                    pk,
                    scale,
                    tq.data.as_ptr().add(off),
                    es,
                    1,
                    tk.data.as_ptr().add(off),
                    1,
                    es,
                    T::ZERO,
                    scores.as_mut_ptr(),
                    pk as isize,
                    1,
                );
            }
            softmax_rows_inplace(scores, pk);
            // out_h = A Vh, written into the head's column band
            unsafe {
                T::gemm(
                    pq,
                    pk,
                    dh,
                    T::ONE,
                    scores.as_ptr(),
                    pk as isize,
                    1,
                    tv.data.as_ptr().add(off),
                    es,
                    1,
                    T::ZERO,
                    out.data.as_mut_ptr().add(off),
                    es,
                    1,
                );
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Mha { q, k, v, heads, attn }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let tx = self.value(x);
        let mut value = Tensor::zeros(idx.len(), tx.cols);
        for (j, &i) in idx.iter().enumerate() {
            value.row_mut(j).copy_from_slice(tx.row(i));
        }
        let ng = self.needs(x);
        self.push(value, Op::GatherRows { x, idx }, ng)
    }

    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: Vec<usize>) -> Var {
        let (tb, ts) = (self.value(base), self.value(src));
        assert_eq!(ts.rows, idx.len());
        assert_eq!(ts.cols, tb.cols);
        let mut value = tb.clone();
        for (j, &i) in idx.iter().enumerate() {
            value.row_mut(i).copy_from_slice(ts.row(j));
        }
        let ng = self.needs(base) || self.needs(src);
        self.push(value, Op::ScatterRows { base, src, idx }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.cols, cols);
            data.extend_from_slice(&tp.data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.rows);
        let data = tx.data[start * tx.cols..(start + len) * tx.cols].to_vec();
        let ng = self.needs(x);
        self.push(
            Tensor::from_vec(len, tx.cols, data),
            Op::SliceRows { x, start, len },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.cols);
        let mut value = Tensor::zeros(tx.rows, len);
        for r in 0..tx.rows {
            value
                .row_mut(r)
                .copy_from_slice(&tx.row(r)[start..start + len]);
        }
        let ng = self.needs(x);
        self.push(value, Op::SliceCols { x, start, len }, ng)
    }

    pub fn repeat_row(&mut self, v: Var, n: usize) -> Var {
        let tv = self.value(v);
        assert_eq!(tv.rows, 1);
        let mut data = Vec::with_capacity(n * tv.cols);
        for _ in 0..n {
            data.extend_from_slice(&tv.data);
        }
        let ng = self.needs(v);
        self.push(
            Tensor::from_vec(n, tv.cols, data),
            Op::RepeatRow { v, n },
            ng,
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = T::from_f64(tx.rows as f64);
        let mut value = Tensor::zeros(1, tx.cols);
        for r in 0..tx.rows {
            for c in 0..tx.cols {
                value.data[c] += tx.data[r * tx.cols + c];
            }
        }
        for c in 0..tx.cols {
            value.data[c] = value.data[c] / n;
        }
        let ng = self.needs(x);
        self.push(value, Op::MeanRows { x }, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut acc = T::ZERO;
        for &v in &tx.data {
            acc += v;
        }
        let value = Tensor::from_vec(1, 1, vec![acc / T::from_f64(tx.len() as f64)]);
        let ng = self.needs(x);
        self.push(value, Op::MeanAll { x }, ng)
    }

    pub fn sum_rowwise(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut value = Tensor::zeros(tx.rows, 1);
        for r in 0..tx.rows {
            let mut acc = T::ZERO;
            for &v in tx.row(r) {
                acc += v;
            }
            value.data[r] = acc;
        }
        let ng = self.needs(x);
        self.push(value, Op::SumRowwise { x }, ng)
    }

    pub fn diag_mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rows, tx.cols, "diag_mean needs a square matrix");
        let mut acc = T::ZERO;
        for i in 0..tx.rows {
            acc += tx.at(i, i);
        }
        let value = Tensor::from_vec(1, 1, vec![acc / T::from_f64(tx.rows as f64)]);
        let ng = self.needs(x);
        self.push(value, Op::DiagMean { x }, ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let ng = self.needs(x);
        self.push(value, Op::Square { x }, ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        let ng = self.needs(x);
        self.push(value, Op::Abs { x }, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let ng = self.needs(x);
        self.push(value, Op::Exp { x }, ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (tlo, thi) = (T::from_f64(lo), T::from_f64(hi));
        let value = self.value(x).map(|v| {
            if v < tlo {
                tlo
            } else if v > thi {
                thi
            } else {
                v
            }
        });
        let ng = self.needs(x);
        self.push(value, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::ONE / v);
        let ng = self.needs(x);
        self.push(value, Op::Recip { x }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let ng = self.needs(x);
        self.push(value, Op::Transpose { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.len(), rows * cols, "reshape element count");
        let value = Tensor::from_vec(rows, cols, tx.data.clone());
        let ng = self.needs(x);
        self.push(value, Op::Reshape { x }, ng)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let cin = tx.rows;
        let l = tx.cols;
        let cout = tw.rows;
        assert_eq!(tw.cols, cin * kernel, "conv weight shape");
        assert_eq!(tb.rows, cout);
        assert_eq!(tb.cols, 1);
        let xcol = im2col(tx, kernel);
        let mut out = tw.matmul(&xcol, false, false);
        for r in 0..cout {
            let bias = tb.data[r];
            for c in 0..l {
                out.data[r * l + c] += bias;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv1d { x, w, b, kernel, xcol }, ng)
    }

    /// Batch normalization over the column axis of each row. In training
    /// mode (`frozen` = None) statistics come from the input itself.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        frozen: Option<(Arc<Tensor<T>>, Arc<Tensor<T>>)>,
    ) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(tg.rows, tx.rows);
        assert_eq!(tg.cols, 1);
        assert_eq!(tb.rows, tx.rows);
        assert_eq!(tb.cols, 1);
        let epst = T::from_f64(eps);
        let mut value = Tensor::zeros(tx.rows, tx.cols);
        for r in 0..tx.rows {
            let (mean, var) = match &frozen {
                Some((m, v)) => (m.data[r], v.data[r]),
                None => row_mean_var(tx.row(r)),
            };
            let inv = T::ONE / (var + epst).sqrt();
            for c in 0..tx.cols {
                value.data[r * tx.cols + c] =
                    (tx.data[r * tx.cols + c] - mean) * inv * tg.data[r] + tb.data[r];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gain,
                bias,
                eps,
                frozen,
            },
            ng,
        )
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb));
        let mut value = Tensor::zeros(ta.rows, 1);
        for r in 0..ta.rows {
            let mut acc = T::ZERO;
            for (x, y) in ta.row(r).iter().zip(tb.row(r)) {
                acc += *x * *y;
            }
            value.data[r] = acc;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::RowDot { a, b }, ng)
    }

    pub fn row_l2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut value = Tensor::zeros(tx.rows, 1);
        for r in 0..tx.rows {
            let mut acc = T::ZERO;
            for &v in tx.row(r) {
                acc += v * v;
            }
            if acc == T::ZERO {
                return Err(Error::Numeric(format!(
                    "zero-norm row {r} in cosine computation"
                )));
            }
            value.data[r] = acc.sqrt();
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::RowL2 { x }, ng))
    }

    /// Reverse pass from a 1x1 loss node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        {
            let lt = self.value(loss);
            assert_eq!((lt.rows, lt.cols), (1, 1), "loss must be scalar");
        }
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![T::ONE]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads);
            // Re-store for callers that read this node's grad (params are leaves).
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Grads { by_node: grads }
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_inputs(&self, i: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = match (ta, tb) {
                        (false, false) => g.matmul(vb, false, true),
                        (false, true) => g.matmul(vb, false, false),
                        (true, false) => vb.matmul(g, false, true),
                        (true, true) => vb.matmul(g, true, true),
                    };
                    self.add_grad(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = match (ta, tb) {
                        (false, false) => va.matmul(g, true, false),
                        (false, true) => g.matmul(va, true, false),
                        (true, false) => va.matmul(g, false, false),
                        (true, true) => g.matmul(va, true, true),
                    };
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|v| -v));
            }
            Op::MulElem { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (x, &y) in da.data.iter_mut().zip(&vb.data) {
                        *x *= y;
                    }
                    self.add_grad(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = g.clone();
                    for (x, &y) in db.data.iter_mut().zip(&va.data) {
                        *x *= y;
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Div { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (x, &y) in da.data.iter_mut().zip(&vb.data) {
                        *x = *x / y;
                    }
                    self.add_grad(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = g.clone();
                    for ((x, &av), &bv) in db.data.iter_mut().zip(&va.data).zip(&vb.data) {
                        *x = -(*x) * av / (bv * bv);
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Scale { x, c } => {
                self.add_grad(grads, *x, g.map(|v| v * *c));
            }
            Op::AddRowBroadcast { x, v } => {
                if self.needs(*x) {
                    self.add_grad(grads, *x, g.clone());
                }
                if self.needs(*v) {
                    let mut dv = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            dv.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    self.add_grad(grads, *v, dv);
                }
            }
            Op::MulScalarNode { x, s } => {
                let sval = self.value(*s).data[0];
                let vx = self.value(*x);
                if self.needs(*x) {
                    self.add_grad(grads, *x, g.map(|v| v * sval));
                }
                if self.needs(*s) {
                    let mut acc = T::ZERO;
                    for (&gv, &xv) in g.data.iter().zip(&vx.data) {
                        acc += gv * xv;
                    }
                    self.add_grad(grads, *s, Tensor::from_vec(1, 1, vec![acc]));
                }
            }
            Op::Gelu { x } => {
                let vx = self.value(*x);
                let mut dx = g.clone();
                for (gv, &xv) in dx.data.iter_mut().zip(&vx.data) {
                    *gv *= gelu_grad_scalar(xv);
                }
                self.add_grad(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let cols = vx.cols;
                let n = T::from_f64(cols as f64);
                let epst = T::from_f64(*eps);
                let mut dx = Tensor::zeros(vx.rows, cols);
                let mut dgain = Tensor::zeros(1, cols);
                let mut dbias = Tensor::zeros(1, cols);
                for r in 0..vx.rows {
                    let row = vx.row(r);
                    let (mean, var) = row_mean_var(row);
                    let inv = T::ONE / (var + epst).sqrt();
                    let grow = g.row(r);
                    // dy ⊙ gain and the two row means the gradient needs
                    let mut m1 = T::ZERO; // mean(dy ⊙ gain)
                    let mut m2 = T::ZERO; // mean(dy ⊙ gain ⊙ xhat)
                    for c in 0..cols {
                        let xh = (row[c] - mean) * inv;
                        let dyg = grow[c] * vg.data[c];
                        m1 += dyg;
                        m2 += dyg * xh;
                        dgain.data[c] += grow[c] * xh;
                        dbias.data[c] += grow[c];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    for c in 0..cols {
                        let xh = (row[c] - mean) * inv;
                        let dyg = grow[c] * vg.data[c];
                        dx.data[r * cols + c] = inv * (dyg - m1 - xh * m2);
                    }
                }
                if self.needs(*x) {
                    self.add_grad(grads, *x, dx);
                }
                if self.needs(*gain) {
                    self.add_grad(grads, *gain, dgain);
                }
                if self.needs(*bias) {
                    self.add_grad(grads, *bias, dbias);
                }
            }
            Op::SoftmaxRows { x } => {
                let y = self.value(Var(i));
                let mut dx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yrow = y.row(r);
                    let grow = g.row(r);
                    let mut dot = T::ZERO;
                    for c in 0..y.cols {
                        dot += grow[c] * yrow[c];
                    }
                    for c in 0..y.cols {
                        dx.data[r * y.cols + c] = (grow[c] - dot) * yrow[c];
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::LogSoftmaxRows { x } => {
                let y = self.value(Var(i));
                let mut dx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yrow = y.row(r);
                    let grow = g.row(r);
                    let mut gsum = T::ZERO;
                    for c in 0..y.cols {
                        gsum += grow[c];
                    }
                    for c in 0..y.cols {
                        dx.data[r * y.cols + c] = grow[c] - yrow[c].exp() * gsum;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Mha { q, k, v, heads, attn } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let e = tq.cols;
                let dh = e / heads;
                let (pq, pk) = (tq.rows, tk.rows);
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let es = e as isize;
                let mut dq: Tensor<T> = Tensor::zeros(pq, e);
                let mut dk: Tensor<T> = Tensor::zeros(pk, e);
                let mut dv: Tensor<T> = Tensor::zeros(pk, e);
                let mut da: Tensor<T> = Tensor::zeros(pq, pk);
                for h in 0..*heads {
                    let off = h * dh;
                    let a = &attn.data[h * pq * pk..(h + 1) * pq * pk];
                    unsafe {
                        // dV_h = A^T dO_h
                        T::gemm(
                            pk,
                            pq,
                            dh,
                            T::ONE,
                            a.as_ptr(),
                            1,
                            pk as isize,
                            g.data.as_ptr().add(off),
                            es,
                            1,
                            T::ZERO,
                            dv.data.as_mut_ptr().add(off),
                            es,
                            1,
                        );
                        // dA = dO_h V_h^T
                        T::gemm(
                            pq,
                            dh,
                            pk,
                            T::ONE,
                            g.data.as_ptr().add(off),
                            es,
                            1,
                            tv.data.as_ptr().add(off),
                            1,
                            es,
                            T::ZERO,
                            da.data.as_mut_ptr(),
                            pk as isize,
                            1,
                        );
                    }
                    // softmax backward: dS = (dA - rowsum(dA ⊙ A)) ⊙ A * scale
                    for iq in 0..pq {
                        let arow = &a[iq * pk..(iq + 1) * pk];
                        let darow = da.row_mut(iq);
                        let mut dot = T::ZERO;
                        for j in 0..pk {
                            dot += darow[j] * arow[j];
                        }
                        for j in 0..pk {
                            darow[j] = (darow[j] - dot) * arow[j] * scale;
                        }
                    }
                    unsafe {
                        // dQ_h = dS K_h
                        T::gemm(
                            pq,
                            pk,
                            dh,
                            T::ONE,
                            da.data.as_ptr(),
                            pk as isize,
                            1,
                            tk.data.as_ptr().add(off),
                            es,
                            1,
                            T::ZERO,
                            dq.data.as_mut_ptr().add(off),
                            es,
                            1,
                        );
                        // dK_h = dS^T Q_h
                        T::gemm(
                            pk,
                            pq,
                            dh,
                            T::ONE,
                            da.data.as_ptr(),
                            1,
                            pk as isize,
                            tq.data.as_ptr().add(off),
                            es,
                            1,
                            T::ZERO,
                            dk.data.as_mut_ptr().add(off),
                            es,
                            1,
                        );
                    }
                }
                if self.needs(*q) {
                    self.add_grad(grads, *q, dq);
                }
                if self.needs(*k) {
                    self.add_grad(grads, *k, dk);
                }
                if self.needs(*v) {
                    self.add_grad(grads, *v, dv);
                }
            }
            Op::GatherRows { x, idx } => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for (j, &r) in idx.iter().enumerate() {
                    let grow = g.row(j);
                    let drow = dx.row_mut(r);
                    for c in 0..vx.cols {
                        drow[c] += grow[c];
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::ScatterRows { base, src, idx } => {
                if self.needs(*base) {
                    let mut db = g.clone();
                    for &r in idx {
                        for v in db.row_mut(r) {
                            *v = T::ZERO;
                        }
                    }
                    self.add_grad(grads, *base, db);
                }
                if self.needs(*src) {
                    let mut ds = Tensor::zeros(idx.len(), g.cols);
                    for (j, &r) in idx.iter().enumerate() {
                        ds.row_mut(j).copy_from_slice(g.row(r));
                    }
                    self.add_grad(grads, *src, ds);
                }
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.needs(p) {
                        let data = g.data[start * g.cols..(start + rows) * g.cols].to_vec();
                        self.add_grad(grads, p, Tensor::from_vec(rows, g.cols, data));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                let vx = self.value(*x);
                debug_assert_eq!(g.rows, *len);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..*len {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.add_grad(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..g.rows {
                    dx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                self.add_grad(grads, *x, dx);
            }
            Op::RepeatRow { v, n } => {
                debug_assert_eq!(g.rows, *n);
                let mut dv = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        dv.data[c] += g.data[r * g.cols + c];
                    }
                }
                self.add_grad(grads, *v, dv);
            }
            Op::MeanRows { x } => {
                let vx = self.value(*x);
                let inv = T::ONE / T::from_f64(vx.rows as f64);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    for c in 0..vx.cols {
                        dx.data[r * vx.cols + c] = g.data[c] * inv;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::MeanAll { x } => {
                let vx = self.value(*x);
                let gv = g.data[0] / T::from_f64(vx.len() as f64);
                self.add_grad(
                    grads,
                    *x,
                    Tensor::from_vec(vx.rows, vx.cols, vec![gv; vx.len()]),
                );
            }
            Op::SumRowwise { x } => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    let gv = g.data[r];
                    for c in 0..vx.cols {
                        dx.data[r * vx.cols + c] = gv;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::DiagMean { x } => {
                let vx = self.value(*x);
                let gv = g.data[0] / T::from_f64(vx.rows as f64);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    dx.data[r * vx.cols + r] = gv;
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Square { x } => {
                let vx = self.value(*x);
                let mut dx = g.clone();
                let two = T::from_f64(2.0);
                for (gv, &xv) in dx.data.iter_mut().zip(&vx.data) {
                    *gv *= two * xv;
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Abs { x } => {
                let vx = self.value(*x);
                let mut dx = g.clone();
                for (gv, &xv) in dx.data.iter_mut().zip(&vx.data) {
                    if xv < T::ZERO {
                        *gv = -*gv;
                    } else if xv == T::ZERO {
                        *gv = T::ZERO;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Exp { x } => {
                let y = self.value(Var(i));
                let mut dx = g.clone();
                for (gv, &yv) in dx.data.iter_mut().zip(&y.data) {
                    *gv *= yv;
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x);
                let (tlo, thi) = (T::from_f64(*lo), T::from_f64(*hi));
                let mut dx = g.clone();
                for (gv, &xv) in dx.data.iter_mut().zip(&vx.data) {
                    if xv < tlo || xv > thi {
                        *gv = T::ZERO;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Recip { x } => {
                let vx = self.value(*x);
                let mut dx = g.clone();
                for (gv, &xv) in dx.data.iter_mut().zip(&vx.data) {
                    *gv = -*gv / (xv * xv);
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Transpose { x } => {
                self.add_grad(grads, *x, g.transpose());
            }
            Op::Reshape { x } => {
                let vx = self.value(*x);
                self.add_grad(
                    grads,
                    *x,
                    Tensor::from_vec(vx.rows, vx.cols, g.data.clone()),
                );
            }
            Op::Conv1d { x, w, b, kernel, xcol } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let l = vx.cols;
                if self.needs(*w) {
                    self.add_grad(grads, *w, g.matmul(xcol, false, true));
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(vw.rows, 1);
                    for r in 0..g.rows {
                        let mut acc = T::ZERO;
                        for &v in g.row(r) {
                            acc += v;
                        }
                        db.data[r] = acc;
                    }
                    self.add_grad(grads, *b, db);
                }
                if self.needs(*x) {
                    let dxcol = vw.matmul(g, true, false);
                    let pad = kernel / 2;
                    let cin = vx.rows;
                    let mut dx = Tensor::zeros(cin, l);
                    for ci in 0..cin {
                        for dk in 0..*kernel {
                            let rowi = ci * kernel + dk;
                            for c in 0..l {
                                let src = c as isize + dk as isize - pad as isize;
                                if src >= 0 && (src as usize) < l {
                                    dx.data[ci * l + src as usize] +=
                                        dxcol.data[rowi * l + c];
                                }
                            }
                        }
                    }
                    self.add_grad(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                eps,
                frozen,
            } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let cols = vx.cols;
                let n = T::from_f64(cols as f64);
                let epst = T::from_f64(*eps);
                let mut dx = Tensor::zeros(vx.rows, cols);
                let mut dgain = Tensor::zeros(vx.rows, 1);
                let mut dbias = Tensor::zeros(vx.rows, 1);
                for r in 0..vx.rows {
                    let row = vx.row(r);
                    let grow = g.row(r);
                    let (mean, var) = match frozen {
                        Some((m, v)) => (m.data[r], v.data[r]),
                        None => row_mean_var(row),
                    };
                    let inv = T::ONE / (var + epst).sqrt();
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for c in 0..cols {
                        let xh = (row[c] - mean) * inv;
                        dgain.data[r] += grow[c] * xh;
                        dbias.data[r] += grow[c];
                        m1 += grow[c];
                        m2 += grow[c] * xh;
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    let gr = vg.data[r];
                    for c in 0..cols {
                        let xh = (row[c] - mean) * inv;
                        let d = if frozen.is_some() {
                            grow[c] * gr * inv
                        } else {
                            gr * inv * (grow[c] - m1 - xh * m2)
                        };
                        dx.data[r * cols + c] = d;
                    }
                }
                if self.needs(*x) {
                    self.add_grad(grads, *x, dx);
                }
                if self.needs(*gain) {
                    self.add_grad(grads, *gain, dgain);
                }
                if self.needs(*bias) {
                    self.add_grad(grads, *bias, dbias);
                }
            }
            Op::RowDot { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Tensor::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        let gv = g.data[r];
                        for c in 0..va.cols {
                            da.data[r * va.cols + c] = gv * vb.data[r * vb.cols + c];
                        }
                    }
                    self.add_grad(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(vb.rows, vb.cols);
                    for r in 0..vb.rows {
                        let gv = g.data[r];
                        for c in 0..vb.cols {
                            db.data[r * vb.cols + c] = gv * va.data[r * va.cols + c];
                        }
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::RowL2 { x } => {
                let vx = self.value(*x);
                let y = self.value(Var(i));
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    let gv = g.data[r] / y.data[r];
                    for c in 0..vx.cols {
                        dx.data[r * vx.cols + c] = gv * vx.data[r * vx.cols + c];
                    }
                }
                self.add_grad(grads, *x, dx);
            }
        }
    }
}

fn row_mean_var<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::ZERO;
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = T::ZERO;
    for &v in row {
        var += (v - mean) * (v - mean);
    }
    (mean, var / n)
}

fn softmax_rows_inplace<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let mut m = row[0];
        for &v in row.iter() {
            m = m.max_val(v);
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

fn softmax_rows_value<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mut m = row[0];
        for &v in row {
            m = m.max_val(v);
        }
        let mut sum = T::ZERO;
        for (c, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out.data[r * x.cols + c] = e;
            sum += e;
        }
        for c in 0..x.cols {
            out.data[r * x.cols + c] = out.data[r * x.cols + c] / sum;
        }
    }
    out
}

/// tanh-form GELU, the ViT/BERT convention.
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

fn im2col<T: Scalar>(x: &Tensor<T>, kernel: usize) -> Tensor<T> {
    let pad = kernel / 2;
    let (cin, l) = (x.rows, x.cols);
    let mut xcol = Tensor::zeros(cin * kernel, l);
    for ci in 0..cin {
        for dk in 0..kernel {
            let rowi = ci * kernel + dk;
            for c in 0..l {
                let src = c as isize + dk as isize - pad as isize;
                if src >= 0 && (src as usize) < l {
                    xcol.data[rowi * l + c] = x.data[ci * l + src as usize];
                }
            }
        }
    }
    xcol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central-difference check of d(loss)/d(inputs) for an arbitrary graph.
    fn grad_check(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(Arc::new(t.clone())))
            .collect();
        let loss = build(&mut tape, &vars);
        let mut grads = tape.backward(loss);

        let h = 1e-5;
        for (ii, input) in inputs.iter().enumerate() {
            let analytic = grads
                .take(vars[ii])
                .unwrap_or_else(|| Tensor::zeros(input.rows, input.cols));
            for e in 0..input.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == ii {
                                t.data[e] += delta;
                            }
                            tape.leaf(Arc::new(t))
                        })
                        .collect();
                    let loss = build(&mut tape, &vars);
                    tape.value(loss).data[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data[e];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < tol,
                    "input {ii} elem {e}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    fn randt(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.normal() * 0.8)
    }

    #[test]
    fn grad_matmul_all_transposes() {
        let mut rng = Rng::new(1);
        for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
            let a = if ta { randt(&mut rng, 4, 3) } else { randt(&mut rng, 3, 4) };
            let b = if tb { randt(&mut rng, 5, 4) } else { randt(&mut rng, 4, 5) };
            grad_check(
                &[a, b],
                |t, v| {
                    let m = t.matmul(v[0], v[1], ta, tb);
                    let s = t.square(m);
                    t.mean_all(s)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = Rng::new(2);
        let a = randt(&mut rng, 3, 4);
        let b = randt(&mut rng, 3, 4).map(|v| v + 3.0); // keep away from 0 for div
        grad_check(
            &[a.clone(), b.clone()],
            |t, v| {
                let s = t.add(v[0], v[1]);
                let d = t.sub(s, v[1]);
                let m = t.mul_elem(d, v[1]);
                let q = t.div(m, v[1]);
                let sq = t.square(q);
                t.mean_all(sq)
            },
            1e-6,
        );
        grad_check(
            &[a],
            |t, v| {
                let e = t.exp(v[0]);
                let g = t.gelu(e);
                let ab = t.abs(g);
                t.mean_all(ab)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_and_logsoftmax() {
        let mut rng = Rng::new(3);
        let x = randt(&mut rng, 4, 6);
        grad_check(
            &[x.clone()],
            |t, v| {
                let s = t.softmax_rows(v[0]);
                let sq = t.square(s);
                t.mean_all(sq)
            },
            1e-6,
        );
        grad_check(
            &[x],
            |t, v| {
                let s = t.log_softmax_rows(v[0]);
                let sq = t.square(s);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = Rng::new(4);
        let x = randt(&mut rng, 3, 8);
        let g = randt(&mut rng, 1, 8);
        let b = randt(&mut rng, 1, 8);
        grad_check(
            &[x, g, b],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6);
                let sq = t.square(y);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_mha() {
        let mut rng = Rng::new(5);
        let q = randt(&mut rng, 5, 8);
        let k = randt(&mut rng, 7, 8);
        let v = randt(&mut rng, 7, 8);
        grad_check(
            &[q, k, v],
            |t, vars| {
                let o = t.mha(vars[0], vars[1], vars[2], 2);
                let sq = t.square(o);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_gather_scatter_concat_slice() {
        let mut rng = Rng::new(6);
        let x = randt(&mut rng, 6, 4);
        let s = randt(&mut rng, 2, 4);
        grad_check(
            &[x, s],
            |t, v| {
                let g1 = t.gather_rows(v[0], vec![0, 2, 2, 5]);
                let sc = t.scatter_rows(v[0], v[1], vec![1, 4]);
                let cat = t.concat_rows(&[g1, sc]);
                let sl = t.slice_rows(cat, 1, 7);
                let slc = t.slice_cols(sl, 1, 2);
                let sq = t.square(slc);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_reductions_and_shapes() {
        let mut rng = Rng::new(7);
        let x = randt(&mut rng, 4, 4);
        let v = randt(&mut rng, 1, 4);
        grad_check(
            &[x, v],
            |t, vars| {
                let rep = t.repeat_row(vars[1], 4);
                let sum = t.add(vars[0], rep);
                let mr = t.mean_rows(sum);
                let add2 = t.add_row_broadcast(vars[0], mr);
                let d = t.diag_mean(add2);
                let sr = t.sum_rowwise(add2);
                let m = t.mean_all(sr);
                let tm = t.add(d, m);
                let tr = t.transpose(tm);
                t.mean_all(tr)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_scalar_node_clamp_recip() {
        let mut rng = Rng::new(8);
        let x = randt(&mut rng, 3, 3);
        let s = Tensor::from_vec(1, 1, vec![0.7]);
        grad_check(
            &[x, s],
            |t, v| {
                let sc = t.mul_scalar_node(v[0], v[1]);
                let cl = t.clamp(sc, -0.9, 0.9);
                let e = t.exp(cl);
                let r = t.recip(e);
                let sq = t.square(r);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv1d() {
        let mut rng = Rng::new(9);
        let x = randt(&mut rng, 3, 10); // 3 channels, length 10
        let w = randt(&mut rng, 4, 9); // 4 out channels, kernel 3
        let b = randt(&mut rng, 4, 1);
        grad_check(
            &[x, w, b],
            |t, v| {
                let y = t.conv1d(v[0], v[1], v[2], 3);
                let sq = t.square(y);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_batch_norm_train_and_frozen() {
        let mut rng = Rng::new(10);
        let x = randt(&mut rng, 3, 12);
        let g = Tensor::from_fn(3, 1, |_, _| 1.0 + 0.3 * rng.normal());
        let b = randt(&mut rng, 3, 1);
        grad_check(
            &[x.clone(), g.clone(), b.clone()],
            |t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], 1e-5, None);
                let sq = t.square(y);
                t.mean_all(sq)
            },
            1e-5,
        );
        let mean = Arc::new(Tensor::from_vec(3, 1, vec![0.1, -0.2, 0.3]));
        let var = Arc::new(Tensor::from_vec(3, 1, vec![1.1, 0.9, 1.3]));
        grad_check(
            &[x, g, b],
            |t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], 1e-5, Some((mean.clone(), var.clone())));
                let sq = t.square(y);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_rowdot_rowl2() {
        let mut rng = Rng::new(11);
        let a = randt(&mut rng, 4, 5).map(|v| v + 2.0);
        let b = randt(&mut rng, 4, 5).map(|v| v + 2.0);
        grad_check(
            &[a, b],
            |t, v| {
                let d = t.row_dot(v[0], v[1]);
                let na = t.row_l2(v[0]).unwrap();
                let nb = t.row_l2(v[1]).unwrap();
                let nn = t.mul_elem(na, nb);
                let cos = t.div(d, nn);
                let sq = t.square(cos);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn shared_leaf_accumulates() {
        // Using the same leaf twice must add both contributions.
        let x = Tensor::from_vec(1, 2, vec![2.0_f64, 3.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(Arc::new(x));
        let s = tape.mul_elem(v, v); // x^2
        let m = tape.mean_all(s);
        let mut grads = tape.backward(m);
        let g = grads.take(v).unwrap();
        assert!((g.data[0] - 2.0).abs() < 1e-12); // d/dx mean(x^2) = 2x/2 = x
        assert!((g.data[1] - 3.0).abs() < 1e-12);
    }
}
