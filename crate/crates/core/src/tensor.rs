//! Minimal dense 2-D tensor engine with tape-based reverse-mode
//! automatic differentiation.
//!
//! Every value on the tape is a row-major `(rows, cols)` matrix; scalars
//! are `(1, 1)`. A forward pass appends nodes to the tape; `backward`
//! walks the tape in reverse and accumulates gradients. Construction order
//! is the topological order, so no explicit sort is needed.
//!
//! Forward passes are bit-reproducible: reductions run in index order and
//! nothing here is threaded.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub type Id = usize;

/// Numeric precision of forward values and gradients. `F32` rounds every
/// node's values (and gradients) through `f32`, emulating single-precision
/// training while keeping a single `f64` code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const ATTENTION_MASK_VALUE: f64 = -1e9;

/// Compressed sparse rows plus a precomputed transpose, used for constant
/// graph-adjacency operands of [`Tape::spmm`].
#[derive(Debug, Clone)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    vals: Vec<f64>,
    t_row_ptr: Vec<usize>,
    t_col_idx: Vec<u32>,
    t_vals: Vec<f64>,
}

impl Csr {
    /// Build from per-row `(col, val)` entries; entries may be unsorted.
    pub fn from_rows(n_rows: usize, n_cols: usize, rows: &[Vec<(u32, f64)>]) -> Csr {
        assert_eq!(rows.len(), n_rows);
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            let mut entries = row.clone();
            entries.sort_by_key(|&(c, _)| c);
            for (c, v) in entries {
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }

        // Transpose by counting sort over columns.
        let nnz = col_idx.len();
        let mut counts = vec![0usize; n_cols + 1];
        for &c in &col_idx {
            counts[c as usize + 1] += 1;
        }
        for i in 0..n_cols {
            counts[i + 1] += counts[i];
        }
        let t_row_ptr = counts.clone();
        let mut t_col_idx = vec![0u32; nnz];
        let mut t_vals = vec![0f64; nnz];
        let mut cursor = counts;
        for r in 0..n_rows {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = col_idx[k] as usize;
                let pos = cursor[c];
                cursor[c] += 1;
                t_col_idx[pos] = r as u32;
                t_vals[pos] = vals[k];
            }
        }

        Csr {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            vals,
            t_row_ptr,
            t_col_idx,
            t_vals,
        }
    }

    fn mul_dense(&self, a: &[f64], a_cols: usize, out: &mut [f64]) {
        for r in 0..self.n_rows {
            let dst = &mut out[r * a_cols..(r + 1) * a_cols];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k] as usize;
                let v = self.vals[k];
                let src = &a[c * a_cols..(c + 1) * a_cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    fn mul_dense_transposed(&self, a: &[f64], a_cols: usize, out: &mut [f64]) {
        for r in 0..self.n_cols {
            let dst = &mut out[r * a_cols..(r + 1) * a_cols];
            for k in self.t_row_ptr[r]..self.t_row_ptr[r + 1] {
                let c = self.t_col_idx[k] as usize;
                let v = self.t_vals[k];
                let src = &a[c * a_cols..(c + 1) * a_cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Id, b: Id, ta: bool, tb: bool },
    Add { a: Id, b: Id },
    AddRow { a: Id, row: Id },
    Scale { a: Id, c: f64 },
    Relu { a: Id },
    Gelu { a: Id },
    Sigmoid { a: Id },
    LayerNorm { a: Id, gain: Id, bias: Id },
    SoftmaxRows { a: Id },
    GatherRows { a: Id, idx: Vec<usize> },
    MeanRows { a: Id, rows: Vec<usize> },
    SpMm { m: Arc<Csr>, a: Id },
    ConcatCols { xs: Vec<Id> },
    SliceCols { a: Id, start: usize, len: usize },
    CrossEntropyMean { logits: Id, targets: Vec<usize> },
    BceWithLogits { z: Id, labels: Vec<f64>, mean: bool },
    Dropout { a: Id, mask: Vec<f64> },
    WeightedSum { xs: Vec<Id>, ws: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Tape {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: Id) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn values(&self, id: Id) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn scalar(&self, id: Id) -> f64 {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    fn push(&mut self, rows: usize, cols: usize, mut values: Vec<f64>, op: Op) -> Id {
        debug_assert_eq!(values.len(), rows * cols);
        if self.precision == Precision::F32 {
            for v in &mut values {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            rows,
            cols,
            values,
            op,
        });
        self.nodes.len() - 1
    }

    /// Insert a leaf (parameter or constant input).
    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Id {
        self.push(rows, cols, values, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Id, b: Id, ta: bool, tb: bool) -> Id {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k1, k2, "matmul inner dims: {k1} vs {k2}");
        let av = eff(&self.nodes[a].values, ar, ac, ta);
        let bv = eff(&self.nodes[b].values, br, bc, tb);
        let mut out = vec![0f64; m * n];
        mm(&av, m, k1, &bv, n, &mut out);
        self.push(m, n, out, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (r, c) = self.shape(a);
        let out = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        self.push(r, c, out, Op::Add { a, b })
    }

    /// `(m, n) + (1, n)` broadcast over rows.
    pub fn add_row(&mut self, a: Id, row: Id) -> Id {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape mismatch");
        let mut out = self.nodes[a].values.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += self.nodes[row].values[j];
            }
        }
        self.push(r, c, out, Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let (r, cc) = self.shape(a);
        let out = self.nodes[a].values.iter().map(|x| x * c).collect();
        self.push(r, cc, out, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let (r, c) = self.shape(a);
        let out = self.nodes[a].values.iter().map(|&x| x.max(0.0)).collect();
        self.push(r, c, out, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Id) -> Id {
        let (r, c) = self.shape(a);
        let out = self.nodes[a].values.iter().map(|&x| gelu(x)).collect();
        self.push(r, c, out, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let (r, c) = self.shape(a);
        let out = self.nodes[a].values.iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, out, Op::Sigmoid { a })
    }

    /// Row-wise layer normalization with learned gain and bias (both
    /// `(1, cols)`), epsilon [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, a: Id, gain: Id, bias: Id) -> Id {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let mut out = vec![0f64; r * c];
        for i in 0..r {
            let row = &self.nodes[a].values[i * c..(i + 1) * c];
            let (mean, inv) = row_norm_stats(row);
            for j in 0..c {
                let xhat = (row[j] - mean) * inv;
                out[i * c + j] =
                    xhat * self.nodes[gain].values[j] + self.nodes[bias].values[j];
            }
        }
        self.push(r, c, out, Op::LayerNorm { a, gain, bias })
    }

    /// Row-wise softmax. `col_mask`, when present, is added to every row
    /// before normalization (used for additive attention padding masks).
    pub fn softmax_rows(&mut self, a: Id, col_mask: Option<Vec<f64>>) -> Id {
        let (r, c) = self.shape(a);
        if let Some(m) = &col_mask {
            assert_eq!(m.len(), c);
        }
        let mut out = vec![0f64; r * c];
        for i in 0..r {
            let row = &self.nodes[a].values[i * c..(i + 1) * c];
            softmax_into(row, col_mask.as_deref(), &mut out[i * c..(i + 1) * c]);
        }
        self.push(r, c, out, Op::SoftmaxRows { a })
    }

    /// Select rows by index (duplicates allowed). This is both the
    /// embedding lookup and the generic row gather.
    pub fn gather_rows(&mut self, a: Id, idx: Vec<usize>) -> Id {
        let (ar, c) = self.shape(a);
        for &i in &idx {
            assert!(i < ar, "gather index {i} out of {ar} rows");
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&self.nodes[a].values[i * c..(i + 1) * c]);
        }
        let rows = idx.len();
        self.push(rows, c, out, Op::GatherRows { a, idx })
    }

    /// Mean over a subset of rows, producing `(1, cols)`.
    pub fn mean_rows(&mut self, a: Id, rows: Vec<usize>) -> Id {
        let (ar, c) = self.shape(a);
        assert!(!rows.is_empty(), "mean_rows over empty set");
        for &i in &rows {
            assert!(i < ar);
        }
        let mut out = vec![0f64; c];
        for &i in &rows {
            for j in 0..c {
                out[j] += self.nodes[a].values[i * c + j];
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in &mut out {
            *v *= inv;
        }
        self.push(1, c, out, Op::MeanRows { a, rows })
    }

    /// Constant sparse matrix times dense: `m (n x n) * a (n, d)`.
    pub fn spmm(&mut self, m: Arc<Csr>, a: Id) -> Id {
        let (ar, c) = self.shape(a);
        assert_eq!(m.n_cols, ar, "spmm shape mismatch");
        let mut out = vec![0f64; m.n_rows * c];
        m.mul_dense(&self.nodes[a].values, c, &mut out);
        self.push(m.n_rows, c, out, Op::SpMm { m, a })
    }

    pub fn concat_cols(&mut self, xs: &[Id]) -> Id {
        assert!(!xs.is_empty());
        let r = self.shape(xs[0]).0;
        let total: usize = xs.iter().map(|&x| self.shape(x).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                let c = self.shape(x).1;
                assert_eq!(self.shape(x).0, r, "concat_cols row mismatch");
                out.extend_from_slice(&self.nodes[x].values[i * c..(i + 1) * c]);
            }
        }
        self.push(r, total, out, Op::ConcatCols { xs: xs.to_vec() })
    }

    pub fn slice_cols(&mut self, a: Id, start: usize, len: usize) -> Id {
        let (r, c) = self.shape(a);
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.nodes[a].values[i * c + start..i * c + start + len]);
        }
        self.push(r, len, out, Op::SliceCols { a, start, len })
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: Id, targets: Vec<usize>) -> Id {
        let (r, c) = self.shape(logits);
        assert_eq!(r, targets.len());
        assert!(r > 0, "cross entropy over zero targets");
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c);
            let row = &self.nodes[logits].values[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / r as f64;
        self.push(1, 1, vec![loss], Op::CrossEntropyMean { logits, targets })
    }

    /// Numerically stable binary cross-entropy on logits. `mean = false`
    /// returns the sum over elements.
    pub fn bce_with_logits(&mut self, z: Id, labels: Vec<f64>, mean: bool) -> Id {
        let (r, c) = self.shape(z);
        assert_eq!(r * c, labels.len());
        assert!(!labels.is_empty());
        let mut total = 0.0;
        for (zi, yi) in self.nodes[z].values.iter().zip(&labels) {
            total += zi.max(0.0) - yi * zi + (-zi.abs()).exp().ln_1p();
        }
        if mean {
            total /= labels.len() as f64;
        }
        self.push(1, 1, vec![total], Op::BceWithLogits { z, labels, mean })
    }

    /// Elementwise multiply by a fixed 0-or-`1/(1-p)` mask.
    pub fn dropout(&mut self, a: Id, mask: Vec<f64>) -> Id {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), r * c);
        let out = self.nodes[a]
            .values
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        self.push(r, c, out, Op::Dropout { a, mask })
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, xs: &[Id], ws: &[f64]) -> Id {
        assert_eq!(xs.len(), ws.len());
        assert!(!xs.is_empty());
        let mut total = 0.0;
        for (&x, &w) in xs.iter().zip(ws) {
            debug_assert_eq!(self.shape(x), (1, 1));
            total += w * self.nodes[x].values[0];
        }
        self.push(
            1,
            1,
            vec![total],
            Op::WeightedSum {
                xs: xs.to_vec(),
                ws: ws.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// entries are empty vectors for nodes the loss does not depend on.
    pub fn backward(&self, loss: Id) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[loss] = vec![1.0];

        for i in (0..=loss).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let mut g = std::mem::take(&mut grads[i]);
            if self.precision == Precision::F32 {
                for v in &mut g {
                    *v = *v as f32 as f64;
                }
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, ta, tb } => {
                    let (ar, ac) = self.shape(*a);
                    let (br, bc) = self.shape(*b);
                    let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                    let n = if *tb { br } else { bc };
                    let av = eff(&self.nodes[*a].values, ar, ac, *ta);
                    let bv = eff(&self.nodes[*b].values, br, bc, *tb);
                    // d(a_eff) = g * b_eff^T  -> (m, k)
                    let bt = transpose(&bv, k, n);
                    let mut da_eff = vec![0f64; m * k];
                    mm(&g, m, n, &bt, k, &mut da_eff);
                    // d(b_eff) = a_eff^T * g  -> (k, n)
                    let at = transpose(&av, m, k);
                    let mut db_eff = vec![0f64; k * n];
                    mm(&at, k, m, &g, n, &mut db_eff);
                    let da = if *ta {
                        transpose(&da_eff, m, k)
                    } else {
                        da_eff
                    };
                    let db = if *tb {
                        transpose(&db_eff, k, n)
                    } else {
                        db_eff
                    };
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::AddRow { a, row } => {
                    accumulate(&mut grads[*a], &g);
                    let (r, c) = (node.rows, node.cols);
                    let mut drow = vec![0f64; c];
                    for i2 in 0..r {
                        for j in 0..c {
                            drow[j] += g[i2 * c + j];
                        }
                    }
                    accumulate(&mut grads[*row], &drow);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = self.nodes[*a]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = self.nodes[*a]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gi)| gi * gelu_grad(x))
                        .collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Sigmoid { a } => {
                    let da: Vec<f64> = node
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gi)| gi * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::LayerNorm { a, gain, bias } => {
                    let (r, c) = (node.rows, node.cols);
                    let mut da = vec![0f64; r * c];
                    let mut dgain = vec![0f64; c];
                    let mut dbias = vec![0f64; c];
                    for i2 in 0..r {
                        let x = &self.nodes[*a].values[i2 * c..(i2 + 1) * c];
                        let gr = &g[i2 * c..(i2 + 1) * c];
                        let (mean, inv) = row_norm_stats(x);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut xhat = vec![0f64; c];
                        let mut dxhat = vec![0f64; c];
                        for j in 0..c {
                            xhat[j] = (x[j] - mean) * inv;
                            dxhat[j] = gr[j] * self.nodes[*gain].values[j];
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        let nf = c as f64;
                        for j in 0..c {
                            da[i2 * c + j] = inv / nf
                                * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*gain], &dgain);
                    accumulate(&mut grads[*bias], &dbias);
                }
                Op::SoftmaxRows { a } => {
                    let (r, c) = (node.rows, node.cols);
                    let mut da = vec![0f64; r * c];
                    for i2 in 0..r {
                        let y = &node.values[i2 * c..(i2 + 1) * c];
                        let gr = &g[i2 * c..(i2 + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..c {
                            da[i2 * c + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[*a], &da);
                }
                Op::GatherRows { a, idx } => {
                    let c = node.cols;
                    let (ar, _) = self.shape(*a);
                    ensure_zeros(&mut grads[*a], ar * c);
                    let dst = &mut grads[*a];
                    for (out_i, &src_i) in idx.iter().enumerate() {
                        for j in 0..c {
                            dst[src_i * c + j] += g[out_i * c + j];
                        }
                    }
                }
                Op::MeanRows { a, rows } => {
                    let c = node.cols;
                    let (ar, _) = self.shape(*a);
                    ensure_zeros(&mut grads[*a], ar * c);
                    let inv = 1.0 / rows.len() as f64;
                    let dst = &mut grads[*a];
                    for &r2 in rows {
                        for j in 0..c {
                            dst[r2 * c + j] += g[j] * inv;
                        }
                    }
                }
                Op::SpMm { m, a } => {
                    let c = node.cols;
                    let mut da = vec![0f64; m.n_cols * c];
                    m.mul_dense_transposed(&g, c, &mut da);
                    accumulate(&mut grads[*a], &da);
                }
                Op::ConcatCols { xs } => {
                    let r = node.rows;
                    let mut start = 0;
                    for &x in xs {
                        let c = self.shape(x).1;
                        let mut dx = vec![0f64; r * c];
                        for i2 in 0..r {
                            dx[i2 * c..(i2 + 1) * c].copy_from_slice(
                                &g[i2 * node.cols + start..i2 * node.cols + start + c],
                            );
                        }
                        accumulate(&mut grads[x], &dx);
                        start += c;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let (ar, ac) = self.shape(*a);
                    ensure_zeros(&mut grads[*a], ar * ac);
                    let dst = &mut grads[*a];
                    for i2 in 0..node.rows {
                        for j in 0..*len {
                            dst[i2 * ac + start + j] += g[i2 * len + j];
                        }
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let (r, c) = self.shape(*logits);
                    let scale = g[0] / r as f64;
                    let mut dl = vec![0f64; r * c];
                    for (i2, &t) in targets.iter().enumerate() {
                        let row = &self.nodes[*logits].values[i2 * c..(i2 + 1) * c];
                        softmax_into(row, None, &mut dl[i2 * c..(i2 + 1) * c]);
                        for v in &mut dl[i2 * c..(i2 + 1) * c] {
                            *v *= scale;
                        }
                        dl[i2 * c + t] -= scale;
                    }
                    accumulate(&mut grads[*logits], &dl);
                }
                Op::BceWithLogits { z, labels, mean } => {
                    let scale = if *mean {
                        g[0] / labels.len() as f64
                    } else {
                        g[0]
                    };
                    let dz: Vec<f64> = self.nodes[*z]
                        .values
                        .iter()
                        .zip(labels)
                        .map(|(&zi, &yi)| (sigmoid(zi) - yi) * scale)
                        .collect();
                    accumulate(&mut grads[*z], &dz);
                }
                Op::Dropout { a, mask } => {
                    let da: Vec<f64> = g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::WeightedSum { xs, ws } => {
                    for (&x, &w) in xs.iter().zip(ws) {
                        accumulate(&mut grads[x], &[w * g[0]]);
                    }
                }
            }
            grads[i] = g;
        }

        Gradients { grads }
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to node `id`; `None` when the
    /// loss does not depend on it.
    pub fn get(&self, id: Id) -> Option<&[f64]> {
        let g = &self.grads[id];
        if g.is_empty() { None } else { Some(g) }
    }
}

fn ensure_zeros(v: &mut Vec<f64>, len: usize) {
    if v.is_empty() {
        v.resize(len, 0.0);
    } else {
        debug_assert_eq!(v.len(), len);
    }
}

fn accumulate(dst: &mut Vec<f64>, src: &[f64]) {
    if dst.is_empty() {
        dst.extend_from_slice(src);
    } else {
        debug_assert_eq!(dst.len(), src.len());
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Row-major `A (m x k) * B (k x n)` into `out (m x n)`, i-k-j order.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let src = &b[kk * n..(kk + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += av * s;
            }
        }
    }
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0f64; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn eff(values: &[f64], r: usize, c: usize, t: bool) -> std::borrow::Cow<'_, [f64]> {
    if t {
        std::borrow::Cow::Owned(transpose(values, r, c))
    } else {
        std::borrow::Cow::Borrowed(values)
    }
}

fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn softmax_into(row: &[f64], col_mask: Option<&[f64]>, out: &mut [f64]) {
    let masked: Vec<f64> = match col_mask {
        Some(m) => row.iter().zip(m).map(|(x, b)| x + b).collect(),
        None => row.to_vec(),
    };
    let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(&masked) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Branch-stable logistic function; `sigmoid(-z)` and `1 - sigmoid(z)`
/// evaluate to the same floating-point expression.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * dt
}
