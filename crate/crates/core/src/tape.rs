//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Only the operations
//! the detector needs are implemented.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// Adds a `block × d` matrix to every consecutive `block`-row slab.
    AddTiled(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Transpose(Var),
    Reshape(Var),
    SumRows(Var),
    SumAll(Var),
    MeanBlocks(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    RowNormalize(Var),
    Threshold(Var, f64),
    ZeroDiagonal(Var),
    LayerNorm(Var, Mat),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
    GatherDot {
        pred: Var,
        keys: Var,
        rows: Vec<usize>,
        cands: Arc<Vec<Vec<usize>>>,
    },
    SoftmaxXent {
        logits: Var,
        weights: Vec<f64>,
    },
    Bce {
        p: Var,
        y: Mat,
        eps: f64,
    },
    GroupMax {
        a: Var,
        argmax: Array2<usize>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Adjoint of `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Side of every kink the recorded values sit on: one entry per ReLU
    /// input and per thresholded score. Two runs of the same computation
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => sig.extend(self.value(a).iter().map(|&x| x > 0.0)),
                Op::Threshold(a, theta) => sig.extend(self.value(a).iter().map(|&x| x >= theta)),
                _ => {}
            }
        }
        sig
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row` with a `1 × n` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a ⊙ row` with a `1 × n` row broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Var {
        let t = self.value(tile);
        let block = t.nrows();
        let mut v = self.value(a).clone();
        assert_eq!(v.nrows() % block, 0, "add_tiled: rows not a multiple of the tile");
        for mut chunk in v.axis_chunks_iter_mut(Axis(0), block) {
            chunk += t;
        }
        self.push(v, Op::AddTiled(a, tile))
    }

    /// `a / col` with an `n × 1` column broadcast over every column of `a`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) / self.value(col);
        self.push(v, Op::DivCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Column sums as a `1 × n` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Mean over each consecutive block of `block` rows.
    pub fn mean_blocks(&mut self, a: Var, block: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows() % block, 0, "mean_blocks: rows not a multiple of block");
        let n = src.nrows() / block;
        let mut v = Mat::zeros((n, src.ncols()));
        for (i, chunk) in src.axis_chunks_iter(Axis(0), block).enumerate() {
            v.row_mut(i).assign(&(chunk.sum_axis(Axis(0)) / block as f64));
        }
        self.push(v, Op::MeanBlocks(a, block))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    /// Each row scaled to unit L2 norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        self.push(v, Op::RowNormalize(a))
    }

    /// `x` where `x ≥ θ`, else 0. Gradient flows only through kept entries.
    pub fn threshold(&mut self, a: Var, theta: f64) -> Var {
        let v = self.value(a).mapv(|x| if x >= theta { x } else { 0.0 });
        self.push(v, Op::Threshold(a, theta))
    }

    pub fn zero_diagonal(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.diag_mut().fill(0.0);
        self.push(v, Op::ZeroDiagonal(a))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let src = self.value(a);
        let d = src.ncols() as f64;
        let mut v = src.clone();
        let mut inv_std = Mat::zeros((src.nrows(), 1));
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            let is = 1.0 / (var + EPS).sqrt();
            row *= is;
            inv_std[[i, 0]] = is;
        }
        self.push(v, Op::LayerNorm(a, inv_std))
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// every consecutive `block`-row slab. `mask[i][j]` permits row `i` to
    /// attend to row `j`; every row must permit at least one position.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, block: usize, heads: usize, mask: &Array2<bool>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        assert!(n % block == 0 && d % heads == 0, "attention: bad block or head split");
        assert_eq!(mask.dim(), (block, block));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((n, d));
        let mut probs = Vec::with_capacity(n / block * heads);
        for b in 0..n / block {
            let rows = b * block..(b + 1) * block;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![rows.clone(), cols.clone()]);
                let kb = kv.slice(s![rows.clone(), cols.clone()]);
                let vb = vv.slice(s![rows.clone(), cols.clone()]);
                let mut scores = qb.dot(&kb.t()) * scale;
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..block {
                        if mask[[i, j]] {
                            max = max.max(row[j]);
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..block {
                        let e = if mask[[i, j]] { (row[j] - max).exp() } else { 0.0 };
                        row[j] = e;
                        sum += e;
                    }
                    row /= sum;
                }
                out.slice_mut(s![rows.clone(), cols]).assign(&scores.dot(&vb));
                probs.push(scores);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                block,
                heads,
                probs,
            },
        )
    }

    /// `out[r][c] = pred[rows[r]] · keys[cands[r][c]]`.
    pub fn gather_dot(&mut self, pred: Var, keys: Var, rows: Vec<usize>, cands: Arc<Vec<Vec<usize>>>) -> Var {
        let (pv, kv) = (self.value(pred), self.value(keys));
        let width = cands.first().map_or(0, |c| c.len());
        let mut out = Mat::zeros((rows.len(), width));
        for (r, (&row, cand)) in rows.iter().zip(cands.iter()).enumerate() {
            assert_eq!(cand.len(), width, "gather_dot: ragged candidates");
            let p = pv.row(row);
            for (c, &key) in cand.iter().enumerate() {
                out[[r, c]] = p.dot(&kv.row(key));
            }
        }
        self.push(out, Op::GatherDot { pred, keys, rows, cands })
    }

    /// `Σ_r w_r · (logsumexp(logits[r]) − logits[r][0])`: weighted
    /// cross-entropy with the target in column 0.
    pub fn softmax_xent(&mut self, logits: Var, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), weights.len());
        let mut total = 0.0;
        for (row, &w) in lv.rows().into_iter().zip(&weights) {
            total += w * (logsumexp(row.iter().copied()) - row[0]);
        }
        self.push(Array2::from_elem((1, 1), total), Op::SoftmaxXent { logits, weights })
    }

    /// Summed binary cross-entropy of probabilities `p` against `y`, with
    /// `p` clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, p: Var, y: Mat, eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), y.dim(), "bce: shape mismatch");
        let total = bce_sum(pv, &y, eps);
        self.push(Array2::from_elem((1, 1), total), Op::Bce { p, y, eps })
    }

    /// Coordinate-wise max of the rows in each group.
    pub fn group_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let av = self.value(a);
        let d = av.ncols();
        let mut out = Mat::zeros((groups.len(), d));
        let mut argmax = Array2::<usize>::zeros((groups.len(), d));
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "group_max: empty group");
            for i in 0..d {
                let mut best = members[0];
                for &m in &members[1..] {
                    if av[[m, i]] > av[[best, i]] {
                        best = m;
                    }
                }
                out[[g, i]] = av[[best, i]];
                argmax[[g, i]] = best;
            }
        }
        self.push(out, Op::GroupMax { a, argmax })
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.nodes[loss.0].value.dim()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, d: Mat| accumulate(&mut grads, v, d);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g.clone());
                }
                Op::MulRow(a, row) => {
                    acc(*row, (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, &g * self.value(*row));
                }
                Op::AddTiled(a, tile) => {
                    let block = self.value(*tile).nrows();
                    let mut gt = Mat::zeros(self.value(*tile).dim());
                    for chunk in g.axis_chunks_iter(Axis(0), block) {
                        gt += &chunk;
                    }
                    acc(*tile, gt);
                    acc(*a, g.clone());
                }
                Op::DivCol(a, col) => {
                    let c = self.value(*col);
                    let ga = &g / c;
                    let gc = -(&ga * &node.value).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*col, gc);
                    acc(*a, ga);
                }
                Op::Scale(a, c) => acc(*a, &g * *c),
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let d = &g * &node.value.mapv(|s| s * (1.0 - s));
                    acc(*a, d);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(*a, Array2::from_shape_vec((r, c), flat).unwrap());
                }
                Op::SumRows(a) => {
                    let n = self.value(*a).nrows();
                    let d = g.broadcast((n, g.ncols())).unwrap().to_owned();
                    acc(*a, d);
                }
                Op::SumAll(a) => acc(*a, Mat::from_elem(self.value(*a).dim(), g[[0, 0]])),
                Op::MeanBlocks(a, block) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (i, mut chunk) in d.axis_chunks_iter_mut(Axis(0), *block).enumerate() {
                        chunk += &(g.row(i).to_owned() / *block as f64);
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d);
                }
                Op::RowNormalize(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = Mat::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let n = x.row(i).dot(&x.row(i)).sqrt();
                        if n > 0.0 {
                            let gy = g.row(i).dot(&y.row(i));
                            let row = (&g.row(i) - &(&y.row(i) * gy)) / n;
                            d.row_mut(i).assign(&row);
                        }
                    }
                    acc(*a, d);
                }
                Op::Threshold(a, theta) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x < *theta {
                            *d = 0.0;
                        }
                    });
                    acc(*a, d);
                }
                Op::ZeroDiagonal(a) => {
                    let mut d = g.clone();
                    d.diag_mut().fill(0.0);
                    acc(*a, d);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let dcols = y.ncols() as f64;
                    let mut d = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mean_g = gr.sum() / dcols;
                        let mean_gy = gr.dot(&yr) / dcols;
                        let row = (&gr - mean_g - &(&yr * mean_gy)) * inv_std[[i, 0]];
                        d.row_mut(i).assign(&row);
                    }
                    acc(*a, d);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    block,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, dm) = qv.dim();
                    let dh = dm / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (mut dq, mut dk, mut dv) = (Mat::zeros((n, dm)), Mat::zeros((n, dm)), Mat::zeros((n, dm)));
                    for b in 0..n / block {
                        let rows = b * block..(b + 1) * block;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let qb = qv.slice(s![rows.clone(), cols.clone()]);
                            let kb = kv.slice(s![rows.clone(), cols.clone()]);
                            let vb = vv.slice(s![rows.clone(), cols.clone()]);
                            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vb.t());
                            let mut ds = Mat::zeros(p.dim());
                            for i in 0..*block {
                                let inner = dp.row(i).dot(&p.row(i));
                                for j in 0..*block {
                                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - inner) * scale;
                                }
                            }
                            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kb));
                            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qb));
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::GatherDot { pred, keys, rows, cands } => {
                    let (pv, kv) = (self.value(*pred), self.value(*keys));
                    let mut dp = Mat::zeros(pv.dim());
                    let mut dk = Mat::zeros(kv.dim());
                    for (r, (&row, cand)) in rows.iter().zip(cands.iter()).enumerate() {
                        for (c, &key) in cand.iter().enumerate() {
                            let w = g[[r, c]];
                            if w == 0.0 {
                                continue;
                            }
                            let kr = kv.row(key).to_owned();
                            let pr = pv.row(row).to_owned();
                            dp.row_mut(row).scaled_add(w, &kr);
                            dk.row_mut(key).scaled_add(w, &pr);
                        }
                    }
                    acc(*pred, dp);
                    acc(*keys, dk);
                }
                Op::SoftmaxXent { logits, weights } => {
                    let lv = self.value(*logits);
                    let mut d = Mat::zeros(lv.dim());
                    for (i, row) in lv.rows().into_iter().enumerate() {
                        let lse = logsumexp(row.iter().copied());
                        for j in 0..row.len() {
                            d[[i, j]] = (row[j] - lse).exp();
                        }
                        d[[i, 0]] -= 1.0;
                        let w = weights[i] * g[[0, 0]];
                        d.row_mut(i).mapv_inplace(|x| x * w);
                    }
                    acc(*logits, d);
                }
                Op::Bce { p, y, eps } => {
                    let pv = self.value(*p);
                    let mut d = Mat::zeros(pv.dim());
                    Zip::from(&mut d).and(pv).and(y).for_each(|d, &p, &y| {
                        if p > *eps && p < 1.0 - eps {
                            *d = -(y / p - (1.0 - y) / (1.0 - p));
                        }
                    });
                    acc(*p, d * g[[0, 0]]);
                }
                Op::GroupMax { a, argmax } => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for ((gi, i), &m) in argmax.indexed_iter() {
                        d[[m, i]] += g[[gi, i]];
                    }
                    acc(*a, d);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut grads[v.0] {
        Some(g) => *g += &d,
        slot @ None => *slot = Some(d),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn bce_sum(p: &Mat, y: &Mat, eps: f64) -> f64 {
    p.iter()
        .zip(y.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn kink_signature_tracks_relu_and_threshold_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(Mat::from_shape_vec((1, 3), vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(a);
        tape.threshold(r, 1.0);
        assert_eq!(tape.kink_signature(), vec![false, false, true, false, false, true]);
    }

    /// Central-difference check of d(loss)/d(input) for a graph built by `f`.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |inputs: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
            let o = f(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(m.dim()));
            for idx in 0..m.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} entry {idx}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let row = rand_mat(&mut rng, 1, 2);
        let col = rand_mat(&mut rng, 3, 1).mapv(|x| x.abs() + 0.5);
        check(vec![a, b, row, col], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let m = t.mul_row(m, v[2]);
            let m = t.div_col(m, v[3]);
            let s = t.sigmoid(m);
            let tr = t.transpose(s);
            let r = t.reshape(tr, 3, 2);
            let sq = t.mul(r, r);
            let sum = t.sum_rows(sq);
            let sc = t.scale(sum, 1.7);
            let sc = t.add_scalar(sc, 0.3);
            t.sum_all(sc)
        });
    }

    #[test]
    fn structural_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 6, 3);
        let b = rand_mat(&mut rng, 6, 2);
        let tile = rand_mat(&mut rng, 2, 5);
        check(vec![a, b, tile], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let c = t.add_tiled(c, v[2]);
            let top = t.slice_rows(c, 0, 2);
            let all = t.concat_rows(&[c, top]);
            let m = t.mean_blocks(all, 4);
            let ln = t.layer_norm(m);
            let w = t.mul(ln, m);
            let g = t.group_max(w, &[vec![0], vec![1]]);
            let r = t.relu(g);
            t.sum_all(r)
        });
    }

    #[test]
    fn normalize_threshold_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 4, 3);
        check(vec![a, b], |t, v| {
            let na = t.row_normalize(v[0]);
            let nb = t.row_normalize(v[1]);
            let nbt = t.transpose(nb);
            let s = t.matmul(na, nbt);
            let s = t.zero_diagonal(s);
            let s = t.threshold(s, -2.0);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        });
    }

    #[test]
    fn attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_mat(&mut rng, 8, 4);
        let k = rand_mat(&mut rng, 8, 4);
        let v = rand_mat(&mut rng, 8, 4);
        let mask = Array2::from_shape_fn((4, 4), |(i, j)| j <= i);
        let w = rand_mat(&mut rng, 8, 4);
        check(vec![q, k, v, w], move |t, x| {
            let o = t.attention(x[0], x[1], x[2], 4, 2, &mask);
            let o = t.mul(o, x[3]);
            t.sum_all(o)
        });
    }

    #[test]
    fn contrastive_and_bce_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = rand_mat(&mut rng, 3, 4);
        let keys = rand_mat(&mut rng, 5, 4);
        let logits = rand_mat(&mut rng, 2, 3);
        let cands = Arc::new(vec![vec![0, 1, 2], vec![3, 4, 0], vec![2, 2, 1]]);
        check(vec![pred, keys, logits], move |t, x| {
            let l = t.gather_dot(x[0], x[1], vec![0, 2, 1], cands.clone());
            let a = t.softmax_xent(l, vec![0.5, 1.0, 2.0]);
            let p = t.sigmoid(x[2]);
            let y = Mat::from_shape_vec((2, 3), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
            let b = t.bce(p, y, 1e-7);
            t.add(a, b)
        });
    }

    #[test]
    fn zero_rows_normalize_to_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::zeros((2, 3)));
        let n = t.row_normalize(a);
        assert!(t.value(n).iter().all(|&x| x == 0.0));
        let s = t.sum_all(n);
        let g = t.backward(s);
        assert!(g.get(a).unwrap().iter().all(|&x| x == 0.0));
    }
}
