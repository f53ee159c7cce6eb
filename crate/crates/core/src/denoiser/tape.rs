//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! The tape records every operation of a forward pass together with its
//! output value. [`Tape::backward`] walks the records in reverse, pushing
//! upstream gradients into the operands. Only the operations the
//! transformer needs are provided.

use std::borrow::Cow;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    /// `a * b`
    fn matmul(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.cols, b.rows, "matmul inner dimensions");
        let mut out = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (l, &x) in a.row(i).iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                o.iter_mut().zip(b.row(l)).for_each(|(o, y)| *o += x * y);
            }
        }
        out
    }

    /// `a * b^T`
    fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.cols, b.cols, "matmul_nt inner dimensions");
        let mut out = Mat::zeros(a.rows, b.rows);
        for i in 0..a.rows {
            let ar = a.row(i);
            for j in 0..b.rows {
                out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `a^T * b`
    fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.rows, b.rows, "matmul_tn inner dimensions");
        let mut out = Mat::zeros(a.cols, b.cols);
        for l in 0..a.rows {
            let br = b.row(l);
            for (i, &x) in a.row(l).iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                out.data[i * b.cols..(i + 1) * b.cols]
                    .iter_mut()
                    .zip(br)
                    .for_each(|(o, y)| *o += x * y);
            }
        }
        out
    }

    fn col_sums(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for r in 0..self.rows {
            out.data.iter_mut().zip(self.row(r)).for_each(|(o, x)| *o += x);
        }
        out
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// Row softmax; `causal` masks column `j > i` in row `i`.
    Softmax { input: Var, causal: bool },
    /// Row-wise standardization; caches `1 / sigma` per row.
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Gelu(Var),
    LogSoftmax(Var),
    Gather { table: Var, index: Vec<usize> },
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
}

/// Operation record of one forward pass. Leaves may borrow their values
/// (model parameters) for the lifetime `'p`.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn param(&mut self, m: &'p Mat) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Cow::Owned(m), Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = Mat::matmul(self.value(a), self.value(b));
        self.push(Cow::Owned(v), Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = Mat::matmul_nt(self.value(a), self.value(b));
        self.push(Cow::Owned(v), Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Cow::Owned(v), Op::Add(a, b))
    }

    /// Adds the `1 x cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let row = self.value(b);
        assert_eq!((row.rows, row.cols), (1, v.cols), "add_row shape");
        for r in 0..v.rows {
            v.row_mut(r).iter_mut().zip(&row.data).for_each(|(x, y)| *x += y);
        }
        self.push(Cow::Owned(v), Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1 x cols` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let row = self.value(b);
        assert_eq!((row.rows, row.cols), (1, v.cols), "mul_row shape");
        for r in 0..v.rows {
            v.row_mut(r).iter_mut().zip(&row.data).for_each(|(x, y)| *x *= y);
        }
        self.push(Cow::Owned(v), Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(Cow::Owned(v), Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Cow::Owned(v), Op::AddConst(a))
    }

    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let live = if causal { (r + 1).min(row.len()) } else { row.len() };
            let max = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in &mut row[..live] {
                *x = (*x - max).exp();
                sum += *x;
            }
            row[..live].iter_mut().for_each(|x| *x /= sum);
            row[live..].iter_mut().for_each(|x| *x = 0.0);
        }
        self.push(Cow::Owned(v), Op::Softmax { input: a, causal })
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        self.push(Cow::Owned(v), Op::LayerNorm { input: a, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(Cow::Owned(v), Op::Gelu(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(Cow::Owned(v), Op::LogSoftmax(a))
    }

    /// Rows `index[i]` of `table`, stacked.
    pub fn gather_rows(&mut self, table: Var, index: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros(index.len(), t.cols);
        for (i, &r) in index.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(Cow::Owned(v), Op::Gather { table, index })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        let mut v = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            v.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(Cow::Owned(v), Op::SliceCols { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut c = 0;
            for &p in &parts {
                let src = self.value(p).row(r);
                v.row_mut(r)[c..c + src.len()].copy_from_slice(src);
                c += src.len();
            }
        }
        self.push(Cow::Owned(v), Op::ConcatCols(parts))
    }

    /// Propagates `seeds` (upstream gradients of chosen nodes) back through
    /// the tape. Returns one optional gradient per node; `None` means the
    /// node does not influence the seeded outputs.
    pub fn backward(&self, seeds: Vec<(Var, Mat)>) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, Mat::matmul_nt(&g, bv));
                    accumulate(&mut grads, *b, Mat::matmul_tn(av, &g));
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, Mat::matmul(&g, bv));
                    accumulate(&mut grads, *b, Mat::matmul_tn(&g, av));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, g.col_sums());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        let (gr, ar) = (g.row(r), av.row(r));
                        for c in 0..g.cols {
                            gb.data[c] += gr[c] * ar[c];
                        }
                        ga.row_mut(r).iter_mut().zip(&bv.data).for_each(|(x, y)| *x *= y);
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Softmax { input, causal } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let live = if *causal { (r + 1).min(y.cols) } else { y.cols };
                        let (yr, gr) = (&y.row(r)[..live], &g.row(r)[..live]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..live {
                            gx.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let n = y.cols as f64;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..y.cols {
                            gx.data[r * y.cols + c] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut gx = g.clone();
                    gx.data.iter_mut().zip(&x.data).for_each(|(gv, &x)| {
                        let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gv *= d;
                    });
                    accumulate(&mut grads, *a, gx);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for r in 0..y.rows {
                        let total: f64 = g.row(r).iter().sum();
                        gx.row_mut(r)
                            .iter_mut()
                            .zip(y.row(r))
                            .for_each(|(gv, &ly)| *gv -= ly.exp() * total);
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Gather { table, index } => {
                    let t = self.value(*table);
                    let mut gt = Mat::zeros(t.rows, t.cols);
                    for (i, &r) in index.iter().enumerate() {
                        gt.row_mut(r).iter_mut().zip(g.row(i)).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SliceCols { input, start } => {
                    let src = self.value(*input);
                    let mut gx = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut gp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c..c + w]);
                        }
                        accumulate(&mut grads, p, gp);
                        c += w;
                    }
                }
            }
            grads[i] = Some(g);
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
