use std::sync::Arc;

use ndarray::{Axis, Zip};

use crate::graph::CsrAdjacency;
use crate::{shape, CieError, Matrix, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Saved state for one head of graph attention over a set of target rows.
#[derive(Debug)]
struct GatSaved {
    targets: Vec<usize>,
    slope: f64,
    /// Per target: neighbour ids (self excluded), in attention order after
    /// the leading self entry.
    nbrs: Vec<Vec<usize>>,
    /// Per target: attention weights `[self, nbrs...]`.
    alpha: Vec<Vec<f64>>,
    /// Per target: whether each pre-activation score was positive.
    positive: Vec<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SpMM(Arc<CsrAdjacency>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// `a[m×n] ⊙ col[m×1]` broadcast over columns.
    MulCol(Var, Var),
    /// `a[m×n] + row[1×n]` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Arc<Matrix>),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    PairwiseSqDist(Var),
    DoubleCenter(Var),
    Gat {
        wh: Var,
        t: Var,
        q_s: Var,
        q_wh: Var,
        q_t: Var,
        saved: Box<GatSaved>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Append-only record of a forward computation.
///
/// Every operation's parents are recorded before it, so reverse recording
/// order is a valid topological order for the backward sweep. A tape is
/// single-threaded and meant to be rebuilt for each forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Matrix, b: &Matrix) -> CieError {
    CieError::Dimension {
        op,
        left: shape(a),
        right: shape(b),
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Matrix::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(dim_err("matmul", va, vb));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    /// Sparse-dense product `adj · b`.
    pub fn spmm(&mut self, adj: Arc<CsrAdjacency>, b: Var) -> Result<Var> {
        let vb = self.value(b);
        if adj.num_nodes() != vb.nrows() {
            return Err(CieError::Dimension {
                op: "spmm",
                left: (adj.num_nodes(), adj.num_nodes()),
                right: shape(vb),
            });
        }
        let out = sparse_mul(&adj, vb);
        Ok(self.push(out, Op::SpMM(adj, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(dim_err(op, va, vb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    /// Multiplies each row of `a` by the matching entry of the column
    /// vector `col` (`m×1`), broadcasting it across the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(dim_err("mul_col", va, vc));
        }
        let out = va * vc;
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    /// Adds the row vector `row` (`1×n`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(dim_err("add_row", va, vr));
        }
        let out = va + vr;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) + s;
        self.push(out, Op::AddScalar(a))
    }

    /// Elementwise product with a constant matrix (no gradient to `mask`).
    pub fn mul_const(&mut self, a: Var, mask: Arc<Matrix>) -> Result<Var> {
        let va = self.value(a);
        if va.dim() != mask.dim() {
            return Err(dim_err("mul_const", va, &mask));
        }
        let out = va * &*mask;
        Ok(self.push(out, Op::MulConst(a, mask)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).mapv(|x| leaky(x, slope));
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if let Some(x) = va.iter().find(|&&x| !(x > 0.0)) {
            return Err(CieError::Domain {
                op: "log",
                detail: format!("non-positive entry {x}"),
            });
        }
        let out = va.mapv(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    /// Elementwise `a^p`. Entries must be positive unless `p` is a
    /// non-negative integer.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let va = self.value(a);
        let integral = p >= 0.0 && p.fract() == 0.0;
        if !integral {
            if let Some(x) = va.iter().find(|&&x| !(x > 0.0)) {
                return Err(CieError::Domain {
                    op: "powf",
                    detail: format!("entry {x} raised to non-integer power {p}"),
                });
            }
        }
        let out = va.mapv(|x| x.powf(p));
        Ok(self.push(out, Op::Powf(a, p)))
    }

    /// Row-wise softmax, computed after subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.ncols() == 0 {
            return Err(CieError::Contract("softmax over zero columns".into()));
        }
        if va.iter().any(|x| !x.is_finite()) {
            return Err(CieError::Domain {
                op: "softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        let out = softmax(va);
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (m, c) = vl.dim();
        if labels.len() != m {
            return Err(CieError::Dimension {
                op: "cross_entropy",
                left: (m, c),
                right: (labels.len(), 1),
            });
        }
        if m == 0 {
            return Err(CieError::Contract("cross entropy over zero rows".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(CieError::Index {
                what: "class labels",
                index: y,
                bound: c,
            });
        }
        let mut loss = 0.0;
        for (row, &y) in vl.rows().into_iter().zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let probs = softmax(vl);
        let out = Matrix::from_elem((1, 1), loss / m as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&r) = rows.iter().find(|&&r| r >= va.nrows()) {
            return Err(CieError::Index {
                what: "rows",
                index: r,
                bound: va.nrows(),
            });
        }
        let out = va.select(Axis(0), rows);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec())))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.ncols() {
            return Err(CieError::Index {
                what: "columns",
                index: start + len,
                bound: va.ncols(),
            });
        }
        let out = va.slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).map_err(|_| CieError::Dimension {
            op: "concat_cols",
            left: self.shape(parts[0]),
            right: parts
                .iter()
                .map(|&p| self.shape(p))
                .find(|s| s.0 != self.shape(parts[0]).0)
                .unwrap_or((0, 0)),
        })?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// `D[i, j] = ‖x_i − x_j‖²` over the rows of `x`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Var {
        let out = sq_dists(self.value(x));
        self.push(out, Op::PairwiseSqDist(x))
    }

    /// `R K R` with the centring matrix `R = I − 11ᵀ/m`, for square `K`.
    pub fn double_center(&mut self, k: Var) -> Result<Var> {
        let vk = self.value(k);
        if vk.nrows() != vk.ncols() {
            return Err(dim_err("double_center", vk, vk));
        }
        let out = center(vk);
        Ok(self.push(out, Op::DoubleCenter(k)))
    }

    /// One attention head evaluated at `targets`.
    ///
    /// For target row `r` (node `i = targets[r]`) the neighbourhood is `i`
    /// itself plus its neighbours in `adj` (self entries in `adj` are
    /// skipped). Scores are `leaky(q_s[r] + q_t[r])` for the self entry and
    /// `leaky(q_s[r] + t[j])` for neighbour `j`; the output row is
    /// `α_self · q_wh[r] + Σ_j α_j · wh[j]`.
    ///
    /// For ordinary attention pass `targets = 0..N`, `q_wh = wh`, `q_t = t`.
    /// Passing different query rows evaluates node `i` as if its own input
    /// row had been replaced.
    #[allow(clippy::too_many_arguments)]
    pub fn gat_attention(
        &mut self,
        adj: Arc<CsrAdjacency>,
        targets: &[usize],
        wh: Var,
        t: Var,
        q_s: Var,
        q_wh: Var,
        q_t: Var,
        slope: f64,
    ) -> Result<Var> {
        let n = adj.num_nodes();
        let (vwh, vt) = (self.value(wh), self.value(t));
        let (vqs, vqwh, vqt) = (self.value(q_s), self.value(q_wh), self.value(q_t));
        let f = vwh.ncols();
        let m = targets.len();
        if vwh.nrows() != n || vt.dim() != (n, 1) {
            return Err(dim_err("gat_attention", vwh, vt));
        }
        if vqs.dim() != (m, 1) || vqt.dim() != (m, 1) || vqwh.dim() != (m, f) {
            return Err(dim_err("gat_attention", vqwh, vqs));
        }
        if let Some(&i) = targets.iter().find(|&&i| i >= n) {
            return Err(CieError::Index {
                what: "attention targets",
                index: i,
                bound: n,
            });
        }
        let mut out = Matrix::zeros((m, f));
        let mut nbrs_all = Vec::with_capacity(m);
        let mut alpha_all = Vec::with_capacity(m);
        let mut pos_all = Vec::with_capacity(m);
        for (r, &i) in targets.iter().enumerate() {
            let nbrs: Vec<usize> = adj.neighbors(i).iter().copied().filter(|&j| j != i).collect();
            let qs = vqs[[r, 0]];
            let mut pre = Vec::with_capacity(nbrs.len() + 1);
            pre.push(qs + vqt[[r, 0]]);
            pre.extend(nbrs.iter().map(|&j| qs + vt[[j, 0]]));
            let scores: Vec<f64> = pre.iter().map(|&u| leaky(u, slope)).collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut alpha: Vec<f64> = scores.iter().map(|&e| (e - max).exp()).collect();
            let z: f64 = alpha.iter().sum();
            alpha.iter_mut().for_each(|a| *a /= z);
            let mut row = out.row_mut(r);
            row.scaled_add(alpha[0], &vqwh.row(r));
            for (&j, &a) in nbrs.iter().zip(&alpha[1..]) {
                row.scaled_add(a, &vwh.row(j));
            }
            pos_all.push(pre.iter().map(|&u| u > 0.0).collect());
            nbrs_all.push(nbrs);
            alpha_all.push(alpha);
        }
        let saved = Box::new(GatSaved {
            targets: targets.to_vec(),
            slope,
            nbrs: nbrs_all,
            alpha: alpha_all,
            positive: pos_all,
        });
        Ok(self.push(
            out,
            Op::Gat {
                wh,
                t,
                q_s,
                q_wh,
                q_t,
                saved,
            },
        ))
    }

    /// Attention weights saved by a [`Tape::gat_attention`] node, per target
    /// row as `(self weight, [(neighbour, weight)])`.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<(f64, Vec<(usize, f64)>)>> {
        match &self.nodes[v.0].op {
            Op::Gat { saved, .. } => Some(
                saved
                    .alpha
                    .iter()
                    .zip(&saved.nbrs)
                    .map(|(a, nb)| (a[0], nb.iter().copied().zip(a[1..].iter().copied()).collect()))
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(CieError::Contract(format!(
                "backward needs a 1×1 loss, got {r}×{c}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&val(*b).t()));
                acc(grads, *b, val(*a).t().dot(g));
            }
            Op::Transpose(a) => acc(grads, *a, g.t().to_owned()),
            Op::SpMM(adj, b) => acc(grads, *b, sparse_mul_transposed(adj, g)),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::Hadamard(a, b) => {
                acc(grads, *a, g * val(*b));
                acc(grads, *b, g * val(*a));
            }
            Op::MulCol(a, col) => {
                acc(grads, *a, g * val(*col));
                let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(grads, *col, gc);
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, s) => acc(grads, *a, g * *s),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::MulConst(a, mask) => acc(grads, *a, g * &**mask),
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= *slope;
                    }
                });
                acc(grads, *a, d);
            }
            Op::Exp(a) => acc(grads, *a, g * &node.value),
            Op::Log(a) => acc(grads, *a, g / val(*a)),
            Op::Powf(a, p) => {
                let d = val(*a).mapv(|x| p * x.powf(p - 1.0));
                acc(grads, *a, g * &d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(grads, *a, y * &(g - &dot));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len() as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[[r, y]] -= 1.0;
                }
                acc(grads, *logits, d * (g[[0, 0]] / m));
            }
            Op::Sum(a) => acc(grads, *a, Matrix::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::GatherRows(a, rows) => {
                let mut d = Matrix::zeros(val(*a).dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    dst += &g.row(r);
                }
                acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Matrix::zeros(val(*a).dim());
                d.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                    .assign(g);
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(grads, p, g.slice(ndarray::s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::PairwiseSqDist(x) => {
                let s = g + &g.t();
                let vx = val(*x);
                let rowsum = s.sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = (vx * &rowsum - s.dot(vx)) * 2.0;
                acc(grads, *x, d);
            }
            Op::DoubleCenter(k) => acc(grads, *k, center(g)),
            Op::Gat {
                wh,
                t,
                q_s,
                q_wh,
                q_t,
                saved,
            } => {
                let (vwh, vqwh) = (val(*wh), val(*q_wh));
                let mut d_wh = Matrix::zeros(vwh.dim());
                let mut d_t = Matrix::zeros((vwh.nrows(), 1));
                let mut d_qwh = Matrix::zeros(vqwh.dim());
                let mut d_qs = Matrix::zeros((saved.targets.len(), 1));
                let mut d_qt = Matrix::zeros((saved.targets.len(), 1));
                for r in 0..saved.targets.len() {
                    let gr = g.row(r);
                    let alpha = &saved.alpha[r];
                    let nbrs = &saved.nbrs[r];
                    let mut d_alpha = Vec::with_capacity(alpha.len());
                    d_alpha.push(gr.dot(&vqwh.row(r)));
                    d_qwh.row_mut(r).scaled_add(alpha[0], &gr);
                    for (&j, &a) in nbrs.iter().zip(&alpha[1..]) {
                        d_alpha.push(gr.dot(&vwh.row(j)));
                        d_wh.row_mut(j).scaled_add(a, &gr);
                    }
                    let mean: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
                    for (k, (&a, &da)) in alpha.iter().zip(&d_alpha).enumerate() {
                        let de = a * (da - mean);
                        let du = if saved.positive[r][k] { de } else { de * saved.slope };
                        d_qs[[r, 0]] += du;
                        if k == 0 {
                            d_qt[[r, 0]] += du;
                        } else {
                            d_t[[nbrs[k - 1], 0]] += du;
                        }
                    }
                }
                acc(grads, *wh, d_wh);
                acc(grads, *t, d_t);
                acc(grads, *q_s, d_qs);
                acc(grads, *q_wh, d_qwh);
                acc(grads, *q_t, d_qt);
            }
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(g) => *g += &d,
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

pub(crate) fn sparse_mul(adj: &CsrAdjacency, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros((adj.num_nodes(), b.ncols()));
    for u in 0..adj.num_nodes() {
        let mut row = out.row_mut(u);
        for (&v, &w) in adj.neighbors(u).iter().zip(adj.row_weights(u)) {
            row.scaled_add(w, &b.row(v));
        }
    }
    out
}

fn sparse_mul_transposed(adj: &CsrAdjacency, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros((adj.num_nodes(), g.ncols()));
    for u in 0..adj.num_nodes() {
        let gu = g.row(u);
        for (&v, &w) in adj.neighbors(u).iter().zip(adj.row_weights(u)) {
            out.row_mut(v).scaled_add(w, &gu);
        }
    }
    out
}

pub(crate) fn sq_dists(x: &Matrix) -> Matrix {
    let m = x.nrows();
    let g = x.dot(&x.t());
    let mut d = Matrix::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            // the expansion can round slightly below zero for near-equal rows
            let s = (g[[i, i]] + g[[j, j]] - 2.0 * g[[i, j]]).max(0.0);
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

pub(crate) fn center(k: &Matrix) -> Matrix {
    let m = k.nrows() as f64;
    let row_mean = k.sum_axis(Axis(1)) / m;
    let col_mean = k.sum_axis(Axis(0)) / m;
    let grand = row_mean.sum() / m;
    let mut out = k.clone();
    Zip::indexed(&mut out).for_each(|(i, j), v| {
        *v = *v - row_mean[i] - col_mean[j] + grand;
    });
    out
}
