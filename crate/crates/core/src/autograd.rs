//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every op evaluates eagerly and records enough to run its vector-Jacobian
//! product. Parameters live in a [`ParamStore`] outside the tape; a forward
//! pass binds them with [`Graph::param`] and [`Gradients::param_grads`] folds
//! the per-use gradients back onto parameter ids.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub group: ParamGroup,
    /// Biases and layer-norm weights are excluded from weight decay.
    pub decay: bool,
}

/// Named, ordered parameter registry.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Matrix,
        group: ParamGroup,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            decay,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    ParamGather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    LeakyRelu(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    PoolRows(Var, Vec<Range<usize>>),
    Rope(Var, Vec<usize>, f64),
    SumAll(Var),
    /// Scalar output with precomputed local gradients for each input.
    Fused(Vec<(Var, Matrix)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Tape of eagerly evaluated operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant or an input whose gradient may be queried after backward.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Row lookup into a parameter table without copying the whole table.
    pub fn param_rows(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Var {
        let value = store.get(id).select_rows(rows);
        self.push(value, Op::ParamGather(id, rows.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a 1×c row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a single row");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x *= b;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let s = crate::tensor::softmax(x.row(i));
            v.row_mut(i).copy_from_slice(&s);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in normed.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = normed.clone();
        for i in 0..rows {
            for ((o, gv), bv) in out.row_mut(i).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "column slice out of bounds");
        let mut v = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            v.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let v = Matrix::from_vec(rows, cols, data);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                v.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let v = self.value(a).select_rows(indices);
        self.push(v, Op::SelectRows(a, indices.to_vec()))
    }

    /// One output row per range: the mean of the covered input rows.
    pub fn pool_rows(&mut self, a: Var, ranges: &[Range<usize>]) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros(ranges.len(), x.cols());
        for (o, r) in ranges.iter().enumerate() {
            assert!(
                !r.is_empty() && r.end <= x.rows(),
                "bad pooling range {r:?}"
            );
            let inv = 1.0 / r.len() as f64;
            for k in r.clone() {
                for (acc, val) in v.row_mut(o).iter_mut().zip(x.row(k)) {
                    *acc += val * inv;
                }
            }
        }
        self.push(v, Op::PoolRows(a, ranges.to_vec()))
    }

    /// Rotary transform of each row by its position.
    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), positions.len(), "one position per row");
        let mut v = x.clone();
        for (i, &p) in positions.iter().enumerate() {
            rotate_in_place(v.row_mut(i), p as f64, base);
        }
        self.push(v, Op::Rope(a, positions.to_vec(), base))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Sum of several scalars.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to each input.
    pub fn fused_scalar(&mut self, value: f64, local: Vec<(Var, Matrix)>) -> Var {
        for (v, g) in &local {
            assert_eq!(self.shape(*v), g.shape(), "fused gradient shape mismatch");
        }
        self.push(Matrix::scalar(value), Op::Fused(local))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, d: Matrix| accumulate(&mut grads, v, d);
            match &node.op {
                Op::Leaf | Op::Param(_) | Op::ParamGather(..) => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(self.value(*b)));
                    acc(*b, self.value(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.matmul(self.value(*b)));
                    acc(*b, g.t_matmul(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.col_sums());
                    acc(*a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    let x = self.value(*a);
                    let mut da = g.clone();
                    let mut dr = Matrix::zeros(1, r.cols());
                    for i in 0..g.rows() {
                        for c in 0..g.cols() {
                            da[(i, c)] = g[(i, c)] * r[(0, c)];
                            dr[(0, c)] += g[(i, c)] * x[(i, c)];
                        }
                    }
                    acc(*a, da);
                    acc(*row, dr);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y)),
                Op::LeakyRelu(a, slope) => {
                    let d = g.zip_map(
                        self.value(*a),
                        |gv, x| if x > 0.0 { gv } else { gv * slope },
                    );
                    acc(*a, d);
                }
                Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x))),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let inner = dot(g.row(i), y.row(i));
                        for c in 0..y.cols() {
                            d[(i, c)] = y[(i, c)] * (g[(i, c)] - inner);
                        }
                    }
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let (rows, cols) = normed.shape();
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let mut dn = vec![0.0; cols];
                        for c in 0..cols {
                            dgamma[(0, c)] += g[(i, c)] * normed[(i, c)];
                            dn[c] = g[(i, c)] * gam[(0, c)];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                        let mean_dn_n = dot(&dn, normed.row(i)) / cols as f64;
                        for c in 0..cols {
                            dx[(i, c)] =
                                inv_std[i] * (dn[c] - mean_dn - normed[(i, c)] * mean_dn_n);
                        }
                    }
                    acc(*beta, g.col_sums());
                    acc(*gamma, dgamma);
                    acc(*x, dx);
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for i in 0..g.rows() {
                        d.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        d.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = self.shape(p).0;
                        acc(p, g.slice_rows(off, r));
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut d = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + cols]);
                        }
                        acc(p, d);
                        off += cols;
                    }
                }
                Op::SelectRows(a, indices) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for (o, &i) in indices.iter().enumerate() {
                        for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                            *dv += gv;
                        }
                    }
                    acc(*a, d);
                }
                Op::PoolRows(a, ranges) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for (o, r) in ranges.iter().enumerate() {
                        let inv = 1.0 / r.len() as f64;
                        for k in r.clone() {
                            for (dv, gv) in d.row_mut(k).iter_mut().zip(g.row(o)) {
                                *dv += gv * inv;
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::Rope(a, positions, base) => {
                    let mut d = g.clone();
                    for (i, &p) in positions.iter().enumerate() {
                        rotate_in_place(d.row_mut(i), -(p as f64), *base);
                    }
                    acc(*a, d);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(*a, Matrix::filled(rows, cols, g.item()));
                }
                Op::Fused(local) => {
                    let s = g.item();
                    for (v, lg) in local {
                        acc(*v, lg.scale(s));
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Sums gradients of every use of each parameter.
    pub fn param_grads(&self, graph: &Graph, store: &ParamStore) -> BTreeMap<ParamId, Matrix> {
        let mut out: BTreeMap<ParamId, Matrix> = BTreeMap::new();
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            let Some(g) = g else { continue };
            match &node.op {
                Op::Param(id) => match out.get_mut(id) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.insert(*id, g.clone());
                    }
                },
                Op::ParamGather(id, rows) => {
                    let full = out.entry(*id).or_insert_with(|| {
                        let (r, c) = store.get(*id).shape();
                        Matrix::zeros(r, c)
                    });
                    for (o, &r) in rows.iter().enumerate() {
                        for (dv, gv) in full.row_mut(r).iter_mut().zip(g.row(o)) {
                            *dv += gv;
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// Rotates consecutive coordinate pairs `(2t, 2t+1)` by `pos · base^(-2t/h)`.
pub(crate) fn rotate_in_place(v: &mut [f64], pos: f64, base: f64) {
    let h = v.len();
    debug_assert!(h.is_multiple_of(2));
    for t in 0..h / 2 {
        let theta = base.powf(-2.0 * t as f64 / h as f64);
        let (s, c) = (pos * theta).sin_cos();
        let (a, b) = (v[2 * t], v[2 * t + 1]);
        v[2 * t] = a * c - b * s;
        v[2 * t + 1] = a * s + b * c;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
