//! Position-aware biaffine span scoring, the class-imbalance span loss and
//! top-`3k` candidate recall.
//!
//! For words `i <= j` of a sentence,
//! `R(i,j) = h_sᵀ U h_e + ⟨rope(h_i W_p, i), rope(h_j W_p, j)⟩` with
//! `h_s = LeakyReLU(h_i W_s)` and `h_e = LeakyReLU(h_j W_e)`. Cells below the
//! diagonal are masked.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::episode::Span;
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Matrix};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Rotates consecutive coordinate pairs `(v[2t], v[2t+1])` by
/// `pos · base^(-2t/h)`. Negative positions rotate the other way.
pub fn rope_rotate(v: &[f64], pos: i64, base: f64) -> Result<Vec<f64>> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rotary width must be even, got {}",
            v.len()
        )));
    }
    let mut out = v.to_vec();
    crate::autograd::rotate_in_place(&mut out, pos as f64, base);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub rope_base: f64,
    pub leaky_slope: f64,
    /// When false the rotary term is dropped from every cell.
    pub rope: bool,
    /// Added to every word position before rotation.
    pub position_offset: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            rope_base: DEFAULT_ROPE_BASE,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            rope: true,
            position_offset: 0,
        }
    }
}

/// Plain-valued scorer weights: `W_s, W_e, W_p` are `d×h`, `U` is `h×h`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiaffineWeights {
    pub w_s: Matrix,
    pub w_e: Matrix,
    pub w_p: Matrix,
    pub u: Matrix,
}

impl BiaffineWeights {
    /// Xavier-style uniform init.
    pub fn random<R: Rng + ?Sized>(d: usize, h: usize, rng: &mut R) -> Self {
        let proj = (6.0 / (d + h) as f64).sqrt();
        let bil = (6.0 / (2 * h) as f64).sqrt();
        BiaffineWeights {
            w_s: Matrix::random_uniform(d, h, proj, rng),
            w_e: Matrix::random_uniform(d, h, proj, rng),
            w_p: Matrix::random_uniform(d, h, proj, rng),
            u: Matrix::random_uniform(h, h, bil, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.w_s.rows()
    }

    pub fn h(&self) -> usize {
        self.w_s.cols()
    }

    fn check(&self, d: usize, opts: &ScoreOptions) -> Result<()> {
        let (dd, h) = self.w_s.shape();
        if dd != d
            || self.w_e.shape() != (d, h)
            || self.w_p.shape() != (d, h)
            || self.u.shape() != (h, h)
        {
            return Err(Error::Shape(format!(
                "biaffine weights W_s {:?}, W_e {:?}, W_p {:?}, U {:?} do not fit word width {d}",
                self.w_s.shape(),
                self.w_e.shape(),
                self.w_p.shape(),
                self.u.shape()
            )));
        }
        if opts.rope && h % 2 != 0 {
            return Err(Error::Config(format!("rotary width must be even, got {h}")));
        }
        Ok(())
    }
}

/// Scorer parameters registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BiaffineParams {
    pub w_s: ParamId,
    pub w_e: ParamId,
    pub w_p: ParamId,
    pub u: ParamId,
}

impl BiaffineParams {
    pub fn register(store: &mut ParamStore, prefix: &str, w: BiaffineWeights) -> Self {
        let mut reg = |name: &str, m: Matrix| {
            store.register(format!("{prefix}{name}"), m, ParamGroup::Decoder, true)
        };
        BiaffineParams {
            w_s: reg("w_s", w.w_s),
            w_e: reg("w_e", w.w_e),
            w_p: reg("w_p", w.w_p),
            u: reg("u", w.u),
        }
    }

    pub fn weights(&self, store: &ParamStore) -> BiaffineWeights {
        BiaffineWeights {
            w_s: store.get(self.w_s).clone(),
            w_e: store.get(self.w_e).clone(),
            w_p: store.get(self.w_p).clone(),
            u: store.get(self.u).clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BiaffineVars {
        BiaffineVars {
            w_s: g.param(store, self.w_s),
            w_e: g.param(store, self.w_e),
            w_p: g.param(store, self.w_p),
            u: g.param(store, self.u),
        }
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.get(self.w_s).cols()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiaffineVars {
    pub w_s: Var,
    pub w_e: Var,
    pub w_p: Var,
    pub u: Var,
}

/// Records the full `n×n` score matrix (lower triangle unmasked) on `g`.
pub fn score_spans_var(g: &mut Graph, h_n: Var, w: BiaffineVars, opts: &ScoreOptions) -> Var {
    let s = g.matmul(h_n, w.w_s);
    let s = g.leaky_relu(s, opts.leaky_slope);
    let e = g.matmul(h_n, w.w_e);
    let e = g.leaky_relu(e, opts.leaky_slope);
    let su = g.matmul(s, w.u);
    let bil = g.matmul_t(su, e);
    if !opts.rope {
        return bil;
    }
    let n = g.shape(h_n).0;
    let positions: Vec<usize> = (0..n).map(|i| i + opts.position_offset).collect();
    let p = g.matmul(h_n, w.w_p);
    let p = g.rope(p, &positions, opts.rope_base);
    let rot = g.matmul_t(p, p);
    g.add(bil, rot)
}

/// `n×n` span scores; cells with `i > j` hold `-∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Matrix,
}

impl ScoreMatrix {
    /// Masks the lower triangle of a square matrix.
    pub fn from_raw(raw: &Matrix) -> Result<Self> {
        if raw.rows() != raw.cols() || raw.rows() == 0 {
            return Err(Error::Shape(format!(
                "score matrix must be square and non-empty, got {:?}",
                raw.shape()
            )));
        }
        let mut scores = raw.clone();
        let n = raw.rows();
        for i in 0..n {
            for j in 0..i {
                scores.row_mut(i)[j] = f64::NEG_INFINITY;
            }
        }
        Ok(ScoreMatrix { scores })
    }

    pub fn n(&self) -> usize {
        self.scores.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[(i, j)]
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        i > j
    }

    pub fn matrix(&self) -> &Matrix {
        &self.scores
    }

    /// Unmasked cells in `(start, end)` order.
    pub fn cells(&self) -> impl Iterator<Item = (Span, f64)> + '_ {
        let n = self.n();
        (0..n).flat_map(move |i| (i..n).map(move |j| (Span::new(i, j), self.get(i, j))))
    }
}

pub fn score_spans(h_n: &Matrix, w: &BiaffineWeights, opts: &ScoreOptions) -> Result<ScoreMatrix> {
    if h_n.rows() == 0 {
        return Err(Error::Shape("cannot score an empty sentence".into()));
    }
    w.check(h_n.cols(), opts)?;
    let mut g = Graph::new();
    let h = g.leaf(h_n.clone());
    let vars = BiaffineVars {
        w_s: g.leaf(w.w_s.clone()),
        w_e: g.leaf(w.w_e.clone()),
        w_p: g.leaf(w.w_p.clone()),
        u: g.leaf(w.u.clone()),
    };
    let r = score_spans_var(&mut g, h, vars, opts);
    ScoreMatrix::from_raw(g.value(r))
}

fn gold_set(n: usize, gold: &[Span]) -> Result<BTreeSet<Span>> {
    let mut set = BTreeSet::new();
    for s in gold {
        if s.start > s.end || s.end >= n {
            return Err(Error::Contract(format!(
                "gold span ({}, {}) outside a sentence of {n} words",
                s.start, s.end
            )));
        }
        set.insert(*s);
    }
    Ok(set)
}

/// Loss and its gradient with respect to the raw `n×n` scores (zero on the
/// masked triangle). Works on unmasked values, so `raw` may be either a
/// [`ScoreMatrix`] body or the tape value.
fn span_loss_raw(raw: &Matrix, gold: &[Span]) -> Result<(f64, Matrix)> {
    let n = raw.rows();
    let gold = gold_set(n, gold)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        for j in i..n {
            if gold.contains(&Span::new(i, j)) {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    // log(1 + Σ e^x) = lse([0, x...]); an empty set contributes log 1 = 0.
    let lse_with_zero = |xs: &[f64]| {
        let mut v = Vec::with_capacity(xs.len() + 1);
        v.push(0.0);
        v.extend_from_slice(xs);
        log_sum_exp(&v)
    };
    let pos_x: Vec<f64> = pos.iter().map(|&(i, j)| -raw[(i, j)]).collect();
    let neg_x: Vec<f64> = neg.iter().map(|&(i, j)| raw[(i, j)]).collect();
    let l_pos = lse_with_zero(&pos_x);
    let l_neg = lse_with_zero(&neg_x);
    let mut grad = Matrix::zeros(n, n);
    for (&(i, j), x) in pos.iter().zip(&pos_x) {
        grad.row_mut(i)[j] = -(x - l_pos).exp();
    }
    for (&(i, j), x) in neg.iter().zip(&neg_x) {
        grad.row_mut(i)[j] = (x - l_neg).exp();
    }
    Ok((l_pos + l_neg, grad))
}

/// `L_span = log(1 + Σ_pos e^{-r}) + log(1 + Σ_neg e^{r})` where the
/// negatives are every unmasked non-gold cell.
pub fn span_loss(r: &ScoreMatrix, gold: &[Span]) -> Result<f64> {
    Ok(span_loss_raw(r.matrix(), gold)?.0)
}

/// Loss plus `∂L/∂R` (zero on the masked triangle).
pub fn span_loss_grad(r: &ScoreMatrix, gold: &[Span]) -> Result<(f64, Matrix)> {
    span_loss_raw(r.matrix(), gold)
}

/// Span loss recorded on the tape over raw scores from [`score_spans_var`].
pub fn span_loss_var(g: &mut Graph, r: Var, gold: &[Span]) -> Result<Var> {
    let (loss, grad) = span_loss_raw(g.value(r), gold)?;
    Ok(g.fused_scalar(loss, vec![(r, grad)]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub span: Span,
    pub score: f64,
}

/// Every unmasked cell, best first; ties by `(start, end)`.
pub fn rank_cells(r: &ScoreMatrix) -> Vec<Candidate> {
    let mut cells: Vec<Candidate> = r
        .cells()
        .map(|(span, score)| Candidate { span, score })
        .collect();
    cells.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.span.cmp(&b.span)));
    cells
}

/// The `min(3k, n(n+1)/2)` highest-scoring cells.
pub fn extract_candidates(r: &ScoreMatrix, k_shot: usize) -> Vec<Candidate> {
    let mut cells = rank_cells(r);
    cells.truncate(3 * k_shot.max(1));
    cells
}
