//! Span embeddings and classification against the prompt's label-word
//! embeddings: `p(y | span) = softmax(H_m u / √d)`.

use crate::autograd::{Graph, Var};
use crate::episode::Span;
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, Matrix};

fn check_span(n: usize, span: Span) -> Result<()> {
    if span.start > span.end || span.end >= n {
        return Err(Error::Contract(format!(
            "span ({}, {}) outside a sentence of {n} words",
            span.start, span.end
        )));
    }
    Ok(())
}

/// Mean of rows `start..=end` of `H_n`.
pub fn embed_span(h_n: &Matrix, span: Span) -> Result<Vec<f64>> {
    check_span(h_n.rows(), span)?;
    let mut u = vec![0.0; h_n.cols()];
    for k in span.start..=span.end {
        for (acc, v) in u.iter_mut().zip(h_n.row(k)) {
            *acc += v;
        }
    }
    let inv = 1.0 / span.len() as f64;
    u.iter_mut().for_each(|v| *v *= inv);
    Ok(u)
}

/// Row-stacked span embeddings.
pub fn embed_spans(h_n: &Matrix, spans: &[Span]) -> Result<Matrix> {
    let mut out = Matrix::zeros(spans.len(), h_n.cols());
    for (r, s) in spans.iter().enumerate() {
        out.row_mut(r).copy_from_slice(&embed_span(h_n, *s)?);
    }
    Ok(out)
}

/// Span embeddings recorded on the tape.
pub fn embed_spans_var(g: &mut Graph, h_n: Var, spans: &[Span]) -> Result<Var> {
    let n = g.shape(h_n).0;
    for s in spans {
        check_span(n, *s)?;
    }
    let ranges: Vec<_> = spans.iter().map(|s| s.start..s.end + 1).collect();
    Ok(g.pool_rows(h_n, &ranges))
}

/// `H_m u / √d`
pub fn class_logits(h_m: &Matrix, u: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (u.len() as f64).sqrt();
    (0..h_m.rows())
        .map(|t| h_m.row(t).iter().zip(u).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect()
}

/// Distribution over the type set (`none` first).
pub fn classify(h_m: &Matrix, u: &[f64]) -> Vec<f64> {
    softmax(&class_logits(h_m, u))
}

/// Mean NLL given an `rows×m` logit matrix and one target per row, with the
/// gradient with respect to the logits.
fn mean_nll(logits: &Matrix, targets: &[usize]) -> (f64, Matrix) {
    let k = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        loss += lse - row[t];
        for (c, gv) in grad.row_mut(r).iter_mut().enumerate() {
            *gv = ((row[c] - lse).exp() - if c == t { 1.0 } else { 0.0 }) / k;
        }
    }
    (loss / k, grad)
}

fn examples(
    m: usize,
    gold: &[(Span, usize)],
    negatives: &[Span],
) -> Result<(Vec<Span>, Vec<usize>)> {
    if gold.is_empty() && negatives.is_empty() {
        return Err(Error::EmptyMean);
    }
    let mut spans = Vec::with_capacity(gold.len() + negatives.len());
    let mut targets = Vec::with_capacity(spans.capacity());
    for &(s, t) in gold {
        if t >= m {
            return Err(Error::Contract(format!(
                "label index {t} outside a type set of {m}"
            )));
        }
        spans.push(s);
        targets.push(t);
    }
    for &s in negatives {
        spans.push(s);
        targets.push(0);
    }
    Ok((spans, targets))
}

/// Mean negative log-likelihood over gold `(span, label index)` pairs and
/// negatives (targeted at `none`, index 0).
pub fn classification_loss(
    h_m: &Matrix,
    h_n: &Matrix,
    gold: &[(Span, usize)],
    negatives: &[Span],
) -> Result<f64> {
    Ok(classification_loss_grad(h_m, h_n, gold, negatives)?.0)
}

/// Loss with gradients with respect to `H_m` and `H_n`.
pub fn classification_loss_grad(
    h_m: &Matrix,
    h_n: &Matrix,
    gold: &[(Span, usize)],
    negatives: &[Span],
) -> Result<(f64, Matrix, Matrix)> {
    let mut g = Graph::new();
    let hm = g.leaf(h_m.clone());
    let hn = g.leaf(h_n.clone());
    let loss = classification_loss_var(&mut g, hm, hn, gold, negatives)?;
    let grads = g.backward(loss);
    let gm = grads
        .wrt(hm)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(h_m.rows(), h_m.cols()));
    let gn = grads
        .wrt(hn)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(h_n.rows(), h_n.cols()));
    Ok((g.value(loss).item(), gm, gn))
}

/// Classification loss recorded on the tape.
pub fn classification_loss_var(
    g: &mut Graph,
    h_m: Var,
    h_n: Var,
    gold: &[(Span, usize)],
    negatives: &[Span],
) -> Result<Var> {
    let (m, d) = g.shape(h_m);
    let (spans, targets) = examples(m, gold, negatives)?;
    let u = embed_spans_var(g, h_n, &spans)?;
    let logits = g.matmul_t(u, h_m);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let (loss, grad) = mean_nll(g.value(logits), &targets);
    Ok(g.fused_scalar(loss, vec![(logits, grad)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn span_means() {
        let h = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0], [5.0, -1.0]]);
        assert_eq!(embed_span(&h, Span::new(1, 1)).unwrap(), [3.0, 6.0]);
        assert_eq!(embed_span(&h, Span::new(0, 1)).unwrap(), [2.0, 4.0]);
        assert!(matches!(
            embed_span(&h, Span::new(2, 3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_embedding_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h_m = Matrix::random_normal(4, 8, 1.0, &mut rng);
        for p in classify(&h_m, &[0.0; 8]) {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_embedding_wins() {
        let h_m = Matrix::identity(4);
        let c = 100.0 * 2.0;
        let p = classify(&h_m, &[0.0, 0.0, c, 0.0]);
        assert!(p[2] > 0.99);
    }

    #[test]
    fn loss_closed_forms() {
        let h_n = Matrix::zeros(2, 4);
        let h_m = Matrix::zeros(5, 4);
        let l = classification_loss(&h_m, &h_n, &[(Span::new(0, 1), 3)], &[]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            classification_loss(&h_m, &h_n, &[], &[]),
            Err(Error::EmptyMean)
        ));
    }

    #[test]
    fn loss_matches_hand_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h_n = Matrix::random_normal(4, 6, 1.0, &mut rng);
        let h_m = Matrix::random_normal(3, 6, 1.0, &mut rng);
        let gold = [(Span::new(0, 1), 1), (Span::new(3, 3), 2)];
        let neg = [Span::new(1, 2)];
        let mut total = 0.0;
        for (s, t) in gold.iter().copied().chain(neg.iter().map(|s| (*s, 0))) {
            let p = classify(&h_m, &embed_span(&h_n, s).unwrap());
            total -= p[t].ln();
        }
        let l = classification_loss(&h_m, &h_n, &gold, &neg).unwrap();
        assert!((l - total / 3.0).abs() < 1e-12);
    }
}
