//! Built-in property checks run by `promptner selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::{classification_loss, classification_loss_grad};
use crate::episode::Span;
use crate::harness::{micro_f1, GoldSentence};
use crate::inference::{
    argmax, knn_distribution, rerank, BonusScope, GoldenEntityBank, Prediction, RerankWeights,
    SentencePredictions,
};
use crate::span_detector::{
    rope_rotate, score_spans, span_loss, span_loss_grad, BiaffineWeights, ScoreMatrix,
    ScoreOptions, DEFAULT_ROPE_BASE,
};
use crate::tensor::{dot, Matrix};
use crate::training::{contrastive_loss, contrastive_loss_grad, ContrastiveBatch};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check {
        name,
        passed: worst <= tol,
        detail: format!("worst {worst:.3e}, tolerance {tol:.0e}"),
    }
}

/// Every check with its outcome.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        rope_relative(&mut rng),
        score_offset_invariance(&mut rng),
        span_loss_gradient(&mut rng),
        class_loss_gradient(&mut rng),
        contrastive_gradient(&mut rng),
        knn_contract(&mut rng),
        rerank_bonus(&mut rng),
        micro_f1_sets(&mut rng),
    ]
}

fn rope_relative(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let h = [8, 32, 64][rng.gen_range(0..3)];
        let u: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (i, j) = (rng.gen_range(0..128_i64), rng.gen_range(0..128_i64));
        let lhs = dot(
            &rope_rotate(&u, i, DEFAULT_ROPE_BASE).unwrap(),
            &rope_rotate(&v, j, DEFAULT_ROPE_BASE).unwrap(),
        );
        let rhs = dot(&u, &rope_rotate(&v, j - i, DEFAULT_ROPE_BASE).unwrap());
        worst = worst.max((lhs - rhs).abs());
    }
    check("rope depends only on relative position", worst, 1e-5)
}

fn score_offset_invariance(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(1..7);
        let h_n = Matrix::random_normal(n, 8, 1.0, rng);
        let w = BiaffineWeights::random(8, 4, rng);
        let a = score_spans(&h_n, &w, &ScoreOptions::default()).unwrap();
        let shifted = ScoreOptions {
            position_offset: rng.gen_range(1..50),
            ..ScoreOptions::default()
        };
        let b = score_spans(&h_n, &w, &shifted).unwrap();
        for (x, y) in a.cells().zip(b.cells()) {
            worst = worst.max((x.1 - y.1).abs());
        }
    }
    check("span scores ignore a shared position offset", worst, 1e-5)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate of `x`.
fn fd_worst(
    x: &Matrix,
    analytic: &Matrix,
    skip: impl Fn(usize, usize) -> bool,
    f: impl Fn(&Matrix) -> f64,
) -> f64 {
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            if skip(r, c) {
                continue;
            }
            let mut p = x.clone();
            p.row_mut(r)[c] += eps;
            let mut m = x.clone();
            m.row_mut(r)[c] -= eps;
            let num = (f(&p) - f(&m)) / (2.0 * eps);
            worst = worst.max(rel_err(num, analytic[(r, c)]));
        }
    }
    worst
}

fn random_spans(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Span> {
    (0..count)
        .map(|_| {
            let s = rng.gen_range(0..n);
            Span::new(s, rng.gen_range(s..n))
        })
        .collect()
}

fn span_loss_gradient(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(1..6);
        let raw = Matrix::random_normal(n, n, 2.0, rng);
        let gold = random_spans(n, rng.gen_range(0..3), rng);
        let (_, grad) = span_loss_grad(&ScoreMatrix::from_raw(&raw).unwrap(), &gold).unwrap();
        worst = worst.max(fd_worst(
            &raw,
            &grad,
            |r, c| r > c,
            |m| span_loss(&ScoreMatrix::from_raw(m).unwrap(), &gold).unwrap(),
        ));
    }
    check("span loss gradient matches finite differences", worst, 1e-4)
}

fn class_loss_gradient(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, m, d) = (rng.gen_range(1..6), rng.gen_range(2..5), 4);
        let h_n = Matrix::random_normal(n, d, 1.0, rng);
        let h_m = Matrix::random_normal(m, d, 1.0, rng);
        let gold: Vec<(Span, usize)> = random_spans(n, 2, rng)
            .into_iter()
            .map(|s| (s, rng.gen_range(1..m)))
            .collect();
        let neg = random_spans(n, 1, rng);
        let (_, gm, gn) = classification_loss_grad(&h_m, &h_n, &gold, &neg).unwrap();
        worst = worst.max(fd_worst(
            &h_m,
            &gm,
            |_, _| false,
            |x| classification_loss(x, &h_n, &gold, &neg).unwrap(),
        ));
        worst = worst.max(fd_worst(
            &h_n,
            &gn,
            |_, _| false,
            |x| classification_loss(&h_m, x, &gold, &neg).unwrap(),
        ));
    }
    check(
        "classification loss gradient matches finite differences",
        worst,
        1e-4,
    )
}

fn contrastive_gradient(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let rows = rng.gen_range(2..7);
        let batch = ContrastiveBatch {
            embeddings: Matrix::random_normal(rows, 4, 1.0, rng),
            labels: (0..rows).map(|_| rng.gen_range(1..3)).collect(),
        };
        let (_, grad) = contrastive_loss_grad(&batch, 0.5);
        worst = worst.max(fd_worst(
            &batch.embeddings,
            &grad,
            |_, _| false,
            |x| {
                let b = ContrastiveBatch {
                    embeddings: x.clone(),
                    labels: batch.labels.clone(),
                };
                contrastive_loss(&b, 0.5).loss
            },
        ));
    }
    check(
        "contrastive loss gradient matches finite differences",
        worst,
        1e-4,
    )
}

fn knn_contract(rng: &mut ChaCha8Rng) -> Check {
    let mut failures = 0;
    for _ in 0..50 {
        let rows = rng.gen_range(1..8);
        let m = rng.gen_range(2..5);
        let bank = GoldenEntityBank {
            embeddings: Matrix::random_normal(rows, 4, 1.0, rng),
            labels: (0..rows).map(|_| rng.gen_range(1..m)).collect(),
            num_classes: m,
        };
        let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for k in 1..=rows + 2 {
            let p = knn_distribution(&u, &bank, k).unwrap();
            let ok = p[0] == 0.0
                && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12
                && p.iter().all(|v| *v >= 0.0);
            if !ok {
                failures += 1;
            }
        }
    }
    check(
        "knn distribution is a distribution with none at zero",
        failures as f64,
        0.0,
    )
}

fn rerank_bonus(rng: &mut ChaCha8Rng) -> Check {
    let mut failures = 0;
    let w = RerankWeights::default();
    for _ in 0..100 {
        let m = rng.gen_range(2..6);
        let raw: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let pp: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let mut pk: Vec<f64> = (0..m)
            .map(|t| if t == 0 { 0.0 } else { rng.gen::<f64>() })
            .collect();
        let sk: f64 = pk.iter().sum();
        pk.iter_mut().for_each(|v| *v /= sk);
        let lo = rerank(-5.0, &pp, &pk, &w, BonusScope::EntityOnly);
        let hi = rerank(5.0, &pp, &pk, &w, BonusScope::EntityOnly);
        if argmax(&lo[1..]) != argmax(&hi[1..]) || hi[0] - hi[1] > lo[0] - lo[1] {
            failures += 1;
        }
    }
    check(
        "detector bonus only moves the entity-versus-none margin",
        failures as f64,
        0.0,
    )
}

fn micro_f1_sets(rng: &mut ChaCha8Rng) -> Check {
    let labels = ["a", "b"];
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let sentences = rng.gen_range(1..5);
        let mut preds = Vec::new();
        let mut gold = Vec::new();
        let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
        for s in 0..sentences {
            let id = format!("s{s}");
            let mut cells = Vec::new();
            for i in 0..4 {
                for j in i..4 {
                    for l in labels {
                        cells.push((i, j, l));
                    }
                }
            }
            let pick = |rng: &mut ChaCha8Rng| -> Vec<(usize, usize, &str)> {
                cells
                    .iter()
                    .copied()
                    .filter(|_| rng.gen_bool(0.1))
                    .collect()
            };
            let p = pick(rng);
            let g = pick(rng);
            tp += p.iter().filter(|x| g.contains(x)).count();
            np += p.len();
            ng += g.len();
            preds.push(SentencePredictions {
                sentence_id: id.clone(),
                spans: p
                    .iter()
                    .map(|&(start, end, l)| Prediction {
                        start,
                        end,
                        label: l.into(),
                        score: 1.0,
                    })
                    .collect(),
            });
            gold.push(GoldSentence {
                sentence_id: id,
                spans: g
                    .iter()
                    .map(|&(s, e, l)| crate::episode::SpanAnnotation::new(s, e, l))
                    .collect(),
            });
        }
        let p = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
        let r = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        worst = worst.max((micro_f1(&preds, &gold).unwrap().micro_f1 - f).abs());
    }
    check("micro F1 matches set counting", worst, 1e-12)
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all(7) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
