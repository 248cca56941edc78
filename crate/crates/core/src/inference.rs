//! kNN retrieval over support-set gold mentions, the three-way rerank,
//! none-filtering and flat decoding.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{classify, embed_span};
use crate::episode::{EntityTypeSet, Span, SpanAnnotation};
use crate::error::{Error, Result};
use crate::span_detector::{extract_candidates, rank_cells, ScoreMatrix};
use crate::tensor::{sigmoid, Matrix};

/// Embeddings of every gold mention in a support set.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenEntityBank {
    pub embeddings: Matrix,
    /// Type-set index of each row (never 0).
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl GoldenEntityBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One bank row per gold mention, in sentence then span order. `support`
/// pairs each sentence's classifier word embeddings with its gold spans.
pub fn build_bank(
    support: &[(&Matrix, Vec<SpanAnnotation>)],
    type_set: &EntityTypeSet,
) -> Result<GoldenEntityBank> {
    let d = support.first().map(|(h, _)| h.cols()).unwrap_or(0);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (h_n, spans) in support {
        for s in spans {
            let t = type_set
                .index_of(&s.label)
                .filter(|&t| t != 0)
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "gold label {:?} is not an entity type of the episode",
                        s.label
                    ))
                })?;
            rows.extend(embed_span(h_n, s.span())?);
            labels.push(t);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyBank);
    }
    Ok(GoldenEntityBank {
        embeddings: Matrix::from_vec(labels.len(), d, rows),
        labels,
        num_classes: type_set.len(),
    })
}

/// Scaled dot-product similarity of `u` with every bank row.
pub fn bank_similarities(u: &[f64], bank: &GoldenEntityBank) -> Vec<f64> {
    let scale = 1.0 / (u.len() as f64).sqrt();
    (0..bank.len())
        .map(|r| {
            bank.embeddings
                .row(r)
                .iter()
                .zip(u)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * scale
        })
        .collect()
}

/// Class distribution from the `k` most similar bank rows (`k` clamped to the
/// bank size). Retrieved similarities are shifted up by their minimum when it
/// is negative, summed per class and normalized; if nothing is left after the
/// shift, neighbor counts are used instead. Classes without a retrieved
/// neighbor, `none` included, get exactly zero.
pub fn knn_distribution(u: &[f64], bank: &GoldenEntityBank, k: usize) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let sims = bank_similarities(u, bank);
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k.clamp(1, bank.len()));

    let shift = order.iter().map(|&r| sims[r]).fold(0.0_f64, f64::min);
    let mut p = vec![0.0; bank.num_classes];
    for &r in &order {
        p[bank.labels[r]] += sims[r] - shift;
    }
    let mut total: f64 = p.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        p.iter_mut().for_each(|v| *v = 0.0);
        for &r in &order {
            p[bank.labels[r]] += 1.0;
        }
        total = order.len() as f64;
    }
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "WeightsSpec")]
pub struct RerankWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl RerankWeights {
    /// `α = 0.35(1−γ)`, `β = 0.65(1−γ)`.
    pub fn from_gamma(gamma: f64) -> Self {
        RerankWeights {
            gamma,
            alpha: 0.35 * (1.0 - gamma),
            beta: 0.65 * (1.0 - gamma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "rerank weight {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Drops the detector bonus and renormalizes the two distributions.
    pub fn without_detector(&self) -> Self {
        let s = self.alpha + self.beta;
        let (alpha, beta) = if s > 0.0 {
            (self.alpha / s, self.beta / s)
        } else {
            (1.0, 0.0)
        };
        RerankWeights {
            gamma: 0.0,
            alpha,
            beta,
        }
    }

    /// Moves the kNN mass onto the prompt distribution.
    pub fn without_knn(&self) -> Self {
        RerankWeights {
            gamma: self.gamma,
            alpha: self.alpha + self.beta,
            beta: 0.0,
        }
    }
}

impl Default for RerankWeights {
    fn default() -> Self {
        RerankWeights::from_gamma(0.7)
    }
}

/// Config form: `alpha` and `beta` follow `gamma` unless given.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsSpec {
    #[serde(default = "default_gamma")]
    gamma: f64,
    alpha: Option<f64>,
    beta: Option<f64>,
}

fn default_gamma() -> f64 {
    RerankWeights::default().gamma
}

impl From<WeightsSpec> for RerankWeights {
    fn from(s: WeightsSpec) -> Self {
        let d = RerankWeights::from_gamma(s.gamma);
        RerankWeights {
            gamma: s.gamma,
            alpha: s.alpha.unwrap_or(d.alpha),
            beta: s.beta.unwrap_or(d.beta),
        }
    }
}

/// Which classes receive the `γ·σ(R)` detector bonus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BonusScope {
    #[default]
    EntityOnly,
    AllClasses,
}

/// `final(t) = α·p_prompt(t) + β·p_knn(t) + γ·σ(span_score)`, the last term
/// restricted to entity classes under [`BonusScope::EntityOnly`].
pub fn rerank(
    span_score: f64,
    p_prompt: &[f64],
    p_knn: &[f64],
    w: &RerankWeights,
    scope: BonusScope,
) -> Vec<f64> {
    let bonus = w.gamma * sigmoid(span_score);
    p_prompt
        .iter()
        .zip(p_knn)
        .enumerate()
        .map(|(t, (p, q))| {
            let b = if t == 0 && scope == BonusScope::EntityOnly {
                0.0
            } else {
                bonus
            };
            w.alpha * p + w.beta * q + b
        })
        .collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Distribution whose argmax decides whether a candidate is dropped as `none`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoneFilter {
    /// The reranked score vector.
    Reranked,
    /// The prompt classifier's distribution alone.
    Prompt,
    /// Dropped when either of the above has `none` on top.
    #[default]
    Either,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    pub weights: RerankWeights,
    /// Neighbors retrieved per span; `None` means the episode's shot count.
    pub k_knn: Option<usize>,
    pub bonus: BonusScope,
    pub none_filter: NoneFilter,
    /// Score every span instead of the top `3k` detector cells.
    pub enumerate_all: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            weights: RerankWeights::default(),
            k_knn: None,
            bonus: BonusScope::EntityOnly,
            none_filter: NoneFilter::Either,
            enumerate_all: false,
        }
    }
}

/// Encoded view of one query sentence.
#[derive(Debug, Clone)]
pub struct SentenceView {
    pub scores: ScoreMatrix,
    /// Classifier label-word embeddings.
    pub h_m: Matrix,
    /// Classifier word embeddings of the sentence.
    pub h_n: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub score: f64,
}

impl Prediction {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// Per-candidate scoring details.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub span: Span,
    pub span_score: f64,
    pub p_prompt: Vec<f64>,
    pub p_knn: Vec<f64>,
    pub final_scores: Vec<f64>,
}

impl ScoredCandidate {
    pub fn kept(&self, filter: NoneFilter) -> bool {
        match filter {
            NoneFilter::Reranked => argmax(&self.final_scores) != 0,
            NoneFilter::Prompt => argmax(&self.p_prompt) != 0,
            NoneFilter::Either => argmax(&self.final_scores) != 0 && argmax(&self.p_prompt) != 0,
        }
    }

    /// Best entity class under the final scores.
    pub fn label(&self) -> usize {
        1 + argmax(&self.final_scores[1..])
    }
}

pub fn score_candidates(
    view: &SentenceView,
    bank: &GoldenEntityBank,
    k_shot: usize,
    opts: &InferenceOptions,
) -> Result<Vec<ScoredCandidate>> {
    let cands = if opts.enumerate_all {
        rank_cells(&view.scores)
    } else {
        extract_candidates(&view.scores, k_shot)
    };
    let k = opts.k_knn.unwrap_or(k_shot);
    let m = view.h_m.rows();
    cands
        .into_iter()
        .map(|c| {
            let u = embed_span(&view.h_n, c.span)?;
            let p_prompt = classify(&view.h_m, &u);
            let p_knn = if opts.weights.beta > 0.0 {
                knn_distribution(&u, bank, k)?
            } else {
                vec![0.0; m]
            };
            let final_scores = rerank(c.score, &p_prompt, &p_knn, &opts.weights, opts.bonus);
            Ok(ScoredCandidate {
                span: c.span,
                span_score: c.score,
                p_prompt,
                p_knn,
                final_scores,
            })
        })
        .collect()
}

/// Keeps the highest-scoring spans that do not overlap an already kept span;
/// output sorted by start.
pub fn flat_decode(mut preds: Vec<Prediction>) -> Vec<Prediction> {
    preds.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.span().cmp(&b.span())));
    let mut kept: Vec<Prediction> = Vec::new();
    for p in preds {
        if kept.iter().all(|k| !k.span().overlaps(&p.span())) {
            kept.push(p);
        }
    }
    kept.sort_by_key(|p| p.span());
    kept
}

/// Candidates, rerank, none-filter, flat decoding.
pub fn predict_view(
    view: &SentenceView,
    bank: &GoldenEntityBank,
    type_set: &EntityTypeSet,
    k_shot: usize,
    opts: &InferenceOptions,
) -> Result<Vec<Prediction>> {
    let scored = score_candidates(view, bank, k_shot, opts)?;
    let preds = scored
        .into_iter()
        .filter(|c| c.kept(opts.none_filter))
        .map(|c| {
            let t = c.label();
            Prediction {
                start: c.span.start,
                end: c.span.end,
                label: type_set.name(t).to_string(),
                score: c.final_scores[t],
            }
        })
        .collect();
    Ok(flat_decode(preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePredictions {
    pub sentence_id: String,
    pub spans: Vec<Prediction>,
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[SentencePredictions]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<SentencePredictions>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bank rows whose similarity with `u = e_0 · √d` equals the first
    /// coordinate.
    fn bank(rows: &[(f64, usize)], m: usize) -> (GoldenEntityBank, Vec<f64>) {
        let d = 4;
        let mut data = Vec::new();
        for (s, _) in rows {
            data.extend([*s, 0.0, 0.0, 0.0]);
        }
        let b = GoldenEntityBank {
            embeddings: Matrix::from_vec(rows.len(), d, data),
            labels: rows.iter().map(|r| r.1).collect(),
            num_classes: m,
        };
        (b, vec![(d as f64).sqrt(), 0.0, 0.0, 0.0])
    }

    #[test]
    fn knn_hand_sums() {
        // Classes: none, person, company.
        let (b, u) = bank(&[(2.0, 1), (1.0, 1), (3.0, 2)], 3);
        let p = knn_distribution(&u, &b, 3).unwrap();
        assert_eq!(p, [0.0, 0.5, 0.5]);
        let p = knn_distribution(&u, &b, 2).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.4).abs() < 1e-12 && (p[2] - 0.6).abs() < 1e-12);
        assert_eq!(
            knn_distribution(&u, &b, 10).unwrap(),
            knn_distribution(&u, &b, 3).unwrap()
        );
    }

    #[test]
    fn knn_single_neighbor_and_negative_similarity() {
        let (b, u) = bank(&[(1.5, 1)], 3);
        assert_eq!(knn_distribution(&u, &b, 1).unwrap(), [0.0, 1.0, 0.0]);
        let (b, u) = bank(&[(-1.0, 1), (-3.0, 2)], 3);
        let p = knn_distribution(&u, &b, 2).unwrap();
        assert_eq!(p, [0.0, 1.0, 0.0]);
        let (b, u) = bank(&[(-2.0, 2)], 3);
        assert_eq!(knn_distribution(&u, &b, 1).unwrap(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn paper_default_weights() {
        let w = RerankWeights::from_gamma(0.7);
        assert!((w.alpha - 0.105).abs() < 1e-12 && (w.beta - 0.195).abs() < 1e-12);
        let w = RerankWeights::from_gamma(0.5);
        assert!((w.alpha - 0.175).abs() < 1e-12 && (w.beta - 0.325).abs() < 1e-12);
    }

    #[test]
    fn rerank_without_detector_is_mixture() {
        let w = RerankWeights::from_gamma(0.0);
        let pp = [0.2, 0.5, 0.3];
        let pk = [0.0, 0.1, 0.9];
        let f = rerank(3.0, &pp, &pk, &w, BonusScope::EntityOnly);
        for t in 0..3 {
            assert_eq!(f[t], w.alpha * pp[t] + w.beta * pk[t]);
        }
    }

    #[test]
    fn bonus_only_touches_entities() {
        let w = RerankWeights::from_gamma(0.7);
        let pp = [0.5, 0.3, 0.2];
        let pk = [0.0, 0.6, 0.4];
        let hi = rerank(5.0, &pp, &pk, &w, BonusScope::EntityOnly);
        let lo = rerank(-5.0, &pp, &pk, &w, BonusScope::EntityOnly);
        assert_eq!(hi[0], lo[0]);
        assert!((hi[1] - hi[2] - (lo[1] - lo[2])).abs() < 1e-12);
        let all = rerank(-5.0, &pp, &pk, &w, BonusScope::AllClasses);
        assert!(all[0] > lo[0]);
    }

    #[test]
    fn flat_decoding_prefers_higher_scores() {
        let p = |s, e, score| Prediction {
            start: s,
            end: e,
            label: "person".into(),
            score,
        };
        let out = flat_decode(vec![p(0, 1, 0.8), p(1, 2, 0.9), p(3, 3, 0.1)]);
        assert_eq!(out, vec![p(1, 2, 0.9), p(3, 3, 0.1)]);
        assert!(flat_decode(vec![]).is_empty());
    }

    #[test]
    fn bank_rows_follow_enumeration() {
        let types = EntityTypeSet::new(["person", "company"]).unwrap();
        let h1 = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]);
        let h2 = Matrix::from_rows(&[[4.0, 4.0]]);
        let s1 = vec![
            SpanAnnotation::new(0, 1, "person"),
            SpanAnnotation::new(2, 2, "company"),
        ];
        let s2 = vec![SpanAnnotation::new(0, 0, "person")];
        let b = build_bank(&[(&h1, s1), (&h2, s2)], &types).unwrap();
        assert_eq!(
            b.embeddings,
            Matrix::from_rows(&[[0.5, 0.5], [2.0, 2.0], [4.0, 4.0]])
        );
        assert_eq!(b.labels, [1, 2, 1]);
        let empty = build_bank(&[(&h2, vec![])], &types);
        assert!(matches!(empty, Err(Error::EmptyBank)));
    }
}
