//! Episodic evaluation: micro-F1, false-positive breakdown and ablation runs.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{restrict_tags, tags_to_spans, Episode, Span, SpanAnnotation};
use crate::error::{Error, Result};
use crate::inference::{InferenceOptions, SentencePredictions};
use crate::training::{finetune_on_support, FinetuneConfig, LossOptions, PromptNer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldSentence {
    pub sentence_id: String,
    pub spans: Vec<SpanAnnotation>,
}

/// Gold spans of an episode's query sentences (types outside the episode
/// relabeled `O`).
pub fn episode_gold(ep: &Episode) -> Vec<GoldSentence> {
    ep.query
        .iter()
        .map(|s| GoldSentence {
            sentence_id: s.id.clone(),
            spans: tags_to_spans(&restrict_tags(s, &ep.type_set)),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PrfCounts {
    pub fn add(&mut self, other: PrfCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Precision, recall, F1; each 0 when its denominator is 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f)
    }
}

type Triple = (usize, usize, String);

fn keyed_predictions(preds: &[SentencePredictions]) -> Result<BTreeMap<&str, BTreeSet<Triple>>> {
    let mut out: BTreeMap<&str, BTreeSet<Triple>> = BTreeMap::new();
    for sp in preds {
        let set = out.entry(sp.sentence_id.as_str()).or_default();
        for p in &sp.spans {
            if !set.insert((p.start, p.end, p.label.clone())) {
                return Err(Error::Contract(format!(
                    "duplicate prediction ({}, {}, {}) for sentence {}",
                    p.start, p.end, p.label, sp.sentence_id
                )));
            }
        }
    }
    Ok(out)
}

fn keyed_gold(gold: &[GoldSentence]) -> BTreeMap<&str, BTreeSet<Triple>> {
    let mut out: BTreeMap<&str, BTreeSet<Triple>> = BTreeMap::new();
    for g in gold {
        out.entry(g.sentence_id.as_str())
            .or_default()
            .extend(g.spans.iter().map(|s| (s.start, s.end, s.label.clone())));
    }
    out
}

/// Exact `(start, end, label)` matches per sentence id.
pub fn count_matches(preds: &[SentencePredictions], gold: &[GoldSentence]) -> Result<PrfCounts> {
    let p = keyed_predictions(preds)?;
    let g = keyed_gold(gold);
    let empty = BTreeSet::new();
    let mut c = PrfCounts::default();
    for (id, ps) in &p {
        let gs = g.get(id).unwrap_or(&empty);
        let tp = ps.intersection(gs).count();
        c.tp += tp;
        c.fp += ps.len() - tp;
    }
    for (id, gs) in &g {
        let ps = p.get(id).unwrap_or(&empty);
        c.fn_ += gs.len() - ps.intersection(gs).count();
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub micro_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_seed: Vec<f64>,
    /// Population standard deviation of `per_seed`.
    pub std: f64,
}

impl EvalResult {
    pub fn from_counts(c: PrfCounts) -> Self {
        let (precision, recall, f) = c.prf();
        EvalResult {
            micro_f1: f,
            precision,
            recall,
            per_seed: vec![f],
            std: 0.0,
        }
    }
}

pub fn micro_f1(preds: &[SentencePredictions], gold: &[GoldSentence]) -> Result<EvalResult> {
    Ok(EvalResult::from_counts(count_matches(preds, gold)?))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub fp_span: usize,
    pub fp_type: usize,
    pub fp_span_ratio: f64,
    pub fp_type_ratio: f64,
    /// Set when there are no false positives (both ratios are then 0).
    pub no_fp: bool,
}

impl ErrorBreakdown {
    pub fn from_counts(fp_span: usize, fp_type: usize) -> Self {
        let total = fp_span + fp_type;
        if total == 0 {
            return ErrorBreakdown {
                no_fp: true,
                ..ErrorBreakdown::default()
            };
        }
        ErrorBreakdown {
            fp_span,
            fp_type,
            fp_span_ratio: fp_span as f64 / total as f64,
            fp_type_ratio: fp_type as f64 / total as f64,
            no_fp: false,
        }
    }
}

/// `(fp_span, fp_type)` counts. A false positive whose boundaries match a gold
/// span of the same sentence is a type error, otherwise a span error.
pub fn fp_counts(preds: &[SentencePredictions], gold: &[GoldSentence]) -> Result<(usize, usize)> {
    let p = keyed_predictions(preds)?;
    let g = keyed_gold(gold);
    let empty = BTreeSet::new();
    let (mut span, mut typ) = (0, 0);
    for (id, ps) in &p {
        let gs = g.get(id).unwrap_or(&empty);
        let gold_spans: BTreeSet<Span> = gs.iter().map(|(s, e, _)| Span::new(*s, *e)).collect();
        for t in ps.difference(gs) {
            if gold_spans.contains(&Span::new(t.0, t.1)) {
                typ += 1;
            } else {
                span += 1;
            }
        }
    }
    Ok((span, typ))
}

pub fn error_breakdown(
    preds: &[SentencePredictions],
    gold: &[GoldSentence],
) -> Result<ErrorBreakdown> {
    let (s, t) = fp_counts(preds, gold)?;
    Ok(ErrorBreakdown::from_counts(s, t))
}

/// Component switches for one evaluation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub fine_tune: bool,
    /// Detector bonus in the final score.
    pub rerank: bool,
    pub knn_search: bool,
    pub rope: bool,
    /// When false every span is a candidate instead of the top `3k`.
    pub biaffine: bool,
    pub contrastive: bool,
    pub two_encoders: bool,
    pub negatives_in_class_loss: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            fine_tune: true,
            rerank: true,
            knn_search: true,
            rope: true,
            biaffine: true,
            contrastive: false,
            two_encoders: true,
            negatives_in_class_loss: true,
        }
    }
}

impl AblationConfig {
    /// Inference options for this variant.
    pub fn inference(&self, base: &InferenceOptions) -> InferenceOptions {
        let mut o = *base;
        if !self.knn_search {
            o.weights = o.weights.without_knn();
        }
        if !self.rerank {
            o.weights = o.weights.without_detector();
        }
        if !self.biaffine {
            o.enumerate_all = true;
        }
        o
    }

    pub fn loss(&self, base: &LossOptions) -> LossOptions {
        LossOptions {
            negatives_in_class_loss: self.negatives_in_class_loss,
            use_contrastive: self.contrastive,
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub flags: AblationConfig,
}

fn variant(name: &str, f: impl FnOnce(&mut AblationConfig)) -> Variant {
    let mut flags = AblationConfig::default();
    f(&mut flags);
    Variant {
        name: name.to_string(),
        flags,
    }
}

/// The seven rows of the component ablation.
pub fn table3_grid() -> Vec<Variant> {
    vec![
        variant("Ours", |_| {}),
        variant("w/o Fine-tune", |f| f.fine_tune = false),
        variant("w/o Rerank", |f| f.rerank = false),
        variant("w/o k-NN Search", |f| f.knn_search = false),
        variant("w/o Fine-tune and k-NN Search", |f| {
            f.fine_tune = false;
            f.knn_search = false;
        }),
        variant("w/o Position-aware Biaffine", |f| {
            f.biaffine = false;
            f.rerank = false;
        }),
        variant("w/o Fine-tune and RoPE", |f| {
            f.fine_tune = false;
            f.rope = false;
        }),
    ]
}

/// The rerank study: the detector bonus with and without top-`3k` recall.
pub fn rerank_grid() -> Vec<Variant> {
    vec![
        variant("Ours", |_| {}),
        variant("w/o Rerank", |f| f.rerank = false),
        variant("w/o Position-aware Biaffine and Rerank", |f| {
            f.biaffine = false;
            f.rerank = false;
        }),
        variant("w/o Position-aware Biaffine but Rerank", |f| {
            f.biaffine = false
        }),
    ]
}

pub fn grid_by_name(name: &str) -> Result<Vec<Variant>> {
    match name {
        "table3" => Ok(table3_grid()),
        "rerank" => Ok(rerank_grid()),
        "full" => Ok(vec![variant("Ours", |_| {})]),
        other => Err(Error::Config(format!(
            "unknown ablation grid {other:?} (expected table3, rerank or full)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct EvalSettings {
    pub finetune: FinetuneConfig,
    pub loss: LossOptions,
    pub inference: InferenceOptions,
    /// `Some(1)` evaluates episodes sequentially on the calling thread.
    pub threads: Option<usize>,
}

/// One episode's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub predictions: Vec<SentencePredictions>,
    pub gold: Vec<GoldSentence>,
    pub counts: PrfCounts,
    pub fp_span: usize,
    pub fp_type: usize,
    pub finetune_steps: usize,
}

/// Fine-tunes a private copy of `model` (if the variant asks for it) and
/// predicts the query set. `model` itself is never modified.
pub fn evaluate_episode(
    model: &PromptNer,
    ep: &Episode,
    flags: &AblationConfig,
    settings: &EvalSettings,
    seed: u64,
) -> Result<EpisodeOutcome> {
    if flags.two_encoders != model.config.two_encoders {
        return Err(Error::Config(
            "the encoder layout is fixed at training time; retrain to change two_encoders".into(),
        ));
    }
    let mut m = model.clone();
    m.score_options.rope = flags.rope;
    let mut steps = 0;
    if flags.fine_tune {
        let cfg = FinetuneConfig {
            seed,
            ..settings.finetune.clone()
        };
        let out = finetune_on_support(
            &mut m,
            &ep.support,
            &ep.type_set,
            ep.k_shot,
            &cfg,
            &flags.loss(&settings.loss),
        )?;
        steps = out.steps_taken;
    }
    let predictions = m.predict_episode(ep, &flags.inference(&settings.inference))?;
    let gold = episode_gold(ep);
    let counts = count_matches(&predictions, &gold)?;
    let (fp_span, fp_type) = fp_counts(&predictions, &gold)?;
    Ok(EpisodeOutcome {
        predictions,
        gold,
        counts,
        fp_span,
        fp_type,
        finetune_steps: steps,
    })
}

/// Aggregate over a list of episodes for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub fp_span: f64,
    pub fp_type: f64,
    /// Mean fine-tuning steps per episode.
    pub steps: f64,
}

/// Evaluates every episode (in parallel unless `threads == Some(1)`); the
/// per-episode fine-tuning seed is derived from `seed` and the episode index.
pub fn evaluate(
    model: &PromptNer,
    episodes: &[Episode],
    v: &Variant,
    settings: &EvalSettings,
    seed: u64,
) -> Result<(RunRecord, Vec<EpisodeOutcome>)> {
    let run = |(i, ep): (usize, &Episode)| {
        evaluate_episode(model, ep, &v.flags, settings, seed * 1_000_003 + i as u64)
    };
    let outcomes: Vec<EpisodeOutcome> = match settings.threads {
        Some(1) => episodes
            .iter()
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?,
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Run(e.to_string()))?;
            pool.install(|| {
                episodes
                    .par_iter()
                    .enumerate()
                    .map(run)
                    .collect::<Result<_>>()
            })?
        }
        None => episodes
            .par_iter()
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?,
    };
    let mut counts = PrfCounts::default();
    let (mut fs, mut ft, mut steps) = (0, 0, 0);
    for o in &outcomes {
        counts.add(o.counts);
        fs += o.fp_span;
        ft += o.fp_type;
        steps += o.finetune_steps;
    }
    let (p, r, f1) = counts.prf();
    let eb = ErrorBreakdown::from_counts(fs, ft);
    let record = RunRecord {
        variant: v.name.clone(),
        seed,
        p,
        r,
        f1,
        fp_span: eb.fp_span_ratio,
        fp_type: eb.fp_type_ratio,
        steps: if episodes.is_empty() {
            0.0
        } else {
            steps as f64 / episodes.len() as f64
        },
    };
    Ok((record, outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub micro_f1_mean: f64,
    pub micro_f1_std: f64,
    pub p_mean: f64,
    pub r_mean: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub results: Vec<RunRecord>,
    pub summary: Vec<VariantSummary>,
}

impl ResultsFile {
    pub fn from_records(results: Vec<RunRecord>) -> Self {
        let mut names: Vec<String> = Vec::new();
        for r in &results {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        let summary = names
            .into_iter()
            .map(|name| {
                let rows: Vec<&RunRecord> = results.iter().filter(|r| r.variant == name).collect();
                let f1: Vec<f64> = rows.iter().map(|r| r.f1).collect();
                let (mean, std) = mean_std(&f1);
                VariantSummary {
                    variant: name,
                    micro_f1_mean: mean,
                    micro_f1_std: std,
                    p_mean: mean_std(&rows.iter().map(|r| r.p).collect::<Vec<_>>()).0,
                    r_mean: mean_std(&rows.iter().map(|r| r.r).collect::<Vec<_>>()).0,
                    seeds: rows.iter().map(|r| r.seed).collect(),
                }
            })
            .collect();
        ResultsFile { results, summary }
    }

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == name)
    }

    /// Plain-text table of mean ± std F1 (in percent).
    pub fn table(&self) -> String {
        let width = self
            .summary
            .iter()
            .map(|s| s.variant.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let mut out = format!("{:<width$}  {:>15}\n", "Variant", "F1 (mean±std)");
        for s in &self.summary {
            out.push_str(&format!(
                "{:<width$}  {:>8.2}±{:<6.2}\n",
                s.variant,
                100.0 * s.micro_f1_mean,
                100.0 * s.micro_f1_std
            ));
        }
        out
    }
}

/// Every `(variant, seed)` pair over the same episodes and checkpoint.
pub fn run_ablation(
    model: &PromptNer,
    grid: &[Variant],
    episodes: &[Episode],
    seeds: &[u64],
    settings: &EvalSettings,
) -> Result<ResultsFile> {
    let mut records = Vec::with_capacity(grid.len() * seeds.len());
    for v in grid {
        for &seed in seeds {
            let (rec, _) = evaluate(model, episodes, v, settings, seed)?;
            log::info!("{} seed {}: F1 {:.4}", v.name, seed, rec.f1);
            records.push(rec);
        }
    }
    Ok(ResultsFile::from_records(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Prediction;

    fn preds(id: &str, spans: &[(usize, usize, &str)]) -> SentencePredictions {
        SentencePredictions {
            sentence_id: id.into(),
            spans: spans
                .iter()
                .map(|&(start, end, label)| Prediction {
                    start,
                    end,
                    label: label.into(),
                    score: 1.0,
                })
                .collect(),
        }
    }

    fn gold(id: &str, spans: &[(usize, usize, &str)]) -> GoldSentence {
        GoldSentence {
            sentence_id: id.into(),
            spans: spans
                .iter()
                .map(|&(s, e, l)| SpanAnnotation::new(s, e, l))
                .collect(),
        }
    }

    #[test]
    fn f1_hand_counts() {
        let g = [gold("a", &[(0, 1, "person"), (3, 3, "city")])];
        let exact = micro_f1(&[preds("a", &[(0, 1, "person"), (3, 3, "city")])], &g).unwrap();
        assert_eq!(exact.micro_f1, 1.0);
        let half = micro_f1(&[preds("a", &[(0, 1, "person"), (2, 2, "city")])], &g).unwrap();
        assert_eq!(
            (half.precision, half.recall, half.micro_f1),
            (0.5, 0.5, 0.5)
        );
        let none = micro_f1(&[], &g).unwrap();
        assert_eq!(
            (none.precision, none.recall, none.micro_f1),
            (0.0, 0.0, 0.0)
        );
        let dup = micro_f1(&[preds("a", &[(0, 1, "person"), (0, 1, "person")])], &g);
        assert!(matches!(dup, Err(Error::Contract(_))));
    }

    #[test]
    fn breakdown_definitions() {
        let g = [gold("a", &[(0, 1, "company")])];
        let b = error_breakdown(&[preds("a", &[(0, 1, "person")])], &g).unwrap();
        assert_eq!((b.fp_type_ratio, b.fp_span_ratio), (1.0, 0.0));
        let g = [gold("a", &[(0, 1, "person")])];
        let b = error_breakdown(&[preds("a", &[(0, 2, "person")])], &g).unwrap();
        assert_eq!((b.fp_type_ratio, b.fp_span_ratio), (0.0, 1.0));
        let b = error_breakdown(&[preds("a", &[(0, 1, "person")])], &g).unwrap();
        assert!(b.no_fp);
        assert_eq!((b.fp_type_ratio, b.fp_span_ratio), (0.0, 0.0));
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn table3_has_seven_named_rows() {
        let names: Vec<String> = table3_grid().into_iter().map(|v| v.name).collect();
        assert_eq!(
            names,
            [
                "Ours",
                "w/o Fine-tune",
                "w/o Rerank",
                "w/o k-NN Search",
                "w/o Fine-tune and k-NN Search",
                "w/o Position-aware Biaffine",
                "w/o Fine-tune and RoPE"
            ]
        );
        assert!(table3_grid()
            .iter()
            .all(|v| v.flags.biaffine || v.flags.inference(&Default::default()).enumerate_all));
    }
}
