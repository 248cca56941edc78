//! The two-encoder model, episode training, support-set fine-tuning, the
//! span contrastive loss and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::classifier::{classification_loss_var, embed_spans_var};
use crate::encoder::{BackendKind, EncoderConfig, TransformerEncoder};
use crate::episode::{restrict_tags, tags_to_spans, EntityTypeSet, Episode, Span, TaggedSentence};
use crate::error::{Error, Result};
use crate::inference::{
    build_bank, predict_view, GoldenEntityBank, InferenceOptions, Prediction, SentencePredictions,
    SentenceView,
};
use crate::prompt::{build_prompted_input, label_word, PromptTemplate, PromptedInput};
use crate::span_detector::{
    extract_candidates, score_spans_var, span_loss_var, BiaffineParams, BiaffineWeights,
    ScoreMatrix, ScoreOptions, DEFAULT_LEAKY_SLOPE, DEFAULT_ROPE_BASE,
};
use crate::tensor::{log_sum_exp, Matrix};
use crate::tensorfile;
use crate::tokenizer::WordPieceTokenizer;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderSpec {
    Tiny {
        d: usize,
        layers: usize,
    },
    /// Directory with `config.json`, `vocab.txt` and `model.safetensors`.
    Pretrained {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub dropout: f64,
    /// Separate encoders for span detection and classification.
    pub two_encoders: bool,
    /// Width `h` of the biaffine projections.
    pub biaffine_hidden: usize,
    pub rope_base: f64,
    pub leaky_slope: f64,
    pub template: PromptTemplate,
    /// Position limit of the tiny encoder.
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderSpec::Tiny { d: 32, layers: 2 },
            dropout: 0.1,
            two_encoders: true,
            biaffine_hidden: 32,
            rope_base: DEFAULT_ROPE_BASE,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            template: PromptTemplate::default(),
            max_positions: 256,
        }
    }
}

/// Loss terms that are switched per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    /// Non-gold recalled candidates are classified as `none`.
    pub negatives_in_class_loss: bool,
    pub use_contrastive: bool,
    /// Similarity scale of the contrastive loss; `None` is `1/√d`.
    pub contrastive_scale: Option<f64>,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            negatives_in_class_loss: true,
            use_contrastive: false,
            contrastive_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub max_steps: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub loss: LossOptions,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Dev evaluation interval in steps (0 disables model selection).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder_lr: 2e-5,
            decoder_lr: 2e-3,
            weight_decay: 1e-2,
            warmup_fraction: 0.1,
            max_steps: 1000,
            seed: 1,
            loss: LossOptions::default(),
            grad_clip: Some(5.0),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Rates suited to the small from-scratch encoder.
    pub fn desk() -> Self {
        TrainConfig {
            encoder_lr: 1e-3,
            decoder_lr: 3e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.encoder_lr > 0.0 && self.decoder_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub loss_threshold: f64,
    pub max_finetune_steps: usize,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            loss_threshold: 1e-2,
            max_finetune_steps: 50,
            encoder_lr: 2e-5,
            decoder_lr: 2e-3,
            weight_decay: 1e-2,
            grad_clip: Some(5.0),
            seed: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        FinetuneConfig {
            encoder_lr: 5e-4,
            decoder_lr: 2e-3,
            ..FinetuneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loss_threshold > 0.0) || self.max_finetune_steps == 0 {
            return Err(Error::Config(
                "fine-tuning needs a positive threshold and at least one step".into(),
            ));
        }
        if !(self.encoder_lr > 0.0 && self.decoder_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Tape handles for one prompted sentence.
struct SentenceVars {
    scores: Var,
    h_m: Var,
    h_n: Var,
}

#[derive(Debug, Clone)]
pub struct PromptNer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub tokenizer: Arc<WordPieceTokenizer>,
    detector: TransformerEncoder,
    classifier: Option<TransformerEncoder>,
    biaffine: BiaffineParams,
    /// Scoring switches; the rotary term can be turned off for ablations.
    pub score_options: ScoreOptions,
}

const DETECTOR: &str = "detector.";
const CLASSIFIER: &str = "classifier.";
const BIAFFINE: &str = "biaffine.";

impl PromptNer {
    /// Fresh model. The tiny backend needs `tokenizer`; the pretrained one
    /// brings its own vocabulary.
    pub fn new(
        config: ModelConfig,
        tokenizer: Option<WordPieceTokenizer>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (detector, classifier, tokenizer) = match &config.encoder {
            EncoderSpec::Tiny { d, layers } => {
                let tokenizer = tokenizer
                    .ok_or_else(|| Error::Config("the tiny encoder needs a vocabulary".into()))?;
                if *d < 8 || *layers < 1 {
                    return Err(Error::Config(format!(
                        "tiny encoder needs d >= 8 and layers >= 1, got d={d}, layers={layers}"
                    )));
                }
                let mut enc_cfg = EncoderConfig::tiny(tokenizer.vocab_size(), *d, *layers);
                enc_cfg.dropout = config.dropout;
                enc_cfg.max_positions = config.max_positions;
                let det = TransformerEncoder::init_random(
                    &mut params,
                    DETECTOR,
                    enc_cfg.clone(),
                    &tokenizer,
                    &mut rng,
                )?;
                let cls = if config.two_encoders {
                    Some(TransformerEncoder::init_random(
                        &mut params,
                        CLASSIFIER,
                        enc_cfg,
                        &tokenizer,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                (det, cls, tokenizer)
            }
            EncoderSpec::Pretrained { path } => {
                let (det, tok) = TransformerEncoder::load_pretrained(
                    &mut params,
                    DETECTOR,
                    path,
                    config.dropout,
                )?;
                let cls = if config.two_encoders {
                    Some(
                        TransformerEncoder::load_pretrained(
                            &mut params,
                            CLASSIFIER,
                            path,
                            config.dropout,
                        )?
                        .0,
                    )
                } else {
                    None
                };
                (det, cls, tok)
            }
        };
        let weights = BiaffineWeights::random(detector.hidden(), config.biaffine_hidden, &mut rng);
        let biaffine = BiaffineParams::register(&mut params, BIAFFINE, weights);
        let score_options = ScoreOptions {
            rope_base: config.rope_base,
            leaky_slope: config.leaky_slope,
            rope: true,
            position_offset: 0,
        };
        if !config.biaffine_hidden.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "biaffine_hidden must be even, got {}",
                config.biaffine_hidden
            )));
        }
        Ok(PromptNer {
            config,
            params,
            tokenizer: Arc::new(tokenizer),
            detector,
            classifier,
            biaffine,
            score_options,
        })
    }

    pub fn d(&self) -> usize {
        self.detector.hidden()
    }

    pub fn biaffine_weights(&self) -> BiaffineWeights {
        self.biaffine.weights(&self.params)
    }

    fn classifier_encoder(&self) -> &TransformerEncoder {
        self.classifier.as_ref().unwrap_or(&self.detector)
    }

    pub fn prompted(&self, words: &[String], type_set: &EntityTypeSet) -> Result<PromptedInput> {
        build_prompted_input(words, type_set, &self.config.template, &self.tokenizer)
    }

    fn forward(
        &self,
        g: &mut Graph,
        pi: &PromptedInput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SentenceVars> {
        let det = self
            .detector
            .forward(g, &self.params, pi, rng.as_deref_mut())?;
        let w = self.biaffine.bind(g, &self.params);
        let scores = score_spans_var(g, det.h_n, w, &self.score_options);
        let (h_m, h_n) = match &self.classifier {
            Some(c) => {
                let enc = c.forward(g, &self.params, pi, rng)?;
                (enc.h_m, enc.h_n)
            }
            None => (det.h_m, det.h_n),
        };
        Ok(SentenceVars { scores, h_m, h_n })
    }

    /// Eval-mode encoding of a sentence for inference.
    pub fn view(&self, words: &[String], type_set: &EntityTypeSet) -> Result<SentenceView> {
        let pi = self.prompted(words, type_set)?;
        let mut g = Graph::new();
        let v = self.forward(&mut g, &pi, None)?;
        Ok(SentenceView {
            scores: ScoreMatrix::from_raw(g.value(v.scores))?,
            h_m: g.value(v.h_m).clone(),
            h_n: g.value(v.h_n).clone(),
        })
    }

    /// Eval-mode classifier word embeddings of a sentence.
    pub fn classifier_words(&self, words: &[String], type_set: &EntityTypeSet) -> Result<Matrix> {
        let pi = self.prompted(words, type_set)?;
        Ok(self.classifier_encoder().encode(&self.params, &pi)?.h_n)
    }

    pub fn build_bank(
        &self,
        support: &[TaggedSentence],
        type_set: &EntityTypeSet,
    ) -> Result<GoldenEntityBank> {
        let encoded = support
            .iter()
            .map(|s| {
                let s = restrict_tags(s, type_set);
                Ok((
                    self.classifier_words(&s.words, type_set)?,
                    tags_to_spans(&s),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = encoded
            .iter()
            .map(|(h, spans)| (h, spans.clone()))
            .collect();
        build_bank(&refs, type_set)
    }

    pub fn predict_sentence(
        &self,
        words: &[String],
        type_set: &EntityTypeSet,
        bank: &GoldenEntityBank,
        k_shot: usize,
        opts: &InferenceOptions,
    ) -> Result<Vec<Prediction>> {
        let view = self.view(words, type_set)?;
        predict_view(&view, bank, type_set, k_shot, opts)
    }

    /// Predictions for every query sentence of an episode.
    pub fn predict_episode(
        &self,
        ep: &Episode,
        opts: &InferenceOptions,
    ) -> Result<Vec<SentencePredictions>> {
        let bank = self.build_bank(&ep.support, &ep.type_set)?;
        ep.query
            .iter()
            .map(|s| {
                Ok(SentencePredictions {
                    sentence_id: s.id.clone(),
                    spans: self.predict_sentence(&s.words, &ep.type_set, &bank, ep.k_shot, opts)?,
                })
            })
            .collect()
    }

    /// Records the loss of a set of sentences on `g`.
    fn set_loss(
        &self,
        g: &mut Graph,
        sentences: &[TaggedSentence],
        type_set: &EntityTypeSet,
        k_shot: usize,
        opts: &LossOptions,
        mut rng: Option<&mut ChaCha8Rng>,
        acc: &mut LossParts,
    ) -> Result<()> {
        let mut cl_embeddings = Vec::new();
        let mut cl_labels = Vec::new();
        for sent in sentences {
            let sent = restrict_tags(sent, type_set);
            let pi = self.prompted(&sent.words, type_set)?;
            let vars = self.forward(g, &pi, rng.as_deref_mut())?;
            let gold = tags_to_spans(&sent);
            let gold_spans: Vec<Span> = gold.iter().map(|a| a.span()).collect();

            let span = span_loss_var(g, vars.scores, &gold_spans)?;
            check_finite(g.value(span).item(), &sent)?;
            acc.span.push(span);

            let pairs: Vec<(Span, usize)> = gold
                .iter()
                .map(|a| {
                    (
                        a.span(),
                        type_set.index_of(&a.label).expect("restricted tags"),
                    )
                })
                .collect();
            let negatives: Vec<Span> = if opts.negatives_in_class_loss {
                let r = ScoreMatrix::from_raw(g.value(vars.scores))?;
                extract_candidates(&r, k_shot)
                    .into_iter()
                    .map(|c| c.span)
                    .filter(|s| !gold_spans.contains(s))
                    .collect()
            } else {
                Vec::new()
            };
            if !pairs.is_empty() || !negatives.is_empty() {
                let class = classification_loss_var(g, vars.h_m, vars.h_n, &pairs, &negatives)?;
                check_finite(g.value(class).item(), &sent)?;
                acc.class.push(class);
            }

            if opts.use_contrastive && !gold_spans.is_empty() {
                cl_embeddings.push(embed_spans_var(g, vars.h_n, &gold_spans)?);
                cl_labels.extend(pairs.iter().map(|p| p.1));
                if k_shot == 1 {
                    // Second pass with fresh dropout noise gives each mention a twin.
                    let twin = self.classifier_encoder().forward(
                        g,
                        &self.params,
                        &pi,
                        rng.as_deref_mut(),
                    )?;
                    cl_embeddings.push(embed_spans_var(g, twin.h_n, &gold_spans)?);
                    cl_labels.extend(pairs.iter().map(|p| p.1));
                }
            }
        }
        if opts.use_contrastive && !cl_embeddings.is_empty() {
            let u = if cl_embeddings.len() == 1 {
                cl_embeddings[0]
            } else {
                g.concat_rows(&cl_embeddings)
            };
            let scale = opts
                .contrastive_scale
                .unwrap_or(1.0 / (g.shape(u).1 as f64).sqrt());
            let (cl, qualifying) = contrastive_loss_var(g, u, &cl_labels, scale);
            if qualifying == 0 {
                acc.cl_skipped_batches += 1;
                log::warn!(
                    "contrastive batch without an anchor that has both positives and negatives"
                );
            }
            acc.cl.push(cl);
        }
        Ok(())
    }

    /// Total loss of an episode on a fresh tape.
    fn episode_loss(
        &self,
        g: &mut Graph,
        sets: &[&[TaggedSentence]],
        type_set: &EntityTypeSet,
        k_shot: usize,
        opts: &LossOptions,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, LossBreakdown)> {
        let mut parts = LossParts::default();
        for set in sets {
            self.set_loss(
                g,
                set,
                type_set,
                k_shot,
                opts,
                rng.as_deref_mut(),
                &mut parts,
            )?;
        }
        let sum = |g: &mut Graph, vs: &[Var]| {
            if vs.is_empty() {
                g.leaf(Matrix::scalar(0.0))
            } else {
                g.add_scalars(vs)
            }
        };
        let span = sum(g, &parts.span);
        let class = sum(g, &parts.class);
        let cl = sum(g, &parts.cl);
        let total = g.add_scalars(&[span, class, cl]);
        let breakdown = LossBreakdown {
            span: g.value(span).item(),
            class: g.value(class).item(),
            contrastive: g.value(cl).item(),
            total: g.value(total).item(),
            cl_skipped_batches: parts.cl_skipped_batches,
        };
        Ok((total, breakdown))
    }

    /// Loss and parameter gradients of an episode. Dropout is active when
    /// `rng` is given.
    pub fn loss_and_grads(
        &self,
        sets: &[&[TaggedSentence]],
        type_set: &EntityTypeSet,
        k_shot: usize,
        opts: &LossOptions,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossBreakdown, BTreeMap<ParamId, Matrix>)> {
        let mut g = Graph::new();
        let (total, breakdown) = self.episode_loss(&mut g, sets, type_set, k_shot, opts, rng)?;
        let grads = g.backward(total).param_grads(&g, &self.params);
        Ok((breakdown, grads))
    }

    /// Eval-mode loss without gradients.
    pub fn loss(
        &self,
        sets: &[&[TaggedSentence]],
        type_set: &EntityTypeSet,
        k_shot: usize,
        opts: &LossOptions,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        Ok(self
            .episode_loss(&mut g, sets, type_set, k_shot, opts, None)?
            .1)
    }
}

fn check_finite(v: f64, sent: &TaggedSentence) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    log::error!(
        "non-finite loss {v} on sentence {}: {}",
        sent.id,
        sent.words.join(" ")
    );
    Err(Error::NonFiniteLoss {
        sentence: sent.id.clone(),
        value: v,
    })
}

#[derive(Default)]
struct LossParts {
    span: Vec<Var>,
    class: Vec<Var>,
    cl: Vec<Var>,
    cl_skipped_batches: usize,
}

/// Components of one step's loss; `total = span + class + contrastive`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub span: f64,
    pub class: f64,
    pub contrastive: f64,
    pub total: f64,
    /// Contrastive batches that had no qualifying anchor.
    pub cl_skipped_batches: usize,
}

/// Gold mentions of a set with anchor pairing by label.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
}

impl ContrastiveBatch {
    /// Same-label others.
    pub fn positives(&self, i: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&j| j != i && self.labels[j] == self.labels[i])
            .collect()
    }

    /// Different-label others.
    pub fn negatives(&self, i: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&j| j != i && self.labels[j] != self.labels[i])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveOutcome {
    pub loss: f64,
    /// Anchors with at least one positive and one negative.
    pub qualifying: usize,
    pub skipped: usize,
}

/// `-Σ_i log(Σ_pos exp d / Σ_neg exp d)` from a similarity matrix, with the
/// gradient with respect to it.
fn contrastive_from_similarities(sim: &Matrix, labels: &[usize]) -> (f64, Matrix, usize) {
    let n = labels.len();
    let mut grad = Matrix::zeros(n, n);
    let mut loss = 0.0;
    let mut qualifying = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        let neg: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] != labels[i])
            .collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        qualifying += 1;
        let ps: Vec<f64> = pos.iter().map(|&j| sim[(i, j)]).collect();
        let ns: Vec<f64> = neg.iter().map(|&j| sim[(i, j)]).collect();
        let lp = log_sum_exp(&ps);
        let ln = log_sum_exp(&ns);
        loss -= lp - ln;
        for (&j, s) in pos.iter().zip(&ps) {
            grad.row_mut(i)[j] -= (s - lp).exp();
        }
        for (&j, s) in neg.iter().zip(&ns) {
            grad.row_mut(i)[j] += (s - ln).exp();
        }
    }
    (loss, grad, qualifying)
}

/// Contrastive loss over row embeddings `u` recorded on the tape. Returns the
/// loss and the number of qualifying anchors.
pub fn contrastive_loss_var(g: &mut Graph, u: Var, labels: &[usize], scale: f64) -> (Var, usize) {
    let sim = g.matmul_t(u, u);
    let sim = g.scale(sim, scale);
    let (loss, grad, qualifying) = contrastive_from_similarities(g.value(sim), labels);
    (g.fused_scalar(loss, vec![(sim, grad)]), qualifying)
}

/// `d(u, v) = scale · uᵀv`; anchors lacking a positive or a negative are
/// skipped and a batch with none left scores 0.
pub fn contrastive_loss(batch: &ContrastiveBatch, scale: f64) -> ContrastiveOutcome {
    let sim = batch.embeddings.matmul_t(&batch.embeddings).scale(scale);
    let (loss, _, qualifying) = contrastive_from_similarities(&sim, &batch.labels);
    ContrastiveOutcome {
        loss,
        qualifying,
        skipped: batch.labels.len() - qualifying,
    }
}

/// Loss with the gradient with respect to the embeddings.
pub fn contrastive_loss_grad(batch: &ContrastiveBatch, scale: f64) -> (ContrastiveOutcome, Matrix) {
    let mut g = Graph::new();
    let u = g.leaf(batch.embeddings.clone());
    let (loss, qualifying) = contrastive_loss_var(&mut g, u, &batch.labels, scale);
    let grads = g.backward(loss);
    let grad = grads
        .wrt(u)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(batch.embeddings.rows(), batch.embeddings.cols()));
    let outcome = ContrastiveOutcome {
        loss: g.value(loss).item(),
        qualifying,
        skipped: batch.labels.len() - qualifying,
    };
    (outcome, grad)
}

/// Linear warmup over `round(warmup_fraction · max_steps)` steps, then linear
/// decay to zero at `max_steps`. Step indices start at 0.
pub fn lr_multiplier(step: usize, max_steps: usize, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * max_steps as f64).round() as usize;
    if step < warmup {
        return step as f64 / warmup.max(1) as f64;
    }
    let remaining = max_steps.saturating_sub(step) as f64;
    (remaining / max_steps.saturating_sub(warmup).max(1) as f64).max(0.0)
}

/// Scales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Matrix>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with decoupled weight decay and per-group learning rates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<ParamId, Matrix>,
    v: HashMap<ParamId, Matrix>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Matrix>,
        encoder_lr: f64,
        decoder_lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, grad) in grads {
            let entry = store.entry(id);
            let lr = match entry.group {
                ParamGroup::Encoder => encoder_lr,
                ParamGroup::Decoder => decoder_lr,
            };
            let decay = if entry.decay { self.weight_decay } else { 0.0 };
            let (r, c) = grad.shape();
            let m = self.m.entry(id).or_insert_with(|| Matrix::zeros(r, c));
            let v = self.v.entry(id).or_insert_with(|| Matrix::zeros(r, c));
            let p = store.get_mut(id);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pv, gv), mv), vv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= lr * decay * *pv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
    }
}

/// Episode trainer: one episode per optimizer step.
pub struct Trainer {
    pub model: PromptNer,
    pub config: TrainConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: PromptNer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
            config.weight_decay,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d209);
        Ok(Trainer {
            model,
            config,
            optimizer,
            rng,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Support and query sentences as plain supervised examples; one update.
    pub fn train_step(&mut self, episode: &Episode) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let (breakdown, mut grads) = self.model.loss_and_grads(
            &[&episode.support, &episode.query],
            &episode.type_set,
            episode.k_shot,
            &cfg.loss,
            Some(&mut self.rng),
        )?;
        if let Some(max) = cfg.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        let mult = lr_multiplier(self.step, cfg.max_steps, cfg.warmup_fraction);
        self.optimizer.step(
            &mut self.model.params,
            &grads,
            cfg.encoder_lr * mult,
            cfg.decoder_lr * mult,
        );
        self.step += 1;
        Ok(breakdown)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Step after which the kept parameters were taken.
    pub best_step: usize,
    pub best_dev_f1: Option<f64>,
}

/// Runs `max_steps` steps over `episodes` (reshuffled every pass). When
/// `dev_f1` is given and `eval_every > 0`, the parameters with the best dev
/// score are kept.
pub fn train(
    model: PromptNer,
    episodes: &[Episode],
    config: TrainConfig,
    dev_f1: Option<&dyn Fn(&PromptNer) -> Result<f64>>,
) -> Result<(PromptNer, TrainReport)> {
    if episodes.is_empty() {
        return Err(Error::Run("no training episodes".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Trainer::new(model, config)?;
    let max_steps = trainer.config.max_steps;
    let eval_every = trainer.config.eval_every;
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(max_steps);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for step in 0..max_steps {
        if order.is_empty() {
            order = (0..episodes.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let ep = &episodes[order.pop().expect("refilled")];
        let b = trainer.train_step(ep)?;
        losses.push(b.total);
        if let Some(f) = dev_f1 {
            if eval_every > 0 && ((step + 1) % eval_every == 0 || step + 1 == max_steps) {
                let score = f(&trainer.model)?;
                log::info!(
                    "step {}: loss {:.4}, dev F1 {:.4}",
                    step + 1,
                    b.total,
                    score
                );
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, step + 1, trainer.model.params.clone()));
                }
            }
        }
    }
    let mut model = trainer.model;
    let report = match best {
        Some((score, at, params)) => {
            model.params = params;
            TrainReport {
                losses,
                best_step: at,
                best_dev_f1: Some(score),
            }
        }
        None => TrainReport {
            losses,
            best_step: max_steps,
            best_dev_f1: None,
        },
    };
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Threshold,
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub steps_taken: usize,
    /// Loss of the last step, measured before its update.
    pub final_loss: f64,
    pub reason: StopReason,
}

/// Repeated updates on the support set with a fresh optimizer and constant
/// learning rates; stops once a step's loss is below the threshold or the
/// step cap is reached.
pub fn finetune_on_support(
    model: &mut PromptNer,
    support: &[TaggedSentence],
    type_set: &EntityTypeSet,
    k_shot: usize,
    cfg: &FinetuneConfig,
    loss: &LossOptions,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if support.is_empty() {
        return Err(Error::Run(
            "fine-tuning needs a non-empty support set".into(),
        ));
    }
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7_00e5);
    let mut steps = 0;
    loop {
        let (b, mut grads) =
            model.loss_and_grads(&[support], type_set, k_shot, loss, Some(&mut rng))?;
        if let Some(max) = cfg.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        opt.step(&mut model.params, &grads, cfg.encoder_lr, cfg.decoder_lr);
        steps += 1;
        if b.total < cfg.loss_threshold {
            return Ok(FinetuneOutcome {
                steps_taken: steps,
                final_loss: b.total,
                reason: StopReason::Threshold,
            });
        }
        if steps >= cfg.max_finetune_steps {
            return Ok(FinetuneOutcome {
                steps_taken: steps,
                final_loss: b.total,
                reason: StopReason::Cap,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub encoder_kind: BackendKind,
}

pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    format!("{:016x}", tensorfile::fnv1a(&json))
}

/// Writes `model.bin`, `meta.json` and `vocab.txt` into `dir`.
pub fn save_checkpoint(
    model: &PromptNer,
    dir: impl AsRef<Path>,
    step: usize,
    seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        step,
        seed,
        config_hash: config_hash(&model.config),
        model: model.config.clone(),
        encoder: model.detector.config.clone(),
        encoder_kind: model.detector.kind.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    model.tokenizer.save_vocab(dir.join("vocab.txt"))?;
    tensorfile::write_tensors(
        dir.join("model.bin"),
        model
            .params
            .entries()
            .iter()
            .map(|e| (e.name.as_str(), &e.value)),
    )
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(PromptNer, CheckpointMeta)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::Run(format!("no checkpoint at {}", dir.display())));
    }
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {}, expected {CHECKPOINT_VERSION}",
            meta.version
        )));
    }
    if meta.config_hash != config_hash(&meta.model) {
        return Err(Error::Checkpoint("checkpoint config hash mismatch".into()));
    }
    let tokenizer = WordPieceTokenizer::from_vocab_file(dir.join("vocab.txt"), true)?;
    let mut tensors: HashMap<String, Matrix> = tensorfile::read_tensors(dir.join("model.bin"))?
        .into_iter()
        .collect();
    let mut take_prefixed = |prefix: &str| -> HashMap<String, Matrix> {
        let keys: Vec<String> = tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let v = tensors.remove(&k).expect("key listed");
                (k[prefix.len()..].to_string(), v)
            })
            .collect()
    };
    let mut params = ParamStore::new();
    let kind = meta.encoder_kind.clone();
    let det_values = take_prefixed(DETECTOR);
    let detector = TransformerEncoder::from_tensors(
        &mut params,
        DETECTOR,
        meta.encoder.clone(),
        kind.clone(),
        &tokenizer,
        det_values,
    )?;
    let classifier = if meta.model.two_encoders {
        let values = take_prefixed(CLASSIFIER);
        Some(TransformerEncoder::from_tensors(
            &mut params,
            CLASSIFIER,
            meta.encoder.clone(),
            kind,
            &tokenizer,
            values,
        )?)
    } else {
        None
    };
    let mut bia = take_prefixed(BIAFFINE);
    let mut get = |n: &str| {
        bia.remove(n)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {BIAFFINE}{n}")))
    };
    let weights = BiaffineWeights {
        w_s: get("w_s")?,
        w_e: get("w_e")?,
        w_p: get("w_p")?,
        u: get("u")?,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensor {extra} in checkpoint"
        )));
    }
    let biaffine = BiaffineParams::register(&mut params, BIAFFINE, weights);
    let config = meta.model.clone();
    let score_options = ScoreOptions {
        rope_base: config.rope_base,
        leaky_slope: config.leaky_slope,
        rope: true,
        position_offset: 0,
    };
    Ok((
        PromptNer {
            config,
            params,
            tokenizer: Arc::new(tokenizer),
            detector,
            classifier,
            biaffine,
            score_options,
        },
        meta,
    ))
}

/// Tiny-encoder vocabulary covering the sentences, the prompt template, the
/// label words of `type_names` and `extra_words`.
pub fn build_vocabulary<'a>(
    sentences: impl IntoIterator<Item = &'a TaggedSentence>,
    type_names: &[String],
    template: &PromptTemplate,
    extra_words: &[&str],
) -> Result<WordPieceTokenizer> {
    let mut words: Vec<String> = template.prompt_words();
    words.extend(extra_words.iter().map(|w| w.to_string()));
    words.push(crate::episode::NONE.to_string());
    for t in type_names {
        words.push(label_word(t)?);
    }
    for s in sentences {
        words.extend(s.words.iter().cloned());
    }
    Ok(WordPieceTokenizer::build(words.iter().map(String::as_str)))
}

/// Seed-derived stream for reproducible dropout noise.
pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut base = ChaCha8Rng::seed_from_u64(seed);
    ChaCha8Rng::seed_from_u64(base.next_u64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::TaggedSentence;

    fn sent(id: &str, text: &str, tags: &str) -> TaggedSentence {
        TaggedSentence::new(
            id,
            text.split_whitespace().map(String::from).collect(),
            tags.split_whitespace().map(String::from).collect(),
        )
        .unwrap()
    }

    fn episode() -> Episode {
        Episode {
            support: vec![
                sent("s0", "alice visited paris", "person O city"),
                sent("s1", "bob left rome", "person O city"),
            ],
            query: vec![sent("q0", "carol saw rome", "person O city")],
            type_set: EntityTypeSet::new(["person", "city"]).unwrap(),
            n_way: 2,
            k_shot: 1,
        }
    }

    fn model(dropout: f64) -> PromptNer {
        let ep = episode();
        let words = ep
            .support
            .iter()
            .chain(&ep.query)
            .flat_map(|s| s.words.clone())
            .chain(
                [
                    "find", "some", "entities", "such", "as", "none", "person", "city",
                ]
                .map(String::from),
            )
            .collect::<Vec<_>>();
        let tok = WordPieceTokenizer::build(words.iter().map(String::as_str));
        let cfg = ModelConfig {
            encoder: EncoderSpec::Tiny { d: 16, layers: 1 },
            dropout,
            biaffine_hidden: 8,
            ..ModelConfig::default()
        };
        PromptNer::new(cfg, Some(tok), 7).unwrap()
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_multiplier(0, 100, 0.1), 0.0);
        assert!((lr_multiplier(5, 100, 0.1) - 0.5).abs() < 1e-12);
        assert_eq!(lr_multiplier(10, 100, 0.1), 1.0);
        assert!((lr_multiplier(55, 100, 0.1) - 0.5).abs() < 1e-12);
        assert_eq!(lr_multiplier(100, 100, 0.1), 0.0);
        assert_eq!(lr_multiplier(0, 10, 0.0), 1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::new();
        g.insert(ParamId(0), Matrix::from_rows(&[[3.0, 4.0]]));
        g.insert(ParamId(1), Matrix::from_rows(&[[12.0]]));
        assert!((clip_global_norm(&mut g, 5.0) - 13.0).abs() < 1e-12);
        let n: f64 = g
            .values()
            .flat_map(|m| m.as_slice().to_vec())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((n - 5.0).abs() < 1e-5);
    }

    #[test]
    fn contrastive_closed_forms() {
        // Labels a, a, b; unit-scale similarities.
        let sym = ContrastiveBatch {
            embeddings: Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]),
            labels: vec![1, 1, 2],
        };
        let out = contrastive_loss(&sym, 1.0);
        assert_eq!(out.qualifying, 2);
        assert!(out.loss.abs() < 1e-12);

        let one = ContrastiveBatch {
            embeddings: Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
            labels: vec![1, 1, 2],
        };
        // Anchor 0: positive d=1, negative d=0; anchor 1 likewise.
        let out = contrastive_loss(&one, 1.0);
        assert!((out.loss - (-2.0)).abs() < 1e-12);

        let none = ContrastiveBatch {
            embeddings: Matrix::zeros(2, 2),
            labels: vec![1, 2],
        };
        let out = contrastive_loss(&none, 1.0);
        assert_eq!((out.loss, out.qualifying, out.skipped), (0.0, 0, 2));
    }

    #[test]
    fn loss_components_add_up() {
        let m = model(0.1);
        let ep = episode();
        let opts = LossOptions {
            use_contrastive: true,
            ..LossOptions::default()
        };
        let mut rng = dropout_rng(1);
        let (b, grads) = m
            .loss_and_grads(
                &[&ep.support, &ep.query],
                &ep.type_set,
                ep.k_shot,
                &opts,
                Some(&mut rng),
            )
            .unwrap();
        assert_eq!(b.total, b.span + b.class + b.contrastive);
        assert!(b.contrastive != 0.0);
        assert_eq!(grads.len(), m.params.len());
    }

    #[test]
    fn empty_sentences_skip_class_loss() {
        let m = model(0.0);
        let ep = episode();
        let empty: Vec<TaggedSentence> = ep
            .support
            .iter()
            .map(|s| sent(&s.id, &s.words.join(" "), "O O O"))
            .collect();
        let opts = LossOptions {
            negatives_in_class_loss: false,
            ..LossOptions::default()
        };
        let b = m.loss(&[&empty], &ep.type_set, 1, &opts).unwrap();
        assert_eq!(b.class, 0.0);
        assert!(b.span > 0.0);
    }

    #[test]
    fn finetune_stops_at_cap_or_threshold() {
        let ep = episode();
        let mut m = model(0.0);
        let cfg = FinetuneConfig {
            max_finetune_steps: 3,
            ..FinetuneConfig::desk()
        };
        let out = finetune_on_support(
            &mut m,
            &ep.support,
            &ep.type_set,
            1,
            &cfg,
            &LossOptions::default(),
        )
        .unwrap();
        assert_eq!((out.steps_taken, out.reason), (3, StopReason::Cap));

        let mut m = model(0.0);
        let cfg = FinetuneConfig {
            loss_threshold: 1e9,
            ..FinetuneConfig::desk()
        };
        let out = finetune_on_support(
            &mut m,
            &ep.support,
            &ep.type_set,
            1,
            &cfg,
            &LossOptions::default(),
        )
        .unwrap();
        assert_eq!((out.steps_taken, out.reason), (1, StopReason::Threshold));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(0.0);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path(), 3, 1).unwrap();
        let (back, meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta.step, 3);
        let ep = episode();
        let a = m.view(&ep.query[0].words, &ep.type_set).unwrap();
        let b = back.view(&ep.query[0].words, &ep.type_set).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.h_n, b.h_n);

        let bin = dir.path().join("model.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }
}
