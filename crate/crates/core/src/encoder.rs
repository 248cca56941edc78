//! BERT-architecture encoder with per-word mean pooling.
//!
//! The same network backs both encoder kinds: a small randomly initialized
//! one for desk-scale training, and one whose weights come from a standard
//! pretrained checkpoint directory (`config.json`, `vocab.txt`,
//! `model.safetensors`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::prompt::PromptedInput;
use crate::tensor::Matrix;
use crate::tensorfile;
use crate::tokenizer::WordPieceTokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub layer_norm_eps: f64,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given width and depth.
    pub fn tiny(vocab_size: usize, hidden: usize, layers: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden,
            layers,
            heads: (hidden / 16).max(1),
            intermediate: 4 * hidden,
            max_positions: 256,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            dropout: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendKind {
    Tiny,
    /// Loaded from the checkpoint directory named by `source`.
    Pretrained {
        source: String,
    },
}

#[derive(Debug, Clone)]
struct LayerIds {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Parameter ids of one encoder inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub kind: BackendKind,
    pub config: EncoderConfig,
    prefix: String,
    cls_id: u32,
    sep_id: u32,
    word_emb: ParamId,
    pos_emb: ParamId,
    type_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
}

/// Local parameter names, relative to the encoder prefix.
fn layer_names(i: usize) -> [String; 16] {
    let p = format!("layer.{i}.");
    [
        "attn.q.weight",
        "attn.q.bias",
        "attn.k.weight",
        "attn.k.bias",
        "attn.v.weight",
        "attn.v.bias",
        "attn.out.weight",
        "attn.out.bias",
        "attn.norm.weight",
        "attn.norm.bias",
        "ffn.in.weight",
        "ffn.in.bias",
        "ffn.out.weight",
        "ffn.out.bias",
        "ffn.norm.weight",
        "ffn.norm.bias",
    ]
    .map(|s| format!("{p}{s}"))
}

/// Shape of every parameter by local name, in registration order.
fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.hidden;
    let mut out = vec![
        ("embeddings.word".to_string(), cfg.vocab_size, d),
        ("embeddings.position".to_string(), cfg.max_positions, d),
        ("embeddings.token_type".to_string(), cfg.type_vocab_size, d),
        ("embeddings.norm.weight".to_string(), 1, d),
        ("embeddings.norm.bias".to_string(), 1, d),
    ];
    for i in 0..cfg.layers {
        let names = layer_names(i);
        let shapes = [
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (1, d),
            (1, d),
            (d, cfg.intermediate),
            (1, cfg.intermediate),
            (cfg.intermediate, d),
            (1, d),
            (1, d),
            (1, d),
        ];
        for (name, (r, c)) in names.into_iter().zip(shapes) {
            out.push((name, r, c));
        }
    }
    out
}

fn is_norm_weight(name: &str) -> bool {
    name.ends_with("norm.weight")
}

impl TransformerEncoder {
    /// Registers freshly initialized parameters under `prefix`.
    pub fn init_random(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        tokenizer: &WordPieceTokenizer,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        config.validate()?;
        let mut values = HashMap::new();
        for (name, r, c) in param_shapes(&config) {
            let m = if is_norm_weight(&name) {
                Matrix::filled(r, c, 1.0)
            } else if name.ends_with("bias") {
                Matrix::zeros(r, c)
            } else {
                Matrix::random_normal(r, c, 0.02, rng)
            };
            values.insert(name, m);
        }
        Self::from_tensors(store, prefix, config, BackendKind::Tiny, tokenizer, values)
    }

    /// Registers parameters from named tensors (local names, no prefix).
    pub fn from_tensors(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        kind: BackendKind,
        tokenizer: &WordPieceTokenizer,
        mut values: HashMap<String, Matrix>,
    ) -> Result<Self> {
        let mut ids = HashMap::new();
        for (name, r, c) in param_shapes(&config) {
            let m = values
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing encoder tensor {name}")))?;
            if m.shape() != (r, c) {
                return Err(Error::Shape(format!(
                    "encoder tensor {name} is {:?}, expected {:?}",
                    m.shape(),
                    (r, c)
                )));
            }
            let decay = !(name.ends_with("bias") || is_norm_weight(&name));
            let id = store.register(format!("{prefix}{name}"), m, ParamGroup::Encoder, decay);
            ids.insert(name, id);
        }
        let layers = (0..config.layers)
            .map(|i| {
                let n = layer_names(i);
                LayerIds {
                    q_w: ids[&n[0]],
                    q_b: ids[&n[1]],
                    k_w: ids[&n[2]],
                    k_b: ids[&n[3]],
                    v_w: ids[&n[4]],
                    v_b: ids[&n[5]],
                    o_w: ids[&n[6]],
                    o_b: ids[&n[7]],
                    ln1_g: ids[&n[8]],
                    ln1_b: ids[&n[9]],
                    ff1_w: ids[&n[10]],
                    ff1_b: ids[&n[11]],
                    ff2_w: ids[&n[12]],
                    ff2_b: ids[&n[13]],
                    ln2_g: ids[&n[14]],
                    ln2_b: ids[&n[15]],
                }
            })
            .collect();
        Ok(TransformerEncoder {
            kind,
            prefix: prefix.to_string(),
            cls_id: tokenizer.cls_id(),
            sep_id: tokenizer.sep_id(),
            word_emb: ids["embeddings.word"],
            pos_emb: ids["embeddings.position"],
            type_emb: ids["embeddings.token_type"],
            emb_ln_g: ids["embeddings.norm.weight"],
            emb_ln_b: ids["embeddings.norm.bias"],
            layers,
            config,
        })
    }

    /// Registers parameters from a pretrained checkpoint directory holding
    /// `config.json`, `vocab.txt` and `model.safetensors` in the usual BERT
    /// naming scheme. Returns the encoder and the checkpoint's tokenizer.
    pub fn load_pretrained(
        store: &mut ParamStore,
        prefix: &str,
        dir: impl AsRef<Path>,
        dropout: f64,
    ) -> Result<(Self, WordPieceTokenizer)> {
        let dir = dir.as_ref();
        let cfg_json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        let get = |k: &str| -> Result<usize> {
            cfg_json
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("config.json lacks {k}")))
        };
        let config = EncoderConfig {
            vocab_size: get("vocab_size")?,
            hidden: get("hidden_size")?,
            layers: get("num_hidden_layers")?,
            heads: get("num_attention_heads")?,
            intermediate: get("intermediate_size")?,
            max_positions: get("max_position_embeddings")?,
            type_vocab_size: get("type_vocab_size").unwrap_or(2),
            layer_norm_eps: cfg_json
                .get("layer_norm_eps")
                .and_then(|v| v.as_f64())
                .unwrap_or(1e-12),
            dropout,
        };
        config.validate()?;
        let lowercase = cfg_json
            .get("do_lower_case")
            .and_then(|v| v.as_bool())
            .unwrap_or(true);
        let tokenizer = WordPieceTokenizer::from_vocab_file(dir.join("vocab.txt"), lowercase)?;

        let bytes = fs::read(dir.join("model.safetensors"))?;
        let tensors = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("safetensors: {e}")))?;
        let mut raw: HashMap<String, Matrix> = HashMap::new();
        for (name, view) in tensors.tensors() {
            let key = name.strip_prefix("bert.").unwrap_or(&name).to_string();
            raw.insert(key, view_to_matrix(&name, &view)?);
        }
        let mut values = HashMap::new();
        for (local, hf, transpose) in hf_name_map(config.layers) {
            let m = hf
                .iter()
                .find_map(|h| raw.remove(*h))
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {}", hf[0])))?;
            let m = if m.rows() == 1 || !transpose {
                m
            } else {
                m.transpose()
            };
            values.insert(local, m);
        }
        let source = dir.display().to_string();
        let enc = Self::from_tensors(
            store,
            prefix,
            config,
            BackendKind::Pretrained { source },
            &tokenizer,
            values,
        )?;
        Ok((enc, tokenizer))
    }

    /// Exports the parameters under the BERT safetensors naming scheme.
    pub fn export_safetensors(
        &self,
        store: &ParamStore,
        dir: impl AsRef<Path>,
        tokenizer: &WordPieceTokenizer,
    ) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let c = &self.config;
        let config = serde_json::json!({
            "vocab_size": c.vocab_size,
            "hidden_size": c.hidden,
            "num_hidden_layers": c.layers,
            "num_attention_heads": c.heads,
            "intermediate_size": c.intermediate,
            "max_position_embeddings": c.max_positions,
            "type_vocab_size": c.type_vocab_size,
            "layer_norm_eps": c.layer_norm_eps,
            "do_lower_case": tokenizer.lowercase(),
        });
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&config)?,
        )?;
        tokenizer.save_vocab(dir.join("vocab.txt"))?;
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (local, hf, transpose) in hf_name_map(c.layers) {
            let id = store
                .lookup(&format!("{}{local}", self.prefix))
                .expect("encoder parameter registered");
            let m = store.get(id);
            let (m, shape) = if m.rows() == 1 {
                (m.clone(), vec![m.cols()])
            } else if transpose {
                let t = m.transpose();
                let s = vec![t.rows(), t.cols()];
                (t, s)
            } else {
                (m.clone(), vec![m.rows(), m.cols()])
            };
            let bytes = m
                .as_slice()
                .iter()
                .flat_map(|v| (*v as f32).to_le_bytes())
                .collect();
            buffers.push((format!("bert.{}", hf[0]), shape, bytes));
        }
        let views: Vec<(String, safetensors::tensor::TensorView)> = buffers
            .iter()
            .map(|(n, s, b)| {
                let v = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), b)
                    .expect("consistent tensor view");
                (n.clone(), v)
            })
            .collect();
        let out =
            safetensors::serialize(views, &None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(dir.join("model.safetensors"), out)?;
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn param_prefix(&self) -> &str {
        &self.prefix
    }

    /// Records the forward pass on `g`. Dropout is active when `dropout_rng`
    /// is given and the configured rate is positive.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pi: &PromptedInput,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncodedVars> {
        let cfg = &self.config;
        let len = pi.token_ids.len() + 2;
        if len > cfg.max_positions {
            let text = pi.sentence_words().join(" ");
            let shown: String = text.chars().take(80).collect();
            return Err(Error::SequenceTooLong {
                sentence: shown,
                needed: len,
                limit: cfg.max_positions,
            });
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(self.cls_id as usize);
        ids.extend(pi.token_ids.iter().map(|&t| t as usize));
        ids.push(self.sep_id as usize);
        if let Some(bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside the encoder vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let positions: Vec<usize> = (0..len).collect();

        let w = g.param_rows(store, self.word_emb, &ids);
        let p = g.param_rows(store, self.pos_emb, &positions);
        let t = g.param_rows(store, self.type_emb, &vec![0; len]);
        let x = g.add(w, p);
        let x = g.add(x, t);
        let gam = g.param(store, self.emb_ln_g);
        let bet = g.param(store, self.emb_ln_b);
        let x = g.layer_norm(x, gam, bet, cfg.layer_norm_eps);
        let mut x = dropout(g, x, cfg.dropout, dropout_rng.as_deref_mut());

        let heads = cfg.heads;
        let dh = cfg.hidden / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let q = linear(g, store, x, layer.q_w, layer.q_b);
            let k = linear(g, store, x, layer.k_w, layer.k_b);
            let v = linear(g, store, x, layer.v_w, layer.v_b);
            let mut ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, inv_sqrt);
                let probs = g.softmax_rows(scores);
                let probs = dropout(g, probs, cfg.dropout, dropout_rng.as_deref_mut());
                ctx.push(g.matmul(probs, vh));
            }
            let ctx = if heads == 1 {
                ctx[0]
            } else {
                g.concat_cols(&ctx)
            };
            let attn = linear(g, store, ctx, layer.o_w, layer.o_b);
            let attn = dropout(g, attn, cfg.dropout, dropout_rng.as_deref_mut());
            let res = g.add(x, attn);
            let gam = g.param(store, layer.ln1_g);
            let bet = g.param(store, layer.ln1_b);
            let h1 = g.layer_norm(res, gam, bet, cfg.layer_norm_eps);

            let ff = linear(g, store, h1, layer.ff1_w, layer.ff1_b);
            let ff = g.gelu(ff);
            let ff = linear(g, store, ff, layer.ff2_w, layer.ff2_b);
            let ff = dropout(g, ff, cfg.dropout, dropout_rng.as_deref_mut());
            let res = g.add(h1, ff);
            let gam = g.param(store, layer.ln2_g);
            let bet = g.param(store, layer.ln2_b);
            x = g.layer_norm(res, gam, bet, cfg.layer_norm_eps);
        }

        // Word pooling; subtoken i sits at position i + 1 after [CLS].
        let ranges: Vec<_> = pi
            .alignment
            .iter()
            .map(|r| r.start + 1..r.end + 1)
            .collect();
        let words = g.pool_rows(x, &ranges);
        let h_m = g.slice_rows(words, pi.label_offset(), pi.m);
        let h_n = g.slice_rows(words, pi.sentence_offset(), pi.n);
        let h_l = g.select_rows(words, &pi.prompt_word_indices());
        Ok(EncodedVars {
            words,
            h_l,
            h_m,
            h_n,
        })
    }

    /// Eval-mode encoding (no dropout).
    pub fn encode(&self, store: &ParamStore, pi: &PromptedInput) -> Result<EncodedInput> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, store, pi, None)?;
        Ok(vars.values(&g))
    }
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let (r, c) = g.shape(x);
            let keep = 1.0 - rate;
            let mask = Matrix::from_vec(
                r,
                c,
                (0..r * c)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
            g.mul_const(x, mask)
        }
        _ => x,
    }
}

/// `(local name, candidate checkpoint names, stored as [out, in])`.
fn hf_name_map(layers: usize) -> Vec<(String, Vec<&'static str>, bool)> {
    let leak = |s: String| -> &'static str { Box::leak(s.into_boxed_str()) };
    let mut out = vec![
        (
            "embeddings.word".to_string(),
            vec!["embeddings.word_embeddings.weight"],
            false,
        ),
        (
            "embeddings.position".to_string(),
            vec!["embeddings.position_embeddings.weight"],
            false,
        ),
        (
            "embeddings.token_type".to_string(),
            vec!["embeddings.token_type_embeddings.weight"],
            false,
        ),
        (
            "embeddings.norm.weight".to_string(),
            vec!["embeddings.LayerNorm.weight", "embeddings.LayerNorm.gamma"],
            false,
        ),
        (
            "embeddings.norm.bias".to_string(),
            vec!["embeddings.LayerNorm.bias", "embeddings.LayerNorm.beta"],
            false,
        ),
    ];
    for i in 0..layers {
        let local = layer_names(i);
        let p = format!("encoder.layer.{i}.");
        let hf: [(&[&str], bool); 16] = [
            (&["attention.self.query.weight"], true),
            (&["attention.self.query.bias"], false),
            (&["attention.self.key.weight"], true),
            (&["attention.self.key.bias"], false),
            (&["attention.self.value.weight"], true),
            (&["attention.self.value.bias"], false),
            (&["attention.output.dense.weight"], true),
            (&["attention.output.dense.bias"], false),
            (
                &[
                    "attention.output.LayerNorm.weight",
                    "attention.output.LayerNorm.gamma",
                ],
                false,
            ),
            (
                &[
                    "attention.output.LayerNorm.bias",
                    "attention.output.LayerNorm.beta",
                ],
                false,
            ),
            (&["intermediate.dense.weight"], true),
            (&["intermediate.dense.bias"], false),
            (&["output.dense.weight"], true),
            (&["output.dense.bias"], false),
            (
                &["output.LayerNorm.weight", "output.LayerNorm.gamma"],
                false,
            ),
            (&["output.LayerNorm.bias", "output.LayerNorm.beta"], false),
        ];
        for (name, (cands, t)) in local.into_iter().zip(hf) {
            out.push((
                name,
                cands.iter().map(|c| leak(format!("{p}{c}"))).collect(),
                t,
            ));
        }
    }
    out
}

fn view_to_matrix(name: &str, view: &safetensors::tensor::TensorView<'_>) -> Result<Matrix> {
    let shape = view.shape();
    let (rows, cols) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has rank {}",
                other.len()
            )))
        }
    };
    let data: Vec<f64> = match view.dtype() {
        safetensors::Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        safetensors::Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        other => {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has unsupported dtype {other:?}"
            )))
        }
    };
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Tape handles of one encoded prompted input.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    /// Every word, in prompted-input order.
    pub words: Var,
    pub h_l: Var,
    pub h_m: Var,
    pub h_n: Var,
}

impl EncodedVars {
    pub fn values(&self, g: &Graph) -> EncodedInput {
        EncodedInput {
            h_l: g.value(self.h_l).clone(),
            h_m: g.value(self.h_m).clone(),
            h_n: g.value(self.h_n).clone(),
        }
    }
}

/// `H = [H_l, H_m, H_n]` as plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub h_l: Matrix,
    pub h_m: Matrix,
    pub h_n: Matrix,
}

impl EncodedInput {
    pub fn d(&self) -> usize {
        self.h_n.cols()
    }

    pub fn all_finite(&self) -> bool {
        self.h_l.all_finite() && self.h_m.all_finite() && self.h_n.all_finite()
    }
}

/// A standalone encoder: parameters, network and tokenizer together.
#[derive(Debug, Clone)]
pub struct EncoderHandle {
    pub params: ParamStore,
    pub encoder: TransformerEncoder,
    pub tokenizer: Arc<WordPieceTokenizer>,
}

impl EncoderHandle {
    pub fn kind(&self) -> &BackendKind {
        &self.encoder.kind
    }

    pub fn d(&self) -> usize {
        self.encoder.hidden()
    }

    pub fn encode(&self, pi: &PromptedInput) -> Result<EncodedInput> {
        self.encoder.encode(&self.params, pi)
    }

    pub fn load_pretrained(dir: impl AsRef<Path>) -> Result<Self> {
        let mut params = ParamStore::new();
        let (encoder, tokenizer) = TransformerEncoder::load_pretrained(&mut params, "", dir, 0.0)?;
        Ok(EncoderHandle {
            params,
            encoder,
            tokenizer: Arc::new(tokenizer),
        })
    }

    /// Writes `encoder.json`, `vocab.txt` and `encoder.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = serde_json::json!({
            "version": tensorfile::TENSOR_FILE_VERSION,
            "kind": self.encoder.kind,
            "config": self.encoder.config,
        });
        fs::write(
            dir.join("encoder.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        self.tokenizer.save_vocab(dir.join("vocab.txt"))?;
        tensorfile::write_tensors(
            dir.join("encoder.bin"),
            self.params
                .entries()
                .iter()
                .map(|e| (e.name.as_str(), &e.value)),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("encoder.json"))?)?;
        let version = meta.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != tensorfile::TENSOR_FILE_VERSION {
            return Err(Error::Checkpoint(format!(
                "encoder version {version}, expected {}",
                tensorfile::TENSOR_FILE_VERSION
            )));
        }
        let config: EncoderConfig = serde_json::from_value(meta["config"].clone())?;
        let kind: BackendKind = serde_json::from_value(meta["kind"].clone())?;
        let tokenizer = WordPieceTokenizer::from_vocab_file(dir.join("vocab.txt"), true)?;
        let values: HashMap<String, Matrix> = tensorfile::read_tensors(dir.join("encoder.bin"))?
            .into_iter()
            .collect();
        let mut params = ParamStore::new();
        let encoder =
            TransformerEncoder::from_tensors(&mut params, "", config, kind, &tokenizer, values)?;
        Ok(EncoderHandle {
            params,
            encoder,
            tokenizer: Arc::new(tokenizer),
        })
    }
}

/// Randomly initialized desk-scale encoder. Deterministic per seed.
pub fn make_tiny_encoder(
    d: usize,
    layers: usize,
    seed: u64,
    tokenizer: WordPieceTokenizer,
) -> Result<EncoderHandle> {
    if d < 8 || layers < 1 {
        return Err(Error::Config(format!(
            "tiny encoder needs d >= 8 and layers >= 1, got d={d}, layers={layers}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let config = EncoderConfig::tiny(tokenizer.vocab_size(), d, layers);
    let encoder = TransformerEncoder::init_random(&mut params, "", config, &tokenizer, &mut rng)?;
    Ok(EncoderHandle {
        params,
        encoder,
        tokenizer: Arc::new(tokenizer),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::EntityTypeSet;
    use crate::prompt::{build_prompted_input, PromptTemplate};

    fn tokenizer() -> WordPieceTokenizer {
        WordPieceTokenizer::build(
            "find some entities , such as none person company : steve jobs founded apple in 1976 ."
                .split_whitespace(),
        )
    }

    fn prompted(tok: &WordPieceTokenizer, sentence: &str) -> PromptedInput {
        let words: Vec<String> = sentence.split_whitespace().map(String::from).collect();
        let types = EntityTypeSet::new(["person", "company"]).unwrap();
        build_prompted_input(&words, &types, &PromptTemplate::default(), tok).unwrap()
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = make_tiny_encoder(32, 2, 1, tokenizer()).unwrap();
        let b = make_tiny_encoder(32, 2, 1, tokenizer()).unwrap();
        for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
        let c = make_tiny_encoder(32, 2, 2, tokenizer()).unwrap();
        assert_ne!(a.params.entries()[0].value, c.params.entries()[0].value);
    }

    #[test]
    fn output_shapes_and_determinism() {
        let h = make_tiny_encoder(32, 2, 1, tokenizer()).unwrap();
        let pi = prompted(&h.tokenizer, "Steve Jobs founded Apple .");
        let enc = h.encode(&pi).unwrap();
        assert_eq!(enc.h_n.shape(), (5, 32));
        assert_eq!(enc.h_m.shape(), (3, 32));
        assert_eq!(enc.h_l.shape(), (7, 32));
        assert!(enc.all_finite());
        assert_eq!(h.encode(&pi).unwrap(), enc);
    }

    #[test]
    fn words_are_mean_pooled() {
        let h = make_tiny_encoder(16, 1, 4, tokenizer()).unwrap();
        // "stapple" is not in the vocabulary and splits into several pieces.
        let pi = prompted(&h.tokenizer, "steve stapple");
        let mut g = Graph::new();
        let vars = h.encoder.forward(&mut g, &h.params, &pi, None).unwrap();
        // Recompute the final hidden states by pooling single-subtoken ranges.
        let single: Vec<_> = (0..pi.subtokens.len()).map(|i| i..i + 1).collect();
        let mut pi_tokens = pi.clone();
        pi_tokens.alignment = single;
        let mut g2 = Graph::new();
        let per_token = h
            .encoder
            .forward(&mut g2, &h.params, &pi_tokens, None)
            .unwrap();
        let tokens = g2.value(per_token.words);
        let words = g.value(vars.words);
        for (w, r) in pi.alignment.iter().enumerate() {
            let mut mean = [0.0; 16];
            for t in r.clone() {
                for (m, v) in mean.iter_mut().zip(tokens.row(t)) {
                    *m += v / r.len() as f64;
                }
            }
            for (a, b) in mean.iter().zip(words.row(w)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(pi.alignment.last().unwrap().len() > 1);
    }

    #[test]
    fn overlong_input_is_an_error() {
        let mut h = make_tiny_encoder(8, 1, 1, tokenizer()).unwrap();
        h.encoder.config.max_positions = 12;
        let pi = prompted(&h.tokenizer, "Steve Jobs founded Apple in 1976 .");
        assert!(matches!(h.encode(&pi), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let h = make_tiny_encoder(16, 1, 3, tokenizer()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        h.save(dir.path()).unwrap();
        let back = EncoderHandle::load(dir.path()).unwrap();
        let pi = prompted(&h.tokenizer, "Steve Jobs");
        assert_eq!(h.encode(&pi).unwrap(), back.encode(&pi).unwrap());
    }

    #[test]
    fn pretrained_checkpoint_loads() {
        let h = make_tiny_encoder(16, 2, 5, tokenizer()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        h.encoder
            .export_safetensors(&h.params, dir.path(), &h.tokenizer)
            .unwrap();
        let loaded = EncoderHandle::load_pretrained(dir.path()).unwrap();
        assert!(matches!(loaded.kind(), BackendKind::Pretrained { .. }));
        let pi = prompted(&h.tokenizer, "Steve Jobs founded Apple");
        let a = h.encode(&pi).unwrap();
        let b = loaded.encode(&pi).unwrap();
        // f32 storage in the checkpoint.
        assert!(a.h_n.max_abs_diff(&b.h_n) < 1e-4);
    }
}
