//! The encoder: embedding lookup with the `[CLS]` exemption, multi-head
//! self-attention with post-layer-norm residuals, optional residual
//! adapters, and the MLM/NSP/classifier/span heads.
//!
//! Every forward pass builds a fresh tape; parameters enter as leaves whose
//! `requires_grad` mirrors their freeze flag, so frozen groups receive no
//! gradient accumulation at all.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::{EmbeddingSet, INIT_STD};
use super::{gaussian, normal_tensor, GroupTag, HeadKind, ModelConfig, ParamStore, PosScope};
use crate::data::{ClsBatch, MlmBatch, SpanBatch};
use crate::error::{Error, Result};
use crate::evalprobe::probes::ProbeModel;
use crate::numerics::{NodeId, Real, Tape, Tensor, ZERO_ROW};
use crate::tokenize::{LanguageId, Vocabulary, CLS_ID, MASK_ID, NUM_SPECIALS, SEP_ID};

const ATTN_MASK_VALUE: f64 = -1e9;

/// Where a model has been in the pipeline; step ordering is enforced on it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pretrained: bool,
    pub transferred: Vec<LanguageId>,
    pub finetuned_head: Option<HeadKind>,
}

#[derive(Clone)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    vocabs: BTreeMap<LanguageId, Vocabulary>,
    active: LanguageId,
    n_classes: Option<usize>,
    noise_sigma: f64,
    pub provenance: Provenance,
}

impl<T: Real> std::fmt::Debug for TransformerModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransformerModel")
            .field("config", &self.config)
            .field("active", &self.active)
            .field("languages", &self.languages())
            .field("n_params", &self.store.len())
            .finish()
    }
}

impl<T: Real> TransformerModel<T> {
    /// Fresh model around an initial embedding set; all other parameters are
    /// drawn from N(0, 0.02²), layer-norm scales start at 1, biases at 0.
    pub fn init(config: ModelConfig, first_set: EmbeddingSet<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        first_set.validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;

        store.insert(
            "emb.special",
            GroupTag::SpecialEmb,
            normal_tensor(vec![NUM_SPECIALS, d], INIT_STD, &mut rng),
        );
        store.insert(
            "emb.segment",
            GroupTag::SegEmb,
            normal_tensor(vec![2, d], INIT_STD, &mut rng),
        );
        if !config.lang_specific_positions {
            store.insert(
                "pos.shared",
                GroupTag::PosEmb(PosScope::Shared),
                normal_tensor(vec![config.max_seq_len, d], INIT_STD, &mut rng),
            );
        }
        for l in 0..config.n_layers {
            for name in ["wq", "wk", "wv", "wo"] {
                store.insert(
                    format!("layer{l}.attn.{name}"),
                    GroupTag::Body,
                    normal_tensor(vec![d, d], INIT_STD, &mut rng),
                );
            }
            for name in ["bq", "bk", "bv", "bo"] {
                store.insert(
                    format!("layer{l}.attn.{name}"),
                    GroupTag::Body,
                    Tensor::zeros(vec![d]),
                );
            }
            store.insert(
                format!("layer{l}.ln1.gamma"),
                GroupTag::Body,
                Tensor::new(vec![d], vec![T::one(); d])?,
            );
            store.insert(format!("layer{l}.ln1.beta"), GroupTag::Body, Tensor::zeros(vec![d]));
            store.insert(
                format!("layer{l}.ffn.w1"),
                GroupTag::Body,
                normal_tensor(vec![d, config.d_ff], INIT_STD, &mut rng),
            );
            store.insert(
                format!("layer{l}.ffn.b1"),
                GroupTag::Body,
                Tensor::zeros(vec![config.d_ff]),
            );
            store.insert(
                format!("layer{l}.ffn.w2"),
                GroupTag::Body,
                normal_tensor(vec![config.d_ff, d], INIT_STD, &mut rng),
            );
            store.insert(
                format!("layer{l}.ffn.b2"),
                GroupTag::Body,
                Tensor::zeros(vec![d]),
            );
            store.insert(
                format!("layer{l}.ln2.gamma"),
                GroupTag::Body,
                Tensor::new(vec![d], vec![T::one(); d])?,
            );
            store.insert(format!("layer{l}.ln2.beta"), GroupTag::Body, Tensor::zeros(vec![d]));
        }
        store.insert(
            "head.nsp.w",
            GroupTag::Head(HeadKind::Nsp),
            normal_tensor(vec![d, 2], INIT_STD, &mut rng),
        );
        store.insert("head.nsp.b", GroupTag::Head(HeadKind::Nsp), Tensor::zeros(vec![2]));
        if !config.tie_mlm_output {
            store.insert(
                "head.mlm.out",
                GroupTag::Head(HeadKind::Mlm),
                normal_tensor(vec![first_set.vocab_size(), d], INIT_STD, &mut rng),
            );
        }

        let adapter_size = config.adapter_size;
        let mut model = TransformerModel {
            active: first_set.language.clone(),
            config: ModelConfig {
                adapter_size: 0,
                ..config
            },
            store,
            vocabs: BTreeMap::new(),
            n_classes: None,
            noise_sigma: 0.0,
            provenance: Provenance::default(),
        };
        model.attach_embedding_set(first_set)?;
        if adapter_size > 0 {
            model.insert_adapters(adapter_size, seed ^ 0xADA9_7E55)?;
        }
        Ok(model)
    }

    /// Reassemble a model from persisted parts (checkpoint loading). The
    /// store must already contain every parameter the config implies.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: ModelConfig,
        store: ParamStore<T>,
        vocabs: BTreeMap<LanguageId, Vocabulary>,
        active: LanguageId,
        n_classes: Option<usize>,
        noise_sigma: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        config.validate()?;
        if !vocabs.contains_key(&active) {
            return Err(Error::config(format!(
                "active language `{active}` has no vocabulary"
            )));
        }
        for lang in vocabs.keys() {
            let name = format!("emb.{lang}.token");
            if store.get(&name).is_none() {
                return Err(Error::config(format!("missing parameter `{name}`")));
            }
        }
        Ok(TransformerModel {
            config,
            store,
            vocabs,
            active,
            n_classes,
            noise_sigma,
            provenance,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn active_language(&self) -> &LanguageId {
        &self.active
    }

    pub fn languages(&self) -> Vec<LanguageId> {
        self.vocabs.keys().cloned().collect()
    }

    pub fn vocab(&self, lang: &LanguageId) -> Option<&Vocabulary> {
        self.vocabs.get(lang)
    }

    pub fn active_vocab(&self) -> &Vocabulary {
        &self.vocabs[&self.active]
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.n_classes
    }

    pub fn embedding_noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Gaussian noise std applied to the embedding contributions during
    /// training forwards. Evaluation is never noised and stored parameters
    /// are never altered.
    pub fn set_embedding_noise(&mut self, sigma: f64) -> Result<()> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::config(format!("noise sigma {sigma} must be >= 0")));
        }
        self.noise_sigma = sigma;
        Ok(())
    }

    fn token_param(lang: &LanguageId) -> String {
        format!("emb.{lang}.token")
    }

    fn pos_param(&self, lang: &LanguageId) -> String {
        if self.config.lang_specific_positions {
            format!("emb.{lang}.pos")
        } else {
            "pos.shared".to_string()
        }
    }

    /// Register a language's embedding set without activating it. Replaces
    /// the parameters when the language is already attached.
    pub fn attach_embedding_set(&mut self, set: EmbeddingSet<T>) -> Result<()> {
        set.validate(&self.config)?;
        let lang = set.language.clone();
        self.store.insert(
            Self::token_param(&lang),
            GroupTag::TokenEmb(lang.clone()),
            set.token_emb,
        );
        if let Some(pos) = set.pos_emb {
            self.store.insert(
                format!("emb.{lang}.pos"),
                GroupTag::PosEmb(PosScope::Lang(lang.clone())),
                pos,
            );
        }
        self.vocabs.insert(lang, set.vocab);
        Ok(())
    }

    /// The lexical swap: attach (or replace) the set and make it active. The
    /// five special rows stay with the model, so a swapped-in set always
    /// runs under the shared, fine-tuned specials.
    pub fn swap_embedding_set(&mut self, set: EmbeddingSet<T>) -> Result<()> {
        let lang = set.language.clone();
        self.attach_embedding_set(set)?;
        self.active = lang;
        Ok(())
    }

    pub fn activate_language(&mut self, lang: &LanguageId) -> Result<()> {
        if !self.vocabs.contains_key(lang) {
            return Err(Error::config(format!("no embedding set for `{lang}`")));
        }
        self.active = lang.clone();
        Ok(())
    }

    /// Clone a language's lexical parameters out as a standalone set.
    pub fn extract_embedding_set(&self, lang: &LanguageId) -> Result<EmbeddingSet<T>> {
        let vocab = self
            .vocabs
            .get(lang)
            .ok_or_else(|| Error::config(format!("no embedding set for `{lang}`")))?
            .clone();
        let token_emb = self
            .store
            .get(&Self::token_param(lang))
            .expect("attached set has token params")
            .tensor
            .clone();
        let pos_emb = if self.config.lang_specific_positions {
            Some(
                self.store
                    .get(&format!("emb.{lang}.pos"))
                    .expect("attached set has position params")
                    .tensor
                    .clone(),
            )
        } else {
            None
        };
        Ok(EmbeddingSet {
            language: lang.clone(),
            vocab,
            token_emb,
            pos_emb,
        })
    }

    /// Insert bottleneck adapters after the attention projection and after
    /// the feed-forward block of every layer. Up-projections start at zero,
    /// so insertion is exactly output-preserving.
    pub fn insert_adapters(&mut self, adapter_size: usize, seed: u64) -> Result<()> {
        if self.config.adapter_size > 0 {
            return Err(Error::config("adapters already inserted"));
        }
        if adapter_size == 0 || adapter_size >= self.config.d_model {
            return Err(Error::config(format!(
                "adapter_size {adapter_size} must be in 1..d_model"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        for l in 0..self.config.n_layers {
            for point in ["attn", "ffn"] {
                self.store.insert(
                    format!("layer{l}.adapter.{point}.wdown"),
                    GroupTag::Adapters,
                    normal_tensor(vec![d, adapter_size], INIT_STD, &mut rng),
                );
                self.store.insert(
                    format!("layer{l}.adapter.{point}.bdown"),
                    GroupTag::Adapters,
                    Tensor::zeros(vec![adapter_size]),
                );
                self.store.insert(
                    format!("layer{l}.adapter.{point}.wup"),
                    GroupTag::Adapters,
                    Tensor::zeros(vec![adapter_size, d]),
                );
                self.store.insert(
                    format!("layer{l}.adapter.{point}.bup"),
                    GroupTag::Adapters,
                    Tensor::zeros(vec![d]),
                );
            }
        }
        self.config.adapter_size = adapter_size;
        Ok(())
    }

    pub fn add_classifier_head(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        if n_classes < 2 {
            return Err(Error::config("classifier needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.store.insert(
            "head.cls.w",
            GroupTag::Head(HeadKind::Classifier),
            normal_tensor(vec![self.config.d_model, n_classes], INIT_STD, &mut rng),
        );
        self.store.insert(
            "head.cls.b",
            GroupTag::Head(HeadKind::Classifier),
            Tensor::zeros(vec![n_classes]),
        );
        self.n_classes = Some(n_classes);
        Ok(())
    }

    pub fn add_span_head(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        self.store.insert(
            "head.span.ws",
            GroupTag::Head(HeadKind::Span),
            normal_tensor(vec![d, 1], INIT_STD, &mut rng),
        );
        self.store
            .insert("head.span.bs", GroupTag::Head(HeadKind::Span), Tensor::zeros(vec![1]));
        self.store.insert(
            "head.span.we",
            GroupTag::Head(HeadKind::Span),
            normal_tensor(vec![d, 1], INIT_STD, &mut rng),
        );
        self.store
            .insert("head.span.be", GroupTag::Head(HeadKind::Span), Tensor::zeros(vec![1]));
        Ok(())
    }

    /// Exactly the named groups receive optimizer updates.
    pub fn set_trainable(&mut self, tags: &[GroupTag]) -> Result<()> {
        self.store.set_trainable_tags(tags)
    }

    /// Content hash over the frozen-body groups (body + layer norms).
    pub fn body_hash(&self) -> String {
        let mut bytes = Vec::new();
        for p in self.store.iter() {
            if p.tag == GroupTag::Body {
                for &v in p.tensor.data() {
                    v.write_le(&mut bytes);
                }
            }
        }
        super::hex_digest(&bytes)
    }

    // ---- forward passes --------------------------------------------------

    pub fn forward_mlm_nsp(
        &self,
        batch: &MlmBatch,
        noise_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<MlmNspForward<T>> {
        let mut g = GraphBuilder::new(self, noise_rng);
        let (hidden, dims) = g.encode_batch(&batch.token_ids, &batch.segment_ids, &batch.attn_len, &batch.langs)?;

        // MLM: gather masked positions per language so tied logits use the
        // right vocabulary width.
        let mut by_lang: BTreeMap<LanguageId, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (r, (positions, labels)) in batch
            .mask_positions
            .iter()
            .zip(&batch.mlm_labels)
            .enumerate()
        {
            let entry = by_lang.entry(batch.langs[r].clone()).or_default();
            for (&p, &l) in positions.iter().zip(labels) {
                entry.0.push(r * dims.1 + p);
                entry.1.push(l as usize);
            }
        }
        let n_masked: usize = by_lang.values().map(|(p, _)| p.len()).sum();
        let mut mlm_node = None;
        for (lang, (flat, labels)) in &by_lang {
            if flat.is_empty() {
                continue;
            }
            let h_m = g.tape.select_rows(hidden, flat.clone())?;
            let proj = g.mlm_projection(lang)?;
            let logits = g.tape.matmul_tb(h_m, proj)?;
            let ce = g.tape.cross_entropy_mean(logits, labels.clone())?;
            let weighted = g
                .tape
                .scale(ce, T::from_f64(flat.len() as f64 / n_masked as f64))?;
            mlm_node = Some(match mlm_node {
                None => weighted,
                Some(acc) => g.tape.add(acc, weighted)?,
            });
        }
        let mlm_node = match mlm_node {
            Some(n) => n,
            // Loss over an empty masked set is zero by definition.
            None => g.tape.constant(Tensor::scalar(T::zero())),
        };

        let cls_flat: Vec<usize> = (0..dims.0).map(|b| b * dims.1).collect();
        let cls = g.tape.select_rows(hidden, cls_flat)?;
        let w = g.param("head.nsp.w")?;
        let b = g.param("head.nsp.b")?;
        let scored = g.tape.matmul(cls, w)?;
        let logits = g.tape.add_row(scored, b)?;
        // Class 0 = is-next, class 1 = random.
        let targets: Vec<usize> = batch.nsp_is_next.iter().map(|&n| usize::from(!n)).collect();
        let nsp_node = g.tape.cross_entropy_mean(logits, targets)?;

        let total = g.tape.add(mlm_node, nsp_node)?;
        let mlm_loss = g.tape.value(mlm_node).item();
        let nsp_loss = g.tape.value(nsp_node).item();
        let loss = g.tape.value(total).item();
        Ok(MlmNspForward {
            core: g.finish(total),
            loss,
            mlm_loss,
            nsp_loss,
            n_masked,
        })
    }

    pub fn forward_classifier(
        &self,
        batch: &ClsBatch,
        noise_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ClsForward<T>> {
        let k = self
            .n_classes
            .ok_or_else(|| Error::config("model has no classifier head"))?;
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= k) {
            return Err(Error::config(format!(
                "label {bad} outside the {k}-class head"
            )));
        }
        let langs = vec![self.active.clone(); batch.token_ids.len()];
        let mut g = GraphBuilder::new(self, noise_rng);
        let (hidden, dims) =
            g.encode_batch(&batch.token_ids, &batch.segment_ids, &batch.attn_len, &langs)?;
        let cls_flat: Vec<usize> = (0..dims.0).map(|b| b * dims.1).collect();
        let cls = g.tape.select_rows(hidden, cls_flat)?;
        let w = g.param("head.cls.w")?;
        let b = g.param("head.cls.b")?;
        let scored = g.tape.matmul(cls, w)?;
        let logits = g.tape.add_row(scored, b)?;
        let loss_node = g.tape.cross_entropy_mean(logits, batch.labels.clone())?;
        let loss = g.tape.value(loss_node).item();
        let logits_value = g.tape.value(logits).clone();
        Ok(ClsForward {
            core: g.finish(loss_node),
            loss,
            logits: logits_value,
        })
    }

    pub fn forward_span(
        &self,
        batch: &SpanBatch,
        noise_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SpanForward<T>> {
        if self.store.get("head.span.ws").is_none() {
            return Err(Error::config("model has no span head"));
        }
        let b_rows = batch.token_ids.len();
        if b_rows == 0 {
            return Err(Error::contract("empty span batch"));
        }
        let langs = vec![self.active.clone(); b_rows];
        let mut g = GraphBuilder::new(self, noise_rng);
        let (hidden, dims) =
            g.encode_batch(&batch.token_ids, &batch.segment_ids, &batch.attn_len, &langs)?;
        let ws = g.param("head.span.ws")?;
        let bs = g.param("head.span.bs")?;
        let we = g.param("head.span.we")?;
        let be = g.param("head.span.be")?;
        let mut total = None;
        let mut start_logits = Vec::with_capacity(b_rows);
        let mut end_logits = Vec::with_capacity(b_rows);
        for r in 0..b_rows {
            let ctx = g.tape.slice_rows(
                hidden,
                r * dims.1 + batch.ctx_start[r],
                batch.ctx_len[r],
            )?;
            let mut row_loss = None;
            for (w_node, b_node, target, sink) in [
                (ws, bs, batch.start_tok[r], &mut start_logits),
                (we, be, batch.end_tok[r], &mut end_logits),
            ] {
                let scored = g.tape.matmul(ctx, w_node)?;
                let biased = g.tape.add_row(scored, b_node)?;
                let row = g.tape.transpose(biased)?;
                let rel = target - batch.ctx_start[r];
                let ce = g.tape.cross_entropy_mean(row, vec![rel])?;
                sink.push(g.tape.value(row).data().iter().map(|&v| v.to_f64()).collect());
                row_loss = Some(match row_loss {
                    None => ce,
                    Some(acc) => g.tape.add(acc, ce)?,
                });
            }
            let row_loss = row_loss.expect("two terms per row");
            total = Some(match total {
                None => row_loss,
                Some(acc) => g.tape.add(acc, row_loss)?,
            });
        }
        let total = g.tape.scale(total.unwrap(), T::from_f64(1.0 / b_rows as f64))?;
        let loss = g.tape.value(total).item();
        Ok(SpanForward {
            core: g.finish(total),
            loss,
            start_logits,
            end_logits,
        })
    }

    /// Backpropagate a finished forward and accumulate gradients into the
    /// trainable parameters' buffers. Frozen parameters stay untouched.
    pub fn backward(&mut self, core: ForwardCore<T>) -> Result<()> {
        let ForwardCore {
            mut tape,
            loss,
            used_params,
        } = core;
        tape.backward(loss)?;
        for (idx, node) in used_params {
            if !self.store.by_idx(idx).trainable {
                continue;
            }
            if let Some(grad) = tape.grad(node) {
                let buf = self.store.by_idx_mut(idx).tensor.grad_mut();
                for (b, &g) in buf.iter_mut().zip(grad) {
                    *b += g;
                }
            }
        }
        Ok(())
    }

    // ---- evaluation-only helpers ------------------------------------------

    /// Final-layer hidden states of one packed row, without heads or noise.
    pub fn encode_row(&self, tokens: &[u32], segs: &[u8], attn_len: usize) -> Result<Vec<Vec<f64>>> {
        let mut g = GraphBuilder::new(self, None);
        let langs = vec![self.active.clone()];
        let (hidden, dims) = g.encode_batch(
            &[tokens.to_vec()],
            &[segs.to_vec()],
            &[attn_len],
            &langs,
        )?;
        let values = g.tape.value(hidden);
        let d = self.config.d_model;
        Ok((0..dims.1)
            .map(|t| values.data()[t * d..(t + 1) * d].iter().map(|&v| v.to_f64()).collect())
            .collect())
    }

    /// Pre-encoder input embeddings of one row (word + position + segment
    /// contributions with the `[CLS]` exemption applied).
    pub fn input_embeddings(&self, tokens: &[u32], segs: &[u8]) -> Result<Tensor<T>> {
        let mut g = GraphBuilder::new(self, None);
        let x = g.embed_row(tokens, segs, &self.active)?;
        Ok(g.tape.value(x).clone())
    }

    /// MLM log-probabilities over the active vocabulary at one position.
    pub fn mlm_log_probs(
        &self,
        tokens: &[u32],
        segs: &[u8],
        attn_len: usize,
        position: usize,
    ) -> Result<Vec<f64>> {
        if position >= tokens.len() {
            return Err(Error::contract(format!(
                "position {position} outside row of length {}",
                tokens.len()
            )));
        }
        let mut g = GraphBuilder::new(self, None);
        let langs = vec![self.active.clone()];
        let (hidden, _) = g.encode_batch(
            &[tokens.to_vec()],
            &[segs.to_vec()],
            &[attn_len],
            &langs,
        )?;
        let h = g.tape.select_rows(hidden, vec![position])?;
        let proj = g.mlm_projection(&self.active.clone())?;
        let logits = g.tape.matmul_tb(h, proj)?;
        let row = g.tape.value(logits).data();
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        Ok(row.iter().map(|&v| (v - lse).to_f64()).collect())
    }

    /// Pack `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]` with the active
    /// vocabulary (no padding).
    pub fn pack(&self, text_a: &str, text_b: Option<&str>) -> (Vec<u32>, Vec<u8>) {
        let vocab = self.active_vocab();
        let mut row = vec![CLS_ID];
        let mut segs = vec![0u8];
        let a = vocab.tokenize(text_a);
        segs.extend(std::iter::repeat(0).take(a.len() + 1));
        row.extend(a);
        row.push(SEP_ID);
        if let Some(b) = text_b {
            let b = vocab.tokenize(b);
            segs.extend(std::iter::repeat(1).take(b.len() + 1));
            row.extend(b);
            row.push(SEP_ID);
        }
        (row, segs)
    }
}

/// A finished forward pass: the tape, the scalar loss node, and the leaf
/// bindings of every parameter that entered the graph.
pub struct ForwardCore<T> {
    tape: Tape<T>,
    loss: NodeId,
    used_params: Vec<(usize, NodeId)>,
}

pub struct MlmNspForward<T: Real> {
    pub core: ForwardCore<T>,
    pub loss: T,
    pub mlm_loss: T,
    pub nsp_loss: T,
    pub n_masked: usize,
}

pub struct ClsForward<T: Real> {
    pub core: ForwardCore<T>,
    pub loss: T,
    /// `[B, k]` logits for accuracy computation.
    pub logits: Tensor<T>,
}

pub struct SpanForward<T: Real> {
    pub core: ForwardCore<T>,
    pub loss: T,
    pub start_logits: Vec<Vec<f64>>,
    pub end_logits: Vec<Vec<f64>>,
}

/// Per-forward graph assembly: parameter leaves registered once, embedding
/// tables concatenated per language, constants cached.
struct GraphBuilder<'m, 'r, T: Real> {
    model: &'m TransformerModel<T>,
    tape: Tape<T>,
    leaves: HashMap<usize, NodeId>,
    used: Vec<(usize, NodeId)>,
    e_full: BTreeMap<LanguageId, NodeId>,
    noise_rng: Option<&'r mut ChaCha8Rng>,
}

impl<'m, 'r, T: Real> GraphBuilder<'m, 'r, T> {
    fn new(model: &'m TransformerModel<T>, noise_rng: Option<&'r mut ChaCha8Rng>) -> Self {
        GraphBuilder {
            model,
            tape: Tape::new(),
            leaves: HashMap::new(),
            used: Vec::new(),
            e_full: BTreeMap::new(),
            noise_rng,
        }
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .model
            .store
            .idx(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
        if let Some(&node) = self.leaves.get(&idx) {
            return Ok(node);
        }
        let p = self.model.store.by_idx(idx);
        let node = self.tape.leaf(p.tensor.clone(), p.trainable);
        self.leaves.insert(idx, node);
        self.used.push((idx, node));
        Ok(node)
    }

    /// Full embedding table for a language: shared special rows over the
    /// set's non-special rows; gradients split to both on backward.
    fn full_table(&mut self, lang: &LanguageId) -> Result<NodeId> {
        if let Some(&node) = self.e_full.get(lang) {
            return Ok(node);
        }
        if !self.model.vocabs.contains_key(lang) {
            return Err(Error::config(format!("no embedding set for `{lang}`")));
        }
        let special = self.param("emb.special")?;
        let token = self.param(&TransformerModel::<T>::token_param(lang))?;
        let node = self.tape.concat_rows(vec![special, token])?;
        self.e_full.insert(lang.clone(), node);
        Ok(node)
    }

    /// MLM output projection: the tied full table, or the free head matrix.
    fn mlm_projection(&mut self, lang: &LanguageId) -> Result<NodeId> {
        if self.model.config.tie_mlm_output {
            self.full_table(lang)
        } else {
            let node = self.param("head.mlm.out")?;
            let v = self.model.vocabs[lang].size();
            if self.tape.value(node).rows() != v {
                return Err(Error::config(format!(
                    "untied MLM head covers {} pieces but `{lang}` has {v}; untied heads cannot swap vocabularies",
                    self.tape.value(node).rows()
                )));
            }
            Ok(node)
        }
    }

    /// Embedding lookup for one row with the `[CLS]` exemption: position 0
    /// receives neither position nor segment contribution.
    fn embed_row(&mut self, tokens: &[u32], segs: &[u8], lang: &LanguageId) -> Result<NodeId> {
        let t_len = tokens.len();
        let cfg = &self.model.config;
        if t_len > cfg.max_seq_len {
            return Err(Error::config(format!(
                "row length {t_len} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let vocab_size = self.model.vocabs[lang].size() as u32;
        for (pos, &id) in tokens.iter().enumerate() {
            if id >= vocab_size {
                return Err(Error::input(format!(
                    "token id {id} at position {pos} outside vocabulary of size {vocab_size} for `{lang}`"
                )));
            }
        }
        let table = self.full_table(lang)?;
        let word_idx: Vec<usize> = tokens.iter().map(|&id| id as usize).collect();
        let word = self.tape.select_rows(table, word_idx)?;
        let pos_table = {
            let name = self.model.pos_param(lang);
            self.param(&name)?
        };
        let pos_idx: Vec<usize> = (0..t_len)
            .map(|t| if t == 0 { ZERO_ROW } else { t })
            .collect();
        let pos = self.tape.select_rows(pos_table, pos_idx)?;
        let seg_table = self.param("emb.segment")?;
        let seg_idx: Vec<usize> = segs
            .iter()
            .enumerate()
            .map(|(t, &s)| if t == 0 { ZERO_ROW } else { s as usize })
            .collect();
        let seg = self.tape.select_rows(seg_table, seg_idx)?;

        let (word, pos, seg) = if self.noise_rng.is_some() && self.model.noise_sigma > 0.0 {
            let sigma = self.model.noise_sigma;
            let d = cfg.d_model;
            let mut draw = |exempt_first_row: bool| -> Tensor<T> {
                let rng = self.noise_rng.as_deref_mut().expect("checked above");
                let mut data: Vec<T> = (0..t_len * d)
                    .map(|_| T::from_f64(gaussian(rng) * sigma))
                    .collect();
                if exempt_first_row {
                    data[..d].iter_mut().for_each(|v| *v = T::zero());
                }
                Tensor::new(vec![t_len, d], data).expect("shape by construction")
            };
            // Each contribution is noised independently; exempt positions
            // (no contribution) receive no noise either.
            let nw = draw(false);
            let np = draw(true);
            let ns = draw(true);
            let nw = self.tape.constant(nw);
            let np = self.tape.constant(np);
            let ns = self.tape.constant(ns);
            (
                self.tape.add(word, nw)?,
                self.tape.add(pos, np)?,
                self.tape.add(seg, ns)?,
            )
        } else {
            (word, pos, seg)
        };
        let wp = self.tape.add(word, pos)?;
        self.tape.add(wp, seg)
    }

    /// Embed and encode a whole batch; returns the `[B*T, d]` hidden node
    /// and (B, T).
    fn encode_batch(
        &mut self,
        token_ids: &[Vec<u32>],
        segment_ids: &[Vec<u8>],
        attn_len: &[usize],
        langs: &[LanguageId],
    ) -> Result<(NodeId, (usize, usize))> {
        let b = token_ids.len();
        if b == 0 {
            return Err(Error::contract("empty batch"));
        }
        let t_len = token_ids[0].len();
        let mut rows = Vec::with_capacity(b);
        for r in 0..b {
            if token_ids[r].len() != t_len {
                return Err(Error::contract("ragged batch rows"));
            }
            rows.push(self.embed_row(&token_ids[r], &segment_ids[r], &langs[r])?);
        }
        let mut x = self.tape.concat_rows(rows)?;

        // Per-row additive attention masks (0 inside, -1e9 on padding).
        let masks: Vec<NodeId> = attn_len
            .iter()
            .map(|&len| {
                let data: Vec<T> = (0..t_len)
                    .map(|j| {
                        if j < len {
                            T::zero()
                        } else {
                            T::from_f64(ATTN_MASK_VALUE)
                        }
                    })
                    .collect();
                self.tape
                    .constant(Tensor::new(vec![t_len], data).expect("mask shape"))
            })
            .collect();

        let cfg = &self.model.config;
        let dh = cfg.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        for l in 0..cfg.n_layers {
            let wq = self.param(&format!("layer{l}.attn.wq"))?;
            let bq = self.param(&format!("layer{l}.attn.bq"))?;
            let wk = self.param(&format!("layer{l}.attn.wk"))?;
            let bk = self.param(&format!("layer{l}.attn.bk"))?;
            let wv = self.param(&format!("layer{l}.attn.wv"))?;
            let bv = self.param(&format!("layer{l}.attn.bv"))?;
            let q_all = self.tape.matmul(x, wq)?;
            let q_all = self.tape.add_row(q_all, bq)?;
            let k_all = self.tape.matmul(x, wk)?;
            let k_all = self.tape.add_row(k_all, bk)?;
            let v_all = self.tape.matmul(x, wv)?;
            let v_all = self.tape.add_row(v_all, bv)?;

            let mut row_outputs = Vec::with_capacity(b);
            for r in 0..b {
                let q_r = self.tape.slice_rows(q_all, r * t_len, t_len)?;
                let k_r = self.tape.slice_rows(k_all, r * t_len, t_len)?;
                let v_r = self.tape.slice_rows(v_all, r * t_len, t_len)?;
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for h in 0..cfg.n_heads {
                    let q = self.tape.slice_cols(q_r, h * dh, dh)?;
                    let k = self.tape.slice_cols(k_r, h * dh, dh)?;
                    let v = self.tape.slice_cols(v_r, h * dh, dh)?;
                    let scores = self.tape.matmul_tb(q, k)?;
                    let scores = self.tape.scale(scores, scale)?;
                    let scores = self.tape.add_row(scores, masks[r])?;
                    let attn = self.tape.softmax(scores)?;
                    heads.push(self.tape.matmul(attn, v)?);
                }
                row_outputs.push(self.tape.concat_cols(heads)?);
            }
            let attn_out = self.tape.concat_rows(row_outputs)?;
            let wo = self.param(&format!("layer{l}.attn.wo"))?;
            let bo = self.param(&format!("layer{l}.attn.bo"))?;
            let proj = self.tape.matmul(attn_out, wo)?;
            let mut proj = self.tape.add_row(proj, bo)?;
            if cfg.adapter_size > 0 {
                proj = self.adapter(proj, l, "attn")?;
            }
            let res = self.tape.add(x, proj)?;
            let g1 = self.param(&format!("layer{l}.ln1.gamma"))?;
            let b1 = self.param(&format!("layer{l}.ln1.beta"))?;
            x = self.tape.layer_norm(res, g1, b1)?;

            let w1 = self.param(&format!("layer{l}.ffn.w1"))?;
            let b1f = self.param(&format!("layer{l}.ffn.b1"))?;
            let w2 = self.param(&format!("layer{l}.ffn.w2"))?;
            let b2f = self.param(&format!("layer{l}.ffn.b2"))?;
            let f = self.tape.matmul(x, w1)?;
            let f = self.tape.add_row(f, b1f)?;
            let f = self.tape.gelu(f)?;
            let f = self.tape.matmul(f, w2)?;
            let mut f = self.tape.add_row(f, b2f)?;
            if cfg.adapter_size > 0 {
                f = self.adapter(f, l, "ffn")?;
            }
            let res = self.tape.add(x, f)?;
            let g2 = self.param(&format!("layer{l}.ln2.gamma"))?;
            let b2 = self.param(&format!("layer{l}.ln2.beta"))?;
            x = self.tape.layer_norm(res, g2, b2)?;
        }
        Ok((x, (b, t_len)))
    }

    /// Residual bottleneck: `h + up(gelu(down(h)))`.
    fn adapter(&mut self, h: NodeId, layer: usize, point: &str) -> Result<NodeId> {
        let wdown = self.param(&format!("layer{layer}.adapter.{point}.wdown"))?;
        let bdown = self.param(&format!("layer{layer}.adapter.{point}.bdown"))?;
        let wup = self.param(&format!("layer{layer}.adapter.{point}.wup"))?;
        let bup = self.param(&format!("layer{layer}.adapter.{point}.bup"))?;
        let a = self.tape.matmul(h, wdown)?;
        let a = self.tape.add_row(a, bdown)?;
        let a = self.tape.gelu(a)?;
        let a = self.tape.matmul(a, wup)?;
        let a = self.tape.add_row(a, bup)?;
        self.tape.add(h, a)
    }

    fn finish(self, loss: NodeId) -> ForwardCore<T> {
        ForwardCore {
            tape: self.tape,
            loss,
            used_params: self.used,
        }
    }
}

// ---- probe surface ---------------------------------------------------------

impl<T: Real> ProbeModel for TransformerModel<T> {
    fn cls_pair_vector(&self, sentence1: &str, sentence2: &str) -> Result<Vec<f64>> {
        let (row, segs) = self.pack(sentence1, Some(sentence2));
        let attn = row.len();
        Ok(self.encode_row(&row, &segs, attn)?.swap_remove(0))
    }

    fn target_piece_vectors(&self, sentence: &str, target: &str) -> Result<Option<Vec<Vec<f64>>>> {
        let vocab = self.active_vocab();
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let Some(word_index) = words.iter().position(|w| *w == target) else {
            return Ok(None);
        };
        // Piece offset of the target word inside the packed row.
        let mut offset = 1; // [CLS]
        for w in &words[..word_index] {
            offset += vocab.tokenize(w).len();
        }
        let n_pieces = vocab.tokenize(target).len();
        let (row, segs) = self.pack(sentence, None);
        let hidden = self.encode_row(&row, &segs, row.len())?;
        Ok(Some(hidden[offset..offset + n_pieces].to_vec()))
    }

    fn piece_count(&self, word: &str) -> usize {
        self.active_vocab().tokenize(word).len()
    }

    fn masked_word_scores(
        &self,
        sentence: &str,
        word_index: usize,
        candidates: [&str; 2],
    ) -> Result<[f64; 2]> {
        let vocab = self.active_vocab();
        let words: Vec<&str> = sentence.split_whitespace().collect();
        if word_index >= words.len() {
            return Err(Error::contract(format!(
                "word index {word_index} outside sentence of {} words",
                words.len()
            )));
        }
        let mut ids = Vec::new();
        for &candidate in &candidates {
            let pieces = vocab.tokenize(candidate);
            let [only] = pieces.as_slice() else {
                return Err(Error::contract(format!(
                    "candidate `{candidate}` is not a single piece"
                )));
            };
            ids.push(*only);
        }
        let mut row = vec![CLS_ID];
        let mut masked_pos = 0;
        for (j, w) in words.iter().enumerate() {
            if j == word_index {
                masked_pos = row.len();
                row.push(MASK_ID);
            } else {
                row.extend(vocab.tokenize(w));
            }
        }
        row.push(SEP_ID);
        let segs = vec![0u8; row.len()];
        let log_probs = self.mlm_log_probs(&row, &segs, row.len(), masked_pos)?;
        Ok([log_probs[ids[0] as usize], log_probs[ids[1] as usize]])
    }
}
