//! The shared MLM+NSP training loop: batch drawing, divergence handling,
//! interval checkpoints, and bit-exact resumable trainer state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optimizer::{Optimizer, OptimizerConfig};
use crate::data::{make_mlm_nsp_batch, Corpus, MlmSource};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::{Real, Tensor};
use crate::persist::{AuditRecord, Checkpoint};
use crate::tokenize::LanguageId;

/// Serializable RNG snapshot: seed plus stream position.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

pub fn rng_state(rng: &ChaCha8Rng) -> RngState {
    let seed = rng.get_seed();
    let pos = rng.get_word_pos();
    RngState {
        seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
        word_pos_lo: pos as u64,
        word_pos_hi: (pos >> 64) as u64,
    }
}

pub fn rng_from_state(state: &RngState) -> Result<ChaCha8Rng> {
    if state.seed_hex.len() != 64 {
        return Err(Error::Integrity("rng seed must be 32 bytes of hex".into()));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in state.seed_hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk)
            .ok()
            .and_then(|s| u8::from_str_radix(s, 16).ok())
            .ok_or_else(|| Error::Integrity("bad rng seed hex".into()))?;
        seed[i] = s;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    let pos = (state.word_pos_hi as u128) << 64 | state.word_pos_lo as u128;
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Everything a resume needs besides the model parameters.
pub struct TrainerState<T> {
    pub optimizer: Optimizer<T>,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    optimizer: OptimizerConfig,
    step: usize,
    data_rng: RngState,
    noise_rng: RngState,
}

impl<T: Real> TrainerState<T> {
    pub fn new(config: OptimizerConfig, seed: u64) -> Result<Self> {
        Ok(TrainerState {
            optimizer: Optimizer::new(config)?,
            data_rng: ChaCha8Rng::seed_from_u64(seed),
            // Separate stream so noised and noise-free runs draw identical
            // data batches.
            noise_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x4E01_5EED),
        })
    }

    pub fn step(&self) -> usize {
        self.optimizer.step
    }

    pub fn to_extra(&self) -> (BTreeMap<String, Tensor<T>>, serde_json::Value) {
        let meta = TrainerMeta {
            optimizer: self.optimizer.config,
            step: self.optimizer.step,
            data_rng: rng_state(&self.data_rng),
            noise_rng: rng_state(&self.noise_rng),
        };
        (
            self.optimizer.state_tensors(),
            serde_json::to_value(meta).expect("serializable"),
        )
    }

    pub fn from_extra(
        tensors: &BTreeMap<String, Tensor<T>>,
        extra: &serde_json::Value,
    ) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_value(extra.clone())
            .map_err(|e| Error::Integrity(format!("trainer metadata missing: {e}")))?;
        let mut optimizer = Optimizer::new(meta.optimizer)?;
        optimizer.restore_state(meta.step, tensors)?;
        Ok(TrainerState {
            optimizer,
            data_rng: rng_from_state(&meta.data_rng)?,
            noise_rng: rng_from_state(&meta.noise_rng)?,
        })
    }
}

/// Loop-level options shared by pretraining, transfer, and joint training.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub optimizer: OptimizerConfig,
    pub mask_prob: f64,
    pub seq_len: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Hold out every k-th document for dev evaluation (0 = no holdout).
    pub dev_holdout_every: usize,
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl RunOptions {
    pub fn new(optimizer: OptimizerConfig, seq_len: usize, seed: u64) -> Self {
        RunOptions {
            optimizer,
            mask_prob: 0.15,
            seq_len,
            alpha: 0.5,
            seed,
            dev_holdout_every: 10,
            eval_every: 0,
            checkpoint_path: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub mlm: f64,
    pub nsp: f64,
}

/// Per-language source rewrite for joint-vocabulary training: every row
/// runs under one shared embedding set.
pub fn remap_batch_language(batch: &mut crate::data::MlmBatch, lang: &LanguageId) {
    for l in &mut batch.langs {
        *l = lang.clone();
    }
}

/// Train-loop output: per-step training losses and interval dev losses.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub train: Vec<LossPoint>,
    pub dev: Vec<LossPoint>,
}

pub(crate) struct MlmLoop<'a, T: Real> {
    pub model: &'a mut TransformerModel<T>,
    pub corpora: &'a [Corpus],
    pub dev_corpora: &'a [Corpus],
    /// When set, batch rows are remapped to this language (joint vocab).
    pub lang_override: Option<LanguageId>,
    pub trainer: &'a mut TrainerState<T>,
    pub opts: &'a RunOptions,
    pub audit: &'a mut Vec<AuditRecord>,
    pub phase: &'a str,
}

impl<T: Real> MlmLoop<'_, T> {
    /// Run `steps` optimizer steps; returns per-step losses. Non-finite loss
    /// aborts with the last finite checkpoint recorded in the error.
    pub fn run(&mut self, steps: usize) -> Result<RunLog> {
        let hashes_before = self.model.store().hash_all();
        let start_step = self.trainer.step();
        let mut log = RunLog::default();
        let mut last_checkpoint: Option<PathBuf> = None;
        for _ in 0..steps {
            let mut batch = draw_batch(
                self.model,
                self.corpora,
                self.opts.alpha,
                self.opts.optimizer.batch_size,
                self.opts.seq_len,
                self.opts.mask_prob,
                &mut self.trainer.data_rng,
            )?;
            if let Some(lang) = &self.lang_override {
                remap_batch_language(&mut batch, lang);
            }
            let noise = if self.model.embedding_noise_sigma() > 0.0 {
                Some(&mut self.trainer.noise_rng)
            } else {
                None
            };
            let fwd = self.model.forward_mlm_nsp(&batch, noise)?;
            if !fwd.loss.to_f64().is_finite() {
                return Err(Error::Diverged {
                    step: self.trainer.step() + 1,
                    last_checkpoint,
                });
            }
            log.train.push(LossPoint {
                step: self.trainer.step() + 1,
                total: fwd.loss.to_f64(),
                mlm: fwd.mlm_loss.to_f64(),
                nsp: fwd.nsp_loss.to_f64(),
            });
            self.model.backward(fwd.core)?;
            self.trainer.optimizer.apply(self.model.store_mut());
            let local = self.trainer.step() - start_step;

            if self.opts.eval_every > 0
                && !self.dev_corpora.is_empty()
                && local % self.opts.eval_every == 0
            {
                let mut point = self.dev_eval()?;
                point.step = self.trainer.step();
                log.dev.push(point);
            }
            if let (Some(path), every) = (&self.opts.checkpoint_path, self.opts.checkpoint_every) {
                if every > 0 && local % every == 0 && local < steps {
                    save_with_trainer(self.model, self.trainer, self.audit, path)?;
                    last_checkpoint = Some(path.clone());
                }
            }
        }
        if !self.dev_corpora.is_empty() {
            let mut point = self.dev_eval()?;
            point.step = self.trainer.step();
            log.dev.push(point);
        }
        let record = AuditRecord {
            phase: self.phase.to_string(),
            trainable: self.model.store().trainable_tags(),
            step_range: (start_step, self.trainer.step()),
            hashes_before,
            hashes_after: self.model.store().hash_all(),
        };
        self.audit.push(record);
        if let Some(path) = &self.opts.checkpoint_path {
            save_with_trainer(self.model, self.trainer, self.audit, path)?;
        }
        Ok(log)
    }

    fn dev_eval(&self) -> Result<LossPoint> {
        eval_mlm_nsp(
            self.model,
            self.dev_corpora,
            self.lang_override.as_ref(),
            self.opts.alpha,
            self.opts.seq_len,
            self.opts.optimizer.batch_size,
            4,
            self.opts.seed ^ 0xDE7_EA71,
        )
    }
}

pub fn save_with_trainer<T: Real>(
    model: &TransformerModel<T>,
    trainer: &TrainerState<T>,
    audit: &[AuditRecord],
    path: &Path,
) -> Result<()> {
    let (tensors, meta) = trainer.to_extra();
    Checkpoint::from_model(model, audit.to_vec(), tensors, meta).save(path)
}

/// Reload a checkpoint written by `save_with_trainer`.
pub fn load_with_trainer<T: Real>(
    path: &Path,
) -> Result<(TransformerModel<T>, TrainerState<T>, Vec<AuditRecord>)> {
    let ckpt = Checkpoint::<T>::load(path)?;
    let trainer = TrainerState::from_extra(&ckpt.extra_tensors, &ckpt.extra)?;
    let audit = ckpt.audit.clone();
    Ok((ckpt.into_model(None)?, trainer, audit))
}

pub(crate) fn draw_batch<T: Real>(
    model: &TransformerModel<T>,
    corpora: &[Corpus],
    alpha: f64,
    batch_size: usize,
    seq_len: usize,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<crate::data::MlmBatch> {
    let sources: Vec<MlmSource> = corpora
        .iter()
        .map(|c| {
            let vocab = model
                .vocab(&c.language)
                .ok_or_else(|| Error::config(format!("no vocabulary for `{}`", c.language)))?;
            Ok(MlmSource { corpus: c, vocab })
        })
        .collect::<Result<_>>()?;
    make_mlm_nsp_batch(&sources, alpha, batch_size, seq_len, mask_prob, rng)
}

/// Deterministic dev evaluation: fixed seed, fixed batch count, no updates.
pub fn eval_mlm_nsp<T: Real>(
    model: &TransformerModel<T>,
    corpora: &[Corpus],
    lang_override: Option<&LanguageId>,
    alpha: f64,
    seq_len: usize,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<LossPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut mlm = 0.0;
    let mut nsp = 0.0;
    for _ in 0..n_batches {
        let mut batch = draw_batch(model, corpora, alpha, batch_size, seq_len, 0.15, &mut rng)?;
        if let Some(lang) = lang_override {
            remap_batch_language(&mut batch, lang);
        }
        let fwd = model.forward_mlm_nsp(&batch, None)?;
        total += fwd.loss.to_f64();
        mlm += fwd.mlm_loss.to_f64();
        nsp += fwd.nsp_loss.to_f64();
    }
    let n = n_batches as f64;
    Ok(LossPoint {
        step: 0,
        total: total / n,
        mlm: mlm / n,
        nsp: nsp / n,
    })
}

/// Classification accuracy of the active model on labeled examples.
pub fn eval_classification<T: Real>(
    model: &TransformerModel<T>,
    examples: &[crate::data::ClsExample],
    seq_len: usize,
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("no evaluation examples"));
    }
    let mut preds = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size) {
        let batch = crate::data::make_cls_batch(chunk, model.active_vocab(), seq_len)?;
        let fwd = model.forward_classifier(&batch, None)?;
        let k = fwd.logits.cols();
        for (r, &gold) in batch.labels.iter().enumerate() {
            let row = &fwd.logits.data()[r * k..(r + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            preds.push(pred);
            golds.push(gold);
        }
    }
    crate::evalprobe::classification_accuracy(&preds, &golds)
}
