//! The four-step transfer procedure, the joint baselines, and the
//! CLWE-body variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::{eval_mlm_nsp, LossPoint, MlmLoop, RunLog, RunOptions, TrainerState};
use crate::clwe::WordEmbeddings;
use crate::data::{make_cls_batch, make_span_batch, ClsExample, Corpus, SpanExample};
use crate::error::{Error, Result};
use crate::evalprobe::{squad_f1_em, LanguageProfile, QAExample};
use crate::model::{
    EmbeddingSet, GroupTag, HeadKind, ModelConfig, PosScope, TransformerModel,
};
use crate::numerics::Real;
use crate::persist::AuditRecord;
use crate::tokenize::{LanguageId, Vocabulary, NUM_SPECIALS};

/// Trainable groups for Step 2: the new language's lexical parameters, plus
/// its position table and the adapters when enabled.
pub fn step2_mask(lang: &LanguageId, lang_positions: bool, adapters: bool) -> Vec<GroupTag> {
    let mut mask = vec![GroupTag::TokenEmb(lang.clone())];
    if lang_positions {
        mask.push(GroupTag::PosEmb(PosScope::Lang(lang.clone())));
    }
    if adapters {
        mask.push(GroupTag::Adapters);
    }
    mask
}

/// Trainable groups for Step 3: body, segment and special embeddings, and
/// the task head. Token and position embeddings stay frozen.
pub fn step3_mask(head: HeadKind) -> Vec<GroupTag> {
    vec![
        GroupTag::Body,
        GroupTag::SegEmb,
        GroupTag::SpecialEmb,
        GroupTag::Head(head),
    ]
}

/// Step 1: pre-train on the first language with MLM+NSP, all groups
/// trainable.
pub fn step1_pretrain<T: Real>(
    model: &mut TransformerModel<T>,
    corpus: &Corpus,
    opts: &RunOptions,
    audit: &mut Vec<AuditRecord>,
) -> Result<RunLog> {
    let all = model.store().tags();
    model.set_trainable(&all)?;
    let (train, dev) = corpus.split_holdout(opts.dev_holdout_every);
    let mut trainer = TrainerState::new(opts.optimizer, opts.seed)?;
    let log = MlmLoop {
        model,
        corpora: std::slice::from_ref(&train),
        dev_corpora: std::slice::from_ref(&dev),
        lang_override: None,
        trainer: &mut trainer,
        opts,
        audit,
        phase: "step1-pretrain",
    }
    .run(opts.optimizer.steps)?;
    model.provenance.pretrained = true;
    Ok(log)
}

#[derive(Clone, Copy, Debug)]
pub struct TransferOptions {
    /// Bottleneck width; 0 disables adapters.
    pub adapters: usize,
    /// Restart count; the best held-out loss wins. The stability workaround
    /// defaults to 3.
    pub restarts: usize,
    /// Maximum concurrent restarts (1 = sequential).
    pub threads: usize,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions {
            adapters: 0,
            restarts: 3,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RestartOutcome {
    pub seed: u64,
    pub dev: Option<LossPoint>,
    pub train: Vec<LossPoint>,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct Step2Report {
    pub outcomes: Vec<RestartOutcome>,
    /// Index of the selected restart.
    pub best: usize,
    pub body_hash_before: String,
    pub body_hash_after: String,
}

/// Step 2: learn the new language's embedding set against the frozen body.
/// Runs `restarts` independently seeded attempts and keeps the one with the
/// lowest held-out MLM+NSP loss; every attempt's losses are reported.
pub fn step2_transfer<T: Real>(
    model: &mut TransformerModel<T>,
    l2_corpus: &Corpus,
    l2_vocab: Vocabulary,
    opts: &RunOptions,
    transfer: &TransferOptions,
    audit: &mut Vec<AuditRecord>,
) -> Result<Step2Report> {
    if !model.provenance.pretrained {
        return Err(Error::config("step 2 requires a pretrained model (run step 1 first)"));
    }
    if transfer.restarts == 0 {
        return Err(Error::config("step 2 needs at least one restart"));
    }
    let lang = l2_corpus.language.clone();
    if transfer.adapters > 0 && model.config().adapter_size == 0 {
        model.insert_adapters(transfer.adapters, opts.seed ^ 0xADAB_17)?;
    }
    let with_adapters = model.config().adapter_size > 0;
    let lang_positions = model.config().lang_specific_positions;
    let mask = step2_mask(&lang, lang_positions, with_adapters);
    let (train, dev) = l2_corpus.split_holdout(opts.dev_holdout_every);
    let body_hash_before = model.body_hash();

    struct RestartResult<T> {
        outcome: RestartOutcome,
        winner: Option<(EmbeddingSet<T>, Vec<(String, crate::numerics::Tensor<T>)>, Vec<AuditRecord>)>,
    }

    let run_one = |restart: usize| -> Result<RestartResult<T>> {
        let seed = opts
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(restart as u64 + 1);
        let mut m = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if with_adapters {
            reinit_adapters(&mut m, seed ^ 0xAD);
        }
        let set = EmbeddingSet::random(lang.clone(), l2_vocab.clone(), m.config(), &mut rng);
        m.attach_embedding_set(set)?;
        m.set_trainable(&mask)?;
        let mut local_audit = Vec::new();
        let mut trainer = TrainerState::new(opts.optimizer, seed)?;
        let mut local_opts = opts.clone();
        local_opts.seed = seed;
        local_opts.checkpoint_path = None;
        let result = MlmLoop {
            model: &mut m,
            corpora: std::slice::from_ref(&train),
            dev_corpora: &[],
            lang_override: None,
            trainer: &mut trainer,
            opts: &local_opts,
            audit: &mut local_audit,
            phase: &format!("step2-transfer-{lang}-restart{restart}"),
        }
        .run(opts.optimizer.steps);
        match result {
            Ok(log) => {
                let dev_point = eval_mlm_nsp(
                    &m,
                    std::slice::from_ref(&dev),
                    None,
                    opts.alpha,
                    opts.seq_len,
                    opts.optimizer.batch_size,
                    4,
                    opts.seed ^ 0x5EED_DE7,
                )?;
                m.activate_language(&lang)?;
                let set = m.extract_embedding_set(&lang)?;
                let adapters: Vec<(String, crate::numerics::Tensor<T>)> = m
                    .store()
                    .iter()
                    .filter(|p| p.tag == GroupTag::Adapters)
                    .map(|p| (p.name.clone(), p.tensor.clone()))
                    .collect();
                Ok(RestartResult {
                    outcome: RestartOutcome {
                        seed,
                        dev: Some(dev_point),
                        train: log.train,
                        diverged: false,
                    },
                    winner: Some((set, adapters, local_audit)),
                })
            }
            Err(Error::Diverged { .. }) => Ok(RestartResult {
                outcome: RestartOutcome {
                    seed,
                    dev: None,
                    train: Vec::new(),
                    diverged: true,
                },
                winner: None,
            }),
            Err(other) => Err(other),
        }
    };

    let mut results: Vec<RestartResult<T>> = Vec::with_capacity(transfer.restarts);
    if transfer.threads > 1 {
        let indices: Vec<usize> = (0..transfer.restarts).collect();
        for chunk in indices.chunks(transfer.threads) {
            let mut chunk_results: Vec<Option<Result<RestartResult<T>>>> =
                (0..chunk.len()).map(|_| None).collect();
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for &r in chunk {
                    handles.push(scope.spawn(move || run_one(r)));
                }
                for (slot, handle) in chunk_results.iter_mut().zip(handles) {
                    *slot = Some(handle.join().expect("restart thread panicked"));
                }
            });
            for slot in chunk_results {
                results.push(slot.expect("filled above")?);
            }
        }
    } else {
        for r in 0..transfer.restarts {
            results.push(run_one(r)?);
        }
    }

    let best = results
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.outcome.diverged)
        .min_by(|(_, a), (_, b)| {
            let la = a.outcome.dev.as_ref().map(|d| d.total).unwrap_or(f64::MAX);
            let lb = b.outcome.dev.as_ref().map(|d| d.total).unwrap_or(f64::MAX);
            la.partial_cmp(&lb).unwrap()
        })
        .map(|(i, _)| i);
    let Some(best) = best else {
        let traces: Vec<String> = results
            .iter()
            .map(|r| format!("seed {} diverged", r.outcome.seed))
            .collect();
        return Err(Error::Numeric(format!(
            "all {} step-2 restarts diverged: {}",
            transfer.restarts,
            traces.join("; ")
        )));
    };

    let (set, adapters, winner_audit) = results[best]
        .winner
        .clone()
        .expect("selected restart finished");
    model.attach_embedding_set(set)?;
    for (name, tensor) in adapters {
        let idx = model
            .store()
            .idx(&name)
            .ok_or_else(|| Error::config(format!("missing adapter parameter `{name}`")))?;
        model.store_mut().by_idx_mut(idx).tensor = tensor;
    }
    model.set_trainable(&mask)?;
    audit.extend(winner_audit);
    model.provenance.transferred.push(lang);

    let body_hash_after = model.body_hash();
    if body_hash_after != body_hash_before {
        return Err(Error::Validation(
            "frozen body changed during step 2".into(),
        ));
    }
    Ok(Step2Report {
        outcomes: results.into_iter().map(|r| r.outcome).collect(),
        best,
        body_hash_before,
        body_hash_after,
    })
}

/// Re-draw adapter down-projections (up stays zero) so each restart starts
/// from a fresh, still output-preserving state.
fn reinit_adapters<T: Real>(model: &mut TransformerModel<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model
        .store()
        .iter()
        .filter(|p| p.tag == GroupTag::Adapters)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let p = model.store_mut().get_mut(&name).unwrap();
        if name.ends_with(".wdown") {
            for v in p.tensor.data_mut() {
                *v = T::from_f64(crate::model::gaussian(&mut rng) * 0.02);
            }
        } else {
            for v in p.tensor.data_mut() {
                *v = T::zero();
            }
        }
    }
}

/// Task data for fine-tuning.
pub enum TaskData {
    Classification {
        examples: Vec<ClsExample>,
        n_classes: usize,
    },
    Qa {
        examples: Vec<SpanExample>,
    },
}

#[derive(Clone, Debug)]
pub struct FinetuneOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub noise_sigma: f64,
    pub seq_len: usize,
    pub seed: u64,
}

impl FinetuneOptions {
    /// Fine-tuning defaults: learning rate 2e-5, batch 32, 2 epochs.
    pub fn default_for(seq_len: usize, seed: u64) -> Self {
        FinetuneOptions {
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: 2,
            noise_sigma: 0.0,
            seq_len,
            seed,
        }
    }
}

/// Step 3: fine-tune on labeled first-language data with the lexical
/// parameters frozen, optionally noising the embedding contributions.
pub fn step3_finetune<T: Real>(
    model: &mut TransformerModel<T>,
    task: &TaskData,
    opts: &FinetuneOptions,
    audit: &mut Vec<AuditRecord>,
) -> Result<Vec<LossPoint>> {
    if !model.provenance.pretrained {
        return Err(Error::config("step 3 requires a pretrained model (run step 1 first)"));
    }
    let head = match task {
        TaskData::Classification { examples, n_classes } => {
            if let Some(&bad) = examples
                .iter()
                .map(|e| &e.label)
                .find(|&&l| l >= *n_classes)
            {
                return Err(Error::config(format!(
                    "label {bad} outside the declared {n_classes} classes"
                )));
            }
            match model.n_classes() {
                Some(k) if k != *n_classes => {
                    return Err(Error::config(format!(
                        "task has {n_classes} classes but the head has {k}"
                    )))
                }
                Some(_) => {}
                None => model.add_classifier_head(*n_classes, opts.seed ^ 0xC1A55)?,
            }
            HeadKind::Classifier
        }
        TaskData::Qa { .. } => {
            if model.store().get("head.span.ws").is_none() {
                model.add_span_head(opts.seed ^ 0x59A4)?;
            }
            HeadKind::Span
        }
    };
    model.set_trainable(&step3_mask(head))?;
    model.set_embedding_noise(opts.noise_sigma)?;

    let n_examples = match task {
        TaskData::Classification { examples, .. } => examples.len(),
        TaskData::Qa { examples } => examples.len(),
    };
    if n_examples == 0 {
        return Err(Error::config("no fine-tuning examples"));
    }
    let steps_per_epoch = n_examples.div_ceil(opts.batch_size);
    let total_steps = steps_per_epoch * opts.epochs;
    let config = super::optimizer::OptimizerConfig {
        algorithm: super::optimizer::OptimizerKind::Adam,
        learning_rate: opts.learning_rate,
        batch_size: opts.batch_size,
        steps: total_steps,
        warmup_fraction: 0.1,
    };
    let mut trainer = TrainerState::new(config, opts.seed)?;
    let hashes_before = model.store().hash_all();
    let mut losses = Vec::with_capacity(total_steps);

    for _ in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n_examples).collect();
        // Fisher-Yates off the trainer's data stream.
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut trainer.data_rng, 0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(opts.batch_size) {
            let noise = if model.embedding_noise_sigma() > 0.0 {
                Some(&mut trainer.noise_rng)
            } else {
                None
            };
            let (loss, core) = match task {
                TaskData::Classification { examples, .. } => {
                    let batch_examples: Vec<ClsExample> =
                        chunk.iter().map(|&i| examples[i].clone()).collect();
                    let batch =
                        make_cls_batch(&batch_examples, model.active_vocab(), opts.seq_len)?;
                    let fwd = model.forward_classifier(&batch, noise)?;
                    (fwd.loss.to_f64(), fwd.core)
                }
                TaskData::Qa { examples } => {
                    let batch_examples: Vec<SpanExample> =
                        chunk.iter().map(|&i| examples[i].clone()).collect();
                    let batch =
                        make_span_batch(&batch_examples, model.active_vocab(), opts.seq_len)?;
                    if batch.token_ids.is_empty() {
                        continue;
                    }
                    let fwd = model.forward_span(&batch, noise)?;
                    (fwd.loss.to_f64(), fwd.core)
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: trainer.step() + 1,
                    last_checkpoint: None,
                });
            }
            losses.push(LossPoint {
                step: trainer.step() + 1,
                total: loss,
                mlm: 0.0,
                nsp: 0.0,
            });
            model.backward(core)?;
            trainer.optimizer.apply(model.store_mut());
        }
    }

    audit.push(AuditRecord {
        phase: format!("step3-finetune-{head:?}"),
        trainable: model.store().trainable_tags(),
        step_range: (0, trainer.step()),
        hashes_before,
        hashes_after: model.store().hash_all(),
    });
    model.provenance.finetuned_head = Some(head);
    Ok(losses)
}

/// Evaluation data for zero-shot transfer.
pub enum EvalData {
    Classification(Vec<ClsExample>),
    Qa(Vec<QAExample>, LanguageProfile),
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ZeroShotReport {
    pub language: String,
    pub metric: String,
    pub value: f64,
    pub secondary: Option<f64>,
    pub n: usize,
}

/// Step 4: swap in the target language's embedding set and evaluate; no
/// parameter is updated. Refuses a model whose fine-tuned head does not
/// match the evaluation task.
pub fn step4_zero_shot<T: Real>(
    model: &mut TransformerModel<T>,
    set: Option<EmbeddingSet<T>>,
    lang: &LanguageId,
    data: &EvalData,
    seq_len: usize,
) -> Result<ZeroShotReport> {
    let required = match data {
        EvalData::Classification(_) => HeadKind::Classifier,
        EvalData::Qa(_, _) => HeadKind::Span,
    };
    if model.provenance.finetuned_head != Some(required) {
        return Err(Error::config(format!(
            "step 4 requires a model fine-tuned with a {required:?} head (step 3 ran: {:?})",
            model.provenance.finetuned_head
        )));
    }
    let hashes_before = model.store().hash_all();
    if let Some(set) = set {
        if set.language != *lang {
            return Err(Error::config(format!(
                "embedding set is for `{}`, expected `{lang}`",
                set.language
            )));
        }
        model.swap_embedding_set(set)?;
    } else {
        model.activate_language(lang)?;
    }
    let report = match data {
        EvalData::Classification(examples) => {
            let accuracy = super::train::eval_classification(model, examples, seq_len, 32)?;
            ZeroShotReport {
                language: lang.to_string(),
                metric: "accuracy".into(),
                value: accuracy,
                secondary: None,
                n: examples.len(),
            }
        }
        EvalData::Qa(examples, profile) => {
            let qa = eval_qa(model, examples, seq_len, *profile)?;
            ZeroShotReport {
                language: lang.to_string(),
                metric: "f1".into(),
                value: qa.f1,
                secondary: Some(qa.em),
                n: qa.n,
            }
        }
    };
    // Evaluation only: parameters must be bit-identical afterwards (the
    // swapped-in lexical parameters replace, not update).
    let hashes_after = model.store().hash_all();
    for (name, before) in &hashes_before {
        if name.starts_with("emb.") && name != "emb.special" && name != "emb.segment" {
            continue;
        }
        if hashes_after.get(name) != Some(before) {
            return Err(Error::Validation(format!(
                "evaluation modified parameter `{name}`"
            )));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct QaEval {
    pub f1: f64,
    pub em: f64,
    pub n: usize,
    pub skipped: usize,
}

const MAX_ANSWER_TOKENS: usize = 30;

/// Extractive QA evaluation: argmax start/end span (end >= start, bounded
/// length), text recovered through tokenizer offsets, scored with bag F1/EM
/// against all gold answers.
pub fn eval_qa<T: Real>(
    model: &TransformerModel<T>,
    examples: &[QAExample],
    seq_len: usize,
    profile: LanguageProfile,
) -> Result<QaEval> {
    let mut f1_sum = 0.0;
    let mut em_sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for example in examples {
        let Some((gold_text, gold_start)) = example.answers.first() else {
            skipped += 1;
            continue;
        };
        let span = SpanExample {
            question: example.question.clone(),
            context: example.context.clone(),
            answer_chars: (*gold_start, gold_start + gold_text.chars().count()),
        };
        let batch = make_span_batch(std::slice::from_ref(&span), model.active_vocab(), seq_len)?;
        if batch.token_ids.is_empty() {
            skipped += 1;
            continue;
        }
        let fwd = model.forward_span(&batch, None)?;
        let starts = &fwd.start_logits[0];
        let ends = &fwd.end_logits[0];
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for s in 0..starts.len() {
            for e in s..ends.len().min(s + MAX_ANSWER_TOKENS) {
                let score = starts[s] + ends[e];
                if score > best.2 {
                    best = (s, e, score);
                }
            }
        }
        let offsets = model.active_vocab().tokenize_with_offsets(&example.context);
        let (cs, ce) = (offsets[best.0].1, offsets[best.1].2);
        let prediction: String = example
            .context
            .chars()
            .skip(cs)
            .take(ce.saturating_sub(cs))
            .collect();
        let golds: Vec<String> = example.answers.iter().map(|(t, _)| t.clone()).collect();
        let (f1, em) = squad_f1_em(&prediction, &golds, profile)?;
        f1_sum += f1;
        em_sum += em;
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("no scoreable QA examples"));
    }
    Ok(QaEval {
        f1: f1_sum / n as f64,
        em: em_sum / n as f64,
        n,
        skipped,
    })
}

/// Vocabulary regime for joint training.
#[derive(Clone, Debug)]
pub enum VocabMode {
    Joint {
        size: usize,
        algorithm: crate::tokenize::Algorithm,
    },
    Disjoint {
        size: usize,
        algorithm: crate::tokenize::Algorithm,
    },
}

/// Train a joint model over several languages (two = the pairwise baseline,
/// more = the multilingual one). All groups are trainable; rows are drawn
/// by the upsampled language distribution.
pub fn train_joint<T: Real>(
    corpora: &[Corpus],
    vocab_mode: &VocabMode,
    config: ModelConfig,
    opts: &RunOptions,
    audit: &mut Vec<AuditRecord>,
) -> Result<(TransformerModel<T>, RunLog)> {
    if corpora.len() < 2 {
        return Err(Error::config("joint training needs at least two corpora"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x101);
    let mut model = match vocab_mode {
        VocabMode::Joint { size, algorithm } => {
            let per_lang: Vec<(LanguageId, Vec<String>)> = corpora
                .iter()
                .map(|c| (c.language.clone(), c.sentences_owned()))
                .collect();
            let vocab =
                crate::tokenize::build_joint_vocab(&per_lang, *size, opts.alpha, *algorithm)?;
            let joint_lang = LanguageId::new("joint")?;
            let set = EmbeddingSet::random(joint_lang, vocab, &config, &mut rng);
            TransformerModel::init(config, set, opts.seed)?
        }
        VocabMode::Disjoint { size, algorithm } => {
            let mut sets = Vec::new();
            for corpus in corpora {
                let vocab = Vocabulary::learn(
                    &corpus.sentences_owned(),
                    *size,
                    *algorithm,
                    crate::tokenize::VocabScope::Lang(corpus.language.clone()),
                )?;
                sets.push(EmbeddingSet::random(
                    corpus.language.clone(),
                    vocab,
                    &config,
                    &mut rng,
                ));
            }
            let mut sets = sets.into_iter();
            let first = sets.next().expect("at least two corpora");
            let mut model = TransformerModel::init(config, first, opts.seed)?;
            for set in sets {
                model.attach_embedding_set(set)?;
            }
            model
        }
    };
    let all = model.store().tags();
    model.set_trainable(&all)?;

    let lang_override = match vocab_mode {
        VocabMode::Joint { .. } => Some(LanguageId::new("joint")?),
        VocabMode::Disjoint { .. } => None,
    };
    let mut trains = Vec::new();
    let mut devs = Vec::new();
    for corpus in corpora {
        let (t, d) = corpus.split_holdout(opts.dev_holdout_every);
        trains.push(t);
        devs.push(d);
    }
    let mut trainer = TrainerState::new(opts.optimizer, opts.seed)?;
    let log = MlmLoop {
        model: &mut model,
        corpora: &trains,
        dev_corpora: &devs,
        lang_override,
        trainer: &mut trainer,
        opts,
        audit,
        phase: "joint-pretrain",
    }
    .run(opts.optimizer.steps)?;
    model.provenance.pretrained = true;
    Ok((model, log))
}

/// Build an embedding set whose non-special rows come from mapped word
/// vectors (pieces missing from the embedding vocabulary stay zero).
pub fn embedding_set_from_word_vectors<T: Real>(
    lang: &LanguageId,
    vocab: Vocabulary,
    vectors: &WordEmbeddings,
    config: &ModelConfig,
) -> Result<EmbeddingSet<T>> {
    if vectors.dim != config.d_model {
        return Err(Error::config(format!(
            "mapped embeddings are {}-dimensional but d_model is {}; no projection is inserted",
            vectors.dim, config.d_model
        )));
    }
    let rows = vocab.size() - NUM_SPECIALS;
    let mut data = vec![T::zero(); rows * config.d_model];
    for i in 0..rows {
        let surface = vocab
            .surface((NUM_SPECIALS + i) as u32)
            .expect("piece id in range");
        if let Some(v) = vectors.vector(surface) {
            for (slot, &x) in data[i * config.d_model..(i + 1) * config.d_model]
                .iter_mut()
                .zip(v)
            {
                *slot = T::from_f64(x);
            }
        }
    }
    let pos_emb = if config.lang_specific_positions {
        return Err(Error::config(
            "the CLWE-body variant uses shared position embeddings",
        ));
    } else {
        None
    };
    Ok(EmbeddingSet {
        language: lang.clone(),
        vocab,
        token_emb: crate::numerics::Tensor::new(vec![rows, config.d_model], data)?,
        pos_emb,
    })
}

/// The CLWE-body baseline: token embeddings are fixed to mapped word
/// vectors for every language; only the body and heads ever train.
pub fn train_clwe_body<T: Real>(
    l1_corpus: &Corpus,
    sets: Vec<EmbeddingSet<T>>,
    config: ModelConfig,
    opts: &RunOptions,
    audit: &mut Vec<AuditRecord>,
) -> Result<(TransformerModel<T>, RunLog)> {
    let l1 = l1_corpus.language.clone();
    if !sets.iter().any(|s| s.language == l1) {
        return Err(Error::config(format!("no embedding set for `{l1}`")));
    }
    let mut sets = sets;
    sets.sort_by(|a, b| {
        (a.language != l1)
            .cmp(&(b.language != l1))
            .then_with(|| a.language.cmp(&b.language))
    });
    let mut iter = sets.into_iter();
    let first = iter.next().expect("checked above");
    let mut model = TransformerModel::init(config, first, opts.seed)?;
    for set in iter {
        model.attach_embedding_set(set)?;
    }
    // Token embedding groups are permanently frozen to the mapped vectors.
    let trainable: Vec<GroupTag> = model
        .store()
        .tags()
        .into_iter()
        .filter(|t| !matches!(t, GroupTag::TokenEmb(_)))
        .collect();
    model.set_trainable(&trainable)?;

    let (train, dev) = l1_corpus.split_holdout(opts.dev_holdout_every);
    let mut trainer = TrainerState::new(opts.optimizer, opts.seed)?;
    let log = MlmLoop {
        model: &mut model,
        corpora: std::slice::from_ref(&train),
        dev_corpora: std::slice::from_ref(&dev),
        lang_override: None,
        trainer: &mut trainer,
        opts,
        audit,
        phase: "clwe-body-pretrain",
    }
    .run(opts.optimizer.steps)?;
    model.provenance.pretrained = true;
    Ok((model, log))
}
