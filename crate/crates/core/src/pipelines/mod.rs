//! The experimental choreography: the four-step transfer procedure, the
//! joint baselines, the CLWE-body variant, and declarative experiment specs.

pub mod audit;
mod optimizer;
mod steps;
mod train;

pub use audit::verify_freeze_audit;
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
pub use steps::{
    embedding_set_from_word_vectors, eval_qa, step1_pretrain, step2_mask, step2_transfer,
    step3_finetune, step3_mask, step4_zero_shot, train_clwe_body, train_joint, EvalData,
    FinetuneOptions, QaEval, RestartOutcome, Step2Report, TaskData, TransferOptions, VocabMode,
    ZeroShotReport,
};
pub use train::{
    eval_classification, eval_mlm_nsp, load_with_trainer, rng_from_state, rng_state,
    save_with_trainer, LossPoint, RngState, RunLog, RunOptions, TrainerState,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{EmbeddingSet, ModelConfig, TransformerModel};
use crate::tokenize::{Algorithm, LanguageId, VocabScope, Vocabulary};

pub const SPEC_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    Monotrans,
    Jointpair,
    Jointmulti,
    ClweBody,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusRef {
    pub language: String,
    pub path: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabModeKind {
    Joint,
    Disjoint,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VocabSpec {
    pub mode: VocabModeKind,
    pub size: usize,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
}

fn default_algorithm() -> Algorithm {
    Algorithm::UnigramLm
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineOptions {
    #[serde(default)]
    pub lang_pos_emb: bool,
    /// Adapter bottleneck width for Step 2; 0 disables adapters.
    #[serde(default)]
    pub adapters: usize,
    /// Gaussian noise std for the fine-tuning step.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Step-2 restart count.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    /// Upsampling exponent for multilingual sampling and joint vocabularies.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_noise() -> f64 {
    0.075
}
fn default_restarts() -> usize {
    3
}
fn default_mask_prob() -> f64 {
    0.15
}
fn default_alpha() -> f64 {
    0.5
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            lang_pos_emb: false,
            adapters: 0,
            noise_sigma: default_noise(),
            restarts: default_restarts(),
            mask_prob: default_mask_prob(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub step1: usize,
    pub step2: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneSpec {
    /// "classification" or "qa".
    pub task: String,
    /// Classification: TSV `label<TAB>text_a[<TAB>text_b]`. QA: SQuAD JSON.
    pub train_data: PathBuf,
    #[serde(default)]
    pub n_classes: Option<usize>,
    /// Per-language evaluation sets (same formats).
    #[serde(default)]
    pub eval_data: Vec<CorpusRef>,
    #[serde(default)]
    pub epochs: Option<usize>,
}

/// Declarative description of a pipeline run; the JSON schema is versioned.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub version: u32,
    pub pipeline: PipelineKind,
    pub l1: CorpusRef,
    #[serde(default)]
    pub l2: Vec<CorpusRef>,
    pub vocab: VocabSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub options: PipelineOptions,
    pub optimizer: OptimizerConfig,
    pub budgets: BudgetSpec,
    #[serde(default)]
    pub finetune: Option<FinetuneSpec>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// CLWE-body: per-language mapped word-embedding files (text format),
    /// aligned into the first language's space; must include the L1 space.
    #[serde(default)]
    pub mapped_embeddings: Vec<CorpusRef>,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: ExperimentSpec =
            serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SPEC_VERSION {
            return Err(Error::Validation(format!(
                "experiment spec version {} is not supported (expected {SPEC_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        if !(0.0..=1.0).contains(&self.options.alpha) {
            return Err(Error::config("alpha must lie in [0, 1]"));
        }
        match self.pipeline {
            PipelineKind::Monotrans => {
                if self.l2.is_empty() {
                    return Err(Error::config(
                        "monotrans requires exactly one L1 and at least one L2 corpus",
                    ));
                }
            }
            PipelineKind::Jointpair => {
                if self.l2.len() != 1 {
                    return Err(Error::config("jointpair takes exactly two languages"));
                }
            }
            PipelineKind::Jointmulti => {
                if self.l2.is_empty() {
                    return Err(Error::config("jointmulti needs at least two languages"));
                }
            }
            PipelineKind::ClweBody => {
                if self.mapped_embeddings.is_empty() {
                    return Err(Error::config(
                        "clwe-body requires mapped-embedding artifacts",
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub steps: usize,
    pub final_train_loss: Option<f64>,
    pub final_dev_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Default)]
pub struct ExperimentSummary {
    pub phases: Vec<PhaseSummary>,
    pub zero_shot: Vec<ZeroShotReport>,
    pub checkpoint: Option<PathBuf>,
    pub restart_dev_losses: Vec<Vec<Option<f64>>>,
}

fn phase_summary(phase: &str, log: &RunLog) -> PhaseSummary {
    PhaseSummary {
        phase: phase.to_string(),
        steps: log.train.len(),
        final_train_loss: log.train.last().map(|p| p.total),
        final_dev_loss: log.dev.last().map(|p| p.total),
    }
}

/// Execute a declarative experiment end to end; 32-bit precision.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentSummary> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.output_dir)?;
    let mut summary = ExperimentSummary::default();
    let mut audit = Vec::new();
    let ckpt_path = spec.output_dir.join("model.ckpt");

    let l1_lang = LanguageId::new(spec.l1.language.clone())?;
    let l1_corpus = Corpus::load(&spec.l1.path, l1_lang.clone())?;
    let mut l2_corpora = Vec::new();
    for r in &spec.l2 {
        let lang = LanguageId::new(r.language.clone())?;
        l2_corpora.push(Corpus::load(&r.path, lang)?);
    }

    let mut config = spec.model.clone();
    config.lang_specific_positions = spec.options.lang_pos_emb;
    let seq_len = config.max_seq_len;
    let mut opts = RunOptions::new(
        OptimizerConfig {
            steps: spec.budgets.step1,
            ..spec.optimizer
        },
        seq_len,
        spec.seed,
    );
    opts.mask_prob = spec.options.mask_prob;
    opts.alpha = spec.options.alpha;
    opts.eval_every = (spec.budgets.step1 / 10).max(1);
    opts.checkpoint_path = Some(ckpt_path.clone());

    let mut model: TransformerModel<f32> = match spec.pipeline {
        PipelineKind::Monotrans => {
            let l1_vocab = Vocabulary::learn(
                &l1_corpus.sentences_owned(),
                spec.vocab.size,
                spec.vocab.algorithm,
                VocabScope::Lang(l1_lang.clone()),
            )?;
            let mut rng = rand::SeedableRng::seed_from_u64(spec.seed);
            let set = EmbeddingSet::random(l1_lang.clone(), l1_vocab, &config, &mut rng);
            let mut model = TransformerModel::init(config.clone(), set, spec.seed)?;
            let log = step1_pretrain(&mut model, &l1_corpus, &opts, &mut audit)?;
            summary.phases.push(phase_summary("step1-pretrain", &log));

            let transfer = TransferOptions {
                adapters: spec.options.adapters,
                restarts: spec.options.restarts,
                threads: threads_from_env(),
            };
            let mut step2_opts = opts.clone();
            step2_opts.optimizer.steps = spec.budgets.step2;
            step2_opts.checkpoint_path = None;
            for corpus in &l2_corpora {
                let vocab = Vocabulary::learn(
                    &corpus.sentences_owned(),
                    spec.vocab.size,
                    spec.vocab.algorithm,
                    VocabScope::Lang(corpus.language.clone()),
                )?;
                let report =
                    step2_transfer(&mut model, corpus, vocab, &step2_opts, &transfer, &mut audit)?;
                summary
                    .restart_dev_losses
                    .push(report.outcomes.iter().map(|o| o.dev.map(|d| d.total)).collect());
                summary.phases.push(PhaseSummary {
                    phase: format!("step2-transfer-{}", corpus.language),
                    steps: spec.budgets.step2,
                    final_train_loss: report.outcomes[report.best]
                        .train
                        .last()
                        .map(|p| p.total),
                    final_dev_loss: report.outcomes[report.best].dev.map(|d| d.total),
                });
            }
            model.activate_language(&l1_lang)?;
            model
        }
        PipelineKind::Jointpair | PipelineKind::Jointmulti => {
            let mut corpora = vec![l1_corpus.clone()];
            corpora.extend(l2_corpora.iter().cloned());
            let mode = match spec.vocab.mode {
                VocabModeKind::Joint => VocabMode::Joint {
                    size: spec.vocab.size,
                    algorithm: spec.vocab.algorithm,
                },
                VocabModeKind::Disjoint => VocabMode::Disjoint {
                    size: spec.vocab.size,
                    algorithm: spec.vocab.algorithm,
                },
            };
            let (model, log) = train_joint(&corpora, &mode, config.clone(), &opts, &mut audit)?;
            summary.phases.push(phase_summary("joint-pretrain", &log));
            model
        }
        PipelineKind::ClweBody => {
            let mut sets = Vec::new();
            for r in &spec.mapped_embeddings {
                let lang = LanguageId::new(r.language.clone())?;
                let vectors = crate::clwe::WordEmbeddings::load(&r.path, lang.clone())?;
                let corpus = if lang == l1_lang {
                    &l1_corpus
                } else {
                    l2_corpora
                        .iter()
                        .find(|c| c.language == lang)
                        .ok_or_else(|| Error::config(format!("no corpus for `{lang}`")))?
                };
                let vocab = Vocabulary::learn(
                    &corpus.sentences_owned(),
                    spec.vocab.size,
                    spec.vocab.algorithm,
                    VocabScope::Lang(lang.clone()),
                )?;
                sets.push(embedding_set_from_word_vectors(
                    &lang, vocab, &vectors, &config,
                )?);
            }
            let (model, log) =
                train_clwe_body(&l1_corpus, sets, config.clone(), &opts, &mut audit)?;
            summary.phases.push(phase_summary("clwe-body-pretrain", &log));
            model
        }
    };

    if let Some(finetune) = &spec.finetune {
        let mut ft_opts = FinetuneOptions::default_for(seq_len, spec.seed ^ 0xF1);
        ft_opts.noise_sigma = spec.options.noise_sigma;
        if let Some(epochs) = finetune.epochs {
            ft_opts.epochs = epochs;
        }
        let task = load_task_data(finetune)?;
        let losses = step3_finetune(&mut model, &task, &ft_opts, &mut audit)?;
        summary.phases.push(PhaseSummary {
            phase: "step3-finetune".into(),
            steps: losses.len(),
            final_train_loss: losses.last().map(|p| p.total),
            final_dev_loss: None,
        });
        for eval_ref in &finetune.eval_data {
            let lang = LanguageId::new(eval_ref.language.clone())?;
            let data = load_eval_data(finetune, &eval_ref.path)?;
            // Joint-vocabulary models evaluate under their single shared
            // set; everything else activates the target language's set.
            let active = if model.vocab(&lang).is_some() {
                lang.clone()
            } else {
                model.active_language().clone()
            };
            let mut report = step4_zero_shot(&mut model, None, &active, &data, seq_len)?;
            report.language = lang.to_string();
            summary.zero_shot.push(report);
        }
    }

    let (tensors, meta) = (std::collections::BTreeMap::new(), serde_json::Value::Null);
    crate::persist::Checkpoint::from_model(&model, audit, tensors, meta).save(&ckpt_path)?;
    summary.checkpoint = Some(ckpt_path);
    Ok(summary)
}

/// `XFERLAB_THREADS` caps restart parallelism; default 1.
pub fn threads_from_env() -> usize {
    std::env::var("XFERLAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn load_task_data(finetune: &FinetuneSpec) -> Result<TaskData> {
    match finetune.task.as_str() {
        "classification" => {
            let examples = crate::data::load_cls_tsv(&finetune.train_data)?;
            let n_classes = match finetune.n_classes {
                Some(k) => k,
                None => examples.iter().map(|e| e.label).max().unwrap_or(0) + 1,
            };
            Ok(TaskData::Classification { examples, n_classes })
        }
        "qa" => {
            let qa = crate::evalprobe::read_squad_json(&finetune.train_data)?;
            let examples = qa
                .iter()
                .filter_map(|ex| {
                    ex.answers.first().map(|(text, start)| crate::data::SpanExample {
                        question: ex.question.clone(),
                        context: ex.context.clone(),
                        answer_chars: (*start, start + text.chars().count()),
                    })
                })
                .collect();
            Ok(TaskData::Qa { examples })
        }
        other => Err(Error::config(format!("unknown fine-tuning task `{other}`"))),
    }
}

fn load_eval_data(finetune: &FinetuneSpec, path: &Path) -> Result<EvalData> {
    match finetune.task.as_str() {
        "classification" => Ok(EvalData::Classification(crate::data::load_cls_tsv(path)?)),
        "qa" => Ok(EvalData::Qa(
            crate::evalprobe::read_squad_json(path)?,
            crate::evalprobe::LanguageProfile::Whitespace,
        )),
        other => Err(Error::config(format!("unknown fine-tuning task `{other}`"))),
    }
}
