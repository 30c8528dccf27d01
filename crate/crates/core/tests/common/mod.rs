//! Shared fixtures for the integration and acceptance suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xferlab_core::data::{generate_synthetic, Corpus, SynthData, SynthSpec, SynthTransform};
use xferlab_core::model::{EmbeddingSet, ModelConfig, TransformerModel};
use xferlab_core::pipelines::{OptimizerConfig, OptimizerKind, RunOptions};
use xferlab_core::tokenize::{Algorithm, VocabScope, Vocabulary};

pub fn synth(seed: u64, n: usize, transform: SynthTransform) -> SynthData {
    generate_synthetic(
        &SynthSpec {
            transform,
            seed,
            sentences_per_doc: 6,
        },
        n,
    )
    .expect("synthetic generation")
}

pub fn mini_config(d_model: usize, seq_len: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model,
        d_ff: d_model * 4,
        max_seq_len: seq_len,
        adapter_size: 0,
        tie_mlm_output: true,
        lang_specific_positions: false,
    }
}

pub fn learn_vocab(corpus: &Corpus, size: usize) -> Vocabulary {
    Vocabulary::learn(
        &corpus.sentences_owned(),
        size,
        Algorithm::UnigramLm,
        VocabScope::Lang(corpus.language.clone()),
    )
    .expect("vocabulary learning")
}

pub fn fresh_model(config: &ModelConfig, corpus: &Corpus, vocab_size: usize, seed: u64) -> TransformerModel<f32> {
    let vocab = learn_vocab(corpus, vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = EmbeddingSet::random(corpus.language.clone(), vocab, config, &mut rng);
    TransformerModel::init(config.clone(), set, seed).expect("model init")
}

pub fn run_options(steps: usize, lr: f64, batch: usize, seq_len: usize, seed: u64) -> RunOptions {
    RunOptions::new(
        OptimizerConfig {
            algorithm: OptimizerKind::Adam,
            learning_rate: lr,
            batch_size: batch,
            steps,
            warmup_fraction: 0.1,
        },
        seq_len,
        seed,
    )
}
