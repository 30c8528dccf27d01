//! The swappable lexical unit: one language's token embeddings, optional
//! language-specific position embeddings, and the vocabulary they index.

use rand_chacha::ChaCha8Rng;

use super::{normal_tensor, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::tokenize::{LanguageId, Vocabulary, NUM_SPECIALS};

pub(crate) const INIT_STD: f64 = 0.02;

/// Per-language embedding set. `token_emb` holds the non-special rows
/// (vocabulary ids 5..V); the five shared special rows always live with the
/// model and override whatever a swapped-in set would carry, which keeps the
/// specials fine-tuned once and shared across languages.
#[derive(Clone, Debug)]
pub struct EmbeddingSet<T> {
    pub language: LanguageId,
    pub vocab: Vocabulary,
    /// `[V-5, d]`, row i embeds vocabulary id `5 + i`.
    pub token_emb: Tensor<T>,
    /// `[max_seq_len, d]` when the model learns language-specific positions.
    pub pos_emb: Option<Tensor<T>>,
}

impl<T: Real> EmbeddingSet<T> {
    /// Fresh random set compatible with `config`.
    pub fn random(
        language: LanguageId,
        vocab: Vocabulary,
        config: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let rows = vocab.size() - NUM_SPECIALS;
        let token_emb = normal_tensor(vec![rows, config.d_model], INIT_STD, rng);
        let pos_emb = config
            .lang_specific_positions
            .then(|| normal_tensor(vec![config.max_seq_len, config.d_model], INIT_STD, rng));
        EmbeddingSet {
            language,
            vocab,
            token_emb,
            pos_emb,
        }
    }

    /// Total vocabulary size including the five specials.
    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let rows = self.vocab.size() - NUM_SPECIALS;
        if self.token_emb.shape() != [rows, config.d_model] {
            return Err(Error::config(format!(
                "embedding set `{}`: token matrix {:?} does not match vocab {} x d_model {}",
                self.language,
                self.token_emb.shape(),
                rows,
                config.d_model
            )));
        }
        match (&self.pos_emb, config.lang_specific_positions) {
            (Some(p), true) => {
                if p.shape() != [config.max_seq_len, config.d_model] {
                    return Err(Error::config(format!(
                        "embedding set `{}`: position matrix {:?} does not match [{}, {}]",
                        self.language,
                        p.shape(),
                        config.max_seq_len,
                        config.d_model
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::config(format!(
                    "embedding set `{}` carries position embeddings but the model shares them",
                    self.language
                )))
            }
            (None, true) => {
                return Err(Error::config(format!(
                    "embedding set `{}` lacks position embeddings required by the config",
                    self.language
                )))
            }
        }
        Ok(())
    }
}
