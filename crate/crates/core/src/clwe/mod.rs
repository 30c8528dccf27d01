//! Cross-lingual word embeddings: skip-gram training per language, then an
//! orthogonal map between the monolingual spaces.

mod procrustes;
mod skipgram;

pub use procrustes::{
    apply_mapping, map_orthogonal, normalize_embeddings, orthogonality_error,
    seed_dictionary_identical, MappingResult,
};
pub use skipgram::{train_skipgram, SkipGramConfig};

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenize::{LanguageId, SPECIALS};

/// Word-level embeddings: a surface list and a row-major `[V, dim]` matrix.
#[derive(Clone, Debug)]
pub struct WordEmbeddings {
    pub language: LanguageId,
    pub words: Vec<String>,
    pub dim: usize,
    matrix: Vec<f64>,
    index: HashMap<String, usize>,
}

impl WordEmbeddings {
    pub fn new(
        language: LanguageId,
        words: Vec<String>,
        dim: usize,
        matrix: Vec<f64>,
    ) -> Result<Self> {
        if matrix.len() != words.len() * dim {
            return Err(Error::Dimension {
                primitive: "word_embeddings",
                detail: format!(
                    "{} words x {dim} dims vs {} values",
                    words.len(),
                    matrix.len()
                ),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding value".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate word `{w}`")));
            }
        }
        Ok(WordEmbeddings {
            language,
            words,
            dim,
            matrix,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.index_of(word).map(|i| self.row(i))
    }

    /// Text format: first line `V dim`, then `word v1 v2 ...` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{} {}", self.len(), self.dim)?;
        for (i, w) in self.words.iter().enumerate() {
            write!(f, "{w}")?;
            for v in self.row(i) {
                write!(f, " {v}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, language: LanguageId) -> Result<Self> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Validation("empty embedding file".into()))?;
        let mut parts = header.split_whitespace();
        let (v, dim): (usize, usize) = match (parts.next(), parts.next()) {
            (Some(v), Some(d)) => (
                v.parse()
                    .map_err(|_| Error::Validation(format!("bad header `{header}`")))?,
                d.parse()
                    .map_err(|_| Error::Validation(format!("bad header `{header}`")))?,
            ),
            _ => return Err(Error::Validation(format!("bad header `{header}`"))),
        };
        let mut words = Vec::with_capacity(v);
        let mut matrix = Vec::with_capacity(v * dim);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields
                .next()
                .ok_or_else(|| Error::Validation("empty embedding line".into()))?;
            words.push(word.to_string());
            let mut count = 0;
            for value in fields {
                matrix.push(value.parse().map_err(|_| {
                    Error::Validation(format!("bad value `{value}` for `{word}`"))
                })?);
                count += 1;
            }
            if count != dim {
                return Err(Error::Validation(format!(
                    "word `{word}` has {count} values, expected {dim}"
                )));
            }
        }
        if words.len() != v {
            return Err(Error::Validation(format!(
                "header promises {v} words, file has {}",
                words.len()
            )));
        }
        WordEmbeddings::new(language, words, dim, matrix)
    }
}

/// Specials never participate in dictionaries or mapping.
pub(crate) fn is_special(word: &str) -> bool {
    SPECIALS.contains(&word)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
