//! Corpus handling, multilingual upsampling, and batch construction.

pub mod batch;
pub mod synth;

pub use batch::{
    make_cls_batch, make_mlm_nsp_batch, make_span_batch, ClsBatch, ClsExample, MlmBatch,
    MlmSource, SpanBatch, SpanExample,
};
pub use synth::{generate_synthetic, Grammar, SynthData, SynthSpec, SynthTransform};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::LanguageId;

/// A document-structured monolingual corpus: every document is a nonempty
/// list of raw UTF-8 sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub language: LanguageId,
    pub documents: Vec<Vec<String>>,
}

impl Corpus {
    pub fn new(language: LanguageId, documents: Vec<Vec<String>>) -> Result<Self> {
        if documents.iter().any(|d| d.is_empty()) {
            return Err(Error::Validation("corpus contains an empty document".into()));
        }
        Ok(Corpus {
            language,
            documents,
        })
    }

    pub fn n_sentences(&self) -> usize {
        self.documents.iter().map(|d| d.len()).sum()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().flatten().map(|s| s.as_str())
    }

    pub fn sentences_owned(&self) -> Vec<String> {
        self.sentences().map(str::to_string).collect()
    }

    /// Load the plain-text format: one sentence per line, blank line between
    /// documents.
    pub fn load(path: &Path, language: LanguageId) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut documents = Vec::new();
        let mut current = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                if !current.is_empty() {
                    documents.push(std::mem::take(&mut current));
                }
            } else {
                current.push(line);
            }
        }
        if !current.is_empty() {
            documents.push(current);
        }
        if documents.is_empty() {
            return Err(Error::Validation(format!(
                "corpus file {} contains no sentences",
                path.display()
            )));
        }
        Corpus::new(language, documents)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, doc) in self.documents.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            for sentence in doc {
                writeln!(f, "{sentence}")?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Split off a held-out slice of documents (every `k`-th document) for
    /// dev evaluation; the remainder stays for training.
    pub fn split_holdout(&self, every: usize) -> (Corpus, Corpus) {
        let mut train = Vec::new();
        let mut dev = Vec::new();
        for (i, doc) in self.documents.iter().enumerate() {
            if every > 0 && i % every == every - 1 {
                dev.push(doc.clone());
            } else {
                train.push(doc.clone());
            }
        }
        if dev.is_empty() {
            dev.push(self.documents[0].clone());
        }
        if train.is_empty() {
            train.push(self.documents[0].clone());
        }
        (
            Corpus {
                language: self.language.clone(),
                documents: train,
            },
            Corpus {
                language: self.language.clone(),
                documents: dev,
            },
        )
    }
}

/// Language-sampling configuration for multilingual training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Upsampling exponent in `[0, 1]`; 1 = proportional, 0 = uniform.
    pub alpha: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(alpha: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(SamplerConfig { alpha, seed })
    }
}

/// Load classification examples from TSV: `label<TAB>text_a[<TAB>text_b]`.
pub fn load_cls_tsv(path: &Path) -> Result<Vec<ClsExample>> {
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let example = match fields.as_slice() {
            [label, a] => ClsExample {
                text_a: a.to_string(),
                text_b: None,
                label: label.parse().map_err(|_| {
                    Error::Validation(format!("line {}: bad label `{label}`", lineno + 1))
                })?,
            },
            [label, a, b] => ClsExample {
                text_a: a.to_string(),
                text_b: Some(b.to_string()),
                label: label.parse().map_err(|_| {
                    Error::Validation(format!("line {}: bad label `{label}`", lineno + 1))
                })?,
            },
            _ => {
                return Err(Error::Validation(format!(
                    "line {}: expected 2 or 3 tab-separated fields",
                    lineno + 1
                )))
            }
        };
        out.push(example);
    }
    Ok(out)
}

/// Write classification examples in the TSV format.
pub fn save_cls_tsv(examples: &[ClsExample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        match &ex.text_b {
            Some(b) => writeln!(f, "{}\t{}\t{}", ex.label, ex.text_a, b)?,
            None => writeln!(f, "{}\t{}", ex.label, ex.text_a)?,
        }
    }
    f.flush()?;
    Ok(())
}

/// The upsampled language distribution `q_i ∝ p_i^alpha` with
/// `p_i = n_i / Σn`. Sums to one; preserves the ordering of the sizes.
pub fn upsample_distribution(sizes: &[usize], alpha: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::config("no languages to sample"));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::config(format!("language {i} has zero examples")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    let powered: Vec<f64> = sizes
        .iter()
        .map(|&n| (n as f64 / total).powf(alpha))
        .collect();
    let z: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|p| p / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(tag: &str) -> LanguageId {
        LanguageId::new(tag).unwrap()
    }

    #[test]
    fn upsample_alpha_one_is_proportional() {
        let q = upsample_distribution(&[3, 1], 1.0).unwrap();
        assert!((q[0] - 0.75).abs() < 1e-15);
        assert!((q[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn upsample_alpha_zero_is_uniform() {
        let q = upsample_distribution(&[3, 1, 6], 0.0).unwrap();
        for &v in &q {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_square_root_case() {
        // sizes [9, 1] at alpha 0.5: √9 : √1 = 3 : 1.
        let q = upsample_distribution(&[9, 1], 0.5).unwrap();
        assert_eq!(q, vec![0.75, 0.25]);
    }

    #[test]
    fn upsample_rejects_zero_sized_language() {
        assert!(upsample_distribution(&[4, 0], 0.5).is_err());
    }

    #[test]
    fn upsample_preserves_ordering_and_sums_to_one() {
        let sizes = [50, 3, 17, 17, 200];
        let q = upsample_distribution(&sizes, 0.7).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..sizes.len() {
            for j in 0..sizes.len() {
                if sizes[i] < sizes[j] {
                    assert!(q[i] < q[j]);
                }
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let corpus = Corpus::new(
            lang("L1"),
            vec![
                vec!["a b c".into(), "d e".into()],
                vec!["f".into()],
            ],
        )
        .unwrap();
        corpus.save(&path).unwrap();
        let loaded = Corpus::load(&path, lang("L1")).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn corpus_rejects_empty_documents() {
        assert!(Corpus::new(lang("L1"), vec![vec![]]).is_err());
    }
}
