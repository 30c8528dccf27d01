//! The three probing protocols: WiC-style linear probing on fixed pair
//! representations, SCWS-style contextual similarity, and minimal-pair
//! syntactic scoring with subword-coverage filtering.
//!
//! Probes run over any frozen model through the [`ProbeModel`] trait, which
//! keeps the protocols testable against rigged scorers.

use std::collections::BTreeMap;

use super::{spearman, MinimalPair};
use crate::error::{Error, Result};

/// Read-only model surface the probes consume.
pub trait ProbeModel {
    /// Final-layer `[CLS]` vector of the packed sentence pair.
    fn cls_pair_vector(&self, sentence1: &str, sentence2: &str) -> Result<Vec<f64>>;

    /// Final-layer vectors of the pieces of `target`'s first occurrence in
    /// `sentence`; `None` when the target does not occur.
    fn target_piece_vectors(&self, sentence: &str, target: &str) -> Result<Option<Vec<Vec<f64>>>>;

    /// How many pieces `word` segments into.
    fn piece_count(&self, word: &str) -> usize;

    /// Log-probabilities of two single-piece candidate words at the masked
    /// slot of whitespace word `word_index` in `sentence`.
    fn masked_word_scores(
        &self,
        sentence: &str,
        word_index: usize,
        candidates: [&str; 2],
    ) -> Result<[f64; 2]>;
}

/// WiC-style example: does the target word mean the same in both sentences?
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct WicExample {
    pub sentence1: String,
    pub sentence2: String,
    pub target: String,
    pub label: bool,
}

/// SCWS-style example: human similarity score for two words in context.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ScwsExample {
    pub sentence1: String,
    pub target1: String,
    pub sentence2: String,
    pub target2: String,
    pub score: f64,
}

/// Probe inputs in either style (TSV loading keeps one example per line).
#[derive(Clone, Debug)]
pub enum ProbeExample {
    Wic(WicExample),
    Scws(ScwsExample),
}

/// Parse the WiC TSV format: `sentence1<TAB>sentence2<TAB>target<TAB>0|1`.
pub fn read_wic_tsv(path: &std::path::Path) -> Result<Vec<WicExample>> {
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [s1, s2, target, label] = fields.as_slice() else {
            return Err(Error::Validation(format!(
                "line {}: expected 4 tab-separated fields",
                lineno + 1
            )));
        };
        out.push(WicExample {
            sentence1: s1.to_string(),
            sentence2: s2.to_string(),
            target: target.to_string(),
            label: *label == "1",
        });
    }
    Ok(out)
}

/// Parse the SCWS TSV format:
/// `sentence1<TAB>target1<TAB>sentence2<TAB>target2<TAB>score`.
pub fn read_scws_tsv(path: &std::path::Path) -> Result<Vec<ScwsExample>> {
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [s1, t1, s2, t2, score] = fields.as_slice() else {
            return Err(Error::Validation(format!(
                "line {}: expected 5 tab-separated fields",
                lineno + 1
            )));
        };
        out.push(ScwsExample {
            sentence1: s1.to_string(),
            target1: t1.to_string(),
            sentence2: s2.to_string(),
            target2: t2.to_string(),
            score: score.parse().map_err(|_| {
                Error::Validation(format!("line {}: bad score `{score}`", lineno + 1))
            })?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct WicResult {
    pub accuracy: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub skipped: usize,
}

/// Train a linear classifier (logistic loss, full-batch gradient descent) on
/// the `[CLS]` representation of each training pair, then score the eval
/// split. Examples whose target is missing from either sentence are skipped
/// and counted.
pub fn probe_wic(
    model: &dyn ProbeModel,
    train: &[WicExample],
    eval: &[WicExample],
) -> Result<WicResult> {
    let mut skipped = 0;
    let mut featurize = |examples: &[WicExample]| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for ex in examples {
            let has_target = contains_word(&ex.sentence1, &ex.target)
                && contains_word(&ex.sentence2, &ex.target);
            if !has_target {
                skipped += 1;
                continue;
            }
            feats.push(model.cls_pair_vector(&ex.sentence1, &ex.sentence2)?);
            labels.push(ex.label);
        }
        Ok((feats, labels))
    };
    let (train_x, train_y) = featurize(train)?;
    let (eval_x, eval_y) = featurize(eval)?;
    if train_x.is_empty() || eval_x.is_empty() {
        return Err(Error::contract("probe needs nonempty train and eval splits"));
    }
    let (w, b) = train_logistic(&train_x, &train_y, 200, 0.5);
    let correct = eval_x
        .iter()
        .zip(&eval_y)
        .filter(|(x, &y)| predict(&w, b, x) == y)
        .count();
    Ok(WicResult {
        accuracy: correct as f64 / eval_y.len() as f64,
        n_train: train_y.len(),
        n_eval: eval_y.len(),
        skipped,
    })
}

fn contains_word(sentence: &str, word: &str) -> bool {
    sentence.split_whitespace().any(|w| w == word)
}

/// Deterministic logistic regression: w, b from zero init.
pub(crate) fn train_logistic(
    features: &[Vec<f64>],
    labels: &[bool],
    epochs: usize,
    lr: f64,
) -> (Vec<f64>, f64) {
    let dim = features[0].len();
    let n = features.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if y { 1.0 } else { 0.0 };
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / n;
        }
        b -= lr * gb / n;
    }
    (w, b)
}

fn predict(w: &[f64], b: f64, x: &[f64]) -> bool {
    let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
    z > 0.0
}

#[derive(Clone, Debug)]
pub struct ScwsResult {
    pub rho: f64,
    pub n: usize,
    pub skipped: usize,
}

/// Contextual similarity: each target's vector is the mean of its piece
/// vectors at the final layer; model score is their cosine; the result is
/// the Spearman correlation against the gold scores.
pub fn probe_scws(model: &dyn ProbeModel, examples: &[ScwsExample]) -> Result<ScwsResult> {
    let mut model_scores = Vec::new();
    let mut gold_scores = Vec::new();
    let mut skipped = 0;
    for ex in examples {
        let v1 = model.target_piece_vectors(&ex.sentence1, &ex.target1)?;
        let v2 = model.target_piece_vectors(&ex.sentence2, &ex.target2)?;
        let (Some(p1), Some(p2)) = (v1, v2) else {
            skipped += 1;
            continue;
        };
        model_scores.push(cosine(&mean(&p1), &mean(&p2)));
        gold_scores.push(ex.score);
    }
    if model_scores.len() < 2 {
        return Err(Error::contract("too few scored examples for a correlation"));
    }
    Ok(ScwsResult {
        rho: spearman(&model_scores, &gold_scores)?,
        n: model_scores.len(),
        skipped,
    })
}

fn mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    let dim = vectors[0].len();
    let mut out = vec![0.0; dim];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Coverage accounting for the syntactic probe; the three buckets sum to the
/// input size.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct SyntaxCoverage {
    pub total: usize,
    pub retained: usize,
    pub discarded_multiword: usize,
    pub discarded_multipiece: usize,
}

#[derive(Clone, Debug)]
pub struct SyntaxResult {
    /// category -> (correct, scored)
    pub per_category: BTreeMap<String, (usize, usize)>,
    pub macro_accuracy: f64,
    pub coverage: SyntaxCoverage,
}

/// Score minimal pairs with the MLM head: mask the differing word in both
/// sentences (identical contexts by construction) and predict the sentence
/// whose candidate piece gets more probability mass. Pairs whose differing
/// words split into more than one piece are discarded and counted.
pub fn probe_syntax(model: &dyn ProbeModel, pairs: &[MinimalPair]) -> Result<SyntaxResult> {
    let mut per_category: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut coverage = SyntaxCoverage {
        total: pairs.len(),
        retained: 0,
        discarded_multiword: 0,
        discarded_multipiece: 0,
    };
    for pair in pairs {
        let Some((word_index, good, bad)) = pair.differing_word() else {
            coverage.discarded_multiword += 1;
            continue;
        };
        if model.piece_count(good) != 1 || model.piece_count(bad) != 1 {
            coverage.discarded_multipiece += 1;
            continue;
        }
        coverage.retained += 1;
        let [good_score, bad_score] =
            model.masked_word_scores(&pair.grammatical, word_index, [good, bad])?;
        let entry = per_category.entry(pair.category.clone()).or_insert((0, 0));
        entry.1 += 1;
        if good_score > bad_score {
            entry.0 += 1;
        }
    }
    let macro_accuracy = if per_category.is_empty() {
        0.0
    } else {
        per_category
            .values()
            .map(|&(c, t)| c as f64 / t as f64)
            .sum::<f64>()
            / per_category.len() as f64
    };
    Ok(SyntaxResult {
        per_category,
        macro_accuracy,
        coverage,
    })
}
