//! Task metrics, QA data ingestion, the placeholder-format validator, and
//! the probing protocols.

pub mod placeholder;
pub mod probes;
pub mod squad;

pub use placeholder::{validate_placeholders, PlaceholderDoc, PlaceholderReport, Violation};
pub use probes::{probe_scws, probe_syntax, probe_wic, ProbeExample, ScwsResult, SyntaxResult, WicResult};
pub use squad::{corpus_token_stats, read_squad_json, squad_f1_em, LanguageProfile, QAExample, TokenStats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A grammatical/ungrammatical sentence pair differing in one whitespace
/// word, tagged with its phenomenon category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub grammatical: String,
    pub ungrammatical: String,
    pub category: String,
}

impl MinimalPair {
    /// The single differing word of a well-formed pair, as
    /// (position, grammatical word, ungrammatical word). `None` when the
    /// sentences differ in zero or several words.
    pub fn differing_word(&self) -> Option<(usize, &str, &str)> {
        let a: Vec<&str> = self.grammatical.split_whitespace().collect();
        let b: Vec<&str> = self.ungrammatical.split_whitespace().collect();
        if a.len() != b.len() {
            return None;
        }
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        match diffs.as_slice() {
            [i] => Some((*i, a[*i], b[*i])),
            _ => None,
        }
    }
}

/// One metrics record, emitted as a JSON object per run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub config_hash: String,
}

/// Fraction of predictions equal to their gold label.
pub fn classification_accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::contract("empty prediction list"));
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::contract(format!(
            "{} vs {} scores",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::contract("need at least two pairs for a correlation"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Numeric("constant ranks have no correlation".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks, averaged across the tie block.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}
