//! Unigram language model trainer (EM over the segmentation lattice, with
//! periodic pruning) and Viterbi segmentation.

use std::collections::{BTreeSet, HashMap};

use super::{Segment, SubwordModel, UNK_ID};
use crate::error::Result;

/// Seed vocabulary size as a multiple of the target budget.
const SEED_FACTOR: usize = 10;
/// Fraction of multi-char pieces dropped per pruning round.
const PRUNE_FRACTION: f64 = 0.2;
/// Longest candidate piece, in chars (marker included).
const MAX_PIECE_CHARS: usize = 10;
/// EM iterations between pruning rounds.
const EM_ITERS: usize = 2;

const NEG_INF: f64 = f64::NEG_INFINITY;

pub(super) fn train(
    words: &HashMap<String, f64>,
    budget: usize,
    chars: &BTreeSet<char>,
) -> Result<SubwordModel> {
    // Deterministic word order.
    let mut word_list: Vec<(&str, f64)> = words.iter().map(|(w, &c)| (w.as_str(), c)).collect();
    word_list.sort_by(|a, b| a.0.cmp(b.0));

    // Seed: all substrings up to MAX_PIECE_CHARS, scored by occurrence count.
    let mut substring_counts: HashMap<String, f64> = HashMap::new();
    for (word, count) in &word_list {
        let cs: Vec<char> = word.chars().collect();
        for start in 0..cs.len() {
            for len in 1..=MAX_PIECE_CHARS.min(cs.len() - start) {
                let sub: String = cs[start..start + len].iter().collect();
                *substring_counts.entry(sub).or_insert(0.0) += count;
            }
        }
    }
    let mut multi: Vec<(String, f64)> = substring_counts
        .iter()
        .filter(|(s, _)| s.chars().count() > 1)
        .map(|(s, &c)| (s.clone(), c))
        .collect();
    // Keep the most frequent seed candidates; ties break lexicographically.
    multi.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let seed_cap = (budget * SEED_FACTOR).saturating_sub(chars.len()).max(1);
    multi.truncate(seed_cap);

    let mut pieces: Vec<(String, f64)> = chars
        .iter()
        .map(|&c| {
            let s = c.to_string();
            let count = substring_counts.get(&s).copied().unwrap_or(1.0);
            (s, count)
        })
        .collect();
    pieces.extend(multi);
    normalize_scores(&mut pieces);

    // Alternate EM and pruning until the budget is met, then settle scores.
    loop {
        for _ in 0..EM_ITERS {
            em_step(&mut pieces, &word_list);
        }
        if pieces.len() <= budget {
            break;
        }
        prune(&mut pieces, budget, chars);
    }
    em_step(&mut pieces, &word_list);

    pieces.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });
    SubwordModel::new(super::Algorithm::UnigramLm, pieces, Vec::new())
}

/// Turn raw counts into log-probabilities.
fn normalize_scores(pieces: &mut [(String, f64)]) {
    let total: f64 = pieces.iter().map(|(_, c)| c).sum();
    for (_, score) in pieces.iter_mut() {
        *score = (*score / total).max(f64::MIN_POSITIVE).ln();
    }
}

/// One EM iteration: expected piece counts from the forward-backward
/// marginals of every word's segmentation lattice, then re-estimate scores.
fn em_step(pieces: &mut Vec<(String, f64)>, words: &[(&str, f64)]) {
    let ids: HashMap<&str, usize> = pieces
        .iter()
        .enumerate()
        .map(|(i, (s, _))| (s.as_str(), i))
        .collect();
    let mut expected = vec![0.0f64; pieces.len()];
    for (word, count) in words {
        let cs: Vec<char> = word.chars().collect();
        let n = cs.len();
        // Outgoing lattice edges per start position: (end, piece idx, score).
        let mut edges: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); n];
        for (start, bucket) in edges.iter_mut().enumerate() {
            for len in 1..=MAX_PIECE_CHARS.min(n - start) {
                let sub: String = cs[start..start + len].iter().collect();
                if let Some(&pid) = ids.get(sub.as_str()) {
                    bucket.push((start + len, pid, pieces[pid].1));
                }
            }
        }
        let mut alpha = vec![NEG_INF; n + 1];
        alpha[0] = 0.0;
        for pos in 0..n {
            if alpha[pos] == NEG_INF {
                continue;
            }
            for &(end, _, score) in &edges[pos] {
                alpha[end] = log_add(alpha[end], alpha[pos] + score);
            }
        }
        let mut beta = vec![NEG_INF; n + 1];
        beta[n] = 0.0;
        for pos in (0..n).rev() {
            for &(end, _, score) in &edges[pos] {
                beta[pos] = log_add(beta[pos], score + beta[end]);
            }
        }
        let z = alpha[n];
        if z == NEG_INF {
            continue; // uncoverable word; chars guarantee this never happens
        }
        for (start, bucket) in edges.iter().enumerate() {
            for &(end, pid, score) in bucket {
                let posterior = (alpha[start] + score + beta[end] - z).exp();
                expected[pid] += count * posterior;
            }
        }
    }
    for ((_, score), &count) in pieces.iter_mut().zip(&expected) {
        *score = count;
    }
    normalize_scores(pieces);
}

/// Drop the lowest-scoring multi-char pieces, 20% per round, never below the
/// budget midpoint and never any single character.
fn prune(pieces: &mut Vec<(String, f64)>, budget: usize, chars: &BTreeSet<char>) {
    let multi_count = pieces.len() - chars.len();
    let target_multi = budget.saturating_sub(chars.len());
    let drop = ((multi_count as f64 * PRUNE_FRACTION) as usize)
        .max(1)
        .min(multi_count.saturating_sub(target_multi));
    if drop == 0 {
        return;
    }
    let mut multi: Vec<(String, f64)> = pieces
        .iter()
        .filter(|(s, _)| s.chars().count() > 1)
        .cloned()
        .collect();
    multi.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap()
            .then_with(|| b.0.cmp(&a.0))
    });
    let dropped: BTreeSet<String> = multi.into_iter().take(drop).map(|(s, _)| s).collect();
    pieces.retain(|(s, _)| !dropped.contains(s));
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Viterbi segmentation: the piece sequence maximizing the sum of scores.
/// Characters without any covering piece become single-char `[UNK]`s.
pub(super) fn segment(
    word: &str,
    pieces: &[(String, f64)],
    piece_ids: &HashMap<String, u32>,
) -> Vec<Segment> {
    let scores: HashMap<&str, f64> = pieces.iter().map(|(s, c)| (s.as_str(), *c)).collect();
    let cs: Vec<char> = word.chars().collect();
    let n = cs.len();
    const UNK_PENALTY: f64 = -1e9;
    // best[pos] = (score, back pointer, piece chars, piece id)
    let mut best: Vec<Option<(f64, usize, usize, u32)>> = vec![None; n + 1];
    best[0] = Some((0.0, 0, 0, 0));
    for pos in 0..n {
        let Some((acc, _, _, _)) = best[pos] else { continue };
        let mut any = false;
        for len in 1..=MAX_PIECE_CHARS.min(n - pos) {
            let sub: String = cs[pos..pos + len].iter().collect();
            if let Some(&score) = scores.get(sub.as_str()) {
                any = true;
                let cand = acc + score;
                let id = piece_ids[&sub];
                if best[pos + len].map_or(true, |(s, _, _, _)| cand > s) {
                    best[pos + len] = Some((cand, pos, len, id));
                }
            }
        }
        if !any {
            // Unknown character: forced single-char UNK edge.
            let cand = acc + UNK_PENALTY;
            if best[pos + 1].map_or(true, |(s, _, _, _)| cand > s) {
                best[pos + 1] = Some((cand, pos, 1, UNK_ID));
            }
        }
    }
    let mut segs = Vec::new();
    let mut pos = n;
    while pos > 0 {
        let (_, back, len, id) = best[pos].expect("lattice covers every prefix");
        segs.push(Segment { id, char_len: len });
        pos = back;
    }
    segs.reverse();
    segs
}

/// Total Viterbi log-likelihood of a corpus under a trained model; the
/// training oracle compares this against a character-level baseline.
pub fn viterbi_corpus_ll(vocab: &super::Vocabulary, sentences: &[String]) -> f64 {
    let scores: HashMap<&str, f64> = vocab
        .model()
        .pieces
        .iter()
        .map(|(s, c)| (s.as_str(), *c))
        .collect();
    let mut total = 0.0;
    for sentence in sentences {
        for (id, s, e) in vocab.tokenize_with_offsets(sentence) {
            let _ = (s, e);
            if let Some(surface) = vocab.surface(id) {
                total += scores.get(surface).copied().unwrap_or(-1e9);
            }
        }
    }
    total
}
