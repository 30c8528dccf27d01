//! Byte-pair encoding: greedy merge learning and merge-rank segmentation.

use std::collections::{BTreeSet, HashMap};

use super::{Segment, SubwordModel, UNK_ID};
use crate::error::Result;

/// Minimum weighted frequency for a pair to be merged.
const MIN_PAIR_COUNT: f64 = 2.0;

/// Learn merges over the marked-word multiset until the piece budget is
/// exhausted or no pair is frequent enough. Single characters are always
/// pieces, so every corpus character stays covered.
///
/// Ties between equally frequent pairs break lexicographically on the pair
/// surfaces, making training deterministic across platforms.
pub(super) fn train(
    words: &HashMap<String, f64>,
    budget: usize,
    chars: &BTreeSet<char>,
) -> Result<SubwordModel> {
    // Symbol sequences per word, in a fixed order for determinism.
    let mut entries: Vec<(Vec<String>, f64)> = {
        let mut sorted: Vec<(&String, &f64)> = words.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        sorted
            .into_iter()
            .map(|(w, &c)| (w.chars().map(String::from).collect(), c))
            .collect()
    };

    let mut merges: Vec<(String, String)> = Vec::new();
    let max_merges = budget - chars.len();
    while merges.len() < max_merges {
        let mut pair_counts: HashMap<(String, String), f64> = HashMap::new();
        for (symbols, count) in &entries {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0.0) += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|(_, c)| *c >= MIN_PAIR_COUNT)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.partial_cmp(cb)
                    .unwrap()
                    .then_with(|| pb.cmp(pa)) // lexicographically smaller pair wins ties
            });
        let Some((pair, _)) = best else { break };
        for (symbols, _) in &mut entries {
            merge_in_place(symbols, &pair);
        }
        merges.push(pair);
    }

    // Piece inventory: single chars first (coverage), then merged surfaces
    // in merge order. Scores rank pieces by creation order so earlier merges
    // score higher; chars sit above all merges.
    let mut pieces: Vec<(String, f64)> = chars
        .iter()
        .map(|&c| (c.to_string(), 0.0))
        .collect();
    for (i, (a, b)) in merges.iter().enumerate() {
        pieces.push((format!("{a}{b}"), -((i + 1) as f64)));
    }
    SubwordModel::new(super::Algorithm::Bpe, pieces, merges)
}

fn merge_in_place(symbols: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = merged;
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

/// Segment one marked word by replaying merges in rank order.
pub(super) fn segment(
    word: &str,
    merge_ranks: &HashMap<(String, String), usize>,
    piece_ids: &HashMap<String, u32>,
) -> Vec<Segment> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    loop {
        let mut best: Option<(usize, usize)> = None; // (rank, position)
        for i in 0..symbols.len().saturating_sub(1) {
            let key = (symbols[i].clone(), symbols[i + 1].clone());
            if let Some(&rank) = merge_ranks.get(&key) {
                if best.map_or(true, |(r, _)| rank < r) {
                    best = Some((rank, i));
                }
            }
        }
        let Some((_, i)) = best else { break };
        let merged = format!("{}{}", symbols[i], symbols[i + 1]);
        symbols[i] = merged;
        symbols.remove(i + 1);
    }
    symbols
        .into_iter()
        .map(|s| {
            let char_len = s.chars().count();
            match piece_ids.get(&s) {
                Some(&id) => Segment { id, char_len },
                None => Segment {
                    id: UNK_ID,
                    char_len,
                },
            }
        })
        .collect()
}
