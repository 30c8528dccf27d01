//! Skip-gram with negative sampling over tokenized sentences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::WordEmbeddings;
use crate::error::{Error, Result};
use crate::tokenize::LanguageId;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

/// Train SGNS input vectors; also returns the per-epoch mean pair loss so
/// callers can verify the objective decreases.
pub fn train_skipgram(
    sentences: &[Vec<String>],
    language: LanguageId,
    config: &SkipGramConfig,
) -> Result<(WordEmbeddings, Vec<f64>)> {
    if config.dim == 0 || config.epochs == 0 {
        return Err(Error::config("dim and epochs must be positive"));
    }
    // Vocabulary ordered by (count desc, surface asc) for determinism.
    let mut counts: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for sentence in sentences {
        for w in sentence {
            *counts.entry(w.as_str()).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = counts.into_iter().collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let words: Vec<String> = vocab.iter().map(|(w, _)| w.to_string()).collect();
    if words.len() < config.negatives + 1 {
        return Err(Error::config(format!(
            "vocabulary of {} types cannot support {} negatives",
            words.len(),
            config.negatives
        )));
    }
    let index: std::collections::HashMap<&str, usize> = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();

    // Unigram^0.75 cumulative table for negative draws.
    let powered: Vec<f64> = vocab.iter().map(|(_, c)| (*c as f64).powf(0.75)).collect();
    let total: f64 = powered.iter().sum();
    let mut cumulative = Vec::with_capacity(powered.len());
    let mut acc = 0.0;
    for p in &powered {
        acc += p / total;
        cumulative.push(acc);
    }

    let v = words.len();
    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input: Vec<f64> = (0..v * dim)
        .map(|_| (rng.gen::<f64>() - 0.5) / dim as f64)
        .collect();
    let mut output = vec![0.0f64; v * dim];

    let encoded: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.iter().map(|w| index[w.as_str()]).collect())
        .collect();

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate * (1.0 - epoch as f64 / config.epochs as f64).max(0.1);
        let mut loss_sum = 0.0f64;
        let mut pairs = 0usize;
        for sentence in &encoded {
            for (i, &center) in sentence.iter().enumerate() {
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window + 1).min(sentence.len());
                for j in lo..hi {
                    if j == i {
                        continue;
                    }
                    let ctx = sentence[j];
                    loss_sum += sgns_update(&mut input, &mut output, center, ctx, true, dim, lr);
                    pairs += 1;
                    for _ in 0..config.negatives {
                        let neg = loop {
                            let draw: f64 = rng.gen();
                            let k = cumulative.partition_point(|&c| c < draw).min(v - 1);
                            if k != ctx {
                                break k;
                            }
                        };
                        loss_sum +=
                            sgns_update(&mut input, &mut output, center, neg, false, dim, lr);
                        pairs += 1;
                    }
                }
            }
        }
        epoch_losses.push(if pairs == 0 {
            0.0
        } else {
            loss_sum / pairs as f64
        });
    }

    let embeddings = WordEmbeddings::new(language, words, dim, input)?;
    Ok((embeddings, epoch_losses))
}

/// One SGNS pair update; returns the pair's logistic loss before the step.
fn sgns_update(
    input: &mut [f64],
    output: &mut [f64],
    center: usize,
    context: usize,
    positive: bool,
    dim: usize,
    lr: f64,
) -> f64 {
    let (ci, co) = (center * dim, context * dim);
    let mut z = 0.0;
    for k in 0..dim {
        z += input[ci + k] * output[co + k];
    }
    let p = 1.0 / (1.0 + (-z).exp());
    let label = if positive { 1.0 } else { 0.0 };
    let g = (p - label) * lr;
    for k in 0..dim {
        let in_old = input[ci + k];
        input[ci + k] -= g * output[co + k];
        output[co + k] -= g * in_old;
    }
    if positive {
        -p.max(1e-12).ln()
    } else {
        -(1.0 - p).max(1e-12).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(tag: &str) -> LanguageId {
        LanguageId::new(tag).unwrap()
    }

    fn tok(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn paper_dimensionalities_are_accepted() {
        let sentences: Vec<Vec<String>> = (0..30)
            .map(|i| tok(&format!("w{} w{} w{}", i % 7, (i + 1) % 7, (i + 2) % 7)))
            .collect();
        for dim in [300usize, 768] {
            let config = SkipGramConfig {
                dim,
                epochs: 1,
                ..SkipGramConfig::default()
            };
            let (emb, _) = train_skipgram(&sentences, lang("L1"), &config).unwrap();
            assert_eq!(emb.dim, dim);
        }
    }

    #[test]
    fn objective_decreases_over_epochs() {
        let mut sentences = Vec::new();
        for i in 0..60 {
            sentences.push(tok(&format!("a{} b{} c{}", i % 5, i % 5, (i + 1) % 5)));
        }
        let config = SkipGramConfig {
            dim: 16,
            window: 2,
            negatives: 3,
            epochs: 5,
            learning_rate: 0.05,
            seed: 3,
        };
        let (_, losses) = train_skipgram(&sentences, lang("L1"), &config).unwrap();
        assert_eq!(losses.len(), 5);
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "losses {losses:?}"
        );
    }

    #[test]
    fn distributionally_identical_tokens_align() {
        // "x" and "y" share exactly the contexts {p, q}; their vectors end
        // up nearly parallel.
        let mut sentences = Vec::new();
        for i in 0..200 {
            let target = if i % 2 == 0 { "x" } else { "y" };
            sentences.push(tok(&format!("p {target} q")));
            sentences.push(tok(&format!("f{} g{}", i % 11, (i + 3) % 11)));
        }
        let config = SkipGramConfig {
            dim: 16,
            window: 1,
            negatives: 4,
            epochs: 8,
            learning_rate: 0.08,
            seed: 5,
        };
        let (emb, _) = train_skipgram(&sentences, lang("L1"), &config).unwrap();
        let sim = super::super::cosine(emb.vector("x").unwrap(), emb.vector("y").unwrap());
        assert!(sim > 0.9, "cos(x, y) = {sim}");
    }

    #[test]
    fn seeded_rerun_is_bit_identical() {
        let sentences: Vec<Vec<String>> = (0..40)
            .map(|i| tok(&format!("w{} w{} w{}", i % 9, (i + 2) % 9, (i + 4) % 9)))
            .collect();
        let config = SkipGramConfig {
            dim: 8,
            epochs: 2,
            seed: 11,
            ..SkipGramConfig::default()
        };
        let (a, la) = train_skipgram(&sentences, lang("L1"), &config).unwrap();
        let (b, lb) = train_skipgram(&sentences, lang("L1"), &config).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert_eq!(la, lb);
    }

    #[test]
    fn tiny_vocabulary_is_rejected() {
        let sentences = vec![tok("a b"), tok("b a")];
        let config = SkipGramConfig {
            negatives: 5,
            ..SkipGramConfig::default()
        };
        assert!(matches!(
            train_skipgram(&sentences, lang("L1"), &config),
            Err(Error::Config(_))
        ));
    }
}
