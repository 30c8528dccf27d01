//! SQuAD-v1.1-format ingestion, answer-span F1/EM scoring, and dataset
//! token statistics.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// One extractive QA example. Answer offsets are char (codepoint) indices
/// into the context, matching the JSON format's convention.
#[derive(Clone, Debug, PartialEq)]
pub struct QAExample {
    pub id: String,
    pub context: String,
    pub question: String,
    /// (answer text, char start offset) — text equals the context substring.
    pub answers: Vec<(String, usize)>,
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    answers: Vec<SquadAnswer>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// Parse a SQuAD v1.1 JSON file (`data -> paragraphs -> qas`) and validate
/// every answer offset against its context. All offending example ids are
/// reported together.
pub fn read_squad_json(path: &Path) -> Result<Vec<QAExample>> {
    let file: SquadFile = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(path)?,
    ))?;
    let mut examples = Vec::new();
    let mut bad_ids = Vec::new();
    for article in file.data {
        for paragraph in article.paragraphs {
            let context_chars: Vec<char> = paragraph.context.chars().collect();
            for qa in paragraph.qas {
                let mut answers = Vec::with_capacity(qa.answers.len());
                let mut valid = true;
                for ans in &qa.answers {
                    let len = ans.text.chars().count();
                    let slice: String = context_chars
                        .iter()
                        .skip(ans.answer_start)
                        .take(len)
                        .collect();
                    if slice != ans.text {
                        valid = false;
                    }
                    answers.push((ans.text.clone(), ans.answer_start));
                }
                if valid {
                    examples.push(QAExample {
                        id: qa.id,
                        context: paragraph.context.clone(),
                        question: qa.question,
                        answers,
                    });
                } else {
                    bad_ids.push(qa.id);
                }
            }
        }
    }
    if !bad_ids.is_empty() {
        return Err(Error::Validation(format!(
            "answer offsets do not match contexts for ids: {}",
            bad_ids.join(", ")
        )));
    }
    Ok(examples)
}

/// Scoring profile: which normalization applies before token comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LanguageProfile {
    /// Lowercase, strip punctuation, collapse whitespace, drop English
    /// articles, whitespace tokens.
    English,
    /// Same normalization without article removal.
    Whitespace,
    /// For scripts without whitespace: char-level token bags.
    Character,
}

fn normalize(text: &str, profile: LanguageProfile) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    match profile {
        LanguageProfile::Character => stripped
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        LanguageProfile::English => stripped
            .split_whitespace()
            .filter(|t| !matches!(*t, "a" | "an" | "the"))
            .map(str::to_string)
            .collect(),
        LanguageProfile::Whitespace => stripped
            .split_whitespace()
            .map(str::to_string)
            .collect(),
    }
}

/// Bag-of-tokens F1 and exact match, maxed over the gold answers. Both sides
/// go through the same normalizer, so EM = 1 implies F1 = 1.
pub fn squad_f1_em(
    prediction: &str,
    golds: &[String],
    profile: LanguageProfile,
) -> Result<(f64, f64)> {
    if golds.is_empty() {
        return Err(Error::contract("at least one gold answer is required"));
    }
    let pred_tokens = normalize(prediction, profile);
    let mut best_f1 = 0.0f64;
    let mut best_em = 0.0f64;
    for gold in golds {
        let gold_tokens = normalize(gold, profile);
        if pred_tokens == gold_tokens {
            best_em = 1.0;
        }
        let f1 = bag_f1(&pred_tokens, &gold_tokens);
        if f1 > best_f1 {
            best_f1 = f1;
        }
    }
    Ok((best_f1, best_em))
}

fn bag_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *gold_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = gold_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Per-field average token counts over a QA dataset.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TokenStats {
    /// Average over distinct paragraphs; absent when there are none.
    pub paragraph_avg: Option<f64>,
    pub question_avg: Option<f64>,
    pub answer_avg: Option<f64>,
    /// Which tokenizer produced the counts (recorded in output metadata).
    pub tokenizer: String,
}

/// Token statistics with whitespace tokens (or char tokens under the
/// character profile). Distinct paragraphs count once each.
pub fn corpus_token_stats(examples: &[QAExample], profile: LanguageProfile) -> TokenStats {
    let count = |text: &str| -> usize {
        match profile {
            LanguageProfile::Character => text.chars().filter(|c| !c.is_whitespace()).count(),
            _ => text.split_whitespace().count(),
        }
    };
    let mut seen = std::collections::BTreeSet::new();
    let mut para_counts = Vec::new();
    let mut question_counts = Vec::new();
    let mut answer_counts = Vec::new();
    for ex in examples {
        if seen.insert(ex.context.as_str()) {
            para_counts.push(count(&ex.context));
        }
        question_counts.push(count(&ex.question));
        for (text, _) in &ex.answers {
            answer_counts.push(count(text));
        }
    }
    let avg = |counts: &[usize]| -> Option<f64> {
        if counts.is_empty() {
            None
        } else {
            Some(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
        }
    };
    TokenStats {
        paragraph_avg: avg(&para_counts),
        question_avg: avg(&question_counts),
        answer_avg: avg(&answer_counts),
        tokenizer: match profile {
            LanguageProfile::Character => "character".into(),
            _ => "whitespace".into(),
        },
    }
}
