//! Subword vocabularies: learning, segmentation, and the on-disk format.
//!
//! Two trainers sit behind one interface: a unigram language model
//! (EM-estimated piece scores, Viterbi decoding) and byte-pair encoding
//! (greedy merges). Every vocabulary shares the same five special symbols at
//! indices 0-4, whatever the language, so swapping lexicons never moves
//! `[CLS]`/`[SEP]`/`[MASK]`/`[PAD]`/`[UNK]`.
//!
//! Whitespace is encoded with a leading word-boundary marker (`▁`) on
//! word-initial pieces; no lowercasing or other normalization is applied.

mod bpe;
mod unigram;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Word-boundary marker prepended to each whitespace-separated word.
pub const WORD_MARKER: char = '\u{2581}';

/// The five shared special symbols, in index order.
pub const SPECIALS: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const PAD_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

/// Opaque language tag ("L1", "en", "cipher-a", ...). Nonempty.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(tag: impl Into<String>) -> Result<Self> {
        let tag = tag.into();
        if tag.is_empty() {
            return Err(Error::config("language id must be nonempty"));
        }
        Ok(LanguageId(tag))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Which language a vocabulary serves: one language, or a joint inventory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VocabScope {
    Lang(LanguageId),
    Joint,
}

impl fmt::Display for VocabScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabScope::Lang(l) => f.write_str(l.as_str()),
            VocabScope::Joint => f.write_str("JOINT"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    UnigramLm,
    Bpe,
}

/// A trained subword inventory: piece surfaces with scores, plus the ordered
/// merge list when trained with BPE.
#[derive(Clone, Debug, PartialEq)]
pub struct SubwordModel {
    pub algorithm: Algorithm,
    /// (surface, score); unigram scores are log-probabilities.
    pub pieces: Vec<(String, f64)>,
    /// BPE only, in learned order.
    pub merges: Vec<(String, String)>,
}

impl SubwordModel {
    pub fn new(
        algorithm: Algorithm,
        pieces: Vec<(String, f64)>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (surface, score) in &pieces {
            if !seen.insert(surface.as_str()) {
                return Err(Error::Validation(format!("duplicate piece `{surface}`")));
            }
            if !score.is_finite() {
                return Err(Error::Validation(format!(
                    "piece `{surface}` has non-finite score {score}"
                )));
            }
            if SPECIALS.contains(&surface.as_str()) {
                return Err(Error::Validation(format!(
                    "piece `{surface}` collides with a special symbol"
                )));
            }
        }
        Ok(SubwordModel {
            algorithm,
            pieces,
            merges,
        })
    }
}

/// Learn a subword model from a corpus of sentences.
///
/// The model covers every character seen in the corpus (single-character
/// pieces are always retained), and the piece count never exceeds
/// `size - 5`, leaving room for the specials.
pub fn learn_vocab(sentences: &[String], size: usize, algorithm: Algorithm) -> Result<SubwordModel> {
    let weighted: Vec<(f64, &str)> = sentences.iter().map(|s| (1.0, s.as_str())).collect();
    learn_vocab_weighted(&weighted, size, algorithm)
}

/// Weighted variant used by joint-vocabulary learning: each sentence counts
/// with the given multiplicity.
pub fn learn_vocab_weighted(
    sentences: &[(f64, &str)],
    size: usize,
    algorithm: Algorithm,
) -> Result<SubwordModel> {
    if sentences.is_empty() {
        return Err(Error::config("cannot learn a vocabulary from an empty corpus"));
    }
    let words = word_counts(sentences);
    if words.is_empty() {
        return Err(Error::config("corpus contains no words"));
    }
    let chars: BTreeSet<char> = words.keys().flat_map(|w| w.chars()).collect();
    if size <= NUM_SPECIALS + chars.len() {
        return Err(Error::config(format!(
            "vocab size {size} cannot cover {} distinct characters plus {NUM_SPECIALS} specials",
            chars.len()
        )));
    }
    let budget = size - NUM_SPECIALS;
    match algorithm {
        Algorithm::Bpe => bpe::train(&words, budget, &chars),
        Algorithm::UnigramLm => unigram::train(&words, budget, &chars),
    }
}

/// Marked-word multiset of a weighted corpus.
fn word_counts(sentences: &[(f64, &str)]) -> HashMap<String, f64> {
    let mut counts: HashMap<String, f64> = HashMap::new();
    for (weight, sentence) in sentences {
        for word in sentence.split_whitespace() {
            let mut marked = String::with_capacity(word.len() + 3);
            marked.push(WORD_MARKER);
            marked.push_str(word);
            *counts.entry(marked).or_insert(0.0) += weight;
        }
    }
    counts
}

/// Build one shared vocabulary over several languages, weighting each
/// language's sentences by the upsampling distribution so smaller corpora
/// contribute proportionally more. With equal corpora the result equals the
/// monolingual vocabulary of the same size.
pub fn build_joint_vocab(
    corpora: &[(LanguageId, Vec<String>)],
    size: usize,
    alpha: f64,
    algorithm: Algorithm,
) -> Result<Vocabulary> {
    if corpora.len() < 2 {
        return Err(Error::config("joint vocabulary needs at least two languages"));
    }
    for (lang, sentences) in corpora {
        if sentences.is_empty() {
            return Err(Error::config(format!("language `{lang}` has an empty corpus")));
        }
    }
    let sizes: Vec<usize> = corpora.iter().map(|(_, s)| s.len()).collect();
    let probs = crate::data::upsample_distribution(&sizes, alpha)?;
    let total: usize = sizes.iter().sum();
    // Expected multiplicity of each language's sentences under q: weight
    // w_i = q_i * total / n_i, so language contributions are exactly
    // proportional to q rather than a stochastic draw.
    let mut weighted = Vec::new();
    for ((_, sentences), (&n, &q)) in corpora.iter().zip(sizes.iter().zip(&probs)) {
        let w = q * total as f64 / n as f64;
        for s in sentences {
            weighted.push((w, s.as_str()));
        }
    }
    let model = learn_vocab_weighted(&weighted, size, algorithm)?;
    Vocabulary::from_model(model, VocabScope::Joint)
}

/// A finalized vocabulary: the five specials at indices 0-4, then the
/// subword pieces at indices 5 and up.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    model: SubwordModel,
    scope: VocabScope,
    piece_ids: HashMap<String, u32>,
    merge_ranks: HashMap<(String, String), usize>,
}

impl Vocabulary {
    pub fn from_model(model: SubwordModel, scope: VocabScope) -> Result<Self> {
        let mut piece_ids = HashMap::with_capacity(model.pieces.len());
        for (i, (surface, _)) in model.pieces.iter().enumerate() {
            piece_ids.insert(surface.clone(), (NUM_SPECIALS + i) as u32);
        }
        let merge_ranks = model
            .merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        Ok(Vocabulary {
            model,
            scope,
            piece_ids,
            merge_ranks,
        })
    }

    /// Convenience: learn and finalize in one call.
    pub fn learn(
        sentences: &[String],
        size: usize,
        algorithm: Algorithm,
        scope: VocabScope,
    ) -> Result<Self> {
        Vocabulary::from_model(learn_vocab(sentences, size, algorithm)?, scope)
    }

    pub fn scope(&self) -> &VocabScope {
        &self.scope
    }

    pub fn model(&self) -> &SubwordModel {
        &self.model
    }

    /// Total size including the five specials.
    pub fn size(&self) -> usize {
        NUM_SPECIALS + self.model.pieces.len()
    }

    pub fn piece_id(&self, surface: &str) -> Option<u32> {
        if let Some(idx) = SPECIALS.iter().position(|s| *s == surface) {
            return Some(idx as u32);
        }
        self.piece_ids.get(surface).copied()
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        let id = id as usize;
        if id < NUM_SPECIALS {
            Some(SPECIALS[id])
        } else {
            self.model
                .pieces
                .get(id - NUM_SPECIALS)
                .map(|(s, _)| s.as_str())
        }
    }

    /// Ids of the regular (non-special) pieces: `5..size`.
    pub fn regular_ids(&self) -> std::ops::Range<u32> {
        NUM_SPECIALS as u32..self.size() as u32
    }

    /// Segment raw text into piece ids. Total: characters absent from the
    /// inventory map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenize_with_offsets(text)
            .into_iter()
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn tokenize_pieces(&self, text: &str) -> Vec<String> {
        self.tokenize(text)
            .iter()
            .map(|&id| self.surface(id).unwrap_or("[UNK]").to_string())
            .collect()
    }

    /// Segment with char offsets `[start, end)` into the original text. The
    /// word-boundary marker is attributed to the word's first character.
    pub fn tokenize_with_offsets(&self, text: &str) -> Vec<(u32, usize, usize)> {
        let mut out = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                i += 1;
                continue;
            }
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() {
                i += 1;
            }
            let word: String = std::iter::once(WORD_MARKER)
                .chain(chars[start..i].iter().copied())
                .collect();
            let segments = match self.model.algorithm {
                Algorithm::Bpe => bpe::segment(&word, &self.merge_ranks, &self.piece_ids),
                Algorithm::UnigramLm => unigram::segment(&word, &self.model.pieces, &self.piece_ids),
            };
            // Map piece char spans (which count the marker) back onto text:
            // the marker occupies zero width at the word start.
            let mut pos = 0usize; // position in the marked word, in chars
            for seg in segments {
                let text_start = start + pos.saturating_sub(1);
                let text_end = start + pos + seg.char_len - 1;
                out.push((seg.id, text_start, text_end));
                pos += seg.char_len;
            }
        }
        out
    }

    /// Inverse of `tokenize` modulo the whitespace convention: pieces are
    /// concatenated and word markers become single spaces.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            let surface = self.surface(id).unwrap_or("[UNK]");
            if (id as usize) < NUM_SPECIALS {
                continue;
            }
            s.push_str(surface);
        }
        let replaced = s.replace(WORD_MARKER, " ");
        replaced.trim_start().to_string()
    }

    // ---- file format -----------------------------------------------------

    /// The line-oriented `piece<TAB>score` format, specials first. BPE
    /// merges are appended as 3-field `#merge` lines.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for s in SPECIALS {
            out.push_str(s);
            out.push_str("\t0\n");
        }
        for (surface, score) in &self.model.pieces {
            out.push_str(&format!("{surface}\t{score}\n"));
        }
        for (a, b) in &self.model.merges {
            out.push_str(&format!("#merge\t{a}\t{b}\n"));
        }
        out.into_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, scope: VocabScope) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut pieces = Vec::new();
        let mut merges = Vec::new();
        let mut lines = f.lines();
        for expected in SPECIALS {
            let line = lines.next().transpose()?.ok_or_else(|| {
                Error::Validation(format!("vocabulary file truncated before `{expected}`"))
            })?;
            let surface = line.split('\t').next().unwrap_or("");
            if surface != expected {
                return Err(Error::Validation(format!(
                    "line for special `{expected}` reads `{surface}`; the first five lines must be the shared specials"
                )));
            }
        }
        let mut algorithm = Algorithm::UnigramLm;
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["#merge", a, b] => {
                    algorithm = Algorithm::Bpe;
                    merges.push((a.to_string(), b.to_string()));
                }
                [surface, score] => {
                    let score: f64 = score.parse().map_err(|_| {
                        Error::Validation(format!("bad score on line `{line}`"))
                    })?;
                    pieces.push((surface.to_string(), score));
                }
                _ => {
                    return Err(Error::Validation(format!(
                        "malformed vocabulary line `{line}`"
                    )))
                }
            }
        }
        let model = SubwordModel::new(algorithm, pieces, merges)?;
        Vocabulary::from_model(model, scope)
    }
}

/// One decoded segment of a marked word.
pub(crate) struct Segment {
    pub id: u32,
    /// Length in chars of the covered part of the *marked* word.
    pub char_len: usize,
}

#[cfg(test)]
mod tests;
