//! Synthetic-language generator: a small template grammar with subject-verb
//! agreement and topic-word classes, plus lexical-cipher transforms.
//!
//! One generator feeds three protocols: topic classification (the label is a
//! function of word types, so it survives ciphering), agreement minimal
//! pairs, and the transfer experiments (the cipher produces an isomorphic
//! second language with a disjoint surface vocabulary; the reverse-order
//! variant additionally reverses within-sentence word order).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClsExample, Corpus};
use crate::error::{Error, Result};
use crate::evalprobe::MinimalPair;
use crate::tokenize::LanguageId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthTransform {
    Identity,
    LexicalCipher,
    LexicalCipherReverse,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub transform: SynthTransform,
    pub seed: u64,
    /// Sentences per document; documents are topic-coherent.
    #[serde(default = "default_doc_len")]
    pub sentences_per_doc: usize,
}

fn default_doc_len() -> usize {
    6
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            transform: SynthTransform::LexicalCipher,
            seed: 0,
            sentences_per_doc: default_doc_len(),
        }
    }
}

/// The template grammar: word inventories plus the agreement rule. Number of
/// topics doubles as the classification label arity.
#[derive(Clone, Debug)]
pub struct Grammar {
    pub determiners: Vec<String>,
    /// (singular, plural) subject noun pairs.
    pub subjects: Vec<(String, String)>,
    /// (singular, plural) verb pairs; the verb agrees with the subject.
    pub verbs: Vec<(String, String)>,
    /// Object nouns per topic class.
    pub topics: Vec<Vec<String>>,
    pub adverbs: Vec<String>,
}

const CONSONANTS_L1: [&str; 10] = ["b", "d", "g", "k", "l", "m", "n", "p", "r", "t"];
const CONSONANTS_L2: [&str; 10] = ["v", "w", "x", "z", "f", "s", "c", "h", "j", "q"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic CV-syllable word factory over a consonant alphabet.
fn make_words(n: usize, syllables: usize, consonants: &[&str], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(consonants[rng.gen_range(0..consonants.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Grammar {
    /// Build the default grammar: 2 determiners, 12 subject pairs, 10 verb
    /// pairs, 4 topics x 8 objects, 6 adverbs.
    pub fn build(seed: u64) -> Grammar {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5941_7468);
        let mut pool = make_words(2 + 24 + 20 + 32 + 6, 2, &CONSONANTS_L1, &mut rng);
        let mut take = |n: usize| -> Vec<String> { pool.drain(..n).collect() };
        let determiners = take(2);
        let subj_flat = take(24);
        let subjects = subj_flat
            .chunks(2)
            .map(|c| (c[0].clone(), c[1].clone()))
            .collect();
        let verb_flat = take(20);
        let verbs = verb_flat
            .chunks(2)
            .map(|c| (c[0].clone(), c[1].clone()))
            .collect();
        let obj_flat = take(32);
        let topics = obj_flat.chunks(8).map(|c| c.to_vec()).collect();
        let adverbs = take(6);
        Grammar {
            determiners,
            subjects,
            verbs,
            topics,
            adverbs,
        }
    }

    pub fn n_topics(&self) -> usize {
        self.topics.len()
    }

    /// Every surface form, sorted; the cipher domain.
    pub fn word_types(&self) -> Vec<String> {
        let mut all = BTreeSet::new();
        all.extend(self.determiners.iter().cloned());
        for (s, p) in &self.subjects {
            all.insert(s.clone());
            all.insert(p.clone());
        }
        for (s, p) in &self.verbs {
            all.insert(s.clone());
            all.insert(p.clone());
        }
        for t in &self.topics {
            all.extend(t.iter().cloned());
        }
        all.extend(self.adverbs.iter().cloned());
        all.into_iter().collect()
    }

    /// Sample one grammatical sentence with the given topic:
    /// `DET SUBJ VERB DET OBJ [ADV]`, verb agreeing with subject number.
    fn sample_sentence(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let plural = rng.gen_bool(0.5);
        let det1 = &self.determiners[rng.gen_range(0..self.determiners.len())];
        let det2 = &self.determiners[rng.gen_range(0..self.determiners.len())];
        let subj_pair = &self.subjects[rng.gen_range(0..self.subjects.len())];
        let verb_pair = &self.verbs[rng.gen_range(0..self.verbs.len())];
        let subj = if plural { &subj_pair.1 } else { &subj_pair.0 };
        let verb = if plural { &verb_pair.1 } else { &verb_pair.0 };
        let obj = &self.topics[topic][rng.gen_range(0..self.topics[topic].len())];
        let mut words = vec![
            det1.as_str(),
            subj.as_str(),
            verb.as_str(),
            det2.as_str(),
            obj.as_str(),
        ];
        let adv;
        if rng.gen_bool(0.5) {
            adv = self.adverbs[rng.gen_range(0..self.adverbs.len())].clone();
            words.push(adv.as_str());
        }
        words.join(" ")
    }

    /// Topic label of a sentence: the class of its object word. `None` when
    /// no word belongs to any topic class (out-of-grammar input).
    pub fn classify(&self, sentence: &str) -> Option<usize> {
        for word in sentence.split_whitespace() {
            for (t, objects) in self.topics.iter().enumerate() {
                if objects.iter().any(|o| o == word) {
                    return Some(t);
                }
            }
        }
        None
    }

    /// Apply a word-type bijection to every inventory, yielding the ciphered
    /// language's grammar (labels on ciphered text come from this).
    pub fn apply_cipher(&self, cipher: &BTreeMap<String, String>) -> Grammar {
        let m = |w: &String| cipher[w].clone();
        Grammar {
            determiners: self.determiners.iter().map(m).collect(),
            subjects: self
                .subjects
                .iter()
                .map(|(s, p)| (m(s), m(p)))
                .collect(),
            verbs: self.verbs.iter().map(|(s, p)| (m(s), m(p))).collect(),
            topics: self
                .topics
                .iter()
                .map(|t| t.iter().map(m).collect())
                .collect(),
            adverbs: self.adverbs.iter().map(m).collect(),
        }
    }

    /// Agreement minimal pairs: flip the verb's number. The two sentences
    /// differ in exactly one whitespace word.
    pub fn minimal_pairs(&self, n: usize, seed: u64) -> Vec<MinimalPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d50_4152);
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let plural = rng.gen_bool(0.5);
            let det1 = &self.determiners[rng.gen_range(0..self.determiners.len())];
            let det2 = &self.determiners[rng.gen_range(0..self.determiners.len())];
            let subj_pair = &self.subjects[rng.gen_range(0..self.subjects.len())];
            let verb_pair = &self.verbs[rng.gen_range(0..self.verbs.len())];
            let topic = rng.gen_range(0..self.topics.len());
            let obj = &self.topics[topic][rng.gen_range(0..self.topics[topic].len())];
            let subj = if plural { &subj_pair.1 } else { &subj_pair.0 };
            let (good_verb, bad_verb) = if plural {
                (&verb_pair.1, &verb_pair.0)
            } else {
                (&verb_pair.0, &verb_pair.1)
            };
            let make = |verb: &str| format!("{det1} {subj} {verb} {det2} {obj}");
            let category = if plural {
                "agreement-plural-subject"
            } else {
                "agreement-singular-subject"
            };
            pairs.push(MinimalPair {
                grammatical: make(good_verb),
                ungrammatical: make(bad_verb),
                category: category.to_string(),
            });
        }
        pairs
    }
}

/// Generator output: the source corpus, and for cipher transforms the paired
/// second-language corpus plus the ground-truth word-type bijection.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub grammar: Grammar,
    pub l1: Corpus,
    pub l2: Option<Corpus>,
    pub l2_grammar: Option<Grammar>,
    pub cipher: Option<BTreeMap<String, String>>,
}

impl SynthData {
    /// Labeled classification examples straight from the generator; labels
    /// recomputed from the given side's grammar.
    pub fn classification_examples(&self, l2: bool) -> Vec<ClsExample> {
        let (corpus, grammar) = if l2 {
            (
                self.l2.as_ref().expect("no L2 corpus"),
                self.l2_grammar.as_ref().expect("no L2 grammar"),
            )
        } else {
            (&self.l1, &self.grammar)
        };
        corpus
            .sentences()
            .filter_map(|s| {
                grammar.classify(s).map(|label| ClsExample {
                    text_a: s.to_string(),
                    text_b: None,
                    label,
                })
            })
            .collect()
    }
}

/// Generate `n_sentences` grouped into topic-coherent documents, then apply
/// the configured transform.
pub fn generate_synthetic(spec: &SynthSpec, n_sentences: usize) -> Result<SynthData> {
    if n_sentences == 0 {
        return Err(Error::config("n_sentences must be positive"));
    }
    if spec.sentences_per_doc == 0 {
        return Err(Error::config("sentences_per_doc must be positive"));
    }
    let grammar = Grammar::build(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut documents = Vec::new();
    let mut produced = 0;
    while produced < n_sentences {
        let topic = rng.gen_range(0..grammar.n_topics());
        let len = spec.sentences_per_doc.min(n_sentences - produced);
        let doc: Vec<String> = (0..len)
            .map(|_| grammar.sample_sentence(topic, &mut rng))
            .collect();
        produced += doc.len();
        documents.push(doc);
    }
    let l1 = Corpus::new(LanguageId::new("L1")?, documents)?;

    match spec.transform {
        SynthTransform::Identity => {
            let mut l2 = l1.clone();
            l2.language = LanguageId::new("L2")?;
            Ok(SynthData {
                l2: Some(l2),
                l2_grammar: Some(grammar.clone()),
                cipher: None,
                grammar,
                l1,
            })
        }
        SynthTransform::LexicalCipher | SynthTransform::LexicalCipherReverse => {
            let reverse = spec.transform == SynthTransform::LexicalCipherReverse;
            let word_types = grammar.word_types();
            let mut cipher_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xC1F3_12AB);
            let targets = make_words(word_types.len(), 3, &CONSONANTS_L2, &mut cipher_rng);
            let cipher: BTreeMap<String, String> = word_types
                .iter()
                .cloned()
                .zip(targets)
                .collect();
            // Bijection onto disjoint surfaces, by construction; assert it.
            let sources: BTreeSet<&String> = cipher.keys().collect();
            let images: BTreeSet<&String> = cipher.values().collect();
            if images.len() != cipher.len() || !sources.is_disjoint(&images) {
                return Err(Error::Validation(
                    "cipher is not a surface-disjoint bijection".into(),
                ));
            }
            let documents = l1
                .documents
                .iter()
                .map(|doc| {
                    doc.iter()
                        .map(|s| cipher_sentence(s, &cipher, reverse))
                        .collect()
                })
                .collect();
            let l2 = Corpus::new(LanguageId::new("L2")?, documents)?;
            Ok(SynthData {
                l2: Some(l2),
                l2_grammar: Some(grammar.apply_cipher(&cipher)),
                cipher: Some(cipher),
                grammar,
                l1,
            })
        }
    }
}

fn cipher_sentence(sentence: &str, cipher: &BTreeMap<String, String>, reverse: bool) -> String {
    let mut words: Vec<&str> = sentence
        .split_whitespace()
        .map(|w| cipher.get(w).map(|c| c.as_str()).unwrap_or(w))
        .collect();
    if reverse {
        words.reverse();
    }
    words.join(" ")
}

/// Sidecar cipher-map format: `source<TAB>target` per line.
pub fn save_cipher_map(cipher: &BTreeMap<String, String>, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (src, dst) in cipher {
        writeln!(f, "{src}\t{dst}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_transform_duplicates_the_corpus() {
        let spec = SynthSpec {
            transform: SynthTransform::Identity,
            seed: 1,
            sentences_per_doc: 4,
        };
        let data = generate_synthetic(&spec, 40).unwrap();
        let l2 = data.l2.unwrap();
        assert_eq!(data.l1.documents, l2.documents);
    }

    #[test]
    fn cipher_surfaces_are_disjoint_from_the_source() {
        let spec = SynthSpec {
            transform: SynthTransform::LexicalCipher,
            seed: 2,
            sentences_per_doc: 5,
        };
        let data = generate_synthetic(&spec, 100).unwrap();
        let l1_words: BTreeSet<String> = data
            .l1
            .sentences()
            .flat_map(|s| s.split_whitespace().map(str::to_string))
            .collect();
        let l2_words: BTreeSet<String> = data
            .l2
            .as_ref()
            .unwrap()
            .sentences()
            .flat_map(|s| s.split_whitespace().map(str::to_string))
            .collect();
        assert!(l1_words.is_disjoint(&l2_words));
    }

    #[test]
    fn labels_survive_the_cipher() {
        // label(s) == label(cipher(s)), recomputed through the bijection.
        let spec = SynthSpec {
            transform: SynthTransform::LexicalCipher,
            seed: 3,
            sentences_per_doc: 5,
        };
        let data = generate_synthetic(&spec, 200).unwrap();
        let l2 = data.l2.as_ref().unwrap();
        let l2_grammar = data.l2_grammar.as_ref().unwrap();
        for (s1, s2) in data.l1.sentences().zip(l2.sentences()) {
            let label1 = data.grammar.classify(s1);
            let label2 = l2_grammar.classify(s2);
            assert!(label1.is_some());
            assert_eq!(label1, label2, "{s1} vs {s2}");
        }
    }

    #[test]
    fn reverse_variant_reverses_word_order_after_ciphering() {
        let base = SynthSpec {
            transform: SynthTransform::LexicalCipher,
            seed: 4,
            sentences_per_doc: 5,
        };
        let reversed = SynthSpec {
            transform: SynthTransform::LexicalCipherReverse,
            ..base.clone()
        };
        let plain = generate_synthetic(&base, 30).unwrap();
        let rev = generate_synthetic(&reversed, 30).unwrap();
        for (a, b) in plain
            .l2
            .as_ref()
            .unwrap()
            .sentences()
            .zip(rev.l2.as_ref().unwrap().sentences())
        {
            let mut a_words: Vec<&str> = a.split_whitespace().collect();
            a_words.reverse();
            let b_words: Vec<&str> = b.split_whitespace().collect();
            assert_eq!(a_words, b_words);
        }
    }

    #[test]
    fn rejects_zero_sentences() {
        assert!(generate_synthetic(&SynthSpec::default(), 0).is_err());
    }

    #[test]
    fn minimal_pairs_differ_in_exactly_one_word() {
        let grammar = Grammar::build(9);
        for pair in grammar.minimal_pairs(50, 1) {
            let a: Vec<&str> = pair.grammatical.split_whitespace().collect();
            let b: Vec<&str> = pair.ungrammatical.split_whitespace().collect();
            assert_eq!(a.len(), b.len());
            let diffs = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            assert_eq!(diffs, 1, "{pair:?}");
        }
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let spec = SynthSpec {
            transform: SynthTransform::LexicalCipher,
            seed: 11,
            sentences_per_doc: 5,
        };
        let a = generate_synthetic(&spec, 60).unwrap();
        let b = generate_synthetic(&spec, 60).unwrap();
        assert_eq!(a.l1.documents, b.l1.documents);
        assert_eq!(a.l2.unwrap().documents, b.l2.unwrap().documents);
    }
}
