use std::collections::{BTreeSet, HashMap};

use super::*;
use crate::tokenize::unigram::viterbi_corpus_ll;

fn lang(tag: &str) -> LanguageId {
    LanguageId::new(tag).unwrap()
}

fn sentences(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

// ---- brute-force merge-frequency oracle (independent of bpe.rs) -----------

/// Count adjacent-pair frequencies over marked words and return the winning
/// pair under the same (count desc, pair lexicographic asc) order.
fn oracle_best_pair(words: &HashMap<Vec<String>, f64>) -> Option<(String, String)> {
    let mut counts: HashMap<(String, String), f64> = HashMap::new();
    for (symbols, count) in words {
        for w in symbols.windows(2) {
            *counts.entry((w[0].clone(), w[1].clone())).or_insert(0.0) += count;
        }
    }
    counts
        .into_iter()
        .filter(|(_, c)| *c >= 2.0)
        .max_by(|(pa, ca), (pb, cb)| ca.partial_cmp(cb).unwrap().then_with(|| pb.cmp(pa)))
        .map(|(p, _)| p)
}

fn oracle_merge_all(words: &mut HashMap<Vec<String>, f64>, pair: &(String, String)) {
    let snapshot: Vec<(Vec<String>, f64)> = words.drain().collect();
    for (mut symbols, count) in snapshot {
        let mut i = 0;
        while i + 1 < symbols.len() {
            if symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
                symbols[i] = format!("{}{}", symbols[i], symbols[i + 1]);
                symbols.remove(i + 1);
            } else {
                i += 1;
            }
        }
        *words.entry(symbols).or_insert(0.0) += count;
    }
}

fn marked_symbol_words(corpus: &[String]) -> HashMap<Vec<String>, f64> {
    let mut words: HashMap<Vec<String>, f64> = HashMap::new();
    for s in corpus {
        for w in s.split_whitespace() {
            let symbols: Vec<String> = std::iter::once(WORD_MARKER)
                .chain(w.chars())
                .map(String::from)
                .collect();
            *words.entry(symbols).or_insert(0.0) += 1.0;
        }
    }
    words
}

#[test]
fn bpe_merges_match_the_frequency_oracle() {
    let corpus = sentences(&["abab", "abab"]);
    let model = learn_vocab(&corpus, 16, Algorithm::Bpe).unwrap();

    // Replay the oracle to derive the full expected merge sequence.
    let mut words = marked_symbol_words(&corpus);
    let mut expected_merges = Vec::new();
    while let Some(pair) = oracle_best_pair(&words) {
        oracle_merge_all(&mut words, &pair);
        expected_merges.push(pair);
    }
    assert_eq!(model.merges, expected_merges);
    // The dominant pair is (a, b): "ab" is learned first.
    assert_eq!(model.merges[0], ("a".to_string(), "b".to_string()));
    assert!(model.pieces.iter().any(|(s, _)| s == "ab"));

    let vocab = Vocabulary::from_model(model, VocabScope::Lang(lang("L1"))).unwrap();
    // Segmentation agrees with the oracle's fully merged word.
    let pieces = vocab.tokenize_pieces("abab");
    let (oracle_word, _) = words.iter().next().unwrap();
    assert_eq!(&pieces, oracle_word);
    assert_eq!(vocab.detokenize(&vocab.tokenize("abab")), "abab");
}

#[test]
fn single_repeated_char_needs_few_pieces() {
    let corpus = sentences(&["aaaa"]);
    let vocab = Vocabulary::learn(&corpus, 16, Algorithm::Bpe, VocabScope::Lang(lang("L1"))).unwrap();
    let ids = vocab.tokenize("aaaa");
    assert!(ids.len() <= 4, "{ids:?}");
    assert_eq!(vocab.detokenize(&ids), "aaaa");
}

#[test]
fn learn_vocab_rejects_sizes_below_the_character_set() {
    let corpus = sentences(&["abcdefgh"]);
    // 9 distinct chars incl. the marker; 5 specials; sizes up to 14 cannot
    // cover the character set.
    let err = learn_vocab(&corpus, 14, Algorithm::Bpe).unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)));
    assert!(learn_vocab(&corpus, 15, Algorithm::Bpe).is_ok());
}

#[test]
fn learn_vocab_rejects_empty_corpora() {
    assert!(learn_vocab(&[], 100, Algorithm::Bpe).is_err());
    assert!(learn_vocab(&sentences(&["   "]), 100, Algorithm::UnigramLm).is_err());
}

#[test]
fn unigram_beats_the_character_baseline() {
    // Character-unigram baseline oracle: segment everything into single
    // chars scored by their MLE log-probabilities over the marked corpus.
    let data = crate::data::generate_synthetic(
        &crate::data::SynthSpec {
            transform: crate::data::SynthTransform::Identity,
            seed: 5,
            sentences_per_doc: 5,
        },
        300,
    )
    .unwrap();
    let corpus = data.l1.sentences_owned();
    let vocab =
        Vocabulary::learn(&corpus, 400, Algorithm::UnigramLm, VocabScope::Lang(lang("L1"))).unwrap();

    let mut char_counts: HashMap<char, f64> = HashMap::new();
    let mut total = 0.0;
    for s in &corpus {
        for w in s.split_whitespace() {
            for c in std::iter::once(WORD_MARKER).chain(w.chars()) {
                *char_counts.entry(c).or_insert(0.0) += 1.0;
                total += 1.0;
            }
        }
    }
    let mut char_baseline = 0.0;
    for (_, count) in char_counts {
        char_baseline += count * (count / total).ln();
    }

    let model_ll = viterbi_corpus_ll(&vocab, &corpus);
    assert!(
        model_ll >= char_baseline,
        "viterbi LL {model_ll:.1} below char baseline {char_baseline:.1}"
    );
}

#[test]
fn viterbi_matches_exhaustive_enumeration_on_short_strings() {
    let corpus = sentences(&[
        "abc ab bc a b c abcabc",
        "ab abc bcbc aabb ccc",
        "cab bac abba",
    ]);
    let vocab =
        Vocabulary::learn(&corpus, 40, Algorithm::UnigramLm, VocabScope::Lang(lang("L1"))).unwrap();
    let scores: HashMap<&str, f64> = vocab
        .model()
        .pieces
        .iter()
        .map(|(s, c)| (s.as_str(), *c))
        .collect();

    // Exhaustive segmentation of a marked word: best total score.
    fn best_score(chars: &[char], scores: &HashMap<&str, f64>) -> Option<f64> {
        if chars.is_empty() {
            return Some(0.0);
        }
        let mut best = None;
        for len in 1..=chars.len() {
            let piece: String = chars[..len].iter().collect();
            if let Some(&s) = scores.get(piece.as_str()) {
                if let Some(rest) = best_score(&chars[len..], scores) {
                    let total = s + rest;
                    if best.map_or(true, |b: f64| total > b) {
                        best = Some(total);
                    }
                }
            }
        }
        best
    }

    for word in ["abc", "abcabc", "aabbcc", "cab", "abba", "abcabcabcab"] {
        assert!(word.chars().count() <= 12);
        let marked: Vec<char> = std::iter::once(WORD_MARKER).chain(word.chars()).collect();
        let expected = best_score(&marked, &scores).expect("coverable");
        let viterbi: f64 = vocab
            .tokenize_pieces(word)
            .iter()
            .map(|p| scores[p.as_str()])
            .sum();
        assert!(
            (viterbi - expected).abs() < 1e-9,
            "{word}: viterbi {viterbi} vs exhaustive {expected}"
        );
    }
}

#[test]
fn unknown_characters_map_to_unk() {
    let corpus = sentences(&["aa bb"]);
    for algorithm in [Algorithm::Bpe, Algorithm::UnigramLm] {
        let vocab =
            Vocabulary::learn(&corpus, 16, algorithm, VocabScope::Lang(lang("L1"))).unwrap();
        let ids = vocab.tokenize("aa zz bb");
        assert!(ids.contains(&UNK_ID), "{algorithm:?}: {ids:?}");
        let (first, last) = (ids[0], *ids.last().unwrap());
        assert_ne!(first, UNK_ID);
        assert_ne!(last, UNK_ID);
    }
}

#[test]
fn joint_vocab_over_identical_corpora_equals_the_monolingual_one() {
    let corpus = sentences(&["aba cab bac", "cab cab aba", "bac aba"]);
    for algorithm in [Algorithm::Bpe, Algorithm::UnigramLm] {
        let mono = learn_vocab(&corpus, 24, algorithm).unwrap();
        let joint = build_joint_vocab(
            &[
                (lang("L1"), corpus.clone()),
                (lang("L2"), corpus.clone()),
            ],
            24,
            0.5,
            algorithm,
        )
        .unwrap();
        let mono_pieces: BTreeSet<&String> = mono.pieces.iter().map(|(s, _)| s).collect();
        let joint_pieces: BTreeSet<&String> =
            joint.model().pieces.iter().map(|(s, _)| s).collect();
        assert_eq!(mono_pieces, joint_pieces, "{algorithm:?}");
        assert_eq!(*joint.scope(), VocabScope::Joint);
    }
}

#[test]
fn paper_scale_vocab_sizes_are_accepted() {
    let corpus = sentences(&["aba cab bac dab", "cab dab aba bac"]);
    for size in [32_000usize, 64_000, 100_000, 200_000] {
        let model = learn_vocab(&corpus, size, Algorithm::Bpe).unwrap();
        assert!(model.pieces.len() <= size - NUM_SPECIALS);
    }
}

#[test]
fn joint_vocab_on_disjoint_scripts_partitions_by_script() {
    // Script-partition oracle: strip the neutral word marker; the remaining
    // chars of every piece must sit inside exactly one script.
    let latin = sentences(&["abc bca cab", "aab bcc", "abc abc cab"]);
    let greek = sentences(&["αβγ βγα γαβ", "ααβ βγγ", "αβγ αβγ γαβ"]);
    let joint = build_joint_vocab(
        &[(lang("lat"), latin), (lang("ell"), greek)],
        1000,
        0.5,
        Algorithm::UnigramLm,
    )
    .unwrap();
    let latin_chars: BTreeSet<char> = "abc".chars().collect();
    let greek_chars: BTreeSet<char> = "αβγ".chars().collect();
    for (piece, _) in &joint.model().pieces {
        let body: BTreeSet<char> = piece.chars().filter(|&c| c != WORD_MARKER).collect();
        if body.is_empty() {
            continue; // bare-marker piece is script-neutral
        }
        let in_latin = body.is_subset(&latin_chars);
        let in_greek = body.is_subset(&greek_chars);
        assert!(
            in_latin ^ in_greek,
            "piece `{piece}` spans scripts (latin: {in_latin}, greek: {in_greek})"
        );
    }
}

#[test]
fn disjoint_vocabs_share_only_the_specials() {
    let latin = sentences(&["abc bca cab aab"]);
    let greek = sentences(&["αβγ βγα γαβ ααβ"]);
    let va = Vocabulary::learn(&latin, 40, Algorithm::UnigramLm, VocabScope::Lang(lang("lat")))
        .unwrap();
    let vb = Vocabulary::learn(&greek, 40, Algorithm::UnigramLm, VocabScope::Lang(lang("ell")))
        .unwrap();
    let pa: BTreeSet<String> = va.model().pieces.iter().map(|(s, _)| s.clone()).collect();
    let pb: BTreeSet<String> = vb.model().pieces.iter().map(|(s, _)| s.clone()).collect();
    let shared: Vec<&String> = pa.intersection(&pb).collect();
    // The bare word marker is the one legitimately shared surface.
    assert!(
        shared.iter().all(|s| s.as_str() == "\u{2581}"),
        "unexpected shared pieces: {shared:?}"
    );
    for s in SPECIALS {
        assert_eq!(va.piece_id(s), vb.piece_id(s));
    }
}

#[test]
fn special_ids_are_fixed_and_collision_free() {
    assert_eq!(SPECIALS, ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"]);
    let corpus = sentences(&["aa bb"]);
    let vocab = Vocabulary::learn(&corpus, 16, Algorithm::Bpe, VocabScope::Joint).unwrap();
    for (i, s) in SPECIALS.iter().enumerate() {
        assert_eq!(vocab.piece_id(s), Some(i as u32));
        assert_eq!(vocab.surface(i as u32), Some(*s));
    }
    // A piece surface colliding with a special is rejected outright.
    let err = SubwordModel::new(Algorithm::Bpe, vec![("[CLS]".into(), 0.0)], vec![]).unwrap_err();
    assert!(matches!(err, crate::Error::Validation(_)));
}

#[test]
fn vocab_file_round_trips_and_rejects_bad_specials() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = sentences(&["aba cab", "bac aba"]);
    for algorithm in [Algorithm::Bpe, Algorithm::UnigramLm] {
        let vocab =
            Vocabulary::learn(&corpus, 24, algorithm, VocabScope::Lang(lang("L1"))).unwrap();
        let path = dir.path().join(format!("{algorithm:?}.vocab"));
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path, VocabScope::Lang(lang("L1"))).unwrap();
        assert_eq!(vocab.model(), loaded.model());
        assert_eq!(vocab.tokenize("aba cab bac"), loaded.tokenize("aba cab bac"));
    }

    let bad = dir.path().join("bad.vocab");
    std::fs::write(&bad, "[CLS]\t0\n[SEP]\t0\nnope\t0\n[PAD]\t0\n[UNK]\t0\na\t0\n").unwrap();
    let err = Vocabulary::load(&bad, VocabScope::Joint).unwrap_err();
    assert!(matches!(err, crate::Error::Validation(_)), "{err}");
}

#[test]
fn training_is_deterministic() {
    let corpus = sentences(&["aba cab bac dba", "cab dba aba", "bac bca"]);
    for algorithm in [Algorithm::Bpe, Algorithm::UnigramLm] {
        let a = learn_vocab(&corpus, 32, algorithm).unwrap();
        let b = learn_vocab(&corpus, 32, algorithm).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn tokenize_offsets_cover_the_text() {
    let corpus = sentences(&["abc ab c", "ab abc"]);
    let vocab =
        Vocabulary::learn(&corpus, 24, Algorithm::UnigramLm, VocabScope::Lang(lang("L1"))).unwrap();
    let text = "abc ab cc";
    let toks = vocab.tokenize_with_offsets(text);
    let chars: Vec<char> = text.chars().collect();
    let mut covered = vec![false; chars.len()];
    for &(_, start, end) in &toks {
        for flag in &mut covered[start..end] {
            *flag = true;
        }
    }
    for (i, c) in chars.iter().enumerate() {
        assert_eq!(
            covered[i],
            !c.is_whitespace(),
            "char {i} (`{c}`) coverage wrong in {toks:?}"
        );
    }
}

mod round_trip {
    use super::*;
    use proptest::prelude::*;

    fn train_vocab(algorithm: Algorithm) -> Vocabulary {
        let corpus = sentences(&[
            "aba cab bac abc",
            "cc aab bca cab",
            "abc abc bac aba",
        ]);
        Vocabulary::learn(&corpus, 48, algorithm, VocabScope::Lang(lang("L1"))).unwrap()
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(words in proptest::collection::vec("[abc]{1,8}", 1..6)) {
            let text = words.join(" ");
            for algorithm in [Algorithm::Bpe, Algorithm::UnigramLm] {
                let vocab = train_vocab(algorithm);
                let ids = vocab.tokenize(&text);
                prop_assert!(!ids.contains(&UNK_ID));
                prop_assert_eq!(vocab.detokenize(&ids), text.clone());
                // Tokenizing the reconstruction reproduces the same pieces.
                prop_assert_eq!(vocab.tokenize(&vocab.detokenize(&ids)), ids);
            }
        }
    }
}
