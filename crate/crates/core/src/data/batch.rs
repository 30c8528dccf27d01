//! MLM/NSP, classification, and span batch construction.
//!
//! Rows follow the `[CLS] segA [SEP] segB [SEP] [PAD]…` layout. Masking uses
//! the 15% / 80-10-10 convention (configurable rate): a selected position is
//! replaced by `[MASK]` with probability 0.8, by a random regular piece with
//! probability 0.1, and kept as-is otherwise; only selected positions carry
//! labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{upsample_distribution, Corpus};
use crate::error::{Error, Result};
use crate::tokenize::{LanguageId, Vocabulary, CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID};

/// One language's corpus paired with the vocabulary that tokenizes it.
pub struct MlmSource<'a> {
    pub corpus: &'a Corpus,
    pub vocab: &'a Vocabulary,
}

#[derive(Clone, Debug)]
pub struct MlmBatch {
    pub token_ids: Vec<Vec<u32>>,
    pub segment_ids: Vec<Vec<u8>>,
    /// Non-pad prefix length per row.
    pub attn_len: Vec<usize>,
    pub mask_positions: Vec<Vec<usize>>,
    /// Original ids at the masked positions, parallel to `mask_positions`.
    pub mlm_labels: Vec<Vec<u32>>,
    /// true = the second segment really follows the first.
    pub nsp_is_next: Vec<bool>,
    pub langs: Vec<LanguageId>,
    pub truncated_rows: usize,
}

impl MlmBatch {
    pub fn batch_size(&self) -> usize {
        self.token_ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.first().map_or(0, |r| r.len())
    }
}

/// Build one MLM+NSP batch. With several sources, each row's language is
/// drawn from `upsample_distribution` over corpus sentence counts with the
/// given alpha; a single source ignores alpha.
pub fn make_mlm_nsp_batch(
    sources: &[MlmSource],
    alpha: f64,
    batch_size: usize,
    seq_len: usize,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MlmBatch> {
    if sources.is_empty() {
        return Err(Error::config("no corpora to batch from"));
    }
    if seq_len < 8 {
        return Err(Error::config(format!("seq_len {seq_len} < 8")));
    }
    if !(0.0..1.0).contains(&mask_prob) {
        return Err(Error::config(format!("mask_prob {mask_prob} outside [0, 1)")));
    }
    let sizes: Vec<usize> = sources.iter().map(|s| s.corpus.n_sentences()).collect();
    let lang_probs = if sources.len() > 1 {
        Some(upsample_distribution(&sizes, alpha)?)
    } else {
        None
    };

    let mut batch = MlmBatch {
        token_ids: Vec::with_capacity(batch_size),
        segment_ids: Vec::with_capacity(batch_size),
        attn_len: Vec::with_capacity(batch_size),
        mask_positions: Vec::with_capacity(batch_size),
        mlm_labels: Vec::with_capacity(batch_size),
        nsp_is_next: Vec::with_capacity(batch_size),
        langs: Vec::with_capacity(batch_size),
        truncated_rows: 0,
    };

    for _ in 0..batch_size {
        let src_idx = match &lang_probs {
            Some(probs) => sample_index(probs, rng),
            None => 0,
        };
        let source = &sources[src_idx];
        let (seg_a, seg_b, is_next) = sample_pair(source.corpus, rng)?;
        let (mut row, mut segs, truncated) =
            pack_pair(&source.vocab.tokenize(&seg_a), &source.vocab.tokenize(&seg_b), seq_len);
        if truncated {
            batch.truncated_rows += 1;
        }
        let attn = row.len();
        let vocab_size = source.vocab.size() as u32;
        let (positions, labels) = apply_masking(&mut row, mask_prob, vocab_size, rng);
        row.resize(seq_len, PAD_ID);
        segs.resize(seq_len, 0);
        batch.token_ids.push(row);
        batch.segment_ids.push(segs);
        batch.attn_len.push(attn);
        batch.mask_positions.push(positions);
        batch.mlm_labels.push(labels);
        batch.nsp_is_next.push(is_next);
        batch.langs.push(source.corpus.language.clone());
    }
    Ok(batch)
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draw an NSP pair: 50% consecutive sentences of one document, 50% a random
/// second segment that is never the true next sentence.
fn sample_pair(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Result<(String, String, bool)> {
    let docs = &corpus.documents;
    let is_next = rng.gen::<f64>() < 0.5;
    if is_next {
        for _ in 0..1000 {
            let d = rng.gen_range(0..docs.len());
            if docs[d].len() >= 2 {
                let s = rng.gen_range(0..docs[d].len() - 1);
                return Ok((docs[d][s].clone(), docs[d][s + 1].clone(), true));
            }
        }
        return Err(Error::config(
            "NSP positives need at least one document with two sentences",
        ));
    }
    let (da, sa) = sample_sentence(docs, rng);
    for _ in 0..1000 {
        let (db, sb) = sample_sentence(docs, rng);
        let is_true_next = db == da && sb == sa + 1;
        if !is_true_next {
            return Ok((docs[da][sa].clone(), docs[db][sb].clone(), false));
        }
    }
    Err(Error::config(
        "could not sample an NSP negative that is not the true next sentence",
    ))
}

fn sample_sentence(docs: &[Vec<String>], rng: &mut ChaCha8Rng) -> (usize, usize) {
    let d = rng.gen_range(0..docs.len());
    let s = rng.gen_range(0..docs[d].len());
    (d, s)
}

/// `[CLS] a [SEP] b [SEP]` with pair truncation from the longer segment's
/// end; the layout's specials are never dropped.
fn pack_pair(a: &[u32], b: &[u32], seq_len: usize) -> (Vec<u32>, Vec<u8>, bool) {
    let budget = seq_len - 3;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    let mut truncated = false;
    while a.len() + b.len() > budget {
        truncated = true;
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    let mut row = Vec::with_capacity(seq_len);
    let mut segs = Vec::with_capacity(seq_len);
    row.push(CLS_ID);
    segs.push(0);
    row.extend_from_slice(&a);
    segs.extend(std::iter::repeat(0).take(a.len()));
    row.push(SEP_ID);
    segs.push(0);
    row.extend_from_slice(&b);
    segs.extend(std::iter::repeat(1).take(b.len()));
    row.push(SEP_ID);
    segs.push(1);
    (row, segs, truncated)
}

/// BERT-style 80/10/10 masking over the regular (non-special) positions.
fn apply_masking(
    row: &mut [u32],
    mask_prob: f64,
    vocab_size: u32,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<u32>) {
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    if mask_prob == 0.0 {
        return (positions, labels);
    }
    for (pos, tok) in row.iter_mut().enumerate() {
        if (*tok as usize) < NUM_SPECIALS {
            continue;
        }
        if rng.gen::<f64>() >= mask_prob {
            continue;
        }
        positions.push(pos);
        labels.push(*tok);
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            *tok = MASK_ID;
        } else if roll < 0.9 {
            *tok = rng.gen_range(NUM_SPECIALS as u32..vocab_size);
        } // else: keep the original token
    }
    (positions, labels)
}

// ---- classification ------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ClsExample {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct ClsBatch {
    pub token_ids: Vec<Vec<u32>>,
    pub segment_ids: Vec<Vec<u8>>,
    pub attn_len: Vec<usize>,
    pub labels: Vec<usize>,
    pub truncated_rows: usize,
}

/// Deterministic classification batch: single sentences pack as
/// `[CLS] a [SEP]`, pairs as `[CLS] a [SEP] b [SEP]`.
pub fn make_cls_batch(
    examples: &[ClsExample],
    vocab: &Vocabulary,
    seq_len: usize,
) -> Result<ClsBatch> {
    if seq_len < 8 {
        return Err(Error::config(format!("seq_len {seq_len} < 8")));
    }
    let mut batch = ClsBatch {
        token_ids: Vec::with_capacity(examples.len()),
        segment_ids: Vec::with_capacity(examples.len()),
        attn_len: Vec::with_capacity(examples.len()),
        labels: Vec::with_capacity(examples.len()),
        truncated_rows: 0,
    };
    for ex in examples {
        let a = vocab.tokenize(&ex.text_a);
        let (mut row, mut segs, truncated) = match &ex.text_b {
            Some(b) => pack_pair(&a, &vocab.tokenize(b), seq_len),
            None => pack_single(&a, seq_len),
        };
        if truncated {
            batch.truncated_rows += 1;
        }
        let attn = row.len();
        row.resize(seq_len, PAD_ID);
        segs.resize(seq_len, 0);
        batch.token_ids.push(row);
        batch.segment_ids.push(segs);
        batch.attn_len.push(attn);
        batch.labels.push(ex.label);
    }
    Ok(batch)
}

fn pack_single(a: &[u32], seq_len: usize) -> (Vec<u32>, Vec<u8>, bool) {
    let budget = seq_len - 2;
    let mut a = a.to_vec();
    let truncated = a.len() > budget;
    a.truncate(budget);
    let mut row = Vec::with_capacity(seq_len);
    row.push(CLS_ID);
    row.extend_from_slice(&a);
    row.push(SEP_ID);
    let segs = vec![0u8; row.len()];
    (row, segs, truncated)
}

// ---- extractive QA spans ---------------------------------------------------

#[derive(Clone, Debug)]
pub struct SpanExample {
    pub question: String,
    pub context: String,
    /// Answer span as char offsets `[start, end)` into the context.
    pub answer_chars: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct SpanBatch {
    pub token_ids: Vec<Vec<u32>>,
    pub segment_ids: Vec<Vec<u8>>,
    pub attn_len: Vec<usize>,
    /// Row position of the first context token, and context token count.
    pub ctx_start: Vec<usize>,
    pub ctx_len: Vec<usize>,
    /// Answer token span as row positions (inclusive start, inclusive end).
    pub start_tok: Vec<usize>,
    pub end_tok: Vec<usize>,
    /// Examples dropped because the answer fell outside the truncated row.
    pub skipped: usize,
}

/// Pack QA examples as `[CLS] question [SEP] context [SEP]`, mapping answer
/// char spans onto context token spans via tokenizer offsets.
pub fn make_span_batch(
    examples: &[SpanExample],
    vocab: &Vocabulary,
    seq_len: usize,
) -> Result<SpanBatch> {
    if seq_len < 8 {
        return Err(Error::config(format!("seq_len {seq_len} < 8")));
    }
    let mut batch = SpanBatch {
        token_ids: Vec::new(),
        segment_ids: Vec::new(),
        attn_len: Vec::new(),
        ctx_start: Vec::new(),
        ctx_len: Vec::new(),
        start_tok: Vec::new(),
        end_tok: Vec::new(),
        skipped: 0,
    };
    for ex in examples {
        let q = vocab.tokenize(&ex.question);
        let ctx = vocab.tokenize_with_offsets(&ex.context);
        // Question keeps at most half the budget so some context survives.
        let budget = seq_len - 3;
        let q_keep = q.len().min(budget / 2);
        let ctx_keep = budget - q_keep;
        let (ans_start, ans_end) = ex.answer_chars;
        // First/last context token overlapping the answer chars.
        let mut first = None;
        let mut last = None;
        for (i, &(_, cs, ce)) in ctx.iter().enumerate() {
            if cs < ans_end && ce > ans_start {
                if first.is_none() {
                    first = Some(i);
                }
                last = Some(i);
            }
        }
        let (Some(first), Some(last)) = (first, last) else {
            batch.skipped += 1;
            continue;
        };
        if last >= ctx_keep {
            batch.skipped += 1;
            continue;
        }
        let mut row = Vec::with_capacity(seq_len);
        let mut segs = Vec::with_capacity(seq_len);
        row.push(CLS_ID);
        segs.push(0);
        row.extend_from_slice(&q[..q_keep]);
        segs.extend(std::iter::repeat(0).take(q_keep));
        row.push(SEP_ID);
        segs.push(0);
        let ctx_start = row.len();
        let ctx_len = ctx.len().min(ctx_keep);
        row.extend(ctx.iter().take(ctx_len).map(|&(id, _, _)| id));
        segs.extend(std::iter::repeat(1).take(ctx_len));
        row.push(SEP_ID);
        segs.push(1);
        let attn = row.len();
        row.resize(seq_len, PAD_ID);
        segs.resize(seq_len, 0);
        batch.token_ids.push(row);
        batch.segment_ids.push(segs);
        batch.attn_len.push(attn);
        batch.ctx_start.push(ctx_start);
        batch.ctx_len.push(ctx_len);
        batch.start_tok.push(ctx_start + first);
        batch.end_tok.push(ctx_start + last);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::{Algorithm, VocabScope};
    use rand::SeedableRng;

    fn test_vocab(sentences: &[&str]) -> Vocabulary {
        let owned: Vec<String> = sentences.iter().map(|s| s.to_string()).collect();
        Vocabulary::learn(&owned, 64, Algorithm::Bpe, VocabScope::Lang(
            LanguageId::new("L1").unwrap(),
        ))
        .unwrap()
    }

    fn test_corpus() -> Corpus {
        Corpus::new(
            LanguageId::new("L1").unwrap(),
            vec![
                vec!["aba bab".into(), "bab aba".into(), "aba aba".into()],
                vec!["bab bab".into(), "aba bab".into()],
            ],
        )
        .unwrap()
    }

    #[test]
    fn batches_are_reproducible_for_equal_seeds() {
        let corpus = test_corpus();
        let vocab = test_vocab(&["aba bab", "bab aba"]);
        let make = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sources = [MlmSource { corpus: &corpus, vocab: &vocab }];
            make_mlm_nsp_batch(&sources, 0.5, 8, 16, 0.15, &mut rng).unwrap()
        };
        let (a, b) = (make(7), make(7));
        assert_eq!(a.token_ids, b.token_ids);
        assert_eq!(a.mask_positions, b.mask_positions);
        assert_eq!(a.mlm_labels, b.mlm_labels);
        assert_eq!(a.nsp_is_next, b.nsp_is_next);
        let c = make(8);
        assert_ne!(a.token_ids, c.token_ids);
    }

    #[test]
    fn zero_mask_prob_yields_no_labels() {
        let corpus = test_corpus();
        let vocab = test_vocab(&["aba bab"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sources = [MlmSource { corpus: &corpus, vocab: &vocab }];
        let batch = make_mlm_nsp_batch(&sources, 0.5, 4, 16, 0.0, &mut rng).unwrap();
        assert!(batch.mask_positions.iter().all(|p| p.is_empty()));
        assert!(batch.mlm_labels.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn rows_keep_the_cls_sep_layout() {
        let corpus = test_corpus();
        let vocab = test_vocab(&["aba bab"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sources = [MlmSource { corpus: &corpus, vocab: &vocab }];
        let batch = make_mlm_nsp_batch(&sources, 0.5, 16, 12, 0.15, &mut rng).unwrap();
        for (row, (&attn, segs)) in batch
            .token_ids
            .iter()
            .zip(batch.attn_len.iter().zip(&batch.segment_ids))
        {
            assert_eq!(row[0], CLS_ID);
            assert_eq!(row[attn - 1], SEP_ID);
            let n_sep = row[..attn].iter().filter(|&&t| t == SEP_ID).count();
            assert_eq!(n_sep, 2, "row {row:?}");
            assert!(row[attn..].iter().all(|&t| t == PAD_ID));
            // Segment ids: 0 up to and including the first SEP, 1 after.
            let first_sep = row.iter().position(|&t| t == SEP_ID).unwrap();
            assert!(segs[..=first_sep].iter().all(|&s| s == 0));
            assert!(segs[first_sep + 1..attn].iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn nsp_negatives_never_select_the_true_next_exhaustively() {
        // Tiny corpus so every negative draw is checked against the truth.
        let corpus = Corpus::new(
            LanguageId::new("L1").unwrap(),
            vec![vec!["aba".into(), "bab".into(), "aba bab".into()]],
        )
        .unwrap();
        let vocab = test_vocab(&["aba bab"]);
        let sentences: Vec<String> = corpus.sentences_owned();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sources = [MlmSource { corpus: &corpus, vocab: &vocab }];
        for _ in 0..200 {
            let batch = make_mlm_nsp_batch(&sources, 0.5, 4, 16, 0.0, &mut rng).unwrap();
            for (row, (&is_next, &attn)) in batch
                .token_ids
                .iter()
                .zip(batch.nsp_is_next.iter().zip(&batch.attn_len))
            {
                if is_next {
                    continue;
                }
                let first_sep = row.iter().position(|&t| t == SEP_ID).unwrap();
                let a = vocab.detokenize(&row[1..first_sep]);
                let b = vocab.detokenize(&row[first_sep + 1..attn - 1]);
                let a_idx = sentences.iter().position(|s| *s == a);
                let b_idx = sentences.iter().position(|s| *s == b);
                if let (Some(ai), Some(bi)) = (a_idx, b_idx) {
                    assert_ne!(bi, ai + 1, "negative pair is the true next: {a} -> {b}");
                }
            }
        }
    }

    #[test]
    fn masked_count_and_split_match_their_expectations() {
        // Binomial oracle: across >=10k candidate positions at p=0.15 the
        // masked count stays within 3 sigma; the 80/10/10 split likewise.
        let corpus = test_corpus();
        let vocab = test_vocab(&["aba bab"]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sources = [MlmSource { corpus: &corpus, vocab: &vocab }];
        let mut candidates = 0usize;
        let mut masked = 0usize;
        let mut as_mask = 0usize;
        let mut as_random = 0usize;
        let mut as_kept = 0usize;
        while candidates < 10_000 {
            let batch = make_mlm_nsp_batch(&sources, 0.5, 16, 16, 0.15, &mut rng).unwrap();
            for (row, (positions, labels)) in batch
                .token_ids
                .iter()
                .zip(batch.mask_positions.iter().zip(&batch.mlm_labels))
            {
                let n_regular = row
                    .iter()
                    .filter(|&&t| t as usize >= NUM_SPECIALS)
                    .count();
                // Regular count after masking misses positions replaced by
                // [MASK]; candidates = survivors + replaced-by-MASK.
                let n_mask_tokens = row.iter().filter(|&&t| t == MASK_ID).count();
                candidates += n_regular + n_mask_tokens;
                masked += positions.len();
                for (&pos, &label) in positions.iter().zip(labels) {
                    if row[pos] == MASK_ID {
                        as_mask += 1;
                    } else if row[pos] == label {
                        as_kept += 1;
                    } else {
                        as_random += 1;
                    }
                }
            }
        }
        let n = candidates as f64;
        let expect = n * 0.15;
        let sigma = (n * 0.15 * 0.85).sqrt();
        assert!(
            ((masked as f64) - expect).abs() <= 3.0 * sigma,
            "masked {masked} outside {expect} ± 3·{sigma:.1} over {candidates} candidates"
        );
        let m = masked as f64;
        for (count, p, name) in [
            (as_mask, 0.8, "mask"),
            (as_random, 0.1, "random"),
            (as_kept, 0.1, "keep"),
        ] {
            let sigma = (m * p * (1.0 - p)).sqrt();
            assert!(
                ((count as f64) - m * p).abs() <= 3.0 * sigma,
                "{name} count {count} outside {:.1} ± 3·{sigma:.1}",
                m * p
            );
        }
        // `random` replacements can collide with the original piece and get
        // counted as keeps; with ~59 regular pieces the bias is < 2%, well
        // inside 3 sigma.
    }

    #[test]
    fn multilingual_rows_follow_the_upsampled_distribution() {
        let c1 = test_corpus();
        let mut big_docs = Vec::new();
        for _ in 0..9 {
            big_docs.extend(test_corpus().documents);
        }
        let c2 = Corpus::new(LanguageId::new("L2").unwrap(), big_docs).unwrap();
        let vocab = test_vocab(&["aba bab"]);
        // Sentence counts 5 and 45 at alpha 0.5: q = [0.25, 0.75].
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sources = [
            MlmSource { corpus: &c1, vocab: &vocab },
            MlmSource { corpus: &c2, vocab: &vocab },
        ];
        let mut counts = [0usize; 2];
        let draws = 100_000usize;
        for _ in 0..draws / 50 {
            let batch = make_mlm_nsp_batch(&sources, 0.5, 50, 16, 0.0, &mut rng).unwrap();
            for lang in &batch.langs {
                if lang.as_str() == "L1" {
                    counts[0] += 1;
                } else {
                    counts[1] += 1;
                }
            }
        }
        let q = upsample_distribution(&[5, 45], 0.5).unwrap();
        for (i, &c) in counts.iter().enumerate() {
            let expect = draws as f64 * q[i];
            let sigma = (draws as f64 * q[i] * (1.0 - q[i])).sqrt();
            assert!(
                ((c as f64) - expect).abs() <= 3.0 * sigma,
                "language {i}: {c} draws outside {expect:.0} ± 3·{sigma:.1}"
            );
        }
    }

    #[test]
    fn span_batch_maps_answers_onto_context_tokens() {
        let vocab = test_vocab(&["aba bab caca", "caca aba"]);
        let examples = [SpanExample {
            question: "aba".into(),
            context: "bab caca aba".into(),
            answer_chars: (4, 8), // "caca"
        }];
        let batch = make_span_batch(&examples, &vocab, 16).unwrap();
        assert_eq!(batch.skipped, 0);
        assert_eq!(batch.token_ids.len(), 1);
        let row = &batch.token_ids[0];
        let (s, e) = (batch.start_tok[0], batch.end_tok[0]);
        let picked = vocab.detokenize(&row[s..=e]);
        assert_eq!(picked, "caca");
        assert!(s >= batch.ctx_start[0]);
        assert!(e < batch.ctx_start[0] + batch.ctx_len[0]);
    }

    #[test]
    fn span_batch_skips_answers_lost_to_truncation() {
        let vocab = test_vocab(&["aba bab caca"]);
        let long_ctx = "bab ".repeat(40) + "caca";
        let start = long_ctx.chars().count() - 4;
        let examples = [SpanExample {
            question: "aba".into(),
            context: long_ctx,
            answer_chars: (start, start + 4),
        }];
        let batch = make_span_batch(&examples, &vocab, 16).unwrap();
        assert_eq!(batch.skipped, 1);
        assert!(batch.token_ids.is_empty());
    }
}
