//! Orthogonal mapping between embedding spaces: identical-spelling seed
//! dictionaries, the Procrustes solution via SVD, and nearest-neighbor
//! self-learning.

use nalgebra::DMatrix;

use super::{cosine, is_special, WordEmbeddings};
use crate::error::{Error, Result};

/// An orthogonal map from space A into space B.
#[derive(Clone, Debug)]
pub struct MappingResult {
    /// Row-major `[dim, dim]`; maps row vectors by right-multiplication.
    pub rotation: Vec<f64>,
    pub dim: usize,
    /// The dictionary the final solve used, as (index in A, index in B).
    pub dictionary: Vec<(usize, usize)>,
    /// Mean cosine of the dictionary pairs after each solve.
    pub objective_trace: Vec<f64>,
    /// Smallest singular value of the cross-covariance at the final solve;
    /// near-zero values signal a rank-deficient dictionary (solved anyway).
    pub min_singular_value: f64,
}

impl MappingResult {
    pub fn map_row(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (i, &vi) in v.iter().enumerate() {
            let row = &self.rotation[i * d..(i + 1) * d];
            for (o, &r) in out.iter_mut().zip(row) {
                *o += vi * r;
            }
        }
        out
    }

    /// Transpose map (B back into A); orthogonality makes it the inverse.
    pub fn map_row_back(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &vi) in v.iter().enumerate() {
                acc += vi * self.rotation[j * d + i];
            }
            *o = acc;
        }
        out
    }
}

/// All and only the surface-identical word pairs, specials excluded.
pub fn seed_dictionary_identical(a: &WordEmbeddings, b: &WordEmbeddings) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, word) in a.words.iter().enumerate() {
        if is_special(word) {
            continue;
        }
        if let Some(j) = b.index_of(word) {
            pairs.push((i, j));
        }
    }
    pairs
}

/// The cited preprocessing chain: unit length, mean centering, unit length.
pub fn normalize_embeddings(e: &WordEmbeddings) -> WordEmbeddings {
    let dim = e.dim;
    let mut m = e.matrix().to_vec();
    let unit = |m: &mut [f64]| {
        for row in m.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    };
    unit(&mut m);
    let n = e.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in m.chunks(dim) {
        for (mu, v) in mean.iter_mut().zip(row) {
            *mu += v / n;
        }
    }
    for row in m.chunks_mut(dim) {
        for (v, mu) in row.iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    unit(&mut m);
    WordEmbeddings::new(e.language.clone(), e.words.clone(), dim, m)
        .expect("normalization preserves shape")
}

/// Apply a mapping to a whole (normalized) space.
pub fn apply_mapping(e: &WordEmbeddings, mapping: &MappingResult) -> Result<WordEmbeddings> {
    if e.dim != mapping.dim {
        return Err(Error::config(format!(
            "embedding dim {} vs mapping dim {}",
            e.dim, mapping.dim
        )));
    }
    let mut matrix = Vec::with_capacity(e.len() * e.dim);
    for i in 0..e.len() {
        matrix.extend(mapping.map_row(e.row(i)));
    }
    WordEmbeddings::new(e.language.clone(), e.words.clone(), e.dim, matrix)
}

/// `max |WᵀW - I|`, the orthogonality defect.
pub fn orthogonality_error(rotation: &[f64], dim: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += rotation[k * dim + i] * rotation[k * dim + j];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((acc - target).abs());
        }
    }
    worst
}

/// Solve `argmin_W ||A_D W - B_D||_F` over orthogonal W via the SVD of
/// `A_Dᵀ B_D`; with self-learning, alternate nearest-neighbor dictionary
/// induction (plain cosine over unit rows) and re-solving until the
/// dictionary reaches a fixpoint or the iteration cap.
///
/// Both spaces are normalized (unit, center, unit) first; the rotation maps
/// the normalized A space into the normalized B space.
pub fn map_orthogonal(
    a: &WordEmbeddings,
    b: &WordEmbeddings,
    seed_dictionary: &[(usize, usize)],
    self_learning: bool,
    iterations: usize,
) -> Result<(MappingResult, WordEmbeddings, WordEmbeddings)> {
    if seed_dictionary.is_empty() {
        return Err(Error::config("empty seed dictionary"));
    }
    if a.dim != b.dim {
        return Err(Error::config(format!(
            "cannot map {}d space into {}d space",
            a.dim, b.dim
        )));
    }
    let an = normalize_embeddings(a);
    let bn = normalize_embeddings(b);
    let dim = an.dim;

    let mut dictionary = seed_dictionary.to_vec();
    let mut trace = Vec::new();
    let mut rotation;
    let mut min_sv;
    loop {
        let (w, sv) = solve_procrustes(&an, &bn, &dictionary, dim);
        rotation = w;
        min_sv = sv;
        let objective = mean_dictionary_cosine(&an, &bn, &rotation, &dictionary);
        trace.push(objective);
        if !self_learning || trace.len() > iterations {
            break;
        }
        let induced = induce_dictionary(&an, &bn, &rotation);
        if induced == dictionary {
            break;
        }
        dictionary = induced;
    }
    Ok((
        MappingResult {
            rotation,
            dim,
            dictionary,
            objective_trace: trace,
            min_singular_value: min_sv,
        },
        an,
        bn,
    ))
}

fn solve_procrustes(
    a: &WordEmbeddings,
    b: &WordEmbeddings,
    dictionary: &[(usize, usize)],
    dim: usize,
) -> (Vec<f64>, f64) {
    // X = A_Dᵀ B_D, W = U Vᵀ from X = U Σ Vᵀ.
    let mut x = vec![0.0f64; dim * dim];
    for &(i, j) in dictionary {
        let ra = a.row(i);
        let rb = b.row(j);
        for (p, &va) in ra.iter().enumerate() {
            let row = &mut x[p * dim..(p + 1) * dim];
            for (q, &vb) in rb.iter().enumerate() {
                row[q] += va * vb;
            }
        }
    }
    let m = DMatrix::from_row_slice(dim, dim, &x);
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let min_sv = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let w = u * v_t;
    let mut rotation = vec![0.0f64; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            rotation[i * dim + j] = w[(i, j)];
        }
    }
    (rotation, min_sv)
}

fn mean_dictionary_cosine(
    a: &WordEmbeddings,
    b: &WordEmbeddings,
    rotation: &[f64],
    dictionary: &[(usize, usize)],
) -> f64 {
    let dim = a.dim;
    let mut total = 0.0;
    for &(i, j) in dictionary {
        let mapped = map_vec(a.row(i), rotation, dim);
        total += cosine(&mapped, b.row(j));
    }
    total / dictionary.len() as f64
}

fn map_vec(v: &[f64], rotation: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (i, &vi) in v.iter().enumerate() {
        let row = &rotation[i * dim..(i + 1) * dim];
        for (o, &r) in out.iter_mut().zip(row) {
            *o += vi * r;
        }
    }
    out
}

/// For every non-special source word, its cosine nearest neighbor in B.
fn induce_dictionary(
    a: &WordEmbeddings,
    b: &WordEmbeddings,
    rotation: &[f64],
) -> Vec<(usize, usize)> {
    let dim = a.dim;
    let mut dictionary = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        if is_special(&a.words[i]) {
            continue;
        }
        let mapped = map_vec(a.row(i), rotation, dim);
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..b.len() {
            if is_special(&b.words[j]) {
                continue;
            }
            let sim = cosine(&mapped, b.row(j));
            if sim > best.1 {
                best = (j, sim);
            }
        }
        dictionary.push((i, best.0));
    }
    dictionary
}

/// Translation accuracy@1 over held-out pairs: does the nearest neighbor of
/// each mapped source vector land on its gold target?
pub fn translation_accuracy(
    a: &WordEmbeddings,
    b: &WordEmbeddings,
    mapping: &MappingResult,
    gold: &[(usize, usize)],
) -> f64 {
    let mut correct = 0usize;
    for &(i, j) in gold {
        let mapped = mapping.map_row(a.row(i));
        let mut best = (0usize, f64::NEG_INFINITY);
        for cand in 0..b.len() {
            let sim = cosine(&mapped, b.row(cand));
            if sim > best.1 {
                best = (cand, sim);
            }
        }
        if best.0 == j {
            correct += 1;
        }
    }
    correct as f64 / gold.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::LanguageId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lang(tag: &str) -> LanguageId {
        LanguageId::new(tag).unwrap()
    }

    fn random_space(n: usize, dim: usize, seed: u64, prefix: &str) -> WordEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix: Vec<f64> = (0..n * dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        WordEmbeddings::new(
            lang("L1"),
            (0..n).map(|i| format!("{prefix}{i}")).collect(),
            dim,
            matrix,
        )
        .unwrap()
    }

    /// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
    fn random_rotation(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        for i in 0..dim {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                for (v, p) in rows[i].iter_mut().zip(prev) {
                    *v -= dot * p;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        // Rows are orthonormal; use them as the matrix rows.
        rows.into_iter().flatten().collect()
    }

    fn rotate_space(e: &WordEmbeddings, rotation: &[f64], tag: &str) -> WordEmbeddings {
        let dim = e.dim;
        let mut matrix = Vec::with_capacity(e.len() * dim);
        for i in 0..e.len() {
            matrix.extend(map_vec(e.row(i), rotation, dim));
        }
        WordEmbeddings::new(
            lang(tag),
            e.words.iter().map(|w| format!("x_{w}")).collect(),
            dim,
            matrix,
        )
        .unwrap()
    }

    #[test]
    fn identical_spaces_map_with_identity() {
        let a = random_space(40, 8, 1, "w");
        let dict: Vec<(usize, usize)> = (0..40).map(|i| (i, i)).collect();
        let (result, _, _) = map_orthogonal(&a, &a, &dict, false, 1).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (result.rotation[i * 8 + j] - target).abs() < 1e-6,
                    "W[{i},{j}] = {}",
                    result.rotation[i * 8 + j]
                );
            }
        }
    }

    #[test]
    fn full_dictionary_recovers_a_planted_rotation() {
        let a = random_space(60, 10, 2, "w");
        let r = random_rotation(10, 3);
        let b = rotate_space(&a, &r, "L2");
        let dict: Vec<(usize, usize)> = (0..60).map(|i| (i, i)).collect();
        let (result, _, _) = map_orthogonal(&a, &b, &dict, false, 1).unwrap();
        let worst = result
            .rotation
            .iter()
            .zip(&r)
            .map(|(w, t)| (w - t).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-4, "max |W - R| = {worst}");
        assert!(orthogonality_error(&result.rotation, 10) < 1e-6);
    }

    #[test]
    fn sparse_seed_plus_self_learning_translates_held_out_words() {
        // A 10% seed must still span the space: 0.1 * V >= dim.
        let a = random_space(200, 12, 4, "w");
        let r = random_rotation(12, 5);
        let b = rotate_space(&a, &r, "L2");
        let seed: Vec<(usize, usize)> = (0..200).step_by(10).map(|i| (i, i)).collect();
        let held_out: Vec<(usize, usize)> =
            (0..200).filter(|i| i % 10 != 0).map(|i| (i, i)).collect();
        let (result, an, bn) = map_orthogonal(&a, &b, &seed, true, 30).unwrap();
        let accuracy = translation_accuracy(&an, &bn, &result, &held_out);
        assert_eq!(accuracy, 1.0, "accuracy@1 {accuracy}");
        assert!(orthogonality_error(&result.rotation, 12) < 1e-6);
    }

    #[test]
    fn objective_trace_is_non_decreasing_and_orthogonality_holds_throughout() {
        let a = random_space(50, 8, 6, "w");
        let r = random_rotation(8, 7);
        let b = rotate_space(&a, &r, "L2");
        let seed: Vec<(usize, usize)> = (0..50).step_by(7).map(|i| (i, i)).collect();
        let (result, _, _) = map_orthogonal(&a, &b, &seed, true, 25).unwrap();
        // The first trace entry covers the seed dictionary; the induced
        // full-vocabulary entries that follow must be monotone.
        for pair in result.objective_trace[1..].windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-9,
                "objective dipped: {:?}",
                result.objective_trace
            );
        }
        assert!(orthogonality_error(&result.rotation, 8) < 1e-6);
    }

    #[test]
    fn mapping_back_with_the_transpose_recovers_the_original() {
        let a = random_space(30, 6, 8, "w");
        let r = random_rotation(6, 9);
        let b = rotate_space(&a, &r, "L2");
        let dict: Vec<(usize, usize)> = (0..30).map(|i| (i, i)).collect();
        let (result, an, _) = map_orthogonal(&a, &b, &dict, false, 1).unwrap();
        for i in (0..30).step_by(5) {
            let there = result.map_row(an.row(i));
            let back = result.map_row_back(&there);
            for (x, y) in an.row(i).iter().zip(&back) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn seed_dictionary_cases() {
        let a = random_space(10, 4, 10, "w");
        let same = seed_dictionary_identical(&a, &a);
        assert_eq!(same.len(), 10);
        let b = random_space(10, 4, 11, "z");
        assert!(seed_dictionary_identical(&a, &b).is_empty());
        // Mixed vocabulary sharing only the digits "7" and "42".
        let mk = |tag: &str, extra: &[&str], seed| {
            let mut words: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
            words.push("7".into());
            words.push("42".into());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let matrix: Vec<f64> = (0..words.len() * 4).map(|_| rng.gen()).collect();
            WordEmbeddings::new(lang(tag), words, 4, matrix).unwrap()
        };
        let a = mk("L1", &["uno", "dos"], 1);
        let b = mk("L2", &["one", "two", "three"], 2);
        let dict = seed_dictionary_identical(&a, &b);
        let pairs: Vec<(&str, &str)> = dict
            .iter()
            .map(|&(i, j)| (a.words[i].as_str(), b.words[j].as_str()))
            .collect();
        assert_eq!(pairs, vec![("7", "7"), ("42", "42")]);
    }

    #[test]
    fn empty_seed_dictionary_is_a_config_error() {
        let a = random_space(5, 4, 1, "w");
        let b = random_space(5, 4, 2, "z");
        assert!(map_orthogonal(&a, &b, &[], false, 1).is_err());
    }
}
