//! Query tower: a word lookup table combined by normalised-idf weighting.

use std::collections::{BTreeMap, HashMap};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};
use crate::scalar::Real;
use crate::seed;

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_owned).collect()
}

/// Canonical form of a query string: tokens joined by single spaces.
pub fn normalize_query(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, idx: u32) -> &str {
        &self.words[idx as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }
}

/// Top-`k` words by occurrence count over the corpus, ties broken by
/// ascending word. Indices follow that order.
pub fn build_vocabulary<S: AsRef<str>>(queries: &[S], k: usize) -> Result<Vocabulary> {
    if queries.is_empty() {
        return Err(CsmError::Empty("query corpus"));
    }
    if k == 0 {
        return Err(CsmError::config("vocab_size", "must be at least 1"));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for q in queries {
        for t in tokenize(q.as_ref()) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(Vocabulary::from(ranked.into_iter().map(|(w, _)| w).collect::<Vec<_>>()))
}

/// Per-word `idf = -ln(r)`, `r` the fraction of queries containing the word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdfTable {
    values: Vec<f64>,
}

impl IdfTable {
    pub fn new(values: Vec<f64>) -> Self {
        IdfTable { values }
    }

    pub fn get(&self, idx: u32) -> f64 {
        self.values[idx as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn compute_idf<S: AsRef<str>>(queries: &[S], vocab: &Vocabulary) -> IdfTable {
    let mut doc_freq = vec![0u64; vocab.len()];
    for q in queries {
        let mut seen: Vec<u32> = tokenize(q.as_ref()).iter().filter_map(|t| vocab.get(t)).collect();
        seen.sort_unstable();
        seen.dedup();
        for i in seen {
            doc_freq[i as usize] += 1;
        }
    }
    let n = queries.len() as f64;
    let values = doc_freq
        .into_iter()
        .map(|df| if df == 0 { 0.0 } else { -(df as f64 / n).ln() }.max(0.0))
        .collect();
    IdfTable { values }
}

/// Distinct in-vocabulary words of a query, in first-occurrence order.
fn query_terms(query: &str, vocab: &Vocabulary) -> Vec<u32> {
    let mut terms: Vec<u32> = Vec::new();
    for t in tokenize(query) {
        if let Some(i) = vocab.get(&t) {
            if !terms.contains(&i) {
                terms.push(i);
            }
        }
    }
    terms
}

const IDF_NORM_FLOOR: f64 = 1e-12;

/// Normalised idf weight of every in-vocabulary word of the query.
/// Out-of-vocabulary words are dropped; when every idf is zero the weights
/// fall back to uniform `1/sqrt(n)`.
pub fn query_weights(query: &str, idf: &IdfTable, vocab: &Vocabulary) -> Vec<(u32, f64)> {
    let terms = query_terms(query, vocab);
    let norm = terms.iter().map(|&t| idf.get(t).powi(2)).sum::<f64>().sqrt();
    if norm < IDF_NORM_FLOOR {
        let w = 1.0 / (terms.len() as f64).sqrt();
        return terms.into_iter().map(|t| (t, w)).collect();
    }
    terms.into_iter().map(|t| (t, idf.get(t) / norm)).collect()
}

/// Learnable `K × d` word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddingTable<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> WordEmbeddingTable<T> {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        WordEmbeddingTable { dim, data: vec![T::zero(); vocab_size * dim] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(CsmError::Shape("embedding rows differ in length".into()));
        }
        Ok(WordEmbeddingTable { dim, data: rows.concat() })
    }

    pub fn from_flat(vocab_size: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != vocab_size * dim {
            return Err(CsmError::Shape(format!(
                "embedding table {vocab_size}x{dim} needs {} values, got {}",
                vocab_size * dim,
                data.len()
            )));
        }
        Ok(WordEmbeddingTable { dim, data })
    }

    /// Gaussian(0, std²) entries.
    pub fn random(vocab_size: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[seed::STREAM_INIT_TEXT]);
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..vocab_size * dim).map(|_| T::of(normal.sample(&mut rng))).collect();
        WordEmbeddingTable { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, t: u32) -> &[T] {
        let s = t as usize * self.dim;
        &self.data[s..s + self.dim]
    }

    pub fn row_mut(&mut self, t: u32) -> &mut [T] {
        let s = t as usize * self.dim;
        &mut self.data[s..s + self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cast<U: Real>(&self) -> WordEmbeddingTable<U> {
        WordEmbeddingTable { dim: self.dim, data: self.data.iter().map(|&v| U::of(v.as_f64())).collect() }
    }
}

/// `W(Q)` together with the coefficients needed to backpropagate into the table.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoding<T> {
    pub vector: Vec<T>,
    /// `(word index, ω(t)/|Q|)` for each in-vocabulary word.
    pub terms: Vec<(u32, T)>,
    pub oov: bool,
}

/// `W(Q) = (1/|Q|) Σ ω(t) w(t)`, `|Q|` counting in-vocabulary words only.
pub fn embed_query<T: Real>(
    query: &str,
    table: &WordEmbeddingTable<T>,
    idf: &IdfTable,
    vocab: &Vocabulary,
) -> QueryEncoding<T> {
    let weights = query_weights(query, idf, vocab);
    let mut vector = vec![T::zero(); table.dim()];
    if weights.is_empty() {
        return QueryEncoding { vector, terms: Vec::new(), oov: true };
    }
    let n = weights.len() as f64;
    let terms: Vec<(u32, T)> = weights.into_iter().map(|(t, w)| (t, T::of(w / n))).collect();
    for &(t, c) in &terms {
        for (v, &w) in vector.iter_mut().zip(table.row(t)) {
            *v += c * w;
        }
    }
    QueryEncoding { vector, terms, oov: false }
}

/// Gradient of `upstream · W(Q)` with respect to each touched table row.
pub fn embed_query_backward<T: Real>(encoding: &QueryEncoding<T>, upstream: &[T]) -> BTreeMap<u32, Vec<T>> {
    encoding
        .terms
        .iter()
        .map(|&(t, c)| (t, upstream.iter().map(|&g| c * g).collect()))
        .collect()
}

/// Sparse row gradients accumulated over a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowGradients<T> {
    pub rows: BTreeMap<u32, Vec<T>>,
}

impl<T: Real> RowGradients<T> {
    pub fn accumulate(&mut self, grads: BTreeMap<u32, Vec<T>>) {
        for (t, g) in grads {
            match self.rows.get_mut(&t) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => {
                    self.rows.insert(t, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.rows.values_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Expands into a dense table-shaped buffer.
    pub fn to_dense(&self, vocab_size: usize, dim: usize) -> Vec<T> {
        let mut out = vec![T::zero(); vocab_size * dim];
        for (&t, g) in &self.rows {
            out[t as usize * dim..(t as usize + 1) * dim].copy_from_slice(g);
        }
        out
    }
}

/// The query tower: vocabulary, idf table and word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoder<T> {
    pub vocab: Vocabulary,
    pub idf: IdfTable,
    pub table: WordEmbeddingTable<T>,
}

impl<T: Real> QueryEncoder<T> {
    pub fn encode(&self, query: &str) -> QueryEncoding<T> {
        embed_query(query, &self.table, &self.idf, &self.vocab)
    }

    pub fn cast<U: Real>(&self) -> QueryEncoder<U> {
        QueryEncoder { vocab: self.vocab.clone(), idf: self.idf.clone(), table: self.table.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<&'static str> {
        vec!["red car", "red dog", "dog", "car park"]
    }

    #[test]
    fn vocabulary_counts_and_tie_break() {
        let v = build_vocabulary(&["dog", "dog house", "cat"], 2).unwrap();
        assert_eq!(v.words(), &["dog".to_string(), "cat".to_string()]);
        let all = build_vocabulary(&["dog", "dog house", "cat"], 100).unwrap();
        assert_eq!(all.len(), 3);
        // repeated query text counts each time
        let v = build_vocabulary(&["b", "a b", "a", "a"], 1).unwrap();
        assert_eq!(v.words(), &["a".to_string()]);
        assert!(build_vocabulary::<&str>(&[], 3).is_err());
    }

    #[test]
    fn tokenization_folds_case() {
        let v = build_vocabulary(&["Red CAR", "red"], 10).unwrap();
        assert!(v.contains("red") && v.contains("car"));
        assert!(!v.contains("Red"));
    }

    #[test]
    fn idf_by_hand() {
        let c = corpus();
        let v = build_vocabulary(&c, 10).unwrap();
        let idf = compute_idf(&c, &v);
        assert!((idf.get(v.get("red").unwrap()) - 0.5f64.recip().ln()).abs() < 1e-12);
        assert!((idf.get(v.get("park").unwrap()) - 4f64.ln()).abs() < 1e-12);
        let idf = compute_idf(&["a b", "a", "a c"], &build_vocabulary(&["a b", "a", "a c"], 5).unwrap());
        assert_eq!(idf.get(0), 0.0);
    }

    #[test]
    fn weights_by_hand() {
        let c = corpus();
        let v = build_vocabulary(&c, 10).unwrap();
        let idf = compute_idf(&c, &v);
        let w: HashMap<_, _> = query_weights("car park", &idf, &v).into_iter().collect();
        let car = w[&v.get("car").unwrap()];
        let park = w[&v.get("park").unwrap()];
        assert!((car - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!((park - 2.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!((query_weights("park", &idf, &v)[0].1 - 1.0).abs() < 1e-15);
        assert!(query_weights("zzyzx", &idf, &v).is_empty());
    }

    #[test]
    fn all_zero_idf_uses_uniform_weights() {
        let c = ["a b", "b a"];
        let v = build_vocabulary(&c, 5).unwrap();
        let idf = compute_idf(&c, &v);
        let w = query_weights("a b", &idf, &v);
        for (_, x) in w {
            assert!((x - 0.5f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_by_hand() {
        let c = corpus();
        let v = build_vocabulary(&c, 10).unwrap();
        let idf = compute_idf(&c, &v);
        let mut rows = vec![vec![0.0f64, 0.0]; v.len()];
        rows[v.get("car").unwrap() as usize] = vec![1.0, 0.0];
        rows[v.get("park").unwrap() as usize] = vec![0.0, 1.0];
        let table = WordEmbeddingTable::from_rows(&rows).unwrap();
        let e = embed_query("car park", &table, &idf, &v);
        assert!((e.vector[0] - 0.2236).abs() < 1e-4);
        assert!((e.vector[1] - 0.4472).abs() < 1e-4);
        assert!(!e.oov);

        let single = embed_query("car", &table, &idf, &v);
        assert_eq!(single.vector, vec![1.0, 0.0]);

        let oov = embed_query("zzyzx qwerty", &table, &idf, &v);
        assert!(oov.oov);
        assert_eq!(oov.vector, vec![0.0, 0.0]);
        assert!(embed_query_backward(&oov, &[1.0, 1.0]).is_empty());
    }

    #[test]
    fn single_word_backward_is_identity() {
        let c = corpus();
        let v = build_vocabulary(&c, 10).unwrap();
        let idf = compute_idf(&c, &v);
        let table = WordEmbeddingTable::<f64>::random(v.len(), 3, 0.1, 1);
        let e = embed_query("dog", &table, &idf, &v);
        let g = embed_query_backward(&e, &[0.5, -1.0, 2.0]);
        assert_eq!(g[&v.get("dog").unwrap()], vec![0.5, -1.0, 2.0]);
    }
}
