//! Graded relevance judgments, DCG@n, reference rankers and the evaluation
//! protocol comparing a trained model against ideal and random rankings.

mod report;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};
use crate::retrieval::ImageIndex;
use crate::model::CsmModel;
use crate::scalar::dot;
use crate::seed;
use crate::text_encoder::{normalize_query, tokenize, Vocabulary};

pub use report::{analysis_report, inspect, render_svg_charts, AnalysisReport, DimensionTop, Inspection, LengthBucket, WordNeighbors};

/// Relevance grade: Excellent = 3, Good = 2, Bad = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Relevance(u8);

impl Relevance {
    pub const BAD: Relevance = Relevance(0);
    pub const GOOD: Relevance = Relevance(2);
    pub const EXCELLENT: Relevance = Relevance(3);
    pub const MAX: Relevance = Relevance::EXCELLENT;

    pub fn value(self) -> u8 {
        self.0
    }

    /// `2^rel − 1`.
    pub fn gain(self) -> f64 {
        f64::from((1u32 << self.0) - 1)
    }
}

impl TryFrom<u8> for Relevance {
    type Error = CsmError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 | 2 | 3 => Ok(Relevance(v)),
            _ => Err(CsmError::parse("relevance", 0, format!("grade {v} not in {{0, 2, 3}}"))),
        }
    }
}

impl From<Relevance> for u8 {
    fn from(r: Relevance) -> u8 {
        r.0
    }
}

/// `(query, image) → grade`, plus each query's judged candidate pool.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JudgmentSet {
    labels: BTreeMap<u32, BTreeMap<u32, Relevance>>,
}

impl JudgmentSet {
    pub fn insert(&mut self, query: u32, image: u32, rel: Relevance) {
        self.labels.entry(query).or_default().insert(image, rel);
    }

    /// Unjudged pairs count as Bad.
    pub fn get(&self, query: u32, image: u32) -> Relevance {
        self.labels.get(&query).and_then(|p| p.get(&image)).copied().unwrap_or(Relevance::BAD)
    }

    pub fn pool(&self, query: u32) -> Option<&BTreeMap<u32, Relevance>> {
        self.labels.get(&query)
    }

    pub fn queries(&self) -> impl Iterator<Item = u32> + '_ {
        self.labels.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.labels.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, Relevance)> + '_ {
        self.labels.iter().flat_map(|(&q, p)| p.iter().map(move |(&i, &r)| (q, i, r)))
    }

    /// Only the given queries.
    pub fn restricted_to(&self, queries: &BTreeSet<u32>) -> JudgmentSet {
        JudgmentSet {
            labels: self.labels.iter().filter(|(q, _)| queries.contains(q)).map(|(&q, p)| (q, p.clone())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image: u32,
    pub score: f64,
}

/// Images in rank order: scores non-increasing, ties by ascending id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: u32,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Sorts `(image, score)` pairs by descending score then ascending id.
    pub fn from_scores(query_id: u32, mut scored: Vec<(u32, f64)>) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        RankedList { query_id, entries: scored.into_iter().map(|(image, score)| RankedEntry { image, score }).collect() }
    }

    pub fn images(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.image)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }
}

/// `1/log2(i + 1)` for 1-based rank `i`.
pub fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// `γ` such that a list of `n` items at grade `max_rel` scores exactly 1.
pub fn derive_normalizer(n: usize, max_rel: u8) -> f64 {
    let gain = f64::from((1u32 << max_rel) - 1);
    let total: f64 = (1..=n).map(discount).sum();
    1.0 / (gain * total)
}

/// `DCG_n = γ Σ_{i ≤ n} (2^rel_i − 1) / log2(i + 1)`.
pub fn dcg(ranked: &RankedList, judgments: &JudgmentSet, n: usize, gamma: f64) -> f64 {
    gamma
        * ranked
            .images()
            .take(n)
            .enumerate()
            .map(|(i, img)| judgments.get(ranked.query_id, img).gain() * discount(i + 1))
            .sum::<f64>()
}

/// Judged pool sorted by grade (descending), ties by ascending id.
pub fn ideal_ranking(query: u32, judgments: &JudgmentSet) -> Result<RankedList> {
    let pool = judgments.pool(query).ok_or_else(|| CsmError::Unknown { kind: "query", ids: query.to_string() })?;
    Ok(RankedList::from_scores(query, pool.iter().map(|(&i, &r)| (i, f64::from(r.value()))).collect()))
}

/// Seeded uniform permutation of `candidates`; the same `(query, seed)`
/// always yields the same order. Scores count down from the list length.
pub fn random_ranking(query: u32, candidates: &[u32], seed: u64) -> Result<RankedList> {
    if candidates.is_empty() {
        return Err(CsmError::Empty("candidate list"));
    }
    let mut order = candidates.to_vec();
    order.sort_unstable();
    let mut rng = seed::rng(seed, &[seed::STREAM_RANDOM_RANKING, u64::from(query)]);
    order.shuffle(&mut rng);
    let n = order.len();
    Ok(RankedList {
        query_id: query,
        entries: order.into_iter().enumerate().map(|(r, image)| RankedEntry { image, score: (n - r) as f64 }).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchType {
    Exact,
    Partial,
    None,
}

impl fmt::Display for MatchType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchType::Exact => "exact",
            MatchType::Partial => "partial",
            MatchType::None => "none",
        })
    }
}

/// Normalised training query strings, for exact-match lookup.
pub fn training_query_set<S: AsRef<str>>(queries: &[S]) -> BTreeSet<String> {
    queries.iter().map(|q| normalize_query(q.as_ref())).collect()
}

/// `exact` if the normalised query occurs among the training queries,
/// `none` if no word is in the vocabulary, `partial` otherwise.
pub fn match_type(query: &str, training_queries: &BTreeSet<String>, vocab: &Vocabulary) -> MatchType {
    if training_queries.contains(&normalize_query(query)) {
        MatchType::Exact
    } else if tokenize(query).iter().any(|t| vocab.contains(t)) {
        MatchType::Partial
    } else {
        MatchType::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u32,
    pub text: String,
    pub word_count: usize,
    pub match_type: MatchType,
    pub oov: bool,
    pub model: f64,
    pub ideal: f64,
    pub random: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub n: usize,
    pub gamma: f64,
    pub seed: u64,
    pub mean_model: f64,
    pub mean_ideal: f64,
    pub mean_random: f64,
    pub per_query: Vec<QueryResult>,
}

/// Ranks each judged query's candidate pool with the model (falling back to
/// a random ranking for out-of-vocabulary queries) and scores model, ideal
/// and random rankings with DCG@n.
pub fn evaluate(
    model: &CsmModel<f32>,
    index: &ImageIndex,
    judgments: &JudgmentSet,
    queries: &BTreeMap<u32, String>,
    training_queries: &BTreeSet<String>,
    n: usize,
    seed: u64,
) -> Result<EvalResults> {
    if n == 0 {
        return Err(CsmError::config("n", "must be at least 1"));
    }
    let unknown_images: BTreeSet<u32> = judgments.iter().map(|(_, i, _)| i).filter(|i| index.row_of(*i).is_none()).collect();
    if !unknown_images.is_empty() {
        return Err(CsmError::Unknown { kind: "image", ids: join_ids(&unknown_images) });
    }
    let unknown_queries: BTreeSet<u32> = judgments.queries().filter(|q| !queries.contains_key(q)).collect();
    if !unknown_queries.is_empty() {
        return Err(CsmError::Unknown { kind: "query", ids: join_ids(&unknown_queries) });
    }
    let gamma = derive_normalizer(n, Relevance::MAX.value());
    let mut per_query = Vec::new();
    for q in judgments.queries() {
        let text = &queries[&q];
        let pool: Vec<u32> = judgments.pool(q).expect("listed query").keys().copied().collect();
        let encoding = model.encode_query(text);
        let model_ranking = if encoding.oov {
            random_ranking(q, &pool, seed)?
        } else {
            let scored = pool
                .iter()
                .map(|&i| (i, f64::from(dot(index.embedding(index.row_of(i).expect("checked")), &encoding.vector))))
                .collect();
            RankedList::from_scores(q, scored)
        };
        let ideal = ideal_ranking(q, judgments)?;
        let random = random_ranking(q, &pool, seed)?;
        per_query.push(QueryResult {
            query_id: q,
            text: text.clone(),
            word_count: tokenize(text).len(),
            match_type: match_type(text, training_queries, &model.text.vocab),
            oov: encoding.oov,
            model: dcg(&model_ranking, judgments, n, gamma),
            ideal: dcg(&ideal, judgments, n, gamma),
            random: dcg(&random, judgments, n, gamma),
        });
    }
    if per_query.is_empty() {
        return Err(CsmError::Empty("judgment set"));
    }
    let mean = |f: fn(&QueryResult) -> f64| per_query.iter().map(f).sum::<f64>() / per_query.len() as f64;
    Ok(EvalResults {
        n,
        gamma,
        seed,
        mean_model: mean(|r| r.model),
        mean_ideal: mean(|r| r.ideal),
        mean_random: mean(|r| r.random),
        per_query,
    })
}

fn join_ids(ids: &BTreeSet<u32>) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
}

/// Sorts descending by score, ascending by id on ties.
pub(crate) fn by_score_then_id(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}
