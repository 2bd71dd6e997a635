//! Sparse click matrix, image co-click relation matrices and negative
//! sampling that discards images reachable from a query's positives in two
//! co-click steps.

use std::sync::OnceLock;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};
use crate::seed;

/// Binary image × query click relation, stored both row-wise (per image)
/// and column-wise (per query). Both views hold sorted, deduplicated indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickMatrix {
    num_images: usize,
    num_queries: usize,
    by_image: Vec<Vec<u32>>,
    by_query: Vec<Vec<u32>>,
}

impl ClickMatrix {
    /// Builds the matrix from `(image, query)` pairs. Repeated pairs collapse
    /// to a single click.
    pub fn from_pairs(
        num_images: usize,
        num_queries: usize,
        pairs: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let mut by_image = vec![Vec::new(); num_images];
        let mut by_query = vec![Vec::new(); num_queries];
        for (image, query) in pairs {
            if image as usize >= num_images || query as usize >= num_queries {
                return Err(CsmError::Shape(format!(
                    "click ({image}, {query}) outside {num_images} images x {num_queries} queries"
                )));
            }
            by_image[image as usize].push(query);
            by_query[query as usize].push(image);
        }
        for list in by_image.iter_mut().chain(by_query.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Ok(ClickMatrix { num_images, num_queries, by_image, by_query })
    }

    /// Builds from a dense row-major `num_images × num_queries` 0/1 matrix.
    pub fn from_dense(rows: &[Vec<u8>]) -> Result<Self> {
        let num_images = rows.len();
        let num_queries = rows.first().map_or(0, Vec::len);
        let mut pairs = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != num_queries {
                return Err(CsmError::Shape("ragged dense click matrix".into()));
            }
            for (q, &v) in row.iter().enumerate() {
                if v != 0 {
                    pairs.push((i as u32, q as u32));
                }
            }
        }
        Self::from_pairs(num_images, num_queries, pairs)
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_clicks(&self) -> usize {
        self.by_image.iter().map(Vec::len).sum()
    }

    /// Queries clicked for `image`.
    pub fn queries_of(&self, image: u32) -> &[u32] {
        &self.by_image[image as usize]
    }

    /// Clicked images of `query`.
    pub fn images_of(&self, query: u32) -> &[u32] {
        &self.by_query[query as usize]
    }

    pub fn is_clicked(&self, image: u32, query: u32) -> bool {
        self.by_image[image as usize].binary_search(&query).is_ok()
    }

    /// All pairs in `(image, query)` order.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.by_image
            .iter()
            .enumerate()
            .flat_map(|(i, qs)| qs.iter().map(move |&q| (i as u32, q)))
    }

    /// Images `query` did not click, ascending.
    pub fn unclicked_images(&self, query: u32) -> Vec<u32> {
        let clicked = self.images_of(query);
        let mut out = Vec::with_capacity(self.num_images - clicked.len());
        let mut it = clicked.iter().peekable();
        for i in 0..self.num_images as u32 {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }
}

/// Square sparse nonnegative integer matrix over images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationMatrix {
    rows: Vec<Vec<(u32, u64)>>,
}

impl RelationMatrix {
    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: u32) -> &[(u32, u64)] {
        &self.rows[i as usize]
    }

    pub fn get(&self, i: u32, j: u32) -> u64 {
        let row = &self.rows[i as usize];
        row.binary_search_by_key(&j, |&(c, _)| c).map_or(0, |k| row[k].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<u64>> {
        let n = self.size();
        self.rows
            .iter()
            .map(|row| {
                let mut d = vec![0; n];
                for &(j, v) in row {
                    d[j as usize] = v;
                }
                d
            })
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().all(|&(j, v)| self.get(j, i as u32) == v))
    }

    /// Row-parallel sparse product with a dense accumulator per row.
    fn from_row_fn<F>(n: usize, f: F) -> Self
    where
        F: Fn(usize, &mut [u64], &mut Vec<u32>) + Sync,
    {
        let rows = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0u64; n], Vec::new()),
                |(acc, touched), i| {
                    f(i, acc, touched);
                    touched.sort_unstable();
                    let row = touched.iter().map(|&j| (j, std::mem::take(&mut acc[j as usize]))).collect();
                    touched.clear();
                    row
                },
            )
            .collect();
        RelationMatrix { rows }
    }
}

/// M₁ = M·Mᵀ: entry (i, j) counts queries clicked by both images.
pub fn first_order_matrix(clicks: &ClickMatrix) -> RelationMatrix {
    RelationMatrix::from_row_fn(clicks.num_images(), |i, acc, touched| {
        for &q in clicks.queries_of(i as u32) {
            for &j in clicks.images_of(q) {
                if acc[j as usize] == 0 {
                    touched.push(j);
                }
                acc[j as usize] += 1;
            }
        }
    })
}

/// M₂ = M₁·M₁.
pub fn second_order_matrix(m1: &RelationMatrix) -> RelationMatrix {
    RelationMatrix::from_row_fn(m1.size(), |i, acc, touched| {
        for &(k, a) in m1.row(i as u32) {
            for &(j, b) in m1.row(k) {
                if acc[j as usize] == 0 {
                    touched.push(j);
                }
                acc[j as usize] += a * b;
            }
        }
    })
}

/// Unclicked images of `query` with no two-step co-click path to any of its
/// clicked images.
pub fn eligible_negatives(clicks: &ClickMatrix, m2: &RelationMatrix, query: u32) -> Result<Vec<u32>> {
    if query as usize >= clicks.num_queries() {
        return Err(CsmError::Unknown { kind: "query", ids: query.to_string() });
    }
    let positives = clicks.images_of(query);
    if positives.is_empty() {
        return Err(CsmError::UntrainableQuery(query));
    }
    let mut related = vec![false; clicks.num_images()];
    for &p in positives {
        related[p as usize] = true;
        for &(j, v) in m2.row(p) {
            if v > 0 {
                related[j as usize] = true;
            }
        }
    }
    Ok((0..clicks.num_images() as u32)
        .filter(|&i| !related[i as usize] && !clicks.is_clicked(i, query))
        .collect())
}

/// Negatives drawn for one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSample {
    /// Ascending image indices.
    pub images: Vec<u32>,
    /// Set when the two-step filter left nothing and the draw came from
    /// all unclicked images instead.
    pub fallback: bool,
}

/// Uniform draw without replacement of `min(k, len)` items, returned ascending.
pub fn sample_negatives(eligible: &[u32], k: usize, seed: u64) -> Vec<u32> {
    let mut rng = seed::rng(seed, &[seed::STREAM_NEGATIVES]);
    let amount = k.min(eligible.len());
    let mut out: Vec<u32> = index::sample(&mut rng, eligible.len(), amount)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    out.sort_unstable();
    out
}

/// Click matrix plus lazily computed relation matrices.
#[derive(Debug)]
pub struct ClickGraph {
    clicks: ClickMatrix,
    m1: OnceLock<RelationMatrix>,
    m2: OnceLock<RelationMatrix>,
}

impl ClickGraph {
    pub fn new(clicks: ClickMatrix) -> Self {
        ClickGraph { clicks, m1: OnceLock::new(), m2: OnceLock::new() }
    }

    pub fn clicks(&self) -> &ClickMatrix {
        &self.clicks
    }

    pub fn first_order(&self) -> &RelationMatrix {
        self.m1.get_or_init(|| first_order_matrix(&self.clicks))
    }

    pub fn second_order(&self) -> &RelationMatrix {
        self.m2.get_or_init(|| second_order_matrix(self.first_order()))
    }

    pub fn eligible_negatives(&self, query: u32) -> Result<Vec<u32>> {
        eligible_negatives(&self.clicks, self.second_order(), query)
    }

    /// Draws `k` negatives for `query`, waiving the two-step filter when it
    /// leaves no candidates. Errors when the query has no clicks.
    pub fn sample_for_query(&self, query: u32, k: usize, seed: u64) -> Result<NegativeSample> {
        let eligible = self.eligible_negatives(query)?;
        if !eligible.is_empty() {
            return Ok(NegativeSample { images: sample_negatives(&eligible, k, seed), fallback: false });
        }
        let unclicked = self.clicks.unclicked_images(query);
        Ok(NegativeSample { images: sample_negatives(&unclicked, k, seed), fallback: true })
    }
}
