//! Reproducible synthetic clickthrough corpus: concept-labelled images
//! (a coloured shape on a noisy background), short token queries, clicks
//! driven by concept agreement, and graded relevance judgments.

use std::collections::BTreeSet;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clickgraph::ClickMatrix;
use crate::digest::json_digest;
use crate::error::{CsmError, Result};
use crate::evaluator::{JudgmentSet, Relevance};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Cross,
    Triangle,
    Stripe,
}

pub const SHAPES: [Shape; 5] = [Shape::Square, Shape::Circle, Shape::Cross, Shape::Triangle, Shape::Stripe];

pub const PALETTE: [[f32; 3]; 7] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.90],
    [1.00, 0.55, 0.05],
];

/// Number of concepts with distinct (shape, colour) pairs.
pub const MAX_CONCEPTS: usize = 35;
pub const WORDS_PER_CONCEPT: usize = 3;
pub const NOISE_VOCAB: usize = 12;
pub const PIXEL_NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept_id: u32,
    pub shape: Shape,
    pub color: [f32; 3],
    pub words: Vec<String>,
}

impl ConceptSpec {
    /// Concept `id`: shape cycles over five shapes, colour over seven, so
    /// the first 35 concepts are pairwise distinct.
    pub fn nth(id: u32) -> Self {
        let i = id as usize;
        ConceptSpec {
            concept_id: id,
            shape: SHAPES[i % SHAPES.len()],
            color: PALETTE[i % PALETTE.len()],
            words: (0..WORDS_PER_CONCEPT).map(|j| concept_word(id, j)).collect(),
        }
    }
}

pub fn concept_word(concept: u32, j: usize) -> String {
    format!("k{concept:02}{}", (b'a' + j as u8) as char)
}

pub fn noise_word(j: usize) -> String {
    format!("n{j:02}")
}

/// 3 for the same concept, 2 for a different concept sharing shape or
/// colour, 0 otherwise.
pub fn ground_truth_relevance(query: &ConceptSpec, image: &ConceptSpec) -> Relevance {
    if query.concept_id == image.concept_id {
        Relevance::EXCELLENT
    } else if query.shape == image.shape || query.color == image.color {
        Relevance::GOOD
    } else {
        Relevance::BAD
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub num_concepts: usize,
    pub num_images: usize,
    pub num_queries: usize,
    pub image_size: usize,
    pub click_prob: f64,
    pub spurious_click_rate: f64,
    pub noise_word_rate: f64,
    /// Images judged per query.
    pub judged_pool_size: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            num_concepts: 8,
            num_images: 400,
            num_queries: 600,
            image_size: 32,
            click_prob: 0.9,
            spurious_click_rate: 0.01,
            noise_word_rate: 0.2,
            judged_pool_size: 80,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_concepts < 2 {
            return Err(CsmError::config("num_concepts", "must be at least 2"));
        }
        if self.num_concepts > MAX_CONCEPTS {
            return Err(CsmError::config("num_concepts", format!("at most {MAX_CONCEPTS} distinct concepts")));
        }
        if self.num_images < self.num_concepts {
            return Err(CsmError::config("num_images", "must be at least num_concepts"));
        }
        if self.num_queries < self.num_concepts {
            return Err(CsmError::config("num_queries", "must be at least num_concepts"));
        }
        if self.image_size < 16 {
            return Err(CsmError::config("image_size", "must be at least 16"));
        }
        for (name, p) in [
            ("click_prob", self.click_prob),
            ("spurious_click_rate", self.spurious_click_rate),
            ("noise_word_rate", self.noise_word_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CsmError::config(name, "must lie in [0, 1]"));
            }
        }
        if self.judged_pool_size == 0 {
            return Err(CsmError::config("judged_pool_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: GenerationConfig,
    pub seed: u64,
    pub config_digest: String,
    pub concepts: Vec<ConceptSpec>,
    /// Indexed by image id; each `3 × size × size` with values in `[0, 1]`.
    pub images: Vec<Tensor<f32>>,
    pub image_concepts: Vec<u32>,
    /// Indexed by query id.
    pub queries: Vec<String>,
    pub query_concepts: Vec<u32>,
    pub clicks: ClickMatrix,
    /// `(image, query)` clicks between different concepts.
    pub spurious_clicks: BTreeSet<(u32, u32)>,
    pub judgments: JudgmentSet,
}

impl SyntheticDataset {
    pub fn image_concept(&self, image: u32) -> &ConceptSpec {
        &self.concepts[self.image_concepts[image as usize] as usize]
    }

    pub fn query_concept(&self, query: u32) -> &ConceptSpec {
        &self.concepts[self.query_concepts[query as usize] as usize]
    }

    pub fn relevance(&self, query: u32, image: u32) -> Relevance {
        ground_truth_relevance(self.query_concept(query), self.image_concept(image))
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Cross => {
            let arm = r / 3.0;
            (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
        }
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        Shape::Stripe => {
            dx.abs() <= r && dy.abs() <= r && (((dy + r) / (2.0 * r / 5.0)).floor() as i64) % 2 == 0
        }
    }
}

/// Draws the concept's shape at a jittered position and scale over a dark
/// grey background, adds Gaussian pixel noise and clamps to `[0, 1]`.
pub fn render_image(concept: &ConceptSpec, size: usize, seed: u64) -> Result<Tensor<f32>> {
    if size < 16 {
        return Err(CsmError::config("image_size", "must be at least 16"));
    }
    let mut rng = seed::rng(seed, &[seed::STREAM_RENDER]);
    let s = size as f64;
    let background = rng.random_range(0.05..0.35);
    let cx = rng.random_range(0.38 * s..0.62 * s);
    let cy = rng.random_range(0.38 * s..0.62 * s);
    let r = rng.random_range(0.22 * s..0.32 * s);
    let noise = Normal::new(0.0, PIXEL_NOISE_STD).expect("valid std");
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let hit = inside(concept.shape, dx, dy, r);
            for c in 0..3 {
                let base = if hit { concept.color[c] as f64 } else { background };
                let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                data[(c * size + y) * size + x] = v as f32;
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data)
}

/// First `n` items cover every concept once; the rest are uniform.
fn assign_concepts(n: usize, concepts: usize, rng: &mut seed::Rng) -> Vec<u32> {
    (0..n)
        .map(|i| if i < concepts { i as u32 } else { rng.random_range(0..concepts as u32) })
        .collect()
}

fn make_query(concept: &ConceptSpec, noise_rate: f64, rng: &mut seed::Rng) -> String {
    let len = rng.random_range(1..=WORDS_PER_CONCEPT);
    let mut words: Vec<String> = concept.words.choose_multiple(rng, len).cloned().collect();
    words.shuffle(rng);
    let mut out = Vec::with_capacity(len * 2);
    for w in words {
        out.push(w);
        if rng.random::<f64>() < noise_rate {
            out.push(noise_word(rng.random_range(0..NOISE_VOCAB)));
        }
    }
    out.join(" ")
}

pub fn generate_dataset(config: &GenerationConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let concepts: Vec<ConceptSpec> = (0..config.num_concepts as u32).map(ConceptSpec::nth).collect();

    let mut rng = seed::rng(seed, &[seed::STREAM_IMAGES]);
    let image_concepts = assign_concepts(config.num_images, config.num_concepts, &mut rng);
    let images = image_concepts
        .par_iter()
        .enumerate()
        .map(|(i, &c)| render_image(&concepts[c as usize], config.image_size, seed::derive(seed, &[seed::STREAM_RENDER, i as u64])))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = seed::rng(seed, &[seed::STREAM_QUERIES]);
    let query_concepts = assign_concepts(config.num_queries, config.num_concepts, &mut rng);
    let queries = query_concepts
        .iter()
        .map(|&c| make_query(&concepts[c as usize], config.noise_word_rate, &mut rng))
        .collect();

    let mut rng = seed::rng(seed, &[seed::STREAM_CLICKS]);
    let mut pairs = Vec::new();
    let mut spurious_clicks = BTreeSet::new();
    for (q, &qc) in query_concepts.iter().enumerate() {
        for (i, &ic) in image_concepts.iter().enumerate() {
            let u: f64 = rng.random();
            if qc == ic {
                if u < config.click_prob {
                    pairs.push((i as u32, q as u32));
                }
            } else if u < config.spurious_click_rate {
                pairs.push((i as u32, q as u32));
                spurious_clicks.insert((i as u32, q as u32));
            }
        }
    }
    let clicks = ClickMatrix::from_pairs(config.num_images, config.num_queries, pairs)?;

    let mut rng = seed::rng(seed, &[seed::STREAM_JUDGMENTS]);
    let mut judgments = JudgmentSet::default();
    let pool = config.judged_pool_size.min(config.num_images);
    for (q, &qc) in query_concepts.iter().enumerate() {
        let mut chosen: Vec<usize> = index::sample(&mut rng, config.num_images, pool).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            let rel = ground_truth_relevance(&concepts[qc as usize], &concepts[image_concepts[i] as usize]);
            judgments.insert(q as u32, i as u32, rel);
        }
    }

    Ok(SyntheticDataset {
        config: config.clone(),
        seed,
        config_digest: json_digest(config)?,
        concepts,
        images,
        image_concepts,
        queries,
        query_concepts,
        clicks,
        spurious_clicks,
        judgments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenerationConfig {
        GenerationConfig { num_images: 60, num_queries: 50, image_size: 16, ..Default::default() }
    }

    #[test]
    fn relevance_rule() {
        let red_square = ConceptSpec { concept_id: 0, shape: Shape::Square, color: PALETTE[0], words: vec![] };
        let red_circle = ConceptSpec { concept_id: 1, shape: Shape::Circle, color: PALETTE[0], words: vec![] };
        let blue_circle = ConceptSpec { concept_id: 2, shape: Shape::Circle, color: PALETTE[2], words: vec![] };
        assert_eq!(ground_truth_relevance(&red_square, &red_square), Relevance::EXCELLENT);
        assert_eq!(ground_truth_relevance(&red_square, &red_circle), Relevance::GOOD);
        assert_eq!(ground_truth_relevance(&red_square, &blue_circle), Relevance::BAD);
    }

    #[test]
    fn concepts_are_distinct_with_disjoint_words() {
        let cs: Vec<_> = (0..MAX_CONCEPTS as u32).map(ConceptSpec::nth).collect();
        for (i, a) in cs.iter().enumerate() {
            assert!(a.color.iter().all(|c| (0.0..=1.0).contains(c)));
            for b in &cs[i + 1..] {
                assert!(a.shape != b.shape || a.color != b.color);
                assert!(a.words.iter().all(|w| !b.words.contains(w)));
            }
        }
    }

    #[test]
    fn render_is_deterministic_and_clamped() {
        let c = ConceptSpec::nth(0);
        let a = render_image(&c, 32, 1).unwrap();
        assert_eq!(a, render_image(&c, 32, 1).unwrap());
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
        let b = render_image(&ConceptSpec::nth(1), 32, 1).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64;
        assert!(diff > 0.0);
        assert!(render_image(&c, 8, 1).is_err());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = GenerationConfig { num_concepts: 1, ..Default::default() };
        match generate_dataset(&bad, 7) {
            Err(CsmError::Config { field, .. }) => assert_eq!(field, "num_concepts"),
            other => panic!("{other:?}"),
        }
        let bad = GenerationConfig { image_size: 8, ..Default::default() };
        assert!(matches!(bad.validate(), Err(CsmError::Config { field, .. }) if field == "image_size"));
        let bad = GenerationConfig { click_prob: 1.5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(CsmError::Config { field, .. }) if field == "click_prob"));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(), 3).unwrap();
        let b = generate_dataset(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(), 4).unwrap();
        assert_ne!(a.queries, c.queries);
    }

    #[test]
    fn clicks_agree_with_judgment_rule() {
        let d = generate_dataset(&small(), 5).unwrap();
        for (i, q) in d.clicks.pairs() {
            assert!(d.relevance(q, i).value() > 0 || d.spurious_clicks.contains(&(i, q)));
        }
        for c in 0..d.config.num_concepts as u32 {
            assert!(d.image_concepts.contains(&c));
            assert!(d.query_concepts.contains(&c));
        }
        for (q, text) in d.queries.iter().enumerate() {
            let concept = d.query_concept(q as u32);
            let n = text.split(' ').filter(|w| concept.words.contains(&w.to_string())).count();
            assert!((1..=3).contains(&n), "{text}");
        }
    }
}
