//! Serving side: the embedded image index, exhaustive top-k search and
//! nearest-neighbour inspection, plus model/index persistence.

mod checkpoint;

pub(crate) use checkpoint::Reader;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};
use crate::evaluator::{by_score_then_id, RankedEntry, RankedList};
use crate::io::{list_tensor_dir, read_tensor};
use crate::model::CsmModel;
use crate::scalar::dot;
use crate::seed;
use crate::tensor::Tensor;

pub use checkpoint::{CheckpointMeta, ModelCheckpoint, QuerySplit, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const INDEX_MAGIC: &[u8; 4] = b"CSMI";
pub const INDEX_VERSION: u32 = 1;

/// `F(I)` for every indexed image, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageIndex {
    ids: Vec<u32>,
    dim: usize,
    data: Vec<f32>,
    checkpoint_digest: String,
    rows: HashMap<u32, usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    checkpoint_digest: String,
    dim: usize,
    ids: Vec<u32>,
}

impl ImageIndex {
    pub fn new(ids: Vec<u32>, dim: usize, data: Vec<f32>, checkpoint_digest: String) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(CsmError::Shape(format!("{} rows of {} dims need {} values, got {}", ids.len(), dim, ids.len() * dim, data.len())));
        }
        let rows: HashMap<u32, usize> = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        if rows.len() != ids.len() {
            return Err(CsmError::Contract("duplicate image id in index".into()));
        }
        Ok(ImageIndex { ids, dim, data, checkpoint_digest, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn checkpoint_digest(&self) -> &str {
        &self.checkpoint_digest
    }

    pub fn embedding(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_of(&self, id: u32) -> Option<usize> {
        self.rows.get(&id).copied()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&IndexHeader {
            checkpoint_digest: self.checkpoint_digest.clone(),
            dim: self.dim,
            ids: self.ids.clone(),
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.data.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = checkpoint::Reader::new(bytes, "index");
        r.expect_magic(INDEX_MAGIC)?;
        r.expect_version(INDEX_VERSION)?;
        let header: IndexHeader = r.json_header()?;
        let data = r.f32s(header.ids.len() * header.dim)?;
        r.finish()?;
        ImageIndex::new(header.ids, header.dim, data, header.checkpoint_digest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CsmError::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CsmError::from(e).in_file(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

/// Embeds `(id, image)` pairs in order with the checkpoint's image tower.
pub fn build_index_from_images(checkpoint: &ModelCheckpoint, images: &[(u32, &Tensor<f32>)]) -> Result<ImageIndex> {
    let model = checkpoint.model();
    let rows: Vec<Result<Vec<f32>>> = images.par_iter().map(|(_, img)| model.embed_image(img)).collect();
    let mut data = Vec::with_capacity(images.len() * model.dim());
    for (row, (id, _)) in rows.into_iter().zip(images) {
        data.extend(row.map_err(|e| CsmError::Contract(format!("image {id}: {e}")))?);
    }
    ImageIndex::new(images.iter().map(|(id, _)| *id).collect(), model.dim(), data, checkpoint.digest().to_string())
}

/// Embeds every `<id>.ten` in `dir`, in lexicographic file-name order.
/// Any unreadable or mis-shaped file aborts the build; all offenders are reported.
pub fn build_index(checkpoint: &ModelCheckpoint, dir: &Path) -> Result<ImageIndex> {
    let files = list_tensor_dir(dir)?;
    let spec = &checkpoint.model().image.spec;
    let loaded: Vec<(u32, std::path::PathBuf, Result<Tensor<f32>>)> = files
        .into_par_iter()
        .map(|(id, path)| {
            let t = read_tensor(&path).and_then(|t| {
                if t.shape() == spec.input_shape.as_slice() {
                    Ok(t)
                } else {
                    Err(CsmError::Shape(format!("shape {:?}, network expects {:?}", t.shape(), spec.input_shape)))
                }
            });
            (id, path, t)
        })
        .collect();
    let failures: Vec<String> = loaded
        .iter()
        .filter_map(|(_, p, t)| t.as_ref().err().map(|e| format!("{}: {e}", p.display())))
        .collect();
    if !failures.is_empty() {
        return Err(CsmError::Contract(format!("index build aborted:\n  {}", failures.join("\n  "))));
    }
    let images: Vec<(u32, Tensor<f32>)> = loaded.into_iter().map(|(id, _, t)| (id, t.expect("checked"))).collect();
    let refs: Vec<(u32, &Tensor<f32>)> = images.iter().map(|(id, t)| (*id, t)).collect();
    build_index_from_images(checkpoint, &refs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub ranked: RankedList,
    /// No query word was in the vocabulary; the ranking is random.
    pub oov: bool,
}

/// Scores of every indexed image against `query_vec`, fully ranked.
pub fn rank_all(index: &ImageIndex, query_id: u32, query_vec: &[f32]) -> RankedList {
    let scored = (0..index.len())
        .map(|r| (index.ids()[r], f64::from(dot(index.embedding(r), query_vec))))
        .collect();
    RankedList::from_scores(query_id, scored)
}

/// Top-`k` images for a free-text query. Out-of-vocabulary queries get the
/// first `k` of a seeded random permutation.
pub fn search(checkpoint: &ModelCheckpoint, index: &ImageIndex, query: &str, k: usize, seed: u64) -> Result<SearchResult> {
    if index.checkpoint_digest() != checkpoint.digest() {
        return Err(CsmError::DigestMismatch {
            index: index.checkpoint_digest().to_string(),
            model: checkpoint.digest().to_string(),
        });
    }
    search_model(checkpoint.model(), index, query, k, seed)
}

/// [`search`] without the index/checkpoint digest check.
pub fn search_model(model: &CsmModel<f32>, index: &ImageIndex, query: &str, k: usize, seed: u64) -> Result<SearchResult> {
    if k == 0 {
        return Err(CsmError::config("k", "must be at least 1"));
    }
    if index.is_empty() {
        return Err(CsmError::Empty("index"));
    }
    let encoding = model.encode_query(query);
    let mut ranked = if encoding.oov {
        let mut order = index.ids().to_vec();
        order.sort_unstable();
        let mut rng = seed::rng(seed, &[seed::STREAM_RANDOM_RANKING]);
        order.shuffle(&mut rng);
        let n = order.len();
        RankedList {
            query_id: 0,
            entries: order.into_iter().enumerate().map(|(r, image)| RankedEntry { image, score: (n - r) as f64 }).collect(),
        }
    } else {
        rank_all(index, 0, &encoding.vector)
    };
    ranked.truncate(k);
    Ok(SearchResult { ranked, oov: encoding.oov })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbors {
    /// `(word, <w(word), w(t)>)`, descending, ties by vocabulary index.
    pub words: Vec<(String, f64)>,
    /// `(image id, <w(word), F(I)>)`, descending, ties by id.
    pub images: Vec<(u32, f64)>,
}

pub fn neighbors(model: &CsmModel<f32>, index: &ImageIndex, word: &str, k: usize) -> Result<Neighbors> {
    let vocab = &model.text.vocab;
    let t = vocab.get(&word.to_lowercase()).ok_or_else(|| CsmError::OutOfVocabulary(word.to_string()))?;
    let table = &model.text.table;
    let w = table.row(t);
    let mut words: Vec<(u32, f64)> = (0..vocab.len() as u32).map(|u| (u, f64::from(dot(w, table.row(u))))).collect();
    words.sort_by(by_score_then_id);
    words.truncate(k);
    let mut images: Vec<(u32, f64)> = rank_all(index, 0, w).entries.into_iter().map(|e| (e.image, e.score)).collect();
    images.truncate(k);
    Ok(Neighbors { words: words.into_iter().map(|(u, s)| (vocab.word(u).to_string(), s)).collect(), images })
}
