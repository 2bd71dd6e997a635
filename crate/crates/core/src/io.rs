//! On-disk formats: `.ten` image tensors and the dataset directory
//! (`manifest.json`, `queries.tsv`, `clicks.tsv`, `judgments.tsv`, `images/`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clickgraph::ClickMatrix;
use crate::error::{CsmError, Result};
use crate::evaluator::{JudgmentSet, Relevance};
use crate::retrieval::Reader;
use crate::synthgen::{ConceptSpec, GenerationConfig, SyntheticDataset};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"CSMT";
pub const TENSOR_VERSION: u32 = 1;
pub const TENSOR_EXT: &str = "ten";

pub const MANIFEST: &str = "manifest.json";
pub const QUERIES: &str = "queries.tsv";
pub const CLICKS: &str = "clicks.tsv";
pub const JUDGMENTS: &str = "judgments.tsv";
pub const IMAGES: &str = "images";

pub fn tensor_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes, "tensor");
    r.expect_magic(TENSOR_MAGIC)?;
    r.expect_version(TENSOR_VERSION)?;
    let ndim = r.u32()? as usize;
    if ndim > 8 {
        return Err(CsmError::parse("tensor", 12, format!("{ndim} dimensions")));
    }
    let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let data = r.f32s(shape.iter().product())?;
    r.finish()?;
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)).map_err(|e| CsmError::from(e).in_file(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| CsmError::from(e).in_file(path))?;
    tensor_from_bytes(&bytes).map_err(|e| e.in_file(path))
}

/// File name for image `id` among `count` images; zero-padded so that
/// lexicographic and numeric order agree.
pub fn image_file_name(id: u32, count: usize) -> String {
    let width = count.saturating_sub(1).to_string().len().max(6);
    format!("{id:0width$}.{TENSOR_EXT}")
}

/// `(id, path)` for every `<id>.ten` in `dir`, sorted by file name.
/// Files with other extensions are ignored; a non-numeric stem is an error.
pub fn list_tensor_dir(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| CsmError::from(e).in_file(dir))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CsmError::from(e).in_file(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(TENSOR_EXT) {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| CsmError::parse("image file name", 0, format!("`{name}` is not <id>.{TENSOR_EXT}")).in_file(&path))?;
        files.push((name, id, path));
    }
    files.sort();
    let ids: BTreeSet<u32> = files.iter().map(|f| f.1).collect();
    if ids.len() != files.len() {
        return Err(CsmError::Contract(format!("{}: two files map to the same image id", dir.display())));
    }
    Ok(files.into_iter().map(|(_, id, p)| (id, p)).collect())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    config: GenerationConfig,
    config_digest: String,
    num_images: usize,
    num_queries: usize,
    concepts: Vec<ConceptSpec>,
    image_concepts: Vec<u32>,
    query_concepts: Vec<u32>,
    spurious_clicks: Vec<(u32, u32)>,
}

pub fn write_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join(IMAGES);
    fs::create_dir_all(&img_dir).map_err(|e| CsmError::from(e).in_file(&img_dir))?;
    let manifest = Manifest {
        seed: ds.seed,
        config: ds.config.clone(),
        config_digest: ds.config_digest.clone(),
        num_images: ds.images.len(),
        num_queries: ds.queries.len(),
        concepts: ds.concepts.clone(),
        image_concepts: ds.image_concepts.clone(),
        query_concepts: ds.query_concepts.clone(),
        spurious_clicks: ds.spurious_clicks.iter().copied().collect(),
    };
    write_text(&dir.join(MANIFEST), &serde_json::to_string_pretty(&manifest)?)?;

    let mut q = String::from("# query_id\ttext\n");
    for (id, text) in ds.queries.iter().enumerate() {
        q.push_str(&format!("{id}\t{text}\n"));
    }
    write_text(&dir.join(QUERIES), &q)?;

    let mut c = String::from("# query_id\timage_id\n");
    let mut pairs: Vec<(u32, u32)> = ds.clicks.pairs().map(|(i, q)| (q, i)).collect();
    pairs.sort_unstable();
    for (qid, i) in pairs {
        c.push_str(&format!("{qid}\t{i}\n"));
    }
    write_text(&dir.join(CLICKS), &c)?;

    let mut j = String::from("# query_id\timage_id\tgrade\n");
    for (qid, i, rel) in ds.judgments.iter() {
        j.push_str(&format!("{qid}\t{i}\t{}\n", rel.value()));
    }
    write_text(&dir.join(JUDGMENTS), &j)?;

    let n = ds.images.len();
    ds.images
        .par_iter()
        .enumerate()
        .try_for_each(|(id, t)| write_tensor(&img_dir.join(image_file_name(id as u32, n)), t))
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest =
        serde_json::from_str(&read_text(&manifest_path)?).map_err(|e| CsmError::from(e).in_file(&manifest_path))?;
    let queries = read_queries(&dir.join(QUERIES))?;
    if queries.keys().copied().ne(0..manifest.num_queries as u32) {
        return Err(CsmError::Contract(format!("{QUERIES}: query ids must be exactly 0..{}", manifest.num_queries)));
    }
    let files = list_tensor_dir(&dir.join(IMAGES))?;
    if files.iter().map(|f| f.0).ne(0..manifest.num_images as u32) {
        return Err(CsmError::Contract(format!("{IMAGES}/: image ids must be exactly 0..{}", manifest.num_images)));
    }
    let images = files.par_iter().map(|(_, p)| read_tensor(p)).collect::<Result<Vec<_>>>()?;
    let pairs = read_clicks(&dir.join(CLICKS))?;
    let clicks = ClickMatrix::from_pairs(manifest.num_images, manifest.num_queries, pairs.into_iter().map(|(q, i)| (i, q)))
        .map_err(|e| e.in_file(dir.join(CLICKS)))?;
    let judgments = read_judgments(&dir.join(JUDGMENTS))?;
    Ok(SyntheticDataset {
        config: manifest.config,
        seed: manifest.seed,
        config_digest: manifest.config_digest,
        concepts: manifest.concepts,
        images,
        image_concepts: manifest.image_concepts,
        queries: queries.into_values().collect(),
        query_concepts: manifest.query_concepts,
        clicks,
        spurious_clicks: manifest.spurious_clicks.into_iter().collect(),
        judgments,
    })
}

/// `id<TAB>text` lines; `#` lines and blank lines are skipped.
pub fn read_queries(path: &Path) -> Result<BTreeMap<u32, String>> {
    let mut out = BTreeMap::new();
    for (offset, fields) in tsv_rows(path, 2)? {
        let id = parse_field::<u32>(path, offset, &fields[0], "query id")?;
        if out.insert(id, fields[1].clone()).is_some() {
            return Err(CsmError::parse("queries", offset, format!("duplicate query id {id}")).in_file(path));
        }
    }
    Ok(out)
}

/// `query<TAB>image` lines, returned as `(query, image)`.
pub fn read_clicks(path: &Path) -> Result<Vec<(u32, u32)>> {
    tsv_rows(path, 2)?
        .into_iter()
        .map(|(offset, f)| {
            Ok((parse_field(path, offset, &f[0], "query id")?, parse_field(path, offset, &f[1], "image id")?))
        })
        .collect()
}

/// `query<TAB>image<TAB>grade` lines, grade in 0..=3.
pub fn read_judgments(path: &Path) -> Result<JudgmentSet> {
    let mut out = JudgmentSet::default();
    for (offset, f) in tsv_rows(path, 3)? {
        let q = parse_field(path, offset, &f[0], "query id")?;
        let i = parse_field(path, offset, &f[1], "image id")?;
        let g: u8 = parse_field(path, offset, &f[2], "grade")?;
        let rel = Relevance::try_from(g)
            .map_err(|e| CsmError::parse("judgments", offset, e.to_string()).in_file(path))?;
        out.insert(q, i, rel);
    }
    Ok(out)
}

fn tsv_rows(path: &Path, width: usize) -> Result<Vec<(u64, Vec<String>)>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = line.splitn(width, '\t').map(str::to_string).collect();
        if fields.len() != width {
            return Err(CsmError::parse(path.display().to_string(), at, format!("expected {width} tab-separated fields")));
        }
        rows.push((at, fields));
    }
    Ok(rows)
}

fn parse_field<V: std::str::FromStr>(path: &Path, offset: u64, raw: &str, what: &str) -> Result<V> {
    raw.trim()
        .parse()
        .map_err(|_| CsmError::parse(path.display().to_string(), offset, format!("bad {what} `{raw}`")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CsmError::from(e).in_file(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CsmError::from(e).in_file(path))
}
