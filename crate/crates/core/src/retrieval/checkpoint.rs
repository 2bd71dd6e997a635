//! The `.csm` checkpoint: a magic tag, a format version, a JSON header
//! (architecture, vocabulary, idf, training metadata) and raw little-endian
//! f32 parameter blocks.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{CsmError, Result};
use crate::image_encoder::{ImageEncoder, NetworkParams, NetworkSpec, ParamBlock};
use crate::model::CsmModel;
use crate::tensor::Tensor;
use crate::text_encoder::{IdfTable, QueryEncoder, Vocabulary, WordEmbeddingTable};
use crate::trainer::TrainerConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSMM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which query ids went to SGD, validation and held-out test.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySplit {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub training_config: Option<TrainerConfig>,
    pub dataset_config_digest: Option<String>,
    /// Normalized text of every query the model was trained on.
    pub training_queries: Vec<String>,
    pub split: Option<QuerySplit>,
    pub epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    embedding_dim: usize,
    vocabulary: Vocabulary,
    idf: IdfTable,
    meta: CheckpointMeta,
}

/// A trained model plus its provenance; the digest is the SHA-256 of the
/// serialized bytes.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    model: CsmModel<f32>,
    meta: CheckpointMeta,
    bytes: Vec<u8>,
    digest: String,
}

impl PartialEq for ModelCheckpoint {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}

impl ModelCheckpoint {
    pub fn new(model: CsmModel<f32>, meta: CheckpointMeta) -> Result<Self> {
        let bytes = serialize(&model, &meta)?;
        let digest = sha256_hex(&bytes);
        Ok(ModelCheckpoint { model, meta, bytes, digest })
    }

    pub fn model(&self) -> &CsmModel<f32> {
        &self.model
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn to_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_parts(self) -> (CsmModel<f32>, CheckpointMeta) {
        (self.model, self.meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.expect_magic(CHECKPOINT_MAGIC)?;
        r.expect_version(CHECKPOINT_VERSION)?;
        let header: Header = r.json_header()?;
        let shapes = header.spec.param_shapes()?;
        let mut blocks = Vec::with_capacity(shapes.len());
        for (layer, ws, bs) in shapes {
            let w = r.f32s(ws.iter().product())?;
            let b = r.f32s(bs.iter().product())?;
            blocks.push(ParamBlock { layer, weight: Tensor::from_vec(&ws, w)?, bias: Tensor::from_vec(&bs, b)? });
        }
        let k = header.vocabulary.len();
        if header.idf.values().len() != k {
            return Err(CsmError::parse("checkpoint", r.offset() as u64, format!("idf has {} entries for a vocabulary of {k}", header.idf.values().len())));
        }
        let table = WordEmbeddingTable::from_flat(k, header.embedding_dim, r.f32s(k * header.embedding_dim)?)?;
        r.finish()?;
        let image = ImageEncoder::new(header.spec, NetworkParams::from_blocks(blocks))?;
        let model = CsmModel::new(image, QueryEncoder { vocab: header.vocabulary, idf: header.idf, table })?;
        Ok(ModelCheckpoint { model, meta: header.meta, digest: sha256_hex(bytes), bytes: bytes.to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.bytes).map_err(|e| CsmError::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CsmError::from(e).in_file(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

fn serialize(model: &CsmModel<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        spec: model.image.spec.clone(),
        embedding_dim: model.dim(),
        vocabulary: model.text.vocab.clone(),
        idf: model.text.idf.clone(),
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * (model.image.params.num_params() + model.text.table.as_slice().len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let mut put = |xs: &[f32]| xs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for block in model.image.params.blocks() {
        put(block.weight.data());
        put(block.bias.data());
    }
    put(model.text.table.as_slice());
    Ok(out)
}

/// Cursor over a binary file that reports failures by byte offset.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    fn err(&self, reason: impl Into<String>) -> CsmError {
        CsmError::parse(self.what, self.pos as u64, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated: need {n} more bytes, {} left", self.bytes.len() - self.pos))),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            self.pos = 0;
            return Err(self.err(format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    pub(crate) fn expect_version(&mut self, version: u32) -> Result<()> {
        let at = self.pos;
        let got = self.u32()?;
        if got != version {
            self.pos = at;
            return Err(self.err(format!("unsupported format version {got} (this build reads {version})")));
        }
        Ok(())
    }

    pub(crate) fn json_header<H: DeserializeOwned>(&mut self) -> Result<H> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        serde_json::from_slice(raw).map_err(|e| {
            self.pos = at;
            self.err(format!("header: {e}"))
        })
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
