use crate::error::{CsmError, Result};
use crate::image_encoder::ImageEncoder;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::text_encoder::{QueryEncoder, QueryEncoding};

/// Both towers of the two-tower model. Image and query embeddings share
/// dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsmModel<T> {
    pub image: ImageEncoder<T>,
    pub text: QueryEncoder<T>,
}

impl<T: Real> CsmModel<T> {
    pub fn new(image: ImageEncoder<T>, text: QueryEncoder<T>) -> Result<Self> {
        let d = image.spec.output_dim();
        if text.table.dim() != d {
            return Err(CsmError::Shape(format!("image tower outputs {d} dims, word table has {}", text.table.dim())));
        }
        if text.table.vocab_size() != text.vocab.len() || text.idf.values().len() != text.vocab.len() {
            return Err(CsmError::Shape("vocabulary, idf table and word table sizes differ".into()));
        }
        Ok(CsmModel { image, text })
    }

    pub fn dim(&self) -> usize {
        self.image.spec.output_dim()
    }

    pub fn embed_image(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        self.image.embed(image)
    }

    pub fn encode_query(&self, query: &str) -> QueryEncoding<T> {
        self.text.encode(query)
    }

    pub fn cast<U: Real>(&self) -> CsmModel<U> {
        CsmModel { image: self.image.cast(), text: self.text.cast() }
    }
}
