//! Inner-product similarity, the per-query min-margin, the batch loss and
//! its subgradient, and the norm-ball projection applied after each step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};
use crate::image_encoder::gradcheck::{relative_error, STEP};
use crate::image_encoder::{
    forward, init_params_with, ForwardCache, GradCheckReport, ImageEncoder, InitScheme, NetworkGrads, NetworkParams,
    NetworkSpec, ParamCheck,
};
use crate::model::CsmModel;
use crate::scalar::{dot, sum_squares, Real};
use crate::seed;
use crate::tensor::Tensor;
use crate::text_encoder::{
    compute_idf, embed_query_backward, QueryEncoder, QueryEncoding, RowGradients, Vocabulary, WordEmbeddingTable,
};

/// `S(I, Q) = <F(I), W(Q)>`.
pub fn similarity<T: Real>(image: &[T], query: &[T]) -> Result<T> {
    if image.len() != query.len() {
        return Err(CsmError::Contract(format!(
            "similarity of vectors with {} and {} dimensions",
            image.len(),
            query.len()
        )));
    }
    Ok(dot(image, query))
}

/// One query with its positive and negative image embeddings.
#[derive(Clone, Debug)]
pub struct QueryBatchItem<'a, T> {
    pub encoding: &'a QueryEncoding<T>,
    pub positives: Vec<(u32, &'a [T])>,
    pub negatives: Vec<(u32, &'a [T])>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginResult<T> {
    pub value: T,
    pub positive: u32,
    pub negative: u32,
}

/// `min over (I+, I-) of S(I+,Q) − S(I-,Q)`, computed as the lowest
/// positive score minus the highest negative score. Ties pick the lowest
/// positive id, then the lowest negative id.
pub fn margin<T: Real>(item: &QueryBatchItem<'_, T>) -> Result<MarginResult<T>> {
    if item.positives.is_empty() || item.negatives.is_empty() {
        return Err(CsmError::Contract("margin needs at least one positive and one negative".into()));
    }
    let w = &item.encoding.vector;
    let mut lo: Option<(T, u32)> = None;
    for &(id, f) in &item.positives {
        let s = similarity(f, w)?;
        if lo.is_none_or(|(b, bid)| s < b || (s == b && id < bid)) {
            lo = Some((s, id));
        }
    }
    let mut hi: Option<(T, u32)> = None;
    for &(id, f) in &item.negatives {
        let s = similarity(f, w)?;
        if hi.is_none_or(|(b, bid)| s > b || (s == b && id < bid)) {
            hi = Some((s, id));
        }
    }
    let ((sp, p), (sn, n)) = (lo.expect("nonempty"), hi.expect("nonempty"));
    Ok(MarginResult { value: sp - sn, positive: p, negative: n })
}

/// `L = Σ_Q −m(Q)`.
pub fn batch_loss<T: Real>(items: &[QueryBatchItem<'_, T>]) -> Result<T> {
    if items.is_empty() {
        return Err(CsmError::Empty("batch"));
    }
    let mut loss = T::zero();
    for item in items {
        loss -= margin(item)?.value;
    }
    Ok(loss)
}

/// Gradients of the batch loss with respect to the embeddings themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGradients<T> {
    /// `∂L/∂W(Q)` per batch item.
    pub queries: Vec<Vec<T>>,
    /// `∂L/∂F(I)` per image id; only argmin-pair images appear.
    pub images: BTreeMap<u32, Vec<T>>,
}

/// Subgradient through each query's argmin pair, divided by batch size.
pub fn embedding_gradients<T: Real>(
    items: &[QueryBatchItem<'_, T>],
    margins: &[MarginResult<T>],
) -> Result<EmbeddingGradients<T>> {
    if items.len() != margins.len() {
        return Err(CsmError::Contract("one margin per batch item required".into()));
    }
    if items.is_empty() {
        return Err(CsmError::Empty("batch"));
    }
    let inv = T::one() / T::of(items.len() as f64);
    let mut queries = Vec::with_capacity(items.len());
    let mut images: BTreeMap<u32, Vec<T>> = BTreeMap::new();
    for (item, m) in items.iter().zip(margins) {
        let find = |list: &[(u32, &[T])], id: u32| {
            list.iter()
                .find(|(i, _)| *i == id)
                .map(|(_, f)| f.to_vec())
                .ok_or_else(|| CsmError::Contract(format!("margin image {id} not in batch item")))
        };
        let fp = find(&item.positives, m.positive)?;
        let fn_ = find(&item.negatives, m.negative)?;
        let w = &item.encoding.vector;
        queries.push(fp.iter().zip(&fn_).map(|(&a, &b)| -(a - b) * inv).collect());
        let d = w.len();
        let pos = images.entry(m.positive).or_insert_with(|| vec![T::zero(); d]);
        pos.iter_mut().zip(w).for_each(|(g, &wv)| *g -= wv * inv);
        let neg = images.entry(m.negative).or_insert_with(|| vec![T::zero(); d]);
        neg.iter_mut().zip(w).for_each(|(g, &wv)| *g += wv * inv);
    }
    Ok(EmbeddingGradients { queries, images })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients<T> {
    pub image: NetworkGrads<T>,
    pub text: RowGradients<T>,
}

/// Full batch gradient on both towers. `caches` must hold a forward cache
/// for every image that appears as a margin pair.
pub fn loss_gradients<T: Real>(
    model: &CsmModel<T>,
    items: &[QueryBatchItem<'_, T>],
    margins: &[MarginResult<T>],
    caches: &BTreeMap<u32, ForwardCache<T>>,
) -> Result<ModelGradients<T>> {
    let eg = embedding_gradients(items, margins)?;
    let mut text = RowGradients::default();
    for (item, g) in items.iter().zip(&eg.queries) {
        text.accumulate(embed_query_backward(item.encoding, g));
    }
    let jobs = eg
        .images
        .iter()
        .map(|(id, g)| {
            caches
                .get(id)
                .map(|c| (c, g.as_slice()))
                .ok_or_else(|| CsmError::Contract(format!("no forward cache for image {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let image = crate::image_encoder::backward_sum(&model.image.params, &model.image.spec, &jobs)?;
    Ok(ModelGradients { image, text })
}

/// Anything whose parameters can be viewed as flat slices.
pub trait ParamCollection<T> {
    fn param_slices(&self) -> Vec<&[T]>;
    /// Slices grouped by layer; the default is a single group.
    fn param_groups_mut(&mut self) -> Vec<Vec<&mut [T]>>;

    fn param_norm(&self) -> f64
    where
        T: Real,
    {
        self.param_slices().iter().map(|s| sum_squares(s)).sum::<f64>().sqrt()
    }
}

impl<T: Real> ParamCollection<T> for NetworkParams<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        self.slices()
    }

    fn param_groups_mut(&mut self) -> Vec<Vec<&mut [T]>> {
        self.blocks_mut()
            .iter_mut()
            .map(|b| vec![b.weight.data_mut(), b.bias.data_mut()])
            .collect()
    }
}

impl<T: Real> ParamCollection<T> for WordEmbeddingTable<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        vec![self.as_slice()]
    }

    fn param_groups_mut(&mut self) -> Vec<Vec<&mut [T]>> {
        vec![vec![self.as_mut_slice()]]
    }
}

impl<T: Real> ParamCollection<T> for Vec<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        vec![self.as_slice()]
    }

    fn param_groups_mut(&mut self) -> Vec<Vec<&mut [T]>> {
        vec![vec![self.as_mut_slice()]]
    }
}

/// Which parameters share one norm ball.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One ball per tower.
    #[default]
    Global,
    /// One ball per layer (weight and bias together).
    PerLayer,
}

/// Scales `slices` onto the ball of `radius` if they lie outside it.
/// Returns whether a rescale happened.
fn project_slices<T: Real>(slices: &mut [&mut [T]], radius: f64) -> bool {
    let norm_of = |s: &[&mut [T]]| s.iter().map(|x| sum_squares(x)).sum::<f64>().sqrt();
    let norm = norm_of(slices);
    if norm <= radius {
        return false;
    }
    let mut c = T::of(radius / norm);
    loop {
        for s in slices.iter_mut() {
            s.iter_mut().for_each(|v| *v *= c);
        }
        // rounding can leave the result a hair outside the ball
        if norm_of(slices) <= radius {
            return true;
        }
        c = T::one() - T::epsilon() * T::of(4.0);
    }
}

/// Projects the collection onto the L2 ball of `radius`.
pub fn project_norm<T: Real, P: ParamCollection<T> + ?Sized>(params: &mut P, radius: f64, scope: NormScope) -> Result<bool> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(CsmError::config("norm_radius", "must be positive"));
    }
    let mut groups = params.param_groups_mut();
    Ok(match scope {
        NormScope::Global => {
            let mut all: Vec<&mut [T]> = groups.into_iter().flatten().collect();
            project_slices(&mut all, radius)
        }
        NormScope::PerLayer => groups.iter_mut().fold(false, |acc, g| project_slices(g, radius) | acc),
    })
}

/// Central-difference check of [`loss_gradients`] on a toy two-query model
/// over a small image tower `spec` (weights He-initialised, images random).
/// The loss checked is `L / batch`, matching the scaled subgradient.
/// Perturbations that move a margin's argmin pair are skipped.
pub fn loss_gradient_check(spec: &NetworkSpec, tolerance: f64, seed_value: u64) -> Result<GradCheckReport> {
    use rand::Rng as _;

    const IMAGES: u32 = 6;
    const SAMPLES: usize = 10;
    spec.validate()?;
    let d = spec.output_dim();
    let mut rng = seed::rng(seed_value, &[seed::STREAM_GRADCHECK, 1]);
    let params: NetworkParams<f64> = init_params_with(spec, InitScheme::He, seed_value)?;
    let words: Vec<String> = ["red", "blue", "car", "dog", "park"].iter().map(|w| w.to_string()).collect();
    let queries = ["red car", "blue dog park"];
    let vocab = Vocabulary::from(words.clone());
    let idf = compute_idf(&queries, &vocab);
    let table = WordEmbeddingTable::random(words.len(), d, 0.5, seed_value);
    let model = CsmModel::new(ImageEncoder::new(spec.clone(), params)?, QueryEncoder { vocab, idf, table })?;
    let n_in: usize = spec.input_shape.iter().product();
    let images: Vec<Tensor<f64>> = (0..IMAGES)
        .map(|_| Tensor::from_vec(&spec.input_shape, (0..n_in).map(|_| rng.random::<f64>()).collect()))
        .collect::<Result<_>>()?;
    let layout: [([u32; 2], [u32; 2]); 2] = [([0, 1], [2, 3]), ([3, 4], [0, 5])];

    // (loss, argmin pairs) for a model
    let eval = |m: &CsmModel<f64>| -> Result<(f64, Vec<(u32, u32)>)> {
        let emb = images.iter().map(|x| m.embed_image(x)).collect::<Result<Vec<_>>>()?;
        let enc: Vec<_> = queries.iter().map(|q| m.encode_query(q)).collect();
        let mut loss = 0.0;
        let mut pairs = Vec::new();
        for ((pos, neg), e) in layout.iter().zip(&enc) {
            let side = |ids: &[u32]| ids.iter().map(|&i| (i, emb[i as usize].as_slice())).collect();
            let r = margin(&QueryBatchItem { encoding: e, positives: side(pos), negatives: side(neg) })?;
            loss -= r.value;
            pairs.push((r.positive, r.negative));
        }
        Ok((loss / layout.len() as f64, pairs))
    };

    let emb = images.iter().map(|x| model.embed_image(x)).collect::<Result<Vec<_>>>()?;
    let enc: Vec<_> = queries.iter().map(|q| model.encode_query(q)).collect();
    let items: Vec<QueryBatchItem<'_, f64>> = layout
        .iter()
        .zip(&enc)
        .map(|((pos, neg), e)| {
            let side = |ids: &[u32]| ids.iter().map(|&i| (i, emb[i as usize].as_slice())).collect();
            QueryBatchItem { encoding: e, positives: side(pos), negatives: side(neg) }
        })
        .collect();
    let margins = items.iter().map(margin).collect::<Result<Vec<_>>>()?;
    let caches = margins
        .iter()
        .flat_map(|m| [m.positive, m.negative])
        .map(|i| Ok((i, forward(&model.image.params, spec, &images[i as usize])?.1)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let grads = loss_gradients(&model, &items, &margins, &caches)?;
    let text_grad = grads.text.to_dense(words.len(), d);
    let (_, base_pairs) = eval(&model)?;

    let mut checks = Vec::new();
    let mut run = |name: String, len: usize, analytic: &dyn Fn(usize) -> f64, bump: &dyn Fn(&mut CsmModel<f64>, usize, f64)| -> Result<()> {
        let mut check = ParamCheck { name, checked: 0, skipped: 0, max_rel_error: 0.0 };
        for idx in rand::seq::index::sample(&mut rng, len, SAMPLES.min(len)) {
            let mut plus = model.clone();
            bump(&mut plus, idx, STEP);
            let mut minus = model.clone();
            bump(&mut minus, idx, -STEP);
            let ((lp, pp), (lm, pm)) = (eval(&plus)?, eval(&minus)?);
            if pp != base_pairs || pm != base_pairs {
                check.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * STEP);
            check.max_rel_error = check.max_rel_error.max(relative_error(analytic(idx), numeric));
            check.checked += 1;
        }
        checks.push(check);
        Ok(())
    };
    for b in 0..model.image.params.blocks().len() {
        let block = &grads.image.blocks()[b];
        let layer = block.layer;
        run(
            format!("layer {layer} weight (loss)"),
            block.weight.len(),
            &|i| block.weight.data()[i],
            &|m, i, h| m.image.params.blocks_mut()[b].weight.data_mut()[i] += h,
        )?;
        run(
            format!("layer {layer} bias (loss)"),
            block.bias.len(),
            &|i| block.bias.data()[i],
            &|m, i, h| m.image.params.blocks_mut()[b].bias.data_mut()[i] += h,
        )?;
    }
    run("word embeddings (loss)".into(), text_grad.len(), &|i| text_grad[i], &|m, i, h| {
        m.text.table.as_mut_slice()[i] += h
    })?;

    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let any_checked = checks.iter().any(|c| c.checked > 0);
    Ok(GradCheckReport { checks, tolerance, max_rel_error, passed: any_checked && max_rel_error < tolerance })
}
