//! Momentum SGD over query batches, the validation-margin plateau schedule
//! and the training loop that produces a checkpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clickgraph::ClickGraph;
use crate::error::{CsmError, Result};
use crate::image_encoder::{forward, init_params_with, ForwardCache, ImageEncoder, InitScheme, NetworkSpec};
use crate::model::CsmModel;
use crate::objective::{loss_gradients, margin, project_norm, similarity, NormScope, ParamCollection, QueryBatchItem};
use crate::retrieval::{CheckpointMeta, ModelCheckpoint, QuerySplit};
use crate::scalar::{sum_squares, Real};
use crate::seed;
use crate::synthgen::SyntheticDataset;
use crate::text_encoder::{build_vocabulary, compute_idf, normalize_query, QueryEncoder, QueryEncoding, WordEmbeddingTable};

/// Most learning-rate decays before training stops.
pub const MAX_DECAYS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size_queries: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub max_epochs: usize,
    pub negatives_per_query: usize,
    /// Clicked images used per query per batch; larger sets are subsampled.
    pub positives_per_query: usize,
    pub seed: u64,
    pub norm_radius: f64,
    pub norm_scope: NormScope,
    /// Batches between validation passes; `None` means once per epoch.
    pub eval_every_batches: Option<usize>,
    pub validation_fraction: f64,
    /// Queries held out of training entirely, for evaluation.
    pub test_fraction: f64,
    /// Image tower; `None` uses the standard network sized to the dataset.
    pub network: Option<NetworkSpec>,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub init: InitScheme,
    pub word_init_std: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size_queries: 128,
            momentum: 0.9,
            weight_decay: 1e-5,
            initial_lr: 0.01,
            lr_decay_factor: 10.0,
            plateau_patience: 3,
            plateau_min_delta: 1e-4,
            max_epochs: 30,
            negatives_per_query: 5,
            positives_per_query: 4,
            seed: 0,
            norm_radius: 1.0,
            norm_scope: NormScope::Global,
            eval_every_batches: None,
            validation_fraction: 0.1,
            test_fraction: 0.15,
            network: None,
            embedding_dim: 64,
            hidden_dim: 128,
            vocab_size: 50_000,
            init: InitScheme::default(),
            word_init_std: 0.01,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("initial_lr", self.initial_lr),
            ("plateau_min_delta", self.plateau_min_delta),
            ("norm_radius", self.norm_radius),
            ("word_init_std", self.word_init_std),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CsmError::config(field, format!("must be positive, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(CsmError::config("momentum", "must be below 1"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 1.0) {
            return Err(CsmError::config("lr_decay_factor", "must exceed 1"));
        }
        let counts = [
            ("batch_size_queries", self.batch_size_queries),
            ("plateau_patience", self.plateau_patience),
            ("max_epochs", self.max_epochs),
            ("negatives_per_query", self.negatives_per_query),
            ("positives_per_query", self.positives_per_query),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(CsmError::config(field, "must be at least 1"));
            }
        }
        if self.eval_every_batches == Some(0) {
            return Err(CsmError::config("eval_every_batches", "must be at least 1"));
        }
        for (field, v) in [("validation_fraction", self.validation_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..1.0).contains(&v) {
                return Err(CsmError::config(field, format!("must be in [0, 1), got {v}")));
            }
        }
        if self.validation_fraction + self.test_fraction >= 1.0 {
            return Err(CsmError::config("test_fraction", "validation and test fractions leave no training queries"));
        }
        Ok(())
    }

    /// The configured network, or the standard one for `image_size` inputs.
    pub fn network_for(&self, image_size: usize) -> NetworkSpec {
        match &self.network {
            Some(spec) => spec.clone(),
            None => NetworkSpec::standard([3, image_size, image_size], self.hidden_dim, self.embedding_dim),
        }
    }
}

/// Velocity for every parameter, laid out like `param_slices`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState<T> {
    v: Vec<Vec<T>>,
}

impl<T: Real> MomentumState<T> {
    pub fn zeros_for<P: ParamCollection<T> + ?Sized>(params: &P) -> Self {
        MomentumState { v: params.param_slices().iter().map(|s| vec![T::zero(); s.len()]).collect() }
    }

    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.v.iter().map(Vec::as_slice)
    }

    pub fn norm(&self) -> f64 {
        self.v.iter().map(|s| sum_squares(s)).sum::<f64>().sqrt()
    }
}

/// Hyperparameters of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub norm_radius: f64,
    pub norm_scope: NormScope,
}

/// `v ← αv − βεθ − εg; θ ← θ + v`, then projection onto the norm ball.
/// `label` names the parameter collection in non-finite diagnostics.
pub fn sgd_step<T: Real, P: ParamCollection<T> + ?Sized>(
    params: &mut P,
    state: &mut MomentumState<T>,
    grads: &P,
    sgd: &SgdParams,
    label: &str,
) -> Result<()> {
    let g = grads.param_slices();
    {
        let p = params.param_slices();
        let shapes_agree = p.len() == g.len()
            && p.len() == state.v.len()
            && p.iter().zip(&g).zip(&state.v).all(|((a, b), c)| a.len() == b.len() && a.len() == c.len());
        if !shapes_agree {
            return Err(CsmError::Contract(format!("{label}: parameter, gradient and momentum shapes differ")));
        }
    }
    for (i, s) in g.iter().enumerate() {
        if s.iter().any(|x| !x.is_finite()) {
            return Err(CsmError::NonFiniteGradient { block: format!("{label} slice {i}"), norm: sum_squares(s).sqrt() });
        }
    }
    let (alpha, decay, lr) = (T::of(sgd.momentum), T::of(sgd.weight_decay * sgd.lr), T::of(sgd.lr));
    let mut k = 0;
    for group in params.param_groups_mut() {
        for theta in group {
            let (v, gs) = (&mut state.v[k], g[k]);
            for ((t, vi), &gi) in theta.iter_mut().zip(v.iter_mut()).zip(gs) {
                *vi = alpha * *vi - decay * *t - lr * gi;
                *t += *vi;
            }
            k += 1;
        }
    }
    project_norm(params, sgd.norm_radius, sgd.norm_scope)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleAction {
    Continue,
    Decayed,
    Stop,
}

/// Divides the learning rate when the best validation margin stalls.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    stale: usize,
    decays: usize,
}

impl PlateauScheduler {
    pub fn new(config: &TrainerConfig) -> Self {
        PlateauScheduler {
            lr: config.initial_lr,
            factor: config.lr_decay_factor,
            patience: config.plateau_patience,
            min_delta: config.plateau_min_delta,
            best: None,
            stale: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    pub fn observe(&mut self, validation_margin: f64) -> ScheduleAction {
        match self.best {
            Some(best) if validation_margin <= best + self.min_delta => self.stale += 1,
            _ => {
                self.best = Some(validation_margin);
                self.stale = 0;
            }
        }
        if self.stale < self.patience {
            return ScheduleAction::Continue;
        }
        if self.decays == MAX_DECAYS {
            return ScheduleAction::Stop;
        }
        self.lr /= self.factor;
        self.decays += 1;
        self.stale = 0;
        ScheduleAction::Decayed
    }
}

/// Replays a validation-margin history; returns the resulting learning rate
/// and whether training should stop.
pub fn lr_schedule(margins: &[f64], config: &TrainerConfig) -> Result<(f64, bool)> {
    if margins.is_empty() {
        return Err(CsmError::Empty("validation history"));
    }
    let mut s = PlateauScheduler::new(config);
    for &m in margins {
        if s.observe(m) == ScheduleAction::Stop {
            return Ok((s.lr, true));
        }
    }
    Ok((s.lr, false))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_margin: f64,
    pub validation_margin: f64,
    pub lr: f64,
    pub action: ScheduleAction,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainingHistory {
    pub fn write_json_lines<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reported after every SGD step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub image_norm: f64,
    pub text_norm: f64,
}

/// Seeded query partition. Train and validation keep only queries with at
/// least one click; test keeps everything assigned to it.
pub fn split_queries(ds: &SyntheticDataset, config: &TrainerConfig) -> QuerySplit {
    let n = ds.queries.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut seed::rng(config.seed, &[seed::STREAM_SPLIT]));
    let n_test = (n as f64 * config.test_fraction).round() as usize;
    let n_val = (n as f64 * config.validation_fraction).round() as usize;
    let clicked = |q: &u32| !ds.clicks.images_of(*q).is_empty();
    let mut test = order[..n_test].to_vec();
    let mut validation: Vec<u32> = order[n_test..(n_test + n_val).min(n)].iter().copied().filter(clicked).collect();
    let mut train: Vec<u32> = order[(n_test + n_val).min(n)..].iter().copied().filter(clicked).collect();
    test.sort_unstable();
    validation.sort_unstable();
    train.sort_unstable();
    QuerySplit { train, validation, test }
}

/// A query's images for one margin evaluation.
struct QueryDraw {
    query: u32,
    positives: Vec<u32>,
    negatives: Vec<u32>,
}

fn draw(graph: &ClickGraph, q: u32, k: usize, cap: Option<usize>, seed_value: u64) -> Result<QueryDraw> {
    let clicked = graph.clicks().images_of(q);
    let positives = match cap {
        Some(cap) if clicked.len() > cap => {
            let mut rng = seed::rng(seed_value, &[seed::STREAM_POSITIVES]);
            let mut p: Vec<u32> = index::sample(&mut rng, clicked.len(), cap).into_iter().map(|i| clicked[i]).collect();
            p.sort_unstable();
            p
        }
        _ => clicked.to_vec(),
    };
    let negatives = graph.sample_for_query(q, k, seed_value)?.images;
    Ok(QueryDraw { query: q, positives, negatives })
}

/// Embeds every listed image with the current image tower, in parallel.
fn embed_images(model: &CsmModel<f32>, ds: &SyntheticDataset, ids: &BTreeSet<u32>) -> Result<BTreeMap<u32, Vec<f32>>> {
    let ids: Vec<u32> = ids.iter().copied().collect();
    let rows = ids.par_iter().map(|&i| model.embed_image(&ds.images[i as usize])).collect::<Result<Vec<_>>>()?;
    Ok(ids.into_iter().zip(rows).collect())
}

fn items<'a>(
    draws: &[QueryDraw],
    encodings: &'a [QueryEncoding<f32>],
    emb: &'a BTreeMap<u32, Vec<f32>>,
) -> Vec<QueryBatchItem<'a, f32>> {
    let side = |ids: &[u32]| ids.iter().map(|&i| (i, emb[&i].as_slice())).collect();
    draws
        .iter()
        .zip(encodings)
        .map(|(d, e)| QueryBatchItem { encoding: e, positives: side(&d.positives), negatives: side(&d.negatives) })
        .collect()
}

fn draws_for(graph: &ClickGraph, queries: &[u32], k: usize, seed_value: u64) -> Result<Vec<QueryDraw>> {
    queries
        .iter()
        .map(|&q| draw(graph, q, k, None, seed::derive(seed_value, &[seed::STREAM_EVAL_NEGATIVES, u64::from(q)])))
        .filter(|d| !matches!(d, Ok(d) if d.negatives.is_empty()))
        .collect()
}

/// Mean `m(Q)` over `queries`, with negatives drawn from a fixed
/// evaluation seed. Queries left without negatives are skipped.
pub fn validation_margin(
    model: &CsmModel<f32>,
    ds: &SyntheticDataset,
    graph: &ClickGraph,
    queries: &[u32],
    k: usize,
    seed_value: u64,
) -> Result<f64> {
    let draws = draws_for(graph, queries, k, seed_value)?;
    if draws.is_empty() {
        return Err(CsmError::Empty("validation queries"));
    }
    let needed: BTreeSet<u32> = draws.iter().flat_map(|d| d.positives.iter().chain(&d.negatives).copied()).collect();
    let emb = embed_images(model, ds, &needed)?;
    let enc: Vec<_> = draws.iter().map(|d| model.encode_query(&ds.queries[d.query as usize])).collect();
    let total: f64 = items(&draws, &enc, &emb).iter().map(|it| margin(it).map(|m| f64::from(m.value))).sum::<Result<f64>>()?;
    Ok(total / draws.len() as f64)
}

/// Fraction of `(Q, I+, I-)` triples, over all clicked positives and
/// `k` sampled negatives per query, with `S(I+,Q) > S(I-,Q)`.
pub fn triple_accuracy(
    model: &CsmModel<f32>,
    ds: &SyntheticDataset,
    graph: &ClickGraph,
    queries: &[u32],
    k: usize,
    seed_value: u64,
) -> Result<f64> {
    let draws = draws_for(graph, queries, k, seed_value)?;
    let needed: BTreeSet<u32> = draws.iter().flat_map(|d| d.positives.iter().chain(&d.negatives).copied()).collect();
    let emb = embed_images(model, ds, &needed)?;
    let (mut good, mut total) = (0usize, 0usize);
    for d in &draws {
        let w = model.encode_query(&ds.queries[d.query as usize]).vector;
        for p in &d.positives {
            let sp = similarity(&emb[p], &w)?;
            for n in &d.negatives {
                total += 1;
                good += usize::from(sp > similarity(&emb[n], &w)?);
            }
        }
    }
    if total == 0 {
        return Err(CsmError::Empty("triples"));
    }
    Ok(good as f64 / total as f64)
}

/// Fresh model: vocabulary and idf from the held-in queries, seeded weights,
/// both towers projected onto the norm ball.
pub fn initial_model(ds: &SyntheticDataset, held_in: &[u32], config: &TrainerConfig) -> Result<CsmModel<f32>> {
    let texts: Vec<&str> = held_in.iter().map(|&q| ds.queries[q as usize].as_str()).collect();
    let vocab = build_vocabulary(&texts, config.vocab_size)?;
    let idf = compute_idf(&texts, &vocab);
    let spec = config.network_for(ds.config.image_size);
    spec.validate()?;
    let dim = spec.output_dim();
    let mut params = init_params_with(&spec, config.init, config.seed)?;
    let mut table = WordEmbeddingTable::random(vocab.len(), dim, config.word_init_std, config.seed);
    project_norm(&mut params, config.norm_radius, config.norm_scope)?;
    project_norm(&mut table, config.norm_radius, config.norm_scope)?;
    CsmModel::new(ImageEncoder::new(spec, params)?, QueryEncoder { vocab, idf, table })
}

/// Trains a model on `ds`; see [`train_with_observer`].
pub fn train(ds: &SyntheticDataset, config: &TrainerConfig) -> Result<(ModelCheckpoint, TrainingHistory)> {
    train_with_observer(ds, config, &mut |_| {})
}

/// Full training run. `observer` sees every step after projection.
pub fn train_with_observer(
    ds: &SyntheticDataset,
    config: &TrainerConfig,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<(ModelCheckpoint, TrainingHistory)> {
    config.validate()?;
    let split = split_queries(ds, config);
    let graph = ClickGraph::new(ds.clicks.clone());
    let k = config.negatives_per_query;

    let trainable: Vec<u32> =
        split.train.iter().copied().filter(|&q| !ds.clicks.unclicked_images(q).is_empty()).collect();
    if trainable.is_empty() {
        return Err(CsmError::Untrainable("no training query has both clicked and unclicked images".into()));
    }
    if trainable.len() < config.batch_size_queries {
        return Err(CsmError::config(
            "batch_size_queries",
            format!("{} exceeds the {} trainable queries", config.batch_size_queries, trainable.len()),
        ));
    }
    let validation = if split.validation.is_empty() { trainable.clone() } else { split.validation.clone() };
    let held_in: Vec<u32> = {
        let mut v: Vec<u32> = split.train.iter().chain(&split.validation).copied().collect();
        v.sort_unstable();
        v
    };

    let mut model = initial_model(ds, &held_in, config)?;
    let mut v_image = MomentumState::zeros_for(&model.image.params);
    let mut v_text = MomentumState::zeros_for(&model.text.table);
    let mut sched = PlateauScheduler::new(config);
    let mut history = TrainingHistory::default();
    let started = Instant::now();
    let eval_seed = seed::derive(config.seed, &[seed::STREAM_EVAL_NEGATIVES]);
    let batches_per_epoch = trainable.len().div_ceil(config.batch_size_queries);
    let eval_every = config.eval_every_batches.unwrap_or(batches_per_epoch);

    let evaluate = |model: &CsmModel<f32>, epoch: usize, step: usize, lr: f64, action_of: &mut dyn FnMut(f64) -> ScheduleAction| -> Result<HistoryRecord> {
        let train_margin = validation_margin(model, ds, &graph, &trainable, k, eval_seed)?;
        let validation_margin = validation_margin(model, ds, &graph, &validation, k, eval_seed)?;
        let action = action_of(validation_margin);
        Ok(HistoryRecord { epoch, step, train_margin, validation_margin, lr, action, wall_time_s: started.elapsed().as_secs_f64() })
    };

    // epoch-0 baseline; it seeds the plateau tracker but cannot trigger a decay
    let baseline = evaluate(&model, 0, 0, sched.lr(), &mut |m| sched.observe(m))?;
    history.records.push(baseline);

    let mut step = 0usize;
    let mut epochs = 0usize;
    'epochs: for epoch in 1..=config.max_epochs {
        epochs = epoch;
        let mut order = trainable.clone();
        order.shuffle(&mut seed::rng(config.seed, &[seed::STREAM_SHUFFLE, epoch as u64]));
        for batch in order.chunks(config.batch_size_queries) {
            step += 1;
            let lr = sched.lr();
            let loss = train_batch(&mut model, ds, &graph, batch, config, epoch, lr, &mut v_image, &mut v_text)?;
            observer(&StepInfo {
                epoch,
                step,
                loss,
                lr,
                image_norm: model.image.params.param_norm(),
                text_norm: model.text.table.param_norm(),
            });
            if step % eval_every == 0 {
                let record = evaluate(&model, epoch, step, lr, &mut |m| sched.observe(m))?;
                let stop = record.action == ScheduleAction::Stop;
                history.records.push(record);
                if stop {
                    break 'epochs;
                }
            }
        }
    }

    let meta = CheckpointMeta {
        seed: config.seed,
        training_config: Some(config.clone()),
        dataset_config_digest: Some(ds.config_digest.clone()),
        training_queries: {
            let set: BTreeSet<String> = held_in.iter().map(|&q| normalize_query(&ds.queries[q as usize])).collect();
            set.into_iter().collect()
        },
        split: Some(split),
        epochs,
    };
    Ok((ModelCheckpoint::new(model, meta)?, history))
}

/// One SGD step on both towers; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut CsmModel<f32>,
    ds: &SyntheticDataset,
    graph: &ClickGraph,
    batch: &[u32],
    config: &TrainerConfig,
    epoch: usize,
    lr: f64,
    v_image: &mut MomentumState<f32>,
    v_text: &mut MomentumState<f32>,
) -> Result<f64> {
    let k = config.negatives_per_query;
    let draws = batch
        .iter()
        .map(|&q| draw(graph, q, k, Some(config.positives_per_query), seed::derive(config.seed, &[epoch as u64, u64::from(q)])))
        .collect::<Result<Vec<_>>>()?;
    let needed: BTreeSet<u32> = draws.iter().flat_map(|d| d.positives.iter().chain(&d.negatives).copied()).collect();
    let emb = embed_images(model, ds, &needed)?;
    let enc: Vec<_> = draws.iter().map(|d| model.encode_query(&ds.queries[d.query as usize])).collect();
    let batch_items = items(&draws, &enc, &emb);
    let margins = batch_items.iter().map(margin).collect::<Result<Vec<_>>>()?;
    let loss: f64 = margins.iter().map(|m| -f64::from(m.value)).sum();

    // only the argmin-pair images carry gradient; rerun those with caches
    let pair_ids: Vec<u32> =
        margins.iter().flat_map(|m| [m.positive, m.negative]).collect::<BTreeSet<_>>().into_iter().collect();
    let caches: Vec<ForwardCache<f32>> = pair_ids
        .par_iter()
        .map(|&i| forward(&model.image.params, &model.image.spec, &ds.images[i as usize]).map(|(_, c)| c))
        .collect::<Result<_>>()?;
    let caches: BTreeMap<u32, ForwardCache<f32>> = pair_ids.into_iter().zip(caches).collect();
    let grads = loss_gradients(model, &batch_items, &margins, &caches)?;
    drop(caches);

    let sgd = SgdParams {
        lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        norm_radius: config.norm_radius,
        norm_scope: config.norm_scope,
    };
    let text_grads = WordEmbeddingTable::from_flat(
        model.text.table.vocab_size(),
        model.dim(),
        grads.text.to_dense(model.text.table.vocab_size(), model.dim()),
    )?;
    sgd_step(&mut model.image.params, v_image, &grads.image, &sgd, "image tower")?;
    sgd_step(&mut model.text.table, v_text, &text_grads, &sgd, "word embeddings")?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd() -> SgdParams {
        SgdParams { lr: 0.01, momentum: 0.9, weight_decay: 1e-5, norm_radius: 1e9, norm_scope: NormScope::Global }
    }

    #[test]
    fn scalar_step_by_hand() {
        let mut theta = vec![1.0f64];
        let mut state = MomentumState::zeros_for(&theta);
        sgd_step(&mut theta, &mut state, &vec![0.5], &sgd(), "t").unwrap();
        assert!((state.v[0][0] - -0.0050001).abs() < 1e-15);
        assert!((theta[0] - 0.9949999).abs() < 1e-15);
        sgd_step(&mut theta, &mut state, &vec![0.0], &sgd(), "t").unwrap();
        let expect = 0.9 * -0.0050001 - 1e-7 * 0.9949999;
        assert!((state.v[0][0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let mut theta = vec![2.0f64, -3.0];
        let mut state = MomentumState::zeros_for(&theta);
        sgd_step(&mut theta, &mut state, &vec![0.0, 0.0], &sgd(), "t").unwrap();
        assert_eq!(theta, vec![2.0 * (1.0 - 1e-7), -3.0 * (1.0 - 1e-7)]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut theta = vec![1.0f64];
        let mut state = MomentumState::zeros_for(&theta);
        let err = sgd_step(&mut theta, &mut state, &vec![f64::NAN], &sgd(), "w").unwrap_err();
        assert!(matches!(err, CsmError::NonFiniteGradient { .. }));
        assert_eq!(theta, vec![1.0]);
    }

    #[test]
    fn plateau_rules() {
        let cfg = TrainerConfig::default();
        let mut s = PlateauScheduler::new(&cfg);
        let acts: Vec<_> = [0.1, 0.1, 0.1, 0.1].iter().map(|&m| s.observe(m)).collect();
        assert_eq!(acts[3], ScheduleAction::Decayed);
        assert!(acts[..3].iter().all(|a| *a == ScheduleAction::Continue));
        assert!((s.lr() - 0.001).abs() < 1e-15);

        let rising: Vec<f64> = (0..20).map(|i| i as f64 * 0.01).collect();
        assert_eq!(lr_schedule(&rising, &cfg).unwrap(), (0.01, false));

        let flat = vec![0.5; 1 + 3 * 4];
        let (_, stop) = lr_schedule(&flat, &cfg).unwrap();
        assert!(stop);
        let (lr, stop) = lr_schedule(&flat[..10], &cfg).unwrap();
        assert!(!stop);
        assert!((lr - 1e-5).abs() < 1e-18);
    }
}
