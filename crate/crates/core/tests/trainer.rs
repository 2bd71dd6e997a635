mod common;

use csm_core::clickgraph::{ClickGraph, ClickMatrix};
use csm_core::evaluator::JudgmentSet;
use csm_core::image_encoder::{InitScheme, LayerSpec, NetworkSpec};
use csm_core::objective::NormScope;
use csm_core::synthgen::{generate_dataset, render_image, ConceptSpec, GenerationConfig, SyntheticDataset};
use csm_core::trainer::{split_queries, train, train_with_observer, triple_accuracy, validation_margin, TrainerConfig};
use csm_core::CsmError;

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let ds = common::small_dataset(1);
    let cfg = common::small_trainer(16);
    let (a, ha) = train(&ds, &cfg).unwrap();
    let (b, hb) = train(&ds, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let margins = |h: &csm_core::trainer::TrainingHistory| h.records.iter().map(|r| r.validation_margin).collect::<Vec<_>>();
    assert_eq!(margins(&ha), margins(&hb));
    assert!(ha.records.windows(2).all(|w| w[0].wall_time_s <= w[1].wall_time_s));
}

#[test]
fn every_step_respects_the_norm_ball() {
    let ds = common::small_dataset(1);
    for (scope, radius) in [(NormScope::Global, 1.0), (NormScope::PerLayer, 0.5)] {
        let cfg = TrainerConfig { norm_scope: scope, norm_radius: radius, max_epochs: 2, ..common::small_trainer(16) };
        let mut steps = 0;
        train_with_observer(&ds, &cfg, &mut |s| {
            steps += 1;
            if scope == NormScope::Global {
                assert!(s.image_norm <= radius && s.text_norm <= radius, "{s:?}");
            }
        })
        .unwrap();
        assert!(steps > 0);
    }
}

#[test]
fn split_is_disjoint_and_seeded() {
    let ds = common::small_dataset(1);
    let cfg = common::small_trainer(16);
    let s = split_queries(&ds, &cfg);
    assert_eq!(s, split_queries(&ds, &cfg));
    let mut all: Vec<u32> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
    let n = all.len();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), n);
    assert_eq!(s.test.len(), (ds.queries.len() as f64 * cfg.test_fraction).round() as usize);
}

#[test]
fn dataset_without_negatives_is_untrainable() {
    let mut ds = common::small_dataset(1);
    let (ni, nq) = (ds.images.len(), ds.queries.len());
    ds.clicks = ClickMatrix::from_pairs(ni, nq, (0..ni as u32).flat_map(|i| (0..nq as u32).map(move |q| (i, q)))).unwrap();
    let e = train(&ds, &common::small_trainer(16)).unwrap_err();
    assert!(matches!(e, CsmError::Untrainable(_)), "{e}");
}

#[test]
fn oversized_batch_is_a_config_error() {
    let ds = common::small_dataset(1);
    let cfg = TrainerConfig { batch_size_queries: 10_000, ..common::small_trainer(16) };
    assert!(matches!(train(&ds, &cfg), Err(CsmError::Config { .. })));
}

#[test]
fn tiny_network_improves_train_margin_on_default_data() {
    let ds = generate_dataset(&GenerationConfig::default(), 7).unwrap();
    let cfg = TrainerConfig {
        max_epochs: 10,
        batch_size_queries: 64,
        network: Some(NetworkSpec {
            input_shape: [3, 32, 32],
            layers: vec![
                LayerSpec::Conv { out_channels: 4, kernel: 5, stride: 2, padding: 2, relu: true },
                LayerSpec::pool(4, 4),
                LayerSpec::fc(16, false),
            ],
        }),
        init: InitScheme::He,
        norm_scope: NormScope::PerLayer,
        norm_radius: 10.0,
        word_init_std: 0.05,
        seed: 7,
        ..TrainerConfig::default()
    };
    let (_, history) = train(&ds, &cfg).unwrap();
    let first = history.records.first().unwrap();
    let at_ten = history.records.iter().find(|r| r.epoch == 10).unwrap_or_else(|| history.records.last().unwrap());
    assert!(at_ten.train_margin > first.train_margin, "{:?} vs {:?}", at_ten, first);
}

/// Two concepts whose images differ in colour only; a linear tower can
/// separate them.
fn separable_dataset() -> SyntheticDataset {
    let concepts: Vec<ConceptSpec> = vec![ConceptSpec::nth(0), ConceptSpec::nth(7)];
    let image_concepts: Vec<u32> = (0..40).map(|i| i % 2).collect();
    let images = image_concepts
        .iter()
        .enumerate()
        .map(|(i, &c)| render_image(&concepts[c as usize], 16, i as u64))
        .collect::<Result<Vec<_>, _>>()
        .unwrap();
    let query_concepts: Vec<u32> = (0..60).map(|q| q % 2).collect();
    let queries: Vec<String> = query_concepts.iter().map(|&c| concepts[c as usize].words[0].clone()).collect();
    let pairs = (0..40u32).flat_map(|i| (0..60u32).filter(move |q| q % 2 == i % 2).map(move |q| (i, q)));
    let clicks = ClickMatrix::from_pairs(40, 60, pairs).unwrap();
    SyntheticDataset {
        config: GenerationConfig { num_concepts: 2, num_images: 40, num_queries: 60, image_size: 16, ..Default::default() },
        seed: 0,
        config_digest: String::new(),
        concepts,
        images,
        image_concepts,
        queries,
        query_concepts,
        clicks,
        spurious_clicks: Default::default(),
        judgments: JudgmentSet::default(),
    }
}

#[test]
fn linear_tower_separates_two_concepts() {
    let ds = separable_dataset();
    let cfg = TrainerConfig {
        batch_size_queries: 10,
        max_epochs: 30,
        initial_lr: 0.05,
        network: Some(NetworkSpec {
            input_shape: [3, 16, 16],
            layers: vec![LayerSpec::fc(4, false)],
        }),
        init: InitScheme::He,
        norm_radius: 5.0,
        word_init_std: 0.1,
        validation_fraction: 0.0,
        test_fraction: 0.0,
        ..TrainerConfig::default()
    };
    let (ckpt, _) = train(&ds, &cfg).unwrap();
    let graph = ClickGraph::new(ds.clicks.clone());
    let queries: Vec<u32> = (0..60).collect();
    let m = validation_margin(ckpt.model(), &ds, &graph, &queries, 5, 1).unwrap();
    let acc = triple_accuracy(ckpt.model(), &ds, &graph, &queries, 5, 1).unwrap();
    assert!(m > 0.0, "margin {m}");
    assert!(acc >= 0.95, "triple accuracy {acc}");
}
