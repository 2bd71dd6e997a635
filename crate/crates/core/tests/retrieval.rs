mod common;

use std::collections::BTreeSet;

use csm_core::evaluator::{match_type, training_query_set, MatchType};
use csm_core::retrieval::{build_index_from_images, neighbors, search, search_model, CheckpointMeta, ImageIndex, ModelCheckpoint};
use csm_core::trainer::initial_model;
use csm_core::{CsmError, Tensor32};

fn setup() -> (csm_core::synthgen::SyntheticDataset, ModelCheckpoint, ImageIndex) {
    let ds = common::small_dataset(2);
    let held_in: Vec<u32> = (0..60).collect();
    let model = initial_model(&ds, &held_in, &common::small_trainer(16)).unwrap();
    let ckpt = ModelCheckpoint::new(model, CheckpointMeta::default()).unwrap();
    let images: Vec<(u32, &Tensor32)> = ds.images.iter().enumerate().map(|(i, x)| (i as u32, x)).collect();
    let index = build_index_from_images(&ckpt, &images).unwrap();
    (ds, ckpt, index)
}

#[test]
fn search_returns_descending_top_k() {
    let (ds, ckpt, index) = setup();
    let r = search(&ckpt, &index, &ds.queries[0], 7, 0).unwrap();
    assert!(!r.oov);
    assert_eq!(r.ranked.len(), 7);
    assert!(r.ranked.entries.windows(2).all(|w| w[0].score >= w[1].score));
    let full = search(&ckpt, &index, &ds.queries[0], 1000, 0).unwrap();
    assert_eq!(full.ranked.len(), index.len());
    assert_eq!(&full.ranked.entries[..7], &r.ranked.entries[..]);
}

#[test]
fn oov_query_gets_seeded_random_ranking() {
    let (_, ckpt, index) = setup();
    let a = search(&ckpt, &index, "zzz qqq", 10, 4).unwrap();
    assert!(a.oov);
    assert_eq!(a, search(&ckpt, &index, "zzz qqq", 10, 4).unwrap());
    assert_ne!(a.ranked, search(&ckpt, &index, "zzz qqq", 10, 5).unwrap().ranked);
    let full = search(&ckpt, &index, "zzz", 1000, 4).unwrap();
    let ids: BTreeSet<u32> = full.ranked.images().collect();
    assert_eq!(ids.len(), index.len());
}

#[test]
fn empty_index_and_zero_k_are_errors() {
    let (ds, ckpt, _) = setup();
    let empty = ImageIndex::new(Vec::new(), ckpt.model().dim(), Vec::new(), ckpt.digest().into()).unwrap();
    assert!(matches!(search(&ckpt, &empty, &ds.queries[0], 5, 0), Err(CsmError::Empty(_))));
    let (_, _, index) = setup();
    assert!(search_model(ckpt.model(), &index, "x", 0, 0).is_err());
}

#[test]
fn neighbors_rank_the_word_itself_first() {
    let (_, ckpt, index) = setup();
    let word = ckpt.model().text.vocab.word(0).to_string();
    let n = neighbors(ckpt.model(), &index, &word, 5).unwrap();
    assert_eq!(n.words[0].0, word);
    assert_eq!(n.images.len(), 5);
    assert!(matches!(neighbors(ckpt.model(), &index, "nope", 5), Err(CsmError::OutOfVocabulary(_))));
}

#[test]
fn match_types_partition_held_out_queries() {
    let (ds, ckpt, _) = setup();
    let training = training_query_set(&ds.queries[..60]);
    let mut counts = [0usize; 3];
    for q in &ds.queries[60..] {
        let t = match_type(q, &training, &ckpt.model().text.vocab);
        counts[t as usize] += 1;
        if t == MatchType::None {
            assert!(ckpt.model().encode_query(q).oov);
        }
    }
    assert_eq!(counts.iter().sum::<usize>(), ds.queries.len() - 60);
}
