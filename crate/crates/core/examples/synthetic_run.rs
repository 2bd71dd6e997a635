//! Generates the synthetic corpus, trains, and prints held-out DCG@25.
//!
//! `cargo run --release -p csm-core --example synthetic_run -- [trainer.json]`

use std::collections::BTreeSet;
use std::time::Instant;

use csm_core::evaluator::{evaluate, training_query_set};
use csm_core::retrieval::build_index_from_images;
use csm_core::synthgen::{generate_dataset, GenerationConfig};
use csm_core::trainer::{train, triple_accuracy, TrainerConfig};
use csm_core::clickgraph::ClickGraph;

fn main() -> csm_core::Result<()> {
    let config: TrainerConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainerConfig::default(),
    };
    let gen = GenerationConfig { num_queries: 700, ..GenerationConfig::default() };
    let ds = generate_dataset(&gen, 7)?;
    let t = Instant::now();
    let (ckpt, history) = train(&ds, &config)?;
    for r in &history.records {
        println!(
            "epoch {:>3} step {:>4} train {:+.5} val {:+.5} lr {:.0e} {:?}",
            r.epoch, r.step, r.train_margin, r.validation_margin, r.lr, r.action
        );
    }
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    for b in ckpt.model().image.params.blocks() {
        println!("layer {:>2} weight norm {:.3} bias norm {:.3}", b.layer, b.weight.norm(), b.bias.norm());
    }
    println!("word table norm {:.3}", ckpt.model().text.table.as_slice().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt());

    let images: Vec<(u32, &csm_core::Tensor32)> = ds.images.iter().enumerate().map(|(i, x)| (i as u32, x)).collect();
    let index = build_index_from_images(&ckpt, &images)?;
    let split = ckpt.meta().split.clone().expect("split");
    let test: BTreeSet<u32> = split.test.iter().copied().collect();
    let queries = ds.queries.iter().enumerate().map(|(i, q)| (i as u32, q.clone())).collect();
    let training = training_query_set(&ckpt.meta().training_queries);
    let res = evaluate(ckpt.model(), &index, &ds.judgments.restricted_to(&test), &queries, &training, 25, 7)?;
    println!("test DCG@25 model {:.4} random {:.4} ideal {:.4}", res.mean_model, res.mean_random, res.mean_ideal);
    let graph = ClickGraph::new(ds.clicks.clone());
    let acc = triple_accuracy(ckpt.model(), &ds, &graph, &split.train, config.negatives_per_query, 99)?;
    println!("held-in triple accuracy {acc:.4}");
    Ok(())
}
