//! Fixtures shared by the engine benchmarks.

use tig_core::graph::Batch;
use tig_core::{Model, SynthConfig, TemporalGraph, TrainConfig};

/// A split synthetic stream with `events` interactions and 8 edge features.
pub fn stream(events: usize) -> TemporalGraph {
    SynthConfig { events, users: 200, items: 50, edge_dim: 8, seed: 3, ..SynthConfig::default() }
        .generate()
        .expect("synthetic stream")
        .chronological_split(0.7, 0.15)
        .expect("split")
}

pub fn model(g: &TemporalGraph, config: &TrainConfig) -> Model {
    Model::new(config, g).expect("model")
}

/// The batch of `size` events ending at `end`, with fixed negatives.
pub fn batch(g: &TemporalGraph, end: usize, size: usize) -> Batch {
    let range = end - size..end;
    let neg_dst = g.events()[range.clone()].iter().map(|e| e.dst).rev().collect();
    Batch { range, neg_dst }
}
