//! Shared fixtures for the benchmarks.

use fraudgraph_core::datagen::GenConfig;
use fraudgraph_core::experiment::Dataset;
use fraudgraph_core::predictor::{train, Predictor, PredictorConfig, TrainConfig};

/// A planted dataset of `n_txn` transactions.
pub fn dataset(n_txn: usize) -> Dataset {
    Dataset::generate(&GenConfig::new(n_txn, 7)).expect("default generator config is valid")
}

/// Desk-config predictor trained for `epochs` epochs on `data`.
pub fn trained(data: &Dataset, epochs: usize) -> Predictor {
    let cfg = TrainConfig { max_epochs: epochs, ..TrainConfig::desk() };
    train(&data.graph, &data.split, &PredictorConfig::desk(), &cfg, 0).expect("training").0
}
