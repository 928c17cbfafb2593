//! Dataset ingestion, train/validation/test splitting and synthetic logs.

mod ingest;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::graph::{ItemId, UserId};

pub use ingest::{ingest, read_interactions, write_interactions, DEFAULT_MIN_INTERACTIONS};
pub use split::{split, training_examples, Split, SplitMode};
pub use synth::{generate_synthetic, planted_neighborhood, PlantedGraph, PlantedStructure, SyntheticSpec};

/// A next-item prediction instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: UserId,
    pub history: Vec<ItemId>,
    pub target: ItemId,
}
