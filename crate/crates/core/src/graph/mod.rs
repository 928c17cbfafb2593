//! Interaction logs, the Swing item graph and graph-conditioned candidate sets.

pub mod candidates;
pub mod log;
pub mod swing;

pub use candidates::{candidate_set, k_hop_neighborhood, Candidate, CandidateSet};
pub use log::{Interaction, InteractionLog, ItemId, UserId, MAX_SEQUENCE_LEN};
pub use swing::{build_swing_graph, Edge, SwingGraph, SwingParams};
