use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{InteractionLog, ItemId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantedStructure {
    /// Items split into equal contiguous blocks; successors are drawn inside the block.
    Block { blocks: usize },
    /// Successors of `i` are `i+1 .. i+out_degree` (mod #items).
    Chain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub items: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub out_degree: usize,
    pub structure: PlantedStructure,
    /// Probability that a step jumps to a uniformly random item.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            items: 1000,
            users: 2000,
            min_len: 6,
            max_len: 15,
            out_degree: 5,
            structure: PlantedStructure::Block { blocks: 50 },
            noise: 0.2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1)", self.noise));
        }
        if self.items < 2 || self.users == 0 {
            return bad("need at least 2 items and 1 user".into());
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        let block = match self.structure {
            PlantedStructure::Block { blocks } => {
                if blocks == 0 || self.items % blocks != 0 {
                    return bad(format!("{} items do not split into {blocks} blocks", self.items));
                }
                self.items / blocks
            }
            PlantedStructure::Chain => self.items,
        };
        if self.out_degree == 0 || self.out_degree >= block {
            return bad(format!("out_degree {} must lie in 1..{block}", self.out_degree));
        }
        Ok(())
    }
}

/// The successor lists used to generate a synthetic log.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedGraph {
    successors: Vec<Vec<ItemId>>,
}

impl PlantedGraph {
    pub fn successors(&self, item: ItemId) -> &[ItemId] {
        self.successors.get(item.0 as usize).map_or(&[], Vec::as_slice)
    }

    pub fn is_edge(&self, from: ItemId, to: ItemId) -> bool {
        self.successors(from).contains(&to)
    }
}

fn plant(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> PlantedGraph {
    let n = spec.items;
    let successors = (0..n)
        .map(|i| match spec.structure {
            PlantedStructure::Chain => (1..=spec.out_degree).map(|k| ItemId(((i + k) % n) as u64)).collect(),
            PlantedStructure::Block { blocks } => {
                let size = n / blocks;
                let start = (i / size) * size;
                let local = i - start;
                // draw from the other size-1 slots of the block
                let mut picks: Vec<usize> = sample(rng, size - 1, spec.out_degree).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|p| ItemId((start + if p >= local { p + 1 } else { p }) as u64)).collect()
            }
        })
        .collect();
    PlantedGraph { successors }
}

/// Random walks on a planted successor graph with uniform jumps at rate `noise`.
/// Item ids are `0..items`, user ids `0..users`, timestamps are positions.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(InteractionLog, PlantedGraph)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let graph = plant(spec, &mut rng);
    let mut seqs = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut cur = ItemId(rng.gen_range(0..spec.items as u64));
        let mut seq = vec![cur];
        while seq.len() < len {
            cur = if rng.gen::<f64>() < spec.noise {
                ItemId(rng.gen_range(0..spec.items as u64))
            } else {
                let succ = graph.successors(cur);
                succ[rng.gen_range(0..succ.len())]
            };
            seq.push(cur);
        }
        seqs.push((UserId(u as u64), seq));
    }
    Ok((InteractionLog::from_sequences(seqs), graph))
}

/// Distinct items reachable in one planted step from any of `items`.
pub fn planted_neighborhood(graph: &PlantedGraph, items: &[ItemId]) -> BTreeSet<ItemId> {
    items.iter().flat_map(|&i| graph.successors(i).iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(log: &InteractionLog) -> Vec<(ItemId, ItemId)> {
        log.users().flat_map(|(_, s)| s.windows(2).map(|w| (w[0].item, w[1].item)).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn noiseless_walks_follow_planted_edges() {
        for structure in [PlantedStructure::Chain, PlantedStructure::Block { blocks: 10 }] {
            let spec = SyntheticSpec { items: 100, users: 50, noise: 0.0, structure, ..Default::default() };
            let (log, g) = generate_synthetic(&spec).unwrap();
            assert_eq!(log.num_users(), 50);
            assert!(pairs(&log).iter().all(|&(a, b)| g.is_edge(a, b)));
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_synthetic(&SyntheticSpec { noise: 1.0, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            items: 1000,
            structure: PlantedStructure::Block { blocks: 7 },
            ..Default::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec { min_len: 9, max_len: 3, ..Default::default() }).is_err());
    }

    #[test]
    fn block_successors_stay_in_block() {
        let spec = SyntheticSpec {
            items: 60,
            structure: PlantedStructure::Block { blocks: 6 },
            out_degree: 4,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = plant(&spec, &mut rng);
        for i in 0..60u64 {
            let s = g.successors(ItemId(i));
            assert_eq!(s.len(), 4);
            assert!(s.iter().all(|j| j.0 / 10 == i / 10 && j.0 != i));
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn edge_coverage_matches_noise_rate() {
        // A step lands on a planted edge when it follows one (1 - noise) or when a
        // uniform jump happens to hit one of the out_degree successors.
        let spec = SyntheticSpec {
            items: 500,
            users: 3000,
            noise: 0.3,
            out_degree: 5,
            structure: PlantedStructure::Block { blocks: 25 },
            ..Default::default()
        };
        let (log, g) = generate_synthetic(&spec).unwrap();
        let all = pairs(&log);
        let hits = all.iter().filter(|&&(a, b)| g.is_edge(a, b)).count() as f64 / all.len() as f64;
        let expected = 0.7 + 0.3 * 5.0 / 500.0;
        let sd = (expected * (1.0 - expected) / all.len() as f64).sqrt();
        assert!((hits - expected).abs() < 5.0 * sd, "{hits} vs {expected}");
        let lens: Vec<usize> = log.users().map(|(_, s)| s.len()).collect();
        assert!(lens.iter().all(|&l| (6..=15).contains(&l)));
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec {
            items: 100,
            users: 20,
            structure: PlantedStructure::Block { blocks: 10 },
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap().0, generate_synthetic(&other).unwrap().0);
    }
}
