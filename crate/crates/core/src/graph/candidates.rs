use std::collections::{BTreeMap, BTreeSet};

use super::log::ItemId;
use super::swing::SwingGraph;
use crate::error::{Error, Result};

/// Items reachable from any seed within `k` directed hops, excluding the seeds.
pub fn k_hop_neighborhood(graph: &SwingGraph, seeds: &BTreeSet<ItemId>, k: usize) -> BTreeSet<ItemId> {
    let mut visited: BTreeSet<ItemId> = seeds.clone();
    let mut frontier: Vec<ItemId> = seeds.iter().copied().collect();
    let mut found = BTreeSet::new();
    for _ in 0..k {
        let mut next = Vec::new();
        for item in frontier {
            for e in graph.out_edges(item) {
                if visited.insert(e.to) {
                    found.insert(e.to);
                    next.push(e.to);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    found
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub item: ItemId,
    /// Graph score; `f64::INFINITY` for seed items.
    pub weight: f64,
}

/// Weight-ranked graph neighborhood of the most recent interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub seeds: Vec<ItemId>,
    pub candidates: Vec<Candidate>,
    pub hops: usize,
    pub max_candidates: usize,
}

impl CandidateSet {
    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.candidates.iter().map(|c| c.item)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.candidates.iter().any(|c| c.item == item)
    }
}

/// Builds `C(I_n, G, k)`.
///
/// Seeds are the last `n` distinct history items and sort first, most recent first.
/// Every other reachable item is scored by its best path weight from a seed, where a
/// path's weight is the product of its edge weights (a one-hop neighbor `c` therefore
/// scores `max_i w_ic`). Ties break by ascending item id; the list is cut at `max_candidates`.
pub fn candidate_set(
    graph: &SwingGraph,
    history: &[ItemId],
    n: usize,
    k: usize,
    max_candidates: usize,
) -> Result<CandidateSet> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if n == 0 || max_candidates == 0 {
        return Err(Error::InvalidParameter("window n and max_candidates must be >= 1".into()));
    }
    let window = &history[history.len().saturating_sub(n)..];
    let mut seeds = Vec::new();
    for &item in window.iter().rev() {
        if !seeds.contains(&item) {
            seeds.push(item);
        }
    }

    let mut best: BTreeMap<ItemId, f64> = BTreeMap::new();
    let mut frontier: BTreeMap<ItemId, f64> = seeds.iter().map(|&s| (s, 1.0)).collect();
    for _ in 0..k {
        let mut next: BTreeMap<ItemId, f64> = BTreeMap::new();
        for (&from, &score) in &frontier {
            for e in graph.out_edges(from) {
                if seeds.contains(&e.to) {
                    continue;
                }
                let s = score * e.weight;
                let improves = best.get(&e.to).map_or(true, |&b| s > b);
                if improves {
                    best.insert(e.to, s);
                    let slot = next.entry(e.to).or_insert(s);
                    if s > *slot {
                        *slot = s;
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    let mut neighbors: Vec<Candidate> = best.into_iter().map(|(item, weight)| Candidate { item, weight }).collect();
    neighbors.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.item.cmp(&b.item)));

    let candidates: Vec<Candidate> = seeds
        .iter()
        .map(|&item| Candidate { item, weight: f64::INFINITY })
        .chain(neighbors)
        .take(max_candidates)
        .collect();

    Ok(CandidateSet { seeds, candidates, hops: k, max_candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::swing::SwingParams;

    fn id(x: u64) -> ItemId {
        ItemId(x)
    }

    fn graph(edges: &[(u64, u64, f64)]) -> SwingGraph {
        SwingGraph::from_edges(SwingParams::default(), [], edges.iter().map(|&(a, b, w)| (id(a), id(b), w)))
    }

    fn seeds(xs: &[u64]) -> BTreeSet<ItemId> {
        xs.iter().map(|&x| id(x)).collect()
    }

    #[test]
    fn k_hop_examples() {
        let g = graph(&[(1, 2, 1.0), (2, 3, 1.0)]);
        assert_eq!(k_hop_neighborhood(&g, &seeds(&[1]), 1), seeds(&[2]));
        assert_eq!(k_hop_neighborhood(&g, &seeds(&[1]), 2), seeds(&[2, 3]));
        assert!(k_hop_neighborhood(&graph(&[]), &seeds(&[1]), 3).is_empty());
        // Unknown seeds act as isolated nodes.
        assert!(k_hop_neighborhood(&g, &seeds(&[42]), 2).is_empty());
    }

    #[test]
    fn k_hop_excludes_seeds_on_cycles() {
        let g = graph(&[(1, 2, 1.0), (2, 1, 1.0), (2, 3, 1.0)]);
        assert_eq!(k_hop_neighborhood(&g, &seeds(&[1]), 5), seeds(&[2, 3]));
    }

    #[test]
    fn candidate_ordering_and_truncation() {
        let g = graph(&[(1, 2, 0.5), (1, 3, 0.2)]);
        let c = candidate_set(&g, &[id(1)], 1, 1, 10).unwrap();
        assert_eq!(c.items().collect::<Vec<_>>(), vec![id(1), id(2), id(3)]);
        let c = candidate_set(&g, &[id(1)], 1, 1, 2).unwrap();
        assert_eq!(c.items().collect::<Vec<_>>(), vec![id(1), id(2)]);
        let c = candidate_set(&g, &[id(9)], 1, 1, 10).unwrap();
        assert_eq!(c.items().collect::<Vec<_>>(), vec![id(9)]);
    }

    #[test]
    fn multi_seed_uses_max_weight_and_recency() {
        let g = graph(&[(1, 3, 0.1), (2, 3, 0.9), (1, 4, 0.5), (2, 5, 0.5)]);
        let c = candidate_set(&g, &[id(1), id(2)], 2, 1, 10).unwrap();
        assert_eq!(c.items().collect::<Vec<_>>(), vec![id(2), id(1), id(3), id(4), id(5)]);
        assert_eq!(c.candidates[2].weight, 0.9);
    }

    #[test]
    fn window_limits_seeds() {
        let g = graph(&[(1, 7, 0.5), (2, 8, 0.5)]);
        let c = candidate_set(&g, &[id(1), id(2)], 1, 1, 10).unwrap();
        assert_eq!(c.seeds, vec![id(2)]);
        assert!(!c.contains(id(7)));
    }

    #[test]
    fn two_hop_scores_are_path_products() {
        let g = graph(&[(1, 2, 0.5), (2, 3, 0.5), (1, 4, 0.2)]);
        let c = candidate_set(&g, &[id(1)], 1, 2, 10).unwrap();
        assert_eq!(c.items().collect::<Vec<_>>(), vec![id(1), id(2), id(3), id(4)]);
        assert_eq!(c.candidates[2].weight, 0.25);
    }

    #[test]
    fn empty_history_is_an_error() {
        assert!(candidate_set(&graph(&[]), &[], 1, 1, 3).is_err());
    }
}
