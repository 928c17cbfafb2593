//! Swing item-item graph.
//!
//! For an ordered pair `(i, j)` with common users `K_ij = U_i ∩ U_j`:
//!
//! ```text
//! Sim(i, j) = 1/sqrt(|U_j|) * Σ_{u ∈ K̂_ij} Σ_{v ∈ K̂_ij, v ≠ u} w_uv
//! w_uv      = 1 / ((|I_u| + α1)^β (|I_v| + α1)^β) * 1 / (|I_u ∩ I_v| + α2)
//! ```
//!
//! `K̂_ij` is `K_ij` itself, or a seeded uniform sample (without replacement) of
//! size `M` when `|K_ij| > M`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::log::{InteractionLog, ItemId};
use crate::error::{Error, Result};
use crate::seed::mix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    /// Cap `M` on the number of common users per pair.
    pub max_common_users: usize,
    pub seed: u64,
}

impl Default for SwingParams {
    fn default() -> Self {
        Self { alpha1: 5.0, alpha2: 1.0, beta: 0.3, max_common_users: 200, seed: 42 }
    }
}

impl SwingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0) || !self.alpha1.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha1 must be >= 0, got {}", self.alpha1)));
        }
        if !(self.alpha2 > 0.0) || !self.alpha2.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha2 must be > 0, got {}", self.alpha2)));
        }
        if !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be finite, got {}", self.beta)));
        }
        if self.max_common_users < 2 {
            return Err(Error::InvalidParameter(format!(
                "max_common_users must be >= 2, got {}",
                self.max_common_users
            )));
        }
        Ok(())
    }

    fn header(&self) -> String {
        format!(
            "#swing alpha1={} alpha2={} beta={} max_common_users={} seed={}",
            self.alpha1, self.alpha2, self.beta, self.max_common_users, self.seed
        )
    }

    fn parse_header(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::Parse { line: 1, msg };
        let rest = line.strip_prefix("#swing").ok_or_else(|| bad("missing '#swing' header".into()))?;
        let mut params = SwingParams::default();
        let mut seen = BTreeSet::new();
        for field in rest.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| bad(format!("malformed header field '{field}'")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "alpha1" => params.alpha1 = num(value)?,
                "alpha2" => params.alpha2 = num(value)?,
                "beta" => params.beta = num(value)?,
                "max_common_users" => {
                    params.max_common_users = value.parse().map_err(|e| bad(format!("{key}: {e}")))?
                }
                "seed" => params.seed = value.parse().map_err(|e| bad(format!("{key}: {e}")))?,
                other => return Err(bad(format!("unknown header key '{other}'"))),
            }
            seen.insert(key.to_string());
        }
        if seen.len() != 5 {
            return Err(bad("header must carry alpha1, alpha2, beta, max_common_users, seed".into()));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub to: ItemId,
    pub weight: f64,
}

/// Directed weighted item graph. Out-edges are sorted by (weight desc, item-id asc).
#[derive(Debug, Clone, PartialEq)]
pub struct SwingGraph {
    params: SwingParams,
    nodes: BTreeSet<ItemId>,
    out: BTreeMap<ItemId, Vec<Edge>>,
}

/// Orders edges by descending weight, then ascending target id.
pub(crate) fn edge_order(a: &Edge, b: &Edge) -> std::cmp::Ordering {
    b.weight.total_cmp(&a.weight).then(a.to.cmp(&b.to))
}

impl SwingGraph {
    /// Assembles a graph from explicit edges. Self-edges and non-positive weights are dropped.
    pub fn from_edges(
        params: SwingParams,
        nodes: impl IntoIterator<Item = ItemId>,
        edges: impl IntoIterator<Item = (ItemId, ItemId, f64)>,
    ) -> Self {
        let mut node_set: BTreeSet<ItemId> = nodes.into_iter().collect();
        let mut out: BTreeMap<ItemId, Vec<Edge>> = BTreeMap::new();
        for (from, to, weight) in edges {
            if from == to || !(weight > 0.0) {
                continue;
            }
            node_set.insert(from);
            node_set.insert(to);
            out.entry(from).or_default().push(Edge { to, weight });
        }
        for list in out.values_mut() {
            list.sort_by(edge_order);
            list.dedup_by_key(|e| e.to);
        }
        Self { params, nodes: node_set, out }
    }

    pub fn params(&self) -> &SwingParams {
        &self.params
    }

    pub fn nodes(&self) -> &BTreeSet<ItemId> {
        &self.nodes
    }

    pub fn out_edges(&self, item: ItemId) -> &[Edge] {
        self.out.get(&item).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn weight(&self, from: ItemId, to: ItemId) -> Option<f64> {
        self.out_edges(from).iter().find(|e| e.to == to).map(|e| e.weight)
    }

    pub fn num_edges(&self) -> usize {
        self.out.values().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (ItemId, &Edge)> {
        self.out.iter().flat_map(|(from, list)| list.iter().map(move |e| (*from, e)))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = String::new();
        writeln!(buf, "{}", self.params.header()).unwrap();
        for (from, e) in self.edges() {
            writeln!(buf, "{}\t{}\t{}", from, e.to, e.weight).unwrap();
        }
        w.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty graph file".into() })??;
        let params = Self::parse_header(&header)?;
        let mut edges = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = n + 2;
            let bad = |msg: String| Error::Parse { line: lineno, msg };
            let mut fields = line.split('\t');
            let (Some(a), Some(b), Some(w), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
                return Err(bad("expected 3 tab-separated fields".into()));
            };
            let from = a.parse().map_err(|e| bad(format!("source id: {e}")))?;
            let to = b.parse().map_err(|e| bad(format!("target id: {e}")))?;
            let weight: f64 = w.parse().map_err(|e| bad(format!("weight: {e}")))?;
            edges.push((ItemId(from), ItemId(to), weight));
        }
        Ok(Self::from_edges(params, [], edges))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    fn parse_header(line: &str) -> Result<SwingParams> {
        SwingParams::parse_header(line.trim_end())
    }
}

/// splitmix64 finalizer, used to derive independent per-pair seeds.
fn pair_seed(seed: u64, i: ItemId, j: ItemId) -> u64 {
    mix(mix(mix(seed) ^ i.0) ^ j.0.rotate_left(32))
}

fn sorted_intersection_len(a: &[ItemId], b: &[ItemId]) -> usize {
    let (mut x, mut y, mut n) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                x += 1;
                y += 1;
            }
        }
    }
    n
}

/// Builds the Swing graph from a preprocessed interaction log.
pub fn build_swing_graph(log: &InteractionLog, params: &SwingParams) -> Result<SwingGraph> {
    params.validate()?;
    if log.is_empty() {
        return Err(Error::NoInteractions);
    }

    // Distinct item sets per user, in user-id order.
    let user_items: Vec<Vec<ItemId>> = log
        .users()
        .map(|(_, seq)| {
            let set: BTreeSet<ItemId> = seq.iter().map(|x| x.item).collect();
            set.into_iter().collect()
        })
        .collect();
    let activity: Vec<f64> =
        user_items.iter().map(|items| (items.len() as f64 + params.alpha1).powf(params.beta)).collect();

    let mut item_users: BTreeMap<ItemId, Vec<usize>> = BTreeMap::new();
    for (u, items) in user_items.iter().enumerate() {
        for &i in items {
            item_users.entry(i).or_default().push(u);
        }
    }
    let items: Vec<ItemId> = item_users.keys().copied().collect();

    let pair_weight = |u: usize, v: usize| -> f64 {
        let overlap = sorted_intersection_len(&user_items[u], &user_items[v]) as f64;
        let act = 1.0 / (activity[u] * activity[v]);
        let pen = 1.0 / (overlap + params.alpha2);
        act * pen
    };

    let adjacency: Vec<(ItemId, Vec<Edge>)> = items
        .par_iter()
        .map(|&i| {
            let mut common: BTreeMap<ItemId, Vec<usize>> = BTreeMap::new();
            for &u in &item_users[&i] {
                for &j in &user_items[u] {
                    if j != i {
                        common.entry(j).or_default().push(u);
                    }
                }
            }
            let mut edges = Vec::new();
            for (j, mut users) in common {
                if users.len() < 2 {
                    continue;
                }
                if users.len() > params.max_common_users {
                    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(params.seed, i, j));
                    let mut picked =
                        rand::seq::index::sample(&mut rng, users.len(), params.max_common_users).into_vec();
                    picked.sort_unstable();
                    users = picked.into_iter().map(|k| users[k]).collect();
                }
                let mut sum = 0.0;
                for &u in &users {
                    for &v in &users {
                        if u != v {
                            sum += pair_weight(u, v);
                        }
                    }
                }
                let norm = 1.0 / (item_users[&j].len() as f64).sqrt();
                let weight = norm * sum;
                if weight > 0.0 {
                    edges.push(Edge { to: j, weight });
                }
            }
            edges.sort_by(edge_order);
            (i, edges)
        })
        .collect();

    let nodes: BTreeSet<ItemId> = items.iter().copied().collect();
    let out = adjacency.into_iter().filter(|(_, e)| !e.is_empty()).collect();
    Ok(SwingGraph { params: *params, nodes, out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::log::UserId;

    fn log(seqs: &[(u64, &[u64])]) -> InteractionLog {
        InteractionLog::from_sequences(
            seqs.iter().map(|(u, items)| (UserId(*u), items.iter().map(|&i| ItemId(i)).collect())),
        )
    }

    fn params(a1: f64, a2: f64, beta: f64) -> SwingParams {
        SwingParams { alpha1: a1, alpha2: a2, beta, max_common_users: 100, seed: 7 }
    }

    #[test]
    fn two_user_hand_example() {
        let g = build_swing_graph(&log(&[(1, &[1, 2]), (2, &[1, 2])]), &params(1.0, 1.0, 0.5)).unwrap();
        let w = g.weight(ItemId(1), ItemId(2)).unwrap();
        assert!((w - 2f64.sqrt() / 9.0).abs() < 1e-12, "{w}");
        assert_eq!(g.weight(ItemId(2), ItemId(1)), Some(w));
    }

    #[test]
    fn single_common_user_gives_no_edge() {
        let g = build_swing_graph(&log(&[(1, &[1, 2]), (2, &[3])]), &params(1.0, 1.0, 0.5)).unwrap();
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn disjoint_users_give_no_edge() {
        let g =
            build_swing_graph(&log(&[(1, &[1, 3]), (2, &[1, 3]), (3, &[2, 4]), (4, &[2, 4])]), &params(1.0, 1.0, 0.5))
                .unwrap();
        assert_eq!(g.weight(ItemId(1), ItemId(2)), None);
        assert!(g.weight(ItemId(1), ItemId(3)).is_some());
    }

    #[test]
    fn empty_log_is_rejected() {
        let err = build_swing_graph(&InteractionLog::new(), &params(1.0, 1.0, 0.5)).unwrap_err();
        assert_eq!(err.to_string(), "no interactions");
    }

    #[test]
    fn zero_alpha2_rejected() {
        let err = build_swing_graph(&log(&[(1, &[1, 2])]), &params(1.0, 0.0, 0.5)).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn popularity_normalization_direction() {
        let base = log(&[(1, &[1, 2]), (2, &[1, 2]), (3, &[2, 5])]);
        let g0 = build_swing_graph(&base, &params(1.0, 1.0, 0.0)).unwrap();
        // A new user of item 2 who never touches item 1.
        let more = log(&[(1, &[1, 2]), (2, &[1, 2]), (3, &[2, 5]), (4, &[2, 6])]);
        let g1 = build_swing_graph(&more, &params(1.0, 1.0, 0.0)).unwrap();
        let w0 = g0.weight(ItemId(1), ItemId(2)).unwrap();
        let w1 = g1.weight(ItemId(1), ItemId(2)).unwrap();
        assert!(w1 < w0);
        assert!((w0 * (3f64).sqrt() / 2.0 - w1).abs() < 1e-15);

        // Giving every user of item 2 an extra unrelated item leaves |U_2| alone.
        let dup = log(&[(1, &[1, 2, 99]), (2, &[1, 2, 99]), (3, &[2, 5, 99])]);
        let g2 = build_swing_graph(&dup, &params(1.0, 1.0, 0.0)).unwrap();
        let w2 = g2.weight(ItemId(1), ItemId(2)).unwrap();
        let expected = (1.0 / 3f64.sqrt()) * 2.0 * (1.0 / (3.0 + 1.0));
        assert!((w2 - expected).abs() < 1e-15);
    }

    #[test]
    fn sampling_caps_common_users_deterministically() {
        let seqs: Vec<(u64, Vec<u64>)> = (0..12).map(|u| (u, vec![1, 2, 10 + u % 3])).collect();
        let l = InteractionLog::from_sequences(
            seqs.iter().map(|(u, s)| (UserId(*u), s.iter().map(|&i| ItemId(i)).collect())),
        );
        let mut p = params(1.0, 1.0, 0.5);
        p.max_common_users = 4;
        let a = build_swing_graph(&l, &p).unwrap();
        let b = build_swing_graph(&l, &p).unwrap();
        assert_eq!(a, b);
        let full = build_swing_graph(&l, &params(1.0, 1.0, 0.5)).unwrap();
        assert!(a.weight(ItemId(1), ItemId(2)).unwrap() < full.weight(ItemId(1), ItemId(2)).unwrap());
    }

    #[test]
    fn out_edges_strictly_sorted() {
        let g = build_swing_graph(
            &log(&[(1, &[1, 2, 3]), (2, &[1, 2, 3]), (3, &[1, 3]), (4, &[1, 3, 4]), (5, &[1, 4])]),
            &params(1.0, 1.0, 0.5),
        )
        .unwrap();
        for i in g.nodes() {
            let es = g.out_edges(*i);
            for w in es.windows(2) {
                assert_eq!(edge_order(&w[0], &w[1]), std::cmp::Ordering::Less);
            }
            assert!(es.iter().all(|e| e.to != *i && e.weight >= 0.0));
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let g = build_swing_graph(
            &log(&[(1, &[1, 2, 3]), (2, &[1, 2, 3]), (3, &[1, 3]), (4, &[1, 3, 4]), (5, &[1, 4])]),
            &params(0.3, 0.7, 0.45),
        )
        .unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let back = SwingGraph::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.params(), g.params());
        let a: Vec<_> = g.edges().map(|(f, e)| (f, e.to, e.weight.to_bits())).collect();
        let b: Vec<_> = back.edges().map(|(f, e)| (f, e.to, e.weight.to_bits())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_graph_lines_are_reported() {
        let text = "#swing alpha1=1 alpha2=1 beta=0.5 max_common_users=4 seed=1\n1\t2\n";
        let err = SwingGraph::read_from(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = SwingGraph::read_from("1\t2\t0.5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
