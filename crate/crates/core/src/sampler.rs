//! Attention-proportional fixed-size neighbor sampling and target subgraphs.

use std::cell::RefCell;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Serialize;

use crate::graph::{EntityId, RelationId, UnifiedGraph};
use crate::kagcn::AttentionCache;

/// `m` independent draws with replacement from `v`'s cache row.
pub fn sample_fixed_neighbors(
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    v: EntityId,
    m: usize,
    rng: &mut impl Rng,
) -> Vec<(RelationId, EntityId)> {
    let nbrs = graph.neighbors(v);
    draw_indices(graph, cache, v, m, None, rng)
        .into_iter()
        .map(|k| nbrs[k])
        .collect()
}

/// Like [`sample_fixed_neighbors`], but never draws an edge whose tail is `exclude`;
/// the remaining weights are renormalized.
pub fn sample_neighbors_excluding(
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    v: EntityId,
    m: usize,
    exclude: Option<EntityId>,
    rng: &mut impl Rng,
) -> Vec<(RelationId, EntityId)> {
    let nbrs = graph.neighbors(v);
    draw_indices(graph, cache, v, m, exclude, rng)
        .into_iter()
        .map(|k| nbrs[k])
        .collect()
}

/// Positions in `graph.neighbors(v)` of `m` attention-weighted draws.
fn draw_indices(
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    v: EntityId,
    m: usize,
    exclude: Option<EntityId>,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let nbrs = graph.neighbors(v);
    if m == 0 || nbrs.is_empty() {
        return Vec::new();
    }
    let blocked = exclude.filter(|x| nbrs.iter().any(|&(_, t)| t == *x));
    match blocked {
        None => match cache.sampler(v) {
            Some(dist) => (0..m).map(|_| dist.sample(rng)).collect(),
            None => Vec::new(),
        },
        Some(x) => {
            let weights = cache
                .row(v)
                .iter()
                .zip(nbrs)
                .map(|(&p, &(_, t))| if t == x { 0.0 } else { p });
            match WeightedIndex::new(weights) {
                Ok(dist) => (0..m).map(|_| dist.sample(rng)).collect(),
                Err(_) => Vec::new(),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubgraphEdge {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    /// 1-based hop at which the edge was first sampled.
    pub hop: usize,
    /// Global attention `π̂` of the edge.
    pub attention: f64,
}

/// Sampled K-hop receptive field of a `(user, item)` target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSubgraph {
    pub user: EntityId,
    pub item: EntityId,
    /// Unique edges sorted by `(head, relation, tail)`.
    edges: Vec<SubgraphEdge>,
    /// Sorted node set, including both targets.
    nodes: Vec<EntityId>,
}

impl TargetSubgraph {
    pub fn edges(&self) -> &[SubgraphEdge] {
        &self.edges
    }

    pub fn nodes(&self) -> &[EntityId] {
        &self.nodes
    }

    /// Unique sampled out-edges of `v` inside the subgraph.
    pub fn neighbors(&self, v: EntityId) -> &[SubgraphEdge] {
        let lo = self.edges.partition_point(|e| e.head < v);
        let hi = self.edges.partition_point(|e| e.head <= v);
        &self.edges[lo..hi]
    }

    /// Subgraph with only the two target nodes.
    pub fn empty(user: EntityId, item: EntityId) -> Self {
        let mut nodes = vec![user, item];
        nodes.sort_unstable();
        nodes.dedup();
        TargetSubgraph {
            user,
            item,
            edges: Vec::new(),
            nodes,
        }
    }
}

/// Options for [`target_subgraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubgraphSpec {
    pub hops: usize,
    pub fanout: usize,
    /// Drop the direct user-item edges between the two targets.
    pub exclude_target_edge: bool,
}

/// Per-thread mark arrays indexed by entity and by adjacency slot. A mark is
/// valid only while it equals the current stamp, so sets reset in O(1).
#[derive(Default)]
struct Marks {
    stamp: u32,
    node: Vec<u32>,
    edge: Vec<u32>,
    edge_pos: Vec<u32>,
}

impl Marks {
    fn prepare(&mut self, entities: usize, slots: usize) {
        if self.node.len() < entities {
            self.node.resize(entities, 0);
        }
        if self.edge.len() < slots {
            self.edge.resize(slots, 0);
            self.edge_pos.resize(slots, 0);
        }
    }

    fn fresh(&mut self) -> u32 {
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.node.fill(0);
            self.edge.fill(0);
            self.stamp = 1;
        }
        self.stamp
    }
}

thread_local! {
    static MARKS: RefCell<Marks> = RefCell::new(Marks::default());
}

fn pack(slot: usize, hop: usize) -> u64 {
    debug_assert!(hop < 256);
    ((slot as u64) << 8) | hop as u64
}

/// Breadth-first expansion from each target, `fanout` attention-weighted draws
/// per frontier node and hop, merged as an edge-set union over both targets.
/// An edge drawn from both sides keeps its smaller hop.
pub fn target_subgraph(
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    user: EntityId,
    item: EntityId,
    spec: SubgraphSpec,
    rng: &mut impl Rng,
) -> TargetSubgraph {
    MARKS.with(|m| expand(&mut m.borrow_mut(), graph, cache, user, item, spec, rng))
}

fn expand(
    marks: &mut Marks,
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    user: EntityId,
    item: EntityId,
    spec: SubgraphSpec,
    rng: &mut impl Rng,
) -> TargetSubgraph {
    marks.prepare(graph.entity_count(), graph.triple_count());
    let other = |v: EntityId| -> Option<EntityId> {
        if !spec.exclude_target_edge {
            None
        } else if v == user {
            Some(item)
        } else if v == item {
            Some(user)
        } else {
            None
        }
    };
    // Adjacency slot in the high bits, hop in the low byte; one entry per distinct edge.
    let mut found: Vec<u64> = Vec::new();
    let edge_set = marks.fresh();
    for root in [user, item] {
        let visited = marks.fresh();
        marks.node[root as usize] = visited;
        let mut frontier = vec![root];
        for hop in 1..=spec.hops {
            let mut next = Vec::new();
            for &v in &frontier {
                let base = graph.adjacency_offset(v);
                let nbrs = graph.neighbors(v);
                for k in draw_indices(graph, cache, v, spec.fanout, other(v), rng) {
                    let slot = base + k;
                    if marks.edge[slot] == edge_set {
                        // Same slot, so the smaller key carries the smaller hop.
                        let p = marks.edge_pos[slot] as usize;
                        found[p] = found[p].min(pack(slot, hop));
                    } else {
                        marks.edge[slot] = edge_set;
                        marks.edge_pos[slot] = found.len() as u32;
                        found.push(pack(slot, hop));
                    }
                    let t = nbrs[k].1;
                    if marks.node[t as usize] != visited {
                        marks.node[t as usize] = visited;
                        next.push(t);
                    }
                }
            }
            frontier = next;
        }
    }
    // Slots follow the (head, relation, tail) order of the triples.
    found.sort_unstable();
    let edges: Vec<SubgraphEdge> = found
        .iter()
        .map(|&key| {
            let (slot, hop) = ((key >> 8) as usize, (key & 0xff) as usize);
            let t = graph.triples[slot];
            SubgraphEdge {
                head: t.head,
                relation: t.relation,
                tail: t.tail,
                hop,
                attention: cache.row(t.head)[slot - graph.adjacency_offset(t.head)],
            }
        })
        .collect();
    let in_nodes = marks.fresh();
    let mut nodes = Vec::new();
    for v in edges.iter().flat_map(|e| [e.head, e.tail]).chain([user, item]) {
        if marks.node[v as usize] != in_nodes {
            marks.node[v as usize] = in_nodes;
            nodes.push(v);
        }
    }
    nodes.sort_unstable();
    TargetSubgraph {
        user,
        item,
        edges,
        nodes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse_interactions, parse_triples, unify, RawTriples};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_graph() -> (UnifiedGraph, EntityId, EntityId) {
        // u -interact-> i only; i -r-> a -r-> b as KG. Inverses give extra edges.
        let inter = parse_interactions("u\ti\n".as_bytes(), "i").unwrap();
        let kg = parse_triples("ei\tr\ta\na\tr\tb\n".as_bytes(), "k").unwrap();
        let g = unify(&inter, &kg, &[("i".into(), "ei".into())]).unwrap();
        let u = g.user_entity(0);
        let i = g.item_entity(0);
        (g, u, i)
    }

    #[test]
    fn forced_and_empty_draws() {
        let (g, _, _) = chain_graph();
        let cache = AttentionCache::uniform(&g);
        let b = g.entities.get("b").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // b has exactly one out-edge (inverse to a).
        let draws = sample_fixed_neighbors(&g, &cache, b, 7, &mut rng);
        assert_eq!(draws.len(), 7);
        assert!(draws.iter().all(|d| *d == g.neighbors(b)[0]));
        assert!(sample_fixed_neighbors(&g, &cache, b, 0, &mut rng).is_empty());
    }

    #[test]
    fn isolated_targets_give_two_nodes() {
        let inter = parse_interactions("u\ti\nv\tj\n".as_bytes(), "i").unwrap();
        let g = unify(&inter, &RawTriples::default(), &[]).unwrap();
        let cache = AttentionCache::uniform(&g);
        let spec = SubgraphSpec {
            hops: 2,
            fanout: 5,
            exclude_target_edge: true,
        };
        // (u, i) with the direct edge excluded leaves both isolated.
        let sg = target_subgraph(
            &g,
            &cache,
            g.user_entity(0),
            g.item_entity(0),
            spec,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert_eq!(sg.nodes().len(), 2);
        assert!(sg.edges().is_empty());
    }

    #[test]
    fn two_hop_chain_is_reached() {
        let (g, u, i) = chain_graph();
        let cache = AttentionCache::uniform(&g);
        let a = g.entities.get("a").unwrap();
        let spec = SubgraphSpec {
            hops: 2,
            fanout: 3,
            exclude_target_edge: false,
        };
        for seed in 0..20 {
            let sg = target_subgraph(&g, &cache, u, i, spec, &mut ChaCha8Rng::seed_from_u64(seed));
            // u's only neighbor is i; i's neighbors are u and a: a is reachable from u in two hops.
            assert!(sg.nodes().contains(&a));
            for e in sg.edges() {
                assert!(g.contains(e.head, e.relation, e.tail));
                if e.hop == 1 {
                    assert!(e.head == u || e.head == i);
                }
            }
        }
    }

    #[test]
    fn exclusion_removes_direct_edge() {
        let (g, u, i) = chain_graph();
        let cache = AttentionCache::uniform(&g);
        let spec = SubgraphSpec {
            hops: 1,
            fanout: 10,
            exclude_target_edge: true,
        };
        let sg = target_subgraph(&g, &cache, u, i, spec, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(sg.neighbors(u).is_empty());
        assert!(sg.neighbors(i).iter().all(|e| e.tail != u));
        assert!(!sg.neighbors(i).is_empty());
    }

    #[test]
    fn same_seed_same_subgraph() {
        let (g, u, i) = chain_graph();
        let cache = AttentionCache::uniform(&g);
        let spec = SubgraphSpec {
            hops: 2,
            fanout: 4,
            exclude_target_edge: false,
        };
        let a = target_subgraph(&g, &cache, u, i, spec, &mut ChaCha8Rng::seed_from_u64(42));
        let b = target_subgraph(&g, &cache, u, i, spec, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }
}
