//! Random graphs and parameter stores shared by the integration tests.
#![allow(dead_code)]

use kcan::graph::{parse_alignment, parse_interactions, parse_triples, unify, InteractionGraph, RawTriples};
use kcan::params::{init_params, ModelDims, ParameterStore};
use kcan::UnifiedGraph;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Raw text of a small random dataset: interactions, KG triples, alignment.
#[derive(Debug, Clone)]
pub struct RandomText {
    pub interactions: String,
    pub triples: String,
    pub alignment: String,
}

/// Up to 6 users and items, up to 6 KG-only entities and 3 relations.
/// Every user interacts with at least one item and only interacted items are
/// aligned; KG triples have no self-loops.
pub fn random_text(seed: u64) -> RandomText {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = rng.random_range(1..=6);
    let items = rng.random_range(1..=6);
    let mut interactions = String::new();
    let mut seen = vec![false; items];
    for u in 0..users {
        let mut mine: Vec<usize> = (0..items).collect();
        mine.shuffle(&mut rng);
        for i in mine.into_iter().take(rng.random_range(1..=items)) {
            seen[i] = true;
            interactions.push_str(&format!("u{u}\ti{i}\n"));
        }
    }
    let aligned: Vec<usize> = (0..items).filter(|&i| seen[i] && rng.random_bool(0.6)).collect();
    let alignment: String = aligned.iter().map(|i| format!("i{i}\tent{i}\n")).collect();
    let mut names: Vec<String> = aligned.iter().map(|i| format!("ent{i}")).collect();
    names.extend((0..rng.random_range(0..=6)).map(|k| format!("k{k}")));
    let relations = rng.random_range(1..=3);
    let mut triples = String::new();
    if names.len() >= 2 {
        for _ in 0..rng.random_range(0..=12) {
            let h = rng.random_range(0..names.len());
            let mut t = rng.random_range(0..names.len() - 1);
            if t >= h {
                t += 1;
            }
            let r = rng.random_range(0..relations);
            triples.push_str(&format!("{}\tr{r}\t{}\n", names[h], names[t]));
        }
    }
    RandomText {
        interactions,
        triples,
        alignment,
    }
}

impl RandomText {
    pub fn parts(&self) -> (InteractionGraph, RawTriples, Vec<(String, String)>) {
        (
            parse_interactions(self.interactions.as_bytes(), "interactions").unwrap(),
            parse_triples(self.triples.as_bytes(), "triples").unwrap(),
            parse_alignment(self.alignment.as_bytes(), "alignment").unwrap(),
        )
    }

    pub fn graph(&self) -> UnifiedGraph {
        let (inter, kg, align) = self.parts();
        unify(&inter, &kg, &align).unwrap()
    }
}

pub fn random_graph(seed: u64) -> UnifiedGraph {
    random_text(seed).graph()
}

pub fn dims_for(graph: &UnifiedGraph, embed_dim: usize, tower: &[usize], out_dim: usize) -> ModelDims {
    ModelDims {
        entity_count: graph.entity_count(),
        relation_count: graph.relation_count(),
        embed_dim,
        tower: tower.to_vec(),
        out_dim,
    }
}

/// Xavier-initialized store with entity rows redrawn uniformly in `[-1, 1]`.
pub fn random_store(graph: &UnifiedGraph, tower: &[usize], seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = dims_for(graph, tower[0], tower, 4);
    let mut store = init_params(&dims, &mut rng).unwrap();
    for x in &mut store.get_mut(kcan::params::ParamId::EntityEmbedding).data {
        *x = rng.random_range(-1.0..1.0);
    }
    store
}

/// Random unit vector of length `n`.
pub fn unit_vector(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
