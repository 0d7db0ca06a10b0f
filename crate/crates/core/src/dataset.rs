//! A data directory turned into a training graph and a held-out split.

use std::path::Path;

use crate::error::Result;
use crate::graph::{
    load_alignment, load_interactions, load_triples, parse_interactions, parse_triples, split_leave_one_out, unify,
    IdMap, InteractionGraph, RawTriples, UnifiedGraph,
};
use crate::trainer::EvalData;

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const ALIGNMENT_FILE: &str = "alignment.tsv";

/// Graph built from the training interactions plus the held-out edges.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Unified graph over the training interactions only.
    pub graph: UnifiedGraph,
    pub test_edges: Vec<(u32, u32)>,
    /// Items of each user across train and test, sorted.
    pub seen: Vec<Vec<u32>>,
    /// Raw user and item names from the interaction file.
    pub users: IdMap,
    pub items: IdMap,
    pub split_seed: u64,
}

impl Dataset {
    /// Splits `inter` leave-one-out and unifies the training part with the knowledge graph.
    pub fn build(
        inter: &InteractionGraph,
        kg: &RawTriples,
        alignment: &[(String, String)],
        split_seed: u64,
    ) -> Result<Self> {
        let split = split_leave_one_out(inter, split_seed);
        let graph = unify(&inter.with_edges(split.train_edges), kg, alignment)?;
        Ok(Dataset {
            graph,
            test_edges: split.test_edges,
            seen: inter.items_by_user(),
            users: inter.users.clone(),
            items: inter.items.clone(),
            split_seed,
        })
    }

    /// Reads `interactions.tsv`, `triples.tsv` and `alignment.tsv` from `dir`;
    /// the last two may be absent.
    pub fn load(dir: impl AsRef<Path>, split_seed: u64) -> Result<Self> {
        let dir = dir.as_ref();
        let inter = load_interactions(dir.join(INTERACTIONS_FILE))?;
        let triples_path = dir.join(TRIPLES_FILE);
        let kg = if triples_path.exists() {
            load_triples(triples_path)?
        } else {
            RawTriples::default()
        };
        let align_path = dir.join(ALIGNMENT_FILE);
        let alignment = if align_path.exists() {
            load_alignment(align_path)?
        } else {
            Vec::new()
        };
        Self::build(&inter, &kg, &alignment, split_seed)
    }

    pub fn eval_data(&self) -> EvalData<'_> {
        EvalData {
            test_edges: &self.test_edges,
            seen: &self.seen,
        }
    }
}

/// Four users, three aligned items, two genres and a studio: ten entities.
pub fn toy_graph() -> UnifiedGraph {
    let inter = parse_interactions("u1\ti1\nu1\ti2\nu2\ti2\nu2\ti3\nu3\ti1\nu4\ti3\n".as_bytes(), "toy")
        .expect("toy interactions parse");
    let kg = parse_triples(
        "e1\tgenre\tg1\ne2\tgenre\tg1\ne3\tgenre\tg2\ne2\tstudio\ts1\n".as_bytes(),
        "toy",
    )
    .expect("toy triples parse");
    let align: Vec<(String, String)> = (1..=3).map(|k| (format!("i{k}"), format!("e{k}"))).collect();
    unify(&inter, &kg, &align).expect("toy graph unifies")
}
