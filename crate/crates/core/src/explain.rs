//! Per-edge global and conditional attention of a scored target, as JSON lines.

use std::io::Write;

use serde::Serialize;

use crate::error::{KcanError, Result};
use crate::graph::EntityId;
use crate::model::KcanModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplainRecord {
    /// `[user, item]` entity names.
    pub target: [String; 2],
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub hop: usize,
    /// Global attention `π̂`.
    pub pi: f64,
    /// Conditional attention at the first LCSAN layer; absent without LCSAN.
    pub alpha: Option<f64>,
    pub alpha_by_layer: Vec<Option<f64>>,
    pub score: f64,
    pub config_hash: String,
}

/// One record per sampled edge of the target's receptive field, every layer
/// evaluated at every node.
pub fn explain(model: &KcanModel<'_>, user: u32, item: EntityId) -> Result<Vec<ExplainRecord>> {
    let graph = model.graph();
    if user as usize >= graph.user_count() || graph.item_of_entity(item).is_none() {
        return Err(KcanError::Config(format!("({user}, {item}) is not a user-item target")));
    }
    let u = graph.user_entity(user);
    let sg = model.subgraph(u, item);
    let pass = model.pass(&sg, true)?;
    let hash = model.config().hash();
    let target = [
        graph.entities.name(u).to_string(),
        graph.entities.name(item).to_string(),
    ];
    let finite = |x: f64| x.is_finite().then_some(x);
    let records = sg
        .edges()
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let alpha_by_layer: Vec<Option<f64>> = match pass.trace() {
                Some(t) => (0..t.layer_count()).map(|j| finite(t.attention(j)[k])).collect(),
                None => Vec::new(),
            };
            ExplainRecord {
                target: target.clone(),
                head: graph.entities.name(e.head).to_string(),
                relation: graph.relations.name(e.relation).to_string(),
                tail: graph.entities.name(e.tail).to_string(),
                hop: e.hop,
                pi: e.attention,
                alpha: alpha_by_layer.first().copied().flatten(),
                alpha_by_layer,
                score: pass.score,
                config_hash: hash.clone(),
            }
        })
        .collect();
    Ok(records)
}

pub fn write_jsonl(records: &[ExplainRecord], mut w: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
