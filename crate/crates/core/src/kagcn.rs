//! Knowledge-aware attention over the unified graph and the global aggregation layer.

use rand::distr::weighted::WeightedIndex;

use crate::error::{KcanError, Result};
use crate::graph::{EntityId, RelationId, UnifiedGraph};
use crate::linalg::{axpy, dot, leaky_relu, leaky_relu_grad, matvec, matvec_t_acc, norm2, outer_acc, softmax_in_place};
use crate::par::ExecPolicy;
use crate::params::{GradientSet, ParamId, ParameterStore, Tensor};
use crate::transh::project_in_place;

const COS_EPS: f64 = 1e-12;

/// Cosine between the translated projected head and the projected tail.
pub fn edge_logit(store: &ParameterStore, v: EntityId, r: RelationId, t: EntityId) -> f64 {
    let w = store.normal(r);
    let mut x = store.entity(v).to_vec();
    project_in_place(&mut x, w);
    axpy(1.0, store.translation(r), &mut x);
    let mut y = store.entity(t).to_vec();
    project_in_place(&mut y, w);
    cosine(&x, &y)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let denom = (norm2(x) * norm2(y)).max(COS_EPS);
    (dot(x, y) / denom).clamp(-1.0, 1.0)
}

/// Per-node attention distributions over out-edges, aligned with the graph adjacency.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    offsets: Vec<usize>,
    weights: Vec<f64>,
    samplers: Vec<Option<WeightedIndex<f64>>>,
    epoch: u64,
}

impl AttentionCache {
    fn from_rows(graph: &UnifiedGraph, rows: Vec<Vec<f64>>, epoch: u64) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut weights = Vec::with_capacity(graph.triple_count());
        let mut samplers = Vec::with_capacity(rows.len());
        for row in rows {
            samplers.push(if row.is_empty() {
                None
            } else {
                WeightedIndex::new(row.iter().copied()).ok()
            });
            weights.extend(row);
            offsets.push(weights.len());
        }
        AttentionCache {
            offsets,
            weights,
            samplers,
            epoch,
        }
    }

    /// Uniform attention `1/|N(v)|`, used when global attention is ablated.
    pub fn uniform(graph: &UnifiedGraph) -> Self {
        let rows = (0..graph.entity_count() as EntityId)
            .map(|v| {
                let d = graph.degree(v);
                vec![1.0 / d.max(1) as f64; d]
            })
            .collect();
        Self::from_rows(graph, rows, 0)
    }

    /// Weights of `v`'s out-edges, in the order of `graph.neighbors(v)`.
    pub fn row(&self, v: EntityId) -> &[f64] {
        let v = v as usize;
        &self.weights[self.offsets[v]..self.offsets[v + 1]]
    }

    pub(crate) fn sampler(&self, v: EntityId) -> Option<&WeightedIndex<f64>> {
        self.samplers[v as usize].as_ref()
    }

    pub fn entity_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Attention of one edge, if it exists.
    pub fn weight(&self, graph: &UnifiedGraph, v: EntityId, r: RelationId, t: EntityId) -> Option<f64> {
        graph.neighbors(v).binary_search(&(r, t)).ok().map(|k| self.row(v)[k])
    }
}

/// Softmax of edge logits over each node's out-edges.
pub fn build_attention_cache(
    graph: &UnifiedGraph,
    store: &ParameterStore,
    epoch: u64,
    exec: ExecPolicy,
) -> AttentionCache {
    let rows = exec.map_range(graph.entity_count(), |v| {
        let v = v as EntityId;
        let mut row: Vec<f64> = graph
            .neighbors(v)
            .iter()
            .map(|&(r, t)| edge_logit(store, v, r, t))
            .collect();
        softmax_in_place(&mut row);
        row
    });
    AttentionCache::from_rows(graph, rows, epoch)
}

/// `Σ π̂_r(v,t) · e_t` over `v`'s neighbors; zero for an isolated node.
pub fn aggregate_neighborhood(
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    v: EntityId,
    embeddings: &Tensor,
) -> Vec<f64> {
    let mut out = vec![0.0; embeddings.cols];
    for (&(_, t), &p) in graph.neighbors(v).iter().zip(cache.row(v)) {
        axpy(p, embeddings.row(t as usize), &mut out);
    }
    out
}

/// Forward state of the global layer for a set of nodes, kept for backprop.
#[derive(Debug, Clone)]
pub struct GlobalForward {
    nodes: Vec<EntityId>,
    dim: usize,
    inputs: Vec<f64>,
    pre: Vec<f64>,
    out: Vec<f64>,
}

impl GlobalForward {
    pub fn nodes(&self) -> &[EntityId] {
        &self.nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn index_of(&self, v: EntityId) -> Option<usize> {
        self.nodes.binary_search(&v).ok()
    }

    /// `e^(1)` of the node at position `idx`.
    pub fn output(&self, idx: usize) -> &[f64] {
        &self.out[idx * self.dim..(idx + 1) * self.dim]
    }
}

fn check_global_shapes(store: &ParameterStore) -> Result<()> {
    let w = store.get(ParamId::GlobalWeight);
    let f0 = store.dims().embed_dim;
    if w.cols != 2 * f0 || store.get(ParamId::GlobalBias).cols != w.rows {
        return Err(KcanError::Shape(format!(
            "global layer expects a {}x{} weight",
            w.rows,
            2 * f0
        )));
    }
    Ok(())
}

/// `e_v^(1) = LeakyReLU(W (e_v ‖ e_N(v)) + b)` for each node in `nodes` (sorted, unique).
pub fn global_forward(
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    store: &ParameterStore,
    nodes: Vec<EntityId>,
    exec: ExecPolicy,
) -> Result<GlobalForward> {
    check_global_shapes(store)?;
    let emb = store.get(ParamId::EntityEmbedding);
    let w = store.get(ParamId::GlobalWeight);
    let b = &store.get(ParamId::GlobalBias).data;
    let (rows, cols) = (w.rows, w.cols);
    let f0 = store.dims().embed_dim;
    let per_node = exec.map(&nodes, |_, &v| {
        let mut input = vec![0.0; cols];
        input[..f0].copy_from_slice(emb.row(v as usize));
        for (&(_, t), &p) in graph.neighbors(v).iter().zip(cache.row(v)) {
            axpy(p, emb.row(t as usize), &mut input[f0..]);
        }
        let mut pre = vec![0.0; rows];
        matvec(&w.data, rows, cols, &input, &mut pre);
        axpy(1.0, b, &mut pre);
        (input, pre)
    });
    let mut inputs = Vec::with_capacity(nodes.len() * cols);
    let mut pre = Vec::with_capacity(nodes.len() * rows);
    for (i, p) in per_node {
        inputs.extend(i);
        pre.extend(p);
    }
    let out = pre.iter().map(|&z| leaky_relu(z)).collect();
    Ok(GlobalForward {
        nodes,
        dim: rows,
        inputs,
        pre,
        out,
    })
}

/// Backprop of `grad_out` (one `F1` row per forward node) into entity rows and layer weights.
pub fn global_backward(
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    store: &ParameterStore,
    fwd: &GlobalForward,
    grad_out: &[f64],
    grads: &mut GradientSet,
) {
    let w = store.get(ParamId::GlobalWeight);
    let (rows, cols) = (w.rows, w.cols);
    let f0 = store.dims().embed_dim;
    let mut gz = vec![0.0; rows];
    let mut gin = vec![0.0; cols];
    for (idx, &v) in fwd.nodes.iter().enumerate() {
        let gy = &grad_out[idx * rows..(idx + 1) * rows];
        if gy.iter().all(|&g| g == 0.0) {
            continue;
        }
        let pre = &fwd.pre[idx * rows..(idx + 1) * rows];
        for k in 0..rows {
            gz[k] = gy[k] * leaky_relu_grad(pre[k]);
        }
        let input = &fwd.inputs[idx * cols..(idx + 1) * cols];
        outer_acc(grads.dense_mut(ParamId::GlobalWeight), rows, cols, &gz, input);
        axpy(1.0, &gz, grads.dense_mut(ParamId::GlobalBias));
        gin.fill(0.0);
        matvec_t_acc(&w.data, rows, cols, &gz, &mut gin);
        axpy(1.0, &gin[..f0], grads.row_mut(ParamId::EntityEmbedding, v as usize));
        for (&(_, t), &p) in graph.neighbors(v).iter().zip(cache.row(v)) {
            axpy(p, &gin[f0..], grads.row_mut(ParamId::EntityEmbedding, t as usize));
        }
    }
}

/// Global embeddings `e^(1)` for every entity (inference mode, no dropout).
pub fn kagcn_layer(
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    store: &ParameterStore,
    exec: ExecPolicy,
) -> Result<Tensor> {
    let nodes: Vec<EntityId> = (0..graph.entity_count() as EntityId).collect();
    let fwd = global_forward(graph, cache, store, nodes, exec)?;
    Ok(Tensor {
        rows: graph.entity_count(),
        cols: fwd.dim,
        data: fwd.out,
    })
}
