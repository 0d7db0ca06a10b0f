//! The composed forward and backward pass for one target, the batched ranking
//! loss, and the inference-time model.

use crate::config::{Ablation, TrainConfig};
use crate::error::{KcanError, Result};
use crate::graph::{sample_negative_item, EntityId, UnifiedGraph};
use crate::kagcn::{
    build_attention_cache, global_backward, global_forward, kagcn_layer, AttentionCache, GlobalForward,
};
use crate::lcsan::{lcsan_backward, lcsan_forward, target_repr, Dropout, LcsanTrace, LocalGraph};
use crate::par::ExecPolicy;
use crate::params::{GradientSet, ParamId, ParameterStore, Tensor};
use crate::predictor::{bpr_grad_pos, bpr_loss, output_repr, output_repr_backward, pair_score};
use crate::rng::{derive_seed, stream, tag};
use crate::sampler::{target_subgraph, SubgraphSpec, TargetSubgraph};

/// Source of layer-1 global embeddings `e^(1)`.
#[derive(Debug, Clone, Copy)]
pub enum GlobalRows<'a> {
    Forward(&'a GlobalForward),
    Table(&'a Tensor),
}

impl<'a> GlobalRows<'a> {
    pub fn row(&self, v: EntityId) -> &'a [f64] {
        match *self {
            GlobalRows::Forward(f) => f.output(f.index_of(v).expect("global row computed for node")),
            GlobalRows::Table(t) => t.row(v as usize),
        }
    }
}

/// Forward state of one scored target.
#[derive(Debug, Clone)]
pub struct TargetPass {
    local: LocalGraph,
    use_lc: bool,
    h0: Vec<f64>,
    masks: Vec<f64>,
    target: Vec<f64>,
    trace: Option<LcsanTrace>,
    local_user: Vec<f64>,
    local_item: Vec<f64>,
    out_user: Vec<f64>,
    out_item: Vec<f64>,
    pub score: f64,
}

impl TargetPass {
    pub fn local(&self) -> &LocalGraph {
        &self.local
    }

    pub fn trace(&self) -> Option<&LcsanTrace> {
        self.trace.as_ref()
    }
}

/// Scores `(sg.user, sg.item)`. `e^(1)` rows pass through dropout once and are
/// shared by the LCSAN input, the target representation and the output head.
pub fn target_forward(
    store: &ParameterStore,
    rows: GlobalRows<'_>,
    sg: &TargetSubgraph,
    ablation: Ablation,
    dropout: Option<Dropout>,
    full: bool,
) -> Result<TargetPass> {
    let dims = store.dims();
    let f1 = dims.global_dim();
    let local = LocalGraph::new(sg);
    let n = local.len();
    let mut h0 = vec![0.0; n * f1];
    let mut masks = vec![1.0; n * f1];
    for (p, &v) in local.nodes().iter().enumerate() {
        let src = rows.row(v);
        if src.len() != f1 {
            return Err(KcanError::Shape(format!(
                "global row of width {} where {f1} expected",
                src.len()
            )));
        }
        let mv = &mut masks[p * f1..(p + 1) * f1];
        if let Some(d) = dropout {
            d.fill_row(0, v, mv);
        }
        for k in 0..f1 {
            h0[p * f1 + k] = src[k] * mv[k];
        }
    }
    let (pu, pi) = (local.user(), local.item());
    let g_user = &h0[pu * f1..(pu + 1) * f1];
    let g_item = &h0[pi * f1..(pi + 1) * f1];
    let target = target_repr(g_user, g_item);
    let use_lc = ablation.use_lc();
    let (trace, local_user, local_item) = if use_lc {
        let trace = lcsan_forward(store, &local, &h0, &target, full, dropout)?;
        let (lu, li) = (trace.output(pu).to_vec(), trace.output(pi).to_vec());
        (Some(trace), lu, li)
    } else {
        let z = vec![0.0; dims.local_dim()];
        (None, z.clone(), z)
    };
    let out_user = output_repr(store, g_user, &local_user)?;
    let out_item = output_repr(store, g_item, &local_item)?;
    let score = pair_score(&out_user, &out_item);
    Ok(TargetPass {
        local,
        use_lc,
        h0,
        masks,
        target,
        trace,
        local_user,
        local_item,
        out_user,
        out_item,
        score,
    })
}

/// Gradients w.r.t. the un-dropped `e^(1)` rows of a subgraph's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrads {
    pub nodes: Vec<EntityId>,
    pub width: usize,
    /// `nodes.len() x width`, row-major.
    pub data: Vec<f64>,
}

impl RowGrads {
    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.width..(p + 1) * self.width]
    }

    /// Nonzero rows with their entity ids.
    pub fn iter(&self) -> impl Iterator<Item = (EntityId, &[f64])> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .map(|(p, &v)| (v, self.row(p)))
            .filter(|(_, g)| g.iter().any(|&x| x != 0.0))
    }
}

/// Backprop of `d loss / d score`. Dense parameter gradients go to `grads`;
/// row gradients of `e^(1)` are returned.
pub fn target_backward(
    store: &ParameterStore,
    pass: &TargetPass,
    grad_score: f64,
    grads: &mut GradientSet,
) -> RowGrads {
    let f1 = store.dims().global_dim();
    let n = pass.local.len();
    let (pu, pi) = (pass.local.user(), pass.local.item());
    let g_out_user: Vec<f64> = pass.out_item.iter().map(|x| grad_score * x).collect();
    let g_out_item: Vec<f64> = pass.out_user.iter().map(|x| grad_score * x).collect();
    let h_user = &pass.h0[pu * f1..(pu + 1) * f1];
    let h_item = &pass.h0[pi * f1..(pi + 1) * f1];
    let (gg_user, gl_user) = output_repr_backward(store, h_user, &pass.local_user, &g_out_user, grads);
    let (gg_item, gl_item) = output_repr_backward(store, h_item, &pass.local_item, &g_out_item, grads);

    let mut g_h0 = vec![0.0; n * f1];
    axpy_row(&mut g_h0, pu, f1, &gg_user);
    axpy_row(&mut g_h0, pi, f1, &gg_item);
    if pass.use_lc {
        let trace = pass.trace.as_ref().expect("trace present when LCSAN is active");
        let fl = gl_user.len();
        let mut g_final = vec![0.0; n * fl];
        g_final[pu * fl..(pu + 1) * fl].copy_from_slice(&gl_user);
        g_final[pi * fl..(pi + 1) * fl].copy_from_slice(&gl_item);
        let (g_in, g_target) = lcsan_backward(store, &pass.local, trace, &pass.h0, &pass.target, &g_final, grads);
        g_h0.iter_mut().zip(&g_in).for_each(|(a, b)| *a += b);
        axpy_row(&mut g_h0, pu, f1, &g_target[..f1]);
        axpy_row(&mut g_h0, pi, f1, &g_target[f1..]);
    }
    g_h0.iter_mut().zip(&pass.masks).for_each(|(g, m)| *g *= m);
    RowGrads {
        nodes: pass.local.nodes().to_vec(),
        width: f1,
        data: g_h0,
    }
}

fn axpy_row(buf: &mut [f64], row: usize, width: usize, x: &[f64]) {
    buf[row * width..(row + 1) * width]
        .iter_mut()
        .zip(x)
        .for_each(|(a, b)| *a += b);
}

/// One `(user, positive, negative)` training triple; `index` keys its RNG streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSample {
    pub index: u64,
    pub user: u32,
    pub positive: EntityId,
    pub negative: EntityId,
}

/// Settings shared by every sample of a Phase II batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchContext {
    pub spec: SubgraphSpec,
    pub ablation: Ablation,
    pub dropout: f64,
    pub seed: u64,
    pub epoch: u64,
}

impl BatchContext {
    pub fn from_config(cfg: &TrainConfig, epoch: u64) -> Self {
        BatchContext {
            spec: spec_of(cfg),
            ablation: cfg.ablation,
            dropout: cfg.dropout,
            seed: cfg.seed,
            epoch,
        }
    }

    fn subgraph(
        &self,
        graph: &UnifiedGraph,
        cache: &AttentionCache,
        s: &TrainSample,
        item: EntityId,
        role: u64,
    ) -> TargetSubgraph {
        let user = graph.user_entity(s.user);
        if !self.ablation.use_lc() {
            return TargetSubgraph::empty(user, item);
        }
        let mut rng = stream(self.seed, &[tag::TARGET_SAMPLE, self.epoch, s.index, role]);
        target_subgraph(graph, cache, user, item, self.spec, &mut rng)
    }

    fn dropout(&self, s: &TrainSample, role: u64) -> Option<Dropout> {
        (self.dropout > 0.0).then(|| Dropout {
            rate: self.dropout,
            seed: derive_seed(self.seed, &[tag::DROPOUT, self.epoch, s.index, role]),
        })
    }
}

pub fn spec_of(cfg: &TrainConfig) -> SubgraphSpec {
    SubgraphSpec {
        hops: cfg.hops,
        fanout: cfg.fanout,
        exclude_target_edge: cfg.exclude_target_edge,
    }
}

/// Draws the epoch's negative for every `(user, item)` training pair.
pub fn make_samples(graph: &UnifiedGraph, pairs: &[(u32, u32)], seed: u64, epoch: u64) -> Result<Vec<TrainSample>> {
    pairs
        .iter()
        .enumerate()
        .map(|(k, &(u, i))| {
            let mut rng = stream(seed, &[tag::TARGET_SAMPLE, epoch, k as u64, 2]);
            Ok(TrainSample {
                index: k as u64,
                user: u,
                positive: graph.item_entity(i),
                negative: sample_negative_item(graph, u, &mut rng)?,
            })
        })
        .collect()
}

/// Mean pairwise ranking loss over `samples` and its gradient (no L2 term).
///
/// `e^(1)` is computed once for the union of all subgraph nodes, so its
/// gradient is exact; the attention cache is a constant.
pub fn target_loss_batch(
    store: &ParameterStore,
    graph: &UnifiedGraph,
    cache: &AttentionCache,
    samples: &[TrainSample],
    ctx: &BatchContext,
    exec: ExecPolicy,
) -> Result<(f64, GradientSet)> {
    let mut grads = GradientSet::for_store(store);
    if samples.is_empty() {
        return Ok((0.0, grads));
    }
    let subgraphs = exec.map(samples, |_, s| {
        (
            ctx.subgraph(graph, cache, s, s.positive, 0),
            ctx.subgraph(graph, cache, s, s.negative, 1),
        )
    });
    let mut needed: Vec<EntityId> = subgraphs
        .iter()
        .flat_map(|(a, b)| a.nodes().iter().chain(b.nodes()).copied())
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let use_gk = ctx.ablation.use_gk();
    let fwd = if use_gk {
        Some(global_forward(graph, cache, store, needed, exec)?)
    } else {
        None
    };
    let rows = match &fwd {
        Some(f) => GlobalRows::Forward(f),
        None => GlobalRows::Table(store.get(ParamId::EntityEmbedding)),
    };
    let inv_b = 1.0 / samples.len() as f64;
    let per_sample = exec.map(&subgraphs, |k, (sg_pos, sg_neg)| -> Result<_> {
        let s = &samples[k];
        let pos = target_forward(store, rows, sg_pos, ctx.ablation, ctx.dropout(s, 0), false)?;
        let neg = target_forward(store, rows, sg_neg, ctx.ablation, ctx.dropout(s, 1), false)?;
        let loss = bpr_loss(pos.score, neg.score);
        let g = bpr_grad_pos(pos.score, neg.score) * inv_b;
        let mut local = GradientSet::for_store(store);
        let rows_pos = target_backward(store, &pos, g, &mut local);
        let rows_neg = target_backward(store, &neg, -g, &mut local);
        Ok((loss, local, [rows_pos, rows_neg]))
    });

    let f1 = store.dims().global_dim();
    let mut total = 0.0;
    let mut g_global = fwd.as_ref().map(|f| vec![0.0; f.nodes().len() * f1]);
    for (k, r) in per_sample.into_iter().enumerate() {
        let (loss, local, rows_grad) = r?;
        if !loss.is_finite() {
            return Err(KcanError::NonFinite(format!(
                "target loss of sample {} (user {}, positive {}, negative {})",
                samples[k].index, samples[k].user, samples[k].positive, samples[k].negative
            )));
        }
        total += loss;
        grads.merge(&local);
        for (v, g) in rows_grad.iter().flat_map(RowGrads::iter) {
            match (&mut g_global, &fwd) {
                (Some(buf), Some(f)) => {
                    let idx = f.index_of(v).expect("node in forward set");
                    axpy_row(buf, idx, f1, g);
                }
                _ => grads
                    .row_mut(ParamId::EntityEmbedding, v as usize)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b),
            }
        }
    }
    if let (Some(buf), Some(f)) = (&g_global, &fwd) {
        global_backward(graph, cache, store, f, buf, &mut grads);
    }
    Ok((total * inv_b, grads))
}

/// Attention cache matching the ablation: learned when global attention is on, uniform otherwise.
pub fn cache_for(
    graph: &UnifiedGraph,
    store: &ParameterStore,
    ablation: Ablation,
    epoch: u64,
    exec: ExecPolicy,
) -> AttentionCache {
    if ablation.use_gk() {
        build_attention_cache(graph, store, epoch, exec)
    } else {
        AttentionCache::uniform(graph)
    }
}

/// A trained model ready for scoring and explanation.
#[derive(Debug, Clone)]
pub struct KcanModel<'g> {
    graph: &'g UnifiedGraph,
    store: ParameterStore,
    cache: AttentionCache,
    global: Tensor,
    config: TrainConfig,
}

impl<'g> KcanModel<'g> {
    pub fn new(graph: &'g UnifiedGraph, store: ParameterStore, config: TrainConfig, exec: ExecPolicy) -> Result<Self> {
        if store.dims().entity_count != graph.entity_count() || store.dims().relation_count != graph.relation_count() {
            return Err(KcanError::Shape("parameters do not match the graph".into()));
        }
        let cache = cache_for(graph, &store, config.ablation, 0, exec);
        let global = if config.ablation.use_gk() {
            kagcn_layer(graph, &cache, &store, exec)?
        } else {
            store.get(ParamId::EntityEmbedding).clone()
        };
        Ok(KcanModel {
            graph,
            store,
            cache,
            global,
            config,
        })
    }

    pub fn graph(&self) -> &'g UnifiedGraph {
        self.graph
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn cache(&self) -> &AttentionCache {
        &self.cache
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// The receptive field used to score `(user, item)`; fixed per pair and seed.
    pub fn subgraph(&self, user: EntityId, item: EntityId) -> TargetSubgraph {
        if !self.config.ablation.use_lc() {
            return TargetSubgraph::empty(user, item);
        }
        let mut rng = stream(self.config.seed, &[tag::EVAL_SUBGRAPH, user as u64, item as u64]);
        target_subgraph(self.graph, &self.cache, user, item, spec_of(&self.config), &mut rng)
    }

    /// `ŷ` for a user index and an item entity, without dropout.
    pub fn score(&self, user: u32, item: EntityId) -> Result<f64> {
        let u = self.graph.user_entity(user);
        let sg = self.subgraph(u, item);
        Ok(self.pass(&sg, false)?.score)
    }

    /// Forward pass over an explicit subgraph; `full` evaluates every node at every layer.
    pub fn pass(&self, sg: &TargetSubgraph, full: bool) -> Result<TargetPass> {
        target_forward(
            &self.store,
            GlobalRows::Table(&self.global),
            sg,
            self.config.ablation,
            None,
            full,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::{add_l2_gradient, init_params, l2_penalty};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> UnifiedGraph {
        crate::dataset::toy_graph()
    }

    fn config(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            embed_dim: 4,
            tower: vec![4, 3, 3],
            out_dim: 3,
            fanout: 3,
            ablation,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn composed_gradients_pass_grad_check() {
        let g = toy();
        assert_eq!(g.entity_count(), 10);
        for ablation in Ablation::ALL {
            let cfg = config(ablation);
            let store = init_params(
                &cfg.dims(g.entity_count(), g.relation_count()),
                &mut ChaCha8Rng::seed_from_u64(2),
            )
            .unwrap();
            let cache = cache_for(&g, &store, ablation, 0, ExecPolicy::Sequential);
            let samples = make_samples(&g, g.interactions(), cfg.seed, 0).unwrap();
            let ctx = BatchContext::from_config(&cfg, 0);
            let f = |st: &ParameterStore| {
                let (l, mut gr) = target_loss_batch(st, &g, &cache, &samples, &ctx, ExecPolicy::Sequential)?;
                add_l2_gradient(st, cfg.lambda, &mut gr);
                Ok((l + l2_penalty(st, cfg.lambda), gr))
            };
            let r = grad_check(f, &store, 300, 1e-4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            assert!(
                r.passes(1e-4),
                "{ablation}: {:?}",
                r.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            );
        }
    }

    #[test]
    fn policies_agree_bitwise() {
        let g = toy();
        let cfg = config(Ablation::Full);
        let store = init_params(
            &cfg.dims(g.entity_count(), g.relation_count()),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let cache = cache_for(&g, &store, cfg.ablation, 0, ExecPolicy::Sequential);
        let samples = make_samples(&g, g.interactions(), cfg.seed, 0).unwrap();
        let ctx = BatchContext::from_config(&cfg, 0);
        let a = target_loss_batch(&store, &g, &cache, &samples, &ctx, ExecPolicy::Sequential).unwrap();
        let b = target_loss_batch(&store, &g, &cache, &samples, &ctx, ExecPolicy::Parallel).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn no_lc_matches_zeroed_local_pathway() {
        let g = toy();
        let full = config(Ablation::Full);
        let store = init_params(
            &full.dims(g.entity_count(), g.relation_count()),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let m_nolc = KcanModel::new(
            &g,
            store.clone(),
            full.with_ablation(Ablation::NoLc),
            ExecPolicy::Sequential,
        )
        .unwrap();
        let m_full = KcanModel::new(&g, store.clone(), full.clone(), ExecPolicy::Sequential).unwrap();
        let (u, i) = (g.user_entity(0), g.item_entity(2));
        let y = m_nolc.score(0, i).unwrap();
        let pass = m_full.pass(&TargetSubgraph::empty(u, i), false).unwrap();
        let f1 = store.dims().global_dim();
        let zero = vec![0.0; store.dims().local_dim()];
        let eu = output_repr(&store, &pass.h0[pass.local.user() * f1..][..f1], &zero).unwrap();
        let ei = output_repr(&store, &pass.h0[pass.local.item() * f1..][..f1], &zero).unwrap();
        assert_eq!(y.to_bits(), pair_score(&eu, &ei).to_bits());
    }
}
